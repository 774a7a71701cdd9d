"""Command-line entry point: ``gliograd <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Errors are printed to stderr as a single JSON line.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .errors import DataError, GliogradError, NumericalError

SEED_ENV = "GLIOGRAD_SEED"


class UsageError(GliogradError):
    exit_code = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _bools(text: str) -> tuple[bool, ...]:
    return tuple(bool(v) for v in _ints(text))


def resolve_seed(seed: int | None) -> int:
    if seed is not None:
        return seed
    env = os.environ.get(SEED_ENV)
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None


def _add_seed(p):
    p.add_argument("--seed", type=int, default=None, help=f"random seed (default: ${SEED_ENV} or 0)")


# ------------------------------------------------------------------ commands

def cmd_synth(a) -> int:
    from .experiments import synth_tree

    paths = synth_tree(a.out, a.n, resolve_seed(a.seed), a.extent, a.noise, a.background_offset)
    print(f"wrote {len(paths)} phantom subjects to {a.out}")
    return 0


def _preprocess_one(args):
    src, dst, cfg, seg_ckpt, tile = args
    from .checkpoint import load_checkpoint
    from .io import read_volume, write_volume
    from .pipeline import preprocess_subject

    seg = load_checkpoint(seg_ckpt, "seg") if seg_ckpt else None
    write_volume(preprocess_subject(read_volume(src), cfg, seg, tile), dst)
    return dst.name


def cmd_preprocess(a) -> int:
    from .io import list_subjects
    from .pipeline import MaskSource, PreprocessConfig

    cfg = PreprocessConfig(a.standardization, a.roi, a.mask_source, a.extent, a.margin)
    if cfg.mask_source is MaskSource.PREDICTED and not a.seg_checkpoint:
        raise UsageError("--mask-source predicted requires --seg-checkpoint")
    jobs = [(d, Path(a.out) / d.name, cfg, a.seg_checkpoint, a.tile) for d in list_subjects(a.data)]
    if not jobs:
        raise DataError(f"{a.data}: no subject containers found")
    if a.jobs > 1:
        with ProcessPoolExecutor(a.jobs) as ex:
            done = list(ex.map(_preprocess_one, jobs))
    else:
        done = [_preprocess_one(j) for j in jobs]
    print(f"preprocessed {len(done)} subjects into {a.out}")
    return 0


def _hyper(a, kind: str):
    from .training import HyperParams

    base = HyperParams.grading if kind == "grade" else HyperParams.segmentation
    kw = dict(lr=a.lr, weight_decay=a.weight_decay, dropout=a.dropout, batch_size=a.batch_size,
              max_epochs=a.epochs, patience=a.patience, seed=resolve_seed(a.seed))
    if kind == "seg":
        kw["steps_per_epoch"] = a.steps_per_epoch
    return base(**kw)


def _print_epoch(rec):
    print(f"epoch {rec.epoch:3d}  train_loss {rec.train_loss:.4f}  val_loss {rec.val_loss:.4f}  "
          f"val_metric {rec.val_metric:.4f}{'  *' if rec.best else ''}", flush=True)


def _write_split(split, path: Path) -> None:
    from .io import write_json

    write_json(split.as_dict(), path)


def cmd_train_grade(a) -> int:
    from .io import VolumeDataset
    from .models import GradeNetConfig, build_grade_net
    from .pipeline import RoiDataset
    from .roi import AugmentParams, split_dataset
    from .training import train_grading

    hyper = _hyper(a, "grade")
    ds = VolumeDataset(a.data)
    if len(ds) == 0:
        raise DataError(f"{a.data}: no ROI containers found")
    extent = int(ds._meta[0]["dims"][0])
    split = split_dataset(dict(zip(ds.subject_ids, ds.grades)), seed=hyper.seed, min_per_grade=a.min_per_grade)
    cfg = GradeNetConfig(input_extent=extent, stem_width=a.stem_width, widths=a.widths,
                         pool_before=a.pool_before or _default_pools(len(a.widths)),
                         fc_widths=a.fc_widths, dropout=a.dropout)
    model = build_grade_net(cfg, seed=hyper.seed)
    aug = AugmentParams(seed=hyper.seed) if a.augment else None
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_split(split, out.with_suffix(".split.json"))
    res = train_grading(model, RoiDataset(a.data, split.train), RoiDataset(a.data, split.val), hyper, aug,
                        log_path=a.log or out.with_suffix(".jsonl"), checkpoint_path=out, progress=_print_epoch)
    print(f"best epoch {res.best_epoch} (val accuracy {res.best_metric:.4f}); checkpoint {out}")
    return 0


def _default_pools(n: int) -> tuple[bool, ...]:
    from .models import GradeNetConfig

    d = GradeNetConfig().pool_before
    return d if n == len(d) else (True,) + (False,) * (n - 1)


def cmd_train_seg(a) -> int:
    from .io import VolumeDataset
    from .models import SegNetConfig, build_seg_net
    from .roi import standardize
    from .training import SegSample, train_segmentation

    hyper = _hyper(a, "seg")
    ds = VolumeDataset(a.data)
    if len(ds) < 2:
        raise DataError(f"{a.data}: need at least two subjects with tumour masks")
    rng = np.random.default_rng(hyper.seed)
    order = rng.permutation(len(ds))
    n_val = max(1, int(round(a.val_fraction * len(ds))))
    samples = []
    for i in order:
        vs = ds[int(i)]
        if vs.tumor_mask is None:
            raise DataError(f"{ds.dirs[int(i)]}: missing channel 'mask_tumor' needed for segmentation")
        s = standardize(vs, a.standardization)
        samples.append(SegSample(s.channels, s.tumor_mask, s.brain_mask, s.subject_id))
    cfg = SegNetConfig(patch=a.patch, widths=a.widths, levels=len(a.widths), spatial_dropout=a.dropout)
    model = build_seg_net(cfg, seed=hyper.seed)
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    res = train_segmentation(model, samples[n_val:], samples[:n_val], hyper,
                             log_path=a.log or out.with_suffix(".jsonl"), checkpoint_path=out,
                             progress=_print_epoch)
    print(f"best epoch {res.best_epoch} (val soft Dice {res.best_metric:.4f}); checkpoint {out}")
    return 0


def _select_subjects(a) -> list[str] | None:
    if a.split is None:
        return None
    from .io import read_json

    split = read_json(a.split)
    if a.subset not in split:
        raise DataError(f"{a.split}: no subset {a.subset!r}")
    return list(split[a.subset])


def cmd_predict(a) -> int:
    from .checkpoint import load_checkpoint
    from .metrics import predictions_to_json
    from .pipeline import RoiDataset
    from .training import predict_grade

    model = load_checkpoint(a.checkpoint, "grade")
    data = RoiDataset(a.data, _select_subjects(a))
    preds = []
    for i, sid in enumerate(data.ids):
        img, _, _ = data.load(i)
        preds.append(predict_grade(model, img).as_prediction(sid, data.ds.grades[i]))
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(predictions_to_json(preds))
    print(f"wrote {len(preds)} predictions to {out}")
    return 0


def cmd_evaluate(a) -> int:
    from .metrics import predictions_from_json, report

    preds = predictions_from_json(Path(a.predictions).read_text())
    try:
        rep = report(preds)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    if a.out:
        Path(a.out).write_text(rep.to_json())
    sys.stdout.write(rep.to_text())
    return 0


def cmd_explain(a) -> int:
    from .checkpoint import load_checkpoint
    from .interpret import gradcam, guided_backprop, overlay_slice, save_png, upsample_map_to_input
    from .io import read_volume, write_array

    model = load_checkpoint(a.checkpoint, "grade")
    vs = read_volume(a.volume)
    out = Path(a.out)
    cls = None if a.predicted_class else a.cls
    bg = vs.channels[a.background]
    maps = {}
    if a.method in ("gbp", "both"):
        maps["gbp"] = guided_backprop(model, vs.channels, cls)
    if a.method in ("gradcam", "both"):
        for tap in a.taps.split(","):
            m = gradcam(model, vs.channels, cls, tap=tap)
            maps[f"gradcam-{tap}"] = upsample_map_to_input(m, vs.shape)
    summary = {}
    for name, m in maps.items():
        write_array(m.values, out / name, name)
        idx = a.slice if a.slice is not None else vs.shape[a.axis] // 2
        save_png(overlay_slice(bg, m.values, a.axis, idx, a.opacity), out / f"{name}_axis{a.axis}_{idx}.png")
        summary[name] = {"class": m.class_index, "logits": [float(v) for v in np.ravel(m.logits)]}
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    print(f"wrote {len(maps)} explanation maps to {out}")
    return 0


def cmd_repro_border_study(a) -> int:
    from .experiments import border_study
    from .io import write_json
    from .training import HyperParams

    seed = resolve_seed(a.seed)
    hyper = HyperParams.grading(seed=seed, lr=a.lr, max_epochs=a.epochs, patience=a.epochs, batch_size=a.batch_size)
    res = border_study(a.out, n=a.n, seed=seed, extent=a.extent, background_offset=a.background_offset,
                       hyper=hyper, width=a.width)
    write_json(res.to_dict(), Path(a.out) / "border_study.json")
    print(f"{'mode':<12}{'median BEF':>12}{'tumor-ROI acc':>15}")
    for mode in ("whole-image", "brain-mask"):
        print(f"{mode:<12}{res.median_bef[mode]:>12.4f}{res.accuracy[mode]:>15.4f}")
    print(f"subjects with lower BEF in brain-mask mode: {res.paired_lower_fraction:.2%}")
    return 0


# ------------------------------------------------------------------ parser

class _Formatter(argparse.HelpFormatter):
    """Appends ``(default: ...)`` unless the default is None or already described."""

    def _get_help_string(self, action):
        text = action.help or ""
        d = action.default
        if d is None or d is argparse.SUPPRESS or "(default" in text or action.option_strings[:1] == ["-h"]:
            return text
        if isinstance(action, argparse._StoreFalseAction):
            return text
        if isinstance(d, tuple):
            d = ",".join(str(int(v)) for v in d)
        return f"{text} (default: {d})".strip().replace("%", "%%")


def build_parser() -> argparse.ArgumentParser:
    fmt = _Formatter
    p = _Parser(prog="gliograd", description="3D CNN glioma grading with saliency QA", formatter_class=fmt)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate phantom subjects", formatter_class=fmt)
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--n", type=int, default=200, help="number of subjects (balanced HGG/LGG)")
    s.add_argument("--extent", type=int, default=96, help="volume edge length in voxels")
    s.add_argument("--noise", type=float, default=0.05, help="Gaussian noise sigma inside the brain")
    s.add_argument("--background-offset", type=float, default=1.0, help="brain intensity baseline")
    _add_seed(s)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", help="standardize and extract ROIs", formatter_class=fmt)
    s.add_argument("--data", required=True, help="dataset of subject containers")
    s.add_argument("--out", required=True, help="output ROI dataset directory")
    s.add_argument("--standardization", choices=["brain-mask", "whole-image"], default="brain-mask",
                   help="intensity standardization")
    s.add_argument("--roi", choices=["tumor", "whole-brain"], default="tumor", help="ROI box source")
    s.add_argument("--mask-source", choices=["manual", "predicted"], default="manual",
                   help="tumour mask used for the ROI box")
    s.add_argument("--seg-checkpoint", default=None, help="segmentation checkpoint (predicted masks)")
    s.add_argument("--tile", type=int, default=None, help="sliding-window input tile (default: training patch)")
    s.add_argument("--extent", type=int, default=96, help="ROI edge length after resizing")
    s.add_argument("--margin", type=int, default=10, help="tumour box margin in voxels")
    s.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    s.set_defaults(func=cmd_preprocess)

    for name, kind in (("train-grade", "grade"), ("train-seg", "seg")):
        s = sub.add_parser(name, help=f"train the {'grading' if kind == 'grade' else 'segmentation'} network",
                           formatter_class=fmt)
        s.add_argument("--data", required=True, help="dataset directory")
        s.add_argument("--out", required=True, help="checkpoint path")
        s.add_argument("--log", default=None, help="JSON-lines epoch log (default: <out>.jsonl)")
        g = kind == "grade"
        s.add_argument("--lr", type=float, default=1e-4 if g else 5e-5, help="Adam learning rate")
        s.add_argument("--weight-decay", type=float, default=1e-4 if g else 1e-6, help="L2 weight decay")
        s.add_argument("--dropout", type=float, default=0.4 if g else 0.05,
                       help="dropout" if g else "spatial dropout probability")
        s.add_argument("--batch-size", type=int, default=8 if g else 4, help="mini-batch size")
        s.add_argument("--epochs", type=int, default=100, help="maximum epochs")
        s.add_argument("--patience", type=int, default=15, help="early-stopping patience (epochs)")
        _add_seed(s)
        if g:
            s.add_argument("--stem-width", type=int, default=16, help="stem convolution width")
            s.add_argument("--widths", type=_ints, default=(16, 32, 64, 128), help="residual block widths")
            s.add_argument("--pool-before", type=_bools, default=None,
                           help="0/1 per block: max-pool before it (default: 1,1,0,1)")
            s.add_argument("--fc-widths", type=_ints, default=(64,), help="1x1x1 cascade widths")
            s.add_argument("--min-per-grade", type=int, default=5, help="minimum subjects per grade")
            aug = s.add_mutually_exclusive_group()
            aug.add_argument("--augment", dest="augment", action="store_true", default=True,
                             help="on-the-fly augmentation")
            aug.add_argument("--no-augment", dest="augment", action="store_false", help="disable augmentation")
            s.set_defaults(func=cmd_train_grade)
        else:
            s.add_argument("--patch", type=int, default=64, help="training patch edge length")
            s.add_argument("--widths", type=_ints, default=(16, 32, 64), help="encoder widths (one per level)")
            s.add_argument("--steps-per-epoch", type=int, default=25, help="patch batches per epoch")
            s.add_argument("--val-fraction", type=float, default=0.2, help="share of subjects held out")
            s.add_argument("--standardization", choices=["brain-mask", "whole-image"], default="brain-mask",
                           help="intensity standardization")
            s.set_defaults(func=cmd_train_seg)

    s = sub.add_parser("predict", help="grade ROIs with a checkpoint", formatter_class=fmt)
    s.add_argument("--checkpoint", required=True, help="grading checkpoint")
    s.add_argument("--data", required=True, help="ROI dataset directory")
    s.add_argument("--out", required=True, help="predictions JSON")
    sel = s.add_mutually_exclusive_group()
    sel.add_argument("--split", default=None, help="split JSON written by train-grade")
    sel.add_argument("--all", action="store_true", help="predict every subject (default)")
    s.add_argument("--subset", choices=["train", "val", "test"], default="test", help="split part used with --split")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("explain", help="GBP / Grad-CAM maps and PNG overlays", formatter_class=fmt)
    s.add_argument("--checkpoint", required=True, help="grading checkpoint")
    s.add_argument("--volume", required=True, help="one ROI container directory")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--method", choices=["gbp", "gradcam", "both"], default="both", help="explanation method")
    s.add_argument("--taps", default="res3,res4", help="Grad-CAM layers")
    cls = s.add_mutually_exclusive_group()
    cls.add_argument("--class", dest="cls", type=int, choices=[0, 1], default=None,
                     help="explain this class (0=LGG, 1=HGG)")
    cls.add_argument("--predicted-class", action="store_true", help="explain the predicted class (default)")
    s.add_argument("--axis", type=int, choices=[0, 1, 2], default=0, help="slicing axis for PNGs")
    s.add_argument("--slice", type=int, default=None, help="slice index (default: middle)")
    s.add_argument("--background", type=int, choices=[0, 1, 2, 3], default=1, help="channel for grayscale")
    s.add_argument("--opacity", type=float, default=0.6, help="overlay opacity")
    s.set_defaults(func=cmd_explain)

    s = sub.add_parser("evaluate", help="metrics report from a predictions file", formatter_class=fmt)
    s.add_argument("--predictions", required=True, help="predictions JSON from predict")
    s.add_argument("--out", default=None, help="optional JSON report path")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("repro-border-study", help="standardization-mode border study on phantoms",
                       formatter_class=fmt)
    s.add_argument("--out", required=True, help="work directory")
    s.add_argument("--n", type=int, default=60, help="number of phantoms")
    s.add_argument("--extent", type=int, default=48, help="phantom edge length")
    s.add_argument("--background-offset", type=float, default=1.0, help="brain intensity baseline")
    s.add_argument("--epochs", type=int, default=8, help="training epochs per model")
    s.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate")
    s.add_argument("--batch-size", type=int, default=8, help="mini-batch size")
    s.add_argument("--width", type=int, default=3, help="border shell width in voxels")
    _add_seed(s)
    s.set_defaults(func=cmd_repro_border_study)
    return p


def _fail(exc: BaseException, code: int) -> int:
    line = json.dumps({"error": type(exc).__name__, "exit_code": code, "message": str(exc)}, sort_keys=True)
    print(line, file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except GliogradError as exc:
        return _fail(exc, exc.exit_code)
    except (FileNotFoundError, ValueError, KeyError) as exc:
        return _fail(exc, 2)
    except (FloatingPointError, ArithmeticError) as exc:
        return _fail(exc, 3)


if __name__ == "__main__":
    sys.exit(main())
