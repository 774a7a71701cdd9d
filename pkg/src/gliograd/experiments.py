"""Desk-scale phantom experiments (grading, segmentation, border study)."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .interpret import border_energy_fraction, guided_backprop
from .io import VolumeDataset, read_volume, write_volume
from .metrics import dice, report
from .models import GradeNetConfig, SegNetConfig, build_grade_net, build_seg_net
from .phantom import generate_phantom, phantom_cohort
from .pipeline import MaskSource, PreprocessConfig, RoiDataset, preprocess_subject
from .roi import AugmentParams, split_dataset, standardize
from .training import (HyperParams, SegSample, predict_grade, segment_whole_tumor, train_grading,
                       train_segmentation)


def synth_tree(root, n: int, seed: int, extent: int = 96, noise: float = 0.05,
               background_offset: float = 1.0) -> list[Path]:
    """Write ``n`` balanced phantom subjects as containers under ``root``."""
    root = Path(root)
    out = []
    for i, spec in enumerate(phantom_cohort(n, seed, extent, noise, background_offset)):
        sid = f"sub-{i:04d}"
        out.append(write_volume(generate_phantom(spec, subject_id=sid), root / sid))
    return out


def split_tree(root, seed: int):
    ds = VolumeDataset(root)
    return split_dataset(dict(zip(ds.subject_ids, ds.grades)), seed=seed, min_per_grade=3)


def preprocess_split(raw_root, roi_root, subjects, cfg: PreprocessConfig, seg_model=None, tile=None) -> None:
    for sid in subjects:
        dst = Path(roi_root) / sid
        if not (dst / "meta.json").exists():
            write_volume(preprocess_subject(read_volume(Path(raw_root) / sid), cfg, seg_model, tile), dst)


@dataclass
class GradingOutcome:
    accuracy: float
    roc_auc: float
    train_seconds: float
    best_epoch: int
    epochs_run: int
    report: dict = field(default_factory=dict)


def grading_experiment(workdir, n: int = 200, seed: int = 0, hyper: HyperParams | None = None,
                       config: GradeNetConfig | None = None, augment: AugmentParams | None = None,
                       pre: PreprocessConfig | None = None, background_offset: float = 1.0,
                       extent: int = 96, time_budget_s: float | None = None, progress=None,
                       test_seg_model=None, seg_tile: int | None = None) -> GradingOutcome:
    """Synthesize (unless ``workdir/raw`` exists), split, preprocess, train, grade the test split.

    With ``test_seg_model`` the test ROIs are cut around predicted tumour
    masks while training and validation keep the manual ones.
    """
    workdir = Path(workdir)
    raw = workdir / "raw"
    if not raw.exists():
        synth_tree(raw, n, seed, extent=extent, background_offset=background_offset)
    split = split_tree(raw, seed)
    pre = pre or PreprocessConfig()
    roi = workdir / f"roi-{pre.standardization.value}-{pre.roi.value}"
    if test_seg_model is None:
        preprocess_split(raw, roi, split.train + split.val + split.test, pre)
        test_roi = roi
    else:
        preprocess_split(raw, roi, split.train + split.val, pre)
        test_roi = workdir / f"roi-{pre.standardization.value}-{pre.roi.value}-predicted"
        preprocess_split(raw, test_roi, split.test, replace(pre, mask_source=MaskSource.PREDICTED),
                         test_seg_model, seg_tile)
    config = config or GradeNetConfig(input_extent=pre.extent)
    hyper = hyper or HyperParams.grading(seed=seed)
    model = build_grade_net(config, seed=seed)
    res = train_grading(model, RoiDataset(roi, split.train), RoiDataset(roi, split.val), hyper, augment,
                        log_path=workdir / "train-grade.jsonl", time_budget_s=time_budget_s, progress=progress)
    test = RoiDataset(test_roi, split.test)
    preds = []
    for i, sid in enumerate(test.ids):
        img, _, _ = test.load(i)
        preds.append(predict_grade(res.model, img).as_prediction(sid, test.ds.grades[i]))
    rep = report(preds)
    return GradingOutcome(rep.accuracy, rep.roc_auc, res.elapsed_s, res.best_epoch, len(res.history),
                          rep.to_dict())


@dataclass
class SegOutcome:
    mean_dice: float
    dices: list[float]
    train_seconds: float
    best_epoch: int


def seg_experiment(workdir, n_train: int = 12, n_val: int = 2, n_test: int = 6, seed: int = 0,
                   extent: int = 64, hyper: HyperParams | None = None, config: SegNetConfig | None = None,
                   tile: int | None = None, time_budget_s: float | None = None, progress=None) -> SegOutcome:
    specs = phantom_cohort(n_train + n_val + n_test, seed, extent=extent)

    def sample(spec, i):
        vs = standardize(generate_phantom(spec, subject_id=f"seg-{i}"), "brain-mask")
        return SegSample(vs.channels, vs.tumor_mask, vs.brain_mask, vs.subject_id)

    data = [sample(s, i) for i, s in enumerate(specs)]
    train, val, test = data[:n_train], data[n_train : n_train + n_val], data[n_train + n_val :]
    model = build_seg_net(config or SegNetConfig(), seed=seed)
    hyper = hyper or HyperParams.segmentation(seed=seed)
    res = train_segmentation(model, train, val, hyper, log_path=Path(workdir) / "train-seg.jsonl",
                             time_budget_s=time_budget_s, progress=progress)
    dices = [dice(segment_whole_tumor(res.model, s.channels, tile=tile, brain=s.brain), s.tumor) for s in test]
    return SegOutcome(float(np.mean(dices)), dices, res.elapsed_s, res.best_epoch)


@dataclass
class BorderStudy:
    median_bef: dict[str, float]
    paired_lower_fraction: float
    accuracy: dict[str, float]
    per_subject: dict[str, list[float]]

    def to_dict(self) -> dict:
        return asdict(self)


def border_study(workdir, n: int = 60, seed: int = 0, extent: int = 48, background_offset: float = 1.0,
                 hyper: HyperParams | None = None, config: GradeNetConfig | None = None,
                 n_explain: int | None = None, width: int = 3, progress=None) -> BorderStudy:
    """Train one grader per standardization mode on offset-background phantoms and compare
    how much GBP energy falls on the brain border (whole-brain ROI) and tumour-ROI accuracy."""
    workdir = Path(workdir)
    raw = workdir / "raw"
    if not raw.exists():
        synth_tree(raw, n, seed, extent=extent, background_offset=background_offset)
    split = split_tree(raw, seed)
    config = config or GradeNetConfig(input_extent=extent, stem_width=8, widths=(8, 16, 16, 32),
                                      pool_before=(True, False, False, False), fc_widths=(16,))
    hyper = hyper or HyperParams.grading(seed=seed, lr=1e-3, max_epochs=8, patience=8, batch_size=8)
    test_ids = split.test if n_explain is None else split.test[:n_explain]
    bef: dict[str, list[float]] = {}
    acc: dict[str, float] = {}
    for mode in ("whole-image", "brain-mask"):
        for roi_kind in ("whole-brain", "tumor"):
            pre = PreprocessConfig(standardization=mode, roi=roi_kind, extent=extent)
            roi = workdir / f"roi-{mode}-{roi_kind}"
            preprocess_split(raw, roi, split.train + split.val + split.test, pre)
            model = build_grade_net(config, seed=seed)
            res = train_grading(model, RoiDataset(roi, split.train), RoiDataset(roi, split.val), hyper,
                                log_path=workdir / f"train-{mode}-{roi_kind}.jsonl", progress=progress)
            test = RoiDataset(roi, split.test)
            preds = [predict_grade(res.model, test.load(i)[0]).as_prediction(sid, test.ds.grades[i])
                     for i, sid in enumerate(test.ids)]
            if roi_kind == "tumor":
                acc[mode] = report(preds).accuracy
            else:
                vals = []
                for sid in test_ids:
                    vs = read_volume(roi / sid)
                    m = guided_backprop(res.model, vs.channels)
                    vals.append(border_energy_fraction(m, vs.brain_mask, width))
                bef[mode] = vals
    wi, bm = np.array(bef["whole-image"]), np.array(bef["brain-mask"])
    return BorderStudy({k: float(np.median(v)) for k, v in bef.items()}, float(np.mean(bm < wi)), acc,
                       {k: [float(x) for x in v] for k, v in bef.items()})


def timed(fn, *a, **kw):
    t = time.perf_counter()
    out = fn(*a, **kw)
    return out, time.perf_counter() - t
