"""Run the grading pipeline on a local BRATS training tree.

Expects ``<root>/HGG/<subject>/`` and ``<root>/LGG/<subject>/`` folders with
``*_t1``, ``*_t1ce``, ``*_t2``, ``*_flair`` and ``*_seg`` NIfTI files.  Subjects
are converted once into containers under ``<workdir>/raw``; preprocessing,
training and evaluation then follow the phantom experiment exactly.  With
``--seg-checkpoint`` the test ROIs come from predicted tumour masks (training
keeps the manual ones).

    python3 scripts/brats_grading.py --brats /data/BRATS2017/Training --workdir runs/brats
"""
import argparse
import json
import time
from pathlib import Path

from gliograd.checkpoint import load_checkpoint
from gliograd.experiments import grading_experiment
from gliograd.io import import_nifti_minimal, write_volume
from gliograd.roi import AugmentParams
from gliograd.training import HyperParams


def convert(brats: Path, raw: Path) -> int:
    n = 0
    for grade in ("HGG", "LGG"):
        for subj in sorted(p for p in (brats / grade).iterdir() if p.is_dir()):
            dst = raw / subj.name
            if not (dst / "meta.json").exists():
                write_volume(import_nifti_minimal(subj, grade), dst)
            n += 1
    return n


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--brats", required=True, type=Path)
    p.add_argument("--workdir", default="runs/brats", type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--seg-checkpoint", default=None, help="segmenter used for test-time tumour boxes")
    p.add_argument("--budget", type=float, default=None, help="optional training wall-clock budget (s)")
    a = p.parse_args()
    n = convert(a.brats, a.workdir / "raw")
    print(f"converted {n} subjects", flush=True)
    seg = load_checkpoint(a.seg_checkpoint, "seg") if a.seg_checkpoint else None
    t0 = time.time()
    out = grading_experiment(a.workdir, n=n, seed=a.seed, hyper=HyperParams.grading(seed=a.seed, max_epochs=a.epochs),
                             augment=AugmentParams(), time_budget_s=a.budget, test_seg_model=seg,
                             progress=lambda r: print(r.to_json(time.time() - t0), flush=True))
    (a.workdir / "report.json").write_text(json.dumps(out.report, indent=2) + "\n")
    print(json.dumps({"accuracy": out.accuracy, "roc_auc": out.roc_auc, "best_epoch": out.best_epoch}))


if __name__ == "__main__":
    main()
