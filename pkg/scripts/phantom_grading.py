"""Grade 200 synthetic phantoms end to end with the default network.

    python3 scripts/phantom_grading.py --workdir runs/grading
"""
import argparse
import json
import time
from pathlib import Path

from gliograd.experiments import grading_experiment
from gliograd.roi import AugmentParams
from gliograd.training import HyperParams


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--workdir", default="runs/grading")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--budget", type=float, default=900.0, help="training wall-clock budget in seconds")
    p.add_argument("--no-augment", action="store_true")
    a = p.parse_args()
    t0 = time.time()
    out = grading_experiment(a.workdir, n=a.n, seed=a.seed, hyper=HyperParams.grading(seed=a.seed),
                             augment=None if a.no_augment else AugmentParams(), time_budget_s=a.budget,
                             progress=lambda r: print(r.to_json(time.time() - t0), flush=True))
    summary = {"accuracy": out.accuracy, "roc_auc": out.roc_auc, "train_seconds": out.train_seconds,
               "best_epoch": out.best_epoch, "epochs_run": out.epochs_run}
    Path(a.workdir, "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))


if __name__ == "__main__":
    main()
