"""Compare standardization modes on phantoms with an offset background.

Trains a whole-brain ROI grader per mode, measures how much guided-backprop
energy falls in the outer brain shell, and trains a tumour ROI grader per
mode for accuracy.

    python3 scripts/border_study.py --workdir runs/border
"""
import argparse
import json
import time
from pathlib import Path

from gliograd.experiments import border_study


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--workdir", default="runs/border")
    p.add_argument("--n", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--extent", type=int, default=48)
    p.add_argument("--background-offset", type=float, default=1.0)
    a = p.parse_args()
    t0 = time.time()
    res = border_study(a.workdir, n=a.n, seed=a.seed, extent=a.extent, background_offset=a.background_offset,
                       progress=lambda r: print(r.to_json(time.time() - t0), flush=True))
    Path(a.workdir, "border_study.json").write_text(json.dumps(res.to_dict(), indent=2) + "\n")
    print(json.dumps({k: v for k, v in res.to_dict().items() if k != "per_subject"}))


if __name__ == "__main__":
    main()
