"""Train on noisy-disk images and print per-seed DSC / HM / XOR.

    python3 scripts/synthetic_demo.py --seeds 10
    python3 scripts/synthetic_demo.py --seeds 3 --default-model   # full-size encoder
"""

import argparse
import time

from s3seg import metrics as Me
from s3seg.model import ModelConfig
from s3seg.synthetic import run_seeds, small_image_model


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--default-model", action="store_true",
                    help="use the default encoder instead of the 64x64-sized one")
    args = ap.parse_args()

    cfg = ModelConfig(dtype="float32") if args.default_model else small_image_model()
    t0 = time.perf_counter()
    report = Me.aggregate(run_seeds(range(args.seeds), cfg))
    print(report.table(), end="")
    hits = sum(m.dsc >= 90 for m in report.images)
    print(f"DSC >= 90 on {hits}/{len(report.images)} seeds, {time.perf_counter() - t0:.1f} s")


if __name__ == "__main__":
    main()
