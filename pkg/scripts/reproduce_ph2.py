"""Run the skin preset over a PH2-style folder and compare with the reference row.

The folder must hold images plus masks named ``<id><suffix>.<ext>`` (default
suffix ``_lesion``). Nothing is downloaded.

    python3 scripts/reproduce_ph2.py /data/ph2 --out runs/ph2 --jobs 4
"""

import argparse

from s3seg import pipeline as P

REFERENCE = {"dsc": 88.0, "hm": 20.4, "xor": 22.0}


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("data")
    ap.add_argument("--out", default="runs/ph2")
    ap.add_argument("--mask-suffix", default="_lesion")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = P.build_config({"preset": "skin", "seed": str(args.seed), "out_dir": args.out})
    report, results = P.run_batch(cfg, args.data, args.out, args.mask_suffix, args.jobs)
    failed = [r.image_id for r in results if r.error]
    if report is None:
        raise SystemExit("no masks found; nothing to score")
    print(report.table(), end="")
    for key, ref in REFERENCE.items():
        got = getattr(report, key)
        print(f"{key.upper():>4}: {got:.4g}  (reference {ref}, delta {got - ref:+.4g})")
    if failed:
        print(f"{len(failed)} image(s) failed: {', '.join(failed)}")


if __name__ == "__main__":
    main()
