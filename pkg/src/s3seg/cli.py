"""Command-line entry point: ``s3seg segment|ablate|eval|check-grads``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import metrics as Me
from . import pipeline as P


def _config_layers(args) -> list[dict[str, str]]:
    file_layer = P.parse_kv(Path(args.config).read_text()) if args.config else {}
    cli_layer: dict[str, str] = {}
    if getattr(args, "preset", None):
        cli_layer["preset"] = args.preset
    seed = P.resolve_seed(getattr(args, "seed", None), file_layer.get("seed"))
    if seed is not None:
        cli_layer["seed"] = str(seed)
    for item in getattr(args, "set", None) or []:
        k, _, v = item.partition("=")
        cli_layer[k.strip()] = v.strip()
    if getattr(args, "out", None):
        cli_layer["out_dir"] = args.out
    return [file_layer, cli_layer]


def cmd_segment(args) -> int:
    cfg = P.build_config(*_config_layers(args))
    report, results = P.run_batch(cfg, args.input, cfg.out_dir, args.mask_suffix, args.jobs,
                                  checkpoint=args.save_params)
    for r in results:
        if r.error:
            print(f"FAILED {r.image_id}: {r.error}", file=sys.stderr)
    if report is not None:
        print(report.table(), end="")
    else:
        print(f"segmented {len(results)} image(s); no ground truth, metrics skipped")
    return 1 if any(r.error for r in results) else 0


def cmd_ablate(args) -> int:
    from .trainer import ablation_presets, run_ablation

    cfg = P.build_config(*_config_layers(args))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sample = P.load_image(args.input, args.mask_suffix)
    mcfg = dataclasses.replace(cfg.model, in_channels=sample.channels)
    rows = run_ablation(P.preprocess(sample), ablation_presets(cfg.weights), mcfg, cfg.optim,
                        cfg.ranges, gt=sample.gt)
    lines = [f"{'L_ce':>6} {'L_AT':>6} {'L_S':>6} {'DSC':>8} {'HM':>8} {'XOR':>8} {'surrogate':>9}"]
    records = []
    for i, row in enumerate(rows):
        w = row.weights
        P.save_label_map(row.labels, out / f"{sample.id}_ablation{i}_labels.png")
        (out / f"{sample.id}_ablation{i}_history.csv").write_text(row.history.to_csv())
        m = row.metrics
        vals = [Me._fmt(v) for v in ((m.dsc, m.hm, m.xor) if m else (float("nan"),) * 3)]
        lines.append(f"{w.ce:>6g} {w.affine:>6g} {w.spatial:>6g} {vals[0]:>8} {vals[1]:>8} {vals[2]:>8}"
                     f" {row.history.surrogate_calls:>9d}")
        records.append(row.record())
    (out / "ablation.txt").write_text("\n".join(lines) + "\n")
    (out / "ablation.jsonl").write_text("".join(r + "\n" for r in records))
    print("\n".join(lines))
    return 0


def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    reports = []
    for pred_path in sorted(pred_dir.glob("*_labels.png")):
        image_id = pred_path.name[: -len("_labels.png")]
        gt_path = None
        for suffix in (args.mask_suffix, ""):
            for ext in P.IMAGE_SUFFIXES:
                cand = gt_dir / f"{image_id}{suffix}{ext}"
                if cand.exists():
                    gt_path = cand
                    break
            if gt_path:
                break
        if gt_path is None:
            print(f"no ground truth for {image_id}, skipped", file=sys.stderr)
            continue
        reports.append(Me.evaluate(image_id, P.load_label_map(pred_path), P.load_mask(gt_path)))
    if not reports:
        print("no prediction/ground-truth pairs found", file=sys.stderr)
        return 1
    report = Me.aggregate(reports)
    Path(args.out).write_text(report.records())
    print(report.table(), end="")
    return 0


def cmd_check_grads(args) -> int:
    from .gradcheck import main

    return main(seed=args.seed, repeats=args.repeats)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="s3seg", description="Single-image self-supervised segmentation")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    seg = sub.add_parser("segment", help="train per image and write label maps")
    seg.add_argument("--input", required=True, help="image file or directory")
    seg.add_argument("--mask-suffix", default="_gt")
    seg.add_argument("--config")
    seg.add_argument("--preset", choices=["skin", "lung", "custom"])
    seg.add_argument("--seed", type=int)
    seg.add_argument("--jobs", type=int, default=1)
    seg.add_argument("--out", required=True)
    seg.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    seg.add_argument("--save-params", action="store_true", help="also write a parameter checkpoint")
    seg.set_defaults(func=cmd_segment)

    abl = sub.add_parser("ablate", help="run the four loss-combination presets on one image")
    abl.add_argument("--input", required=True)
    abl.add_argument("--mask-suffix", default="_gt")
    abl.add_argument("--config")
    abl.add_argument("--preset", choices=["skin", "lung", "custom"])
    abl.add_argument("--seed", type=int)
    abl.add_argument("--set", action="append", metavar="KEY=VALUE")
    abl.add_argument("--out", required=True)
    abl.set_defaults(func=cmd_ablate)

    ev = sub.add_parser("eval", help="score saved label maps against masks")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--gt", required=True)
    ev.add_argument("--mask-suffix", default="_gt")
    ev.add_argument("--out", required=True)
    ev.set_defaults(func=cmd_eval)

    cg = sub.add_parser("check-grads", help="finite-difference check of every operator")
    cg.add_argument("--seed", type=int, default=0)
    cg.add_argument("--repeats", type=int, default=5)
    cg.set_defaults(func=cmd_check_grads)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
