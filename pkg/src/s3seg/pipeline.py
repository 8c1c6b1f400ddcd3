"""Image I/O, preprocessing, run configuration and batch orchestration."""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import metrics as Me
from .affine import AffineRanges
from .losses import LUNG, SKIN, LossWeights
from .model import ModelConfig
from .trainer import OptimConfig, TrainHistory, train_single_image

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".bmp", ".pgm", ".ppm", ".pnm")
PRESETS = {"skin": SKIN, "lung": LUNG}
MAX_PALETTE = 256


class ImageFormatError(ValueError):
    pass


@dataclass
class ImageSample:
    id: str
    pixels: np.ndarray  # H x W x C, float in [0, 1]
    gt: np.ndarray | None
    path: Path | None = None

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


# -- image I/O -------------------------------------------------------------

def _read_pnm_ascii(path: Path) -> np.ndarray:
    tokens = []
    for line in path.read_text(encoding="ascii").splitlines():
        tokens.extend(line.split("#", 1)[0].split())
    magic = tokens[0]
    if magic not in ("P2", "P3"):
        raise ImageFormatError(f"{path}: not an ASCII PGM/PPM")
    w, h, maxval = (int(t) for t in tokens[1:4])
    ch = 1 if magic == "P2" else 3
    vals = np.array(tokens[4:4 + w * h * ch], dtype=np.float64)
    if vals.size != w * h * ch:
        raise ImageFormatError(f"{path}: truncated pixel data")
    if maxval != 255:
        vals = np.round(vals * 255.0 / maxval)
    return vals.reshape(h, w, ch).astype(np.uint8)


def read_raw(path) -> np.ndarray:
    """Decode to uint8 H x W x C (C in {1, 3})."""
    path = Path(path)
    if path.suffix.lower() not in IMAGE_SUFFIXES:
        raise ImageFormatError(f"{path}: unsupported format")
    try:
        head = path.read_bytes()[:2]
        if head in (b"P2", b"P3"):
            arr = _read_pnm_ascii(path)
        else:
            with Image.open(path) as im:
                im.load()
                if im.mode in ("L", "1"):
                    arr = np.asarray(im.convert("L"))
                elif im.mode in ("I;16", "I"):
                    arr = (np.asarray(im, dtype=np.float64) / 257.0).round().astype(np.uint8)
                else:
                    arr = np.asarray(im.convert("RGB"))
    except ImageFormatError:
        raise
    except Exception as exc:  # decoder errors vary by format
        raise ImageFormatError(f"{path}: cannot decode ({exc})") from exc
    if arr.ndim == 2:
        arr = arr[..., None]
    return arr


def _find_mask(path: Path, suffix: str) -> Path | None:
    for ext in IMAGE_SUFFIXES:
        cand = path.with_name(path.stem + suffix + ext)
        if cand.exists():
            return cand
    return None


def load_mask(path) -> np.ndarray:
    raw = read_raw(path).astype(np.float64) / 255.0
    return raw.mean(axis=2) >= 0.5


def load_image(path, mask_suffix: str = "_gt") -> ImageSample:
    path = Path(path)
    raw = read_raw(path)
    pixels = raw.astype(np.float64) / 255.0
    gt = None
    mpath = _find_mask(path, mask_suffix) if mask_suffix else None
    if mpath is not None:
        gt = load_mask(mpath)
        if gt.shape != pixels.shape[:2]:
            raise ImageFormatError(f"{mpath}: mask size {gt.shape} != image size {pixels.shape[:2]}")
    return ImageSample(path.stem, pixels, gt, path)


def preprocess(sample: ImageSample | np.ndarray) -> np.ndarray:
    """Per-channel standardisation -> (1, C, H, W) float64."""
    px = sample.pixels if isinstance(sample, ImageSample) else np.asarray(sample, dtype=np.float64)
    if px.ndim == 2:
        px = px[..., None]
    x = px.transpose(2, 0, 1)[None].astype(np.float64)
    mu = x.mean(axis=(2, 3), keepdims=True)
    sd = x.std(axis=(2, 3), keepdims=True)
    # a flat channel's mean can differ from its value by rounding; pin it to zero
    centred = np.where(np.ptp(x, axis=(2, 3), keepdims=True) == 0, 0.0, x - mu)
    return centred / (sd + 1e-8)


def palette() -> list[int]:
    """Fixed 256-entry RGB palette; entry i is the colour of cluster i."""
    rng = np.random.default_rng(20230901)
    colors = rng.integers(0, 256, size=(MAX_PALETTE, 3), dtype=np.uint8)
    colors[0] = (0, 0, 0)
    return colors.reshape(-1).tolist()


def save_label_map(labels: np.ndarray, path) -> None:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= MAX_PALETTE:
        raise ValueError(f"label ids must lie in [0, {MAX_PALETTE}) to fit an indexed PNG")
    im = Image.fromarray(labels.astype(np.uint8), mode="P")
    im.putpalette(palette())
    im.save(path, format="PNG", optimize=False)


def load_label_map(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "P":
            raise ImageFormatError(f"{path}: label map must be an indexed PNG")
        return np.asarray(im).astype(np.int64)


# -- configuration ------------------------------------------------------------

@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    weights: LossWeights = SKIN
    ranges: AffineRanges = field(default_factory=AffineRanges)
    preset: str = "skin"
    out_dir: str = "out"
    seed: int = 0

    def __post_init__(self):
        if self.preset not in ("skin", "lung", "custom"):
            raise ValueError(f"unknown preset {self.preset!r}")

    def with_seed(self, seed: int) -> RunConfig:
        return dataclasses.replace(self, seed=seed, model=dataclasses.replace(self.model, seed=seed),
                                   optim=dataclasses.replace(self.optim, seed=seed))

    def to_text(self) -> str:
        lines = [f"preset = {self.preset}", f"seed = {self.seed}", f"out_dir = {self.out_dir}"]
        for section in ("model", "optim", "weights", "ranges"):
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                lines.append(f"{section}.{f.name} = {_fmt_value(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        """Hash of every setting except the output location."""
        text = "".join(ln for ln in self.to_text().splitlines(True) if not ln.startswith("out_dir ="))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _fmt_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_fmt_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_kv(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _coerce(raw: str, current):
    if isinstance(current, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(current, tuple):
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        kind = type(current[0]) if current else int
        return tuple(kind(float(p)) if kind is int else kind(p) for p in parts)
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if current is None:
        return None if raw.lower() == "none" else int(raw)
    return raw


def build_config(*layers: dict[str, str]) -> RunConfig:
    """Merge key/value layers (later wins) on top of preset defaults.

    The preset's loss weights are the base layer; explicit ``weights.*`` keys
    from any layer override them.
    """
    merged: dict[str, str] = {}
    for layer in layers:
        merged.update({k: v for k, v in layer.items() if v is not None})
    preset = merged.get("preset", "skin")
    base = RunConfig(preset=preset, weights=PRESETS.get(preset, SKIN))
    sections = {s: {f.name: getattr(getattr(base, s), f.name) for f in dataclasses.fields(getattr(base, s))}
                for s in ("model", "optim", "weights", "ranges")}
    top = {"out_dir": base.out_dir, "seed": base.seed}
    for key, raw in merged.items():
        if key == "preset":
            continue
        if "." in key:
            sec, name = key.split(".", 1)
            if sec not in sections or name not in sections[sec]:
                raise ValueError(f"unknown config key {key!r}")
            sections[sec][name] = _coerce(raw, sections[sec][name])
        elif key in top:
            top[key] = _coerce(raw, top[key])
        else:
            raise ValueError(f"unknown config key {key!r}")
    cfg = RunConfig(
        model=ModelConfig(**sections["model"]),
        optim=OptimConfig(**sections["optim"]),
        weights=LossWeights(**sections["weights"]),
        ranges=AffineRanges(**sections["ranges"]),
        preset=preset,
        out_dir=top["out_dir"],
        seed=top["seed"],
    )
    if "seed" in merged:
        cfg = cfg.with_seed(cfg.seed)
    return cfg


def parse_config(text: str) -> RunConfig:
    return build_config(parse_kv(text))


def resolve_seed(cli_seed: int | None, file_seed: str | None = None) -> int | None:
    if cli_seed is not None:
        return cli_seed
    if file_seed is not None:
        return int(file_seed)
    env = os.environ.get("S3SEG_SEED")
    return int(env) if env else None


# -- batch orchestration ------------------------------------------------------

def list_images(path, mask_suffix: str = "_gt") -> list[Path]:
    path = Path(path)
    if path.is_file():
        return [path]
    files = sorted(p for p in path.iterdir()
                   if p.suffix.lower() in IMAGE_SUFFIXES and not (mask_suffix and p.stem.endswith(mask_suffix)))
    if not files:
        raise FileNotFoundError(f"no images found in {path}")
    return files


@dataclass
class ImageResult:
    image_id: str
    metrics: Me.ImageMetrics | None
    error: str | None = None


def process_one(path: Path, cfg: RunConfig, out_dir: Path, mask_suffix: str,
                checkpoint: bool = False) -> ImageResult:
    from .model import save_checkpoint

    sample = load_image(path, mask_suffix)
    mcfg = dataclasses.replace(cfg.model, in_channels=sample.channels)
    labels, params, hist = train_single_image(preprocess(sample), mcfg, cfg.optim, cfg.weights, cfg.ranges)
    save_label_map(labels, out_dir / f"{sample.id}_labels.png")
    (out_dir / f"{sample.id}_history.csv").write_text(hist.to_csv())
    if checkpoint:
        save_checkpoint(out_dir / f"{sample.id}.s3ck", params, mcfg)
    m = Me.evaluate(sample.id, labels, sample.gt) if sample.gt is not None and sample.gt.any() else None
    return ImageResult(sample.id, m)


def _worker(args) -> ImageResult:
    path, cfg, out_dir, mask_suffix, checkpoint = args
    try:
        return process_one(path, cfg, out_dir, mask_suffix, checkpoint)
    except Exception as exc:  # recorded per image; the batch continues
        log.error("%s failed: %s", path.name, exc)
        return ImageResult(path.stem, None, f"{type(exc).__name__}: {exc}")


def run_batch(cfg: RunConfig, input_path, out_dir=None, mask_suffix: str = "_gt", jobs: int = 1,
              checkpoint: bool = False) -> tuple[Me.MetricsReport | None, list[ImageResult]]:
    """Train one model per image; write label maps, histories and metric records.

    Image ``i`` (in sorted filename order) is trained with seed ``cfg.seed + i``.
    """
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = list_images(input_path, mask_suffix)
    tasks = [(p, cfg.with_seed(cfg.seed + i), out, mask_suffix, checkpoint) for i, p in enumerate(files)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_worker, tasks))
    else:
        results = [_worker(t) for t in tasks]
    scored = [r.metrics for r in results if r.metrics is not None]
    meta = {"config": cfg.digest(), "seed": cfg.seed,
            "failed": sorted(r.image_id for r in results if r.error)}
    report = Me.aggregate(scored, meta) if scored else None
    (out / "run_config.txt").write_text(cfg.to_text())
    if report is not None:
        (out / "metrics.jsonl").write_text(report.records())
        (out / "report.txt").write_text(report.table())
    return report, results
