"""Procedural shapes-on-texture datasets with exact masks and boxes.

On-disk layout (also accepted for converted real data)::

    images/<image_id>.ppm   P6, 8 bit
    masks/<image_id>.pgm    P5, 8 bit, nonzero = object
    manifest.csv            image_id,split,class_id,x0,y0,x1,y1
    dataset.cfg             key=value lines

A manifest may list several rows for one image id (one per GT box).
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from ._pnm import read_pnm, write_pnm
from .exceptions import IntegrityError, InvalidArgumentError, LoadError
from .wsoleval import BBox, tight_box

SPLITS = ("train", "val", "test")
SHAPES = ("disc", "square", "triangle", "annulus", "diamond", "cross", "ellipse", "hexagon")
# well separated base colours, RGB in [0,1]
PALETTE = (
    (0.90, 0.15, 0.15),
    (0.15, 0.35, 0.90),
    (0.95, 0.85, 0.10),
    (0.15, 0.75, 0.25),
    (0.80, 0.25, 0.85),
    (0.10, 0.85, 0.85),
    (0.95, 0.55, 0.10),
    (0.55, 0.55, 0.55),
)
MARGIN = 2
MANIFEST_HEADER = ["image_id", "split", "class_id", "x0", "y0", "x1", "y1"]


@dataclass
class SynthConfig:
    num_classes: int = 8
    train_per_class: int = 200
    val_per_class: int = 0
    test_per_class: int = 100
    image_size: int = 64
    bg_mode: str = "varied"
    marker_mode: bool = False
    scale_min: float = 0.35
    scale_max: float = 0.65
    n_shapes: int = 4
    color_jitter: float = 0.08
    bg_contrast: float = 1.0
    seed: int = 0

    def validate(self) -> "SynthConfig":
        if self.num_classes < 2 or self.image_size < 16:
            raise InvalidArgumentError("need >= 2 classes and images of at least 16px")
        if min(self.train_per_class, self.test_per_class) < 1 or self.val_per_class < 0:
            raise InvalidArgumentError("split sizes must be positive")
        if not 0.0 < self.scale_min <= self.scale_max < 1.0:
            raise InvalidArgumentError(f"scale range must lie in (0,1): {self.scale_min}, {self.scale_max}")
        if self.bg_mode not in ("varied", "common"):
            raise InvalidArgumentError(f"bg_mode must be 'varied' or 'common', got {self.bg_mode!r}")
        if not 1 <= self.n_shapes <= len(SHAPES):
            raise InvalidArgumentError(f"n_shapes must be in [1, {len(SHAPES)}]")
        n_colors = -(-self.num_classes // self.n_shapes)
        if n_colors > len(PALETTE):
            raise InvalidArgumentError("not enough (shape, colour) pairs for that many classes")
        return self

    def per_split(self) -> dict[str, int]:
        return {"train": self.train_per_class, "val": self.val_per_class, "test": self.test_per_class}

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "SynthConfig":
        kv = _parse_kv(text)
        out = {}
        for f in fields(cls):
            if f.name in kv:
                raw = kv[f.name]
                if f.type in ("bool", bool):
                    out[f.name] = raw.lower() in ("1", "true", "yes")
                elif f.type in ("int", int):
                    out[f.name] = int(raw)
                elif f.type in ("float", float):
                    out[f.name] = float(raw)
                else:
                    out[f.name] = raw
        return cls(**out)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    return repr(v) if isinstance(v, float) else str(v)


def _parse_kv(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            k, sep, v = line.partition("=")
            if not sep:
                raise LoadError(f"malformed config line {line!r}")
            out[k.strip()] = v.strip()
    return out


def class_identity(cfg: SynthConfig, class_id: int) -> tuple[str, tuple]:
    """(shape, base colour) of a class; consecutive ids cycle through shapes first."""
    shape = SHAPES[class_id % cfg.n_shapes]
    color = PALETTE[class_id // cfg.n_shapes]
    return shape, color


def marker_color(class_id: int, num_classes: int) -> np.ndarray:
    # saturated hues spread around the colour wheel, offset from the palette
    hue = (class_id + 0.5) / num_classes
    k = np.array([5.0, 3.0, 1.0])
    rgb = 1.0 - np.clip(np.minimum(np.mod(k + hue * 6.0, 6.0), 4.0 - np.mod(k + hue * 6.0, 6.0)), 0, 1)
    return rgb


def _shape_mask(shape: str, size: int, cx: float, cy: float, r: float, rot: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xx - cx, yy - cy
    c, s = np.cos(rot), np.sin(rot)
    u, v = c * dx + s * dy, -s * dx + c * dy
    if shape == "disc":
        return dx * dx + dy * dy <= r * r
    if shape == "annulus":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.5 * r) ** 2)
    if shape == "square":
        # axis-aligned keeps rectangles distinct from diamonds
        return (np.abs(dx) <= 0.85 * r) & (np.abs(dy) <= 0.85 * r)
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    if shape == "ellipse":
        return (u / r) ** 2 + (v / (0.55 * r)) ** 2 <= 1.0
    if shape == "cross":
        arm = 0.35 * r
        return ((np.abs(u) <= arm) & (np.abs(v) <= r)) | ((np.abs(v) <= arm) & (np.abs(u) <= r))
    if shape in ("triangle", "hexagon"):
        n = 3 if shape == "triangle" else 6
        inside = np.ones_like(u, dtype=bool)
        for k in range(n):
            a = 2 * np.pi * k / n
            inside &= u * np.cos(a) + v * np.sin(a) <= r * np.cos(np.pi / n)
        return inside
    raise InvalidArgumentError(f"unknown shape {shape!r}")


def _value_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    grid = rng.random((cells + 1, cells + 1))
    t = np.linspace(0, cells, size, endpoint=False) + rng.random() * 0.999
    t = np.minimum(t, cells - 1e-9)
    i = np.floor(t).astype(int)
    f = t - i
    f = f * f * (3 - 2 * f)
    i1 = np.minimum(i + 1, cells)
    top = grid[i][:, i] * (1 - f)[None, :] + grid[i][:, i1] * f[None, :]
    bot = grid[i1][:, i] * (1 - f)[None, :] + grid[i1][:, i1] * f[None, :]
    return top * (1 - f)[:, None] + bot * f[:, None]


def _stripes(rng: np.random.Generator, size: int, period: float, angle: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    phase = rng.random() * 2 * np.pi
    proj = xx * np.cos(angle) + yy * np.sin(angle)
    return 0.5 + 0.5 * np.sin(2 * np.pi * proj / period + phase)


def _texture_params(rng: np.random.Generator) -> dict:
    return {
        "family": "noise" if rng.random() < 0.5 else "stripes",
        "cells": int(rng.integers(3, 9)),
        "period": float(rng.uniform(5.0, 16.0)),
        "angle": float(rng.uniform(0, np.pi)),
        "c0": rng.random(3),
        "c1": rng.random(3),
        "seed": int(rng.integers(2**31)),
    }


def _render_background(params: dict, size: int, contrast: float, rng=None) -> np.ndarray:
    # a fixed-texture class passes rng=None and reuses its own phase stream
    trng = np.random.default_rng(params["seed"]) if rng is None else rng
    if params["family"] == "noise":
        field = _value_noise(trng, size, params["cells"])
    else:
        field = _stripes(trng, size, params["period"], params["angle"])
    field = 0.5 + contrast * (field - 0.5)
    return params["c0"][None, None, :] * (1 - field[..., None]) + params["c1"][None, None, :] * field[..., None]


def _place_marker(rng, mask: np.ndarray, side: int) -> Optional[tuple[int, int]]:
    # a marker position is valid when the whole side x side patch lies in the mask
    cs = np.pad(mask.astype(np.int64), ((1, 0), (1, 0))).cumsum(0).cumsum(1)
    area = cs[side:, side:] - cs[:-side, side:] - cs[side:, :-side] + cs[:-side, :-side]
    ys, xs = np.nonzero(area == side * side)
    if len(ys) == 0:
        return None
    k = int(rng.integers(len(ys)))
    return int(ys[k]), int(xs[k])


def render_sample(cfg: SynthConfig, class_id: int, rng: np.random.Generator, class_bg: Optional[dict]):
    """Return (rgb float image HxWx3 in [0,1], boolean mask)."""
    size = cfg.image_size
    shape, base = class_identity(cfg, class_id)
    for _ in range(100):
        scale = rng.uniform(cfg.scale_min, cfg.scale_max)
        r = 0.5 * scale * size
        lo, hi = MARGIN + r + 1, size - MARGIN - r - 1
        cx, cy = rng.uniform(lo, hi), rng.uniform(lo, hi)
        rot = rng.uniform(0, 2 * np.pi)
        mask = _shape_mask(shape, size, cx, cy, r, rot)
        if mask.sum() >= 16:
            break
    if class_bg is not None:
        bg = _render_background(class_bg, size, cfg.bg_contrast)
    else:
        bg = _render_background(_texture_params(rng), size, cfg.bg_contrast, rng)
    color = np.clip(np.asarray(base) + rng.uniform(-cfg.color_jitter, cfg.color_jitter, 3), 0, 1)
    shade = 0.85 + 0.15 * _value_noise(rng, size, 4)
    obj = color[None, None, :] * shade[..., None]
    img = np.where(mask[..., None], obj, bg)
    if cfg.marker_mode:
        area = int(mask.sum())
        side = max(2, int(np.floor(np.sqrt(0.08 * area))))
        pos = None
        while side >= 2 and pos is None:
            pos = _place_marker(rng, mask, side)
            if pos is None:
                side -= 1
        if pos is not None:
            y, x = pos
            img[y : y + side, x : x + side] = marker_color(class_id, cfg.num_classes)
    return np.clip(img, 0.0, 1.0), mask


def sample_seed(seed: int, split: str, class_id: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, SPLITS.index(split), class_id, index])


def generate_dataset(cfg: SynthConfig, out_dir) -> list[dict]:
    """Write a dataset to ``out_dir``; returns the manifest rows."""
    cfg.validate()
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    class_bgs = {}
    if cfg.bg_mode == "common":
        for c in range(cfg.num_classes):
            crng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 99, c]))
            class_bgs[c] = _texture_params(crng)
    rows = []
    for split, n in cfg.per_split().items():
        for c in range(cfg.num_classes):
            for i in range(n):
                rng = np.random.default_rng(sample_seed(cfg.seed, split, c, i))
                img, mask = render_sample(cfg, c, rng, class_bgs.get(c))
                image_id = f"{split}_{c:03d}_{i:04d}"
                write_pnm(out / "images" / f"{image_id}.ppm", np.round(img * 255).astype(np.uint8))
                write_pnm(out / "masks" / f"{image_id}.pgm", mask.astype(np.uint8) * 255)
                box = tight_box(mask)
                rows.append(
                    {"image_id": image_id, "split": split, "class_id": c,
                     "x0": box.x0, "y0": box.y0, "x1": box.x1, "y1": box.y1}
                )
    with open(out / "manifest.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_HEADER, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    (out / "dataset.cfg").write_text(cfg.to_text())
    return rows


@dataclass
class SampleRecord:
    image_id: str
    split: str
    class_id: int
    boxes: list
    image_path: Path
    mask_path: Path

    @property
    def gt_box(self) -> BBox:
        return self.boxes[0]


@dataclass
class Split:
    """Decoded arrays for one split; images are N x 3 x H x W in [0,1]."""

    name: str
    images: np.ndarray
    labels: np.ndarray
    masks: np.ndarray
    boxes: list
    image_ids: list

    def __len__(self):
        return len(self.labels)

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.labels)

    def subset(self, idx) -> "Split":
        idx = np.asarray(idx)
        return Split(self.name, self.images[idx], self.labels[idx], self.masks[idx],
                     [self.boxes[i] for i in idx], [self.image_ids[i] for i in idx])


class Dataset:
    """Validated dataset directory with lazily decoded splits."""

    def __init__(self, root, records: list[SampleRecord], config: dict):
        self.root = Path(root)
        self.records = records
        self.config = config
        self._cache: dict[str, Split] = {}

    @property
    def num_classes(self) -> int:
        if "num_classes" in self.config:
            return int(self.config["num_classes"])
        return max(r.class_id for r in self.records) + 1

    def records_for(self, split: str) -> list[SampleRecord]:
        return [r for r in self.records if r.split == split]

    def split(self, name: str) -> Split:
        if name not in self._cache:
            recs = self.records_for(name)
            if not recs:
                raise LoadError(f"{self.root}: split {name!r} is empty")
            imgs, masks = [], []
            for r in recs:
                img, mask = _load_pair(r)
                imgs.append(img)
                masks.append(mask)
            self._cache[name] = Split(
                name,
                np.stack(imgs),
                np.array([r.class_id for r in recs], dtype=np.int64),
                np.stack(masks),
                [r.boxes for r in recs],
                [r.image_id for r in recs],
            )
        return self._cache[name]


def _load_pair(rec: SampleRecord) -> tuple[np.ndarray, np.ndarray]:
    pixels, maxval = read_pnm(rec.image_path)
    if pixels.ndim != 3:
        raise LoadError(f"{rec.image_path}: expected a P6 colour image")
    mpix, _ = read_pnm(rec.mask_path)
    if mpix.ndim != 2 or mpix.shape != pixels.shape[:2]:
        raise IntegrityError(f"record {rec.image_id}: mask shape does not match image")
    mask = mpix > 0
    if not mask.any():
        raise IntegrityError(f"record {rec.image_id}: mask is empty")
    tb = tight_box(mask)
    union = BBox(
        min(b.x0 for b in rec.boxes), min(b.y0 for b in rec.boxes),
        max(b.x1 for b in rec.boxes), max(b.y1 for b in rec.boxes),
    )
    if tb != union:
        raise IntegrityError(
            f"record {rec.image_id}: mask tight box {tb.as_tuple()} != manifest box {union.as_tuple()}"
        )
    img = pixels.astype(np.float64).transpose(2, 0, 1) / maxval
    return img, mask


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest = root / "manifest.csv"
    if not manifest.is_file():
        raise LoadError(f"{root}: manifest.csv not found")
    cfg_path = root / "dataset.cfg"
    config = _parse_kv(cfg_path.read_text()) if cfg_path.is_file() else {}
    by_id: dict[str, SampleRecord] = {}
    order = []
    with open(manifest, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_HEADER:
            raise LoadError(f"{manifest}: header must be {','.join(MANIFEST_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                box = BBox(int(row["x0"]), int(row["y0"]), int(row["x1"]), int(row["y1"]))
                cid = int(row["class_id"])
            except (TypeError, ValueError) as exc:
                raise LoadError(f"{manifest}:{lineno}: malformed row {row}") from exc
            if not box.valid():
                raise LoadError(f"{manifest}:{lineno}: degenerate box {box.as_tuple()}")
            iid = row["image_id"]
            rec = by_id.get(iid)
            if rec is None:
                rec = by_id[iid] = SampleRecord(
                    iid, row["split"], cid, [box],
                    root / "images" / f"{iid}.ppm", root / "masks" / f"{iid}.pgm",
                )
                order.append(iid)
            elif rec.class_id != cid or rec.split != row["split"]:
                raise LoadError(f"{manifest}:{lineno}: conflicting rows for {iid}")
            else:
                rec.boxes.append(box)
    records = [by_id[i] for i in order]
    for r in records:
        for p in (r.image_path, r.mask_path):
            if not p.is_file():
                raise LoadError(f"record {r.image_id}: missing file {p}")
    return Dataset(root, records, config)


__all__ = [
    "Dataset",
    "SampleRecord",
    "Split",
    "SynthConfig",
    "class_identity",
    "generate_dataset",
    "load_dataset",
    "render_sample",
]
