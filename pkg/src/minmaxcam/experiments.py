"""Evaluation pipeline and ablation grids.

Every ablation cell is an independent train-then-evaluate run described by a
plain dict of config overrides, so cells can run in worker processes and be
aggregated in any order.
"""

from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .cam import NORMALIZE_FIRST, compute_maps
from .config import RunConfig
from .exceptions import ConfigError
from .minmax import train
from .nets import Model, forward_features
from .ndtensor import no_tape
from .synthbench import Split, load_dataset
from .wsoleval import EvalResult, max_box_acc, pxap, threshold_grid

STUDIES = ("lambda_sweep", "set_size", "intensity", "mask_variant")
SET_SIZES = (2, 3, 4, 5)
DEFAULT_LAMBDAS = (0.0, 0.5, 1.0, 2.0, 4.0)
DEFAULT_INTENSITY = (0.5, 1.5)


def thread_cap() -> Optional[int]:
    """Parallelism ceiling from ``MMC_THREADS`` (None when unset)."""
    raw = os.environ.get("MMC_THREADS", "").strip()
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"MMC_THREADS must be a positive integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError(f"MMC_THREADS must be a positive integer, got {raw!r}")
    return n


def effective_jobs(jobs: int) -> int:
    cap = thread_cap()
    jobs = max(1, int(jobs))
    return jobs if cap is None else min(jobs, cap)


def evaluate_maps(
    maps, split: Split, deltas=(0.3, 0.5, 0.7), grid: int = 100,
    connectivity: int = 8, largest_only: bool = False, pxap_per_image: bool = False,
) -> EvalResult:
    taus = threshold_grid(grid)
    res = max_box_acc(maps, split.boxes, deltas, taus, connectivity, largest_only)
    res.pxap = pxap(maps, split.masks, taus, per_image=pxap_per_image)
    return res


def evaluate_model(model: Model, split: Split, map_order: str = NORMALIZE_FIRST, **kw) -> EvalResult:
    """GT-known localization metrics of ``model`` on ``split``."""
    maps = compute_maps(model, split.images, split.labels, order=map_order)
    return evaluate_maps(maps, split, **kw)


def pooled_features(model: Model, images: np.ndarray, maps: Optional[np.ndarray] = None, batch_size: int = 100) -> np.ndarray:
    """GAP features of the images, or of the images masked by ``maps``."""
    out = []
    with no_tape():
        for i in range(0, len(images), batch_size):
            x = images[i : i + batch_size]
            if maps is not None:
                x = x * maps[i : i + batch_size, None]
            out.append(forward_features(model, x).data.mean(axis=(2, 3)))
    return np.concatenate(out)


# --- ablation grids ---------------------------------------------------------

@dataclass(frozen=True)
class Cell:
    study: str
    axis: str
    value: str
    seed: int
    overrides: tuple  # sorted (key, value) pairs

    def as_dict(self) -> dict:
        return dict(self.overrides)


def _parse_values(raw: str, default: Sequence) -> list:
    if not raw:
        return list(default)
    return [v.strip() for v in raw.split(",") if v.strip()]


def study_cells(study: str, cfg: RunConfig) -> list[Cell]:
    """Enumerate (seed x value) cells of an ablation study."""
    if study not in STUDIES:
        raise ConfigError(f"unknown study {study!r}; choose from {', '.join(STUDIES)}")
    seeds = list(cfg["seeds"])
    raw = cfg["values"]
    specs = []  # (axis, value label, overrides)
    if study == "lambda_sweep":
        for v in _parse_values(raw, DEFAULT_LAMBDAS):
            specs.append(("lambda1", str(v), {"lambda1": float(v)}))
        for v in _parse_values(raw, DEFAULT_LAMBDAS):
            specs.append(("lambda2", str(v), {"lambda2": float(v)}))
    elif study == "set_size":
        batch = cfg["batch_size"]
        for v in _parse_values(raw, SET_SIZES):
            s = int(v)
            n = min(cfg["num_classes"], batch // s)
            if s < 2 or n < 1:
                raise ConfigError(f"set size {s} does not fit batch_size={batch}")
            specs.append(("S", str(s), {"S": s, "N": n}))
    elif study == "intensity":
        # ranges contain commas, so intensity values are separated by ';'
        items = [v.strip() for v in raw.split(";")] if raw else ["none", "{},{}".format(*DEFAULT_INTENSITY)]
        for v in filter(None, items):
            specs.append(("intensity_aug", v, {"intensity_aug": v}))
    else:
        for v in _parse_values(raw, ("input", "feature")):
            specs.append(("mask_variant", v, {"mask_variant": v}))
    cells = [
        Cell(study, axis, label, seed, tuple(sorted({**ov, "seed": seed}.items())))
        for axis, label, ov in specs for seed in seeds
    ]
    if not cells:
        raise ConfigError("the study has no configurations to run (empty seeds or values)")
    return cells


_DATASETS: dict = {}


def _dataset(path: str):
    if path not in _DATASETS:
        _DATASETS[path] = load_dataset(path)
    return _DATASETS[path]


def run_cell(base_values: dict, cell: Cell) -> dict:
    """Train and evaluate one cell; returns a flat result row."""
    cfg = RunConfig()
    cfg.update(base_values, "file")
    cfg.update(cell.as_dict(), "flag")
    ds = _dataset(cfg["data"])
    result = train(cfg.train_config(), ds.split("train"), n_classes=ds.num_classes)
    ev = evaluate_model(
        result.model, ds.split(cfg["split"]), map_order=cfg["map_order"], deltas=cfg["deltas"],
        grid=cfg["grid"], connectivity=cfg["connectivity"], largest_only=cfg["largest_only"],
    )
    row = {"study": cell.study, "axis": cell.axis, "value": cell.value, "seed": cell.seed}
    row.update({k: v for k, v in ev.to_dict().items() if k != "best_tau_per_delta"})
    for d, tau in ev.best_tau.items():
        row[f"best_tau_{int(round(d * 100)):03d}"] = tau
    return row


def run_cells(cfg: RunConfig, cells: Sequence[Cell], jobs: int = 1) -> list[dict]:
    base = {k: v for k, v in cfg.values.items()}
    jobs = effective_jobs(jobs)
    if jobs == 1 or len(cells) == 1:
        rows = [run_cell(base, c) for c in cells]
    else:
        with ProcessPoolExecutor(max_workers=min(jobs, len(cells))) as pool:
            rows = list(pool.map(run_cell, [base] * len(cells), cells))
    return sorted(rows, key=lambda r: (r["axis"], r["value"], r["seed"]))


def aggregate(rows: Sequence[dict]) -> list[dict]:
    """Mean and std over seeds for every (axis, value) cell."""
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["axis"], r["value"]), []).append(r)
    out = []
    for (axis, value), rs in sorted(groups.items()):
        agg = {"axis": axis, "value": value, "n_seeds": len(rs)}
        for key in ("maxboxacc_050", "maxboxacc_v2", "pxap", "best_tau_050"):
            vals = np.array([r[key] for r in rs], dtype=np.float64)
            agg[f"{key}_mean"] = float(vals.mean())
            agg[f"{key}_std"] = float(vals.std())
        out.append(agg)
    return out


def rows_to_csv(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()
