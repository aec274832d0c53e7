"""Command line entry point: ``minmaxcam <command> [flags]``.

Every command resolves its settings from defaults, an optional ``--config``
file and flags, writes the resolved configuration next to its outputs and
stamps reports with the seed, package version and a config hash.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .cam import LocalizationMap, compute_maps, dump_maps, load_dumped_maps, quantize_heatmap
from .config import EVAL_KEYS, TRAIN_KEYS, RunConfig
from .exceptions import ConfigError, MinMaxCAMError
from .experiments import (
    STUDIES,
    aggregate,
    effective_jobs,
    evaluate_maps,
    pooled_features,
    rows_to_csv,
    run_cells,
    study_cells,
    thread_cap,
)
from .gradcheck import gradient_suite
from .minmax import train
from .nets import load_checkpoint, save_checkpoint
from .synthbench import generate_dataset, load_dataset
from .wsoleval import best_iou, bg_proportion, extract_boxes, feature_dispersion

log = logging.getLogger("minmaxcam")

# flags that are not config keys
_NON_CONFIG = {"command", "config", "set", "verbose", "analysis", "tol"}


class UsageError(MinMaxCAMError):
    pass


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file ('#' starts a comment)")
    p.add_argument("--seed", type=str, help="random seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")


def _flag(p, name, help=None, **kw):
    # every value flag is parsed as text and typed by the config schema
    p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=str, help=help, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="minmaxcam", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"minmaxcam {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _add_common(p)
    for k in ("num_classes", "train_per_class", "val_per_class", "test_per_class",
              "image_size", "bg_mode", "marker_mode", "scale_min", "scale_max", "bg_contrast"):
        _flag(p, k)

    p = sub.add_parser("train", help="train a model (lambda1 = lambda2 = 0 gives plain CAM)")
    _add_common(p)
    _flag(p, "data", "dataset directory")
    for k in TRAIN_KEYS:
        if k != "seed":
            _flag(p, k)

    p = sub.add_parser("eval", help="localization metrics from a checkpoint or dumped maps")
    _add_common(p)
    _flag(p, "data", "dataset directory")
    _flag(p, "checkpoint", "model checkpoint")
    _flag(p, "maps", "directory of dumped PGM heatmaps (instead of a checkpoint)")
    for k in EVAL_KEYS:
        _flag(p, k)
    p.add_argument("--dump-maps", dest="dump", action="store_true", help="also write heatmaps")

    p = sub.add_parser("dump-cam", help="write GT-class heatmaps as 16-bit PGM files")
    _add_common(p)
    _flag(p, "data", "dataset directory")
    _flag(p, "checkpoint", "model checkpoint")
    _flag(p, "split")

    p = sub.add_parser("ablate", help="run an ablation grid")
    _add_common(p)
    _flag(p, "data", "dataset directory")
    _flag(p, "study", f"one of {', '.join(STUDIES)}")
    _flag(p, "seeds", "comma separated seeds")
    _flag(p, "values", "grid values (comma separated; ';' for intensity ranges)")
    _flag(p, "batch_size", "images per batch for the set-size study")
    _flag(p, "jobs", "parallel worker processes (capped by MMC_THREADS)")
    for k in TRAIN_KEYS:
        if k != "seed":
            _flag(p, k)

    p = sub.add_parser("analyze", help="feature dispersion and background coverage")
    _add_common(p)
    _flag(p, "data", "dataset directory")
    _flag(p, "checkpoint", "model checkpoint")
    _flag(p, "split")
    p.add_argument("--analysis", choices=("dispersion", "bg_proportion", "all"), default="all")

    p = sub.add_parser("check-grad", help="finite-difference check of every differentiable op")
    _add_common(p)
    p.add_argument("--tol", type=float, default=1e-4)
    return parser


def _resolve(args: argparse.Namespace) -> RunConfig:
    flags = {k: v for k, v in vars(args).items() if k not in _NON_CONFIG and k != "dump" and v is not None}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        flags[key.strip()] = value.strip()
    return RunConfig.resolve(args.config, flags)


def _stamp(cfg: RunConfig) -> dict:
    # where outputs go and which copy of a checkpoint is read do not change results
    keys = [k for k in cfg.values if k not in ("out", "jobs", "checkpoint", "maps")]
    stamp = {"seed": cfg["seed"], "version": __version__, "config_hash": cfg.hash(keys)}
    if cfg["checkpoint"] and Path(cfg["checkpoint"]).is_file():
        stamp["checkpoint_sha256"] = file_digest(cfg["checkpoint"])
    return stamp


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _save_run_config(cfg: RunConfig, out: Path) -> None:
    (out / "run.cfg").write_text(cfg.to_text(with_provenance=True))


def _require(cfg: RunConfig, key: str) -> str:
    value = cfg[key]
    if not value:
        raise ConfigError(f"--{key} is required")
    if not Path(value).exists():
        raise ConfigError(f"--{key}: {value} does not exist")
    return value


def _load_data(cfg: RunConfig):
    path = _require(cfg, "data")
    if not Path(path, "manifest.csv").is_file():
        raise ConfigError(f"--data: {path} has no manifest.csv")
    return load_dataset(path)


def _load_model(cfg: RunConfig, ds):
    model = load_checkpoint(_require(cfg, "checkpoint"))
    if model.n_classes != ds.num_classes:
        raise ConfigError(
            f"checkpoint has {model.n_classes} classes but the dataset has {ds.num_classes}"
        )
    return model


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --- commands ---------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    rows = generate_dataset(cfg.synth_config(), out)
    print(f"wrote {len(rows)} samples to {out}")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    ds = _load_data(cfg)
    tc = cfg.train_config()
    out = _out_dir(cfg)
    _save_run_config(cfg, out)
    result = train(tc, ds.split("train"), n_classes=ds.num_classes)
    ckpt = out / "model.mmc"
    stamp = _stamp(cfg)
    save_checkpoint(result.model, ckpt, meta={"seed": cfg["seed"], "config_hash": stamp["config_hash"]})
    result.write_log(out / "train_log.csv")
    print(f"checkpoint {ckpt} sha256={file_digest(ckpt)}")
    return 0


def _maps_for_eval(cfg: RunConfig, ds, split):
    if cfg["maps"]:
        src = _require(cfg, "maps")
        return [m.values for m in load_dumped_maps(src, split.image_ids, split.labels)], None
    model = _load_model(cfg, ds)
    # quantize exactly as a PGM dump would, so both routes agree bit for bit
    maps = quantize_heatmap(compute_maps(model, split.images, split.labels, order=cfg["map_order"]))
    return maps, model


def cmd_eval(cfg: RunConfig, dump: bool = False) -> int:
    ds = _load_data(cfg)
    split = ds.split(cfg["split"])
    maps, model = _maps_for_eval(cfg, ds, split)
    res = evaluate_maps(
        maps, split, deltas=cfg["deltas"], grid=cfg["grid"], connectivity=cfg["connectivity"],
        largest_only=cfg["largest_only"], pxap_per_image=cfg["pxap_per_image"],
    )
    out = _out_dir(cfg)
    report = {"metrics": res.to_dict(), "n_images": len(split), "split": split.name, **_stamp(cfg)}
    _write_json(out / "metrics.json", report)
    (out / "curves.csv").write_text(res.curves_csv())
    if dump and model is not None:
        _dump(out / "maps", maps, split)
    m = res.to_dict()
    print(
        f"MaxBoxAcc(0.5)={m['maxboxacc_050']:.4f} (tau={m['best_tau_per_delta']['0.50']:.2f}) "
        f"V2={m['maxboxacc_v2']:.4f} PxAP={m['pxap']:.4f}"
    )
    return 0


def _dump(dest: Path, maps, split) -> None:
    dump_maps(dest, [LocalizationMap(v, int(c), i) for v, c, i in zip(maps, split.labels, split.image_ids)])


def cmd_dump_cam(cfg: RunConfig) -> int:
    ds = _load_data(cfg)
    split = ds.split(cfg["split"])
    model = _load_model(cfg, ds)
    maps = compute_maps(model, split.images, split.labels, order=cfg["map_order"])
    dest = _out_dir(cfg) / "maps"
    _dump(dest, maps, split)
    print(f"wrote {len(maps)} heatmaps to {dest}")
    return 0


def cmd_ablate(cfg: RunConfig) -> int:
    if not cfg["study"]:
        raise UsageError(f"--study is required ({', '.join(STUDIES)})")
    if cfg["study"] not in STUDIES:
        raise UsageError(f"unknown study {cfg['study']!r}; choose from {', '.join(STUDIES)}")
    _load_data(cfg)
    try:
        cells = study_cells(cfg["study"], cfg)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    out = _out_dir(cfg)
    _save_run_config(cfg, out)
    jobs = effective_jobs(cfg["jobs"])
    log.info("running %d cells with %d job(s)", len(cells), jobs)
    rows = run_cells(cfg, cells, jobs)
    table = aggregate(rows)
    name = cfg["study"]
    (out / f"ablate_{name}_runs.csv").write_text(rows_to_csv(rows))
    (out / f"ablate_{name}.csv").write_text(rows_to_csv(table))
    _write_json(out / f"ablate_{name}.json", {"study": name, "table": table, **_stamp(cfg)})
    for r in table:
        print(f"{r['axis']}={r['value']}: MaxBoxAcc(0.5)={r['maxboxacc_050_mean']:.4f}"
              f"+-{r['maxboxacc_050_std']:.4f} V2={r['maxboxacc_v2_mean']:.4f}")
    return 0


def analyze_model(model, split, map_order: str = "normalize_first", grid: int = 100) -> dict:
    """Dispersion of masked vs original features and background coverage of boxes."""
    from .wsoleval import max_box_acc, threshold_grid

    maps = compute_maps(model, split.images, split.labels, order=map_order)
    f = pooled_features(model, split.images, maps)
    f_o = pooled_features(model, split.images)
    disp_f, disp_f_sd = feature_dispersion(f, split.labels)
    disp_o, disp_o_sd = feature_dispersion(f_o, split.labels)
    tau = max_box_acc(maps, split.boxes, deltas=(0.5,), grid=threshold_grid(grid)).best_tau[0.5]
    props = []
    for h, gts, mask in zip(maps, split.boxes, split.masks):
        boxes = extract_boxes(h, tau)
        if not boxes:
            props.append(float("nan"))
            continue
        pred = max(boxes, key=lambda b: best_iou([b], gts))
        props.append(bg_proportion(pred, mask))
    props = np.asarray(props)
    valid = props[~np.isnan(props)]
    return {
        "dispersion": {
            "f": {"mean": disp_f, "std": disp_f_sd},
            "f_o": {"mean": disp_o, "std": disp_o_sd},
        },
        "bg_proportion": {
            "tau": tau,
            "per_image": [None if np.isnan(p) else float(p) for p in props],
            "mean": float(valid.mean()) if len(valid) else None,
            "median": float(np.median(valid)) if len(valid) else None,
            "fraction_above_0.1": float((valid > 0.1).mean()) if len(valid) else None,
            "n_without_box": int(np.isnan(props).sum()),
        },
    }


def cmd_analyze(cfg: RunConfig, analysis: str = "all") -> int:
    ds = _load_data(cfg)
    split = ds.split(cfg["split"])
    model = _load_model(cfg, ds)
    result = analyze_model(model, split, cfg["map_order"], cfg["grid"])
    if analysis != "all":
        result = {analysis: result[analysis]}
    out = _out_dir(cfg)
    _write_json(out / "analysis.json", {**result, **_stamp(cfg)})
    if "bg_proportion" in result:
        rows = [{"image_id": i, "bg_proportion": p}
                for i, p in zip(split.image_ids, result["bg_proportion"]["per_image"])]
        (out / "bg_proportion.csv").write_text(rows_to_csv(rows))
    if "dispersion" in result:
        d = result["dispersion"]
        print(f"dispersion f={d['f']['mean']:.4f}+-{d['f']['std']:.4f} "
              f"f_o={d['f_o']['mean']:.4f}+-{d['f_o']['std']:.4f}")
    if "bg_proportion" in result:
        print(f"bg_proportion > 0.1 for {result['bg_proportion']['fraction_above_0.1']:.3f} of images")
    return 0


def cmd_check_grad(cfg: RunConfig, tol: float = 1e-4) -> int:
    seed = cfg["seed"]
    errs = gradient_suite(seeds=range(seed, seed + 5))
    worst = 0.0
    for name, values in errs.items():
        e = max(values)
        worst = max(worst, e)
        print(f"{'PASS' if e <= tol else 'FAIL'} {name}: max rel err {e:.3e}")
    return 0 if worst <= tol else 1


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args)
        cap = thread_cap()
        limiter = None
        if cap is not None:
            from threadpoolctl import threadpool_limits

            limiter = threadpool_limits(limits=cap)
        try:
            cmd = args.command
            if cmd == "gen-data":
                return cmd_gen_data(cfg)
            if cmd == "train":
                return cmd_train(cfg)
            if cmd == "eval":
                return cmd_eval(cfg, dump=args.dump)
            if cmd == "dump-cam":
                return cmd_dump_cam(cfg)
            if cmd == "ablate":
                return cmd_ablate(cfg)
            if cmd == "analyze":
                return cmd_analyze(cfg, args.analysis)
            return cmd_check_grad(cfg, args.tol)
        finally:
            if limiter is not None:
                limiter.unregister()
    except UsageError as exc:
        print(f"minmaxcam {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except (MinMaxCAMError, OSError) as exc:
        print(f"minmaxcam {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
