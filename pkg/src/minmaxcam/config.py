"""Run configuration: typed key=value settings with per-key provenance.

Values are resolved in three layers, later ones winning: built-in defaults,
a config file (``key = value`` lines, ``#`` starts a comment), and command
line flags.  Unknown keys are rejected at every layer.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

from .exceptions import ConfigError
from .minmax import StageTwoConfig, TrainConfig
from .synthbench import SynthConfig


def _bool(raw: str) -> bool:
    v = raw.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _floats(raw: str) -> tuple:
    return tuple(float(x) for x in raw.split(",") if x.strip())


def _ints(raw: str) -> tuple:
    return tuple(int(x) for x in raw.split(",") if x.strip())


def _opt_range(raw: str):
    if raw.strip().lower() in ("", "none", "off"):
        return None
    lo, hi = _floats(raw)
    return (lo, hi)


def _opt_float(raw: str):
    return None if raw.strip().lower() in ("", "none") else float(raw)


def _opt_int(raw: str):
    return None if raw.strip().lower() in ("", "none") else int(raw)


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


# key -> (parser, default)
SCHEMA: dict[str, tuple[Callable[[str], Any], Any]] = {
    # paths and global settings
    "data": (str, ""),
    "out": (str, "out"),
    "checkpoint": (str, ""),
    "seed": (int, 0),
    "jobs": (int, 1),
    # dataset generation
    "num_classes": (int, 8),
    "train_per_class": (int, 200),
    "val_per_class": (int, 0),
    "test_per_class": (int, 100),
    "image_size": (int, 64),
    "bg_mode": (str, "varied"),
    "marker_mode": (_bool, False),
    "scale_min": (float, 0.35),
    "scale_max": (float, 0.65),
    "bg_contrast": (float, 1.0),
    # model and training
    "channels": (_ints, (16, 32, 64)),
    "K": (int, 64),
    "stride_mod": (_bool, False),
    "epochs": (int, 10),
    "lr1": (float, 0.05),
    "lr2": (_opt_float, None),
    "momentum": (float, 0.9),
    "S": (int, 5),
    "N": (int, 8),
    "lambda1": (float, 1.0),
    "lambda2": (float, 1.0),
    "intensity_aug": (_opt_range, None),
    "mask_variant": (str, "input"),
    "batches_per_epoch": (_opt_int, None),
    "detach_norm": (_bool, False),
    "map_order": (str, "normalize_first"),
    # evaluation
    "split": (str, "test"),
    "deltas": (_floats, (0.3, 0.5, 0.7)),
    "grid": (int, 100),
    "connectivity": (int, 8),
    "largest_only": (_bool, False),
    "pxap_per_image": (_bool, False),
    "maps": (str, ""),
    # ablations
    "study": (str, ""),
    "seeds": (_ints, (0, 1, 2)),
    "values": (str, ""),
    "batch_size": (int, 40),
}

DEFAULT, FILE, FLAG = "default", "file", "flag"


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        out[key.strip()] = value.strip()
    return out


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {k: d for k, (_, d) in SCHEMA.items()})
    provenance: dict = field(default_factory=lambda: {k: DEFAULT for k in SCHEMA})

    def set(self, key: str, raw, source: str) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r} ({source})")
        parser = SCHEMA[key][0]
        try:
            value = parser(raw) if isinstance(raw, str) else raw
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from exc
        self.values[key] = value
        self.provenance[key] = source

    def update(self, pairs: dict, source: str) -> "RunConfig":
        for k, v in pairs.items():
            self.set(k, v, source)
        return self

    def __getitem__(self, key: str):
        return self.values[key]

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    @classmethod
    def resolve(cls, path: Optional[str] = None, flags: Optional[dict] = None) -> "RunConfig":
        cfg = cls()
        if path:
            try:
                text = Path(path).read_text()
            except OSError as exc:
                raise ConfigError(f"--config: cannot read {path}: {exc}") from exc
            cfg.update(parse_config_text(text, str(path)), FILE)
        cfg.update({k: v for k, v in (flags or {}).items() if v is not None}, FLAG)
        return cfg

    def to_text(self, with_provenance: bool = False) -> str:
        lines = []
        for k in sorted(self.values):
            line = f"{k}={_fmt(self.values[k])}"
            if with_provenance:
                line += f"  # {self.provenance[k]}"
            lines.append(line)
        return "\n".join(lines) + "\n"

    def hash(self, keys=None) -> str:
        """Short digest of the resolved values (optionally of a key subset)."""
        keys = sorted(self.values if keys is None else keys)
        text = "\n".join(f"{k}={_fmt(self.values[k])}" for k in keys)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            epochs=v["epochs"], lr1=v["lr1"], momentum=v["momentum"], seed=v["seed"],
            S=v["S"], N=v["N"],
            stage2=StageTwoConfig(v["lambda1"], v["lambda2"], v["lr2"]),
            intensity_aug=v["intensity_aug"], mask_variant=v["mask_variant"],
            batches_per_epoch=v["batches_per_epoch"], detach_norm=v["detach_norm"],
            map_order=v["map_order"], stride_mod=v["stride_mod"],
            channels=tuple(v["channels"]), K=v["K"],
        )

    def synth_config(self) -> SynthConfig:
        v = self.values
        return SynthConfig(
            num_classes=v["num_classes"], train_per_class=v["train_per_class"],
            val_per_class=v["val_per_class"], test_per_class=v["test_per_class"],
            image_size=v["image_size"], bg_mode=v["bg_mode"], marker_mode=v["marker_mode"],
            scale_min=v["scale_min"], scale_max=v["scale_max"], bg_contrast=v["bg_contrast"],
            seed=v["seed"],
        )


TRAIN_KEYS = (
    "seed", "channels", "K", "stride_mod", "epochs", "lr1", "lr2", "momentum", "S", "N",
    "lambda1", "lambda2", "intensity_aug", "mask_variant", "batches_per_epoch",
    "detach_norm", "map_order",
)
EVAL_KEYS = ("split", "deltas", "grid", "connectivity", "largest_only", "pxap_per_image")
