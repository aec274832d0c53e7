"""Two-stage MinMaxCAM training.

Stage I trains backbone and head for classification.  Stage II freezes the
backbone and updates only the head weights so that the class activation maps
minimize ``lambda1 * CRR + lambda2 * FRR``, where CRR is the mean pairwise
squared distance between masked-image features of same-class images and FRR
the squared distance between masked-image and original-image features.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np

from .cam import NORMALIZE_FIRST, compute_cam_raw, finalize_map, mask_features, mask_image
from .exceptions import InvalidArgumentError
from .ndtensor import Tape, Tensor, as_tensor, backward, gap, no_tape, sgd_step, softmax_cross_entropy, stack
from .nets import BackboneSpec, Model, build_model, classify, default_backbone, forward_features

logger = logging.getLogger(__name__)

MASK_INPUT = "input"
MASK_FEATURE = "feature"


@dataclass
class StageTwoConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lr2: Optional[float] = None

    def validate(self) -> "StageTwoConfig":
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise InvalidArgumentError("regularization weights must be non-negative")
        if self.lr2 is not None and self.lr2 <= 0:
            raise InvalidArgumentError("lr2 must be positive")
        return self

    @property
    def active(self) -> bool:
        return self.lambda1 > 0 or self.lambda2 > 0


@dataclass
class TrainConfig:
    epochs: int = 10
    lr1: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    S: int = 5
    N: int = 8
    stage2: StageTwoConfig = field(default_factory=StageTwoConfig)
    intensity_aug: Optional[tuple] = None
    mask_variant: str = MASK_INPUT
    batches_per_epoch: Optional[int] = None
    detach_norm: bool = False
    map_order: str = NORMALIZE_FIRST
    stride_mod: bool = False
    channels: tuple = (16, 32, 64)
    K: int = 64

    def validate(self) -> "TrainConfig":
        self.stage2.validate()
        if self.epochs < 0 or self.lr1 < 0 or self.momentum < 0:
            raise InvalidArgumentError("epochs, lr1 and momentum must be non-negative")
        if self.N < 1 or self.S < 1:
            raise InvalidArgumentError("N and S must be positive")
        if self.intensity_aug is not None:
            lo, hi = self.intensity_aug
            if not lo <= 1.0 <= hi or lo < 0:
                raise InvalidArgumentError(f"intensity range must satisfy 0 <= lo <= 1 <= hi, got {lo}, {hi}")
        if self.mask_variant not in (MASK_INPUT, MASK_FEATURE):
            raise InvalidArgumentError(f"mask_variant must be 'input' or 'feature', got {self.mask_variant!r}")
        return self

    def backbone(self) -> BackboneSpec:
        return default_backbone(tuple(self.channels), self.K, self.stride_mod)

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class SetBatch:
    """N groups of S consecutive same-class images."""

    images: np.ndarray
    labels: np.ndarray
    N: int
    S: int
    indices: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.labels) != self.N * self.S or len(self.images) != self.N * self.S:
            raise InvalidArgumentError(f"batch holds {len(self.labels)} samples, expected {self.N}x{self.S}")
        groups = self.labels.reshape(self.N, self.S)
        if (groups != groups[:, :1]).any():
            raise InvalidArgumentError("each group must hold a single class")
        if len(np.unique(groups[:, 0])) != self.N:
            raise InvalidArgumentError("group classes must be pairwise distinct")


class FeaturePair(NamedTuple):
    f: Tensor
    f_o: Tensor


def sample_set_batch(split, N: int, S: int, rng: np.random.Generator) -> SetBatch:
    """Draw N distinct classes and S images of each.

    Images are drawn without replacement unless the class has fewer than S.
    ``split`` needs ``images`` and ``labels`` arrays.
    """
    labels = np.asarray(split.labels)
    classes = np.unique(labels)
    if len(classes) < N:
        raise InvalidArgumentError(f"need {N} classes for a set batch, dataset has {len(classes)}")
    chosen = rng.choice(classes, size=N, replace=False)
    idx = []
    for c in chosen:
        pool = np.flatnonzero(labels == c)
        idx.append(rng.choice(pool, size=S, replace=len(pool) < S))
    idx = np.concatenate(idx)
    return SetBatch(split.images[idx], labels[idx], N, S, idx)


def crr(features: Union[Tensor, Sequence[Tensor]]) -> Tensor:
    """Mean pairwise squared distance over an S x K set of features."""
    f = stack(features) if isinstance(features, (list, tuple)) else as_tensor(features)
    s = f.shape[0]
    if s < 2:
        raise InvalidArgumentError(f"CRR needs at least 2 features, got {s}")
    diff = f.reshape(s, 1, -1) - f.reshape(1, s, -1)
    return (diff * diff).sum() * (1.0 / (s * (s - 1)))


def grouped_crr(features: Tensor, N: int, S: int) -> Tensor:
    """CRR per consecutive group of S, averaged over the N groups."""
    if S < 2:
        raise InvalidArgumentError(f"CRR needs S >= 2, got {S}")
    f = features.reshape(N, S, 1, -1)
    diff = f - features.reshape(N, 1, S, -1)
    return (diff * diff).sum() * (1.0 / (N * S * (S - 1)))


def frr(pairs: Sequence[FeaturePair]) -> Tensor:
    """Mean over pairs of the squared distance between masked and original features."""
    pairs = list(pairs)
    if not pairs:
        raise InvalidArgumentError("FRR needs at least one feature pair")
    f = stack([as_tensor(p[0]) for p in pairs])
    f_o = stack([as_tensor(p[1]) for p in pairs])
    return batched_frr(f, f_o)


def batched_frr(f: Tensor, f_o) -> Tensor:
    """FRR over row-aligned S x K feature matrices."""
    diff = f - as_tensor(f_o)
    return (diff * diff).sum() * (1.0 / f.shape[0])


def make_rngs(seed: int) -> dict[str, np.random.Generator]:
    """Independent streams for batch sampling and augmentation."""
    ss = np.random.SeedSequence(seed)
    sample, aug = ss.spawn(2)
    return {"sample": np.random.default_rng(sample), "aug": np.random.default_rng(aug)}


def stage1_step(model: Model, batch: SetBatch, lr1: float, momentum: float = 0.9, images=None) -> float:
    """One cross-entropy SGD step on backbone and head; returns the loss."""
    model.params.zero_grad()
    x = batch.images if images is None else images
    with Tape() as tape:
        loss = softmax_cross_entropy(classify(model, x), batch.labels)
    backward(tape, loss)
    sgd_step(model.params, lr1, momentum)
    return loss.item()


def stage2_loss(
    model: Model,
    batch: SetBatch,
    cfg: StageTwoConfig,
    mask_variant: str = MASK_INPUT,
    detach_norm: bool = False,
    map_order: str = NORMALIZE_FIRST,
):
    """Build the regularization loss on the active tape.

    Returns ``(loss, crr, frr)`` tensors.  The backbone is used as a fixed
    feature extractor: the caller controls which parameters require grads.
    """
    if batch.S < 2 and cfg.lambda1 > 0:
        raise InvalidArgumentError("CRR needs S >= 2 when lambda1 > 0")
    images = batch.images
    h, w = images.shape[2:]
    # original-image features: constant w.r.t. the head, never on the tape
    feats = Tensor(_features_untracked(model, images))
    f_o = Tensor(feats.data.mean(axis=(2, 3)))
    raw = compute_cam_raw(feats, model.head_w, batch.labels)
    maps = finalize_map(raw, h, w, order=map_order, detach_norm=detach_norm)
    if mask_variant == MASK_INPUT:
        f = gap(forward_features(model, mask_image(images, maps)))
    elif mask_variant == MASK_FEATURE:
        f = mask_features(feats, maps)
    else:
        raise InvalidArgumentError(f"unknown mask variant {mask_variant!r}")
    c = grouped_crr(f, batch.N, batch.S) if batch.S >= 2 else Tensor(0.0)
    r = batched_frr(f, f_o)
    loss = cfg.lambda1 * c + cfg.lambda2 * r
    return loss, c, r


def _features_untracked(model: Model, images) -> np.ndarray:
    with no_tape():
        return forward_features(model, images).data


def stage2_step(
    model: Model,
    batch: SetBatch,
    cfg: StageTwoConfig,
    mask_variant: str = MASK_INPUT,
    lr2: Optional[float] = None,
    momentum: float = 0.9,
    detach_norm: bool = False,
    map_order: str = NORMALIZE_FIRST,
) -> tuple[float, float]:
    """Head-only regularization step; returns ``(crr, frr)`` values.

    Backbone parameters and the head bias are excluded from the update and
    come out bit-identical.
    """
    cfg.validate()
    lr = cfg.lr2 if cfg.lr2 is not None else lr2
    if lr is None:
        raise InvalidArgumentError("stage II learning rate not set")
    params = model.params
    frozen = [n for n in params if n != "head.w"]
    with params.frozen(frozen):
        head_flag = params["head.w"].requires_grad
        params["head.w"].requires_grad = True
        try:
            params.zero_grad()
            with Tape() as tape:
                loss, c, r = stage2_loss(model, batch, cfg, mask_variant, detach_norm, map_order)
            if cfg.active:
                backward(tape, loss)
                sgd_step(model.stage2_params, lr, momentum)
        finally:
            params["head.w"].requires_grad = head_flag
            params.zero_grad()
    return c.item(), r.item()


def _augment(images: np.ndarray, rng: np.random.Generator, lo: float, hi: float) -> np.ndarray:
    factors = rng.uniform(lo, hi, size=(len(images), 1, 1, 1))
    return images * factors


@dataclass
class TrainResult:
    model: Model
    log: list

    def write_log(self, path) -> None:
        write_log_csv(self.log, path)


LOG_COLUMNS = ["epoch", "batch", "ce", "crr", "frr", "wall_ms"]


def write_log_csv(log, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in log:
            writer.writerow({k: row[k] for k in LOG_COLUMNS})


def batches_per_epoch(cfg: TrainConfig, n_train: int) -> int:
    if cfg.batches_per_epoch is not None:
        return int(cfg.batches_per_epoch)
    return max(1, -(-n_train // (cfg.N * cfg.S)))


def train(config: TrainConfig, split, n_classes: Optional[int] = None, model: Optional[Model] = None) -> TrainResult:
    """Interleave a Stage-I and a Stage-II step on every sampled set batch.

    ``split`` is the training split (``images`` in [0,1], ``labels``).  The
    maps for Stage II are rebuilt from the head after the Stage-I update.
    """
    config.validate()
    if n_classes is None:
        n_classes = int(np.max(split.labels)) + 1
    if model is None:
        model = build_model(config.backbone(), n_classes, rng_seed=config.seed)
    rngs = make_rngs(config.seed)
    lr2 = config.stage2.lr2 if config.stage2.lr2 is not None else config.lr1
    nb = batches_per_epoch(config, len(split.labels))
    log = []
    for epoch in range(config.epochs):
        for b in range(nb):
            t0 = time.perf_counter()
            batch = sample_set_batch(split, config.N, config.S, rngs["sample"])
            x = batch.images
            if config.intensity_aug is not None:
                x = _augment(x, rngs["aug"], *config.intensity_aug)
            ce = stage1_step(model, batch, config.lr1, config.momentum, images=x)
            c = r = float("nan")
            if config.stage2.active:
                c, r = stage2_step(
                    model, batch, config.stage2, config.mask_variant, lr2, config.momentum,
                    config.detach_norm, config.map_order,
                )
            log.append({
                "epoch": epoch, "batch": b, "ce": ce, "crr": c, "frr": r,
                "wall_ms": round(1000 * (time.perf_counter() - t0), 3),
            })
        logger.info("epoch %d: ce=%.4f crr=%.4f frr=%.4f", epoch, log[-1]["ce"], log[-1]["crr"], log[-1]["frr"])
    return TrainResult(model, log)


__all__ = [
    "FeaturePair",
    "batched_frr",
    "MASK_FEATURE",
    "MASK_INPUT",
    "SetBatch",
    "StageTwoConfig",
    "TrainConfig",
    "TrainResult",
    "crr",
    "frr",
    "grouped_crr",
    "make_rngs",
    "sample_set_batch",
    "stage1_step",
    "stage2_loss",
    "stage2_step",
    "train",
    "write_log_csv",
]
