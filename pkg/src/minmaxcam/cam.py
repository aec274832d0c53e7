"""Class activation maps and the two masking pathways."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._pnm import read_pnm, write_pnm
from .exceptions import InvalidArgumentError, InvalidShapeError, LoadError
from .ndtensor import (
    DEFAULT_EPS,
    Tensor,
    as_tensor,
    bilinear_resize,
    gap,
    minmax_normalize,
    mul_broadcast,
)

NORMALIZE_FIRST = "normalize_first"
RESIZE_FIRST = "resize_first"


@dataclass
class LocalizationMap:
    values: np.ndarray
    class_id: int
    image_id: str = ""

    @property
    def resolution(self) -> tuple[int, int]:
        return self.values.shape


def _head_weights(head) -> Tensor:
    # accepts a Model, a bare weight tensor/array, or anything with ``head_w``
    w = getattr(head, "head_w", head)
    return as_tensor(w)


def compute_cam_raw(features, head, classes) -> Tensor:
    """Class-weighted sum of feature channels; the head bias is never read.

    ``features`` is K x h x w with a scalar class, or N x K x h x w with one
    class per image.  Differentiable in both the features and the weights.
    """
    features = as_tensor(features)
    w = _head_weights(head)
    single = features.ndim == 3
    if single:
        features = features.reshape(1, *features.shape)
    if features.ndim != 4 or w.ndim != 2 or features.shape[1] != w.shape[1]:
        raise InvalidShapeError(f"features {features.shape} do not match head weights {w.shape}")
    cls = np.atleast_1d(np.asarray(classes))
    if cls.shape != (features.shape[0],):
        raise InvalidShapeError(f"need one class per image, got {cls.shape} for {features.shape[0]}")
    if not np.issubdtype(cls.dtype, np.integer) or cls.min() < 0 or cls.max() >= w.shape[0]:
        raise InvalidArgumentError(f"class ids must be integers in [0, {w.shape[0]})")
    rows = w[cls.astype(np.int64)].reshape(len(cls), w.shape[1], 1, 1)
    raw = (rows * features).sum(axis=1)
    return raw.reshape(*raw.shape[1:]) if single else raw


def finalize_map(
    raw,
    out_h: int,
    out_w: int,
    eps: float = DEFAULT_EPS,
    order: str = NORMALIZE_FIRST,
    detach_norm: bool = False,
) -> Tensor:
    """Min-max normalize and resize raw maps (``... x h x w``) to the image grid."""
    if order == NORMALIZE_FIRST:
        return bilinear_resize(minmax_normalize(raw, eps, detach_norm), out_h, out_w)
    if order == RESIZE_FIRST:
        return minmax_normalize(bilinear_resize(raw, out_h, out_w), eps, detach_norm)
    raise InvalidArgumentError(f"unknown map order {order!r}")


def mask_image(images, maps) -> Tensor:
    """Element-wise product of [0,1] images with their localization maps."""
    images, maps = as_tensor(images), as_tensor(maps)
    if maps.shape[-2:] != images.shape[-2:]:
        raise InvalidShapeError(
            f"map resolution {maps.shape[-2:]} differs from image resolution {images.shape[-2:]}"
        )
    return mul_broadcast(images, maps)


def mask_features(fmap, maps) -> Tensor:
    """GAP of feature maps weighted by localization maps resized to their grid."""
    fmap, maps = as_tensor(fmap), as_tensor(maps)
    if maps.ndim == 4:
        maps = maps.reshape(maps.shape[0], *maps.shape[2:])
    if fmap.ndim != 4 or maps.ndim != 3 or maps.shape[0] != fmap.shape[0]:
        raise InvalidShapeError(f"cannot pair feature maps {fmap.shape} with maps {maps.shape}")
    small = bilinear_resize(maps, fmap.shape[2], fmap.shape[3])
    return gap(mul_broadcast(fmap, small))


def compute_maps(
    model,
    images: np.ndarray,
    classes,
    batch_size: int = 100,
    order: str = NORMALIZE_FIRST,
) -> np.ndarray:
    """Evaluation-time maps (N x H x W, values in [0,1]) for the given classes."""
    from .nets import forward_features

    classes = np.asarray(classes)
    h, w = images.shape[2:]
    out = []
    for i in range(0, len(images), batch_size):
        feats = forward_features(model, images[i : i + batch_size])
        raw = compute_cam_raw(feats, model, classes[i : i + batch_size])
        out.append(finalize_map(raw, h, w, order=order).data)
    return np.concatenate(out) if out else np.zeros((0, h, w))


def localization_maps(model, images, classes, image_ids: Sequence[str]) -> list[LocalizationMap]:
    values = compute_maps(model, images, classes)
    return [LocalizationMap(v, int(c), str(i)) for v, c, i in zip(values, classes, image_ids)]


def heatmap_filename(image_id: str, class_id: int) -> str:
    return f"{image_id}_{int(class_id)}.pgm"


def write_heatmap(path, values: np.ndarray) -> None:
    """16-bit P5 dump of ``round(clamp(H, 0, 1) * 65535)``."""
    q = np.round(np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0) * 65535.0)
    write_pnm(path, q.astype(np.uint16), maxval=65535)


def read_heatmap(path) -> np.ndarray:
    pixels, maxval = read_pnm(path)
    if pixels.ndim != 2:
        raise LoadError(f"{path}: heatmaps must be single-channel PGM")
    return pixels.astype(np.float64) / maxval


def quantize_heatmap(values: np.ndarray) -> np.ndarray:
    """The values a heatmap takes after a PGM round trip."""
    return np.round(np.clip(values, 0.0, 1.0) * 65535.0) / 65535.0


def dump_maps(out_dir, maps: Iterable[LocalizationMap]) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for m in maps:
        p = out_dir / heatmap_filename(m.image_id, m.class_id)
        write_heatmap(p, m.values)
        paths.append(p)
    return paths


def load_dumped_maps(in_dir, image_ids: Sequence[str], class_ids: Sequence[int]) -> list[LocalizationMap]:
    in_dir = Path(in_dir)
    out = []
    for iid, cid in zip(image_ids, class_ids):
        p = in_dir / heatmap_filename(iid, cid)
        if not os.path.exists(p):
            raise LoadError(f"missing heatmap {p}")
        out.append(LocalizationMap(read_heatmap(p), int(cid), str(iid)))
    return out
