"""Tiny convolutional backbones with a GAP + linear classification head."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .exceptions import InvalidShapeError, InvalidSpecError, LoadError
from .ndtensor import ParamSet, Tensor, conv2d, gap, linear, relu
from .ndtensor.io import read_tensor, write_tensor

CHECKPOINT_MAGIC = b"MMC1"


@dataclass(frozen=True)
class ConvLayer:
    in_ch: int
    out_ch: int
    kernel: int = 3
    stride: int = 1
    pad: int = 1
    relu: bool = True

    def out_extent(self, n: int, stride: Optional[int] = None) -> int:
        s = self.stride if stride is None else stride
        return (n + 2 * self.pad - self.kernel) // s + 1


@dataclass(frozen=True)
class BackboneSpec:
    """Ordered conv layers; ``stride_mod`` sets the last strided conv to stride 1."""

    layers: tuple[ConvLayer, ...]
    stride_mod: bool = False
    min_input: int = 16

    @property
    def in_channels(self) -> int:
        return self.layers[0].in_ch

    @property
    def feature_channels(self) -> int:
        return self.layers[-1].out_ch

    @property
    def modified_layer(self) -> Optional[int]:
        strided = [i for i, l in enumerate(self.layers) if l.stride > 1]
        return strided[-1] if strided else None

    def effective_strides(self) -> list[int]:
        strides = [l.stride for l in self.layers]
        if self.stride_mod and self.modified_layer is not None:
            strides[self.modified_layer] = 1
        return strides

    def feature_extent(self, n: int) -> int:
        for layer, s in zip(self.layers, self.effective_strides()):
            n = layer.out_extent(n, s)
        return n

    def validate(self) -> "BackboneSpec":
        if not self.layers:
            raise InvalidSpecError("backbone needs at least one conv layer")
        for i, l in enumerate(self.layers):
            if min(l.in_ch, l.out_ch, l.kernel, l.stride) < 1 or l.pad < 0:
                raise InvalidSpecError(f"layer {i} has non-positive sizes: {l}")
            if i and l.in_ch != self.layers[i - 1].out_ch:
                raise InvalidSpecError(
                    f"layer {i} expects {l.in_ch} channels, previous layer emits {self.layers[i - 1].out_ch}"
                )
        n = self.min_input
        for i, (l, s) in enumerate(zip(self.layers, self.effective_strides())):
            if n + 2 * l.pad < l.kernel:
                raise InvalidSpecError(f"layer {i} kernel does not fit a {self.min_input}px input")
            n = l.out_extent(n, s)
        if n < 1:
            raise InvalidSpecError("minimum input collapses to an empty feature map")
        return self

    def to_text(self) -> str:
        layers = ",".join(
            f"{l.in_ch}:{l.out_ch}:{l.kernel}:{l.stride}:{l.pad}:{int(l.relu)}" for l in self.layers
        )
        return f"layers={layers}\nstride_mod={int(self.stride_mod)}\nmin_input={self.min_input}\n"

    @classmethod
    def from_fields(cls, fields: dict) -> "BackboneSpec":
        try:
            layers = tuple(
                ConvLayer(*(int(v) for v in item.split(":")[:5]), relu=bool(int(item.split(":")[5])))
                for item in fields["layers"].split(",")
            )
            return cls(layers, bool(int(fields["stride_mod"])), int(fields.get("min_input", 16)))
        except (KeyError, ValueError, IndexError) as exc:
            raise InvalidSpecError(f"malformed backbone descriptor: {exc}") from exc


def default_backbone(
    channels: tuple[int, ...] = (16, 32, 64), k: int = 64, stride_mod: bool = False, in_ch: int = 3
) -> BackboneSpec:
    """3x3 relu conv blocks; every block but the last halves the resolution.

    With the default widths a 64x64 input yields an 8x8 map, or 16x16 with
    ``stride_mod``.
    """
    widths = (in_ch,) + tuple(channels) + (k,)
    layers = tuple(
        ConvLayer(widths[i], widths[i + 1], 3, 2 if i < len(channels) else 1, 1, True)
        for i in range(len(widths) - 1)
    )
    return BackboneSpec(layers, stride_mod=stride_mod).validate()


@dataclass
class Model:
    spec: BackboneSpec
    n_classes: int
    params: ParamSet
    stage2_params: ParamSet = field(init=False)

    def __post_init__(self):
        # head-only optimizer state for the regularization stage
        self.stage2_params = self.params.view(["head.w"])

    @property
    def backbone_names(self) -> list[str]:
        return [n for n in self.params if not n.startswith("head.")]

    @property
    def head_w(self) -> Tensor:
        return self.params["head.w"]

    @property
    def head_b(self) -> Tensor:
        return self.params["head.b"]

    @property
    def feature_channels(self) -> int:
        return self.spec.feature_channels

    def copy(self) -> "Model":
        params = ParamSet()
        for n, t in self.params.items():
            params.add(n, Tensor(t.data.copy()), trainable=t.requires_grad)
        return Model(self.spec, self.n_classes, params)


def build_model(spec: BackboneSpec, n_classes: int, rng_seed: int = 0) -> Model:
    """Fan-in scaled normal weights and zero biases, deterministic per seed."""
    spec.validate()
    if n_classes < 2:
        raise InvalidSpecError(f"need at least 2 classes, got {n_classes}")
    rng = np.random.default_rng(rng_seed)
    params = ParamSet()
    for i, l in enumerate(spec.layers):
        fan_in = l.in_ch * l.kernel * l.kernel
        w = rng.standard_normal((l.out_ch, l.in_ch, l.kernel, l.kernel)) * np.sqrt(2.0 / fan_in)
        params.add(f"conv{i}.w", Tensor(w))
        params.add(f"conv{i}.b", Tensor(np.zeros(l.out_ch)))
    k = spec.feature_channels
    params.add("head.w", Tensor(rng.standard_normal((n_classes, k)) * np.sqrt(1.0 / k)))
    params.add("head.b", Tensor(np.zeros(n_classes)))
    return Model(spec, n_classes, params)


def _check_images(model: Model, images: Tensor) -> None:
    if images.ndim != 4 or images.shape[1] != model.spec.in_channels:
        raise InvalidShapeError(
            f"expected N x {model.spec.in_channels} x H x W images, got {images.shape}"
        )
    if min(images.shape[2:]) < model.spec.min_input:
        raise InvalidShapeError(
            f"images {images.shape[2:]} smaller than the minimum {model.spec.min_input}px"
        )


def forward_features(model: Model, images) -> Tensor:
    """Backbone feature map, N x K x h x w."""
    x = images if isinstance(images, Tensor) else Tensor(images)
    _check_images(model, x)
    for i, (layer, s) in enumerate(zip(model.spec.layers, model.spec.effective_strides())):
        x = conv2d(x, model.params[f"conv{i}.w"], model.params[f"conv{i}.b"], stride=s, pad=layer.pad)
        if layer.relu:
            x = relu(x)
    return x


def classify(model: Model, images) -> Tensor:
    """Logits from GAP over the backbone features followed by the linear head."""
    return linear(gap(forward_features(model, images)), model.head_w, model.head_b)


def predict_logits(model: Model, images: np.ndarray, batch_size: int = 100) -> np.ndarray:
    out = [
        classify(model, images[i : i + batch_size]).data for i in range(0, len(images), batch_size)
    ]
    return np.concatenate(out) if out else np.zeros((0, model.n_classes))


def save_checkpoint(model: Model, path, meta: Optional[dict] = None) -> None:
    """MMC1 magic, u32-length key=value descriptor, then named NDT1 records."""
    text = f"n_classes={model.n_classes}\n" + model.spec.to_text()
    for k, v in sorted((meta or {}).items()):
        text += f"meta.{k}={v}\n"
    text += "params=" + ",".join(model.params.names()) + "\n"
    blob = text.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name, t in model.params.items():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            write_tensor(fh, t.data)


def read_checkpoint_meta(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def _read_header(fh, path) -> dict:
    if fh.read(4) != CHECKPOINT_MAGIC:
        raise LoadError(f"{path}: not an MMC1 checkpoint")
    raw = fh.read(4)
    if len(raw) != 4:
        raise LoadError(f"{path}: truncated checkpoint header")
    (n,) = struct.unpack("<I", raw)
    text = fh.read(n)
    if len(text) != n:
        raise LoadError(f"{path}: truncated checkpoint descriptor")
    fields = {}
    for line in text.decode("utf-8").splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            fields[k.strip()] = v.strip()
    return fields


def load_checkpoint(path) -> Model:
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise LoadError(f"cannot open checkpoint {path}: {exc}") from exc
    with fh:
        fields = _read_header(fh, path)
        spec = BackboneSpec.from_fields(fields).validate()
        names = fields.get("params", "").split(",")
        params = ParamSet()
        for expected in names:
            raw = fh.read(4)
            if len(raw) != 4:
                raise LoadError(f"{path}: missing parameter {expected!r}")
            (n,) = struct.unpack("<I", raw)
            name = fh.read(n).decode("utf-8")
            if name != expected:
                raise LoadError(f"{path}: expected parameter {expected!r}, found {name!r}")
            params.add(name, Tensor(read_tensor(fh)))
    model = Model(spec, int(fields["n_classes"]), params)
    ref = build_model(spec, model.n_classes)
    for name, t in ref.params.items():
        if name not in params or params[name].shape != t.shape:
            raise LoadError(f"{path}: parameter {name!r} missing or mis-shaped")
    return model


__all__ = [
    "BackboneSpec",
    "ConvLayer",
    "Model",
    "build_model",
    "classify",
    "default_backbone",
    "forward_features",
    "load_checkpoint",
    "predict_logits",
    "read_checkpoint_meta",
    "save_checkpoint",
]
