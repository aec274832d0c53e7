"""Differentiable building blocks for the CAM pipeline.

Shape checks live in the public wrappers; the ``Function`` subclasses assume
validated inputs.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..exceptions import InvalidArgumentError, InvalidShapeError
from .tensor import Function, Tensor, as_tensor, stack

DEFAULT_EPS = 1e-12


class Conv2d(Function):
    stride = 1
    pad = 0

    def forward(self, x, w, b):
        s, p = self.stride, self.pad
        n, c, h, wd = x.shape
        o, _, kh, kw = w.shape
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        ho = (h + 2 * p - kh) // s + 1
        wo = (wd + 2 * p - kw) // s + 1
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
        cols = win[:, :, :ho, :wo].transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, -1)
        wmat = w.reshape(o, -1)
        out = cols @ wmat.T
        if b is not None:
            out += b
        self.cols = cols if self.needs_input_grad[1] else None
        self.wmat = wmat
        self.geom = (x.shape, xp.shape, w.shape, ho, wo)
        return out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def backward(self, g):
        (n, c, h, wd), xp_shape, w_shape, ho, wo = self.geom
        o, _, kh, kw = w_shape
        s, p = self.stride, self.pad
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gx = gw = gb = None
        if self.needs_input_grad[1]:
            gw = (g2.T @ self.cols).reshape(w_shape)
        if len(self.needs_input_grad) > 2 and self.needs_input_grad[2]:
            gb = g2.sum(axis=0)
        if self.needs_input_grad[0]:
            # channel-major scatter keeps every strided add contiguous in the source
            dcols = np.tensordot(self.wmat.reshape(w_shape), g, axes=([0], [1]))  # c,kh,kw,n,ho,wo
            dxp = np.zeros((c, n) + xp_shape[2:])
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += dcols[:, i, j]
            gx = dxp[:, :, p : p + h, p : p + wd].transpose(1, 0, 2, 3)
        return gx, gw, gb


class _Conv2dNoBias(Conv2d):
    def forward(self, x, w):
        return super().forward(x, w, None)

    def backward(self, g):
        gx, gw, _ = super().backward(g)
        return gx, gw


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of an NCHW batch with OIKK kernels."""
    x, w = as_tensor(x), as_tensor(w)
    if int(stride) != stride or stride <= 0:
        raise InvalidArgumentError(f"stride must be a positive int, got {stride}")
    if int(pad) != pad or pad < 0:
        raise InvalidArgumentError(f"pad must be a non-negative int, got {pad}")
    if x.ndim != 4 or w.ndim != 4:
        raise InvalidShapeError(f"conv2d expects NCHW input and OIKK weights, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise InvalidShapeError(f"channel mismatch: input {x.shape[1]} vs kernel {w.shape[1]}")
    if x.shape[2] + 2 * pad < w.shape[2] or x.shape[3] + 2 * pad < w.shape[3]:
        raise InvalidShapeError(
            f"kernel {w.shape[2:]} does not fit input {x.shape[2:]} with pad {pad}"
        )
    if b is None:
        return _Conv2dNoBias.apply(x, w, stride=int(stride), pad=int(pad))
    b = as_tensor(b)
    if b.shape != (w.shape[0],):
        raise InvalidShapeError(f"bias shape {b.shape} does not match {w.shape[0]} filters")
    return Conv2d.apply(x, w, b, stride=int(stride), pad=int(pad))


class ReLU(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0.0)

    def backward(self, g):
        return (g * self.mask,)


def relu(x) -> Tensor:
    return ReLU.apply(x)


class GlobalAvgPool(Function):
    def forward(self, x):
        self.in_shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, g):
        n, c, h, w = self.in_shape
        return (np.broadcast_to(g[:, :, None, None] / (h * w), self.in_shape).copy(),)


def gap(x) -> Tensor:
    """Spatial mean per channel: NCHW -> NC."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] * x.shape[3] < 1:
        raise InvalidShapeError(f"gap expects a non-empty NCHW tensor, got {x.shape}")
    return GlobalAvgPool.apply(x)


class Linear(Function):
    def forward(self, v, w, b=None):
        self.vec = v.ndim == 1
        v2 = v.reshape(1, -1) if self.vec else v
        self.v, self.w = v2, w
        out = v2 @ w.T
        if b is not None:
            out = out + b
        return out[0] if self.vec else out

    def backward(self, g):
        g2 = g.reshape(1, -1) if self.vec else g
        gv = gw = gb = None
        if self.needs_input_grad[0]:
            gv = g2 @ self.w
            gv = gv[0] if self.vec else gv
        if self.needs_input_grad[1]:
            gw = g2.T @ self.v
        if len(self.needs_input_grad) > 2 and self.needs_input_grad[2]:
            gb = g2.sum(axis=0)
        return gv, gw, gb


def linear(v, w, b=None) -> Tensor:
    """``v @ w.T + b`` for v of shape (N, C_in) or (C_in,)."""
    v, w = as_tensor(v), as_tensor(w)
    if w.ndim != 2 or v.ndim not in (1, 2) or v.shape[-1] != w.shape[1]:
        raise InvalidShapeError(f"linear: cannot apply weights {w.shape} to input {v.shape}")
    if b is None:
        return Linear.apply(v, w)
    b = as_tensor(b)
    if b.shape != (w.shape[0],):
        raise InvalidShapeError(f"linear: bias shape {b.shape} != ({w.shape[0]},)")
    return Linear.apply(v, w, b)


class MulBroadcast(Function):
    def forward(self, img, mask):
        self.img, self.mask = img, mask
        return img * mask

    def backward(self, g):
        gi = g * self.mask if self.needs_input_grad[0] else None
        gm = (g * self.img).sum(axis=1, keepdims=True) if self.needs_input_grad[1] else None
        return gi, gm


def mul_broadcast(images, maps) -> Tensor:
    """Multiply every channel of an NCHW batch by a per-image N1HW map."""
    images, maps = as_tensor(images), as_tensor(maps)
    if maps.ndim == 3:
        maps = maps.reshape(maps.shape[0], 1, *maps.shape[1:])
    if images.ndim != 4 or maps.ndim != 4 or maps.shape[1] != 1:
        raise InvalidShapeError(f"mul_broadcast expects NCHW and N1HW, got {images.shape}, {maps.shape}")
    if (images.shape[0],) + images.shape[2:] != (maps.shape[0],) + maps.shape[2:]:
        raise InvalidShapeError(f"mask {maps.shape} does not align with images {images.shape}")
    return MulBroadcast.apply(images, maps)


class MinMaxNormalize(Function):
    eps = DEFAULT_EPS
    detach = False

    def forward(self, m):
        self.in_shape = m.shape
        flat = m.reshape(-1, m.shape[-2] * m.shape[-1])
        rows = np.arange(flat.shape[0])
        self.amin = flat.argmin(axis=1)
        self.amax = flat.argmax(axis=1)
        self.lo = flat[rows, self.amin]
        self.den = flat[rows, self.amax] - self.lo + self.eps
        self.shifted = flat - self.lo[:, None]
        return (self.shifted / self.den[:, None]).reshape(m.shape)

    def backward(self, g):
        gf = g.reshape(self.shifted.shape)
        den = self.den
        gm = gf / den[:, None]
        if not self.detach:
            rows = np.arange(gf.shape[0])
            s_plain = gf.sum(axis=1)
            s_shift = (gf * self.shifted).sum(axis=1)
            g_hi = -s_shift / (den * den)
            g_lo = -s_plain / den - g_hi
            np.add.at(gm, (rows, self.amin), g_lo)
            np.add.at(gm, (rows, self.amax), g_hi)
        return (gm.reshape(self.in_shape),)


def minmax_normalize(m, eps: float = DEFAULT_EPS, detach: bool = False) -> Tensor:
    """Rescale each map over its last two axes to ``(m - min) / (max - min + eps)``.

    Gradients reach the extreme values through the first row-major
    arg-min/arg-max unless ``detach`` treats them as constants.
    """
    m = as_tensor(m)
    if eps <= 0:
        raise InvalidArgumentError(f"eps must be positive, got {eps}")
    if m.ndim < 2:
        raise InvalidShapeError(f"minmax_normalize needs at least 2 dims, got {m.shape}")
    return MinMaxNormalize.apply(m, eps=float(eps), detach=bool(detach))


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row r holds the bilinear weights for output sample r along one axis."""
    coords = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    coords = np.clip(coords, 0.0, n_in - 1)
    i0 = np.floor(coords).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = coords - i0
    mat = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(mat, (rows, i0), 1.0 - frac)
    np.add.at(mat, (rows, i1), frac)
    return mat


class BilinearResize(Function):
    out_h: int
    out_w: int

    def forward(self, m):
        self.ry = interp_matrix(m.shape[-2], self.out_h)
        self.rx = interp_matrix(m.shape[-1], self.out_w)
        return self.ry @ m @ self.rx.T

    def backward(self, g):
        return (self.ry.T @ g @ self.rx,)


def bilinear_resize(m, out_h: int, out_w: int) -> Tensor:
    """Half-pixel-centred bilinear resampling over the last two axes."""
    m = as_tensor(m)
    if out_h < 1 or out_w < 1:
        raise InvalidArgumentError(f"output extents must be >= 1, got {out_h}x{out_w}")
    if m.ndim < 2:
        raise InvalidShapeError(f"bilinear_resize needs at least 2 dims, got {m.shape}")
    if m.shape[-2:] == (out_h, out_w):
        return m
    return BilinearResize.apply(m, out_h=int(out_h), out_w=int(out_w))


class SoftmaxCrossEntropy(Function):
    labels: np.ndarray

    def forward(self, logits):
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        s = e.sum(axis=1, keepdims=True)
        self.probs = e / s
        rows = np.arange(len(self.labels))
        nll = np.log(s[:, 0]) - z[rows, self.labels]
        return np.asarray(nll.mean())

    def backward(self, g):
        n = len(self.labels)
        d = self.probs.copy()
        d[np.arange(n), self.labels] -= 1.0
        return (d * (g / n),)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise InvalidShapeError(f"logits {logits.shape} and labels {labels.shape} disagree")
    if not np.issubdtype(labels.dtype, np.integer):
        raise InvalidArgumentError("labels must be integer class ids")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise InvalidArgumentError(f"labels must lie in [0, {logits.shape[1]})")
    return SoftmaxCrossEntropy.apply(logits, labels=labels.astype(np.int64))


class SqL2(Function):
    def forward(self, a, b):
        self.diff = a - b
        return np.asarray(np.sum(self.diff * self.diff))

    def backward(self, g):
        d = 2.0 * g * self.diff
        return d, -d


def sq_l2(a, b) -> Tensor:
    """Sum of squared differences."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise InvalidShapeError(f"sq_l2 shapes differ: {a.shape} vs {b.shape}")
    return SqL2.apply(a, b)


def tensor_sum(x) -> Tensor:
    return as_tensor(x).sum()


__all__ = [
    "DEFAULT_EPS",
    "bilinear_resize",
    "conv2d",
    "gap",
    "interp_matrix",
    "linear",
    "minmax_normalize",
    "mul_broadcast",
    "relu",
    "softmax_cross_entropy",
    "sq_l2",
    "stack",
    "tensor_sum",
]
