"""Central finite-difference checks of tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .ndtensor import Tape, Tensor, backward, no_tape


def numeric_grad(fn: Callable[[], float], x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """d fn / d x by central differences, perturbing ``x`` in place."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn()
        flat[i] = orig - h
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``||a - b|| / max(||a||, ||b||)``, 0 when both vanish."""
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if den == 0 else float(np.linalg.norm(a - b) / den)


def check_gradients(
    build_loss: Callable[[], Tensor], wrt: Sequence[Tensor], h: float = 1e-4
) -> list[float]:
    """Relative error between tape and finite-difference gradients per input.

    ``build_loss`` must rebuild the scalar loss from the current values of
    ``wrt`` every time it is called.
    """
    for t in wrt:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = build_loss()
    backward(tape, loss)
    auto = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in wrt]

    def value() -> float:
        with no_tape():
            return build_loss().item()

    return [relative_error(a, numeric_grad(value, t.data, h)) for a, t in zip(auto, wrt)]


def _op_cases(rng: np.random.Generator) -> dict:
    # imported here to keep the module importable from the ops it checks
    from .cam import compute_cam_raw, finalize_map, mask_features, mask_image
    from .ndtensor import (
        bilinear_resize, conv2d, gap, linear, minmax_normalize, mul_broadcast, relu,
        softmax_cross_entropy, sq_l2,
    )

    def t(*shape, scale=1.0):
        return Tensor(rng.normal(size=shape) * scale)

    def weighted(out_fn, shape):
        c = rng.normal(size=shape)
        return lambda: (out_fn() * c).sum()

    x, w, b = t(2, 2, 5, 5), t(3, 2, 3, 3), t(3)
    r = t(2, 3, 4)
    m = t(2, 4, 5)
    v, lw, lb = t(3, 4), t(2, 4), t(2)
    img, h = Tensor(rng.random((2, 3, 4, 4))), Tensor(rng.random((2, 1, 4, 4)))
    z, labels = t(4, 3, scale=3.0), rng.integers(0, 3, 4)
    a, a2 = t(3, 2), t(3, 2)
    rs = t(2, 3, 4)
    fm, hk = t(2, 3, 3, 3), t(2, 3, 3)
    feats, hw = t(2, 4, 3, 3), t(3, 4)
    imgs = Tensor(rng.random((2, 3, 6, 6)))
    hmap = Tensor(rng.random((2, 6, 6)))
    return {
        "conv2d": (weighted(lambda: conv2d(x, w, b, stride=2, pad=1), (2, 3, 3, 3)), [x, w, b]),
        "relu": (weighted(lambda: relu(r), (2, 3, 4)), [r]),
        "gap": (weighted(lambda: gap(x), (2, 2)), [x]),
        "linear": (weighted(lambda: linear(v, lw, lb), (3, 2)), [v, lw, lb]),
        "mul_broadcast": (weighted(lambda: mul_broadcast(img, h), (2, 3, 4, 4)), [img, h]),
        "minmax_normalize": (weighted(lambda: minmax_normalize(m), (2, 4, 5)), [m]),
        "bilinear_resize": (weighted(lambda: bilinear_resize(rs, 7, 5), (2, 7, 5)), [rs]),
        "softmax_cross_entropy": (lambda: softmax_cross_entropy(z, labels), [z]),
        "sq_l2": (lambda: sq_l2(a, a2), [a, a2]),
        "compute_cam_raw": (weighted(lambda: compute_cam_raw(feats, hw, [0, 2]), (2, 3, 3)), [feats, hw]),
        "finalize_map": (weighted(lambda: finalize_map(hk, 5, 5), (2, 5, 5)), [hk]),
        "mask_image": (weighted(lambda: mask_image(imgs, hmap), (2, 3, 6, 6)), [imgs, hmap]),
        "mask_features": (weighted(lambda: mask_features(fm, hk), (2, 3)), [fm, hk]),
    }


def _stage2_case(rng: np.random.Generator, variant: str):
    from .minmax import SetBatch, StageTwoConfig, stage2_loss
    from .nets import BackboneSpec, ConvLayer, build_model

    spec = BackboneSpec((ConvLayer(3, 2, 3, 1, 1),), min_input=4)
    model = build_model(spec, 3, int(rng.integers(2**31)))
    for name in model.backbone_names:
        model.params[name].requires_grad = False
    batch = SetBatch(rng.random((4, 3, 4, 4)), np.array([0, 0, 2, 2]), 2, 2)
    cfg = StageTwoConfig(float(rng.uniform(0.5, 2)), float(rng.uniform(0.5, 2)))
    return (lambda: stage2_loss(model, batch, cfg, variant)[0]), [model.head_w]


def gradient_suite(seeds=range(5), h: float = 1e-4) -> dict[str, list[float]]:
    """Worst relative error per operation and seed, including the full
    regularization loss for both masking variants."""
    out: dict[str, list[float]] = {}
    for seed in seeds:
        rng = np.random.default_rng(seed)
        cases = _op_cases(rng)
        cases["stage2_loss[input]"] = _stage2_case(rng, "input")
        cases["stage2_loss[feature]"] = _stage2_case(rng, "feature")
        for name, (fn, wrt) in cases.items():
            out.setdefault(name, []).append(max(check_gradients(fn, wrt, h)))
    return out
