"""Named parameter collections and the momentum SGD update."""

from __future__ import annotations

from collections import OrderedDict
from contextlib import contextmanager
from typing import Iterable, Iterator

import numpy as np

from ..exceptions import InvalidArgumentError, MissingGradientError
from .tensor import Tensor


class ParamSet:
    """Ordered name -> Tensor mapping with per-parameter momentum buffers.

    A parameter is trainable exactly when its tensor has ``requires_grad``
    set.  :meth:`view` builds a second set over the same tensors with its own
    momentum buffers, so two optimizers can share parameters without mixing
    their velocity state.
    """

    def __init__(self, params: Iterable[tuple[str, Tensor]] = ()):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.momentum: dict[str, np.ndarray] = {}
        for name, t in params:
            self.add(name, t)

    def add(self, name: str, tensor: Tensor, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise InvalidArgumentError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = bool(trainable)
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def trainable(self, name: str) -> bool:
        return self._params[name].requires_grad

    def set_trainable(self, names: Iterable[str], flag: bool) -> None:
        for n in names:
            self._params[n].requires_grad = bool(flag)

    def view(self, names: Iterable[str]) -> "ParamSet":
        out = ParamSet()
        for n in names:
            out._params[n] = self._params[n]
        return out

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    @contextmanager
    def frozen(self, names: Iterable[str]):
        """Temporarily mark ``names`` non-trainable."""
        names = list(names)
        saved = {n: self._params[n].requires_grad for n in names}
        self.set_trainable(names, False)
        try:
            yield self
        finally:
            for n, flag in saved.items():
                self._params[n].requires_grad = flag


def sgd_step(params: ParamSet, lr: float, momentum: float = 0.9) -> ParamSet:
    """``v <- momentum * v + grad``; ``p <- p - lr * v`` for trainable params."""
    if lr < 0 or momentum < 0:
        raise InvalidArgumentError("lr and momentum must be non-negative")
    for name, p in params.items():
        if not p.requires_grad:
            continue
        if p.grad is None:
            raise MissingGradientError(f"trainable parameter {name!r} has no gradient")
        v = params.momentum.get(name)
        v = p.grad.copy() if v is None else momentum * v + p.grad
        params.momentum[name] = v
        p.data = p.data - lr * v
    return params
