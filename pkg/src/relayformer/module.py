"""Parameter containers for model components.

A ``Module`` owns named parameters (gradient-tracked tensors), named
buffers (plain numpy state such as normalization running statistics) and
child modules. Names are dotted paths, stable across runs, and define the
checkpoint manifest order.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor


class Module:
    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, Module] = {}
        self.training = True

    def param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True)
        self._params[name] = t
        return t

    def buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        arr = np.asarray(value)
        self._buffers[name] = arr
        return arr

    def child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def add_children(self, name: str, modules: list["Module"]) -> list["Module"]:
        for i, m in enumerate(modules):
            self.child(f"{name}.{i}", m)
        return modules

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, t in self._params.items():
            yield prefix + name, t
        for name, m in self._children.items():
            yield from m.named_parameters(prefix + name + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, arr in self._buffers.items():
            yield prefix + name, arr
        for name, m in self._children.items():
            yield from m.named_buffers(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(t.size for t in self.parameters())

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for m in self._children.values():
            m.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        """Cast all parameters and buffers (float32 <-> float64).

        Buffer attributes follow the convention that the registered name is
        also the attribute name on the owning module, so rebinding keeps
        direct references valid.
        """
        for name, t in self._params.items():
            t.data = t.data.astype(dtype)
        for name, arr in list(self._buffers.items()):
            if arr.dtype.kind == "f":
                cast = arr.astype(dtype)
                self._buffers[name] = cast
                if getattr(self, name, None) is arr:
                    setattr(self, name, cast)
        for m in self._children.values():
            m.astype(dtype)
        return self
