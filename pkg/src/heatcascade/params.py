"""Named trainable tensors, each tagged as coarse-side or fine-side."""

from __future__ import annotations

from pathlib import Path
from typing import Iterator, Literal

import numpy as np

from . import container
from .autodiff import Tensor

Side = Literal["coarse", "fine"]


class ModelParams:
    def __init__(self):
        self.tensors: dict[str, Tensor] = {}
        self.side: dict[str, Side] = {}

    def add(self, name: str, values: np.ndarray, side: Side) -> Tensor:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(np.array(values), requires_grad=True)
        self.tensors[name] = t
        self.side[name] = side
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self.tensors[name]
        except KeyError:
            raise KeyError(f"missing parameter {name!r}; params do not match the model config") from None

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def names(self, side: Side | None = None) -> list[str]:
        return [n for n in self.tensors if side is None or self.side[n] == side]

    def count(self, side: Side | None = None, prefix: str = "") -> int:
        return sum(self.tensors[n].data.size for n in self.names(side) if n.startswith(prefix))

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def merge(self, other: "ModelParams") -> "ModelParams":
        """Add every tensor of ``other`` (shared storage, not copied)."""
        for n, t in other.tensors.items():
            if n in self.tensors:
                raise KeyError(f"duplicate parameter {n}")
            self.tensors[n] = t
            self.side[n] = other.side[n]
        return self

    def subset(self, prefix: str) -> "ModelParams":
        out = ModelParams()
        for n in self.tensors:
            if n.startswith(prefix):
                out.tensors[n] = self.tensors[n]
                out.side[n] = self.side[n]
        return out

    def astype(self, dtype) -> "ModelParams":
        out = ModelParams()
        for n, t in self.tensors.items():
            out.add(n, t.data.astype(dtype) if dtype is not None else t.data.copy(), self.side[n])
        return out

    def copy(self) -> "ModelParams":
        return self.astype(None)

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.tensors.items()}

    def save(self, path: str | Path, meta: dict | None = None) -> None:
        meta = dict(meta or {})
        meta["sides"] = self.side
        container.save(path, self.state(), b"CKPT", meta)

    @classmethod
    def load(cls, path: str | Path) -> tuple["ModelParams", dict]:
        tensors, meta = container.load(path, b"CKPT")
        sides = meta.pop("sides", {})
        out = cls()
        for n, arr in tensors.items():
            out.add(n, arr, sides.get(n, "coarse"))
        return out, meta


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype=np.float32) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
