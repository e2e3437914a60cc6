"""Named-layer parameter storage, binary masks and the elementwise algebra on them."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class StructuralMismatch(ValueError):
    """Two parameter/mask containers do not share names, order and lengths."""


class DegenerateModel(ValueError):
    """Raised when a model has no prunable coordinates."""


@dataclass
class Layer:
    name: str
    shape: tuple[int, ...]
    values: np.ndarray
    prunable: bool

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.values = np.asarray(self.values).reshape(-1)
        if self.values.size != int(np.prod(self.shape, dtype=np.int64)):
            raise ValueError(
                f"layer {self.name!r}: {self.values.size} values for shape {self.shape}"
            )


@dataclass
class ParamVector:
    layers: list[Layer] = field(default_factory=list)

    @property
    def names(self) -> list[str]:
        return [l.name for l in self.layers]

    def __getitem__(self, name: str) -> Layer:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def flat(self) -> np.ndarray:
        if not self.layers:
            return np.zeros(0)
        return np.concatenate([l.values for l in self.layers])

    def size(self) -> int:
        return sum(l.values.size for l in self.layers)

    def copy(self) -> ParamVector:
        return ParamVector([Layer(l.name, l.shape, l.values.copy(), l.prunable) for l in self.layers])

    def astype(self, dtype) -> ParamVector:
        return ParamVector(
            [Layer(l.name, l.shape, l.values.astype(dtype), l.prunable) for l in self.layers]
        )

    def with_flat(self, flat: np.ndarray) -> ParamVector:
        """New vector with this structure and values taken from ``flat``."""
        flat = np.asarray(flat)
        if flat.size != self.size():
            raise StructuralMismatch(f"flat length {flat.size} != {self.size()}")
        out, i = [], 0
        for l in self.layers:
            n = l.values.size
            out.append(Layer(l.name, l.shape, flat[i:i + n].copy(), l.prunable))
            i += n
        return ParamVector(out)

    def zeros_like(self) -> ParamVector:
        return self.with_flat(np.zeros(self.size()))

    def bitwise_equal(self, other: ParamVector) -> bool:
        if not same_structure(self, other):
            return False
        return all(
            a.values.dtype == b.values.dtype and a.values.tobytes() == b.values.tobytes()
            for a, b in zip(self.layers, other.layers)
        )


@dataclass
class MaskLayer:
    name: str
    bits: np.ndarray
    prunable: bool

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool).reshape(-1)


@dataclass
class PruneMask:
    layers: list[MaskLayer] = field(default_factory=list)

    @classmethod
    def ones_like(cls, p: ParamVector) -> PruneMask:
        return cls([MaskLayer(l.name, np.ones(l.values.size, bool), l.prunable) for l in p.layers])

    def flat(self) -> np.ndarray:
        if not self.layers:
            return np.zeros(0, bool)
        return np.concatenate([l.bits for l in self.layers])

    def prunable_flat(self) -> np.ndarray:
        """Per-coordinate flag telling whether the coordinate may be pruned."""
        if not self.layers:
            return np.zeros(0, bool)
        return np.concatenate([np.full(l.bits.size, l.prunable) for l in self.layers])

    def with_flat(self, flat: np.ndarray) -> PruneMask:
        flat = np.asarray(flat, dtype=bool)
        out, i = [], 0
        for l in self.layers:
            n = l.bits.size
            out.append(MaskLayer(l.name, flat[i:i + n].copy(), l.prunable))
            i += n
        return PruneMask(out)

    def copy(self) -> PruneMask:
        return PruneMask([MaskLayer(l.name, l.bits.copy(), l.prunable) for l in self.layers])

    def __eq__(self, other) -> bool:
        if not isinstance(other, PruneMask) or len(self.layers) != len(other.layers):
            return False
        return all(
            a.name == b.name and a.prunable == b.prunable and np.array_equal(a.bits, b.bits)
            for a, b in zip(self.layers, other.layers)
        )

    def validate(self) -> None:
        for l in self.layers:
            if not l.prunable and not l.bits.all():
                raise ValueError(f"non-prunable layer {l.name!r} has cleared bits")


def same_structure(a, b) -> bool:
    if len(a.layers) != len(b.layers):
        return False
    for x, y in zip(a.layers, b.layers):
        nx = x.values.size if isinstance(x, Layer) else x.bits.size
        ny = y.values.size if isinstance(y, Layer) else y.bits.size
        if x.name != y.name or nx != ny:
            return False
        if isinstance(x, Layer) and isinstance(y, Layer) and x.shape != y.shape:
            return False
    return True


def check_structure(a, b) -> None:
    if not same_structure(a, b):
        raise StructuralMismatch("layer names, order or lengths differ")


def apply_mask(p: ParamVector, m: PruneMask) -> ParamVector:
    check_structure(p, m)
    # np.where keeps +0.0 at cleared positions (multiplication could yield -0.0)
    return ParamVector(
        [
            Layer(l.name, l.shape, np.where(ml.bits, l.values, np.zeros((), l.values.dtype)), l.prunable)
            for l, ml in zip(p.layers, m.layers)
        ]
    )


def prunable_count(m: PruneMask) -> int:
    return sum(l.bits.size for l in m.layers if l.prunable)


def pruning_ratio(m: PruneMask) -> float:
    """Fraction of prunable coordinates whose bit is cleared."""
    total = prunable_count(m)
    if total == 0:
        raise DegenerateModel("mask has no prunable coordinates")
    cleared = sum(int(l.bits.size - np.count_nonzero(l.bits)) for l in m.layers if l.prunable)
    return cleared / total


def linear_combine(terms: Sequence[tuple[float, ParamVector]] | Iterable) -> ParamVector:
    terms = list(terms)
    if not terms:
        raise ValueError("linear_combine needs at least one term")
    ref = terms[0][1]
    acc = np.zeros(ref.size(), dtype=np.float64)
    for w, p in terms:
        check_structure(ref, p)
        acc += float(w) * p.flat().astype(np.float64)
    return ref.with_flat(acc)
