"""Ordered, named parameter collections."""

from __future__ import annotations

import numpy as np

from metashot.diffcore.tensor import Tensor
from metashot.errors import ShapeError


class ParamSet:
    """An ordered mapping of unique names to tensors.

    Iteration follows insertion order. Instances are treated as immutable:
    every transformation returns a new ParamSet.
    """

    __slots__ = ("_entries",)

    def __init__(self, entries=()):
        if isinstance(entries, ParamSet):
            entries = entries.items()
        elif isinstance(entries, dict):
            entries = entries.items()
        d = {}
        for name, t in entries:
            if name in d:
                raise ValueError(f"duplicate parameter name {name!r}")
            d[name] = t if isinstance(t, Tensor) else Tensor(t)
        self._entries = d

    def __getitem__(self, name):
        return self._entries[name]

    def __contains__(self, name):
        return name in self._entries

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def names(self):
        return list(self._entries)

    def items(self):
        return list(self._entries.items())

    def tensors(self):
        return list(self._entries.values())

    def numel(self):
        return sum(t.size for t in self._entries.values())

    def __repr__(self):
        inner = ", ".join(f"{k}:{tuple(v.shape)}" for k, v in self._entries.items())
        return f"ParamSet({inner})"

    def congruent(self, other):
        if self.names() != other.names():
            return False
        return all(self[k].shape == other[k].shape for k in self)

    def require_congruent(self, other, what="parameter sets"):
        if not self.congruent(other):
            raise ShapeError(what, f"not congruent: {self!r} vs {other!r}")

    def subset(self, names):
        return ParamSet((n, self._entries[n]) for n in names)

    def select(self, predicate):
        return ParamSet((n, t) for n, t in self._entries.items() if predicate(n))

    def merge(self, other):
        """Entries of ``other`` replace same-named entries; new names are appended."""
        d = dict(self._entries)
        d.update(other.items())
        return ParamSet(d.items())

    def map(self, fn):
        return ParamSet((n, fn(n, t)) for n, t in self._entries.items())

    def detach(self, requires_grad=False):
        return ParamSet(
            (n, Tensor(t.data.copy(), requires_grad=requires_grad)) for n, t in self._entries.items()
        )

    def arrays(self):
        return {n: t.data for n, t in self._entries.items()}

    def equal(self, other):
        """Bit-exact comparison of names, shapes and values."""
        return self.congruent(other) and all(
            np.array_equal(self[k].data, other[k].data) for k in self
        )

    @classmethod
    def like(cls, other, value):
        return cls((n, Tensor(np.full(t.shape, float(value)))) for n, t in other.items())
