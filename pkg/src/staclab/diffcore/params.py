"""Named collections of float64 arrays with a fixed shape signature."""

from collections.abc import Mapping

import numpy as np


class StructureError(ValueError):
    """Two parameter collections do not line up name-for-name and shape-for-shape."""


class ParamSet(Mapping):
    """Immutable mapping of parameter name to array.

    The set of names and their shapes is fixed at construction. Operations
    return new instances; arrays handed out are read-only views.
    """

    __slots__ = ("_arrays",)

    def __init__(self, arrays):
        items = {}
        for name, value in dict(arrays).items():
            arr = np.array(value, dtype=np.float64)
            arr.setflags(write=False)
            items[str(name)] = arr
        self._arrays = items

    def __getitem__(self, name):
        return self._arrays[name]

    def __iter__(self):
        return iter(self._arrays)

    def __len__(self):
        return len(self._arrays)

    def __repr__(self):
        inner = ", ".join(f"{k}: {v.shape}" for k, v in self._arrays.items())
        return f"{type(self).__name__}({{{inner}}})"

    @property
    def shapes(self):
        return {k: v.shape for k, v in self._arrays.items()}

    @property
    def size(self):
        return int(sum(v.size for v in self._arrays.values()))

    def check_congruent(self, other):
        if list(self.keys()) != list(other.keys()):
            raise StructureError(f"names differ: {list(self)} vs {list(other)}")
        for k in self:
            if self[k].shape != other[k].shape:
                raise StructureError(f"shape of '{k}' differs: {self[k].shape} vs {other[k].shape}")

    def is_finite(self):
        return all(np.isfinite(v).all() for v in self._arrays.values())

    def map(self, fn, *others):
        for o in others:
            self.check_congruent(o)
        return type(self)({k: fn(v, *(o[k] for o in others)) for k, v in self._arrays.items()})

    def subset(self, names):
        return type(self)({k: self._arrays[k] for k in names})

    def update(self, **changes):
        merged = dict(self._arrays)
        for k, v in changes.items():
            if k not in merged:
                raise StructureError(f"unknown parameter '{k}'")
            if np.shape(v) != merged[k].shape:
                raise StructureError(f"shape of '{k}' would change")
            merged[k] = v
        return type(self)(merged)

    def zeros_like(self):
        return type(self)({k: np.zeros_like(v) for k, v in self._arrays.items()})

    def flatten(self):
        if not self._arrays:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._arrays.values()])

    def unflatten(self, vector):
        vector = np.asarray(vector, dtype=np.float64)
        if vector.size != self.size:
            raise StructureError(f"vector has {vector.size} entries, expected {self.size}")
        out, i = {}, 0
        for k, v in self._arrays.items():
            out[k] = vector[i : i + v.size].reshape(v.shape)
            i += v.size
        return type(self)(out)

    def equals(self, other):
        """Bitwise equality of names, shapes and values."""
        try:
            self.check_congruent(other)
        except StructureError:
            return False
        return all(np.array_equal(self[k], other[k]) for k in self)


class GradSet(ParamSet):
    """Gradient of a scalar with respect to a ParamSet, same structure."""
