"""Named real-valued parameter collections and their canonical flat view."""
from __future__ import annotations

import hashlib
import json
from typing import Iterable, Mapping

import numpy as np


class SchemaMismatch(ValueError):
    pass


def schema_of(tensors: Mapping[str, np.ndarray]) -> tuple:
    """Sorted ``((name, shape), ...)`` tuple; the canonical ordering."""
    return tuple((name, tuple(int(d) for d in tensors[name].shape)) for name in sorted(tensors))


def schema_hash(schema: tuple) -> str:
    blob = json.dumps([[n, list(s)] for n, s in schema], separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


class WeightSet:
    """Ordered map ``name -> float64 array`` with per-tensor arithmetic.

    Tensors are kept in lexicographic name order; two sets combine only when
    their schemas (names and shapes) match.
    """

    __slots__ = ("_t", "schema")
    __array_ufunc__ = None  # make numpy scalars defer to __rmul__

    def __init__(self, tensors: Mapping[str, np.ndarray], check_finite: bool = True):
        t = {}
        for name in sorted(tensors):
            a = np.array(tensors[name], dtype=np.float64)
            if check_finite and not np.all(np.isfinite(a)):
                raise ValueError(f"tensor {name!r} has non-finite values")
            a.setflags(write=False)
            t[name] = a
        self._t = t
        self.schema = schema_of(t)

    # mapping protocol
    def __getitem__(self, name):
        return self._t[name]

    def __iter__(self):
        return iter(self._t)

    def __len__(self):
        return len(self._t)

    def keys(self):
        return self._t.keys()

    def items(self):
        return self._t.items()

    @property
    def size(self) -> int:
        return int(sum(a.size for a in self._t.values()))

    @property
    def schema_hash(self) -> str:
        return schema_hash(self.schema)

    def _check(self, other: "WeightSet"):
        if not isinstance(other, WeightSet):
            return NotImplemented
        if other.schema != self.schema:
            raise SchemaMismatch("weight sets have different schemas")

    def __add__(self, other):
        self._check(other)
        return WeightSet({k: self._t[k] + other._t[k] for k in self._t})

    def __sub__(self, other):
        self._check(other)
        return WeightSet({k: self._t[k] - other._t[k] for k in self._t})

    def __mul__(self, c):
        c = float(c)
        return WeightSet({k: c * v for k, v in self._t.items()})

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __eq__(self, other):
        if not isinstance(other, WeightSet) or other.schema != self.schema:
            return False
        return all(np.array_equal(self._t[k], other._t[k]) for k in self._t)

    def __repr__(self):
        return f"WeightSet({len(self)} tensors, {self.size} values)"

    def map(self, fn) -> "WeightSet":
        return WeightSet({k: fn(v) for k, v in self._t.items()})

    @classmethod
    def zeros_like(cls, other: "WeightSet") -> "WeightSet":
        return cls({k: np.zeros_like(v) for k, v in other.items()})


def flatten(ws: WeightSet) -> tuple[np.ndarray, tuple]:
    if len(ws) == 0:
        return np.zeros(0), ws.schema
    return np.concatenate([ws[k].ravel() for k in ws]), ws.schema


def unflatten(vector: np.ndarray, schema: tuple) -> WeightSet:
    vector = np.asarray(vector, dtype=np.float64)
    n = sum(int(np.prod(shape)) for _, shape in schema)
    if vector.ndim != 1 or vector.size != n:
        raise SchemaMismatch(f"vector of length {vector.size} does not fit schema of {n} values")
    out, i = {}, 0
    for name, shape in schema:
        m = int(np.prod(shape))
        out[name] = vector[i:i + m].reshape(shape)
        i += m
    return WeightSet(out)


def linear_combination(terms: Iterable[tuple[float, WeightSet]]) -> WeightSet:
    """``sum_i c_i w_i`` computed on the flat view."""
    terms = list(terms)
    if not terms:
        raise ValueError("empty combination")
    schema = terms[0][1].schema
    acc = np.zeros(sum(int(np.prod(s)) for _, s in schema))
    for c, w in terms:
        if w.schema != schema:
            raise SchemaMismatch("weight sets have different schemas")
        acc = acc + float(c) * flatten(w)[0]
    return unflatten(acc, schema)
