"""Subsets of a feature set as bitmasks, dense set functions, and the
Zeta/Möbius transforms on the Boolean lattice.

Bit ``i`` of a mask is set iff feature ``i`` is present (kept). A set
function of ``d`` features stores ``2**d`` reals where index ``b`` holds the
value at the subset with mask ``b``.
"""

from __future__ import annotations

from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass
from functools import lru_cache
from typing import Union

import numpy as np

from .errors import DimensionError, DuplicateSubset, MissingSubset, NonFiniteValue, ValidationError

MAX_D = 26
SOFT_MAX_D = 20
NAIVE_MAX_D = 14

RTOL = 1e-9
ATOL = 1e-12


@dataclass(frozen=True, order=True)
class FeatureSet:
    """A subset of ``{0, ..., width-1}`` stored as a bitmask."""

    bits: int
    width: int

    def __post_init__(self):
        check_d(self.width)
        if self.bits < 0 or self.bits >> self.width:
            raise ValidationError(f"mask {self.bits:#x} has bits outside width {self.width}")

    @classmethod
    def from_indices(cls, indices: Iterable[int], width: int) -> "FeatureSet":
        bits = 0
        for i in indices:
            i = int(i)
            if not 0 <= i < width:
                raise ValidationError(f"feature index {i} outside [0, {width})")
            if bits >> i & 1:
                raise DuplicateSubset(f"feature {i} listed twice")
            bits |= 1 << i
        return cls(bits, width)

    @classmethod
    def full(cls, width: int) -> "FeatureSet":
        return cls((1 << width) - 1, width)

    @classmethod
    def empty(cls, width: int) -> "FeatureSet":
        return cls(0, width)

    def __index__(self) -> int:
        return self.bits

    def __contains__(self, i: int) -> bool:
        return bool(self.bits >> i & 1)

    def __len__(self) -> int:
        return self.cardinality

    def __iter__(self) -> Iterator[int]:
        return iter(indices(self.bits))

    @property
    def cardinality(self) -> int:
        return self.bits.bit_count()

    def indices(self) -> list[int]:
        return indices(self.bits)

    def complement(self) -> "FeatureSet":
        return FeatureSet(((1 << self.width) - 1) & ~self.bits, self.width)

    def __or__(self, other: "FeatureSet") -> "FeatureSet":
        return FeatureSet(self.bits | int(other), self.width)

    def __and__(self, other: "FeatureSet") -> "FeatureSet":
        return FeatureSet(self.bits & int(other), self.width)

    def __str__(self) -> str:
        return "{" + ",".join(map(str, self.indices())) + "}"


SubsetKey = Union[int, FeatureSet, Iterable[int]]


def check_d(d: int, allow_large: bool = True) -> int:
    """Validate a feature count against the hard cap (and the soft cap unless overridden)."""
    if isinstance(d, bool) or not isinstance(d, (int, np.integer)):
        raise DimensionError(f"feature count must be an int, got {d!r}")
    d = int(d)
    limit = MAX_D if allow_large else SOFT_MAX_D
    if not 0 <= d <= limit:
        hint = "" if allow_large or d > MAX_D else " (pass allow_large=True to go up to 26)"
        raise DimensionError(f"feature count {d} outside [0, {limit}]{hint}")
    return d


def popcount(mask: int) -> int:
    return int(mask).bit_count()


def indices(mask: int) -> list[int]:
    """Ascending feature indices present in ``mask``."""
    out = []
    i = 0
    while mask:
        if mask & 1:
            out.append(i)
        mask >>= 1
        i += 1
    return out


def to_mask(key: SubsetKey, d: int) -> int:
    """Normalize an int mask, FeatureSet, or iterable of indices to an int mask of width d."""
    if isinstance(key, FeatureSet):
        if key.width != d:
            raise DimensionError(f"FeatureSet width {key.width} != {d}")
        return key.bits
    if isinstance(key, (int, np.integer)) and not isinstance(key, bool):
        key = int(key)
        if key < 0 or key >> d:
            raise ValidationError(f"mask {key:#x} has bits outside width {d}")
        return key
    return FeatureSet.from_indices(key, d).bits


@lru_cache(maxsize=None)
def _popcounts(d: int) -> np.ndarray:
    counts = np.zeros(1 << d, dtype=np.int64)
    for i in range(d):
        counts.reshape(-1, 2, 1 << i)[:, 1, :] += 1
    counts.setflags(write=False)
    return counts


def popcounts(d: int) -> np.ndarray:
    """Read-only array of |S| for every mask S of width d."""
    return _popcounts(check_d(d))


class SetFunction:
    """A dense real-valued function on all ``2**d`` subsets.

    Instances are immutable; arithmetic is pointwise, so set functions of the
    same width form a vector space.
    """

    __slots__ = ("_d", "_values")

    def __init__(self, d: int, values):
        d = check_d(d)
        arr = np.array(values, dtype=np.float64)
        if arr.shape != (1 << d,):
            raise DimensionError(f"expected {1 << d} values for d={d}, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            bad = int(np.flatnonzero(~np.isfinite(arr))[0])
            raise NonFiniteValue(f"non-finite value at subset {FeatureSet(bad, d)}")
        arr.setflags(write=False)
        self._d = d
        self._values = arr

    @classmethod
    def from_values(cls, values) -> "SetFunction":
        """Build from a dense sequence, inferring d from its length."""
        n = len(values)
        d = n.bit_length() - 1
        if n < 1 or 1 << d != n:
            raise DimensionError(f"length {n} is not a power of two")
        return cls(d, values)

    @classmethod
    def zeros(cls, d: int) -> "SetFunction":
        return cls(d, np.zeros(1 << check_d(d)))

    @property
    def d(self) -> int:
        return self._d

    @property
    def values(self) -> np.ndarray:
        return self._values

    def __len__(self) -> int:
        return len(self._values)

    def __getitem__(self, key: SubsetKey) -> float:
        return float(self._values[to_mask(key, self._d)])

    def __iter__(self) -> Iterator[float]:
        return iter(self._values.tolist())

    def items(self) -> Iterator[tuple[int, float]]:
        return enumerate(self._values.tolist())

    def _coerce(self, other) -> np.ndarray:
        if not isinstance(other, SetFunction):
            return NotImplemented
        if other.d != self._d:
            raise DimensionError(f"width mismatch: {self._d} vs {other.d}")
        return other.values

    def __add__(self, other):
        v = self._coerce(other)
        if v is NotImplemented:
            return v
        return SetFunction(self._d, self._values + v)

    def __sub__(self, other):
        v = self._coerce(other)
        if v is NotImplemented:
            return v
        return SetFunction(self._d, self._values - v)

    def __mul__(self, c):
        if not isinstance(c, (int, float, np.floating, np.integer)):
            return NotImplemented
        return SetFunction(self._d, self._values * float(c))

    __rmul__ = __mul__

    def __neg__(self):
        return SetFunction(self._d, -self._values)

    def __eq__(self, other):
        if not isinstance(other, SetFunction):
            return NotImplemented
        return self._d == other.d and np.array_equal(self._values, other.values)

    __hash__ = None

    def allclose(self, other: "SetFunction", rtol: float = RTOL, atol: float = ATOL) -> bool:
        return self._d == other.d and bool(np.allclose(self._values, other.values, rtol=rtol, atol=atol))

    def __repr__(self) -> str:
        if self._d <= 4:
            return f"SetFunction(d={self._d}, values={self._values.tolist()})"
        return f"SetFunction(d={self._d}, ...)"


def make_set_function(
    d: int,
    entries: Mapping[SubsetKey, float] | Iterable[tuple[SubsetKey, float]],
    default: float | None = None,
) -> SetFunction:
    """Build a dense SetFunction from subset-keyed entries.

    Keys may be int masks, FeatureSets or iterables of feature indices; two
    keys denoting the same subset raise DuplicateSubset. Subsets not listed
    take ``default``, or raise MissingSubset when no default is given.
    """
    d = check_d(d)
    pairs = entries.items() if isinstance(entries, Mapping) else entries
    values = np.full(1 << d, np.nan if default is None else float(default))
    seen = np.zeros(1 << d, dtype=bool)
    for key, value in pairs:
        m = to_mask(key, d)
        if seen[m]:
            raise DuplicateSubset(f"subset {FeatureSet(m, d)} given twice")
        seen[m] = True
        value = float(value)
        if not np.isfinite(value):
            raise NonFiniteValue(f"non-finite value {value} at subset {FeatureSet(m, d)}")
        values[m] = value
    if default is None and not seen.all():
        missing = int(np.flatnonzero(~seen)[0])
        raise MissingSubset(
            f"{int((~seen).sum())} subset(s) missing, first is {FeatureSet(missing, d)}; supply a default"
        )
    return SetFunction(d, values)


def _as_set_function(F) -> SetFunction:
    if isinstance(F, SetFunction):
        return F
    return SetFunction.from_values(F)


def _butterfly(values: np.ndarray, d: int, *, negate: bool, upward: bool) -> np.ndarray:
    # One pass per feature: combine each mask with its partner differing in bit i.
    a = np.array(values, dtype=np.float64, copy=True)
    for i in range(d):
        v = a.reshape(-1, 2, 1 << i)
        lo, hi = v[:, 0, :], v[:, 1, :]
        if upward:
            if negate:
                hi -= lo
            else:
                hi += lo
        else:
            if negate:
                lo -= hi
            else:
                lo += hi
    return a


def zeta_transform(F: SetFunction) -> SetFunction:
    """Subset sums: ``out(S) = sum of F(T) over T ⊆ S``, in O(d 2^d)."""
    F = _as_set_function(F)
    return SetFunction(F.d, _butterfly(F.values, F.d, negate=False, upward=True))


def mobius_transform(F: SetFunction) -> SetFunction:
    """Signed subset sums: ``out(S) = sum of (-1)^{|S|-|T|} F(T) over T ⊆ S``."""
    F = _as_set_function(F)
    return SetFunction(F.d, _butterfly(F.values, F.d, negate=True, upward=True))


def superset_sum(F: SetFunction) -> SetFunction:
    """``out(S) = sum of F(T) over T ⊇ S``."""
    F = _as_set_function(F)
    return SetFunction(F.d, _butterfly(F.values, F.d, negate=False, upward=False))


def _naive(F: SetFunction, signed: bool) -> SetFunction:
    F = _as_set_function(F)
    d = F.d
    if d > NAIVE_MAX_D:
        raise DimensionError(f"naive transform limited to d <= {NAIVE_MAX_D}, got {d}")
    n = 1 << d
    masks = np.arange(n)
    sizes = popcounts(d)
    out = np.empty(n)
    rows = max(1, (1 << 22) // n)
    for start in range(0, n, rows):
        S = masks[start : start + rows, None]
        T = masks[None, :]
        w = ((T & ~S) == 0).astype(np.float64)
        if signed:
            w *= np.where((sizes[S] - sizes[T]) % 2 == 0, 1.0, -1.0)
        out[start : start + rows] = w @ F.values
    return SetFunction(d, out)


def zeta_transform_naive(F: SetFunction) -> SetFunction:
    """Literal double sum over all (S, T) pairs; a test oracle, O(4^d)."""
    return _naive(F, signed=False)


def mobius_transform_naive(F: SetFunction) -> SetFunction:
    """Literal signed double sum over all (S, T) pairs; a test oracle, O(4^d)."""
    return _naive(F, signed=True)


def iterate_subsets(S: SubsetKey, d: int | None = None) -> Iterator[int]:
    """Yield every submask of ``S`` once, in ascending order."""
    mask = int(S) if d is None else to_mask(S, d)
    t = 0
    while True:
        yield t
        if t == mask:
            return
        t = (t - mask) & mask


def iterate_supersets(S: SubsetKey, d: int) -> Iterator[int]:
    """Yield every superset of ``S`` within width d once, in ascending order."""
    mask = to_mask(S, d)
    rest = ((1 << d) - 1) & ~mask
    for extra in iterate_subsets(rest):
        yield mask | extra


def subset_array(S: int) -> np.ndarray:
    """All submasks of ``S`` as an ascending int64 array."""
    out = np.zeros(1, dtype=np.int64)
    for i in indices(S):
        out = np.concatenate([out, out | (1 << i)])
    out.sort()
    return out


def superset_array(S: int, d: int) -> np.ndarray:
    return subset_array(((1 << d) - 1) & ~S) | S
