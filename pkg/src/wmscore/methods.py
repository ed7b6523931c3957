"""Attribution methods as weighted sums of Möbius scores.

Every method here scores a subset ``S`` as ``sum over T of w(S, T) * m(T)``
where ``m`` is the Möbius score (Harsanyi dividend) of the isolation table.
Kernels are evaluated lazily; registered kernels also declare which ``T``
can carry weight for a given ``|S|`` and how the weight depends on
``(|S|, |T|)``, which lets a whole cardinality class be scored with one
subset- or superset-sum pass instead of a per-target loop.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Iterable
from dataclasses import dataclass, field
from math import comb

import numpy as np

from .errors import DimensionError, TargetOutsideFamily, ValidationError
from .formats import canonical_order
from .lattice import (
    ATOL,
    NAIVE_MAX_D,
    RTOL,
    FeatureSet,
    SetFunction,
    indices,
    iterate_subsets,
    mobius_transform,
    popcount,
    popcounts,
    subset_array,
    superset_array,
    superset_sum,
    to_mask,
    zeta_transform,
)

EQUAL, SUPERSET, SUBSET = "equal", "superset", "subset"


@dataclass(frozen=True)
class WeightKernel:
    """A weight function ``w(S, T)`` with its target family.

    ``pattern(|S|)`` names the relation ``T`` must have with ``S`` to carry
    weight (``"equal"``, ``"superset"`` for S ⊆ T, ``"subset"`` for T ⊆ S) and
    ``size_weight(|S|, |T|)`` the weight once it holds. Kernels without a
    pattern fall back to summing ``weight`` over every T.
    """

    method: str
    k: int | None
    in_family: Callable[[int], bool]
    faithful: bool
    pattern: Callable[[int], str | None] | None = None
    size_weight: Callable[[int, int], float] | None = None
    custom_weight: Callable[[int, int], float] | None = None

    def weight(self, S: int, T: int) -> float:
        S, T = int(S), int(T)
        if self.custom_weight is not None:
            return float(self.custom_weight(S, T))
        s = popcount(S)
        if not self.in_family(s):
            return 0.0
        rel = self.pattern(s)
        if rel == EQUAL and S == T or rel == SUPERSET and S & ~T == 0 or rel == SUBSET and T & ~S == 0:
            return float(self.size_weight(s, popcount(T)))
        return 0.0

    def family(self, S: int) -> bool:
        return self.in_family(popcount(int(S)))

    def default_targets(self, d: int) -> list[int]:
        sizes = popcounts(d)
        ok = np.array([self.in_family(s) and s > 0 for s in range(d + 1)])
        return canonical_order(np.flatnonzero(ok[sizes]))

    @property
    def label(self) -> str:
        return self.method if self.k is None else f"{self.method}:{self.k}"


def custom_kernel(method: str, weight: Callable[[int, int], float], faithful: bool = False, k=None) -> WeightKernel:
    """Arbitrary ``w(S, T)`` on masks; scored by the full double sum over nonempty targets."""
    return WeightKernel(method, k, in_family=lambda s: s > 0, faithful=faithful, custom_weight=weight)


def mobius_kernel() -> WeightKernel:
    return WeightKernel("mobius", None, lambda s: True, True, lambda s: EQUAL, lambda s, t: 1.0)


def shapley_kernel() -> WeightKernel:
    return WeightKernel("shapley", None, lambda s: s == 1, True, lambda s: SUPERSET, lambda s, t: 1.0 / t)


def _check_k(k: int) -> int:
    if isinstance(k, bool) or not isinstance(k, int) or k < 1:
        raise ValidationError(f"order k must be a positive int, got {k!r}")
    return k


def sii_kernel(k: int = 2) -> WeightKernel:
    """Shapley interaction index: S shares each dividend with the other |T|-|S| players."""
    k = _check_k(k)
    return WeightKernel(
        "sii", k, lambda s: 1 <= s <= k, True, lambda s: SUPERSET, lambda s, t: 1.0 / (t - s + 1)
    )


def sti_kernel(k: int = 2) -> WeightKernel:
    """Shapley-Taylor index: plain dividends below order k, dividends split over C(|T|, k) at order k."""
    k = _check_k(k)
    return WeightKernel(
        "sti",
        k,
        lambda s: 1 <= s <= k,
        True,
        lambda s: SUPERSET if s == k else EQUAL,
        lambda s, t: 1.0 / comb(t, k) if s == k else 1.0,
    )


def pie_kernel() -> WeightKernel:
    return WeightKernel("pie", None, lambda s: s == 1, True, lambda s: EQUAL, lambda s, t: 1.0)


def tie_kernel() -> WeightKernel:
    return WeightKernel("tie", None, lambda s: s == 1, True, lambda s: SUPERSET, lambda s, t: 1.0)


def mi_kernel(k: int = 2) -> WeightKernel:
    k = _check_k(k)
    return WeightKernel("mi", k, lambda s: s == k, True, lambda s: EQUAL, lambda s, t: 1.0)


def arch_attribute_kernel(k: int | None = None) -> WeightKernel:
    """ArchAttribute: unit weight on every T ⊆ S, so the score is the isolation value.

    With ``k=None`` the order follows each query, i.e. every subset is a target.
    Weight at T = ∅ is 1 as tabulated; it never matters since m(∅) = 0.
    """
    if k is not None:
        k = _check_k(k)
    fam = (lambda s: True) if k is None else (lambda s: s == k)
    return WeightKernel("arch_attribute", k, fam, True, lambda s: SUBSET, lambda s, t: 1.0)


KERNELS: dict[str, Callable[..., WeightKernel]] = {
    "mobius": mobius_kernel,
    "shapley": shapley_kernel,
    "sii": sii_kernel,
    "sti": sti_kernel,
    "pie": pie_kernel,
    "tie": tie_kernel,
    "mi": mi_kernel,
    "arch_attribute": arch_attribute_kernel,
}
ORDERED = {"sii", "sti", "mi", "arch_attribute"}


def get_kernel(name: str, k: int | None = None) -> WeightKernel:
    name = name.strip().lower().replace("-", "_")
    if name not in KERNELS:
        raise ValidationError(f"unknown method {name!r}; registered: {', '.join(KERNELS)}")
    if name in ORDERED:
        return KERNELS[name]() if k is None else KERNELS[name](k)
    if k is not None and not (name in ("shapley", "pie", "tie") and k == 1):
        raise ValidationError(f"method {name!r} takes no order k")
    return KERNELS[name]()


@dataclass
class AttributionResult:
    method: str
    k: int | None
    d: int
    scores: dict[int, float]
    meta: dict = field(default_factory=dict)

    def __getitem__(self, S) -> float:
        return self.scores[to_mask(S, self.d)]

    def __contains__(self, S) -> bool:
        return to_mask(S, self.d) in self.scores

    def __len__(self) -> int:
        return len(self.scores)

    def items(self):
        return self.scores.items()

    def to_doc(self) -> dict:
        return {
            "method": self.method,
            "k": self.k,
            "d": self.d,
            "scores": [{"set": indices(m), "score": v} for m, v in self.scores.items()],
            "meta": self.meta,
        }


# ---------------------------------------------------------------------------
# Möbius score
# ---------------------------------------------------------------------------


def _check_isolation(isolation: SetFunction):
    if abs(isolation.values[0]) > ATOL:
        raise ValidationError(f"isolation score must vanish on the empty set, got {isolation.values[0]!r}")


def mobius_score(isolation: SetFunction) -> SetFunction:
    """Möbius score (Harsanyi dividends) of an isolation table."""
    _check_isolation(isolation)
    out = mobius_transform(isolation).values.copy()
    out[0] = 0.0
    return SetFunction(isolation.d, out)


def mobius_score_recursive(isolation: SetFunction) -> SetFunction:
    """Dividends by the defining recursion ``m(S) = A(S) - sum of m(T), T ⊂ S``.

    Independent of the butterfly transform; O(3^d) and meant as a test oracle.
    """
    _check_isolation(isolation)
    d = isolation.d
    if d > NAIVE_MAX_D:
        raise DimensionError(f"recursive Möbius score limited to d <= {NAIVE_MAX_D}")
    iso = isolation.values.tolist()
    memo: list[float] = [0.0] * (1 << d)
    for S in range(1 << d):
        if S == 0:
            memo[0] = iso[0]
            continue
        below = math.fsum(memo[T] for T in iterate_subsets(S) if T != S)
        memo[S] = iso[S] - below
    return SetFunction(d, memo)


# ---------------------------------------------------------------------------
# Weighted score
# ---------------------------------------------------------------------------


def _resolve_targets(kernel: WeightKernel, d: int, targets) -> list[int]:
    if targets is None:
        return kernel.default_targets(d)
    masks = []
    for S in targets:
        m = to_mask(S, d)
        if not kernel.family(m):
            raise TargetOutsideFamily(f"{kernel.label} does not score {FeatureSet(m, d)}")
        masks.append(m)
    return canonical_order(dict.fromkeys(masks))


def _score_by_class(mobius: SetFunction, kernel: WeightKernel, masks: list[int]) -> dict[int, float]:
    d = mobius.d
    sizes = popcounts(d)
    m = mobius.values
    out: dict[int, float] = {}
    by_size: dict[int, list[int]] = {}
    for S in masks:
        by_size.setdefault(popcount(S), []).append(S)
    for s, group in by_size.items():
        rel = kernel.pattern(s)
        if rel == EQUAL:
            w = kernel.size_weight(s, s)
            for S in group:
                out[S] = float(w * m[S])
            continue
        ts = range(s, d + 1) if rel == SUPERSET else range(0, s + 1)
        wt = np.zeros(d + 1)
        for t in ts:
            wt[t] = kernel.size_weight(s, t)
        g = SetFunction(d, m * wt[sizes])
        summed = superset_sum(g) if rel == SUPERSET else zeta_transform(g)
        for S in group:
            out[S] = float(summed.values[S])
    return out


def _score_generic(mobius: SetFunction, kernel: WeightKernel, masks: list[int]) -> dict[int, float]:
    d = mobius.d
    m = mobius.values
    out = {}
    for S in masks:
        rel = kernel.pattern(popcount(S)) if kernel.pattern and kernel.custom_weight is None else None
        if rel == EQUAL:
            Ts = np.array([S])
        elif rel == SUPERSET:
            Ts = superset_array(S, d)
        elif rel == SUBSET:
            Ts = subset_array(S)
        else:
            Ts = np.arange(1 << d)
        w = np.array([kernel.weight(S, T) for T in Ts.tolist()])
        out[S] = float(w @ m[Ts])
    return out


def weighted_score(
    mobius: SetFunction,
    kernel: WeightKernel,
    targets: Iterable | None = None,
    meta: dict | None = None,
) -> AttributionResult:
    """Score each target S as ``sum over T of w(S, T) * mobius(T)``.

    Targets default to the kernel's family (nonempty subsets only) and must
    lie inside it. Results are ordered by cardinality, then bitmask.
    """
    d = mobius.d
    masks = _resolve_targets(kernel, d, targets)
    if kernel.custom_weight is None and kernel.pattern is not None and kernel.size_weight is not None:
        scores = _score_by_class(mobius, kernel, masks)
    else:
        scores = _score_generic(mobius, kernel, masks)
    ordered = {S: scores[S] for S in masks}
    return AttributionResult(kernel.method, kernel.k, d, ordered, dict(meta or {}))


def weighted_score_naive(mobius: SetFunction, kernel: WeightKernel, targets: Iterable | None = None) -> AttributionResult:
    """Literal double sum over all T for every target; a test oracle."""
    d = mobius.d
    masks = _resolve_targets(kernel, d, targets)
    m = mobius.values.tolist()
    scores = {S: math.fsum(kernel.weight(S, T) * m[T] for T in range(1 << d)) for S in masks}
    return AttributionResult(kernel.method, kernel.k, d, scores)


# ---------------------------------------------------------------------------
# ArchDetect
# ---------------------------------------------------------------------------


def _check_pair(d: int, i: int, j: int, h_i: float, h_j: float):
    if i == j:
        raise ValidationError("ArchDetect needs two distinct features")
    if not (0 <= i < d and 0 <= j < d):
        raise ValidationError(f"features ({i}, {j}) outside [0, {d})")
    if not (h_i > 0 and h_j > 0):
        raise ValidationError(f"step sizes must be positive, got h_i={h_i}, h_j={h_j}")


def arch_detect(mobius: SetFunction, i: int, j: int, h_i: float = 1.0, h_j: float = 1.0) -> float:
    """Pairwise interaction strength from Möbius scores.

    ``(sum of m(T) over T ⊇ {i, j})**2 + m({i, j})**2``, scaled by
    ``1 / (2 h_i^2 h_j^2)``. The step sizes are raw-input distances to the
    baseline and cannot be recovered from a subset table; they default to 1
    (binary presence indicators).
    """
    d = mobius.d
    _check_pair(d, i, j, h_i, h_j)
    pair = (1 << i) | (1 << j)
    through = math.fsum(mobius.values[superset_array(pair, d)].tolist())
    return (through**2 + mobius.values[pair] ** 2) / (2.0 * h_i**2 * h_j**2)


def arch_detect_four_point(isolation: SetFunction, i: int, j: int, h_i: float = 1.0, h_j: float = 1.0) -> float:
    """ArchDetect from its mixed finite differences at the input and at the baseline."""
    d = isolation.d
    _check_pair(d, i, j, h_i, h_j)
    a = isolation.values
    full = (1 << d) - 1
    bi, bj = 1 << i, 1 << j
    at_input = a[full] - a[full & ~bi] - a[full & ~bj] + a[full & ~bi & ~bj]
    at_baseline = a[bi | bj] - a[bj] - a[bi] + a[0]
    hh = h_i * h_j
    return 0.5 * ((at_input / hh) ** 2 + (at_baseline / hh) ** 2)


def arch_detect_all(
    mobius: SetFunction,
    pairs: Iterable[tuple[int, int]] | None = None,
    h: Iterable[float] | None = None,
) -> AttributionResult:
    d = mobius.d
    h = [1.0] * d if h is None else [float(v) for v in h]
    if len(h) != d:
        raise DimensionError(f"need {d} step sizes, got {len(h)}")
    if pairs is None:
        pairs = [(i, j) for i in range(d) for j in range(i + 1, d)]
    through = superset_sum(mobius).values
    scores = {}
    for i, j in pairs:
        i, j = int(i), int(j)
        _check_pair(d, i, j, h[i], h[j])
        pair = (1 << i) | (1 << j)
        scores[pair] = float((through[pair] ** 2 + mobius.values[pair] ** 2) / (2.0 * h[i] ** 2 * h[j] ** 2))
    ordered = {m: scores[m] for m in canonical_order(scores)}
    return AttributionResult("arch_detect", 2, d, ordered, {"h": h})


# ---------------------------------------------------------------------------
# Checks
# ---------------------------------------------------------------------------


def check_faithful(kernel: WeightKernel, d: int) -> tuple[bool, tuple[int, int] | None]:
    """Scan every disjoint pair of nonempty (S, T) for nonzero weight.

    The empty T is skipped (its dividend is always zero), and so is the empty
    S, which is disjoint from everything. Returns ``(ok, (S, T) or None)``.
    """
    if d > 10:
        raise DimensionError("faithfulness scan limited to d <= 10")
    full = (1 << d) - 1
    for S in range(1, 1 << d):
        for T in iterate_subsets(full & ~S):
            if T and kernel.weight(S, T) != 0.0:
                return False, (S, T)
    return True, None


def efficiency_check(mobius: SetFunction, isolation: SetFunction, rtol: float = RTOL, atol: float = ATOL) -> bool:
    """Do the dividends of all subsets add up to the total effect?"""
    if mobius.d != isolation.d:
        raise DimensionError(f"width mismatch: {mobius.d} vs {isolation.d}")
    total = math.fsum(mobius.values.tolist())
    return math.isclose(total, isolation.values[-1], rel_tol=rtol, abs_tol=atol)
