"""Side-by-side method comparison and normalized effect aggregation."""

from __future__ import annotations

import math
from collections.abc import Hashable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .formats import canonical_order, set_label
from .lattice import ATOL, RTOL, SetFunction, indices, popcount, to_mask
from .methods import (
    AttributionResult,
    WeightKernel,
    arch_detect_all,
    mobius_score,
    weighted_score,
)


@dataclass(frozen=True)
class ArchDetectColumn:
    """Marker for an ArchDetect column; scored on the pair rows only."""

    h: tuple[float, ...] | None = None
    method: str = "arch_detect"
    k: int = 2


@dataclass
class ComparisonTable:
    d: int
    rows: list[int]
    columns: list[str]
    cells: dict[str, dict[int, float | None]]
    results: dict[str, AttributionResult]
    footer: dict = field(default_factory=dict)

    def cell(self, row, column: str, fill: float | None = 0.0) -> float | None:
        """Score at (row, column); rows a method does not score get ``fill``.

        Every registered kernel has zero weight outside its family, so the
        default fill of 0 is the value the weighted sum would produce.
        """
        value = self.cells[column].get(to_mask(row, self.d))
        return fill if value is None else value

    def to_doc(self, fill: float | None = 0.0) -> dict:
        return {
            "d": self.d,
            "columns": [
                {"id": c, "method": self.results[c].method, "k": self.results[c].k} for c in self.columns
            ],
            "rows": [
                {"set": indices(r), "scores": {c: self.cell(r, c, fill) for c in self.columns}}
                for r in self.rows
            ],
            "footer": self.footer,
        }

    def to_csv(self, fill: float | None = 0.0, labels: Sequence[str] | None = None) -> str:
        lines = [";".join(["set"] + self.columns)]
        for r in self.rows:
            name = "+".join(labels[i] for i in indices(r)) if labels else set_label(r)
            vals = ["" if (v := self.cell(r, c, fill)) is None else repr(float(v)) for c in self.columns]
            lines.append(";".join([name] + vals))
        return "\n".join(lines) + "\n"


def _labels(entries) -> list[str]:
    methods = [e.method for e in entries]
    out = []
    for e in entries:
        dup = methods.count(e.method) > 1
        out.append(f"{e.method}:{e.k}" if dup and e.k is not None else e.method)
    if len(set(out)) != len(out):
        raise ValidationError(f"duplicate comparison columns: {out}")
    return out


def compare_methods(
    isolation: SetFunction,
    methods: Iterable,
    rows: Iterable | None = None,
) -> ComparisonTable:
    """Score several methods off one shared Möbius table.

    ``methods`` holds WeightKernels, ``(kernel, targets)`` pairs, or
    :class:`ArchDetectColumn` markers. Rows default to every nonempty subset.
    """
    d = isolation.d
    mobius = mobius_score(isolation)
    if rows is None:
        row_masks = canonical_order(range(1, 1 << d))
    else:
        row_masks = canonical_order(dict.fromkeys(to_mask(r, d) for r in rows))
    specs = []
    for entry in methods:
        if isinstance(entry, tuple):
            kernel, targets = entry
        else:
            kernel, targets = entry, None
        specs.append((kernel, targets))
    if not specs:
        raise ValidationError("no methods to compare")
    labels = _labels([k for k, _ in specs])
    cells: dict[str, dict[int, float | None]] = {}
    results: dict[str, AttributionResult] = {}
    for label, (kernel, targets) in zip(labels, specs):
        if isinstance(kernel, ArchDetectColumn):
            pairs = [tuple(indices(r)) for r in row_masks if popcount(r) == 2] if targets is None else targets
            h = None if kernel.h is None else list(kernel.h)
            result = arch_detect_all(mobius, pairs, h)
        elif isinstance(kernel, WeightKernel):
            if targets is None:
                targets = [r for r in row_masks if kernel.family(r)]
            result = weighted_score(mobius, kernel, targets)
        else:
            raise ValidationError(f"cannot compare {kernel!r}")
        results[label] = result
        cells[label] = {r: result.scores.get(r) for r in row_masks}
    total = float(isolation.values[-1])
    footer = {
        "total_effect": total,
        "mobius_efficiency_residual": math.fsum(mobius.values.tolist()) - total,
    }
    for label, result in results.items():
        if result.method == "shapley" and len(result.scores) == d:
            footer[f"{label}_efficiency_residual"] = math.fsum(result.scores.values()) - total
    return ComparisonTable(d, row_masks, labels, cells, results, footer)


# ---------------------------------------------------------------------------
# Normalized effect
# ---------------------------------------------------------------------------


@dataclass
class EffectSummary:
    """Per-class share of surviving attribution magnitude, averaged over instances.

    ``mean[c][n]`` and ``ci[c][n]`` (95% normal half-width) refer to
    ``thresholds[n]``; ``n_defined[n]`` instances kept at least one score
    there and the other ``n_undefined[n]`` are excluded from the averages.
    """

    thresholds: list[float]
    classes: list[Hashable]
    mean: dict[Hashable, list[float]]
    ci: dict[Hashable, list[float]]
    n_defined: list[int]
    n_undefined: list[int]
    n_instances: int
    per_instance: list[dict[Hashable, list[float | None]]] = field(default_factory=list, repr=False)

    def to_doc(self) -> dict:
        return {
            "thresholds": self.thresholds,
            "classes": [
                {"class": c, "mean": [_nan_none(v) for v in self.mean[c]], "ci95": [_nan_none(v) for v in self.ci[c]]}
                for c in self.classes
            ],
            "n_defined": self.n_defined,
            "n_undefined": self.n_undefined,
            "n_instances": self.n_instances,
        }


def _nan_none(v: float) -> float | None:
    return None if math.isnan(v) else v


def classes_by_cardinality(result: AttributionResult | Mapping[int, float]) -> dict[int, list[float]]:
    """Split one result's scores into classes keyed by subset size."""
    scores = result.scores if isinstance(result, AttributionResult) else result
    out: dict[int, list[float]] = {}
    for m, v in scores.items():
        out.setdefault(popcount(int(m)), []).append(float(v))
    return dict(sorted(out.items()))


def _magnitudes(scores) -> np.ndarray:
    if isinstance(scores, AttributionResult):
        scores = list(scores.scores.values())
    return np.abs(np.asarray(list(scores), dtype=np.float64))


def normalized_effect(
    instances: Sequence[Mapping[Hashable, AttributionResult | Iterable[float]]],
    thresholds: Sequence[float] = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0),
) -> EffectSummary:
    """Share of total magnitude carried by each class after thresholding.

    Per instance and threshold ``t``: keep scores with ``|score| > t * max``,
    the max taken over all classes of that instance; each class's share is
    its kept magnitude over the kept magnitude of all classes. Instances
    with nothing kept are undefined at that threshold and excluded.
    """
    thresholds = [float(t) for t in thresholds]
    if not thresholds:
        raise ValidationError("need at least one threshold")
    if any(not 0.0 <= t <= 1.0 for t in thresholds) or thresholds != sorted(thresholds):
        raise ValidationError("thresholds must be ascending values in [0, 1]")
    if not instances:
        raise ValidationError("no instances")
    classes: list[Hashable] = []
    for inst in instances:
        if not inst:
            raise ValidationError("instance with an empty class partition")
        for c in inst:
            if c not in classes:
                classes.append(c)
    n_t = len(thresholds)
    props: dict[Hashable, list[list[float]]] = {c: [[] for _ in range(n_t)] for c in classes}
    n_undefined = [0] * n_t
    per_instance = []
    for inst in instances:
        mags = {c: _magnitudes(inst.get(c, ())) for c in classes}
        peak = max((float(m.max()) for m in mags.values() if m.size), default=0.0)
        row: dict[Hashable, list[float | None]] = {c: [] for c in classes}
        for n, t in enumerate(thresholds):
            cut = t * peak
            kept = {c: float(m[m > cut].sum()) for c, m in mags.items()}
            total = sum(kept.values())
            if total <= 0.0:
                n_undefined[n] += 1
                for c in classes:
                    row[c].append(None)
                continue
            for c in classes:
                share = kept[c] / total
                props[c][n].append(share)
                row[c].append(share)
        per_instance.append(row)
    mean = {c: [] for c in classes}
    ci = {c: [] for c in classes}
    for c in classes:
        for n in range(n_t):
            vals = np.array(props[c][n])
            if vals.size == 0:
                mean[c].append(math.nan)
                ci[c].append(math.nan)
                continue
            mean[c].append(float(vals.mean()))
            sd = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
            ci[c].append(1.959963984540054 * sd / math.sqrt(vals.size))
    n_defined = [len(instances) - u for u in n_undefined]
    return EffectSummary(thresholds, classes, mean, ci, n_defined, n_undefined, len(instances), per_instance)


def dummy_feature_report(isolation: SetFunction, rtol: float = RTOL, atol: float = ATOL) -> list[int]:
    """Features whose addition never changes the isolation score."""
    v = isolation.values
    tol = atol + rtol * float(np.abs(v).max(initial=0.0))
    out = []
    for i in range(isolation.d):
        pairs = v.reshape(-1, 2, 1 << i)
        if np.all(np.abs(pairs[:, 1, :] - pairs[:, 0, :]) <= tol):
            out.append(i)
    return out

