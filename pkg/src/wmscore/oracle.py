"""The black-box boundary.

An :class:`Oracle` answers ``v(S)``, the model output when only the features
in ``S`` are kept. How removed features are realized belongs to the backend:
a table stores ``v(S)`` directly, a polynomial substitutes baseline
coordinates, and subprocess/HTTP backends receive the keep-set and decide for
themselves. Non-real model outputs must be mapped to a real by the backend
(e.g. correct -> 1, incorrect -> 0, averaged over examples).
"""

from __future__ import annotations

import logging
import math
import queue
import shlex
import subprocess
import threading
import time
import urllib.error
import urllib.request
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import formats
from .errors import (
    BudgetExhausted,
    DimensionError,
    NonFiniteValue,
    OracleError,
    OracleTimeout,
    ProtocolError,
    ValidationError,
)
from .lattice import SetFunction, check_d, indices, to_mask

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 60.0


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------


class TableBackend:
    kind = "table"
    pure = True

    def __init__(self, values: SetFunction, source: str | None = None):
        self.values = values
        self.d = values.d
        self.source = source

    def evaluate(self, mask: int) -> float:
        return float(self.values.values[mask])

    def describe(self) -> dict:
        return {"kind": self.kind, "d": self.d, "path": self.source}

    def close(self):
        pass


@dataclass
class PolynomialModel:
    """``f(z) = sum of coef * prod(z_i ** I_i)`` evaluated at x with removed
    features replaced by the baseline."""

    d: int
    terms: list[tuple[tuple[int, ...], float]]
    x: list[float]
    baseline: list[float] | None = None

    kind = "polynomial"
    pure = True

    def __post_init__(self):
        self.d = check_d(self.d)
        if self.baseline is None:
            self.baseline = [0.0] * self.d
        self.x = [float(v) for v in self.x]
        self.baseline = [float(v) for v in self.baseline]
        if len(self.x) != self.d or len(self.baseline) != self.d:
            raise DimensionError(f"x and baseline must have length {self.d}")
        if not all(map(math.isfinite, self.x + self.baseline)):
            raise NonFiniteValue("x and baseline must be finite")
        merged: dict[tuple[int, ...], float] = {}
        for index, coef in self.terms:
            index = tuple(int(e) for e in index)
            if len(index) != self.d or any(e < 0 for e in index):
                raise ValidationError(f"multi-index {index} must have {self.d} entries, all >= 0")
            coef = float(coef)
            if not math.isfinite(coef):
                raise NonFiniteValue(f"coefficient of {index} is not finite")
            merged[index] = merged.get(index, 0.0) + coef
        self.terms = sorted(merged.items())

    @property
    def degree(self) -> int:
        return max((sum(i) for i, _ in self.terms), default=0)

    def point(self, mask: int) -> list[float]:
        return [self.x[i] if mask >> i & 1 else self.baseline[i] for i in range(self.d)]

    def __call__(self, z) -> float:
        total = 0.0
        for index, coef in self.terms:
            term = coef
            for zi, e in zip(z, index):
                if e:
                    term *= zi**e
            total += term
        return total

    def evaluate(self, mask: int) -> float:
        return self(self.point(mask))

    def describe(self) -> dict:
        return {"kind": self.kind, "d": self.d, "model": self.to_doc()}

    def close(self):
        pass

    def to_doc(self) -> dict:
        return {
            "d": self.d,
            "x": self.x,
            "baseline": self.baseline,
            "terms": [{"index": list(i), "coef": c} for i, c in self.terms],
        }

    @classmethod
    def from_doc(cls, doc) -> "PolynomialModel":
        try:
            terms = [(t["index"], t["coef"]) for t in doc["terms"]]
            return cls(doc["d"], terms, doc["x"], doc.get("baseline"))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed polynomial model: {exc}") from None


def random_polynomial(
    d: int,
    degree: int,
    n_terms: int,
    rng: np.random.Generator,
    coef_scale: float = 1.0,
    x_scale: float = 1.0,
) -> PolynomialModel:
    """Random sparse polynomial with zero baseline; each term has total degree in [1, degree]."""
    terms = []
    for _ in range(n_terms):
        total = int(rng.integers(1, degree + 1))
        index = [0] * d
        for i in rng.integers(0, d, size=total):
            index[int(i)] += 1
        terms.append((tuple(index), float(rng.normal(scale=coef_scale))))
    if rng.random() < 0.5:
        terms.append(((0,) * d, float(rng.normal(scale=coef_scale))))
    x = rng.uniform(-x_scale, x_scale, size=d).tolist()
    return PolynomialModel(d, terms, x)


def polynomial_ground_truth_mobius(model: PolynomialModel) -> SetFunction:
    """Closed-form Möbius score of a zero-baseline polynomial.

    Each term lands on the subset of features it actually involves, evaluated
    at x; the constant term is dropped because the isolation score is zero on
    the empty set.
    """
    if any(b != 0.0 for b in model.baseline):
        raise ValidationError("closed form needs an all-zero baseline; use the transform path instead")
    out = np.zeros(1 << model.d)
    for index, coef in model.terms:
        support = 0
        term = coef
        for i, e in enumerate(index):
            if e:
                support |= 1 << i
                term *= model.x[i] ** e
        if support:
            out[support] += term
    return SetFunction(model.d, out)


class SubprocessBackend:
    """One long-lived child process speaking the JSON line protocol on stdin/stdout."""

    kind = "subprocess"
    pure = False

    def __init__(self, cmd, d: int, timeout: float = DEFAULT_TIMEOUT):
        self.argv = shlex.split(cmd) if isinstance(cmd, str) else list(cmd)
        self.d = check_d(d)
        self.timeout = timeout
        self._lock = threading.Lock()
        try:
            self.proc = subprocess.Popen(
                self.argv,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        except OSError as exc:
            raise OracleError(f"cannot spawn {self.argv!r}: {exc}") from exc
        self._lines: queue.Queue = queue.Queue()
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()

    def _pump(self):
        for line in self.proc.stdout:
            self._lines.put(line)
        self._lines.put(None)

    def evaluate(self, mask: int) -> float:
        with self._lock:
            if self.proc.poll() is not None:
                raise OracleError(f"oracle process exited with status {self.proc.returncode}")
            try:
                self.proc.stdin.write(formats.encode_query(mask) + "\n")
                self.proc.stdin.flush()
            except (BrokenPipeError, OSError) as exc:
                raise OracleError(f"oracle process closed its input: {exc}") from exc
            try:
                line = self._lines.get(timeout=self.timeout)
            except queue.Empty:
                self.close()
                raise OracleTimeout(f"no reply within {self.timeout}s for keep={indices(mask)}") from None
            if line is None:
                self.proc.wait()
                raise OracleError(f"oracle process exited with status {self.proc.returncode}")
            return formats.decode_reply(line)

    def describe(self) -> dict:
        return {"kind": self.kind, "d": self.d, "cmd": self.argv, "timeout": self.timeout}

    def close(self):
        if self.proc.poll() is None:
            try:
                self.proc.stdin.close()
                self.proc.wait(timeout=2)
            except (OSError, subprocess.TimeoutExpired):
                self.proc.kill()
                self.proc.wait()


class HttpBackend:
    """POST ``{"keep": [...]}``, expect 200 with ``{"value": number}``."""

    kind = "http"
    pure = False

    def __init__(self, url: str, d: int, timeout: float = DEFAULT_TIMEOUT, retries: int = 3, backoff: float = 0.5):
        self.url = url
        self.d = check_d(d)
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff

    def _post(self, body: bytes) -> tuple[int, bytes]:
        req = urllib.request.Request(
            self.url, data=body, method="POST", headers={"Content-Type": "application/json"}
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return resp.status, resp.read()
        except urllib.error.HTTPError as exc:
            return exc.code, exc.read()

    def evaluate(self, mask: int) -> float:
        body = formats.encode_query(mask).encode("utf-8")
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                status, payload = self._post(body)
            except TimeoutError:
                last = OracleTimeout(f"no reply within {self.timeout}s from {self.url}")
                continue
            except (urllib.error.URLError, OSError) as exc:
                if isinstance(getattr(exc, "reason", None), TimeoutError):
                    last = OracleTimeout(f"no reply within {self.timeout}s from {self.url}")
                else:
                    last = OracleError(f"transport error talking to {self.url}: {exc}")
                continue
            if status != 200:
                last = OracleError(f"{self.url} answered HTTP {status}")
                continue
            return formats.decode_reply(payload)
        raise last

    def describe(self) -> dict:
        return {"kind": self.kind, "d": self.d, "url": self.url, "timeout": self.timeout}

    def close(self):
        pass


# ---------------------------------------------------------------------------
# Memoizing front end
# ---------------------------------------------------------------------------


@dataclass
class EvalRecord:
    mask: int
    value: float
    source: str  # "fresh" or "cached"
    seconds: float


@dataclass
class EvaluationLog:
    records: list[EvalRecord] = field(default_factory=list)
    fresh: int = 0

    def count(self, source: str) -> int:
        return sum(1 for r in self.records if r.source == source)


class _Pending:
    __slots__ = ("event", "value", "error")

    def __init__(self):
        self.event = threading.Event()
        self.value = None
        self.error = None


class Oracle:
    """Memoized ``v(S)`` over a backend with an evaluation budget.

    Safe for concurrent callers: each subset is evaluated fresh at most once,
    and concurrent requests for a subset in flight wait for that result.
    Pure backends (tables, polynomials) are evaluated under the memo lock;
    remote backends run outside it so ``fanout`` requests can overlap.
    """

    def __init__(
        self,
        backend,
        *,
        timeout: float = DEFAULT_TIMEOUT,
        max_evaluations: int | None = None,
        fanout: int = 1,
        cache_path=None,
        flush_every: int = 256,
    ):
        self.backend = backend
        self.d = backend.d
        self.kind = backend.kind
        self.timeout = timeout
        self.max_evaluations = max_evaluations
        self.fanout = max(1, int(fanout))
        self.cache_path = Path(cache_path) if cache_path else None
        self.flush_every = flush_every
        self.log = EvaluationLog()
        self._lock = threading.Lock()
        self._flush_lock = threading.Lock()
        self._memo: dict[int, float | _Pending] = {}
        self._claimed = 0
        self._dirty = 0
        if self.cache_path and self.cache_path.exists():
            self._load_cache()

    # -- cache file ---------------------------------------------------------

    def _load_cache(self):
        d, table, _ = formats.read_value_table(self.cache_path)
        if d != self.d:
            raise DimensionError(f"cache file {self.cache_path} has d={d}, oracle has d={self.d}")
        self._memo.update(table)
        logger.info("loaded %d cached values from %s", len(table), self.cache_path)

    def known_values(self) -> dict[int, float]:
        with self._lock:
            return {m: v for m, v in self._memo.items() if not isinstance(v, _Pending)}

    def flush(self):
        """Write every known value to the cache file, if one is configured."""
        if self.cache_path is None:
            return
        with self._flush_lock:
            formats.write_value_table(self.cache_path, self.d, self.known_values())
            self._dirty = 0

    # -- evaluation ---------------------------------------------------------

    @property
    def evaluations(self) -> int:
        return self.log.fresh

    def remaining_budget(self) -> float:
        if self.max_evaluations is None:
            return math.inf
        return self.max_evaluations - self._claimed

    def _claim(self, mask: int):
        if self.remaining_budget() < 1:
            raise BudgetExhausted(f"evaluation budget of {self.max_evaluations} used up")
        self._claimed += 1

    def _call_backend(self, mask: int) -> float:
        value = float(self.backend.evaluate(mask))
        if not math.isfinite(value):
            raise ProtocolError(f"backend returned non-finite value for keep={indices(mask)}")
        return value

    def _record_fresh(self, mask: int, value: float, elapsed: float) -> bool:
        # caller holds self._lock
        self._memo[mask] = value
        self.log.fresh += 1
        self.log.records.append(EvalRecord(mask, value, "fresh", elapsed))
        self._dirty += 1
        return self.cache_path is not None and self._dirty >= self.flush_every

    def eval_keep(self, S) -> float:
        """Return ``v(S)``, evaluating the backend only on the first request."""
        mask = to_mask(S, self.d)
        with self._lock:
            slot = self._memo.get(mask)
            if isinstance(slot, float):
                self.log.records.append(EvalRecord(mask, slot, "cached", 0.0))
                return slot
            if slot is None:
                self._claim(mask)
                if self.backend.pure:
                    start = time.perf_counter()
                    value = self._call_backend(mask)
                    flush = self._record_fresh(mask, value, time.perf_counter() - start)
                    slot = None
                else:
                    slot = _Pending()
                    self._memo[mask] = slot
                    owner = True
            else:
                owner = False
        if self.backend.pure:
            if flush:
                self.flush()
            return value
        if not owner:
            slot.event.wait()
            if slot.error is not None:
                raise slot.error
            with self._lock:
                self.log.records.append(EvalRecord(mask, slot.value, "cached", 0.0))
            return slot.value
        start = time.perf_counter()
        try:
            value = self._call_backend(mask)
        except BaseException as exc:
            with self._lock:
                del self._memo[mask]
            slot.error = exc
            slot.event.set()
            raise
        with self._lock:
            flush = self._record_fresh(mask, value, time.perf_counter() - start)
        slot.value = value
        slot.event.set()
        if flush:
            self.flush()
        return value

    def evaluate_all(self, masks) -> list[float]:
        masks = list(masks)
        if self.fanout > 1 and not self.backend.pure:
            with ThreadPoolExecutor(self.fanout) as pool:
                return list(pool.map(self.eval_keep, masks))
        return [self.eval_keep(m) for m in masks]

    def isolation_table(self, allow_large: bool = False) -> SetFunction:
        """``A_f(S) = v(S) - v(empty)`` for every subset, evaluated in ascending mask order."""
        check_d(self.d, allow_large=allow_large)
        n = 1 << self.d
        missing = n - len(self.known_values())
        if missing > self.remaining_budget():
            raise BudgetExhausted(
                f"isolation table needs {missing} fresh evaluations, budget leaves {self.remaining_budget()}"
            )
        v = np.array(self.evaluate_all(range(n)))
        if self.cache_path is not None and self._dirty:
            self.flush()
        out = v - v[0]
        out[0] = 0.0
        return SetFunction(self.d, out)

    def audit(self, masks=None) -> list[tuple[int, float, float]]:
        """Re-query the backend for cached subsets and warn on disagreement.

        Audit calls bypass the memo and the budget. Returns the disagreeing
        ``(mask, cached, fresh)`` triples.
        """
        known = self.known_values()
        masks = sorted(known) if masks is None else [to_mask(m, self.d) for m in masks]
        bad = []
        for m in masks:
            if m not in known:
                continue
            again = float(self.backend.evaluate(m))
            if again != known[m]:
                bad.append((m, known[m], again))
                warnings.warn(
                    f"nondeterministic oracle: keep={indices(m)} cached {known[m]!r}, fresh {again!r}",
                    RuntimeWarning,
                    stacklevel=2,
                )
        return bad

    def describe(self) -> dict:
        return self.backend.describe()

    def close(self):
        try:
            if self.cache_path is not None and self._dirty:
                self.flush()
        finally:
            self.backend.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


OracleSpec = Oracle


def eval_keep(oracle: Oracle, S) -> float:
    return oracle.eval_keep(S)


def isolation_table(oracle: Oracle, allow_large: bool = False) -> SetFunction:
    return oracle.isolation_table(allow_large=allow_large)


# ---------------------------------------------------------------------------
# Constructors
# ---------------------------------------------------------------------------


def table_oracle(values: SetFunction, **kw) -> Oracle:
    return Oracle(TableBackend(values), **kw)


def polynomial_oracle(model: PolynomialModel, **kw) -> Oracle:
    return Oracle(model, **kw)


def load_table_oracle(path, d: int | None = None, **kw) -> Oracle:
    """Oracle backed by a value-table file; the file must cover all 2^d subsets or give a default."""
    try:
        values = formats.load_set_function(path)
    except OSError as exc:
        raise OracleError(f"cannot read value table {path}: {exc}") from exc
    if d is not None and values.d != d:
        raise DimensionError(f"{path} declares d={values.d}, expected {d}")
    return Oracle(TableBackend(values, source=str(path)), **kw)


def spawn_subprocess_oracle(cmd, d: int, timeout: float = DEFAULT_TIMEOUT, **kw) -> Oracle:
    return Oracle(SubprocessBackend(cmd, d, timeout=timeout), timeout=timeout, **kw)


def connect_http_oracle(url: str, d: int, timeout: float = DEFAULT_TIMEOUT, retries: int = 3, **kw) -> Oracle:
    return Oracle(HttpBackend(url, d, timeout=timeout, retries=retries), timeout=timeout, **kw)


def load_polynomial(path) -> PolynomialModel:
    return PolynomialModel.from_doc(formats.loads(Path(path).read_text(encoding="utf-8")))
