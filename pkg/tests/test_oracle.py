import json
import sys
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np
import pytest

from wmscore import (
    BudgetExhausted,
    DimensionError,
    MissingSubset,
    OracleError,
    OracleTimeout,
    PolynomialModel,
    ProtocolError,
    SetFunction,
    ValidationError,
    connect_http_oracle,
    eval_keep,
    isolation_table,
    load_table_oracle,
    mobius_transform,
    polynomial_ground_truth_mobius,
    polynomial_oracle,
    spawn_subprocess_oracle,
    table_oracle,
)
from wmscore.formats import write_value_table
from wmscore.oracle import Oracle, random_polynomial

from conftest import SENTENCE_ISOLATION, SENTENCE_PRINTED, assert_rel, table_isolation

LINE_ORACLE = str(Path(__file__).parent / "fixtures" / "line_oracle.py")


def line_cmd(*args):
    return [sys.executable, LINE_ORACLE, *args]


class CountingBackend:
    """Slow impure backend that counts calls per subset."""

    kind = "test"
    pure = False

    def __init__(self, d, fn=lambda m: float(bin(m).count("1")), delay=0.0):
        self.d = d
        self.fn = fn
        self.delay = delay
        self.calls: dict[int, int] = {}
        self._lock = threading.Lock()

    def evaluate(self, mask):
        with self._lock:
            self.calls[mask] = self.calls.get(mask, 0) + 1
        time.sleep(self.delay)
        return self.fn(mask)

    def describe(self):
        return {"kind": self.kind, "d": self.d}

    def close(self):
        pass


class TestEvalKeep:
    def test_table_lookup(self):
        oracle = table_oracle(SetFunction(2, [0, 1, 2, 4]))
        assert eval_keep(oracle, [0, 1]) == 4

    def test_polynomial_removed_feature_goes_to_baseline(self):
        model = PolynomialModel(2, [((1, 1), 1.0)], [1.0, 1.0])
        assert eval_keep(polynomial_oracle(model), [0]) == 0.0
        assert eval_keep(polynomial_oracle(model), [0, 1]) == 1.0

    def test_second_call_is_cached(self):
        oracle = table_oracle(SetFunction(2, [0, 1, 2, 4]))
        first = oracle.eval_keep(3)
        second = oracle.eval_keep(3)
        assert first == second == 4
        assert [r.source for r in oracle.log.records] == ["fresh", "cached"]
        assert oracle.evaluations == 1

    def test_concurrent_requests_share_one_evaluation(self):
        backend = CountingBackend(3, delay=0.05)
        oracle = Oracle(backend)
        threads = [threading.Thread(target=oracle.eval_keep, args=(5,)) for _ in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert backend.calls == {5: 1}
        assert oracle.log.count("fresh") == 1
        assert oracle.log.count("cached") == 7

    def test_non_finite_backend_value(self):
        oracle = Oracle(CountingBackend(1, fn=lambda m: float("inf")))
        with pytest.raises(ProtocolError):
            oracle.eval_keep(0)

    def test_failure_is_not_memoized(self):
        outcomes = iter([RuntimeError("flaky"), 2.0])

        def fn(m):
            o = next(outcomes)
            if isinstance(o, Exception):
                raise o
            return o

        oracle = Oracle(CountingBackend(1, fn=fn))
        with pytest.raises(RuntimeError):
            oracle.eval_keep(1)
        assert oracle.eval_keep(1) == 2.0


class TestIsolationTable:
    def test_constant_model(self):
        oracle = table_oracle(SetFunction(3, [2.5] * 8))
        assert not isolation_table(oracle).values.any()

    def test_subtracts_empty_value(self):
        assert isolation_table(table_oracle(SetFunction(2, [3, 4, 5, 9]))).values.tolist() == [0, 1, 2, 6]

    def test_sentence_reproduces_arch_attribute_column(self):
        offset = 0.13  # accuracy without demonstrations; cancels out
        iso = table_isolation(SENTENCE_ISOLATION)
        oracle = table_oracle(SetFunction(3, iso.values + offset))
        got = isolation_table(oracle)
        for row, printed in SENTENCE_PRINTED.items():
            assert got[row] == pytest.approx(printed[4], abs=0.005)

    def test_empty_entry_exactly_zero(self, rng):
        oracle = table_oracle(SetFunction(4, rng.normal(size=16) + 1e6))
        assert isolation_table(oracle).values[0] == 0.0

    def test_exactly_two_to_d_fresh_evaluations_under_fanout(self):
        backend = CountingBackend(5, delay=0.001)
        oracle = Oracle(backend, fanout=8)
        hammer = [threading.Thread(target=lambda: [oracle.eval_keep(m) for m in range(32)]) for _ in range(3)]
        for t in hammer:
            t.start()
        oracle.isolation_table()
        for t in hammer:
            t.join()
        assert sorted(backend.calls) == list(range(32))
        assert set(backend.calls.values()) == {1}
        assert oracle.evaluations == 32

    def test_budget_checked_before_any_evaluation(self):
        backend = CountingBackend(4)
        oracle = Oracle(backend, max_evaluations=15)
        with pytest.raises(BudgetExhausted):
            oracle.isolation_table()
        assert backend.calls == {}

    def test_budget_counts_only_missing_subsets(self):
        backend = CountingBackend(2)
        oracle = Oracle(backend, max_evaluations=4)
        oracle.eval_keep(1)
        oracle.isolation_table()
        assert oracle.evaluations == 4

    def test_eval_keep_over_budget(self):
        oracle = Oracle(CountingBackend(2), max_evaluations=1)
        oracle.eval_keep(0)
        oracle.eval_keep(0)
        with pytest.raises(BudgetExhausted):
            oracle.eval_keep(1)

    def test_soft_cap(self):
        oracle = table_oracle(SetFunction.zeros(21))
        with pytest.raises(DimensionError):
            oracle.isolation_table()


class TestPolynomial:
    def test_quadratic_closed_form(self):
        beta = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0]
        idx = [(0, 0), (1, 0), (0, 1), (2, 0), (0, 2), (1, 1)]
        model = PolynomialModel(2, list(zip(idx, beta)), [1.0, 1.0])
        truth = polynomial_ground_truth_mobius(model)
        # b1 x1 + b3 x1^2 = 4, b2 x2 + b4 x2^2 = 6, b5 x1 x2 = 5
        assert truth.values.tolist() == [0.0, 4.0, 6.0, 5.0]
        via_transform = mobius_transform(isolation_table(polynomial_oracle(model)))
        assert_rel(via_transform.values, truth.values)

    def test_quadratic_symbolic_cases(self, rng):
        b = rng.normal(size=6)
        x1, x2 = rng.normal(size=2)
        idx = [(0, 0), (1, 0), (0, 1), (2, 0), (0, 2), (1, 1)]
        truth = polynomial_ground_truth_mobius(PolynomialModel(2, list(zip(idx, b)), [x1, x2]))
        assert truth[()] == 0.0
        assert truth[(0,)] == pytest.approx(b[1] * x1 + b[3] * x1**2)
        assert truth[(1,)] == pytest.approx(b[2] * x2 + b[4] * x2**2)
        assert truth[(0, 1)] == pytest.approx(b[5] * x1 * x2)

    def test_constant_model(self):
        model = PolynomialModel(3, [((0, 0, 0), 7.0)], [1.0, 2.0, 3.0])
        assert not polynomial_ground_truth_mobius(model).values.any()

    def test_nonzero_baseline_rejected(self):
        model = PolynomialModel(1, [((1,), 1.0)], [1.0], baseline=[0.5])
        with pytest.raises(ValidationError):
            polynomial_ground_truth_mobius(model)

    def test_duplicate_multi_indices_merge(self):
        model = PolynomialModel(2, [((1, 0), 1.0), ((1, 0), 2.5)], [1.0, 1.0])
        assert model.terms == [((1, 0), 3.5)]

    def test_negative_exponent_rejected(self):
        with pytest.raises(ValidationError):
            PolynomialModel(1, [((-1,), 1.0)], [1.0])

    @pytest.mark.parametrize("seed", range(20))
    def test_transform_recovers_terms(self, seed):
        rng = np.random.default_rng(seed)
        model = random_polynomial(int(rng.integers(1, 9)), 4, 10, rng)
        got = mobius_transform(isolation_table(polynomial_oracle(model)))
        assert_rel(got.values, polynomial_ground_truth_mobius(model).values)

    def test_dummy_feature_has_zero_mobius(self, rng):
        d = 5
        v = rng.normal(size=1 << (d - 1))
        # feature 2 is ignored: v(S) depends only on S without bit 2
        full = np.array([v[(m & 0b11) | ((m >> 3) << 2)] for m in range(1 << d)])
        mob = mobius_transform(isolation_table(table_oracle(SetFunction(d, full))))
        assert all(mob.values[m] == 0.0 for m in range(1 << d) if m >> 2 & 1)


class TestTableFiles:
    def test_well_formed(self, tmp_path):
        path = tmp_path / "t.json"
        write_value_table(path, 2, {0: 0.0, 1: 1.0, 2: 2.0, 3: 4.0})
        oracle = load_table_oracle(path)
        assert oracle.kind == "table" and oracle.d == 2
        assert oracle.eval_keep(3) == 4.0

    def test_one_row_short(self, tmp_path):
        path = tmp_path / "t.json"
        write_value_table(path, 2, {0: 0.0, 1: 1.0, 2: 2.0})
        with pytest.raises(MissingSubset):
            load_table_oracle(path)

    def test_default_fills(self, tmp_path):
        path = tmp_path / "t.json"
        path.write_text(json.dumps({"d": 2, "entries": [{"keep": [0, 1], "value": 3}], "default": 1}))
        assert load_table_oracle(path).isolation_table().values.tolist() == [0, 0, 0, 2]

    def test_dense_encoding(self, tmp_path):
        path = tmp_path / "t.json"
        path.write_text(json.dumps({"values": [0, 1, 2, 4]}))
        assert load_table_oracle(path).eval_keep(3) == 4.0

    def test_dimension_mismatch(self, tmp_path):
        path = tmp_path / "t.json"
        path.write_text(json.dumps({"values": [0, 1, 2, 4]}))
        with pytest.raises(DimensionError):
            load_table_oracle(path, d=3)

    def test_unreadable(self, tmp_path):
        with pytest.raises(OracleError):
            load_table_oracle(tmp_path / "missing.json")


class TestCacheFile:
    def test_write_through_and_resume(self, tmp_path):
        cache = tmp_path / "cache.json"
        first = Oracle(CountingBackend(3), cache_path=cache, flush_every=2)
        first.eval_keep(1)
        first.eval_keep(2)
        assert cache.exists()  # flushed after two fresh values
        first.isolation_table()
        first.close()
        backend = CountingBackend(3)
        second = Oracle(backend, cache_path=cache)
        iso = second.isolation_table()
        assert backend.calls == {}
        assert iso.values.tolist() == [0, 1, 1, 2, 1, 2, 2, 3]

    def test_cache_dimension_mismatch(self, tmp_path):
        cache = tmp_path / "cache.json"
        write_value_table(cache, 2, {0: 1.0})
        with pytest.raises(DimensionError):
            Oracle(CountingBackend(3), cache_path=cache)


class TestAudit:
    def test_nondeterminism_warns(self):
        state = {"n": 0}

        def drifting(m):
            state["n"] += 1
            return float(state["n"])

        oracle = Oracle(CountingBackend(1, fn=drifting))
        oracle.eval_keep(0)
        with pytest.warns(RuntimeWarning, match="nondeterministic"):
            bad = oracle.audit()
        assert bad == [(0, 1.0, 2.0)]

    def test_deterministic_backend_is_quiet(self, recwarn):
        oracle = table_oracle(SetFunction(1, [0, 1]))
        oracle.isolation_table()
        assert oracle.audit() == []
        assert not recwarn.list


class TestSubprocessOracle:
    def test_constant_backend(self):
        with spawn_subprocess_oracle(line_cmd("const", "0.5"), d=3, timeout=10) as oracle:
            assert {oracle.eval_keep(m) for m in range(8)} == {0.5}

    def test_isolation_table(self):
        with spawn_subprocess_oracle(line_cmd("count"), d=3, timeout=10) as oracle:
            assert oracle.isolation_table().values.tolist() == [0, 1, 1, 4, 1, 4, 4, 9]

    @pytest.mark.parametrize("fanout", [1, 4])
    def test_each_subset_queried_once(self, tmp_path, fanout):
        log = tmp_path / "queries.jsonl"
        with spawn_subprocess_oracle(line_cmd("log", str(log)), d=4, timeout=10, fanout=fanout) as oracle:
            oracle.isolation_table()
            oracle.isolation_table()
        queries = [json.loads(line) for line in log.read_text().splitlines()]
        expected = [[i for i in range(4) if m >> i & 1] for m in range(16)]
        assert len(queries) == 16
        if fanout == 1:
            assert queries == expected  # ascending mask order
        else:
            assert sorted(queries) == sorted(expected)

    def test_malformed_reply(self):
        with spawn_subprocess_oracle(line_cmd("garbage"), d=1, timeout=10) as oracle:
            with pytest.raises(ProtocolError):
                oracle.eval_keep(0)

    def test_timeout(self):
        with spawn_subprocess_oracle(line_cmd("hang"), d=1, timeout=0.3) as oracle:
            with pytest.raises(OracleTimeout):
                oracle.eval_keep(0)

    def test_child_exit(self):
        with spawn_subprocess_oracle(line_cmd("die"), d=1, timeout=10) as oracle:
            with pytest.raises(OracleError):
                oracle.eval_keep(0)

    def test_spawn_failure(self):
        with pytest.raises(OracleError):
            spawn_subprocess_oracle(["/nonexistent/binary"], d=1)


@pytest.fixture
def http_server():
    hits = []

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
            hits.append(body["keep"])
            if self.path == "/fail":
                self.send_response(500)
                self.end_headers()
                return
            value = 1.0 if {0, 1} <= set(body["keep"]) else 0.25 * len(body["keep"])
            payload = json.dumps({"value": value}).encode()
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

        def log_message(self, *args):
            pass

    server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_address[1]}", hits
    server.shutdown()
    server.server_close()


class TestHttpOracle:
    def test_values_and_dedup(self, http_server):
        url, hits = http_server
        oracle = connect_http_oracle(url + "/v", d=3, timeout=5, fanout=4)
        iso = oracle.isolation_table()
        assert iso[(0, 1)] == 1.0
        assert iso[(2,)] == 0.25
        assert sorted(map(tuple, hits)) == sorted(tuple(i for i in range(3) if m >> i & 1) for m in range(8))

    def test_non_200_fails_after_retries(self, http_server):
        url, hits = http_server
        oracle = connect_http_oracle(url + "/fail", d=1, timeout=5)
        oracle.backend.backoff = 0.01
        with pytest.raises(OracleError, match="500"):
            oracle.eval_keep(0)
        assert len(hits) == 4  # first try plus three retries

    def test_connection_refused(self):
        oracle = connect_http_oracle("http://127.0.0.1:9/", d=1, timeout=1)
        oracle.backend.backoff = 0.01
        with pytest.raises(OracleError):
            oracle.eval_keep(0)
