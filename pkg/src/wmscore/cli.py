"""Command-line interface.

Exit status: 0 success, 1 configuration/input error, 2 oracle failure,
3 evaluation budget exhausted.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import signal
import sys
import threading
from pathlib import Path

import numpy as np

from . import __version__, formats
from .analysis import ArchDetectColumn, compare_methods
from .errors import BudgetExhausted, OracleError, ValidationError, WMSError
from .lattice import (
    check_d,
    make_set_function,
    mobius_transform,
    mobius_transform_naive,
    popcount,
    zeta_transform,
    zeta_transform_naive,
)
from .methods import KERNELS, arch_detect_all, get_kernel, mobius_score, weighted_score
from .oracle import (
    DEFAULT_TIMEOUT,
    Oracle,
    PolynomialModel,
    connect_http_oracle,
    load_polynomial,
    load_table_oracle,
    polynomial_ground_truth_mobius,
    polynomial_oracle,
    random_polynomial,
    spawn_subprocess_oracle,
)

log = logging.getLogger("wmscore")

CACHE_ENV = "WMSCORE_CACHE_DIR"
EXIT_CONFIG, EXIT_ORACLE, EXIT_BUDGET = 1, 2, 3


class ConfigError(ValidationError):
    pass


# ---------------------------------------------------------------------------
# Argument parsing helpers
# ---------------------------------------------------------------------------


def parse_methods(values: list[str] | None, d: int | None = None) -> list[tuple[str, int | None]]:
    """``["shapley", "sii:3,tie"]`` -> ``[("shapley", None), ("sii", 3), ("tie", None)]``.

    ``k`` may be the literal ``d`` to mean the feature count.
    """
    out = []
    for chunk in values or []:
        for item in chunk.split(","):
            item = item.strip()
            if not item:
                continue
            name, _, k = item.partition(":")
            if not k:
                out.append((name, None))
            elif k == "d":
                if d is None:
                    raise ConfigError("order 'd' needs a known feature count")
                out.append((name, d))
            else:
                try:
                    out.append((name, int(k)))
                except ValueError:
                    raise ConfigError(f"bad order in {item!r}") from None
    return out


def parse_floats(text: str | None) -> list[float] | None:
    if text is None:
        return None
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None


def parse_pairs(text: str | None, d: int) -> list[tuple[int, int]] | None:
    if text is None:
        return None
    pairs = []
    for chunk in text.split(","):
        parts = chunk.replace("+", "-").split("-")
        if len(parts) != 2:
            raise ConfigError(f"bad pair {chunk!r}; use i-j")
        try:
            i, j = int(parts[0]), int(parts[1])
        except ValueError:
            raise ConfigError(f"bad pair {chunk!r}; use i-j") from None
        pairs.append((i, j))
    return pairs


def resolved_config(args) -> dict:
    cfg = {}
    for key, value in sorted(vars(args).items()):
        if key in ("func",):
            continue
        cfg[key] = value
    return cfg


def add_oracle_args(p: argparse.ArgumentParser):
    g = p.add_argument_group("oracle (exactly one source)")
    g.add_argument("--input", help="value-table JSON file with v(S)")
    g.add_argument("--oracle-cmd", help="command speaking the JSON line protocol on stdin/stdout")
    g.add_argument("--oracle-url", help="HTTP endpoint accepting POST {\"keep\": [...]}")
    g.add_argument("--poly", help="polynomial model JSON file")
    g.add_argument("--d", type=int, help="feature count (required for --oracle-cmd/--oracle-url)")
    g.add_argument("--timeout", type=float, default=DEFAULT_TIMEOUT, help="seconds per evaluation")
    g.add_argument("--budget", type=int, help="maximum fresh evaluations")
    g.add_argument("--fanout", type=int, default=1, help="parallel requests to remote oracles")
    g.add_argument("--cache", help=f"cache file for resumable runs (default dir: ${CACHE_ENV})")
    g.add_argument("--allow-large", action="store_true", help="permit 20 < d <= 26")


def add_output_args(p: argparse.ArgumentParser):
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--output", "-o", help="write here instead of stdout")


def build_oracle(args) -> Oracle:
    sources = [s for s in ("input", "oracle_cmd", "oracle_url", "poly") if getattr(args, s)]
    if len(sources) != 1:
        raise ConfigError("give exactly one of --input, --oracle-cmd, --oracle-url, --poly")
    kw = {"max_evaluations": args.budget, "fanout": args.fanout}
    source = sources[0]
    if source in ("oracle_cmd", "oracle_url"):
        if args.d is None:
            raise ConfigError("--d is required with --oracle-cmd/--oracle-url")
        check_d(args.d, allow_large=args.allow_large)
    cache = args.cache
    if cache is None and source in ("oracle_cmd", "oracle_url") and os.environ.get(CACHE_ENV):
        key = json.dumps([source, getattr(args, source), args.d])
        cache = str(Path(os.environ[CACHE_ENV]) / f"{hashlib.sha256(key.encode()).hexdigest()[:16]}.json")
    kw["cache_path"] = cache
    if source == "input":
        oracle = load_table_oracle(args.input, d=args.d, **kw)
    elif source == "poly":
        try:
            model = load_polynomial(args.poly)
        except OSError as exc:
            raise ConfigError(f"cannot read {args.poly}: {exc}") from exc
        if args.d is not None and args.d != model.d:
            raise ConfigError(f"--d {args.d} does not match model d={model.d}")
        oracle = polynomial_oracle(model, **kw)
    elif source == "oracle_cmd":
        oracle = spawn_subprocess_oracle(args.oracle_cmd, args.d, timeout=args.timeout, **kw)
    else:
        oracle = connect_http_oracle(args.oracle_url, args.d, timeout=args.timeout, **kw)
    try:
        check_d(oracle.d, allow_large=args.allow_large)
    except ValidationError:
        oracle.close()
        raise
    return oracle


def emit(args, text: str):
    if args.output:
        formats.write_text_atomic(args.output, text)
    else:
        sys.stdout.write(text)
        sys.stdout.flush()


def _provenance(args, oracle: Oracle | None) -> dict:
    meta = {"config": resolved_config(args)}
    if oracle is not None:
        meta["evaluations"] = oracle.evaluations
    return meta


def _scores_csv(results, with_method: bool) -> str:
    lines = ["method;set;score" if with_method else "set;score"]
    for r in results:
        label = r.method if r.k is None else f"{r.method}:{r.k}"
        for m, v in r.scores.items():
            row = [formats.set_label(m), repr(float(v))]
            lines.append(";".join([label] + row if with_method else row))
    return "\n".join(lines) + "\n"


def _parse_targets(args, d: int) -> list[int] | None:
    if args.targets is None:
        return None
    return [formats.parse_set_label(t, d) for t in args.targets]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_attribute(args, oracle: Oracle) -> int:
    methods = parse_methods(args.method, oracle.d)
    if not methods:
        raise ConfigError(f"no --method given; registered: {', '.join(KERNELS)}")
    kernels = [get_kernel(name, k) for name, k in methods]
    d = oracle.d
    if args.order is not None and not 0 <= args.order <= d:
        raise ConfigError(f"--order must lie in [0, {d}]")
    targets = _parse_targets(args, d)
    isolation = oracle.isolation_table(allow_large=args.allow_large)
    mobius = mobius_score(isolation)
    results = []
    for kernel in kernels:
        t = targets
        if t is None and args.order is not None:
            t = [m for m in kernel.default_targets(d) if popcount(m) <= args.order]
        results.append(weighted_score(mobius, kernel, t))
    meta = _provenance(args, oracle)
    if args.format == "csv":
        emit(args, _scores_csv(results, with_method=len(results) > 1))
        return 0
    docs = []
    for r in results:
        r.meta = meta
        docs.append(r.to_doc())
    emit(args, formats.dumps(docs[0] if len(docs) == 1 else {"results": docs, "meta": meta}))
    return 0


def cmd_transform(args) -> int:
    try:
        d, table, default = formats.read_value_table(args.input)
    except OSError as exc:
        raise ConfigError(f"cannot read {args.input}: {exc}") from exc
    check_d(d, allow_large=args.allow_large)
    values = make_set_function(d, table, default=default)
    if args.op == "zeta":
        out = zeta_transform_naive(values) if args.naive else zeta_transform(values)
    else:
        out = mobius_transform_naive(values) if args.naive else mobius_transform(values)
    emit(args, formats.dumps(formats.value_table_doc(d, out, args.digits)))
    return 0


DEFAULT_COMPARE = "mobius,shapley,sii:d,tie,arch_attribute"


def cmd_compare(args, oracle: Oracle) -> int:
    d = oracle.d
    methods = parse_methods(args.method or [DEFAULT_COMPARE], d)
    entries = [get_kernel(name, k) for name, k in methods]
    if args.arch_detect:
        entries.append(ArchDetectColumn(None if args.h is None else tuple(parse_floats(args.h))))
    labels = args.labels.split(",") if args.labels else None
    if labels is not None and len(labels) != d:
        raise ConfigError(f"--labels needs {d} names")
    isolation = oracle.isolation_table(allow_large=args.allow_large)
    table = compare_methods(isolation, entries)
    if args.format == "csv":
        emit(args, table.to_csv(labels=labels))
        return 0
    doc = table.to_doc()
    if labels:
        doc["labels"] = labels
    doc["meta"] = _provenance(args, oracle)
    emit(args, formats.dumps(doc))
    return 0


def cmd_detect(args, oracle: Oracle) -> int:
    d = oracle.d
    h = parse_floats(args.h)
    if h is not None and len(h) == 1:
        h = h * d
    isolation = oracle.isolation_table(allow_large=args.allow_large)
    result = arch_detect_all(mobius_score(isolation), parse_pairs(args.pairs, d), h)
    result.meta = {**result.meta, **_provenance(args, oracle)}
    if args.format == "csv":
        emit(args, _scores_csv([result], with_method=False))
    else:
        emit(args, formats.dumps(result.to_doc()))
    return 0


def _synth_model(args) -> PolynomialModel:
    chosen = [bool(args.model), args.quadratic, args.constant is not None, args.random]
    if sum(chosen) != 1:
        raise ConfigError("give exactly one of --model, --quadratic, --constant, --random")
    if args.model:
        try:
            return load_polynomial(args.model)
        except OSError as exc:
            raise ConfigError(f"cannot read {args.model}: {exc}") from exc
    if args.quadratic:
        beta = parse_floats(args.beta) or [0.0, 1.0, 2.0, 3.0, 4.0, 5.0]
        x = parse_floats(args.x) or [1.0, 1.0]
        if len(beta) != 6 or len(x) != 2:
            raise ConfigError("--quadratic needs 6 coefficients (--beta) and 2 inputs (--x)")
        idx = [(0, 0), (1, 0), (0, 1), (2, 0), (0, 2), (1, 1)]
        return PolynomialModel(2, list(zip(idx, beta)), x)
    if args.constant is not None:
        d = 2 if args.d is None else args.d
        return PolynomialModel(d, [((0,) * d, args.constant)], [1.0] * d)
    if args.d is None:
        raise ConfigError("--random needs --d")
    check_d(args.d, allow_large=False)
    rng = np.random.default_rng(args.seed)
    return random_polynomial(args.d, args.degree, args.terms, rng)


def cmd_synth(args) -> int:
    model = _synth_model(args)
    check_d(model.d, allow_large=args.allow_large)
    table = {m: model.evaluate(m) for m in range(1 << model.d)}
    truth = polynomial_ground_truth_mobius(model)
    written = {}
    if args.out_table:
        formats.write_value_table(args.out_table, model.d, table)
        written["table"] = args.out_table
    if args.out_truth:
        formats.write_value_table(args.out_truth, model.d, truth)
        written["truth"] = args.out_truth
    if args.out_model:
        formats.write_text_atomic(args.out_model, formats.dumps(model.to_doc()))
        written["model"] = args.out_model
    doc = {
        "model": model.to_doc(),
        "table": formats.value_table_doc(model.d, table),
        "truth": formats.value_table_doc(model.d, truth),
    }
    if not written:
        emit(args, formats.dumps(doc))
    else:
        emit(args, formats.dumps({"written": written, "meta": _provenance(args, None)}))
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wmscore", description="Weighted Möbius score attribution engine")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("attribute", help="score subsets with one or more methods")
    add_oracle_args(p)
    p.add_argument(
        "--method", "-m", action="append",
        help=f"method[:k], repeatable or comma-separated; one of {', '.join(KERNELS)}",
    )
    p.add_argument("--targets", nargs="+", help="subsets as '+'-joined indices, e.g. 0+1 2")
    p.add_argument("--order", type=int, help="score every family member up to this size")
    add_output_args(p)
    p.set_defaults(func=cmd_attribute, needs_oracle=True)

    p = sub.add_parser("transform", help="apply the Zeta or Möbius transform to a value table")
    p.add_argument("--op", choices=("zeta", "mobius"), required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--naive", action="store_true", help="use the O(4^d) double sum")
    p.add_argument("--digits", type=int, help="round output values to this many decimals")
    p.add_argument("--allow-large", action="store_true")
    p.add_argument("--output", "-o")
    p.set_defaults(func=cmd_transform, needs_oracle=False, format="json")

    p = sub.add_parser("compare", help="table of several methods over all subsets")
    add_oracle_args(p)
    p.add_argument("--method", "-m", action="append", help=f"columns (default {DEFAULT_COMPARE})")
    p.add_argument("--arch-detect", action="store_true", help="add an ArchDetect column on pair rows")
    p.add_argument("--h", help="ArchDetect step sizes, comma-separated (default all 1)")
    p.add_argument("--labels", help="comma-separated feature names for CSV rows")
    add_output_args(p)
    p.set_defaults(func=cmd_compare, needs_oracle=True)

    p = sub.add_parser("synth", help="polynomial value table plus its closed-form Möbius table")
    p.add_argument("--model", help="polynomial model JSON")
    p.add_argument("--quadratic", action="store_true", help="two-feature quadratic with --beta and --x")
    p.add_argument("--beta", help="b0..b5 for --quadratic (default 0,1,2,3,4,5)")
    p.add_argument("--x", help="x1,x2 for --quadratic (default 1,1)")
    p.add_argument("--constant", type=float, help="constant model with this value")
    p.add_argument("--random", action="store_true", help="random sparse polynomial")
    p.add_argument("--d", type=int)
    p.add_argument("--degree", type=int, default=3)
    p.add_argument("--terms", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-table")
    p.add_argument("--out-truth")
    p.add_argument("--out-model")
    p.add_argument("--allow-large", action="store_true")
    p.add_argument("--output", "-o")
    p.set_defaults(func=cmd_synth, needs_oracle=False, format="json")

    p = sub.add_parser("detect", help="ArchDetect pairwise interaction scores")
    add_oracle_args(p)
    p.add_argument("--pairs", help="pairs like 0-1,1-2 (default all)")
    p.add_argument("--h", "--h-values", dest="h", help="per-feature step sizes, comma-separated, or one value")
    add_output_args(p)
    p.set_defaults(func=cmd_detect, needs_oracle=True)
    return parser


def _raise_exit(signum, frame):
    raise SystemExit(128 + signum)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    previous = signal.getsignal(signal.SIGTERM)
    in_main = threading_is_main()
    if in_main:
        signal.signal(signal.SIGTERM, _raise_exit)
    oracle = None
    try:
        if args.needs_oracle:
            oracle = build_oracle(args)
            return args.func(args, oracle)
        return args.func(args)
    except BudgetExhausted as exc:
        print(f"wmscore: budget exhausted: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except OracleError as exc:
        print(f"wmscore: oracle failure: {exc}", file=sys.stderr)
        return EXIT_ORACLE
    except (WMSError, ValueError) as exc:
        print(f"wmscore: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        return 130
    finally:
        if oracle is not None:
            oracle.close()
        if in_main:
            signal.signal(signal.SIGTERM, previous)


def threading_is_main() -> bool:
    return threading.current_thread() is threading.main_thread()


if __name__ == "__main__":
    sys.exit(main())
