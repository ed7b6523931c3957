"""File and wire formats.

Value table (JSON, UTF-8, feature indices start at 0)::

    {"d": 3, "entries": [{"keep": [0, 2], "value": 0.5}, ...], "default": 0.0}

``default`` is optional. The dense alternative ``{"d": 3, "values": [...]}``
is indexed by bitmask. Subprocess and HTTP oracles exchange
``{"keep": [...]}`` requests and ``{"value": number}`` replies, one JSON
object per line.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from collections.abc import Mapping
from pathlib import Path

import numpy as np

from .errors import DimensionError, DuplicateSubset, NonFiniteValue, ProtocolError, ValidationError
from .lattice import FeatureSet, SetFunction, check_d, indices, make_set_function, popcounts


def _reject_constant(name):
    raise NonFiniteValue(f"non-finite JSON constant {name}")


def loads(text: str):
    """json.loads that refuses NaN and Infinity."""
    return json.loads(text, parse_constant=_reject_constant)


def dumps(obj) -> str:
    """Canonical document text: fixed key order as built, shortest round-trip floats."""
    return json.dumps(obj, indent=2, ensure_ascii=False, allow_nan=False) + "\n"


def canonical_order(masks) -> list[int]:
    """Ascending cardinality, then ascending bitmask."""
    return sorted((int(m) for m in masks), key=lambda m: (m.bit_count(), m))


def _number(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValidationError(f"{where}: expected a number, got {value!r}")
    value = float(value)
    if not math.isfinite(value):
        raise NonFiniteValue(f"{where}: non-finite value")
    return value


def parse_keep(keep, d: int) -> int:
    if not isinstance(keep, list) or any(isinstance(i, bool) or not isinstance(i, int) for i in keep):
        raise ValidationError(f"'keep' must be a list of ints, got {keep!r}")
    return FeatureSet.from_indices(keep, d).bits


def parse_value_table(doc) -> tuple[int, dict[int, float], float | None]:
    """Parse a value-table document into (d, {mask: value}, default)."""
    if not isinstance(doc, Mapping):
        raise ValidationError("value table must be a JSON object")
    default = doc.get("default")
    if default is not None:
        default = _number(default, "default")
    if "values" in doc:
        values = doc["values"]
        if not isinstance(values, list):
            raise ValidationError("'values' must be a list")
        n = len(values)
        d = n.bit_length() - 1
        if n < 1 or 1 << d != n:
            raise DimensionError(f"dense 'values' length {n} is not a power of two")
        if "d" in doc and doc["d"] != d:
            raise DimensionError(f"declared d={doc['d']} but {n} values imply d={d}")
        check_d(d)
        return d, {m: _number(v, f"values[{m}]") for m, v in enumerate(values)}, default
    if "d" not in doc or "entries" not in doc:
        raise ValidationError("value table needs 'd' and either 'entries' or 'values'")
    d = check_d(doc["d"])
    if not isinstance(doc["entries"], list):
        raise ValidationError("'entries' must be a list")
    table: dict[int, float] = {}
    for n, entry in enumerate(doc["entries"]):
        if not isinstance(entry, Mapping) or "keep" not in entry or "value" not in entry:
            raise ValidationError(f"entries[{n}] needs 'keep' and 'value'")
        m = parse_keep(entry["keep"], d)
        if m in table:
            raise DuplicateSubset(f"subset {FeatureSet(m, d)} listed twice")
        table[m] = _number(entry["value"], f"entries[{n}].value")
    return d, table, default


def read_value_table(path) -> tuple[int, dict[int, float], float | None]:
    return parse_value_table(loads(Path(path).read_text(encoding="utf-8")))


def load_set_function(path) -> SetFunction:
    """Read a value-table file as a dense SetFunction (MissingSubset if incomplete)."""
    d, table, default = read_value_table(path)
    return make_set_function(d, table, default=default)


def value_table_doc(d: int, values: Mapping[int, float] | SetFunction, digits: int | None = None) -> dict:
    table = dict(values.items())
    entries = []
    for m in canonical_order(table):
        v = float(table[m])
        if digits is not None:
            v = round(v, digits) + 0.0
        entries.append({"keep": indices(m), "value": v})
    return {"d": d, "entries": entries}


def write_text_atomic(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_value_table(path, d: int, values, digits: int | None = None) -> None:
    write_text_atomic(path, dumps(value_table_doc(d, values, digits)))


def encode_query(mask: int) -> str:
    return json.dumps({"keep": indices(mask)})


def decode_reply(line) -> float:
    """Parse one ``{"value": number}`` reply; anything else is a ProtocolError."""
    if isinstance(line, bytes):
        line = line.decode("utf-8", errors="replace")
    try:
        doc = loads(line)
    except (ValueError, NonFiniteValue) as exc:
        raise ProtocolError(f"malformed reply {line.strip()[:200]!r}: {exc}") from None
    if not isinstance(doc, dict) or set(doc) != {"value"}:
        raise ProtocolError(f"reply must be exactly {{\"value\": number}}, got {line.strip()[:200]!r}")
    value = doc["value"]
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ProtocolError(f"reply value is not a finite number: {value!r}")
    return float(value)


def set_label(mask: int) -> str:
    """CSV rendering: '+'-joined indices, empty string for the empty set."""
    return "+".join(map(str, indices(mask)))


def parse_set_label(text: str, d: int) -> int:
    text = text.strip()
    if text in ("", "{}", "-"):
        return 0
    try:
        idx = [int(t) for t in text.replace(",", "+").split("+")]
    except ValueError:
        raise ValidationError(f"cannot parse subset {text!r}; use '+'-joined indices like 0+2") from None
    return FeatureSet.from_indices(idx, d).bits


def masks_up_to_order(d: int, order: int, include_empty: bool = False) -> list[int]:
    sizes = popcounts(d)
    lo = 0 if include_empty else 1
    return canonical_order(np.flatnonzero((sizes >= lo) & (sizes <= order)))
