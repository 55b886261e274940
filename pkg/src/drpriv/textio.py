"""Flat ``key = value`` records and the CSV dialect shared by all artifacts."""

from __future__ import annotations

import csv
import io
import math
from fractions import Fraction


def fmt(value):
    """Canonical scalar text: 9 significant digits for floats."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, Fraction):
        return str(value.numerator) if value.denominator == 1 else f"{value.numerator}/{value.denominator}"
    if isinstance(value, float):
        if math.isnan(value) or math.isinf(value):
            return str(value)
        return f"{value:.9g}"
    if isinstance(value, (list, tuple)):
        return ",".join(fmt(v) for v in value)
    return str(value)


def parse_scalar(text):
    t = text.strip()
    low = t.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(t)
    except ValueError:
        pass
    if "/" in t:
        try:
            return Fraction(t)
        except ValueError:
            pass
    try:
        return float(t)
    except ValueError:
        return t


def dump_record(record: dict, header=None):
    lines = [f"# {header}"] if header else []
    lines.extend(f"{k} = {fmt(v)}" for k, v in record.items())
    return "\n".join(lines) + "\n"


def parse_record(text):
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"malformed record line {line!r}")
        out[key.strip()] = parse_scalar(value)
    return out


def write_csv(path, header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def read_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [{k: parse_scalar(v) for k, v in row.items()} for row in reader]
