"""CSV emission with a leading provenance comment line."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from pathlib import Path

FORMAT_VERSION = 1


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return ""
    return str(v)


def format_csv(header, rows, seed=None, config=None):
    buf = io.StringIO()
    prov = f"# gmgan format_version={FORMAT_VERSION}"
    if seed is not None:
        prov += f" seed={seed}"
    if config is not None:
        prov += f" config_hash={config_hash(config)}"
    buf.write(prov + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


def write_csv(path, header, rows, seed=None, config=None):
    Path(path).write_text(format_csv(header, rows, seed, config))


def read_csv(path):
    """(header, rows) with the provenance comment skipped; cells stay strings."""
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader)
    return header, list(reader)
