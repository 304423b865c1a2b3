"""Deterministic, atomically written result files with metadata headers."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import tempfile
from pathlib import Path

from . import __version__

SIDECAR = "metadata.json"


def fmt(x) -> str:
    if isinstance(x, float):
        return format(x, ".17g")
    if x is None:
        return ""
    return str(x)


def header_lines(seed: int, config_hash: str, **extra) -> list[str]:
    lines = [f"bodyschema {__version__}", f"master_seed={seed}", f"config_sha256={config_hash}"]
    lines += [f"{k}={v}" for k, v in sorted(extra.items())]
    return lines


def csv_text(columns, rows, header: list[str] | None = None) -> str:
    buf = io.StringIO()
    for line in header or []:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def read_csv(path) -> tuple[list[str], list[dict]]:
    """Columns and rows of a CSV written by ``csv_text`` (comment lines skipped)."""
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    rows = list(reader)
    return list(reader.fieldnames or []), rows


def atomic_write(path, text: str) -> Path:
    """Write via a temporary file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def update_sidecar(out_dir, files, seed: int, config_hash: str, volatile=()) -> Path:
    """Record the hash of every written file in ``out_dir/metadata.json``.

    Files listed in ``volatile`` (e.g. wall-clock timings) are named but not hashed,
    so the sidecar itself stays reproducible.
    """
    out = Path(out_dir)
    side = out / SIDECAR
    doc = json.loads(side.read_text(encoding="utf-8")) if side.is_file() else {}
    doc.update({"version": __version__, "master_seed": seed, "config_sha256": config_hash})
    hashes = doc.setdefault("files", {})
    for f in files:
        name = Path(f).name
        hashes[name] = None if name in volatile else sha256_file(out / name)
    doc["files"] = dict(sorted(hashes.items()))
    return atomic_write(side, json.dumps(doc, indent=2, sort_keys=True) + "\n")
