"""Line-oriented report files: ``key = value`` summaries and TSV tables.

Floats are written with ``repr`` so a report read back gives the same
doubles, and identical runs give identical bytes.
"""

from __future__ import annotations

import hashlib
import os
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np


def fmt(value: Any) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, np.ndarray):
        return ",".join(fmt(v) for v in value.tolist())
    if isinstance(value, (list, tuple)):
        return ",".join(fmt(v) for v in value)
    return str(value)


def _write(path: str | os.PathLike, text: str) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return p


def write_kv(path, items: Mapping[str, Any]) -> Path:
    return _write(path, "".join(f"{k} = {fmt(v)}\n" for k, v in items.items()))


def read_kv(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def write_tsv(path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    lines = ["\t".join(header)]
    lines += ["\t".join(fmt(v) for v in row) for row in rows]
    return _write(path, "\n".join(lines) + "\n")


def read_tsv(path) -> tuple[list[str], list[list[str]]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        return [], []
    return lines[0].split("\t"), [ln.split("\t") for ln in lines[1:]]


def parse_index_list(text: str) -> np.ndarray:
    return np.array([int(t) for t in text.split(",") if t], dtype=np.intp)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
