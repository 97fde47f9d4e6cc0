"""JSON-lines trace files: a metadata line followed by one line per row."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import StructuralError


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps_trace(meta, rows):
    lines = [json.dumps({"meta": _plain(meta)}, sort_keys=True)]
    lines += [json.dumps(_plain(r), sort_keys=True) for r in rows]
    return "\n".join(lines) + "\n"


def write_trace(path, meta, rows):
    text = dumps_trace(meta, rows)
    Path(path).write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def read_trace(path):
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except FileNotFoundError:
        raise StructuralError(f"no such trace file: {path}") from None
    if not lines:
        raise StructuralError(f"{path}: empty trace file")
    try:
        head = json.loads(lines[0])
        rows = [json.loads(line) for line in lines[1:] if line.strip()]
    except json.JSONDecodeError as exc:
        raise StructuralError(f"{path}: malformed JSON line ({exc})") from exc
    if not isinstance(head, dict) or "meta" not in head:
        raise StructuralError(f"{path}: first line must be a metadata object")
    return head["meta"], rows


def file_sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
