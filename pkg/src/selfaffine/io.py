"""File formats: CSV tables, key-value summaries, PGM/PPM rasters, caches."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


def _canon(obj):
    if isinstance(obj, dict):
        return {str(k): _canon(v) for k, v in sorted(obj.items(), key=lambda kv: str(kv[0]))}
    if isinstance(obj, (list, tuple)):
        return [_canon(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _canon(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return repr(float(obj))
    return obj


def canonical_json(obj) -> str:
    return json.dumps(_canon(obj), sort_keys=True, separators=(",", ":"))


def content_hash(obj, length: int = 16) -> str:
    """Short sha256 of the canonical JSON form of ``obj``."""
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:length]


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence],
              comments: Sequence[str] = ()) -> None:
    """Comma separated, ``.`` decimal, LF endings, header row.

    ``comments`` become leading ``# `` lines (used for the config hash).
    """
    lines = [f"# {c}" for c in comments]
    lines.append(",".join(header))
    for r in rows:
        lines.append(",".join(fmt(v) for v in r))
    Path(path).write_text("\n".join(lines) + "\n", newline="\n")


def read_csv(path: str | Path) -> tuple[list[str], list[list[str]]]:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    rows = [ln.split(",") for ln in lines]
    return rows[0], rows[1:]


def write_summary(path: str | Path, items: dict) -> None:
    """``key = value`` block, one entry per line, keys in insertion order."""
    text = "".join(f"{k} = {fmt(v) if not isinstance(v, (dict, list)) else canonical_json(v)}\n"
                   for k, v in items.items())
    Path(path).write_text(text, newline="\n")


def read_summary(path: str | Path) -> dict:
    out = {}
    for ln in Path(path).read_text().splitlines():
        if "=" in ln and not ln.startswith("#"):
            k, v = ln.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def write_pgm(path: str | Path, image: np.ndarray, comments: Sequence[str] = ()) -> None:
    """Binary greyscale P5, max value 255."""
    img = np.asarray(image, dtype=np.uint8)
    h, w = img.shape
    head = "P5\n" + "".join(f"# {c}\n" for c in comments) + f"{w} {h}\n255\n"
    Path(path).write_bytes(head.encode() + img.tobytes())


def write_ppm(path: str | Path, image: np.ndarray, comments: Sequence[str] = ()) -> None:
    """Binary colour P6, max value 255; ``image`` has shape (h, w, 3)."""
    img = np.asarray(image, dtype=np.uint8)
    h, w, _ = img.shape
    head = "P6\n" + "".join(f"# {c}\n" for c in comments) + f"{w} {h}\n255\n"
    Path(path).write_bytes(head.encode() + img.tobytes())


def read_pnm(path: str | Path) -> tuple[str, list[str], np.ndarray]:
    """Parse a P5/P6 file written by :func:`write_pgm` / :func:`write_ppm`."""
    raw = Path(path).read_bytes()
    pos = 0
    tokens: list[str] = []
    comments: list[str] = []
    while len(tokens) < 4:
        end = raw.index(b"\n", pos)
        line = raw[pos:end].decode()
        pos = end + 1
        if line.startswith("#"):
            comments.append(line[1:].strip())
        else:
            tokens.extend(line.split())
    magic, w, h = tokens[0], int(tokens[1]), int(tokens[2])
    data = np.frombuffer(raw[pos:], dtype=np.uint8)
    img = data.reshape(h, w) if magic == "P5" else data.reshape(h, w, 3)
    return magic, comments, img
