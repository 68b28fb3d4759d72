"""Persistence: tensor-field snapshots, CSV tables and configuration files.

Snapshots (``.tfs``) are a short text header of ``key=value`` lines ended by
a line ``data``, followed by the components as little-endian float64 in
row-major order.  Every writer goes through a temporary file and an atomic
rename, so readers never see half-written artifacts.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .grid import Grid

__all__ = [
    "TFS_MAGIC",
    "write_tfs",
    "read_tfs",
    "write_csv",
    "read_csv",
    "write_text",
    "load_config",
    "format_number",
]

TFS_MAGIC = "TFS 1"


def _atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def format_number(x) -> str:
    """17 significant digits for floats (round-trip exact), plain digits for integers."""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.17g}"
    return str(x)


def write_tfs(path, values: np.ndarray, grid: Grid, signature: str = "", **meta) -> None:
    """Write the field ``values`` (components first, then grid axes) to ``path``."""
    values = np.ascontiguousarray(values, dtype="<f8")
    comp = values.shape[: values.ndim - grid.dim]
    if values.shape[len(comp):] != grid.shape:
        raise ValueError(f"field shape {values.shape} does not end with the grid shape {grid.shape}")
    header = {
        "dim": grid.dim,
        "points": grid.points,
        "dx": format_number(grid.dx),
        "origin": ",".join(str(int(i)) for i in grid.origin_index),
        "components": ",".join(str(c) for c in comp),
        "signature": signature,
        "dtype": "<f8",
        "order": "C",
    }
    for key, val in meta.items():
        if any(ch in str(key) + str(val) for ch in "=\n"):
            raise ValueError(f"metadata {key!r} may not contain '=' or newlines")
        header[key] = format_number(val)
    text = TFS_MAGIC + "\n" + "".join(f"{k}={v}\n" for k, v in header.items()) + "data\n"
    _atomic_write(path, text.encode("utf-8") + values.tobytes(order="C"))


def read_tfs(path) -> tuple[Grid, np.ndarray, dict]:
    """Read a snapshot; returns ``(grid, values, header)``."""
    raw = Path(path).read_bytes()
    marker = b"\ndata\n"
    cut = raw.find(marker)
    if not raw.startswith(TFS_MAGIC.encode()) or cut < 0:
        raise ValueError(f"{path} is not a tensor-field snapshot")
    lines = raw[:cut].decode("utf-8").splitlines()[1:]
    header = dict(line.split("=", 1) for line in lines)
    dim, points = int(header["dim"]), int(header["points"])
    origin = tuple(int(i) for i in header["origin"].split(","))
    grid = Grid(dim, points, float(header["dx"]), origin)
    comp = tuple(int(c) for c in header["components"].split(",") if c)
    values = np.frombuffer(raw[cut + len(marker):], dtype="<f8")
    expected = int(np.prod(comp + grid.shape))
    if values.size != expected:
        raise ValueError(f"{path}: expected {expected} values, found {values.size}")
    return grid, values.reshape(comp + grid.shape).copy(), header


def write_csv(path, columns: list[str], rows) -> None:
    lines = [",".join(columns)]
    for row in rows:
        row = list(row)
        if len(row) != len(columns):
            raise ValueError(f"row has {len(row)} entries, expected {len(columns)}")
        lines.append(",".join(format_number(v) for v in row))
    _atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


def read_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path) as fh:
        columns = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return columns, data


def write_text(path, text: str) -> None:
    _atomic_write(path, text.encode("utf-8"))


def _parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if "," in text:
        return [_parse_value(part) for part in text.split(",") if part.strip()]
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def load_config(path) -> dict:
    """Read a JSON object or ``key = value`` lines (``#`` starts a comment)."""
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        data = json.loads(text)
        if not isinstance(data, dict):
            raise ValueError("configuration must be a JSON object")
        return data
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = _parse_value(value)
    return out
