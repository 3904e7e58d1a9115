"""Raw/JSON and CSV serialization for fields, bivariate fields and sinograms."""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import NotFound, UnsupportedFormat
from .spectral import Field, Grid

FIELD_CSV_HEADER = ["index", "x1", "x2", "x3", "value"]


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def write_raw(path, array: np.ndarray, meta: dict) -> Path:
    """Little-endian float64 raw dump plus a JSON sidecar next to it."""
    path = Path(path).with_suffix(".raw")
    path.parent.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(array, dtype="<f8").tofile(path)
    _sidecar(path).write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    return path


def read_raw(path) -> tuple[np.ndarray, dict]:
    path = Path(path).with_suffix(".raw")
    if not path.exists():
        raise NotFound(str(path))
    meta = json.loads(_sidecar(path).read_text())
    data = np.fromfile(path, dtype="<f8")
    if "shape" in meta:
        data = data.reshape(meta["shape"])
    return data, meta


def save_field(path, u: Field, name: str | None = None) -> Path:
    g = u.grid
    meta = {"kind": "field", "n": g.n, "N": g.N, "L": g.L, "name": name or u.name}
    return write_raw(path, u.values, meta)


def load_field(path) -> Field:
    data, meta = read_raw(path)
    g = Grid(meta["n"], meta["N"], meta["L"])
    return Field(g, data.reshape(g.shape), meta.get("name", ""))


def field_csv(path, u: Field) -> Path:
    g = u.grid
    path = Path(path)
    header = FIELD_CSV_HEADER[: 1 + g.n] + ["value"]
    idx = np.indices(g.shape).reshape(g.n, -1).T
    x = g.x
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, (ijk, val) in enumerate(zip(idx, u.flat)):
            w.writerow([i, *(repr(float(x[j])) for j in ijk), repr(float(val))])
    return path


def write_csv(path, header: list, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return path


def export(artifact, fmt: str, out=None) -> Path:
    """Convert a raw artifact (with sidecar) to csv, or copy it as raw."""
    if fmt not in ("csv", "raw"):
        raise UnsupportedFormat(f"format {fmt!r}; expected csv or raw")
    src = Path(artifact)
    if src.suffix not in (".raw", ".json", ""):
        raise UnsupportedFormat(f"cannot export {src.name}; expected a .raw artifact")
    src = src.with_suffix(".raw")
    if not src.exists():
        raise NotFound(str(src))
    data, meta = read_raw(src)
    kind = meta.get("kind", "field")
    if fmt == "raw":
        dest = Path(out) if out else src.with_name(src.stem + ".export.raw")
        return write_raw(dest, data, meta)
    dest = Path(out) if out else src.with_suffix(".csv")
    if kind == "field":
        return field_csv(dest, load_field(src))
    if kind == "sinogram":
        vals = data.reshape(meta["shape"])
        offsets = np.asarray(meta["offsets"])
        rows = []
        for di in range(vals.shape[0]):
            for oi in np.ndindex(vals.shape[1:]):
                off = [offsets[k] for k in oi]
                rows.append([di, ";".join(repr(float(o)) for o in off), repr(float(vals[(di, *oi)]))])
        return write_csv(dest, ["direction_id", "offset", "value"], rows)
    if kind == "bivariate":
        N = meta["N"]
        vals = data.reshape(N ** meta["n"], N ** meta["n"], -1)
        rows = ([i, j, c, repr(float(vals[i, j, c]))] for i in range(vals.shape[0]) for j in range(vals.shape[1]) for c in range(vals.shape[2]))
        return write_csv(dest, ["x_index", "y_index", "component", "value"], rows)
    if kind == "dnmatrix":
        vals = data.reshape(meta["shape"])
        rows = ([i, j, repr(float(vals[i, j]))] for i in range(vals.shape[0]) for j in range(vals.shape[1]))
        return write_csv(dest, ["i", "j", "value"], rows)
    raise UnsupportedFormat(f"unknown artifact kind {kind!r}")
