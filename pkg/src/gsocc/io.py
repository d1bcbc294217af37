"""File formats for scenes, Gaussian sets, grids, parameters and reports.

Every file is a single JSON object::

    {"schema": "gsocc/1", "kind": <kind>, ...header fields...,
     "arrays": {name: {"dtype": "<f8", "shape": [...], "data": <base64>}}}

Array payloads are the raw little-endian bytes (C order) of the array,
base64 encoded, so float64 data round-trips bit-exactly. Gaussian arrays
carry the layout offsets of the flat property vector
``[mean 3 | scale 3 | rotation 4 | opacity 1 | semantics d | feature F]``.
Grids store class ids as ``<i8`` in (X, Y, Z) order.
"""

from __future__ import annotations

import base64
import json
import os
from pathlib import Path

import numpy as np

from .exceptions import InvalidInputError
from .scene import GaussianSet, GridSpec, SemanticTaxonomy, VoxelGrid

SCHEMA = "gsocc/1"
_DTYPES = {"<f8", "<f4", "<i8", "<i4"}


def encode_array(a: np.ndarray, dtype: str | None = None) -> dict:
    a = np.asarray(a)
    dt = np.dtype(dtype or a.dtype.str).newbyteorder("<")
    if dt.str not in _DTYPES:
        raise InvalidInputError(f"unsupported array dtype {dt.str}")
    raw = np.ascontiguousarray(a, dtype=dt).tobytes()
    return {"dtype": dt.str, "shape": list(a.shape), "data": base64.b64encode(raw).decode("ascii")}


def decode_array(obj: dict) -> np.ndarray:
    try:
        dt = np.dtype(obj["dtype"])
        shape = tuple(int(s) for s in obj["shape"])
        raw = base64.b64decode(obj["data"], validate=True)
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidInputError(f"malformed array record: {exc}") from exc
    if dt.str not in _DTYPES:
        raise InvalidInputError(f"unsupported array dtype {dt.str}")
    if len(raw) != dt.itemsize * int(np.prod(shape, dtype=np.int64)):
        raise InvalidInputError("array payload size does not match its shape")
    return np.frombuffer(raw, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))


def _write(path, obj: dict) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, sort_keys=True))
    os.replace(tmp, path)


def _read(path, kind: str | None = None) -> dict:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"{path}: not a JSON file ({exc})") from exc
    if not isinstance(obj, dict) or obj.get("schema") != SCHEMA:
        raise InvalidInputError(f"{path}: unknown schema {obj.get('schema') if isinstance(obj, dict) else None!r}")
    if kind is not None and obj.get("kind") != kind:
        raise InvalidInputError(f"{path}: expected a {kind} file, found {obj.get('kind')!r}")
    return obj


# --- records ------------------------------------------------------------------------------


def gaussians_record(G: GaussianSet, dtype: str = "<f8") -> dict:
    return {"N": G.N, "d": G.d, "F": G.F, "layout": G.layout.offsets(),
            "array": encode_array(G.data, dtype)}


def gaussians_from_record(rec: dict) -> GaussianSet:
    G = GaussianSet(decode_array(rec["array"]).astype(np.float64), int(rec["d"]), int(rec["F"]))
    if G.layout.offsets() != rec.get("layout", G.layout.offsets()):
        raise InvalidInputError("stored layout offsets disagree with d and F")
    return G


def grid_record(grid: VoxelGrid) -> dict:
    return {"spec": grid.spec.to_dict(), "classes": encode_array(grid.classes, "<i8")}


def grid_from_record(rec: dict) -> VoxelGrid:
    spec = GridSpec.from_dict(rec["spec"])
    return VoxelGrid(spec, decode_array(rec["classes"]).reshape(spec.dims))


# --- files --------------------------------------------------------------------------------


def save_scene(path, init: GaussianSet, gt: VoxelGrid, taxonomy: SemanticTaxonomy,
               meta: dict | None = None) -> None:
    _write(path, {"schema": SCHEMA, "kind": "scene", "taxonomy": taxonomy.to_dict(),
                  "gaussians": gaussians_record(init), "grid": grid_record(gt), "meta": meta or {}})


def load_scene(path):
    """Returns ``(init, gt, taxonomy)``."""
    obj = _read(path, "scene")
    return (gaussians_from_record(obj["gaussians"]), grid_from_record(obj["grid"]),
            SemanticTaxonomy.from_dict(obj["taxonomy"]))


def save_gaussians(path, G: GaussianSet, taxonomy: SemanticTaxonomy | None = None,
                   dtype: str = "<f8") -> None:
    obj = {"schema": SCHEMA, "kind": "gaussians", "gaussians": gaussians_record(G, dtype)}
    if taxonomy is not None:
        obj["taxonomy"] = taxonomy.to_dict()
    _write(path, obj)


def load_gaussians(path) -> GaussianSet:
    return gaussians_from_record(_read(path, "gaussians")["gaussians"])


def save_grid(path, grid: VoxelGrid) -> None:
    _write(path, {"schema": SCHEMA, "kind": "grid", "grid": grid_record(grid)})


def load_grid(path) -> VoxelGrid:
    return grid_from_record(_read(path, "grid")["grid"])


def save_params(path, params: dict, meta: dict | None = None) -> None:
    _write(path, {"schema": SCHEMA, "kind": "params", "meta": meta or {},
                  "arrays": {k: encode_array(v, "<f8") for k, v in sorted(params.items())}})


def load_params(path) -> dict:
    return {k: decode_array(v) for k, v in _read(path, "params")["arrays"].items()}


def save_json(path, kind: str, payload: dict) -> None:
    _write(path, {"schema": SCHEMA, "kind": kind, "payload": payload})


def load_json(path, kind: str) -> dict:
    return _read(path, kind)["payload"]


# --- exports ------------------------------------------------------------------------------


def export_csv(path, grid: VoxelGrid, skip_class: int | None = None) -> int:
    """One ``i,j,k,x,y,z,class`` row per voxel; returns the row count."""
    centers = grid.spec.centers()
    ijk = np.indices(grid.spec.dims).reshape(3, -1).T
    cls = grid.classes.ravel()
    keep = np.ones(cls.size, bool) if skip_class is None else cls != skip_class
    rows = np.column_stack([ijk[keep], centers[keep], cls[keep]])
    header = "i,j,k,x,y,z,class"
    np.savetxt(path, rows, delimiter=",", header=header, comments="",
               fmt=["%d", "%d", "%d", "%.6f", "%.6f", "%.6f", "%d"])
    return int(keep.sum())


def export_pgm(directory, grid: VoxelGrid, n_classes: int, axis: int = 2, prefix: str = "slice") -> list:
    """Binary PGM heatmap per slice along ``axis`` (class id scaled to 0..255)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    scale = 255 // max(n_classes - 1, 1)
    vol = np.moveaxis(grid.classes, axis, 0)
    paths = []
    for i, sl in enumerate(vol):
        img = (sl.T[::-1] * scale).astype(np.uint8)  # rows top-to-bottom
        p = directory / f"{prefix}_{i:03d}.pgm"
        with open(p, "wb") as fh:
            fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
            fh.write(img.tobytes())
        paths.append(p)
    return paths
