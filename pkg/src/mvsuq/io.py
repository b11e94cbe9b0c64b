"""File formats: camera manifests, images, DMAP rasters, PLY clouds, UQ tables, CSV reports."""

import csv
import hashlib
import json
import logging
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError
from .fusion import DepthMap, PointCloud
from .geom import CameraView
from .uq import GammaModel, UqTable

log = logging.getLogger(__name__)


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_text(path, text):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def write_json(path, obj):
    write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read JSON {path}: {exc}") from exc


# --------------------------------------------------------------------------- images


def to_luma(rgb):
    """``round(0.299 R + 0.587 G + 0.114 B)`` with halves rounded up."""
    rgb = np.asarray(rgb, dtype=np.float64)
    y = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    return np.clip(np.floor(y + 0.5), 0, 255).astype(np.uint8)


def read_image(path):
    """Grayscale uint8 raster from a PNG/PGM file (RGB is luma-converted)."""
    from PIL import Image

    try:
        with Image.open(path) as im:
            mode = im.mode
            if mode in ("RGB", "RGBA", "P"):
                return to_luma(np.asarray(im.convert("RGB")))
            if mode == "L":
                return np.asarray(im, dtype=np.uint8).copy()
            if mode in ("I;16", "I;16B", "I"):
                a = np.asarray(im, dtype=np.float64)
                return np.clip(np.floor(a / 257.0 + 0.5), 0, 255).astype(np.uint8)
            return np.asarray(im.convert("L"), dtype=np.uint8).copy()
    except OSError as exc:
        raise InputError(f"cannot read image {path}: {exc}") from exc


def write_image(path, raster):
    from PIL import Image

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(raster, dtype=np.uint8)).save(path)


# --------------------------------------------------------------------------- manifest


def view_to_dict(view):
    d = {
        "image_id": int(view.image_id),
        "image_path": view.image_path,
        "width": int(view.width),
        "height": int(view.height),
        "fx": float(view.focal_x),
        "fy": float(view.focal_y),
        "cx": float(view.principal_x),
        "cy": float(view.principal_y),
        "rotation": [float(v) for v in view.rotation.reshape(-1)],
        "center": [float(v) for v in view.center],
    }
    if view.depth_prior is not None:
        d["depth_prior"] = [float(v) for v in view.depth_prior]
    return d


def view_from_dict(d, raster=None):
    try:
        prior = d.get("depth_prior")
        return CameraView(
            int(d["image_id"]), int(d["width"]), int(d["height"]),
            float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
            np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3),
            np.asarray(d["center"], dtype=np.float64),
            raster, None if prior is None else (float(prior[0]), float(prior[1])),
            d.get("image_path"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, InputError):
            raise
        raise InputError(f"bad manifest entry {d.get('image_id', '?')}: {exc}") from exc


def save_manifest(path, views):
    write_json(path, {"views": [view_to_dict(v) for v in views]})


def load_manifest(path, load_images=True):
    """Views of a manifest; image paths are resolved relative to the manifest."""
    data = read_json(path)
    entries = data.get("views") if isinstance(data, dict) else data
    if not isinstance(entries, list):
        raise InputError(f"{path}: manifest must hold a list of views")
    root = Path(path).parent
    views = []
    for d in entries:
        raster = None
        if load_images and d.get("image_path"):
            raster = read_image(root / d["image_path"])
        views.append(view_from_dict(d, raster))
    ids = [v.image_id for v in views]
    if len(set(ids)) != len(ids):
        raise InputError(f"{path}: duplicate image ids")
    return views


# --------------------------------------------------------------------------- DMAP

DMAP_MAGIC = b"DMAP1"
DMAP_HEADER = struct.Struct("<IIBff")
KIND_DISPARITY = 0
KIND_DEPTH = 1


@dataclass(frozen=True, eq=False)
class Dmap:
    values: np.ndarray   # (H, W) float32, NaN invalid
    energy: np.ndarray   # (H, W) float32
    kind: int
    d_min: float
    d_max: float


def write_dmap(path, values, energy, kind=KIND_DEPTH, d_min=None, d_max=None):
    """Write a DMAP raster. ``d_min``/``d_max`` default to the valid value range."""
    v = np.ascontiguousarray(values, dtype="<f4")
    e = np.ascontiguousarray(energy, dtype="<f4")
    if v.ndim != 2 or v.shape != e.shape:
        raise InputError("DMAP values and energy must be matching 2-D arrays")
    if d_min is None or d_max is None:
        fin = v[np.isfinite(v)]
        d_min, d_max = (float(fin.min()), float(fin.max())) if fin.size else (0.0, 0.0)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    H, W = v.shape
    with open(path, "wb") as fh:
        fh.write(DMAP_MAGIC)
        fh.write(DMAP_HEADER.pack(W, H, int(kind), float(d_min), float(d_max)))
        fh.write(v.tobytes())
        fh.write(e.tobytes())


def read_dmap(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    n0 = len(DMAP_MAGIC)
    if raw[:n0] != DMAP_MAGIC:
        raise InputError(f"{path}: not a DMAP1 file")
    W, H, kind, d_min, d_max = DMAP_HEADER.unpack_from(raw, n0)
    off = n0 + DMAP_HEADER.size
    n = W * H
    if len(raw) != off + 8 * n:
        raise InputError(f"{path}: truncated DMAP ({len(raw)} bytes, expected {off + 8 * n})")
    v = np.frombuffer(raw, "<f4", n, off).reshape(H, W).astype(np.float32)
    e = np.frombuffer(raw, "<f4", n, off + 4 * n).reshape(H, W).astype(np.float32)
    return Dmap(v, e, kind, d_min, d_max)


def write_depth_map(path, dm):
    write_dmap(path, dm.depth, dm.dim_energy, KIND_DEPTH)


def read_depth_map(path, image_id, neighbor_id=None):
    d = read_dmap(path)
    if d.kind != KIND_DEPTH:
        raise InputError(f"{path}: expected a depth raster, found kind {d.kind}")
    return DepthMap(image_id, neighbor_id, d.values.astype(np.float64), d.energy.astype(np.float64))


def quantize_depth_map(dm):
    """The map as it reads back from a DMAP file (float32 precision)."""
    return DepthMap(dm.image_id, dm.neighbor_id,
                    dm.depth.astype(np.float32).astype(np.float64),
                    dm.dim_energy.astype(np.float32).astype(np.float64))


# --------------------------------------------------------------------------- PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
EXTRA_ORDER = ("error_m", "predicted_error_mean_px", "predicted_error_std_px")


def _ply_columns(cloud):
    cols = [("x", "double", cloud.positions[:, 0]),
            ("y", "double", cloud.positions[:, 1]),
            ("z", "double", cloud.positions[:, 2])]
    if cloud.source_image is not None:
        cols.append(("source_image", "uint", cloud.source_image))
    if cloud.source_pixel is not None:
        cols.append(("source_row", "int", cloud.source_pixel[:, 0]))
        cols.append(("source_col", "int", cloud.source_pixel[:, 1]))
    if cloud.num_rays is not None:
        cols.append(("num_rays", "uchar", cloud.num_rays))
    if cloud.median_angle is not None:
        cols.append(("median_angle_deg", "float", cloud.median_angle))
    if cloud.energy is not None:
        cols.append(("dim_energy", "float", cloud.energy))
    names = [k for k in EXTRA_ORDER if k in cloud.extra]
    names += sorted(k for k in cloud.extra if k not in EXTRA_ORDER)
    for k in names:
        cols.append((k, "float", cloud.extra[k]))
    return cols


def write_ply(path, cloud, comments=()):
    """Binary little-endian PLY. ``pair_ids`` is a fixed-length list padded with -1."""
    cols = _ply_columns(cloud)
    n = len(cloud)
    fields = [(name, "<" + _PLY_TYPES[t]) for name, t, _ in cols]
    header = ["ply", "format binary_little_endian 1.0"]
    header += [f"comment {c}" for c in comments]
    header += [f"comment frame {cloud.frame}", f"element vertex {n}"]
    header += [f"property {t} {name}" for name, t, _ in cols]
    m = 0
    if cloud.pair_ids is not None:
        m = cloud.pair_ids.shape[1]
        header.append("property list uchar int pair_ids")
        fields += [("pair_ids_count", "u1"), ("pair_ids", "<i4", (m,))]
    header.append("end_header")
    rec = np.zeros(n, dtype=np.dtype(fields))
    for name, _, data in cols:
        rec[name] = data
    if m:
        rec["pair_ids_count"] = m
        rec["pair_ids"] = cloud.pair_ids
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(rec.tobytes())


def _parse_ply_header(fh, path):
    if fh.readline().strip() != b"ply":
        raise InputError(f"{path}: not a PLY file")
    fmt, frame, elements = None, "world", []
    while True:
        line = fh.readline()
        if not line:
            raise InputError(f"{path}: unterminated PLY header")
        tok = line.decode("ascii", "replace").split()
        if not tok:
            continue
        if tok[0] == "end_header":
            break
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "comment" and len(tok) >= 3 and tok[1] == "frame":
            frame = tok[2]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise InputError(f"{path}: property before element")
            if tok[1] == "list":
                elements[-1][2].append((tok[4], _PLY_TYPES[tok[3]], _PLY_TYPES[tok[2]]))
            else:
                elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]], None))
    if fmt != "binary_little_endian":
        raise InputError(f"{path}: only binary_little_endian PLY is supported (got {fmt})")
    return frame, elements


def read_ply(path):
    """Read a cloud written by :func:`write_ply` or any binary PLY with x, y, z.

    Missing optional properties are left as ``None``; unknown scalar properties
    go to ``extra``. List properties must have a constant length.
    """
    with open(path, "rb") as fh:
        frame, elements = _parse_ply_header(fh, path)
        body = fh.read()
    offset = 0
    data = None
    for name, count, props in elements:
        fields, peek = [], offset
        for pname, ptype, ctype in props:
            if ctype is None:
                fields.append((pname, "<" + ptype))
                peek += np.dtype(ptype).itemsize
            else:
                m = int(np.frombuffer(body, ctype, 1, peek)[0]) if count else 0
                fields += [(pname + "__count", "<" + ctype), (pname, "<" + ptype, (m,))]
                peek += np.dtype(ctype).itemsize + m * np.dtype(ptype).itemsize
        dt = np.dtype(fields)
        if len(body) < offset + count * dt.itemsize:
            raise InputError(f"{path}: truncated PLY body")
        rec = np.frombuffer(body, dt, count, offset)
        offset += count * dt.itemsize
        for pname, _, ctype in props:
            if ctype is not None and count and np.any(rec[pname + "__count"] != rec[pname + "__count"][0]):
                raise InputError(f"{path}: variable-length list property {pname} is not supported")
        if name == "vertex":
            data = rec
    if data is None:
        raise InputError(f"{path}: no vertex element")
    names = set(data.dtype.names)
    if not {"x", "y", "z"} <= names:
        raise InputError(f"{path}: vertex element lacks x/y/z")
    pos = np.stack([data["x"], data["y"], data["z"]], axis=1).astype(np.float64)

    def col(key, dtype):
        return data[key].astype(dtype) if key in names else None

    pixel = None
    if "source_row" in names and "source_col" in names:
        pixel = np.stack([data["source_row"], data["source_col"]], axis=1).astype(np.int64)
    pair_ids = data["pair_ids"].astype(np.int32) if "pair_ids" in names else None
    known = {"x", "y", "z", "source_image", "source_row", "source_col", "num_rays",
             "median_angle_deg", "dim_energy", "pair_ids", "pair_ids__count"}
    extra = {k: data[k].astype(np.float64) for k in data.dtype.names
             if k not in known and not k.endswith("__count") and data[k].ndim == 1}
    return PointCloud(
        pos, col("source_image", np.int64), pixel, col("num_rays", np.int64),
        col("median_angle_deg", np.float64), col("dim_energy", np.float64), pair_ids,
        frame=frame, extra=extra,
    )


# --------------------------------------------------------------------------- UQ table


def uq_table_to_dict(table):
    return {
        "bin_size": table.bin_size,
        "min_samples": table.min_samples,
        "bins": [
            {"e_lo": m.e_lo, "e_hi": m.e_hi, "shape": m.shape, "scale": m.scale,
             "mean_px": m.mean, "std_px": m.std, "count": m.sample_count,
             "clamped": m.clamped, "merged": m.merged}
            for m in table.models
        ],
    }


def uq_table_from_dict(d):
    try:
        models = tuple(
            GammaModel(float(b["shape"]), float(b["scale"]), float(b["e_lo"]), float(b["e_hi"]),
                       int(b["count"]), int(b.get("clamped", 0)), bool(b["merged"]))
            for b in d["bins"]
        )
        return UqTable(float(d["bin_size"]), int(d["min_samples"]), models)
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"bad UQ table: {exc}") from exc


def save_uq_table(path, table):
    write_json(path, uq_table_to_dict(table))


def load_uq_table(path):
    return uq_table_from_dict(read_json(path))


# --------------------------------------------------------------------------- CSV reports


def fmt(value):
    """6 significant digits; empty for missing values."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    v = float(value)
    if math.isnan(v):
        return ""
    return "%.6g" % v


def write_csv(path, header, rows, comments=()):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if not isinstance(v, str) else v for v in row])


STD_NOTE = "std_m is the population standard deviation"


def write_binned_csv(path, stats_list):
    """One row per bin of each :class:`~mvsuq.evaluate.BinnedErrorStats`."""
    rows = []
    for st in stats_list:
        for lo, hi, mae, std, count, prop in st.rows():
            rows.append((st.metric_name, lo, hi, mae, std, count, prop))
    write_csv(path, ["metric", "bin_lo", "bin_hi", "MAE_m", "std_m", "count", "proportion"], rows, [STD_NOTE])


def file_listing(root):
    """Sorted relative paths of every file below ``root``."""
    root = Path(root)
    out = []
    for dirpath, _, files in os.walk(root):
        for f in files:
            out.append(str((Path(dirpath) / f).relative_to(root)))
    return sorted(out)
