"""Serialization: PPM/PGM/PNG images, raw f32 blobs with JSON sidecars, and
binary little-endian PLY for point clouds and Gaussian splats.

Formats:
  * PPM P6, 8-bit: bit-exact fixtures. Images are (3, H, W) float in [0, 1];
    written as round(x * 255).
  * PGM P5, 16-bit (big-endian per Netpbm): depth in millimeters,
    value = round(meters * 1000) clipped to [0, 65535]. Exact storage for
    arbitrary depths uses the raw f32 path instead.
  * raw f32: <stem>.bin little-endian floats + <stem>.json sidecar
    {"dtype": "<f4", "shape": [...], "kind": ...}.
  * Gaussian PLY follows the common splat-viewer layout: positions, zero
    normals, f_dc_*/f_rest_* SH coefficients (f_rest channel-major), logit
    opacity, log scales, quaternion (w, x, y, z).
"""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DatasetIOError, InputError, dim_error
from .gaussians import GaussianSet
from .pointcloud import PointCloud

# ---------------------------------------------------------------------------
# PPM / PGM / PNG


def _quantize_u8(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise dim_error("image", img.shape, (3, "H", "W"))
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    u8 = _quantize_u8(image)
    _, h, w = u8.shape
    data = u8.transpose(1, 2, 0).tobytes()
    try:
        Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + data)
    except OSError as e:
        raise DatasetIOError(f"cannot write {path}: {e}") from e


def read_ppm(path: str | Path) -> np.ndarray:
    """Returns (3, H, W) float64 in [0, 1]."""
    raw = Path(path).read_bytes()
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if not m:
        raise InputError(f"{path}: not a binary PPM")
    w, h, maxval = int(m.group(1)), int(m.group(2)), int(m.group(3))
    if maxval != 255:
        raise InputError(f"{path}: only 8-bit PPM supported, maxval={maxval}")
    pixels = np.frombuffer(raw[m.end():], dtype=np.uint8, count=w * h * 3)
    return pixels.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def write_png(path: str | Path, image: np.ndarray) -> None:
    u8 = _quantize_u8(image)
    Image.fromarray(u8.transpose(1, 2, 0), mode="RGB").save(str(path))


DEPTH_MM_SCALE = 1000.0


def write_pgm16_depth(path: str | Path, depth_m: np.ndarray) -> None:
    """Depth map in meters -> 16-bit PGM in millimeters."""
    d = np.asarray(depth_m, dtype=np.float64)
    if d.ndim != 2:
        raise dim_error("depth", d.shape, ("H", "W"))
    mm = np.round(np.clip(d * DEPTH_MM_SCALE, 0, 65535)).astype(">u2")
    h, w = d.shape
    Path(path).write_bytes(b"P5\n%d %d\n65535\n" % (w, h) + mm.tobytes())


def read_pgm16_depth(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if not m:
        raise InputError(f"{path}: not a binary PGM")
    w, h, maxval = int(m.group(1)), int(m.group(2)), int(m.group(3))
    if maxval != 65535:
        raise InputError(f"{path}: expected 16-bit PGM, maxval={maxval}")
    mm = np.frombuffer(raw[m.end():], dtype=">u2", count=w * h).reshape(h, w)
    return mm.astype(np.float64) / DEPTH_MM_SCALE


# ---------------------------------------------------------------------------
# raw f32 + sidecar


def write_f32(stem: str | Path, array: np.ndarray, kind: str = "array",
              meta: dict | None = None) -> None:
    stem = Path(stem)
    arr = np.asarray(array, dtype=np.float64)
    sidecar = {"dtype": "<f4", "shape": list(arr.shape), "kind": kind}
    if meta:
        sidecar.update(meta)
    try:
        stem.with_suffix(stem.suffix + ".bin").write_bytes(arr.astype("<f4").tobytes())
        stem.with_suffix(stem.suffix + ".json").write_text(json.dumps(sidecar))
    except OSError as e:
        raise DatasetIOError(f"cannot write {stem}: {e}") from e


def read_f32(stem: str | Path) -> tuple[np.ndarray, dict]:
    stem = Path(stem)
    try:
        sidecar = json.loads(stem.with_suffix(stem.suffix + ".json").read_text())
        blob = stem.with_suffix(stem.suffix + ".bin").read_bytes()
    except OSError as e:
        raise DatasetIOError(f"cannot read {stem}: {e}") from e
    if sidecar.get("dtype") != "<f4":
        raise InputError(f"{stem}: unsupported dtype {sidecar.get('dtype')}")
    arr = np.frombuffer(blob, dtype="<f4").reshape(sidecar["shape"]).astype(np.float64)
    return arr, sidecar


# ---------------------------------------------------------------------------
# PLY (binary little-endian, vertex element only)

_PLY_TYPES = {"float": "<f4", "int": "<i4", "uchar": "u1"}
_PLY_NAMES = {v: k for k, v in _PLY_TYPES.items()}


def write_ply(path: str | Path, props: list[tuple[str, np.ndarray]]) -> None:
    """props: ordered (name, 1-D array) pairs, all of equal length."""
    n = props[0][1].shape[0]
    cols = []
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    for name, arr in props:
        arr = np.asarray(arr)
        if arr.shape != (n,):
            raise dim_error(f"ply property {name}", arr.shape, (n,))
        if arr.dtype.kind == "f":
            dt = "<f4"
        elif arr.dtype == np.uint8:
            dt = "u1"
        else:
            dt = "<i4"
        header.append(f"property {_PLY_NAMES[dt]} {name}")
        cols.append(arr.astype(dt))
    header.append("end_header")
    rec = np.rec.fromarrays(cols, names=[p[0] for p in props])
    try:
        Path(path).write_bytes("\n".join(header).encode() + b"\n" + rec.tobytes())
    except OSError as e:
        raise DatasetIOError(f"cannot write {path}: {e}") from e


def read_ply(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise InputError(f"{path}: not a PLY file")
    names, dtypes, n = [], [], 0
    for line in raw[:end].decode().splitlines():
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts and parts[0] == "property":
            if parts[1] not in _PLY_TYPES:
                raise InputError(f"{path}: unsupported property type {parts[1]}")
            dtypes.append(_PLY_TYPES[parts[1]])
            names.append(parts[2])
        elif parts[:2] == ["format", "binary_big_endian"]:
            raise InputError(f"{path}: big-endian PLY not supported")
    rec = np.frombuffer(raw[end + len(b"end_header\n"):], count=n,
                        dtype=np.dtype({"names": names, "formats": dtypes}))
    return {name: np.array(rec[name]) for name in names}


def save_points_ply(path: str | Path, cloud: PointCloud) -> None:
    pos = cloud.positions
    props: list[tuple[str, np.ndarray]] = [
        ("x", pos[:, 0]), ("y", pos[:, 1]), ("z", pos[:, 2])]
    if cloud.colors is not None:
        u8 = np.round(np.clip(cloud.colors, 0, 1) * 255).astype(np.uint8)
        props += [("red", u8[:, 0]), ("green", u8[:, 1]), ("blue", u8[:, 2])]
    if cloud.labels is not None:
        props.append(("label", cloud.labels.astype(np.int32)))
    write_ply(path, props)


def load_points_ply(path: str | Path) -> PointCloud:
    d = read_ply(path)
    pos = np.stack([d["x"], d["y"], d["z"]], axis=1).astype(np.float64)
    colors = None
    if "red" in d:
        colors = np.stack([d["red"], d["green"], d["blue"]], axis=1).astype(np.float64) / 255.0
    labels = d["label"].astype(np.int64) if "label" in d else None
    return PointCloud(positions=pos, colors=colors, labels=labels)


def save_gaussians_ply(path: str | Path, g: GaussianSet) -> None:
    """Splat-viewer compatible export (logit opacity, log scales)."""
    eps = 1e-9
    op = np.clip(g.opacities, eps, 1 - eps)
    props: list[tuple[str, np.ndarray]] = [
        ("x", g.means[:, 0]), ("y", g.means[:, 1]), ("z", g.means[:, 2]),
        ("nx", np.zeros(len(g))), ("ny", np.zeros(len(g))), ("nz", np.zeros(len(g))),
    ]
    for c in range(3):
        props.append((f"f_dc_{c}", g.sh[:, c, 0]))
    for c in range(3):
        for b in range(3):
            props.append((f"f_rest_{c * 3 + b}", g.sh[:, c, b + 1]))
    props.append(("opacity", np.log(op / (1 - op))))
    for i in range(3):
        props.append((f"scale_{i}", np.log(g.scales[:, i])))
    for i in range(4):
        props.append((f"rot_{i}", g.quats[:, i]))
    write_ply(path, props)


def load_gaussians_ply(path: str | Path) -> GaussianSet:
    d = read_ply(path)
    n = d["x"].shape[0]
    sh = np.zeros((n, 3, 4))
    for c in range(3):
        sh[:, c, 0] = d[f"f_dc_{c}"]
        for b in range(3):
            sh[:, c, b + 1] = d[f"f_rest_{c * 3 + b}"]
    quats = np.stack([d[f"rot_{i}"] for i in range(4)], axis=1).astype(np.float64)
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    return GaussianSet(
        means=np.stack([d["x"], d["y"], d["z"]], axis=1),
        scales=np.exp(np.stack([d[f"scale_{i}"] for i in range(3)], axis=1)),
        quats=quats,
        opacities=1.0 / (1.0 + np.exp(-d["opacity"].astype(np.float64))),
        sh=sh,
    )
