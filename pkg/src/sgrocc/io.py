"""Binary and text artifacts: GPOOL1 pool snapshots, SVOX1 grids, PGM depth, CSV."""

from __future__ import annotations

import csv
import io
import math
import re
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .geometry import VoxelGridSpec
from .memory import GaussianPool
from .metrics import SemanticVoxelGrid
from .scene_sim import N_CLASSES

GPOOL_MAGIC = b"GPOOL1"
SVOX_MAGIC = b"SVOX1"

_PRIM = np.dtype(
    [
        ("id", "<u8"),
        ("pos", "<f4", (3,)),
        ("scale", "<f4"),
        ("logits", "<f4", (N_CLASSES,)),
        ("tag", "<f4"),
        ("conf", "<f4"),
    ]
)


def pool_to_bytes(pool: GaussianPool) -> bytes:
    rec = np.zeros(len(pool), dtype=_PRIM)
    rec["id"] = pool.ids
    rec["pos"] = pool.positions
    rec["scale"] = pool.scales
    rec["logits"] = pool.logits
    rec["tag"] = pool.tags
    rec["conf"] = pool.confidence
    return GPOOL_MAGIC + struct.pack("<I", len(pool)) + rec.tobytes()


def pool_from_bytes(data: bytes, grid: VoxelGridSpec | None = None) -> GaussianPool:
    """Parse a GPOOL1 blob.  Values come back at f32 precision."""
    n0 = len(GPOOL_MAGIC)
    if data[:n0] != GPOOL_MAGIC or len(data) < n0 + 4:
        raise FormatError("not a GPOOL1 snapshot")
    (n,) = struct.unpack_from("<I", data, n0)
    body = data[n0 + 4 :]
    if len(body) != n * _PRIM.itemsize:
        raise FormatError(f"GPOOL1 body is {len(body)} bytes, expected {n * _PRIM.itemsize}")
    rec = np.frombuffer(body, dtype=_PRIM)
    ids = rec["id"].astype(np.int64)
    return GaussianPool(
        grid=grid or VoxelGridSpec(),
        ids=ids,
        positions=rec["pos"].astype(np.float64),
        scales=rec["scale"].astype(np.float64),
        logits=rec["logits"].astype(np.float64),
        tags=rec["tag"].astype(np.float64),
        confidence=rec["conf"].astype(np.float64),
        next_id=int(ids.max()) + 1 if n else 0,
    )


def grid_to_bytes(grid: SemanticVoxelGrid) -> bytes:
    s = grid.spec
    head = SVOX_MAGIC + struct.pack("<3I", *s.dims) + struct.pack("<3f", *s.origin) + struct.pack("<f", s.resolution)
    # x-fastest order is Fortran order for an (nx, ny, nz) array
    return head + np.asarray(grid.labels, dtype=np.uint8).tobytes(order="F")


def grid_from_bytes(data: bytes) -> SemanticVoxelGrid:
    n0 = len(SVOX_MAGIC)
    if data[:n0] != SVOX_MAGIC or len(data) < n0 + 28:
        raise FormatError("not an SVOX1 grid")
    dims = struct.unpack_from("<3I", data, n0)
    origin = struct.unpack_from("<3f", data, n0 + 12)
    (res,) = struct.unpack_from("<f", data, n0 + 24)
    body = data[n0 + 28 :]
    if len(body) != math.prod(dims):
        raise FormatError(f"SVOX1 body is {len(body)} bytes, expected {math.prod(dims)}")
    labels = np.frombuffer(body, dtype=np.uint8).reshape(dims, order="F")
    spec = VoxelGridSpec(tuple(float(o) for o in origin), tuple(int(d) for d in dims), float(res))
    return SemanticVoxelGrid(spec, labels.copy())


def depth_to_pgm(depth: np.ndarray) -> bytes:
    """16-bit binary PGM in millimeters; no-hit pixels are written as 0."""
    mm = np.where(np.isfinite(depth), np.clip(np.rint(depth * 1000.0), 0, 65535), 0).astype(">u2")
    H, W = depth.shape
    return f"P5\n{W} {H}\n65535\n".encode() + mm.tobytes()


def image_to_pgm(img: np.ndarray) -> bytes:
    """8-bit binary PGM of a non-negative image scaled so its maximum is 255."""
    a = np.nan_to_num(np.asarray(img, dtype=np.float64), nan=0.0, posinf=0.0)
    top = a.max() if a.size else 0.0
    q = np.clip(np.rint(a / top * 255.0), 0, 255) if top > 0 else np.zeros_like(a)
    H, W = a.shape
    return f"P5\n{W} {H}\n255\n".encode() + q.astype(np.uint8).tobytes()


def depth_from_pgm(data: bytes) -> np.ndarray:
    """Inverse of ``depth_to_pgm``: meters, +inf where the stored value is 0."""
    # four whitespace-separated header tokens, then exactly one whitespace byte
    m = re.match(rb"(P5)\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise FormatError("malformed PGM header")
    magic, (W, H, M) = m.group(1), (int(g) for g in m.groups()[1:])
    body = data[m.end():]
    if magic != b"P5" or M != 65535 or len(body) != 2 * W * H:
        raise FormatError("expected a 16-bit binary PGM")
    mm = np.frombuffer(body, dtype=">u2").reshape(H, W).astype(np.float64)
    return np.where(mm > 0, mm / 1000.0, np.inf)


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else repr(float(v))
    return str(v)


def rows_to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    keys = list(rows[0])
    w.writerow(keys)
    for r in rows:
        w.writerow([_fmt(r[k]) for k in keys])
    return buf.getvalue()


def csv_to_rows(text: str) -> list[dict]:
    out = []
    for r in csv.DictReader(io.StringIO(text)):
        row = {}
        for k, v in r.items():
            try:
                row[k] = int(v)
            except ValueError:
                try:
                    row[k] = float(v)
                except ValueError:
                    row[k] = v
        out.append(row)
    return out


def write_bytes(path: Path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)


def write_text(path: Path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
