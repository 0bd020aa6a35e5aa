"""Binary and CSV formats.

All binary formats are little-endian:

* ``PCD1`` point cloud: u32 count, then 3 x f32 per point.
* ``NDT1`` NDT map: u32 count, f32 resolution, per cell 3 x f32 mean,
  6 x f32 upper-triangular covariance (c11 c12 c13 c22 c23 c33), u32 support.
* ``NDTW`` parameters: u32 version, u32 count, per entry u32 name length,
  utf-8 name, u32 rank, rank x u32 dims, f32 data (C order).
* ``NDTD`` descriptor database: u32 dim, u32 count, per record u64 id,
  2 x f64 position, dim x f32 descriptor.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ndt import TRIU_COLS, TRIU_ROWS, NdtMap
from .places import PlaceRecord

NDTW_VERSION = 1

_CELL = np.dtype([("mean", "<f4", (3,)), ("cov", "<f4", (6,)), ("support", "<u4")])


class FormatError(ValueError):
    pass


def _read_bytes(src) -> bytes:
    if isinstance(src, (bytes, bytearray)):
        return bytes(src)
    return Path(src).read_bytes()


def _write_bytes(dst, payload: bytes) -> bytes:
    if dst is not None:
        Path(dst).write_bytes(payload)
    return payload


def _expect_magic(buf: bytes, magic: bytes) -> None:
    if buf[:4] != magic:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {magic!r}")


def _take(buf: bytes, offset: int, n: int) -> bytes:
    if offset + n > len(buf):
        raise FormatError("truncated file")
    return buf[offset : offset + n]


# -- PCD1 -------------------------------------------------------------------
def write_cloud(dst, points) -> bytes:
    pts = np.ascontiguousarray(np.asarray(points, dtype="<f4").reshape(-1, 3))
    return _write_bytes(dst, b"PCD1" + struct.pack("<I", len(pts)) + pts.tobytes())


def read_cloud(src) -> np.ndarray:
    buf = _read_bytes(src)
    _expect_magic(buf, b"PCD1")
    (n,) = struct.unpack("<I", _take(buf, 4, 4))
    data = np.frombuffer(_take(buf, 8, 12 * n), dtype="<f4").reshape(n, 3)
    return data.astype(np.float64)


# -- NDT1 -------------------------------------------------------------------
def write_ndt(dst, ndt: NdtMap) -> bytes:
    rec = np.zeros(len(ndt), dtype=_CELL)
    rec["mean"] = ndt.means
    rec["cov"] = ndt.covs[:, TRIU_ROWS, TRIU_COLS]
    rec["support"] = ndt.supports
    head = b"NDT1" + struct.pack("<If", len(ndt), ndt.resolution)
    return _write_bytes(dst, head + rec.tobytes())


def read_ndt(src) -> NdtMap:
    buf = _read_bytes(src)
    _expect_magic(buf, b"NDT1")
    n, res = struct.unpack("<If", _take(buf, 4, 8))
    rec = np.frombuffer(_take(buf, 12, _CELL.itemsize * n), dtype=_CELL)
    upper = rec["cov"].astype(np.float64)
    covs = np.zeros((n, 3, 3))
    covs[:, TRIU_ROWS, TRIU_COLS] = upper
    covs[:, TRIU_COLS, TRIU_ROWS] = upper
    return NdtMap(rec["mean"].astype(np.float64), covs, rec["support"].astype(np.int64), float(res))


# -- NDTW -------------------------------------------------------------------
def write_weights(dst, state: dict[str, np.ndarray]) -> bytes:
    out = io.BytesIO()
    out.write(b"NDTW" + struct.pack("<II", NDTW_VERSION, len(state)))
    for name, value in state.items():
        # ascontiguousarray would promote 0-d arrays to 1-d
        arr = np.array(value, dtype="<f4", order="C")
        raw = name.encode("utf-8")
        out.write(struct.pack("<I", len(raw)) + raw)
        out.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(arr.tobytes())
    return _write_bytes(dst, out.getvalue())


def read_weights(src) -> dict[str, np.ndarray]:
    buf = _read_bytes(src)
    _expect_magic(buf, b"NDTW")
    version, count = struct.unpack("<II", _take(buf, 4, 8))
    if version != NDTW_VERSION:
        raise FormatError(f"unsupported NDTW version {version}")
    pos = 12
    state = {}
    for _ in range(count):
        (ln,) = struct.unpack("<I", _take(buf, pos, 4))
        name = _take(buf, pos + 4, ln).decode("utf-8")
        pos += 4 + ln
        (rank,) = struct.unpack("<I", _take(buf, pos, 4))
        dims = struct.unpack(f"<{rank}I", _take(buf, pos + 4, 4 * rank))
        pos += 4 + 4 * rank
        size = int(np.prod(dims)) if rank else 1
        state[name] = np.frombuffer(_take(buf, pos, 4 * size), dtype="<f4").reshape(dims).copy()
        pos += 4 * size
    return state


# -- NDTD -------------------------------------------------------------------
@dataclass
class DescriptorTable:
    ids: np.ndarray
    positions: np.ndarray
    descriptors: np.ndarray

    def __len__(self):
        return len(self.ids)


def write_descriptors(dst, ids, positions, descriptors) -> bytes:
    descriptors = np.asarray(descriptors)
    n, dim = descriptors.shape
    rec = np.zeros(n, dtype=np.dtype([("id", "<u8"), ("pos", "<f8", (2,)), ("desc", "<f4", (dim,))]))
    rec["id"] = np.asarray(ids, dtype=np.uint64)
    rec["pos"] = np.asarray(positions, dtype=np.float64).reshape(n, 2)
    rec["desc"] = descriptors
    return _write_bytes(dst, b"NDTD" + struct.pack("<II", dim, n) + rec.tobytes())


def read_descriptors(src) -> DescriptorTable:
    buf = _read_bytes(src)
    _expect_magic(buf, b"NDTD")
    dim, n = struct.unpack("<II", _take(buf, 4, 8))
    dt = np.dtype([("id", "<u8"), ("pos", "<f8", (2,)), ("desc", "<f4", (dim,))])
    rec = np.frombuffer(_take(buf, 12, dt.itemsize * n), dtype=dt)
    return DescriptorTable(rec["id"].astype(np.int64), rec["pos"].copy(), rec["desc"].astype(np.float64))


# -- CSV --------------------------------------------------------------------
MANIFEST_FIELDS = ["id", "x", "y", "split", "cloud_path", "run"]


def write_manifest(path, records) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(MANIFEST_FIELDS)
        for r in records:
            w.writerow([r.id, repr(float(r.x)), repr(float(r.y)), r.split, r.cloud_path, r.run])


def read_manifest(path) -> list[PlaceRecord]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    records = []
    for row in rows:
        try:
            records.append(
                PlaceRecord(
                    int(row["id"]),
                    float(row["x"]),
                    float(row["y"]),
                    row["split"],
                    row["cloud_path"],
                    int(row.get("run") or 0),
                )
            )
        except (KeyError, ValueError) as exc:
            raise FormatError(f"bad manifest row {row}: {exc}") from None
    return records


def write_poses(path, poses: np.ndarray) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["timestamp", "x", "y", "heading"])
        for t, x, y, h in np.asarray(poses).reshape(-1, 4):
            w.writerow([repr(float(t)), repr(float(x)), repr(float(y)), repr(float(h))])


def read_poses(path) -> np.ndarray:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    arr = np.array([[float(r["timestamp"]), float(r["x"]), float(r["y"]), float(r["heading"])] for r in rows])
    if len(arr) > 1 and np.any(np.diff(arr[:, 0]) <= 0):
        raise FormatError("pose timestamps must be strictly increasing")
    return arr.reshape(-1, 4)


def write_loss_curve(path, curve) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "mean_loss", "lr"])
        for epoch, loss, lr in curve:
            w.writerow([epoch, repr(float(loss)), repr(float(lr))])
