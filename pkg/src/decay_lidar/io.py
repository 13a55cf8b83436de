"""Binary map and scan files, plus point-cloud export.

Every binary file starts with a 4-byte magic and a little-endian u32 format
version. Grid-based files continue with the geometry block
``3 x f64 origin, f64 edge, 3 x u32 dims``; voxel arrays are x-fastest.

====  ===========================================================
DRM1  decay map: prior_rate f64, unobserved_rate f64, f32 rates
DRA1  accumulator: outside (u64 hits, f64 dist), then per-voxel
      (u64 hits, f64 dist) pairs
RFM1  reflection map: prior_q f64, unobserved_q f64, f32 q,
      u64 hits, u64 misses
LFM1  likelihood field: sigma f64, p_oor f64, f32 nearest_dist
DSC1  scans: u32 scan count; per scan r_min f64, r_max f64,
      u32 ray count, pose 7 x f64 (x y z qw qx qy qz), then records
      (3 x f32 direction, u8 kind, f32 range)
====  ===========================================================
"""
from __future__ import annotations

import os
import struct

import numpy as np

from .baselines import LikelihoodField, ReflectionGrid
from .decay_map import DecayGrid, MapAccumulator
from .grid import GridGeometry
from .scan import RANGE, Scan
from .transforms import Pose

VERSION = 1

MAGIC_DECAY = b"DRM1"
MAGIC_ACCUM = b"DRA1"
MAGIC_REFLECTION = b"RFM1"
MAGIC_FIELD = b"LFM1"
MAGIC_SCANS = b"DSC1"

_HEADER = struct.Struct("<4sI")
_GEOM = struct.Struct("<4d3I")
_PAIR = struct.Struct("<2d")
_SCAN_HEADER = struct.Struct("<2dI7d")
RECORD = np.dtype([("dir", "<f4", (3,)), ("kind", "u1"), ("r", "<f4")])
_ACC_PAIR = np.dtype([("hits", "<u8"), ("dist", "<f8")])


class FormatError(ValueError):
    """Malformed file; carries the byte offset where parsing failed."""

    def __init__(self, message, offset=None, record=None):
        where = []
        if offset is not None:
            where.append(f"byte {offset}")
        if record is not None:
            where.append(f"record {record}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.offset = offset
        self.record = record


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated file while reading {what}", self.pos)
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, st: struct.Struct, what: str):
        return st.unpack(self.take(st.size, what))

    def array(self, dtype, count: int, what: str) -> np.ndarray:
        dtype = np.dtype(dtype)
        raw = self.take(dtype.itemsize * count, what)
        return np.frombuffer(raw, dtype=dtype, count=count).copy()

    def done(self):
        if self.pos != len(self.data):
            raise FormatError(f"{len(self.data) - self.pos} trailing bytes", self.pos)


def _header(magic: bytes) -> bytes:
    return _HEADER.pack(magic, VERSION)


def _geom_bytes(g: GridGeometry) -> bytes:
    return _GEOM.pack(*g.origin, g.edge_length, *g.dims)


def _read_header(rd: _Reader, expected=None) -> bytes:
    magic, version = rd.unpack(_HEADER, "header")
    if expected is not None and magic != expected:
        raise FormatError(f"bad magic {magic!r}, expected {expected!r}", 0)
    if magic not in (MAGIC_DECAY, MAGIC_ACCUM, MAGIC_REFLECTION, MAGIC_FIELD, MAGIC_SCANS):
        raise FormatError(f"unknown magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}", 4)
    return magic


def _read_geom(rd: _Reader) -> GridGeometry:
    at = rd.pos
    vals = rd.unpack(_GEOM, "grid geometry")
    try:
        return GridGeometry(vals[:3], vals[3], vals[4:7])
    except ValueError as exc:
        raise FormatError(f"invalid grid geometry: {exc}", at) from None


def _write(path, chunks):
    with open(path, "wb") as f:
        for c in chunks:
            f.write(c if isinstance(c, bytes) else c.tobytes())


def _read(path) -> bytes:
    with open(path, "rb") as f:
        return f.read()


# ---------------------------------------------------------------------------
# maps

def write_decay_map(path, grid: DecayGrid):
    _write(path, [_header(MAGIC_DECAY), _geom_bytes(grid.geom),
                  _PAIR.pack(grid.prior_rate, grid.unobserved_rate),
                  grid.rate.astype("<f4")])


def write_accumulator(path, acc: MapAccumulator):
    pairs = np.empty(acc.geom.size, dtype=_ACC_PAIR)
    pairs["hits"] = acc.hits
    pairs["dist"] = acc.dist
    _write(path, [_header(MAGIC_ACCUM), _geom_bytes(acc.geom),
                  struct.pack("<Qd", acc.outside_hits, acc.outside_dist), pairs])


def write_reflection_map(path, rmap: ReflectionGrid):
    _write(path, [_header(MAGIC_REFLECTION), _geom_bytes(rmap.geom),
                  _PAIR.pack(rmap.prior_q, rmap.unobserved_q), rmap.q.astype("<f4"),
                  rmap.hits.astype("<u8"), rmap.misses.astype("<u8")])


def write_likelihood_field(path, field: LikelihoodField):
    _write(path, [_header(MAGIC_FIELD), _geom_bytes(field.geom),
                  _PAIR.pack(field.sigma, field.p_oor), field.nearest_dist.astype("<f4")])


def write_map(path, m):
    if isinstance(m, DecayGrid):
        write_decay_map(path, m)
    elif isinstance(m, ReflectionGrid):
        write_reflection_map(path, m)
    elif isinstance(m, LikelihoodField):
        write_likelihood_field(path, m)
    elif isinstance(m, MapAccumulator):
        write_accumulator(path, m)
    else:
        raise TypeError(f"cannot serialise {type(m).__name__}")


def read_map(path, expected: bytes | None = None):
    """Read any grid file; the type is chosen from its magic."""
    rd = _Reader(_read(path))
    magic = _read_header(rd, expected)
    if magic == MAGIC_SCANS:
        raise FormatError("file holds scans, not a map", 0)
    g = _read_geom(rd)
    n = g.size
    try:
        if magic == MAGIC_DECAY:
            prior, unobs = rd.unpack(_PAIR, "rates")
            rate = rd.array("<f4", n, "decay rates")
            rd.done()
            return DecayGrid(g, rate.astype(np.float64), prior, unobs)
        if magic == MAGIC_ACCUM:
            oh, od = struct.unpack("<Qd", rd.take(16, "outside counters"))
            pairs = rd.array(_ACC_PAIR, n, "accumulator cells")
            rd.done()
            return MapAccumulator(g, pairs["hits"].astype(np.int64), pairs["dist"].copy(),
                                  int(oh), float(od))
        if magic == MAGIC_REFLECTION:
            prior, unobs = rd.unpack(_PAIR, "priors")
            q = rd.array("<f4", n, "reflection probabilities")
            hits = rd.array("<u8", n, "hit counts")
            misses = rd.array("<u8", n, "miss counts")
            rd.done()
            return ReflectionGrid(g, q.astype(np.float64), hits.astype(np.int64),
                                  misses.astype(np.int64), prior, unobs)
        sigma, p_oor = rd.unpack(_PAIR, "field parameters")
        nd = rd.array("<f4", n, "nearest distances")
        rd.done()
        return LikelihoodField(g, nd.astype(np.float64), sigma, p_oor)
    except FormatError:
        raise
    except ValueError as exc:
        raise FormatError(f"invalid map contents: {exc}", rd.pos) from None


def map_model_name(m) -> str:
    if isinstance(m, DecayGrid):
        return "decay"
    if isinstance(m, ReflectionGrid):
        return "reflection"
    if isinstance(m, LikelihoodField):
        return "endpoint"
    raise TypeError(f"not a sensor map: {type(m).__name__}")


# ---------------------------------------------------------------------------
# scans

def write_scans(path, scans):
    scans = list(scans)
    chunks = [_header(MAGIC_SCANS), struct.pack("<I", len(scans))]
    for s in scans:
        chunks.append(_SCAN_HEADER.pack(s.r_min, s.r_max, len(s), *s.pose.as_array()))
        rec = np.empty(len(s), dtype=RECORD)
        rec["dir"] = s.directions
        rec["kind"] = s.kinds
        rec["r"] = s.ranges
        chunks.append(rec)
    _write(path, chunks)


def read_scans(path) -> list[Scan]:
    """Read a DSC1 file.

    Raises:
        FormatError: on bad magic or version, truncation (naming the scan and
            record index where data ran out) or an invalid kind byte.
    """
    data = _read(path)
    rd = _Reader(data)
    _read_header(rd, MAGIC_SCANS)
    (count,) = struct.unpack("<I", rd.take(4, "scan count"))
    scans = []
    for si in range(count):
        at = rd.pos
        if at + _SCAN_HEADER.size > len(data):
            raise FormatError(f"truncated header of scan {si}", at)
        vals = _SCAN_HEADER.unpack_from(data, at)
        rd.pos += _SCAN_HEADER.size
        r_min, r_max, nrays = vals[0], vals[1], vals[2]
        start = rd.pos
        avail = (len(data) - start) // RECORD.itemsize
        if avail < nrays:
            raise FormatError(f"truncated file in scan {si}: {nrays} records declared, "
                              f"{avail} complete", start + avail * RECORD.itemsize, record=avail)
        rec = np.frombuffer(data, dtype=RECORD, count=nrays, offset=start)
        rd.pos = start + nrays * RECORD.itemsize
        bad = np.flatnonzero(rec["kind"] > 2)
        if len(bad):
            j = int(bad[0])
            raise FormatError(f"invalid kind byte {rec['kind'][j]} in scan {si}",
                              start + j * RECORD.itemsize + 12, record=j)
        try:
            pose = Pose.from_array(vals[3:10])
            scans.append(Scan(pose, rec["dir"], rec["kind"], rec["r"], r_min, r_max))
        except ValueError as exc:
            raise FormatError(f"invalid scan {si}: {exc}", at) from None
    rd.done()
    return scans


# ---------------------------------------------------------------------------
# point clouds

def column_sums(grid) -> np.ndarray:
    """Rates summed along z, shape (ny, nx)."""
    values = grid.rate if isinstance(grid, DecayGrid) else grid.q
    return values.reshape(grid.geom.shape_zyx).sum(axis=0)


def export_pointcloud(source, path, fmt: str = "csv"):
    """Write RANGE endpoints of scans, or a z-summed map projection, as CSV or ASCII PLY.

    Scans give ``x, y, z, height`` rows (height = z); maps give one row per
    (x, y) column at z = grid origin with the summed rate in ``rate_sum``.
    """
    if fmt not in ("csv", "ply-ascii"):
        raise ValueError(f"unknown point-cloud format {fmt!r}")
    if isinstance(source, (DecayGrid, ReflectionGrid)):
        g = source.geom
        sums = column_sums(source)
        nx, ny, _ = g.dims
        ix, iy = np.meshgrid(np.arange(nx), np.arange(ny))
        x = g.origin[0] + (ix.ravel() + 0.5) * g.edge_length
        y = g.origin[1] + (iy.ravel() + 0.5) * g.edge_length
        z = np.full(x.shape, g.origin[2])
        pts = np.column_stack([x, y, z, sums.ravel()])
        field = "rate_sum"
    else:
        scans = [source] if isinstance(source, Scan) else list(source)
        ends = [s.endpoints() for s in scans]
        ends = np.concatenate(ends) if ends else np.zeros((0, 3))
        pts = np.column_stack([ends, ends[:, 2]]) if len(ends) else np.zeros((0, 4))
        field = "height"
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        if fmt == "csv":
            f.write(f"x,y,z,{field}\n")
            np.savetxt(f, pts, fmt="%.9g", delimiter=",")
        else:
            f.write("ply\nformat ascii 1.0\n")
            f.write(f"element vertex {len(pts)}\n")
            for name in ("x", "y", "z", field):
                f.write(f"property float {name}\n")
            f.write("end_header\n")
            np.savetxt(f, pts, fmt="%.9g", delimiter=" ")
    os.replace(tmp, path)
    return len(pts)


def range_endpoint_count(scans) -> int:
    return int(sum(np.count_nonzero(s.kinds == RANGE) for s in scans))
