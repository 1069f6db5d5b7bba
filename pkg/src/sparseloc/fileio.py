"""Binary frame/net files, CSV tables and run manifests.

All writers go through ``atomic_write`` (write to a temporary file in the
target directory, then rename) so a crashed run never leaves a truncated
artefact behind.
"""
from __future__ import annotations

import csv
import io
import json
import os
import struct
import tempfile

import numpy as np

from .model import GridGeometry
from .unrolled import KINDS, UnrolledNet

__all__ = [
    "FormatError",
    "FRAME_MAGIC",
    "NET_MAGIC",
    "atomic_write",
    "write_frames",
    "read_frames",
    "read_frame_header",
    "encode_frames",
    "decode_frames",
    "write_net",
    "read_net",
    "encode_net",
    "decode_net",
    "write_emitters_csv",
    "read_emitters_csv",
    "write_points_csv",
    "read_points_csv",
    "write_loss_csv",
    "write_json",
    "read_json",
]

FRAME_MAGIC = b"SLFR"
NET_MAGIC = b"SLNT"
FRAME_VERSION = 1
NET_VERSION = 1
_FRAME_HEADER = struct.Struct("<4sHIII")
_NET_HEADER = struct.Struct("<4sHBBIIII")
_UPSAMPLE_MODES = ("nearest",)


class FormatError(OSError):
    """A file exists but does not parse as the expected format."""


def atomic_write(path, data: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


# -- frames -----------------------------------------------------------------

def encode_frames(frames, high_res_side: int | None = None) -> bytes:
    """Serialise ``(T, M, M)`` frames as float32; ``high_res_side`` defaults to ``M``."""
    arr = np.asarray(frames, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[1] != arr.shape[2]:
        raise ValueError(f"frames must be (T, M, M), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("frames contain non-finite values")
    t, m, _ = arr.shape
    n = m if high_res_side is None else int(high_res_side)
    header = _FRAME_HEADER.pack(FRAME_MAGIC, FRAME_VERSION, m, n, t)
    return header + arr.astype("<f4").tobytes(order="C")


def decode_frames(data: bytes) -> tuple[np.ndarray, int]:
    """Inverse of ``encode_frames``: returns ``(frames as float64, N)``."""
    if len(data) < _FRAME_HEADER.size:
        raise FormatError("frame file is shorter than its header")
    magic, version, m, n, t = _FRAME_HEADER.unpack_from(data)
    if magic != FRAME_MAGIC:
        raise FormatError(f"bad frame-file magic {magic!r}")
    if version != FRAME_VERSION:
        raise FormatError(f"unsupported frame-file version {version}")
    expected = _FRAME_HEADER.size + 4 * t * m * m
    if len(data) != expected:
        raise FormatError(f"frame file has {len(data)} bytes, header implies {expected}")
    frames = np.frombuffer(data, dtype="<f4", offset=_FRAME_HEADER.size).reshape(t, m, m)
    if not np.all(np.isfinite(frames)):
        raise FormatError("frame file contains non-finite values")
    return frames.astype(np.float64), n


def read_frame_header(path) -> tuple[int, int, int]:
    """``(M, N, T)`` from a frame file without loading the payload."""
    with open(path, "rb") as fh:
        head = fh.read(_FRAME_HEADER.size)
    if len(head) < _FRAME_HEADER.size:
        raise FormatError("frame file is shorter than its header")
    magic, version, m, n, t = _FRAME_HEADER.unpack(head)
    if magic != FRAME_MAGIC:
        raise FormatError(f"bad frame-file magic {magic!r}")
    return m, n, t


def write_frames(path, frames, high_res_side: int | None = None) -> None:
    atomic_write(path, encode_frames(frames, high_res_side))


def read_frames(path) -> tuple[np.ndarray, int]:
    return decode_frames(_read(path))


# -- networks ---------------------------------------------------------------

def encode_net(net: UnrolledNet) -> bytes:
    """Header, then one block per parameter: name, trainable flag, shape, float64 data."""
    out = io.BytesIO()
    g = net.geometry
    m, ratio = (0, 0) if g is None else (g.low_res_side, g.ratio)
    out.write(_NET_HEADER.pack(NET_MAGIC, NET_VERSION, KINDS.index(net.kind),
                               _UPSAMPLE_MODES.index(net.upsample_mode), net.n_layers,
                               m, ratio, len(net.params)))
    for name, value in net.params.items():
        arr = np.asarray(value, dtype=np.float64)
        raw = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        out.write(struct.pack("<BB", name in net.trainable, arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(arr.astype("<f8").tobytes(order="C"))
    return out.getvalue()


def decode_net(data: bytes) -> UnrolledNet:
    try:
        magic, version, kind, mode, k, m, ratio, count = _NET_HEADER.unpack_from(data)
        if magic != NET_MAGIC:
            raise FormatError(f"bad net-file magic {magic!r}")
        if version != NET_VERSION:
            raise FormatError(f"unsupported net-file version {version}")
        pos = _NET_HEADER.size
        params, trainable = {}, []
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + ln].decode("utf-8")
            pos += ln
            flag, ndim = struct.unpack_from("<BB", data, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * size > len(data):
                raise FormatError(f"net file truncated inside block {name!r}")
            arr = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape)
            pos += 8 * size
            params[name] = arr.astype(np.float64)
            if flag:
                trainable.append(name)
        if pos != len(data):
            raise FormatError(f"{len(data) - pos} trailing bytes after the last block")
        geom = None if m == 0 else GridGeometry(m, ratio)
        return UnrolledNet(KINDS[kind], k, geom, params, tuple(trainable),
                           _UPSAMPLE_MODES[mode])
    except (struct.error, IndexError, UnicodeDecodeError, ValueError) as exc:
        raise FormatError(f"malformed net file: {exc}") from exc


def write_net(path, net: UnrolledNet) -> None:
    atomic_write(path, encode_net(net))


def read_net(path) -> UnrolledNet:
    return decode_net(_read(path))


# -- tables and documents ---------------------------------------------------

def _csv_bytes(header, rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue().encode("utf-8")


def _fmt(v: float) -> str:
    return repr(float(v))


def write_emitters_csv(path, emitters) -> None:
    """Columns ``id, x, y, mean_photons, on_probability``; ``x`` is the column coordinate."""
    rows = [(i, _fmt(e.position[1]), _fmt(e.position[0]), _fmt(e.mean_photons),
             _fmt(e.on_probability)) for i, e in enumerate(emitters)]
    atomic_write(path, _csv_bytes(("id", "x", "y", "mean_photons", "on_probability"), rows))


def read_emitters_csv(path) -> np.ndarray:
    """``(k, 4)`` array of ``row, col, mean_photons, on_probability``."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([[float(r["y"]), float(r["x"]), float(r["mean_photons"]),
                      float(r["on_probability"])] for r in rows]).reshape(-1, 4)


def write_points_csv(path, frame_points) -> None:
    """Per-frame truth points, columns ``frame, x, y, intensity``."""
    rows = [(t, _fmt(p[1]), _fmt(p[0]), _fmt(p[2]))
            for t, pts in enumerate(frame_points) for p in pts]
    atomic_write(path, _csv_bytes(("frame", "x", "y", "intensity"), rows))


def read_points_csv(path, n_frames: int | None = None) -> list[np.ndarray]:
    """Inverse of ``write_points_csv``: list of ``(k, 3)`` ``row, col, intensity`` arrays."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    t_max = max((int(r["frame"]) for r in rows), default=-1) + 1
    n = t_max if n_frames is None else n_frames
    out = [[] for _ in range(n)]
    for r in rows:
        out[int(r["frame"])].append((float(r["y"]), float(r["x"]), float(r["intensity"])))
    return [np.array(p, dtype=np.float64).reshape(-1, 3) for p in out]


def write_loss_csv(path, losses) -> None:
    atomic_write(path, _csv_bytes(("epoch", "loss"), [(i, _fmt(v)) for i, v in enumerate(losses)]))


def write_json(path, doc) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"
    atomic_write(path, text.encode("utf-8"))


def read_json(path):
    with open(path) as fh:
        return json.load(fh)
