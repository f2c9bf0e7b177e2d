"""Shared helpers: segment reductions over ragged batches and a small binary
container format used for checkpoints and demand-rate grids."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

# ---------------------------------------------------------------------------
# segment reductions
#
# A "ragged batch" is a dense (rows, dim) array holding the concatenated
# per-sample row blocks, plus a bounds vector of length n_segments + 1 with
# bounds[k]:bounds[k+1] delimiting sample k's rows.  Empty segments are legal.
# ---------------------------------------------------------------------------


def segment_bounds(sizes) -> np.ndarray:
    """Cumulative row offsets for per-sample block sizes."""
    sizes = np.asarray(sizes, dtype=np.int64)
    out = np.zeros(len(sizes) + 1, dtype=np.int64)
    np.cumsum(sizes, out=out[1:])
    return out


def segment_sum(x: np.ndarray, bounds: np.ndarray) -> np.ndarray:
    """Per-segment sums. Empty segments contribute zero rows.

    Accumulation is per segment (reduceat), not a global running sum, so
    round-off in one segment never leaks into another.
    """
    starts = bounds[:-1]
    nonempty = np.flatnonzero(bounds[1:] > starts)
    out = np.zeros((len(bounds) - 1,) + x.shape[1:], dtype=x.dtype)
    if len(nonempty):
        out[nonempty] = np.add.reduceat(x, starts[nonempty], axis=0)
    return out


def repeat_per_segment(vals: np.ndarray, sizes) -> np.ndarray:
    """Broadcast one row per segment back onto that segment's rows."""
    return np.repeat(vals, np.asarray(sizes, dtype=np.int64), axis=0)


def segment_argmax(x: np.ndarray, bounds: np.ndarray) -> np.ndarray:
    """Index (within segment) of each segment's max. Segments must be
    non-empty; ties resolve to the lowest index."""
    k = len(bounds) - 1
    out = np.empty(k, dtype=np.int64)
    for i in range(k):
        lo, hi = bounds[i], bounds[i + 1]
        if hi <= lo:
            raise ValueError(f"segment {i} is empty")
        out[i] = int(np.argmax(x[lo:hi]))
    return out


def segment_max(x: np.ndarray, bounds: np.ndarray) -> np.ndarray:
    """Per-segment max of a flat vector. Segments must be non-empty."""
    sizes = np.diff(bounds)
    if np.any(sizes <= 0):
        raise ValueError("segment_max requires non-empty segments")
    return np.maximum.reduceat(x, bounds[:-1])


def segment_log_softmax(x: np.ndarray, bounds: np.ndarray) -> np.ndarray:
    """Log-softmax applied independently within each (non-empty) segment of a
    flat score vector."""
    sizes = np.diff(bounds)
    if np.any(sizes <= 0):
        raise ValueError("segment_log_softmax requires non-empty segments")
    starts = bounds[:-1]
    z = x - np.repeat(np.maximum.reduceat(x, starts), sizes)
    denom = np.add.reduceat(np.exp(z), starts)
    return z - np.repeat(np.log(denom), sizes)


# ---------------------------------------------------------------------------
# binary container
#
# Layout: 8-byte magic, uint32 format version, uint32 header length, UTF-8
# JSON header, then each array's raw little-endian C-order bytes in header
# order.  Round trips are bit exact.
# ---------------------------------------------------------------------------

BLOB_MAGIC = b"FLBLOB\x00\x01"
BLOB_VERSION = 1


def write_blob(path, kind: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    blocks = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)})
        blocks.append(arr.tobytes())
    header = json.dumps(
        {"kind": kind, "meta": meta or {}, "arrays": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(BLOB_MAGIC)
        fh.write(np.uint32(BLOB_VERSION).tobytes())
        fh.write(np.uint32(len(header)).tobytes())
        fh.write(header)
        for block in blocks:
            fh.write(block)


def read_blob(path, expect_kind: str | None = None):
    """Returns (kind, arrays, meta). Raises ValueError on a malformed file or
    an unexpected kind."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(BLOB_MAGIC))
        if magic != BLOB_MAGIC:
            raise ValueError(f"{path}: not a fleetlab blob file")
        version = int(np.frombuffer(fh.read(4), dtype=np.uint32)[0])
        if version != BLOB_VERSION:
            raise ValueError(f"{path}: unsupported blob version {version}")
        hlen = int(np.frombuffer(fh.read(4), dtype=np.uint32)[0])
        header = json.loads(fh.read(hlen).decode("utf-8"))
        arrays = {}
        for entry in header["arrays"]:
            dtype = np.dtype(entry["dtype"])
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            buf = fh.read(n * dtype.itemsize)
            if len(buf) != n * dtype.itemsize:
                raise ValueError(f"{path}: truncated array {entry['name']}")
            arrays[entry["name"]] = np.frombuffer(buf, dtype=dtype).reshape(shape).copy()
    kind = header.get("kind")
    if expect_kind is not None and kind != expect_kind:
        raise ValueError(f"{path}: expected kind {expect_kind!r}, found {kind!r}")
    return kind, arrays, header.get("meta", {})
