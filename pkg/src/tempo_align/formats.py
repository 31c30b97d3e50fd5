"""On-disk formats: XMF1 feature matrices, XCK1 named-tensor checkpoints,
PCM WAV input and JSON-lines manifests."""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from scipy.io import wavfile

from .errors import DataError

XMF_MAGIC = b"XMF1"
XCK_MAGIC = b"XCK1"


def write_xmf(path: str | Path, matrix: np.ndarray) -> None:
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise ValueError(f"XMF1 stores 2-D matrices, got shape {m.shape}")
    rows, cols = m.shape
    with open(path, "wb") as fh:
        fh.write(XMF_MAGIC)
        fh.write(struct.pack("<II", rows, cols))
        fh.write(np.ascontiguousarray(m, dtype="<f4").tobytes())


def read_xmf(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != XMF_MAGIC:
        raise DataError(f"{path}: not an XMF1 file")
    rows, cols = struct.unpack_from("<II", data, 4)
    body = data[12:]
    if len(body) != 4 * rows * cols:
        raise DataError(f"{path}: expected {rows}x{cols} values, got {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(np.float32)


def write_xck(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write named tensors in insertion order.

    Layout: magic, u32 count, then per tensor u32 name length, UTF-8 name,
    u32 rank, rank x u32 dims, float32 LE values (row-major).
    """
    with open(path, "wb") as fh:
        fh.write(XCK_MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name, value in tensors.items():
            arr = np.array(value, dtype="<f4", order="C")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_xck(path: str | Path) -> "OrderedDict[str, np.ndarray]":
    data = Path(path).read_bytes()
    if data[:4] != XCK_MAGIC:
        raise DataError(f"{path}: not an XCK1 file")
    (count,) = struct.unpack_from("<I", data, 4)
    pos = 8
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.reshape(np.frombuffer(data, dtype="<f4", count=n, offset=pos), dims)
        pos += 4 * n
        out[name] = arr.astype(np.float32)
    if pos != len(data):
        raise DataError(f"{path}: {len(data) - pos} trailing bytes")
    return out


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    """Read a PCM WAV, keeping only the first channel, scaled to [-1, 1]."""
    rate, samples = wavfile.read(path)
    if samples.ndim > 1:
        samples = samples[:, 0]
    if samples.dtype == np.int16:
        samples = samples.astype(np.float64) / 32768.0
    elif samples.dtype == np.int32:
        samples = samples.astype(np.float64) / 2147483648.0
    elif samples.dtype == np.uint8:
        samples = (samples.astype(np.float64) - 128.0) / 128.0
    else:
        samples = samples.astype(np.float64)
    return samples, int(rate)


def write_wav(path: str | Path, samples: np.ndarray, sample_rate: int) -> None:
    wavfile.write(path, sample_rate, np.asarray(samples, dtype=np.float32))


def write_jsonl(path: str | Path, records: Iterable[Mapping]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    p = Path(path)
    if not p.exists():
        raise DataError(f"missing file: {p}")
    with open(p, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
