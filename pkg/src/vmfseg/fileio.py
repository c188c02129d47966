"""Bit-exact little-endian file formats.

Four container types, each with a 4-byte magic and a u16 version:

* SGEM - embedding / raw-feature tensor, f32 payload, header flag bit 0
  marks payloads that are not unit-normalized (raw features).
* SGLB - label / segment-id map, u16 payload, 65535 reserved as ignore.
* SGPS - prototype store records.
* SGCK - toy embedder checkpoint.

All multi-byte values are little-endian; payload lengths are validated
exactly, so truncated or padded files are rejected.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from vmfseg.core import IGNORE_LABEL, Prototype, VmfSegError
from vmfseg.train import ToyEmbedder

FORMAT_VERSION = 1
EMB_MAGIC = b"SGEM"
MAP_MAGIC = b"SGLB"
STORE_MAGIC = b"SGPS"
CHECKPOINT_MAGIC = b"SGCK"
FLAG_RAW_FEATURES = 0x0001

_EMB_HEADER = struct.Struct("<4sHIIHH")
_MAP_HEADER = struct.Struct("<4sHII")
_STORE_HEADER = struct.Struct("<4sHIH")
_STORE_RECORD_TAIL = struct.Struct("<IIHI")
_CKPT_HEADER = struct.Struct("<4sHHHH")


class MalformedFileError(VmfSegError):
    """A file does not conform to its declared layout."""


def _read_exact(path: Path, fmt: struct.Struct, data: bytes, offset: int):
    if len(data) < offset + fmt.size:
        raise MalformedFileError(f"{path}: truncated header")
    return fmt.unpack_from(data, offset), offset + fmt.size


def _expect_magic(path: Path, got: bytes, want: bytes) -> None:
    if got != want:
        raise MalformedFileError(f"{path}: bad magic {got!r}, expected {want!r}")


def _expect_version(path: Path, version: int) -> None:
    if version != FORMAT_VERSION:
        raise MalformedFileError(f"{path}: unsupported version {version}")


@dataclass(frozen=True)
class EmbFileData:
    """Decoded SGEM contents.

    data is float64 (H, W, dim). For unit-flagged files, vectors whose
    stored norm drifted beyond 1e-4 are re-normalized on load and
    counted in `renormalized`.
    """

    data: np.ndarray
    raw_features: bool
    renormalized: int


def write_emb(path: str | Path, data: np.ndarray, raw_features: bool = False) -> None:
    path = Path(path)
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 3:
        raise ValueError(f"expected (H, W, dim) tensor, got shape {data.shape}")
    h, w, dim = data.shape
    flags = FLAG_RAW_FEATURES if raw_features else 0
    payload = np.ascontiguousarray(data, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_EMB_HEADER.pack(EMB_MAGIC, FORMAT_VERSION, h, w, dim, flags))
        fh.write(payload)


def read_emb(path: str | Path) -> EmbFileData:
    path = Path(path)
    blob = path.read_bytes()
    (magic, version, h, w, dim, flags), offset = _read_exact(path, _EMB_HEADER, blob, 0)
    _expect_magic(path, magic, EMB_MAGIC)
    _expect_version(path, version)
    if h < 1 or w < 1 or dim < 1:
        raise MalformedFileError(f"{path}: degenerate dimensions {h}x{w}x{dim}")
    expected = 4 * h * w * dim
    if len(blob) - offset != expected:
        raise MalformedFileError(
            f"{path}: payload is {len(blob) - offset} bytes, expected {expected}"
        )
    data = np.frombuffer(blob, dtype="<f4", offset=offset).astype(np.float64).reshape(h, w, dim)
    raw = bool(flags & FLAG_RAW_FEATURES)
    renormalized = 0
    if not raw:
        norms = np.linalg.norm(data, axis=2)
        if np.any(norms < 1e-6):
            raise MalformedFileError(f"{path}: unit-flagged payload contains ~zero vectors")
        off = np.abs(norms - 1.0) > 1e-4
        renormalized = int(off.sum())
        if renormalized:
            # Only the drifted vectors are touched; the rest stay bit-exact.
            data = data.copy()
            data[off] /= norms[off][:, None]
    return EmbFileData(data=data, raw_features=raw, renormalized=renormalized)


def write_map(path: str | Path, labels: np.ndarray) -> None:
    path = Path(path)
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"expected (H, W) map, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() > IGNORE_LABEL:
        raise ValueError("map values must fit in u16")
    h, w = labels.shape
    with open(path, "wb") as fh:
        fh.write(_MAP_HEADER.pack(MAP_MAGIC, FORMAT_VERSION, h, w))
        fh.write(np.ascontiguousarray(labels, dtype="<u2").tobytes())


def read_map(path: str | Path) -> np.ndarray:
    path = Path(path)
    blob = path.read_bytes()
    (magic, version, h, w), offset = _read_exact(path, _MAP_HEADER, blob, 0)
    _expect_magic(path, magic, MAP_MAGIC)
    _expect_version(path, version)
    if h < 1 or w < 1:
        raise MalformedFileError(f"{path}: degenerate dimensions {h}x{w}")
    expected = 2 * h * w
    if len(blob) - offset != expected:
        raise MalformedFileError(
            f"{path}: payload is {len(blob) - offset} bytes, expected {expected}"
        )
    return np.frombuffer(blob, dtype="<u2", offset=offset).astype(np.int64).reshape(h, w)


def write_store(path: str | Path, protos: Sequence[Prototype]) -> None:
    path = Path(path)
    protos = list(protos)
    dim = protos[0].dim if protos else 0
    with open(path, "wb") as fh:
        fh.write(_STORE_HEADER.pack(STORE_MAGIC, FORMAT_VERSION, len(protos), dim))
        for p in protos:
            if p.dim != dim:
                raise ValueError("all prototypes must share one dimension")
            label = IGNORE_LABEL if p.semantic_label is None else p.semantic_label
            fh.write(np.ascontiguousarray(p.vector, dtype="<f4").tobytes())
            fh.write(_STORE_RECORD_TAIL.pack(p.image_id, p.segment_id, label, p.pixel_count))


def read_store(path: str | Path) -> list[Prototype]:
    path = Path(path)
    blob = path.read_bytes()
    (magic, version, count, dim), offset = _read_exact(path, _STORE_HEADER, blob, 0)
    _expect_magic(path, magic, STORE_MAGIC)
    _expect_version(path, version)
    record = 4 * dim + _STORE_RECORD_TAIL.size
    if len(blob) - offset != count * record:
        raise MalformedFileError(
            f"{path}: payload is {len(blob) - offset} bytes, expected {count * record}"
        )
    out: list[Prototype] = []
    for _ in range(count):
        vector = np.frombuffer(blob, dtype="<f4", count=dim, offset=offset).astype(np.float64)
        offset += 4 * dim
        (image_id, segment_id, label, pixel_count), offset = _read_exact(
            path, _STORE_RECORD_TAIL, blob, offset
        )
        norm = float(np.linalg.norm(vector))
        if norm < 1e-6:
            raise MalformedFileError(f"{path}: ~zero prototype vector")
        out.append(
            Prototype(
                vector=vector / norm,
                image_id=image_id,
                segment_id=segment_id,
                semantic_label=None if label == IGNORE_LABEL else int(label),
                pixel_count=pixel_count,
            )
        )
    return out


def write_checkpoint(path: str | Path, model: ToyEmbedder) -> None:
    path = Path(path)
    hidden = 0 if model.w2 is None else model.w1.shape[1]
    with open(path, "wb") as fh:
        fh.write(
            _CKPT_HEADER.pack(
                CHECKPOINT_MAGIC,
                FORMAT_VERSION,
                model.feature_dim,
                model.embedding_dim,
                hidden,
            )
        )
        fh.write(np.ascontiguousarray(model.w1, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(model.b1, dtype="<f4").tobytes())
        if model.w2 is not None:
            fh.write(np.ascontiguousarray(model.w2, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(model.b2, dtype="<f4").tobytes())


def read_checkpoint(path: str | Path) -> ToyEmbedder:
    path = Path(path)
    blob = path.read_bytes()
    (magic, version, f_in, dim, hidden), offset = _read_exact(path, _CKPT_HEADER, blob, 0)
    _expect_magic(path, magic, CHECKPOINT_MAGIC)
    _expect_version(path, version)
    first_out = hidden if hidden else dim
    sizes = [f_in * first_out, first_out]
    if hidden:
        sizes += [hidden * dim, dim]
    if len(blob) - offset != 4 * sum(sizes):
        raise MalformedFileError(
            f"{path}: payload is {len(blob) - offset} bytes, expected {4 * sum(sizes)}"
        )

    def take(n: int, shape) -> np.ndarray:
        nonlocal offset
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).astype(np.float64)
        offset += 4 * n
        return arr.reshape(shape)

    w1 = take(sizes[0], (f_in, first_out))
    b1 = take(sizes[1], (first_out,))
    if not hidden:
        return ToyEmbedder(w1=w1, b1=b1)
    w2 = take(sizes[2], (hidden, dim))
    b2 = take(sizes[3], (dim,))
    return ToyEmbedder(w1=w1, b1=b1, w2=w2, b2=b2)
