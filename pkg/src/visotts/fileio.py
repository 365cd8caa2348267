"""Binary file formats shared across the pipeline.

Matrices (mel and visual feature files) are stored as a header of two
little-endian uint32 values (rows, cols) followed by row-major little-endian
float32 data. Alignments are raw little-endian uint32 sequences, speaker
embeddings raw little-endian float32 sequences. Audio is 16-bit PCM WAV,
mono, 16 kHz.
"""

from __future__ import annotations

import hashlib
import struct
import wave
from pathlib import Path

import numpy as np

from . import VisottsError


class FileFormatError(VisottsError):
    pass


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from a tuple of labels (no salted hash())."""
    digest = hashlib.sha256("/".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def write_f32_matrix(path, matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise FileFormatError(f"expected a 2-D matrix, got shape {matrix.shape}")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", matrix.shape[0], matrix.shape[1]))
        fh.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())


def read_f32_matrix(path, expected_cols: int | None = None) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 8:
        raise FileFormatError(f"truncated matrix file: {path}")
    rows, cols = struct.unpack("<II", raw[:8])
    expected_bytes = 8 + 4 * rows * cols
    if len(raw) != expected_bytes:
        raise FileFormatError(
            f"matrix file {path} has {len(raw)} bytes, expected {expected_bytes} "
            f"for {rows}x{cols}"
        )
    if expected_cols is not None and cols != expected_cols:
        raise FileFormatError(f"matrix file {path} has {cols} columns, expected {expected_cols}")
    data = np.frombuffer(raw[8:], dtype="<f4").reshape(rows, cols)
    return data.astype(np.float32)


def write_u32_vector(path, values: np.ndarray) -> None:
    values = np.asarray(values)
    if values.ndim != 1:
        raise FileFormatError(f"expected a 1-D vector, got shape {values.shape}")
    if np.any(values < 0):
        raise FileFormatError("uint32 vector cannot hold negative values")
    Path(path).write_bytes(np.ascontiguousarray(values, dtype="<u4").tobytes())


def read_u32_vector(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) % 4 != 0:
        raise FileFormatError(f"truncated uint32 file: {path}")
    return np.frombuffer(raw, dtype="<u4").astype(np.int64)


def write_f32_vector(path, values: np.ndarray) -> None:
    values = np.asarray(values)
    if values.ndim != 1:
        raise FileFormatError(f"expected a 1-D vector, got shape {values.shape}")
    Path(path).write_bytes(np.ascontiguousarray(values, dtype="<f4").tobytes())


def read_f32_vector(path, expected_len: int | None = None) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) % 4 != 0:
        raise FileFormatError(f"truncated float32 file: {path}")
    data = np.frombuffer(raw, dtype="<f4").astype(np.float32)
    if expected_len is not None and data.shape[0] != expected_len:
        raise FileFormatError(f"{path} holds {data.shape[0]} floats, expected {expected_len}")
    return data


def write_wav(path, samples: np.ndarray, sample_rate: int = 16000) -> None:
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 1:
        raise FileFormatError("WAV writer expects a mono 1-D signal")
    clipped = np.clip(samples, -1.0, 1.0)
    pcm = np.round(clipped * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(pcm.tobytes())


def read_wav(path) -> tuple[np.ndarray, int]:
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1:
            raise FileFormatError(f"{path}: expected mono audio")
        if fh.getsampwidth() != 2:
            raise FileFormatError(f"{path}: expected 16-bit PCM")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return samples, rate
