"""Prompt banks, latent grids and the MPSI1 binary container.

MPSI1 layout (all integers little-endian u32, all values little-endian f32)::

    bytes 0-3   magic b"MPSI"
    byte  4     version (1)
    byte  5     kind: 1 prompt bank, 2 latent grid, 3 mixer params, 4 user masks
    bytes 6-7   reserved, zero
    dims        kind 1: k, d   kind 2: H, W, d   kind 3: k, d, hidden   kind 4: k, H, W
    payload     f32 values: prod(dims), or for kind 3 the W1, b1, W2, b2 sizes
    labels      kind 1 only: k x (u32 byte length + UTF-8 bytes)
"""
from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, FormatError, InfeasibleError, MPSIError, ShapeError, TruncationError
from .numerics import Rng

MAGIC = b"MPSI"
VERSION = 1
KIND_PROMPTS = 1
KIND_LATENT = 2
KIND_MIXER = 3
KIND_MASKS = 4

_NDIMS = {KIND_PROMPTS: 2, KIND_LATENT: 3, KIND_MIXER: 3, KIND_MASKS: 3}
_F32 = np.dtype("<f4")


@dataclass(frozen=True)
class PromptSet:
    embeddings: np.ndarray  # (k, d), rows unit norm
    labels: tuple[str, ...]
    source_embedding: np.ndarray | None = None

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] < 1:
            raise ShapeError(f"PromptSet needs a (k, d) array with k >= 1, got {emb.shape}")
        if len(self.labels) != emb.shape[0]:
            raise ShapeError(f"{len(self.labels)} labels for {emb.shape[0]} embeddings")
        if len(set(self.labels)) != len(self.labels):
            raise DataError("prompt labels must be unique")
        norms = np.linalg.norm(emb, axis=1)
        if not np.all(np.abs(norms - 1.0) <= 1e-9):
            raise DataError(f"prompt embeddings must be unit norm, got norms {norms}")
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "labels", tuple(self.labels))
        if self.source_embedding is not None:
            src = np.asarray(self.source_embedding, dtype=np.float64)
            if src.shape != (emb.shape[1],) or abs(np.linalg.norm(src) - 1.0) > 1e-9:
                raise DataError("source embedding must be a unit vector of dimension d")
            object.__setattr__(self, "source_embedding", src)

    @property
    def k(self) -> int:
        return self.embeddings.shape[0]

    @property
    def d(self) -> int:
        return self.embeddings.shape[1]

    @classmethod
    def from_vectors(cls, vectors, labels: Sequence[str] | None = None, source=None) -> "PromptSet":
        """Build a set from arbitrary nonzero vectors, normalizing each row."""
        v = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
        v = v / np.linalg.norm(v, axis=1, keepdims=True)
        if labels is None:
            labels = tuple(f"style{i}" for i in range(v.shape[0]))
        if source is not None:
            source = np.asarray(source, dtype=np.float64)
            source = source / np.linalg.norm(source)
        return cls(v, tuple(labels), source)

    def with_source(self, source: np.ndarray | None) -> "PromptSet":
        return PromptSet(self.embeddings, self.labels, source)


@dataclass(frozen=True)
class LatentGrid:
    cells: np.ndarray = field()  # (H, W, d)

    def __post_init__(self):
        c = np.asarray(self.cells, dtype=np.float64)
        if c.ndim != 3 or min(c.shape) < 1:
            raise ShapeError(f"LatentGrid needs an (H, W, d) array, got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise DataError("LatentGrid contains non-finite values")
        object.__setattr__(self, "cells", c)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.cells.shape  # type: ignore[return-value]


# --------------------------------------------------------------------- codec


def value_count(kind: int, dims: Sequence[int]) -> int:
    """Number of f32 payload values a header declares."""
    if kind == KIND_MIXER:
        k, d, hidden = (int(x) for x in dims)
        return hidden * k * d + hidden + d * hidden + d
    return int(np.prod(dims, dtype=np.int64))


def encode(kind: int, dims: Sequence[int], values: np.ndarray, labels: Sequence[str] = ()) -> bytes:
    if kind not in _NDIMS or len(dims) != _NDIMS[kind]:
        raise FormatError(f"bad kind {kind} or dims {tuple(dims)}")
    count = value_count(kind, dims)
    flat = np.asarray(values, dtype=np.float64).reshape(-1)
    if flat.size != count:
        raise ShapeError(f"{flat.size} values for dims {tuple(dims)}")
    parts = [MAGIC, bytes([VERSION, kind, 0, 0]), struct.pack(f"<{len(dims)}I", *dims), flat.astype(_F32).tobytes()]
    if kind == KIND_PROMPTS:
        for label in labels:
            raw = label.encode("utf-8")
            parts.append(struct.pack("<I", len(raw)))
            parts.append(raw)
    return b"".join(parts)


def decode(buf: bytes) -> tuple[int, tuple[int, ...], np.ndarray, tuple[str, ...]]:
    """Parse an MPSI1 buffer into ``(kind, dims, float64 values, labels)``."""
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    version, kind = buf[4], buf[5]
    if version != VERSION:
        raise FormatError(f"unsupported MPSI version {version}")
    if kind not in _NDIMS:
        raise FormatError(f"unknown payload kind {kind}")
    nd = _NDIMS[kind]
    head = 8 + 4 * nd
    if len(buf) < head:
        raise TruncationError(f"header needs {head} bytes, file has {len(buf)}")
    dims = struct.unpack_from(f"<{nd}I", buf, 8)
    count = value_count(kind, dims)
    end = head + 4 * count
    if end > len(buf):
        raise TruncationError(
            f"dims {dims} declare {4 * count} payload bytes but only {len(buf) - head} are present"
        )
    values = np.frombuffer(buf, dtype=_F32, count=count, offset=head).astype(np.float64)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise DataError(f"non-finite value at byte offset {head + 4 * int(bad[0])}")
    labels: list[str] = []
    if kind == KIND_PROMPTS:
        pos = end
        for i in range(dims[0]):
            if pos + 4 > len(buf):
                raise TruncationError(f"label {i} length prefix missing at offset {pos}")
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            if pos + n > len(buf):
                raise TruncationError(f"label {i} declares {n} bytes past end of file")
            labels.append(buf[pos : pos + n].decode("utf-8"))
            pos += n
    return kind, tuple(dims), values, tuple(labels)


def _f32_fixed_point(emb: np.ndarray) -> np.ndarray:
    """f32 rows whose re-normalization on load rounds back to themselves.

    Rounding a unit row to f32 perturbs its norm by ~1e-8, and renormalizing
    in f64 can then move an entry across an f32 rounding boundary. Iterating
    the save/load map a few times finds a fixed point in practice, which is
    what makes save -> load -> save byte-stable.
    """
    q = emb.astype(_F32)
    for _ in range(8):
        q64 = q.astype(np.float64)
        again = (q64 / np.linalg.norm(q64, axis=1, keepdims=True)).astype(_F32)
        if np.array_equal(again, q):
            break
        q = again
    return q


def to_bytes(payload) -> bytes:
    if isinstance(payload, PromptSet):
        q = _f32_fixed_point(payload.embeddings)
        return encode(KIND_PROMPTS, (payload.k, payload.d), q, payload.labels)
    if isinstance(payload, LatentGrid):
        return encode(KIND_LATENT, payload.shape, payload.cells)
    from .prompt_mixer import MixerParams

    if isinstance(payload, MixerParams):
        return encode(KIND_MIXER, (payload.k, payload.d, payload.hidden), payload.flat())
    arr = np.asarray(payload, dtype=np.float64)
    if arr.ndim == 3:
        return encode(KIND_MASKS, arr.shape, arr)
    raise FormatError(f"cannot serialize {type(payload).__name__}")


def from_bytes(buf: bytes):
    kind, dims, values, labels = decode(buf)
    if kind == KIND_PROMPTS:
        k, d = dims
        emb = values.reshape(k, d)
        norms = np.linalg.norm(emb, axis=1)
        if np.any(norms == 0.0):
            raise DataError("prompt bank contains a zero embedding")
        if np.any(np.abs(norms - 1.0) > 1e-3):
            warnings.warn(f"prompt norms {norms} deviate from 1 by more than 1e-3; re-normalizing", stacklevel=3)
        return PromptSet(emb / norms[:, None], labels)
    if kind == KIND_LATENT:
        return LatentGrid(values.reshape(dims))
    if kind == KIND_MIXER:
        from .prompt_mixer import MixerParams

        return MixerParams.from_flat(*dims, values)
    return values.reshape(dims)


def save_bank(payload, path) -> None:
    """Write ``payload`` (PromptSet, LatentGrid, MixerParams or a k x H x W mask stack)."""
    path = Path(path)
    data = to_bytes(payload)
    try:
        path.write_bytes(data)
    except OSError as exc:
        raise MPSIError(f"cannot write {path}: {exc}") from exc


def load_bank(path):
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise MPSIError(f"cannot read {path}: {exc}") from exc
    return from_bytes(buf)


# ----------------------------------------------------------------- synthesis


def synth_prompts(rng: Rng, k: int, d: int, min_angle_deg: float = 0.0, max_attempts: int = 10_000) -> PromptSet:
    """Random unit prompts with every pairwise angle at least ``min_angle_deg``.

    Each new vector is resampled until it clears the already accepted ones;
    ``max_attempts`` bounds the total number of draws.
    """
    if k < 1 or d < 2 or not 0.0 <= min_angle_deg <= 120.0:
        raise ValueError(f"synth_prompts: invalid k={k}, d={d}, min_angle={min_angle_deg}")
    max_dot = math.cos(math.radians(min_angle_deg))
    accepted: list[np.ndarray] = []
    attempts = 0
    while len(accepted) < k:
        if attempts >= max_attempts:
            raise InfeasibleError(
                f"could not place {k} prompts at >= {min_angle_deg} deg in d={d} within {max_attempts} draws"
            )
        attempts += 1
        v = rng.unit_vector(d)
        if all(float(v @ u) <= max_dot for u in accepted):
            accepted.append(v)
    return PromptSet(np.stack(accepted), tuple(f"style{i}" for i in range(k)))


def synth_angle_pair(rng: Rng, d: int, angle_deg: float) -> PromptSet:
    """Two unit prompts at exactly ``angle_deg`` in a random plane."""
    u = rng.unit_vector(d)
    v = rng.normal(d)
    v = v - u * float(u @ v)
    v /= np.linalg.norm(v)
    a = math.radians(angle_deg)
    z2 = math.cos(a) * u + math.sin(a) * v
    return PromptSet(np.stack([u, z2 / np.linalg.norm(z2)]), ("style0", "style1"))


def synth_latent(rng: Rng, H: int, W: int, d: int, scale: float = 1.0) -> LatentGrid:
    """i.i.d. standard normal cells times ``scale``."""
    if H < 1 or W < 1 or d < 1 or scale < 0:
        raise ValueError(f"synth_latent: invalid H={H}, W={W}, d={d}, scale={scale}")
    return LatentGrid(rng.normal((H, W, d)) * scale)
