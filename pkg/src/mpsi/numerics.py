"""Dense float64 primitives, a portable RNG and a finite-difference oracle.

Vectors are 1-D ``float64`` arrays and matrices 2-D arrays. Every function
here is pure: identical inputs give bit-identical outputs.
"""
from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .errors import DegenerateError, EvaluationError, ShapeError

# SplitMix64 constants (Steele, Lea & Flood 2014).
SPLITMIX_GAMMA = np.uint64(0x9E3779B97F4A7C15)
SPLITMIX_MUL1 = np.uint64(0xBF58476D1CE4E5B9)
SPLITMIX_MUL2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _splitmix64(states: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = states.copy()
        z = (z ^ (z >> np.uint64(30))) * SPLITMIX_MUL1
        z = (z ^ (z >> np.uint64(27))) * SPLITMIX_MUL2
        return z ^ (z >> np.uint64(31))


class Rng:
    """Counter-based SplitMix64 stream.

    Output ``n`` (0-based) is ``mix(seed + (n + 1) * GAMMA mod 2**64)``, which is
    the classic sequential SplitMix64 sequence but can be produced in blocks.
    Uniforms take the top 53 bits; normals use Box-Muller on consecutive
    uniform pairs (both outputs are used, in order cos then sin).
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def bits(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            states = np.uint64(self.seed) + idx * SPLITMIX_GAMMA
        return _splitmix64(states)

    def uniform(self, size: int | tuple[int, ...]) -> np.ndarray:
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.bits(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return u.reshape(shape)

    def normal(self, size: int | tuple[int, ...]) -> np.ndarray:
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * math.pi * u[:, 1]
        z = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).reshape(-1)
        return z[:n].reshape(shape)

    def unit_vector(self, d: int) -> np.ndarray:
        # Rejecting near-zero draws keeps the direction well defined.
        while True:
            v = self.normal(d)
            n = math.sqrt(float(v @ v))
            if n > 1e-12:
                return v / n

    def spawn(self, key: int) -> "Rng":
        """Independent child stream derived from this seed and ``key``."""
        child = _splitmix64(np.array([(self.seed ^ (int(key) * 0xD1B54A32D192ED03)) & _MASK64], dtype=np.uint64))
        return Rng(int(child[0]))


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise EvaluationError(f"{what} produced non-finite values")


def affine(W: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Return ``W @ x + b`` summed column by column, left to right.

    The fixed order makes results independent of the BLAS build, so they
    match a plain nested loop bit for bit.
    """
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if W.ndim != 2 or x.ndim != 1 or b.ndim != 1 or W.shape[1] != x.shape[0] or W.shape[0] != b.shape[0]:
        raise ShapeError(f"affine: W{W.shape} incompatible with x{x.shape} and b{b.shape}")
    acc = np.zeros(W.shape[0])
    for j in range(x.shape[0]):
        acc += W[:, j] * x[j]
    return acc + b


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0 or z.shape[axis] == 0:
        raise ShapeError("softmax of an empty vector")
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_vjp(weights: np.ndarray, upstream: np.ndarray, axis: int = -1) -> np.ndarray:
    """Softmax Jacobian-transpose applied to ``upstream``: ``w * (g - <w, g>)``."""
    return weights * (upstream - (weights * upstream).sum(axis=axis, keepdims=True))


def normalize(x: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / max(math.sqrt(float(x @ x)), eps)


def normalize_vjp(x: np.ndarray, upstream: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Gradient of ``<normalize(x), upstream>`` with respect to ``x``."""
    n = math.sqrt(float(x @ x))
    if n < eps:
        return upstream / eps
    y = x / n
    return (upstream - y * float(y @ upstream)) / n


def eps_cosine(a: np.ndarray, b_hat: np.ndarray, eps: float = 1e-3) -> float:
    """Regularized cosine distance ``1 - <a, b_hat> / sqrt(|a|^2 + eps^2)``."""
    a = np.asarray(a, dtype=np.float64)
    s = math.sqrt(float(a @ a) + eps * eps)
    if s == 0.0:
        raise DegenerateError("eps_cosine: zero vector with eps=0 has no direction")
    return 1.0 - float(a @ b_hat) / s


def eps_cosine_grad(a: np.ndarray, b_hat: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    s2 = float(a @ a) + eps * eps
    if s2 == 0.0:
        raise DegenerateError("eps_cosine: zero vector with eps=0 has no direction")
    s = math.sqrt(s2)
    return -b_hat / s + (float(a @ b_hat) / (s2 * s)) * a


def fd_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat or shaped array."""
    if h <= 0:
        raise ValueError("fd_grad: h must be positive")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    g = np.empty_like(flat)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        fp = f(x)
        flat[j] = orig - h
        fm = f(x)
        flat[j] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise EvaluationError(f"fd_grad: non-finite value at coordinate {j}")
        g[j] = (fp - fm) / (2.0 * h)
    return g.reshape(x.shape)


def gradient_error(analytic: np.ndarray, numeric: np.ndarray, small: float = 1e-6, abs_scale: float = 1e-3) -> float:
    """Worst per-component relative error.

    Components whose numeric magnitude is below ``small`` are scored as
    ``|diff| / abs_scale`` so that an absolute tolerance of ``rel_tol * abs_scale``
    applies to them (1e-4 relative <-> 1e-7 absolute with the defaults).
    """
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if a.shape != n.shape:
        raise ShapeError(f"gradient_error: {a.shape} vs {n.shape}")
    if a.size == 0:
        return 0.0
    mag = np.abs(n)
    denom = np.where(mag < small, abs_scale, mag)
    return float(np.max(np.abs(a - n) / denom))
