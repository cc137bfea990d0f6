"""Learned fusion of k prompt embeddings into one unit style code.

The network is a one-hidden-layer tanh MLP over the concatenated prompts,
added residually to the prompt mean and projected back to the unit sphere::

    z_mix = normalize(mean_i z_i + W2 tanh(W1 [z_1; ...; z_k] + b1) + b2)

With ``W2`` and ``b2`` zero the mixer reproduces the normalized linear blend,
so training can only move it away from that baseline.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
from scipy.linalg.blas import dger

from .embedding_store import PromptSet
from .errors import DataError, DivergenceError, ShapeError
from .numerics import Rng, normalize, normalize_vjp

MIX_EPS = 1e-8


@dataclass(frozen=True)
class MixerParams:
    W1: np.ndarray  # (hidden, k*d)
    b1: np.ndarray  # (hidden,)
    W2: np.ndarray  # (d, hidden)
    b2: np.ndarray  # (d,)
    k: int
    d: int

    def __post_init__(self):
        h = self.W1.shape[0]
        expect = {"W1": (h, self.k * self.d), "b1": (h,), "W2": (self.d, h), "b2": (self.d,)}
        for name, shape in expect.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(f"MixerParams.{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise DataError(f"MixerParams.{name} contains non-finite values")
            object.__setattr__(self, name, arr)

    @classmethod
    def _trusted(cls, W1, b1, W2, b2, k: int, d: int) -> "MixerParams":
        # Skips validation; only for arrays derived from an already valid instance.
        obj = object.__new__(cls)
        for name, val in (("W1", W1), ("b1", b1), ("W2", W2), ("b2", b2), ("k", k), ("d", d)):
            object.__setattr__(obj, name, val)
        return obj

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    def flat(self) -> np.ndarray:
        return np.concatenate([self.W1.ravel(), self.b1, self.W2.ravel(), self.b2])

    @classmethod
    def from_flat(cls, k: int, d: int, hidden: int, values: np.ndarray) -> "MixerParams":
        v = np.asarray(values, dtype=np.float64)
        sizes = [hidden * k * d, hidden, d * hidden, d]
        if v.size != sum(sizes):
            raise ShapeError(f"{v.size} values cannot fill a mixer with k={k}, d={d}, hidden={hidden}")
        a, b, c = np.cumsum(sizes[:3])
        return cls(v[:a].reshape(hidden, k * d), v[a:b], v[b:c].reshape(d, hidden), v[c:], k, d)

    def scaled_add(self, other: "MixerParams", alpha: float) -> "MixerParams":
        """``self + alpha * other`` over all four tensors."""
        return MixerParams._trusted(
            self.W1 + alpha * other.W1,
            self.b1 + alpha * other.b1,
            self.W2 + alpha * other.W2,
            self.b2 + alpha * other.b2,
            self.k,
            self.d,
        )

    def copy(self) -> "MixerParams":
        return MixerParams._trusted(self.W1.copy(), self.b1.copy(), self.W2.copy(), self.b2.copy(), self.k, self.d)

    def descend(self, grad: "FactoredGrad", lr: float, inplace: bool = False) -> "MixerParams":
        """Gradient step ``self - lr * grad``; ``inplace`` mutates this instance's arrays."""
        target = self if inplace else self.copy()
        # Rank-one BLAS updates on the transposed (Fortran-ordered) views write in place.
        dger(-lr, grad.x, grad.g_a, a=target.W1.T, overwrite_a=1)
        dger(-lr, grad.h, grad.g_u, a=target.W2.T, overwrite_a=1)
        np.subtract(target.b1, lr * grad.g_a, out=target.b1)
        np.subtract(target.b2, lr * grad.g_u, out=target.b2)
        return target

    def zeros_like(self) -> "MixerParams":
        return replace(
            self,
            W1=np.zeros_like(self.W1),
            b1=np.zeros_like(self.b1),
            W2=np.zeros_like(self.W2),
            b2=np.zeros_like(self.b2),
        )

    def tensors(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}


@dataclass(frozen=True)
class FactoredGrad:
    """Single-sample mixer gradient kept as rank-one factors.

    ``dW1 = outer(g_a, x)``, ``db1 = g_a``, ``dW2 = outer(g_u, h)``, ``db2 = g_u``.
    """

    g_a: np.ndarray
    x: np.ndarray
    g_u: np.ndarray
    h: np.ndarray
    k: int
    d: int

    def dense(self) -> MixerParams:
        return MixerParams._trusted(np.outer(self.g_a, self.x), self.g_a.copy(), np.outer(self.g_u, self.h),
                                    self.g_u.copy(), self.k, self.d)

    def finite(self) -> bool:
        # Rank-one factors are finite iff the dense gradient is (x and h are bounded inputs).
        return math.isfinite(float(self.g_a.sum()) + float(self.g_u.sum()))


def init_mixer(rng: Rng, k: int, d: int, hidden: int | None = None) -> MixerParams:
    if hidden is None:
        hidden = 2 * d
    if k < 1 or d < 2 or hidden < 1:
        raise ValueError(f"init_mixer: invalid k={k}, d={d}, hidden={hidden}")
    scale = 1.0 / math.sqrt(k * d)
    W1 = rng.normal((hidden, k * d)) * scale
    b1 = rng.normal(hidden) * scale
    return MixerParams(W1, b1, np.zeros((d, hidden)), np.zeros(d), k, d)


def _check(params: MixerParams, prompts: PromptSet) -> None:
    if prompts.k != params.k or prompts.d != params.d:
        raise ShapeError(f"mixer built for k={params.k}, d={params.d} but prompts have k={prompts.k}, d={prompts.d}")


def _forward(params: MixerParams, Z: np.ndarray):
    x = Z.reshape(-1)
    h = np.tanh(params.W1 @ x + params.b1)
    u = Z.sum(axis=0) / Z.shape[0] + params.W2 @ h + params.b2
    return x, h, u


def mix(params: MixerParams, prompts: PromptSet) -> np.ndarray:
    """Fused unit style code for ``prompts``."""
    return mix_forward(params, prompts)[0]


def mix_forward(params: MixerParams, prompts: PromptSet):
    """Fused code plus the activations :func:`mix_backward` needs."""
    _check(params, prompts)
    x, h, u = _forward(params, prompts.embeddings)
    return normalize(u, MIX_EPS), (x, h, u)


def mix_backward(params: MixerParams, prompts: PromptSet, cache, grad_out: np.ndarray,
                 want_inputs: bool = True) -> tuple[FactoredGrad, np.ndarray | None]:
    x, h, u = cache
    g_u = normalize_vjp(u, np.asarray(grad_out, dtype=np.float64), MIX_EPS)
    g_a = (params.W2.T @ g_u) * (1.0 - h * h)
    g_x = (params.W1.T @ g_a).reshape(prompts.embeddings.shape) + g_u / params.k if want_inputs else None
    return FactoredGrad(g_a, x, g_u, h, params.k, params.d), g_x


def mix_grad(params: MixerParams, prompts: PromptSet, grad_out: np.ndarray) -> tuple[MixerParams, np.ndarray]:
    """Reverse pass of :func:`mix` contracted with ``grad_out``.

    Returns parameter gradients (as a ``MixerParams``) and the gradient with
    respect to the raw prompt embeddings, shape ``(k, d)``.
    """
    _, cache = mix_forward(params, prompts)
    grads, g_x = mix_backward(params, prompts, cache, grad_out)
    return grads.dense(), g_x


# ------------------------------------------------------------------ training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    lr: float = 0.05
    tau: float = 10.0
    batch: int = 16


PromptSampler = Callable[[int, int], Sequence[PromptSet]]


def fixed_sampler(prompts: PromptSet) -> PromptSampler:
    """Sampler that always returns ``batch`` copies of one tuple."""
    return lambda epoch, batch: [prompts] * batch


def min_alignment(z: np.ndarray, prompts: PromptSet) -> float:
    return float(np.min(prompts.embeddings @ z))


def _softmin_loss(alignments: np.ndarray, tau: float) -> tuple[float, np.ndarray]:
    # -softmin_tau(a) = (1/tau) log sum exp(-tau a); gradient -softmax(-tau a)
    s = -tau * alignments
    m = s.max()
    e = np.exp(s - m)
    total = e.sum()
    return float((m + math.log(total)) / tau), -e / total


def _grouped(batch: Sequence[PromptSet]) -> list[tuple[PromptSet, int]]:
    # Repeated objects are evaluated once and weighted by multiplicity.
    counts: dict[int, list] = {}
    for p in batch:
        counts.setdefault(id(p), [p, 0])[1] += 1
    return [(p, n) for p, n in counts.values()]


def fusion_loss(params: MixerParams, batch: Sequence[PromptSet], tau: float) -> float:
    total = sum(n * _softmin_loss(p.embeddings @ mix(params, p), tau)[0] for p, n in _grouped(batch))
    return float(total / len(batch))


def fusion_loss_grad(params: MixerParams, batch: Sequence[PromptSet], tau: float) -> tuple[float, MixerParams]:
    total = 0.0
    acc = params.zeros_like()
    for p, count in _grouped(batch):
        z, cache = mix_forward(params, p)
        loss, g_a = _softmin_loss(p.embeddings @ z, tau)
        grads, _ = mix_backward(params, p, cache, p.embeddings.T @ g_a, want_inputs=False)
        acc = acc.scaled_add(grads.dense(), float(count))
        total += count * loss
    n = len(batch)
    return total / n, MixerParams._trusted(acc.W1 / n, acc.b1 / n, acc.W2 / n, acc.b2 / n, acc.k, acc.d)


def train_mixer(params: MixerParams, prompt_sampler: PromptSampler, config: TrainConfig = TrainConfig()) -> MixerParams:
    """Plain gradient descent on the softmin fair-fusion objective.

    The loss is measured on the epoch-0 batch before and after training; if
    training did not improve it the input parameters are returned unchanged.
    """
    if config.lr <= 0 or config.tau <= 0:
        raise ValueError("train_mixer: lr and tau must be positive")
    eval_batch = list(prompt_sampler(0, config.batch))
    initial = fusion_loss(params, eval_batch, config.tau)
    current = params
    for epoch in range(config.epochs):
        batch = eval_batch if epoch == 0 else prompt_sampler(epoch, config.batch)
        loss, grads = fusion_loss_grad(current, batch, config.tau)
        if not math.isfinite(loss) or not np.all(np.isfinite(grads.flat())):
            raise DivergenceError(f"mixer training diverged at epoch {epoch} with lr={config.lr}")
        current = current.scaled_add(grads, -config.lr)
    final = fusion_loss(current, eval_batch, config.tau)
    if not math.isfinite(final):
        raise DivergenceError(f"mixer training diverged after {config.epochs} epochs with lr={config.lr}")
    return current if final <= initial else params


# -------------------------------------------------------------------- oracle


def maxmin_oracle(
    prompts: PromptSet, restarts: int = 32, iters: int = 2000, seed: int = 0, step: float = 0.5, decay: float = 0.995
) -> tuple[np.ndarray, float]:
    """Approximate ``argmax_{|u|=1} min_i <u, z_i>``.

    Two prompts are solved analytically by their bisector. Otherwise projected
    subgradient ascent on the exact min runs from ``restarts`` seeded starts
    (the first is the normalized mean) with a geometrically decaying step
    ``step * decay**t``; the best iterate seen overall is returned. Restarts
    are independent and are advanced together as rows of one matrix.
    """
    Z = prompts.embeddings
    if prompts.k == 1:
        return Z[0].copy(), 1.0
    if prompts.k == 2:
        s = Z[0] + Z[1]
        n = float(np.linalg.norm(s))
        if n < 1e-12:
            # Antipodal pair: every direction orthogonal to z_1 scores 0.
            u = Rng(seed).normal(prompts.d)
            u -= Z[0] * float(Z[0] @ u)
            u /= np.linalg.norm(u)
            return u, 0.0
        u = s / n
        return u, min_alignment(u, prompts)
    rng = Rng(seed)
    R = max(restarts, 1)
    starts = [normalize(Z.mean(axis=0))] + [rng.unit_vector(prompts.d) for _ in range(R - 1)]
    U = np.stack(starts)  # all restarts advance together, one row each
    rows = np.arange(R)
    best_v = np.full(R, -np.inf)
    best_u = U.copy()
    eta = step
    for _ in range(iters):
        A = U @ Z.T
        i = np.argmin(A, axis=1)
        a = A[rows, i]
        better = a > best_v
        best_v = np.where(better, a, best_v)
        best_u[better] = U[better]
        U = U + eta * (Z[i] - U * a[:, None])
        U /= np.linalg.norm(U, axis=1, keepdims=True)
        eta *= decay
    r = int(np.argmax(best_v))
    return best_u[r].copy(), float(best_v[r])
