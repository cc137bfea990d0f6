"""Per-position style weights stored as logits and normalized by softmax."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DegenerateError, ShapeError, UsageError
from .numerics import softmax, softmax_vjp

LOGIT_CLAMP = 100.0
HARD_MASK_SCALE = 20.0


@dataclass(frozen=True)
class BlendField:
    logits: np.ndarray  # (k, H, W)
    trainable: bool = False

    def __post_init__(self):
        z = np.asarray(self.logits, dtype=np.float64)
        if z.ndim != 3 or min(z.shape) < 1:
            raise ShapeError(f"BlendField logits must be (k, H, W), got {z.shape}")
        if not np.all(np.isfinite(z)):
            raise ShapeError("BlendField logits must be finite")
        object.__setattr__(self, "logits", np.clip(z, -LOGIT_CLAMP, LOGIT_CLAMP))

    @property
    def k(self) -> int:
        return self.logits.shape[0]

    @property
    def grid(self) -> tuple[int, int]:
        return self.logits.shape[1], self.logits.shape[2]

    def updated(self, grad_logits: np.ndarray, lr: float, inplace: bool = False) -> "BlendField":
        """One clamped gradient step on the logits; ``inplace`` mutates this field's array."""
        if lr == 0.0:
            return self
        if not inplace:
            return replace(self, logits=self.logits - lr * grad_logits)
        np.subtract(self.logits, lr * grad_logits, out=self.logits)
        np.clip(self.logits, -LOGIT_CLAMP, LOGIT_CLAMP, out=self.logits)
        return self

    def copy(self) -> "BlendField":
        return BlendField(self.logits.copy(), self.trainable)


def uniform_field(k: int, H: int, W: int, trainable: bool = False) -> BlendField:
    if min(k, H, W) < 1:
        raise ShapeError(f"uniform_field: invalid k={k}, H={H}, W={W}")
    return BlendField(np.zeros((k, H, W)), trainable)


def from_user_masks(masks, trainable: bool = False, scale: float = HARD_MASK_SCALE) -> BlendField:
    """Logits ``scale * mask``; a hard one-hot mask lands within 2.1e-9 of one-hot."""
    m = np.asarray(masks, dtype=np.float64)
    if m.ndim != 3:
        raise ShapeError(f"user masks must be (k, H, W), got {m.shape}")
    if np.any(m < 0.0) or np.any(m > 1.0):
        raise ShapeError("user mask values must lie in [0, 1]")
    dead = np.argwhere(m.max(axis=0) < 1e-6)
    if dead.size:
        r, c = dead[0]
        raise DegenerateError(f"no style has mask weight at position ({r}, {c})")
    return BlendField(scale * m, trainable)


def weights(field: BlendField) -> np.ndarray:
    """Softmax over the style axis at every position, shape (k, H, W)."""
    return softmax(field.logits, axis=0)


def weights_grad(field: BlendField, upstream: np.ndarray) -> np.ndarray:
    """Pull a (k, H, W) gradient on the weights back to the logits."""
    if not field.trainable:
        raise UsageError("weights_grad called on a frozen (user-defined) field")
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != field.logits.shape:
        raise ShapeError(f"upstream {upstream.shape} does not match field {field.logits.shape}")
    return softmax_vjp(weights(field), upstream, axis=0)


def split_masks(k: int, H: int, W: int) -> np.ndarray:
    """Hard masks giving style ``i`` the i-th vertical band of columns."""
    if k > W:
        raise ShapeError(f"cannot split {W} columns into {k} bands")
    m = np.zeros((k, H, W))
    edges = np.linspace(0, W, k + 1).round().astype(int)
    for i in range(k):
        m[i, :, edges[i] : edges[i + 1]] = 1.0
    return m
