"""Hierarchical masked directional loss and its analytic gradients.

For a latent change ``dz(p) = current(p) - initial(p)`` the total loss is::

    sum_l lam_l / P_l * sum_c m_l(c) sum_i wbar_i(c) * ec(dzbar(c), dir_i)   spatial, per level
  + lambda_g * ec(mean_p dz(p), fused)                                      global fused-code term
  + lambda_c / P * sum_p |dz(p)|^2                                          content anchor
  + lambda_2 / P * sum_p |(current - prev.latent) - prev.delta|^2            second-order smoothness

where ``ec`` is the eps-regularized cosine distance and ``dzbar``/``wbar`` are
averages over the level-0 positions a coarse cell covers (ragged edge cells
average over the positions they actually contain).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .blend_field import BlendField, weights
from .embedding_store import LatentGrid, PromptSet
from .errors import ConfigError, DegenerateError, ShapeError
from .numerics import normalize_vjp, softmax_vjp
from .prompt_mixer import FactoredGrad, MixerParams, mix, mix_backward, mix_forward


# -------------------------------------------------------------- directions


def style_direction(z: np.ndarray, source: np.ndarray | None = None) -> np.ndarray:
    """Unit direction from ``source`` towards ``z``; ``z`` itself without a source."""
    z = np.asarray(z, dtype=np.float64)
    if source is None:
        return z.copy()
    v = z - source
    n = math.sqrt(float(v @ v))
    if n < 1e-8:
        raise DegenerateError("style embedding coincides with the source embedding")
    return v / n


@dataclass(frozen=True)
class StyleDirections:
    """Per-prompt unit directions plus the (optional) fused direction.

    With a mixer attached the fused direction is recomputed from the current
    mixer parameters on every evaluation, so it follows mixer updates.
    """

    styles: np.ndarray  # (k, d)
    fixed_fused: np.ndarray | None = None
    prompts: PromptSet | None = None
    mixer: MixerParams | None = None

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.styles, dtype=np.float64))
        if np.any(np.abs(np.linalg.norm(s, axis=1) - 1.0) > 1e-9):
            raise ShapeError("style directions must be unit vectors")
        object.__setattr__(self, "styles", s)
        if self.mixer is not None and self.prompts is None:
            raise ConfigError("a mixer needs the prompt set it fuses")

    @property
    def k(self) -> int:
        return self.styles.shape[0]

    @property
    def d(self) -> int:
        return self.styles.shape[1]

    @property
    def has_fused(self) -> bool:
        return self.mixer is not None or self.fixed_fused is not None

    def fused(self) -> np.ndarray:
        if self.mixer is not None:
            return style_direction(mix(self.mixer, self.prompts), self.prompts.source_embedding)
        if self.fixed_fused is None:
            raise ConfigError("no fused direction: attach a mixer or give a fixed fused direction")
        return self.fixed_fused

    def with_mixer(self, mixer: MixerParams | None) -> "StyleDirections":
        return replace(self, mixer=mixer)


def directions(prompts: PromptSet, mixer: MixerParams | None = None) -> StyleDirections:
    src = prompts.source_embedding
    styles = np.stack([style_direction(z, src) for z in prompts.embeddings])
    return StyleDirections(styles, prompts=prompts, mixer=mixer)


# ----------------------------------------------------------------- pyramid


@dataclass(frozen=True)
class MaskPyramid:
    masks: tuple[np.ndarray, ...]
    level_weights: np.ndarray
    _pool: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        masks = tuple(np.asarray(m, dtype=np.float64) for m in self.masks)
        lam = np.asarray(self.level_weights, dtype=np.float64)
        if len(masks) < 1 or lam.shape != (len(masks),):
            raise ShapeError("need one level weight per mask level and at least one level")
        if np.any(lam < 0) or abs(lam.sum() - 1.0) > 1e-12:
            raise ShapeError(f"level weights must be nonnegative and sum to 1, got {lam}")
        H, W = masks[0].shape
        pool = []
        for lvl, m in enumerate(masks):
            s = 2**lvl
            rows, cols = np.arange(0, H, s), np.arange(0, W, s)
            if m.shape != (rows.size, cols.size):
                raise ShapeError(f"level {lvl} mask is {m.shape}, expected {(rows.size, cols.size)}")
            if np.any(m < 0) or np.any(m > 1):
                raise ShapeError(f"level {lvl} mask values must lie in [0, 1]")
            rsz = np.diff(np.append(rows, H))
            csz = np.diff(np.append(cols, W))
            pool.append((rows, cols, rsz, csz, np.outer(rsz, csz).astype(np.float64)))
        object.__setattr__(self, "masks", masks)
        object.__setattr__(self, "level_weights", lam)
        object.__setattr__(self, "_pool", tuple(pool))

    @property
    def levels(self) -> int:
        return len(self.masks)

    @property
    def shape(self) -> tuple[int, int]:
        return self.masks[0].shape  # type: ignore[return-value]

    def pool(self, lvl: int, x: np.ndarray) -> np.ndarray:
        """Average an (H, W, ...) array over each level-``lvl`` cell."""
        if lvl == 0:
            return x
        rows, cols, _, _, counts = self._pool[lvl]
        s = np.add.reduceat(np.add.reduceat(x, rows, axis=0), cols, axis=1)
        return s / counts.reshape(counts.shape + (1,) * (x.ndim - 2))

    def unpool(self, lvl: int, g: np.ndarray) -> np.ndarray:
        """Adjoint of :meth:`pool`: spread each cell gradient evenly over its positions."""
        if lvl == 0:
            return g
        _, _, rsz, csz, counts = self._pool[lvl]
        g = g / counts.reshape(counts.shape + (1,) * (g.ndim - 2))
        return np.repeat(np.repeat(g, rsz, axis=0), csz, axis=1)


def build_pyramid(H: int, W: int, levels: int = 1, level_weights=None, masks=None) -> MaskPyramid:
    if levels < 1 or 2 ** (levels - 1) > max(H, W):
        raise ShapeError(f"{levels} levels do not fit a {H}x{W} grid")
    dims = [(-(-H // 2**l), -(-W // 2**l)) for l in range(levels)]
    if masks is None:
        masks = [np.ones(dm) for dm in dims]
    lam = np.ones(levels) if level_weights is None else np.asarray(level_weights, dtype=np.float64)
    if lam.shape != (levels,) or np.any(lam < 0) or lam.sum() <= 0:
        raise ShapeError(f"level weights {lam} invalid for {levels} levels")
    return MaskPyramid(tuple(masks), lam / lam.sum())


# ------------------------------------------------------------------ report


@dataclass(frozen=True)
class LossCoeffs:
    lambda_g: float = 0.1
    lambda_c: float = 0.01
    lambda_2: float = 0.1
    eps: float = 1e-3

    def __post_init__(self):
        for name in ("lambda_g", "lambda_c", "lambda_2", "eps"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class PrevStep:
    """Trajectory memory for the smoothness term: the previous latent and the delta that produced it."""

    latent: np.ndarray
    delta: np.ndarray


@dataclass(frozen=True)
class LossReport:
    total: float
    level_terms: tuple[float, ...]  # lam_l * spatial_l
    global_term: float
    content_term: float
    smooth_term: float
    per_style: tuple[float, ...]

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "level_terms": list(self.level_terms),
            "global": self.global_term,
            "content": self.content_term,
            "smooth": self.smooth_term,
            "per_style": list(self.per_style),
        }


@dataclass(frozen=True)
class LossGrads:
    latent: np.ndarray  # (H, W, d)
    logits: np.ndarray  # (k, H, W)
    mixer: MixerParams | FactoredGrad | None


# --------------------------------------------------------------- evaluation


def _cells(x) -> np.ndarray:
    return x.cells if isinstance(x, LatentGrid) else np.asarray(x, dtype=np.float64)


def evaluate(current, initial, dirs: StyleDirections, field: BlendField, pyr: MaskPyramid,
             coeffs: LossCoeffs, prev: PrevStep | None = None, want_grad: bool = True,
             mixer_grad: bool = True, logit_grad: bool = True):
    """Loss report and (optionally) gradients in one pass.

    The mixer gradient comes back in factored form (or None when the mixer
    term is inactive or ``mixer_grad`` is off); ``logit_grad=False`` returns
    zero logit gradients without computing them.
    """
    cur, init = _cells(current), _cells(initial)
    if cur.shape != init.shape:
        raise ShapeError(f"current {cur.shape} and initial {init.shape} differ")
    H, W, d = cur.shape
    k = dirs.k
    if dirs.d != d or field.k != k or field.grid != (H, W) or pyr.shape != (H, W):
        raise ShapeError(
            f"inconsistent shapes: latent {cur.shape}, directions {dirs.styles.shape}, "
            f"field {field.logits.shape}, pyramid {pyr.shape}"
        )
    if coeffs.lambda_g > 0 and not dirs.has_fused:
        raise ConfigError("lambda_g > 0 needs a fused direction (attach a mixer)")

    P = H * W
    eps2 = coeffs.eps * coeffs.eps
    dz = cur - init
    w = weights(field)
    B = dirs.styles
    # Deltas and weights share one pooling pass per level.
    stacked = np.concatenate([dz, np.moveaxis(w, 0, -1)], axis=-1)
    g_stacked = np.zeros_like(stacked) if want_grad else None
    need_w = want_grad and field.trainable and logit_grad

    level_terms = []
    per_style = np.zeros(k)
    for lvl in range(pyr.levels):
        lam = float(pyr.level_weights[lvl])
        pooled = pyr.pool(lvl, stacked)
        dzb, wb = pooled[..., :d], pooled[..., d:]
        m = pyr.masks[lvl]
        s = np.sqrt(np.einsum("hwd,hwd->hw", dzb, dzb) + eps2)
        if coeffs.eps == 0.0 and np.any((s == 0.0) & (m > 0)):
            raise DegenerateError(f"zero latent change at level {lvl} with eps=0")
        s = np.where(s == 0.0, 1.0, s)
        dots = dzb @ B.T
        ec = 1.0 - dots / s[..., None]
        contrib = (m[..., None] * wb * ec).sum(axis=(0, 1)) / m.size
        level_terms.append(lam * float(contrib.sum()))
        per_style += lam * contrib
        if want_grad and lam > 0.0:
            coef = (lam / m.size) * m
            wdots = (wb * dots).sum(axis=-1)
            g_dzb = coef[..., None] * ((wdots / s**3)[..., None] * dzb - (wb @ B) / s[..., None])
            if need_w:
                g_stacked += pyr.unpool(lvl, np.concatenate([g_dzb, coef[..., None] * ec], axis=-1))
            else:
                g_stacked[..., :d] += pyr.unpool(lvl, g_dzb)

    global_term = 0.0
    grad_mixer = None
    g_global = None
    if coeffs.lambda_g > 0:
        if dirs.mixer is not None:
            z_mix, cache = mix_forward(dirs.mixer, dirs.prompts)
            src = dirs.prompts.source_embedding
            f = style_direction(z_mix, src)
        else:
            f = dirs.fused()
        gm = (np.ones(P) @ dz.reshape(P, d)) / P
        s2 = float(gm @ gm) + eps2
        if s2 == 0.0:
            raise DegenerateError("zero mean latent change with eps=0")
        sg = math.sqrt(s2)
        gf = float(gm @ f)
        global_term = coeffs.lambda_g * (1.0 - gf / sg)
        if want_grad:
            # Same vector for every position: the mean spreads gradient uniformly.
            g_global = (coeffs.lambda_g / P) * ((gf / (s2 * sg)) * gm - f / sg)
            if dirs.mixer is not None and mixer_grad:
                g_f = -(coeffs.lambda_g / sg) * gm
                g_z = g_f if src is None else normalize_vjp(z_mix - src, g_f, 1e-8)
                grad_mixer, _ = mix_backward(dirs.mixer, dirs.prompts, cache, g_z, want_inputs=False)

    g_dz = None
    if want_grad:
        g_dz = g_stacked[..., :d] + g_global if g_global is not None else g_stacked[..., :d].copy()

    content_term = 0.0
    if coeffs.lambda_c > 0:
        content_term = coeffs.lambda_c * float(np.einsum("hwd,hwd->", dz, dz)) / P
        if want_grad:
            g_dz += (2.0 * coeffs.lambda_c / P) * dz

    smooth_term = 0.0
    if coeffs.lambda_2 > 0 and prev is not None:
        r = (cur - prev.latent) - prev.delta
        smooth_term = coeffs.lambda_2 * float(np.einsum("hwd,hwd->", r, r)) / P
        if want_grad:
            g_dz += (2.0 * coeffs.lambda_2 / P) * r

    total = sum(level_terms) + global_term + content_term + smooth_term
    report = LossReport(float(total), tuple(level_terms), global_term, content_term, smooth_term,
                        tuple(float(v) for v in per_style))
    if not want_grad:
        return report, None
    if need_w:
        g_logits = softmax_vjp(w, np.moveaxis(g_stacked[..., d:], -1, 0), axis=0)
    else:
        g_logits = np.zeros_like(field.logits)
    return report, LossGrads(g_dz, g_logits, grad_mixer)


def dir_loss(current, initial, dirs, field, pyr, coeffs, prev: PrevStep | None = None) -> LossReport:
    return evaluate(current, initial, dirs, field, pyr, coeffs, prev, want_grad=False)[0]


def dir_loss_grad(current, initial, dirs, field, pyr, coeffs, prev: PrevStep | None = None) -> LossGrads:
    """Dense gradients; ``mixer`` is a zero ``MixerParams`` when a mixer is attached but inactive."""
    g = evaluate(current, initial, dirs, field, pyr, coeffs, prev, want_grad=True)[1]
    if dirs.mixer is None:
        return g
    dense = g.mixer.dense() if g.mixer is not None else dirs.mixer.zeros_like()
    return LossGrads(g.latent, g.logits, dense)
