"""Finite-difference verification of every analytic gradient the solver uses.

Four parameter classes are checked against central differences of the total
loss: the latent grid, the blend logits, the mixer parameters, and the latent
update produced by one solver step (which must equal ``-dt`` times the
numeric latent gradient).
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .blend_field import BlendField
from .embedding_store import synth_prompts
from .numerics import Rng, fd_grad, gradient_error
from .prompt_mixer import MixerParams, init_mixer
from .solver import SolverConfig, step
from .style_loss import (
    LossCoeffs,
    MaskPyramid,
    PrevStep,
    StyleDirections,
    build_pyramid,
    dir_loss,
    dir_loss_grad,
    directions,
)

CLASSES = ("latent", "logits", "mixer", "step")


@dataclass(frozen=True)
class GradCase:
    current: np.ndarray
    initial: np.ndarray
    dirs: StyleDirections
    field: BlendField
    pyr: MaskPyramid
    coeffs: LossCoeffs
    prev: PrevStep | None


def make_case(seed: int, d: int = 8, H: int = 3, W: int = 3, k: int = 2, levels: int = 2,
              with_source: bool = True) -> GradCase:
    """Random, fully active configuration: every loss term and every parameter class contributes."""
    rng = Rng(seed)
    prompts = synth_prompts(rng, k, d)
    if with_source:
        prompts = prompts.with_source(rng.unit_vector(d))
    mixer = init_mixer(rng, k, d)
    # A nonzero output layer so the tanh branch actually reaches the loss.
    mixer = replace(mixer, W2=0.3 * rng.normal(mixer.W2.shape), b2=0.1 * rng.normal(d))
    initial = rng.normal((H, W, d))
    current = initial + 0.5 * rng.normal((H, W, d))
    logits = rng.normal((k, H, W))
    dims = [(-(-H // 2**l), -(-W // 2**l)) for l in range(levels)]
    masks = [0.2 + 0.8 * rng.uniform(dm) for dm in dims]
    pyr = build_pyramid(H, W, levels, 0.5 + rng.uniform(levels), masks)
    coeffs = LossCoeffs(lambda_g=0.3, lambda_c=0.05, lambda_2=0.2, eps=1e-3)
    prev = PrevStep(current - 0.1 * rng.normal((H, W, d)), 0.1 * rng.normal((H, W, d)))
    return GradCase(current, initial, directions(prompts, mixer), BlendField(logits, trainable=True), pyr, coeffs, prev)


def _total(case: GradCase, current=None, field=None, mixer=None) -> float:
    dirs = case.dirs if mixer is None else case.dirs.with_mixer(mixer)
    return dir_loss(case.current if current is None else current, case.initial, dirs,
                    case.field if field is None else field, case.pyr, case.coeffs, case.prev).total


def check_case(case: GradCase, h: float = 1e-4, dt: float = 0.05, corrupt: str | None = None) -> dict[str, float]:
    """Worst scaled error per parameter class for one configuration.

    ``corrupt`` names a class whose analytic gradient is deliberately perturbed
    (a negative control for the checker itself).
    """
    grads = dir_loss_grad(case.current, case.initial, case.dirs, case.field, case.pyr, case.coeffs, case.prev)
    mixer = case.dirs.mixer
    analytic = {"latent": grads.latent, "logits": grads.logits, "mixer": grads.mixer.flat()}
    if corrupt is not None:
        if corrupt not in analytic and corrupt != "step":
            raise ValueError(f"unknown gradient class {corrupt!r}")
        if corrupt in analytic:
            analytic[corrupt] = analytic[corrupt] * 1.01 + 1e-3

    numeric = {
        "latent": fd_grad(lambda x: _total(case, current=x), case.current, h),
        "logits": fd_grad(lambda x: _total(case, field=BlendField(x, True)), case.field.logits, h),
        "mixer": fd_grad(lambda v: _total(case, mixer=MixerParams.from_flat(mixer.k, mixer.d, mixer.hidden, v)),
                         mixer.flat(), h),
    }
    errors = {name: gradient_error(analytic[name], numeric[name]) for name in analytic}

    cfg = SolverConfig(dt=dt, steps=1, eta_w=0.0, eta_theta=0.0)
    out = step(case.current, case.initial, case.dirs, case.field, case.pyr, case.coeffs, case.prev, cfg)
    applied = out.latent - case.current
    if corrupt == "step":
        applied = applied * 1.01
    errors["step"] = gradient_error(applied, -dt * numeric["latent"], abs_scale=1e-3 * dt)
    return errors


@dataclass(frozen=True)
class SuiteResult:
    worst: dict[str, float]
    cases: int

    def passed(self, tol: float) -> bool:
        return all(v <= tol for v in self.worst.values())

    def failing(self, tol: float) -> list[str]:
        return [name for name in CLASSES if self.worst[name] > tol]


def suite_configs(n: int = 20, seed0: int = 0) -> list[dict]:
    """Seeded shapes spanning d 8-16, grids 3x3-4x4, k 2-3 and 1-2 pyramid levels."""
    out = []
    for i in range(n):
        r = Rng(seed0 + 7919 * i)
        u = r.uniform(5)
        out.append({
            "seed": seed0 + i,
            "d": 8 + int(u[0] * 9),
            "H": 3 + int(u[1] * 2),
            "W": 3 + int(u[2] * 2),
            "k": 2 + int(u[3] * 2),
            "levels": 1 + int(u[4] * 2),
        })
    return out


def run_suite(configs: list[dict], h: float = 1e-4, corrupt: str | None = None) -> SuiteResult:
    worst = dict.fromkeys(CLASSES, 0.0)
    for cfg in configs:
        errs = check_case(make_case(**cfg), h=h, corrupt=corrupt)
        for name, v in errs.items():
            worst[name] = max(worst[name], v)
    return SuiteResult(worst, len(configs))
