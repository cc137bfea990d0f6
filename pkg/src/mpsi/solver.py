"""Explicit state-space update loop driving the latent grid down the loss gradient.

Each step applies ``z <- z - dt * grad_z L`` and, when their rates are
nonzero, plain gradient steps on the blend logits and mixer parameters.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .blend_field import BlendField
from .embedding_store import LatentGrid, PromptSet
from .errors import ConfigError, DivergenceError
from .prompt_mixer import MixerParams
from .style_loss import LossCoeffs, LossReport, MaskPyramid, PrevStep, StyleDirections, directions, evaluate


@dataclass(frozen=True)
class SolverConfig:
    dt: float = 0.1
    steps: int = 500
    eta_w: float = 0.0
    eta_theta: float = 0.0
    stop_tol: float = 1e-6
    record_every: int = 1
    window: int = 10

    def __post_init__(self):
        if not (self.dt > 0 and self.steps >= 0 and self.eta_w >= 0 and self.eta_theta >= 0):
            raise ConfigError(f"invalid solver config {self}")
        if self.record_every < 1 or self.window < 1 or self.stop_tol < 0:
            raise ConfigError(f"invalid solver config {self}")


@dataclass(frozen=True)
class StepOutput:
    latent: np.ndarray
    field: BlendField
    mixer: MixerParams | None
    delta: np.ndarray
    report: LossReport


def _finite(*arrays: np.ndarray) -> bool:
    # A NaN or inf anywhere poisons the sum; cheaper than a full isfinite scan.
    return all(math.isfinite(float(a.sum())) for a in arrays)


def step(current, initial, dirs: StyleDirections, field: BlendField, pyr: MaskPyramid, coeffs: LossCoeffs,
         prev: PrevStep | None, cfg: SolverConfig, index: int = 0, inplace: bool = False) -> StepOutput:
    """One explicit update. ``report`` describes the state *before* the update.

    With ``inplace`` the field logits and mixer arrays are updated in place;
    callers must own them (``run`` copies its inputs first).
    """
    train_theta = dirs.mixer is not None and cfg.eta_theta > 0
    train_w = field.trainable and cfg.eta_w > 0
    report, grads = evaluate(current, initial, dirs, field, pyr, coeffs, prev, want_grad=True,
                             mixer_grad=train_theta, logit_grad=train_w)
    if not math.isfinite(report.total):
        raise DivergenceError(f"non-finite loss at step {index}")
    if not _finite(grads.latent, grads.logits):
        raise DivergenceError(f"non-finite gradient at step {index}")
    cur = current.cells if isinstance(current, LatentGrid) else current
    delta = -cfg.dt * grads.latent
    nxt = cur + delta
    new_field = field.updated(grads.logits, cfg.eta_w, inplace) if train_w else field
    mixer = dirs.mixer
    if train_theta and grads.mixer is not None:
        if not grads.mixer.finite():
            raise DivergenceError(f"non-finite mixer gradient at step {index}")
        mixer = mixer.descend(grads.mixer, cfg.eta_theta, inplace)
    return StepOutput(nxt, new_field, mixer, delta, report)


@dataclass
class RunResult:
    latent: LatentGrid
    field: BlendField
    mixer: MixerParams | None
    trace: list[tuple[int, LossReport]]
    steps: int
    timings: dict[str, float] = field(default_factory=dict)

    def report_dict(self, config: dict | None = None, include_timings: bool = False) -> dict:
        out = {
            "steps": self.steps,
            "final_total": self.trace[-1][1].total if self.trace else None,
            "trace": [{"step": s, **r.to_dict()} for s, r in self.trace],
        }
        if config is not None:
            out["config"] = config
        if include_timings:
            out["timings_s"] = dict(self.timings)
        return out

    def to_json(self, config: dict | None = None, include_timings: bool = False) -> str:
        return json.dumps(self.report_dict(config, include_timings), indent=2, sort_keys=True)


def run(initial: LatentGrid, prompts: PromptSet | StyleDirections, field: BlendField, mixer: MixerParams | None,
        pyr: MaskPyramid, coeffs: LossCoeffs, cfg: SolverConfig) -> RunResult:
    """Iterate :func:`step` until ``cfg.steps`` or a relative-plateau stop.

    The run stops once ``|L_t - L_{t-window}| < stop_tol * |L_{t-window}|``.
    ``prompts`` may also be a prebuilt :class:`StyleDirections` (its mixer is
    replaced by ``mixer`` when one is given).
    """
    if isinstance(prompts, StyleDirections):
        dirs = prompts if mixer is None else prompts.with_mixer(mixer)
    else:
        dirs = directions(prompts, mixer)
    if coeffs.lambda_g > 0 and not dirs.has_fused:
        raise ConfigError("lambda_g > 0 requires a mixer")
    # The run owns private copies so in-place updates never touch caller state.
    field = field.copy()
    if dirs.mixer is not None:
        dirs = dirs.with_mixer(dirs.mixer.copy())
    init = initial.cells
    cur = init
    prev: PrevStep | None = None
    last_delta: np.ndarray | None = None
    totals: list[float] = []
    trace: list[tuple[int, LossReport]] = []
    timings = {"step": 0.0, "record": 0.0}
    executed = 0
    for t in range(cfg.steps):
        t0 = time.perf_counter()
        try:
            out = step(cur, init, dirs, field, pyr, coeffs, prev, cfg, t, inplace=True)
        except DivergenceError as exc:
            raise DivergenceError(f"{exc} (dt={cfg.dt}, eta_w={cfg.eta_w}, eta_theta={cfg.eta_theta})") from exc
        t1 = time.perf_counter()
        totals.append(out.report.total)
        if t % cfg.record_every == 0:
            trace.append((t, out.report))
        # The next state is judged against (this state, the delta that produced it).
        prev = PrevStep(cur, last_delta) if last_delta is not None else None
        last_delta = out.delta
        cur = out.latent
        field = out.field
        if out.mixer is not dirs.mixer:
            dirs = dirs.with_mixer(out.mixer)
        executed = t + 1
        timings["step"] += t1 - t0
        timings["record"] += time.perf_counter() - t1
        n = len(totals)
        if cfg.stop_tol > 0 and n > cfg.window:
            ref = totals[n - 1 - cfg.window]
            if abs(totals[-1] - ref) < cfg.stop_tol * abs(ref):
                break
    final, _ = evaluate(cur, init, dirs, field, pyr, coeffs, prev, want_grad=False)
    trace.append((executed, final))
    return RunResult(LatentGrid(cur), field, dirs.mixer, trace, executed, timings)


# -------------------------------------------------------------- stability


@dataclass(frozen=True)
class ProbeTask:
    initial: np.ndarray
    start: np.ndarray
    dirs: StyleDirections
    field: BlendField
    pyr: MaskPyramid
    coeffs: LossCoeffs


def descends(task: ProbeTask, dt: float, steps: int = 100, rtol: float = 1e-12) -> bool:
    """True when the loss never increases over ``steps`` frozen-weight updates."""
    cfg = SolverConfig(dt=dt, steps=steps, stop_tol=0.0)
    cur, prev, last = task.start, None, None
    before = None
    for t in range(steps + 1):
        if t == steps:
            rep, _ = evaluate(cur, task.initial, task.dirs, task.field, task.pyr, task.coeffs, prev, want_grad=False)
            total = rep.total
        else:
            try:
                out = step(cur, task.initial, task.dirs, task.field, task.pyr, task.coeffs, prev, cfg, t)
            except DivergenceError:
                return False
            total = out.report.total
            prev = PrevStep(cur, last) if last is not None else None
            last = out.delta
            cur = out.latent
        if not math.isfinite(total):
            return False
        if before is not None and total > before + rtol * abs(before):
            return False
        before = total
    return True


def stability_probe(tasks: Sequence[ProbeTask], steps: int = 100, iters: int = 40, hi: float = 1.0) -> float:
    """Largest dt (by bisection) for which every probe task descends monotonically."""
    lo = 0.0
    while all(descends(t, hi, steps) for t in tasks):
        lo, hi = hi, hi * 2.0
        if hi > 1e9:
            return lo
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if all(descends(t, mid, steps) for t in tasks):
            lo = mid
        else:
            hi = mid
    return lo


def probe_family(n: int = 3, H: int = 4, W: int = 4, d: int = 8, k: int = 2, levels: int = 2,
                 coeffs: LossCoeffs | None = None, masked: bool = True, seed0: int = 0) -> list[ProbeTask]:
    """Seeded small tasks for :func:`stability_probe`.

    ``masked=False`` zeroes every pyramid mask, leaving only the quadratic terms.
    """
    from .blend_field import uniform_field
    from .embedding_store import synth_latent, synth_prompts
    from .numerics import Rng
    from .style_loss import build_pyramid

    coeffs = coeffs if coeffs is not None else LossCoeffs(lambda_g=0.0)
    out = []
    for i in range(n):
        rng = Rng(seed0 + i)
        dirs = directions(synth_prompts(rng, k, d))
        initial = synth_latent(rng, H, W, d).cells
        start = initial + 0.3 * rng.normal((H, W, d))
        pyr = build_pyramid(H, W, levels)
        if not masked:
            pyr = build_pyramid(H, W, levels, masks=[np.zeros_like(m) for m in pyr.masks])
        out.append(ProbeTask(initial, start, dirs, uniform_field(k, H, W), pyr, coeffs))
    return out
