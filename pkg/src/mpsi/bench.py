"""Desk-scale comparison of single-prompt, linear-blend and mixed stylization.

All metrics live in embedding space: *regional alignment* is the mean cosine
between each position's latent change and the style direction assigned to it
a priori (the CLIP-S stand-in and style-fidelity proxy), *joint alignment* is
the worst cosine between the mean latent change and any prompt direction.
"""
from __future__ import annotations

import csv
import gc
import io
import json
import statistics
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .blend_field import from_user_masks, split_masks, uniform_field
from .embedding_store import LatentGrid, PromptSet, synth_angle_pair, synth_latent, synth_prompts
from .numerics import Rng, normalize
from .prompt_mixer import TrainConfig, fixed_sampler, init_mixer, maxmin_oracle, min_alignment, mix, train_mixer
from .solver import RunResult, SolverConfig, run
from .style_loss import LossCoeffs, StyleDirections, build_pyramid, directions

STRATEGIES = ("single", "linear", "mixed")
CSV_COLUMNS = ("task_seed", "strategy", "k", "angle_deg", "grid", "steps", "regional_alignment",
               "joint_alignment", "wall_ms", "style_fidelity_proxy")


# ----------------------------------------------------------------- metrics


def _cosines(dz: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(dz, axis=-1)
    dots = (dz * dirs).sum(axis=-1)
    safe = np.where(n == 0.0, 1.0, n)
    return np.where(n == 0.0, 0.0, dots / safe)


def regional_alignment(final, initial, dirs, assignment: np.ndarray) -> float:
    """Mean over positions of cos(dz(p), dir[assignment(p)]), with cos(0, .) = 0."""
    B = dirs.styles if isinstance(dirs, StyleDirections) else np.asarray(dirs)
    f = final.cells if isinstance(final, LatentGrid) else final
    i = initial.cells if isinstance(initial, LatentGrid) else initial
    a = np.asarray(assignment)
    if a.shape != f.shape[:2] or a.max() >= B.shape[0] or a.min() < 0:
        raise ValueError(f"assignment {a.shape} incompatible with grid {f.shape[:2]} and k={B.shape[0]}")
    val = float(_cosines(f - i, B[a]).mean())
    return min(1.0, max(-1.0, val))


def global_alignment(final, initial, dirs) -> np.ndarray:
    """cos(mean_p dz(p), dir_i) for every prompt direction."""
    B = dirs.styles if isinstance(dirs, StyleDirections) else np.asarray(dirs)
    f = final.cells if isinstance(final, LatentGrid) else final
    i = initial.cells if isinstance(initial, LatentGrid) else initial
    gm = (f - i).reshape(-1, B.shape[1]).mean(axis=0)
    return np.clip(_cosines(np.broadcast_to(gm, B.shape), B), -1.0, 1.0)


# ------------------------------------------------------------------- tasks


@dataclass(frozen=True)
class BenchSettings:
    tasks: int = 20
    k: int = 2
    angle_deg: float = 120.0
    H: int = 8
    W: int = 8
    d: int = 64
    levels: int = 2
    dt: float = 0.1
    steps: int = 300
    stop_tol: float = 1e-6
    eta_theta: float = 0.01
    eta_w: float = 0.5
    learned_weights: bool = False
    lambda_g: float = 0.1
    lambda_c: float = 0.01
    lambda_2: float = 0.1
    eps: float = 1e-3
    train_epochs: int = 500
    train_lr: float = 0.05
    train_tau: float = 10.0
    seed0: int = 0

    def coeffs(self, with_mixer: bool) -> LossCoeffs:
        return LossCoeffs(self.lambda_g if with_mixer else 0.0, self.lambda_c, self.lambda_2, self.eps)

    def solver(self, learned: bool = False) -> SolverConfig:
        return SolverConfig(self.dt, self.steps, self.eta_w if learned else 0.0, self.eta_theta, self.stop_tol)


@dataclass(frozen=True)
class BenchTask:
    seed: int
    prompts: PromptSet
    initial: LatentGrid
    assignment: np.ndarray  # (H, W) style index per position
    masks: np.ndarray  # (k, H, W) hard user masks matching the assignment
    angle_deg: float


def make_task(seed: int, settings: BenchSettings) -> BenchTask:
    """Split task: style i owns the i-th vertical band of the grid."""
    rng = Rng(seed)
    if settings.k == 2:
        prompts = synth_angle_pair(rng, settings.d, settings.angle_deg)
    else:
        prompts = synth_prompts(rng, settings.k, settings.d, min(settings.angle_deg, 60.0))
    initial = synth_latent(rng, settings.H, settings.W, settings.d)
    masks = split_masks(settings.k, settings.H, settings.W)
    return BenchTask(seed, prompts, initial, np.argmax(masks, axis=0), masks, settings.angle_deg)


@dataclass
class StrategyRow:
    task_seed: int
    strategy: str
    k: int
    angle_deg: float
    grid: str
    steps: int
    regional_alignment: float
    joint_alignment: float
    global_alignment: list[float]
    wall_ms: float
    result: RunResult | None = field(default=None, repr=False)

    def csv_row(self, include_timing: bool) -> dict:
        return {
            "task_seed": self.task_seed,
            "strategy": self.strategy,
            "k": self.k,
            "angle_deg": self.angle_deg,
            "grid": self.grid,
            "steps": self.steps,
            "regional_alignment": repr(self.regional_alignment),
            "joint_alignment": repr(self.joint_alignment),
            "wall_ms": f"{self.wall_ms:.3f}" if include_timing else "",
            "style_fidelity_proxy": repr(self.regional_alignment),
        }


def _single_prompt(z: np.ndarray, label: str, source) -> PromptSet:
    return PromptSet(z[None, :], (label,), source)


def run_strategy(task: BenchTask, strategy: str, settings: BenchSettings = BenchSettings()) -> StrategyRow:
    H, W = task.assignment.shape
    k = task.prompts.k
    dirs = directions(task.prompts)
    pyr = build_pyramid(H, W, settings.levels)
    cfg = settings.solver()
    t0 = time.perf_counter()
    if strategy == "single":
        best = None
        for i in range(k):
            p = _single_prompt(task.prompts.embeddings[i], task.prompts.labels[i], task.prompts.source_embedding)
            res = run(task.initial, p, uniform_field(1, H, W), None, pyr, settings.coeffs(False), cfg)
            joint = float(global_alignment(res.latent, task.initial, dirs).min())
            if best is None or joint > best[0]:
                best = (joint, res)
        result = best[1]
    elif strategy == "linear":
        mean = normalize(task.prompts.embeddings.mean(axis=0))
        p = _single_prompt(mean, "linear_blend", task.prompts.source_embedding)
        result = run(task.initial, p, uniform_field(1, H, W), None, pyr, settings.coeffs(False), cfg)
    elif strategy == "mixed":
        train = TrainConfig(settings.train_epochs, settings.train_lr, settings.train_tau)
        mixer = train_mixer(init_mixer(Rng(task.seed).spawn(1), k, task.prompts.d), fixed_sampler(task.prompts), train)
        if settings.learned_weights:
            fld = uniform_field(k, H, W, trainable=True)
        else:
            fld = from_user_masks(task.masks)
        result = run(task.initial, task.prompts, fld, mixer, pyr, settings.coeffs(True),
                     settings.solver(settings.learned_weights))
    else:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    wall_ms = (time.perf_counter() - t0) * 1e3
    glob = global_alignment(result.latent, task.initial, dirs)
    return StrategyRow(
        task.seed, strategy, k, task.angle_deg, f"{H}x{W}", result.steps,
        regional_alignment(result.latent, task.initial, dirs, task.assignment),
        float(glob.min()), [float(v) for v in glob], max(wall_ms, 1e-9), result,
    )


# --------------------------------------------------------------- benchmark


@dataclass
class BenchReport:
    rows: list[StrategyRow]
    summary: dict

    def to_csv(self, include_timing: bool = False) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow(row.csv_row(include_timing))
        return buf.getvalue()

    def summary_json(self, include_timing: bool = False) -> str:
        s = dict(self.summary)
        if not include_timing:
            s.pop("mean_wall_ms", None)
        return json.dumps(s, indent=2, sort_keys=True)


def summarize(rows: list[StrategyRow], settings: BenchSettings) -> dict:
    by = {s: {r.task_seed: r for r in rows if r.strategy == s} for s in STRATEGIES}
    seeds = sorted(by["mixed"])
    reg = {s: [by[s][t].regional_alignment for t in seeds] for s in STRATEGIES}
    mixed_gt_linear = [t for t in seeds if by["mixed"][t].regional_alignment > by["linear"][t].regional_alignment]
    linear_ge_single = [t for t in seeds if by["linear"][t].regional_alignment >= by["single"][t].regional_alignment]
    n = len(seeds)
    ordering = [t for t in seeds if t in mixed_gt_linear and t in linear_ge_single]
    return {
        "settings": asdict(settings),
        "tasks": n,
        "mean_regional_alignment": {s: float(np.mean(reg[s])) for s in STRATEGIES},
        "mean_joint_alignment": {s: float(np.mean([by[s][t].joint_alignment for t in seeds])) for s in STRATEGIES},
        "mean_wall_ms": {s: float(np.mean([by[s][t].wall_ms for t in seeds])) for s in STRATEGIES},
        "win_rate_mixed_over_linear": len(mixed_gt_linear) / n,
        "win_rate_linear_over_single": len(linear_ge_single) / n,
        "ordering_holds": len(ordering) == n,
        "ordering_counterexamples": [t for t in seeds if t not in ordering],
    }


def benchmark(settings: BenchSettings = BenchSettings(), strategies=STRATEGIES) -> BenchReport:
    rows = []
    for t in range(settings.tasks):
        task = make_task(settings.seed0 + t, settings)
        for s in strategies:
            row = run_strategy(task, s, settings)
            row.result = None
            rows.append(row)
    return BenchReport(rows, summarize(rows, settings) if tuple(strategies) == STRATEGIES else {})


# ---------------------------------------------------------------- overhead


def _timed(fn) -> float:
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0


def overhead_probe(H: int = 16, W: int = 16, d: int = 64, steps: int = 200, repeats: int = 5,
                   seed: int = 0, levels: int = 2, learned_weights: bool = False) -> float:
    """Median wall-time ratio of the k=2 mixed pipeline to the k=1 single-prompt pipeline.

    Both arms share grid, dimension, step budget and coefficients. The mixed
    arm adds the mixer's global term with mixer fine-tuning and, as in
    :func:`run_strategy`, half/half user masks (``learned_weights`` swaps in a
    trainable uniform field instead).
    Arms run interleaved (single, mixed, mixed, single); each such sample
    yields one ratio and the median of the ``repeats`` ratios is returned. Plateau stopping is disabled so both arms
    execute exactly ``steps`` updates.
    """
    rng = Rng(seed)
    initial = synth_latent(rng, H, W, d)
    single_p = synth_prompts(rng, 1, d)
    pair = synth_angle_pair(rng, d, 120.0)
    mixer = init_mixer(rng, 2, d)
    pyr = build_pyramid(H, W, levels)
    base = LossCoeffs()
    single_cfg = SolverConfig(dt=0.1, steps=steps, stop_tol=0.0)
    mixed_cfg = SolverConfig(dt=0.1, steps=steps, eta_w=0.5 if learned_weights else 0.0, eta_theta=0.01,
                             stop_tol=0.0)
    fld = uniform_field(2, H, W, trainable=True) if learned_weights else from_user_masks(split_masks(2, H, W))

    def single():
        run(initial, single_p, uniform_field(1, H, W), None, pyr, replace(base, lambda_g=0.0), single_cfg)

    def mixed():
        run(initial, pair, fld, mixer, pyr, base, mixed_cfg)

    single(), mixed()
    enabled = gc.isenabled()
    gc.disable()
    try:
        ratios = []
        for _ in range(repeats):
            # ABBA order cancels linear drift in machine speed within a sample.
            ts = _timed(single)
            tm = _timed(mixed) + _timed(mixed)
            ts += _timed(single)
            ratios.append(tm / ts)
    finally:
        if enabled:
            gc.enable()
    return float(statistics.median(ratios))


# ------------------------------------------------------------- mixer suite


@dataclass(frozen=True)
class MixerRow:
    seed: int
    trained: float
    mean: float
    oracle: float


def asymmetric_tuple(seed: int, k: int = 3, d: int = 8, min_angle_deg: float = 30.0) -> PromptSet:
    """Random k-tuple with unequal pairwise angles (no symmetry pins the optimum)."""
    return synth_prompts(Rng(seed), k, d, min_angle_deg)


def mixer_suite(n: int = 20, k: int = 3, d: int = 8, seed0: int = 1000,
                train: TrainConfig = TrainConfig()) -> list[MixerRow]:
    """Min-alignment of the trained mixer, the normalized mean and the max-min oracle per seed."""
    rows = []
    for s in range(n):
        prompts = asymmetric_tuple(seed0 + s, k, d)
        mixer = train_mixer(init_mixer(Rng(seed0 + s).spawn(1), k, d), fixed_sampler(prompts), train)
        rows.append(MixerRow(
            seed0 + s,
            min_alignment(mix(mixer, prompts), prompts),
            min_alignment(normalize(prompts.embeddings.mean(axis=0)), prompts),
            maxmin_oracle(prompts)[1],
        ))
    return rows
