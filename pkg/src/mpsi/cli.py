"""``mpsi`` command line: run, gradcheck, bench, mixtrain, synth.

Exit codes: 0 ok, 1 check failure, 2 configuration error, 3 divergence.
Every command writes into one output directory (``--out``, the config's
``output_dir``, or the ``MPSI_OUT`` environment variable, which wins).
Wall-clock timings are only written with ``--timings`` so that repeated
invocations produce byte-identical files.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import jsonschema
import numpy as np

from . import bench, gradcheck
from .blend_field import from_user_masks, split_masks, uniform_field, weights
from .embedding_store import LatentGrid, PromptSet, load_bank, save_bank, synth_angle_pair, synth_latent, synth_prompts
from .errors import ConfigError, DivergenceError, MPSIError
from .numerics import Rng, normalize
from .prompt_mixer import MixerParams, TrainConfig, fixed_sampler, init_mixer, maxmin_oracle, min_alignment, mix, train_mixer
from .solver import SolverConfig, run
from .style_loss import LossCoeffs, build_pyramid

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3

_NONNEG = {"type": "number", "minimum": 0}
RUN_SCHEMA = {
    "type": "object",
    "required": ["prompts", "latent"],
    "additionalProperties": False,
    "properties": {
        "prompts": {"type": "string", "minLength": 1},
        "latent": {"type": "string", "minLength": 1},
        "masks": {"type": "string", "minLength": 1},
        "mixer": {"type": "string", "minLength": 1},
        "source": {"type": "string", "minLength": 1},
        "seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string", "minLength": 1},
        "coefficients": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"lambda_g": _NONNEG, "lambda_c": _NONNEG, "lambda_2": _NONNEG, "eps": _NONNEG},
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dt": {"type": "number", "exclusiveMinimum": 0},
                "steps": {"type": "integer", "minimum": 0},
                "eta_w": _NONNEG,
                "eta_theta": _NONNEG,
                "stop_tol": _NONNEG,
                "record_every": {"type": "integer", "minimum": 1},
            },
        },
        "pyramid": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "levels": {"type": "integer", "minimum": 1},
                "level_weights": {"type": "array", "items": _NONNEG, "minItems": 1},
            },
        },
        "mixer_training": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epochs": {"type": "integer", "minimum": 0},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "tau": {"type": "number", "exclusiveMinimum": 0},
            },
        },
    },
}

GRADCHECK_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "cases": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "h": {"type": "number", "exclusiveMinimum": 0},
        "tol": {"type": "number", "exclusiveMinimum": 0},
        "output_dir": {"type": "string", "minLength": 1},
    },
}


class _Fail(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ------------------------------------------------------------------ helpers


def _field_path(err: jsonschema.ValidationError) -> str:
    path = ".".join(str(p) for p in err.absolute_path)
    if err.validator == "required":
        missing = err.message.split("'")[1] if "'" in err.message else "?"
        path = f"{path}.{missing}" if path else missing
    return path or "<root>"


def load_config(path, schema: dict) -> tuple[dict, Path]:
    """Parse and schema-validate a JSON config; errors name the offending field."""
    p = Path(path)
    try:
        cfg = json.loads(p.read_text())
    except OSError as exc:
        raise _Fail(EXIT_CONFIG, f"config: cannot read {p}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise _Fail(EXIT_CONFIG, f"config: {p} is not valid JSON ({exc.msg} at line {exc.lineno})") from exc
    err = jsonschema.exceptions.best_match(jsonschema.Draft7Validator(schema).iter_errors(cfg))
    if err is not None:
        raise _Fail(EXIT_CONFIG, f"config field '{_field_path(err)}': {err.message}")
    return cfg, p.parent


def output_dir(cli_out: str | None, cfg: dict | None = None) -> Path:
    out = os.environ.get("MPSI_OUT") or cli_out or (cfg or {}).get("output_dir") or "out"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_input(cfg: dict, base: Path, key: str, kind: type | None):
    path = base / cfg[key]
    if not path.is_file():
        raise _Fail(EXIT_CONFIG, f"config field '{key}': file not found: {path}")
    try:
        obj = load_bank(path)
    except MPSIError as exc:
        raise _Fail(EXIT_CONFIG, f"config field '{key}': {exc}") from exc
    if kind is not None and not isinstance(obj, kind):
        raise _Fail(EXIT_CONFIG, f"config field '{key}': {path} holds {type(obj).__name__}, expected {kind.__name__}")
    return obj


# ---------------------------------------------------------------- commands


def cmd_run(args) -> int:
    cfg, base = load_config(args.config, RUN_SCHEMA)
    prompts: PromptSet = _load_input(cfg, base, "prompts", PromptSet)
    latent: LatentGrid = _load_input(cfg, base, "latent", LatentGrid)
    if "source" in cfg:
        src = _load_input(cfg, base, "source", PromptSet)
        if src.d != prompts.d:
            raise _Fail(EXIT_CONFIG, f"config field 'source': d={src.d} but prompts have d={prompts.d}")
        prompts = prompts.with_source(src.embeddings[0])
    H, W, d = latent.shape
    if d != prompts.d:
        raise _Fail(EXIT_CONFIG, f"config field 'latent': d={d} but prompts have d={prompts.d}")

    try:
        coeffs = LossCoeffs(**cfg.get("coefficients", {}))
        solver = SolverConfig(**cfg.get("solver", {}))
        pyr_cfg = cfg.get("pyramid", {})
        pyr = build_pyramid(H, W, pyr_cfg.get("levels", 1), pyr_cfg.get("level_weights"))
    except MPSIError as exc:
        raise _Fail(EXIT_CONFIG, f"config: {exc}") from exc

    trainable = solver.eta_w > 0
    if "masks" in cfg:
        masks = _load_input(cfg, base, "masks", np.ndarray)
        if masks.shape != (prompts.k, H, W):
            raise _Fail(EXIT_CONFIG, f"config field 'masks': shape {masks.shape}, expected {(prompts.k, H, W)}")
        try:
            fld = from_user_masks(masks, trainable=trainable)
        except MPSIError as exc:
            raise _Fail(EXIT_CONFIG, f"config field 'masks': {exc}") from exc
    else:
        fld = uniform_field(prompts.k, H, W, trainable=trainable)

    mixer = None
    if "mixer" in cfg:
        mixer = _load_input(cfg, base, "mixer", MixerParams)
        if (mixer.k, mixer.d) != (prompts.k, prompts.d):
            raise _Fail(EXIT_CONFIG, f"config field 'mixer': built for k={mixer.k}, d={mixer.d}")
    elif coeffs.lambda_g > 0:
        train = TrainConfig(**cfg.get("mixer_training", {}))
        mixer = train_mixer(init_mixer(Rng(cfg.get("seed", 0)), prompts.k, prompts.d), fixed_sampler(prompts), train)

    out = output_dir(args.out, cfg)
    try:
        result = run(latent, prompts, fld, mixer, pyr, coeffs, solver)
    except DivergenceError as exc:
        raise _Fail(EXIT_DIVERGED, f"diverged: {exc}") from exc

    echo = {"input": cfg, "coefficients": asdict(coeffs), "solver": asdict(solver),
            "level_weights": [float(v) for v in pyr.level_weights]}
    (out / "report.json").write_text(result.to_json(echo, include_timings=args.timings) + "\n")
    save_bank(result.latent, out / "latent.mpsi")
    save_bank(weights(result.field), out / "weights.mpsi")
    if result.mixer is not None:
        save_bank(result.mixer, out / "mixer.mpsi")
    print(f"run: {result.steps} steps, final total {result.trace[-1][1].total:.6e} -> {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = {}
    if args.config:
        cfg, _ = load_config(args.config, GRADCHECK_SCHEMA)
    cases = cfg.get("cases", 4)
    tol = cfg.get("tol", 1e-4)
    configs = gradcheck.suite_configs(cases, cfg.get("seed", 0))
    res = gradcheck.run_suite(configs, h=cfg.get("h", 1e-4), corrupt=args.corrupt)
    out = output_dir(args.out, cfg)
    for name in gradcheck.CLASSES:
        flag = "ok" if res.worst[name] <= tol else "FAIL"
        print(f"gradcheck {name:7s} worst {res.worst[name]:.3e}  {flag}")
    _write_json(out / "gradcheck.json", {"cases": configs, "tol": tol, "worst": res.worst,
                                         "passed": res.passed(tol)})
    if not res.passed(tol):
        print(f"gradcheck failed for: {', '.join(res.failing(tol))}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_bench(args) -> int:
    overrides = {}
    if args.config:
        try:
            overrides = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise _Fail(EXIT_CONFIG, f"config: cannot load {args.config}: {exc}") from exc
        known = {f.name for f in fields(bench.BenchSettings)} | {"output_dir"}
        bad = sorted(set(overrides) - known)
        if bad:
            raise _Fail(EXIT_CONFIG, f"config field '{bad[0]}': unknown bench setting")
    for name in ("tasks", "k", "angle_deg"):
        if getattr(args, name) is not None:
            overrides[name] = getattr(args, name)
    out = output_dir(args.out, overrides)
    overrides.pop("output_dir", None)
    try:
        settings = bench.BenchSettings(**overrides)
        report = bench.benchmark(settings)
    except TypeError as exc:
        raise _Fail(EXIT_CONFIG, f"config: {exc}") from exc
    except DivergenceError as exc:
        raise _Fail(EXIT_DIVERGED, f"diverged: {exc}") from exc
    (out / "bench.csv").write_text(report.to_csv(include_timing=args.timings))
    (out / "bench_summary.json").write_text(report.summary_json(include_timing=args.timings) + "\n")
    s = report.summary
    print(f"bench: {s['tasks']} tasks, mean regional alignment {s['mean_regional_alignment']}, "
          f"ordering holds: {s['ordering_holds']} -> {out}")
    if args.overhead:
        ratio = bench.overhead_probe()
        print(f"overhead ratio (k=2 mixed / k=1 single): {ratio:.3f}")
        if args.timings:
            _write_json(out / "overhead.json", {"ratio": ratio})
    return EXIT_OK


def cmd_mixtrain(args) -> int:
    if args.prompts:
        try:
            prompts = load_bank(args.prompts)
        except MPSIError as exc:
            raise _Fail(EXIT_CONFIG, f"--prompts: {exc}") from exc
        if not isinstance(prompts, PromptSet):
            raise _Fail(EXIT_CONFIG, f"--prompts: {args.prompts} is not a prompt bank")
    elif args.k == 2:
        prompts = synth_angle_pair(Rng(args.seed), args.d, args.angle)
    else:
        prompts = synth_prompts(Rng(args.seed), args.k, args.d, args.angle)
    cfg = TrainConfig(args.epochs, args.lr, args.tau)
    try:
        mixer = train_mixer(init_mixer(Rng(args.seed).spawn(1), prompts.k, prompts.d), fixed_sampler(prompts), cfg)
    except DivergenceError as exc:
        raise _Fail(EXIT_DIVERGED, f"diverged: {exc}") from exc
    out = output_dir(args.out)
    save_bank(mixer, out / "mixer.mpsi")
    _, oracle = maxmin_oracle(prompts)
    summary = {
        "k": prompts.k,
        "d": prompts.d,
        "train": asdict(cfg),
        "min_alignment_trained": min_alignment(mix(mixer, prompts), prompts),
        "min_alignment_mean": min_alignment(normalize(prompts.embeddings.mean(axis=0)), prompts),
        "min_alignment_oracle": oracle,
    }
    _write_json(out / "mixtrain.json", summary)
    print(f"mixtrain: min alignment {summary['min_alignment_trained']:.6f} "
          f"(mean {summary['min_alignment_mean']:.6f}, oracle {oracle:.6f}) -> {out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    rng = Rng(args.seed)
    try:
        prompts = synth_prompts(rng, args.k, args.d, args.min_angle)
    except (MPSIError, ValueError) as exc:
        raise _Fail(EXIT_CONFIG, f"synth: {exc}") from exc
    out = output_dir(args.out)
    save_bank(prompts, out / f"{args.name}.mpsi")
    written = [f"{args.name}.mpsi"]
    if args.grid:
        H, W = args.grid
        save_bank(synth_latent(rng, H, W, args.d), out / "latent.mpsi")
        written.append("latent.mpsi")
        if args.masks:
            save_bank(split_masks(args.k, H, W), out / "masks.mpsi")
            written.append("masks.mpsi")
    if args.source:
        save_bank(PromptSet(rng.unit_vector(args.d)[None, :], ("source",)), out / "source.mpsi")
        written.append("source.mpsi")
    print(f"synth: wrote {', '.join(written)} -> {out}")
    return EXIT_OK


# -------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mpsi", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", help="output directory (MPSI_OUT overrides)")
        p.add_argument("--timings", action="store_true", help="also write wall-clock timings")

    p = sub.add_parser("run", help="stylize a latent grid from a JSON run config")
    p.add_argument("config")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("gradcheck", help="finite-difference check of all analytic gradients")
    p.add_argument("config", nargs="?")
    p.add_argument("--corrupt", choices=gradcheck.CLASSES, help=argparse.SUPPRESS)
    common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="single vs linear vs mixed comparison suite")
    p.add_argument("--config", help="JSON object of bench settings")
    p.add_argument("--tasks", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--angle-deg", dest="angle_deg", type=float)
    p.add_argument("--overhead", action="store_true", help="also measure the k=2 / k=1 runtime ratio")
    common(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("mixtrain", help="train a prompt mixer on one tuple")
    p.add_argument("--prompts", help="MPSI1 prompt bank (default: synthesize)")
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--angle", type=float, default=120.0, help="pair angle (k=2) or minimum angle")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--tau", type=float, default=10.0)
    common(p)
    p.set_defaults(func=cmd_mixtrain)

    p = sub.add_parser("synth", help="write synthetic prompt banks, latents and masks")
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--min-angle", dest="min_angle", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name", default="prompts")
    p.add_argument("--grid", type=int, nargs=2, metavar=("H", "W"), help="also write a latent grid")
    p.add_argument("--masks", action="store_true", help="with --grid, also write half/half user masks")
    p.add_argument("--source", action="store_true", help="also write a one-row source embedding bank")
    common(p)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _Fail as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"error: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
