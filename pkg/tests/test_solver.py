import math

import numpy as np
import pytest

from mpsi.blend_field import from_user_masks, split_masks, uniform_field
from mpsi.embedding_store import synth_latent, synth_prompts
from mpsi.errors import ConfigError, DivergenceError
from mpsi.gradcheck import check_case, make_case
from mpsi.numerics import Rng
from mpsi.prompt_mixer import init_mixer
from mpsi.solver import SolverConfig, descends, probe_family, run, stability_probe, step
from mpsi.style_loss import LossCoeffs, build_pyramid, directions

SINGLE = LossCoeffs(lambda_g=0.0, lambda_c=0.01, lambda_2=0.0, eps=1e-3)


def single_setup(seed=0, H=8, W=8, d=64):
    rng = Rng(seed)
    prompts = synth_prompts(rng, 1, d)
    return prompts, synth_latent(rng, H, W, d)


def scalar_ode(initial, b, dt, steps, lam_c, eps):
    # Per-position simulation of the same flow, written from the closed-form gradient.
    H, W, d = initial.shape
    P = H * W
    out = initial.copy()
    for r in range(H):
        for c in range(W):
            x = np.zeros(d)
            for _ in range(steps):
                s = math.sqrt(float(x @ x) + eps * eps)
                g = (float(x @ b) / s**3) * x - b / s
                x = x - dt * (g + 2.0 * lam_c * x) / P
            out[r, c] += x
    return out


# --- step


def test_zero_rates_and_tiny_dt_is_identity():
    case = make_case(0)
    cfg = SolverConfig(dt=1e-300, eta_w=0.0, eta_theta=0.0)
    out = step(case.current, case.initial, case.dirs, case.field, case.pyr, case.coeffs, case.prev, cfg)
    assert np.array_equal(out.latent, case.current)
    assert out.field is case.field and out.mixer is case.dirs.mixer


def test_content_only_closed_form():
    rng = Rng(3)
    init = rng.normal((3, 4, 5))
    cur = init + rng.normal((3, 4, 5))
    prompts = synth_prompts(rng, 2, 5)
    pyr = build_pyramid(3, 4, masks=[np.zeros((3, 4))])
    coeffs = LossCoeffs(lambda_g=0.0, lambda_c=0.3, lambda_2=0.0, eps=1e-3)
    out = step(cur, init, directions(prompts), uniform_field(2, 3, 4), pyr, coeffs, None, SolverConfig(dt=0.7))
    expected = cur - 0.7 * 0.3 * (2.0 / 12) * (cur - init)
    assert np.allclose(out.latent, expected, atol=1e-14, rtol=0)


@pytest.mark.parametrize("seed", range(3))
def test_one_step_is_minus_dt_times_fd(seed):
    assert check_case(make_case(100 + seed), h=1e-5)["step"] <= 1e-5


def test_step_updates_logits_and_mixer_when_rates_set():
    case = make_case(4)
    cfg = SolverConfig(dt=0.01, eta_w=0.1, eta_theta=0.1)
    out = step(case.current, case.initial, case.dirs, case.field, case.pyr, case.coeffs, case.prev, cfg)
    assert not np.array_equal(out.field.logits, case.field.logits)
    assert not np.array_equal(out.mixer.flat(), case.dirs.mixer.flat())
    assert np.allclose(out.delta, out.latent - case.current, atol=1e-15, rtol=0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_gradient_reports_step():
    case = make_case(5)
    bad = case.current.copy()
    bad[0, 0, 0] = np.inf
    with pytest.raises(DivergenceError, match="step 7"):
        step(bad, case.initial, case.dirs, case.field, case.pyr, case.coeffs, None, SolverConfig(), index=7)


def test_solver_config_validation():
    for kw in ({"dt": 0.0}, {"steps": -1}, {"eta_w": -1.0}, {"eta_theta": -0.1}, {"record_every": 0}):
        with pytest.raises(ConfigError):
            SolverConfig(**kw)


# --- run


def test_zero_steps_returns_initial():
    prompts, lat = single_setup(1, 4, 4, 8)
    res = run(lat, prompts, uniform_field(1, 4, 4), None, build_pyramid(4, 4), SINGLE, SolverConfig(steps=0))
    assert np.array_equal(res.latent.cells, lat.cells) and res.steps == 0
    assert [s for s, _ in res.trace] == [0]


def test_single_prompt_reduction():
    prompts, lat = single_setup(2)
    res = run(lat, prompts, uniform_field(1, 8, 8), None, build_pyramid(8, 8), SINGLE,
              SolverConfig(dt=0.1, steps=500, stop_tol=0.0))
    dz = res.latent.cells - lat.cells
    cos = (dz @ prompts.embeddings[0]) / np.linalg.norm(dz, axis=-1)
    assert cos.mean() >= 0.999
    totals = [r.total for _, r in res.trace]
    assert all(b <= a for a, b in zip(totals, totals[1:]))


def test_single_prompt_matches_scalar_simulation():
    prompts, lat = single_setup(3, 3, 3, 6)
    res = run(lat, prompts, uniform_field(1, 3, 3), None, build_pyramid(3, 3), SINGLE,
              SolverConfig(dt=0.1, steps=60, stop_tol=0.0))
    ref = scalar_ode(lat.cells, prompts.embeddings[0], 0.1, 60, 0.01, 1e-3)
    assert np.allclose(res.latent.cells, ref, atol=1e-10, rtol=0)


def test_run_is_deterministic():
    rng = Rng(8)
    prompts = synth_prompts(rng, 2, 8)
    lat = synth_latent(rng, 4, 4, 8)
    mixer = init_mixer(Rng(9), 2, 8)
    cfg = SolverConfig(dt=0.1, steps=40, eta_w=0.05, eta_theta=0.01)
    args = (lat, prompts, uniform_field(2, 4, 4, trainable=True), mixer, build_pyramid(4, 4, 2), LossCoeffs(), cfg)
    assert run(*args).to_json() == run(*args).to_json()


def test_freezing_invariance_and_inputs_untouched():
    rng = Rng(10)
    prompts = synth_prompts(rng, 2, 8)
    lat = synth_latent(rng, 4, 4, 8)
    mixer = init_mixer(Rng(11), 2, 8)
    field = from_user_masks(split_masks(2, 4, 4), trainable=True)
    logits0, theta0, cells0 = field.logits.copy(), mixer.flat(), lat.cells.copy()
    res = run(lat, prompts, field, mixer, build_pyramid(4, 4, 2), LossCoeffs(),
              SolverConfig(dt=0.1, steps=30, eta_w=0.0, eta_theta=0.0))
    assert np.array_equal(res.field.logits, logits0) and np.array_equal(res.mixer.flat(), theta0)
    trained = run(lat, prompts, field, mixer, build_pyramid(4, 4, 2), LossCoeffs(),
                  SolverConfig(dt=0.1, steps=30, eta_w=0.5, eta_theta=0.01))
    assert not np.array_equal(trained.field.logits, logits0)
    assert np.array_equal(field.logits, logits0) and np.array_equal(mixer.flat(), theta0)
    assert np.array_equal(lat.cells, cells0)


def test_learned_field_stays_normalized():
    rng = Rng(12)
    prompts = synth_prompts(rng, 3, 8)
    lat = synth_latent(rng, 4, 4, 8)
    res = run(lat, prompts, uniform_field(3, 4, 4, trainable=True), None, build_pyramid(4, 4, 2),
              LossCoeffs(lambda_g=0.0), SolverConfig(dt=0.1, steps=100, eta_w=2.0, stop_tol=0.0))
    from mpsi.blend_field import weights

    assert np.max(np.abs(weights(res.field).sum(0) - 1)) <= 1e-12


def test_early_stop_on_plateau():
    # Two competing styles under uniform weights leave a positive loss floor.
    rng = Rng(4)
    prompts, lat = synth_prompts(rng, 2, 8, 60), synth_latent(rng, 4, 4, 8)
    res = run(lat, prompts, uniform_field(2, 4, 4), None, build_pyramid(4, 4), SINGLE,
              SolverConfig(dt=0.05, steps=5000, stop_tol=1e-4))
    assert 10 < res.steps < 5000


def test_global_term_without_mixer_is_config_error():
    prompts, lat = single_setup(5, 2, 2, 4)
    with pytest.raises(ConfigError):
        run(lat, prompts, uniform_field(1, 2, 2), None, build_pyramid(2, 2), LossCoeffs(lambda_g=0.1), SolverConfig())


def test_divergence_carries_rates():
    prompts, lat = single_setup(6, 2, 2, 4)
    with pytest.raises(DivergenceError, match=r"dt=1e\+300"):
        run(lat, prompts, uniform_field(1, 2, 2), None, build_pyramid(2, 2), SINGLE,
            SolverConfig(dt=1e300, steps=50, stop_tol=0.0))


# --- stability


def test_content_only_probe_matches_curvature_bound():
    coeffs = LossCoeffs(lambda_g=0.0, lambda_c=0.01, lambda_2=0.0, eps=1e-3)
    tasks = probe_family(2, coeffs=coeffs, masked=False)
    P = 16
    assert abs(stability_probe(tasks) - P / 0.01) <= 0.1 * P / 0.01


def test_tiny_dt_descends_on_every_probe():
    assert all(descends(t, 1e-6) for t in probe_family(4))


def test_probe_is_deterministic_and_half_max_descends():
    tasks = probe_family()
    top = stability_probe(tasks)
    assert top == stability_probe(tasks)
    assert all(descends(t, 0.5 * top) for t in tasks)
