import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mpsi.blend_field import BlendField, uniform_field
from mpsi.embedding_store import PromptSet
from mpsi.errors import ConfigError, DegenerateError, ShapeError
from mpsi.gradcheck import check_case, make_case
from mpsi.numerics import Rng
from mpsi.style_loss import (
    LossCoeffs,
    StyleDirections,
    build_pyramid,
    dir_loss,
    dir_loss_grad,
    directions,
    style_direction,
)
from oracles import brute_for, random_loss_config

ZERO = LossCoeffs(lambda_g=0.0, lambda_c=0.0, lambda_2=0.0, eps=0.0)


def single(d=4):
    b = np.zeros(d)
    b[0] = 1.0
    return StyleDirections(b[None, :]), b


# --- directions


def test_style_direction_examples():
    z = np.array([1.0, 0.0])
    assert np.array_equal(style_direction(z), z)
    assert np.allclose(style_direction(z, np.array([0.0, 1.0])), np.array([1.0, -1.0]) / math.sqrt(2), atol=1e-15)
    with pytest.raises(DegenerateError):
        style_direction(z, z.copy())


def test_directions_use_source():
    p = PromptSet(np.eye(2), ("a", "b")).with_source(np.array([0.6, 0.8]))
    dirs = directions(p)
    assert np.allclose(np.linalg.norm(dirs.styles, axis=1), 1.0, atol=1e-12)
    assert np.allclose(dirs.styles[0], style_direction(np.array([1.0, 0.0]), np.array([0.6, 0.8])))


# --- pyramid


def test_build_pyramid_examples():
    p = build_pyramid(5, 5)
    assert p.levels == 1 and np.array_equal(p.masks[0], np.ones((5, 5))) and np.array_equal(p.level_weights, [1.0])
    p = build_pyramid(4, 4, 2)
    assert [m.shape for m in p.masks] == [(4, 4), (2, 2)] and np.array_equal(p.level_weights, [0.5, 0.5])
    assert np.array_equal(build_pyramid(4, 4, 2, [3, 1]).level_weights, [0.75, 0.25])
    assert [m.shape for m in build_pyramid(5, 3, 3).masks] == [(5, 3), (3, 2), (2, 1)]


def test_build_pyramid_too_many_levels():
    with pytest.raises(ShapeError):
        build_pyramid(4, 4, 4)
    with pytest.raises(ShapeError):
        build_pyramid(4, 4, 0)


def test_pool_unpool_are_adjoint():
    pyr = build_pyramid(5, 7, 3)
    rng = Rng(2)
    for lvl in range(3):
        x = rng.normal((5, 7, 3))
        g = rng.normal(pyr.masks[lvl].shape + (3,))
        assert float((pyr.pool(lvl, x) * g).sum()) == pytest.approx(float((x * pyr.unpool(lvl, g)).sum()), rel=1e-12)


# --- loss examples


@pytest.mark.parametrize("sign, expected", [(1.0, 0.0), (-1.0, 2.0)])
def test_uniform_aligned_and_antialigned(sign, expected):
    dirs, b = single()
    init = Rng(1).normal((3, 3, 4))
    cur = init + sign * b
    rep = dir_loss(cur, init, dirs, uniform_field(1, 3, 3), build_pyramid(3, 3), ZERO)
    assert rep.total == pytest.approx(expected, abs=1e-15)


def test_half_aligned_half_antialigned():
    dirs, b = single()
    init = np.zeros((2, 4, 4))
    cur = init.copy()
    cur[:, :2] = b
    cur[:, 2:] = -b
    assert dir_loss(cur, init, dirs, uniform_field(1, 2, 4), build_pyramid(2, 4), ZERO).total == pytest.approx(1.0)


def test_report_total_is_sum_of_terms():
    c = random_loss_config(3)
    r = dir_loss(c["current"], c["initial"], c["dirs"], c["field"], c["pyr"], c["coeffs"], c["prev"])
    assert r.total == pytest.approx(sum(r.level_terms) + r.global_term + r.content_term + r.smooth_term, abs=1e-10)
    assert sum(r.per_style) == pytest.approx(sum(r.level_terms), abs=1e-10)


def test_global_term_needs_fused_direction():
    dirs, b = single()
    with pytest.raises(ConfigError):
        dir_loss(np.ones((2, 2, 4)), np.zeros((2, 2, 4)), dirs, uniform_field(1, 2, 2), build_pyramid(2, 2),
                 LossCoeffs(lambda_g=0.1))


def test_shape_mismatch():
    dirs, _ = single()
    with pytest.raises(ShapeError):
        dir_loss(np.ones((2, 2, 4)), np.zeros((2, 3, 4)), dirs, uniform_field(1, 2, 2), build_pyramid(2, 2), ZERO)


# --- oracle equivalence


def test_matches_brute_force_on_100_configs():
    worst = 0.0
    for seed in range(100):
        c = random_loss_config(seed)
        got = dir_loss(c["current"], c["initial"], c["dirs"], c["field"], c["pyr"], c["coeffs"], c["prev"]).total
        ref = brute_for(c)
        worst = max(worst, abs(got - ref) / max(abs(ref), 1e-300))
    assert worst <= 1e-10


# --- gradients


def test_stationary_at_aligned_optimum():
    dirs, b = single()
    init = Rng(4).normal((3, 3, 4))
    g = dir_loss_grad(init + 2.0 * b, init, dirs, uniform_field(1, 3, 3), build_pyramid(3, 3, 2), ZERO)
    assert np.max(np.abs(g.latent)) <= 1e-15


@pytest.mark.parametrize("seed", range(3))
def test_gradients_match_fd_at_small_step(seed):
    errs = check_case(make_case(seed, d=8, H=3, W=3, k=2, levels=2), h=1e-5)
    assert max(errs.values()) <= 1e-5, errs


def test_frozen_field_has_zero_logit_gradient():
    case = make_case(1)
    g = dir_loss_grad(case.current, case.initial, case.dirs, BlendField(case.field.logits), case.pyr, case.coeffs,
                      case.prev)
    assert not np.any(g.logits)


def test_mixer_gradient_zero_when_global_term_off():
    case = make_case(2)
    g = dir_loss_grad(case.current, case.initial, case.dirs, case.field, case.pyr,
                      LossCoeffs(lambda_g=0.0), case.prev)
    assert not np.any(g.mixer.flat())


def test_zero_delta_behavior():
    rng = Rng(5)
    dirs = StyleDirections(np.stack([rng.unit_vector(6) for _ in range(2)]))
    init = rng.normal((4, 4, 6))
    pyr = build_pyramid(4, 4, 2, [3.0, 1.0])
    field = BlendField(rng.normal((2, 4, 4)))
    coeffs = LossCoeffs(lambda_g=0.0, lambda_c=0.01, lambda_2=0.0, eps=1e-3)
    rep = dir_loss(init, init, dirs, field, pyr, coeffs)
    assert sum(rep.level_terms) == pytest.approx(1.0, abs=1e-12)
    g = dir_loss_grad(init, init, dirs, field, pyr, coeffs).latent
    assert np.all(np.isfinite(g)) and np.all(np.linalg.norm(g, axis=-1) > 0)


def test_zero_delta_with_zero_eps_is_degenerate():
    dirs, _ = single()
    z = np.zeros((2, 2, 4))
    with pytest.raises(DegenerateError):
        dir_loss(z, z, dirs, uniform_field(1, 2, 2), build_pyramid(2, 2), ZERO)


def test_weight_annihilation():
    rng = Rng(6)
    B = np.stack([rng.unit_vector(5) for _ in range(2)])
    init = rng.normal((3, 3, 5))
    cur = init + rng.normal((3, 3, 5))
    logits = np.zeros((2, 3, 3))
    logits[1, 1, 2] = -100.0
    pyr = build_pyramid(3, 3)
    coeffs = LossCoeffs(lambda_g=0.0, lambda_c=0.0, lambda_2=0.0, eps=1e-3)
    both = dir_loss_grad(cur, init, StyleDirections(B), BlendField(logits), pyr, coeffs).latent[1, 2]
    only0 = dir_loss_grad(cur, init, StyleDirections(B[:1]), BlendField(np.zeros((1, 3, 3))), pyr, coeffs).latent[1, 2]
    assert np.max(np.abs(both - only0)) < 1e-40


@given(st.integers(0, 10_000), st.integers(0, 2), st.floats(0.01, 5.0))
def test_monotone_weight_response(seed, i, bump):
    rng = Rng(seed)
    k, H, W, d = 3, 4, 4, 5
    dirs = StyleDirections(np.stack([rng.unit_vector(d) for _ in range(k)]))
    init = rng.normal((H, W, d))
    cur = init + rng.normal((H, W, d))
    logits = rng.normal((k, H, W))
    pyr = build_pyramid(H, W, 2)
    coeffs = LossCoeffs(lambda_g=0.0, lambda_c=0.0, lambda_2=0.0, eps=1e-3)
    before = dir_loss(cur, init, dirs, BlendField(logits), pyr, coeffs).per_style[i]
    up = logits.copy()
    up[i, 1, 2] += bump
    after = dir_loss(cur, init, dirs, BlendField(up), pyr, coeffs).per_style[i]
    assert after >= before - 1e-15
