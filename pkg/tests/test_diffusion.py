import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advrestore.autodiff import Tensor, grad, ops
from advrestore.diffusion import (
    ddim_step,
    make_ddim_subsequence,
    make_linear_schedule,
    q_sample,
    schedule_from_betas,
    sigma,
    time_embed,
)
from tests.oracles import ddim_step_scalar, q_sample_scalar, sigma_scalar


def test_single_step_schedule():
    s = schedule_from_betas([0.5])
    assert s.alpha_bar(1) == 0.5
    assert s.alpha_bar(0) == 1.0


def test_two_step_product():
    s = make_linear_schedule(2, 0.1, 0.2)
    assert s.alpha_bar(2) == pytest.approx(0.72, abs=1e-15)


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_schedule_bounds_rejected(args):
    with pytest.raises(ValueError):
        make_linear_schedule(*args)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 400), start=st.floats(1e-5, 0.05), span=st.floats(0.0, 0.5))
def test_schedule_invariants(n, start, span):
    s = make_linear_schedule(n, start, min(start + span, 0.99))
    assert s.alpha_bars[0] == 1.0
    assert np.all(np.diff(s.alpha_bars) < 0)
    for r in range(1, n + 1):
        assert s.alpha_bars[r] == s.alpha_bars[r - 1] * s.alphas[r - 1]


def test_q_sample_examples():
    s = schedule_from_betas([0.75])  # alpha_bar_1 = 0.25
    np.testing.assert_allclose(q_sample([1.0], 1, [2.0], s), [0.5 + math.sqrt(0.75) * 2.0], rtol=1e-15)
    np.testing.assert_allclose(q_sample([1.0], 1, [2.0], s), [2.2320508], atol=1e-7)
    z0 = np.array([0.3, -1.2])
    np.testing.assert_array_equal(q_sample(z0, 1, np.zeros(2), s), math.sqrt(0.25) * z0)


def test_q_sample_degenerate_zero_noise():
    # alpha_bar = 1 at the 0 convention; emulate by a near-zero beta schedule and r via alpha_bars
    s = schedule_from_betas([1e-300])
    z0 = np.array([0.7, -0.1])
    np.testing.assert_array_equal(q_sample(z0, 1, np.array([5.0, 5.0]), s), z0)


def test_q_sample_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        q_sample(np.zeros(3), 1, np.zeros(4), make_linear_schedule(10))


def test_q_sample_batched_timesteps_match_scalar():
    s = make_linear_schedule(50)
    rng = np.random.default_rng(0)
    z0, xi = rng.normal(size=(3, 2, 2)), rng.normal(size=(3, 2, 2))
    r = np.array([1, 17, 50])
    batched = q_sample(z0, r, xi, s)
    for i in range(3):
        np.testing.assert_array_equal(batched[i], q_sample(z0[i], int(r[i]), xi[i], s))


def test_sigma_examples():
    s = make_linear_schedule(10)
    assert sigma(1, s) == 0.0
    custom = schedule_from_betas([0.3, 1.0 - 0.5 / 0.7])  # alpha_bar: 0.7, 0.5
    assert sigma(2, custom) == pytest.approx(0.4140393, abs=1e-7)
    assert sigma(2, custom) == pytest.approx(math.sqrt(0.6 * (1 - 5 / 7)), rel=1e-14)


def test_sigma_vanishes_for_tiny_beta():
    s = schedule_from_betas([0.1, 1e-18])
    assert sigma(2, s) < 1e-8


def test_ddim_inverts_q_sample():
    s = make_linear_schedule(1000)
    rng = np.random.default_rng(1)
    z0, xi = rng.normal(size=8), rng.normal(size=8)
    for r in (1, 10, 500, 1000):
        zr = q_sample(z0, r, xi, s)
        np.testing.assert_allclose(ddim_step(xi, zr, r, 0, None, s), z0, rtol=1e-9, atol=1e-9)


def test_ddim_identity_step():
    s = schedule_from_betas([1e-300, 1e-300])  # alpha_bar == 1 to double precision
    z = np.array([0.4, -2.0])
    np.testing.assert_array_equal(ddim_step(np.array([9.0, 9.0]), z, 2, 1, None, s), z)


def test_ddim_matches_scalar_loop():
    s = make_linear_schedule(100)
    rng = np.random.default_rng(4)
    for _ in range(20):
        r = int(rng.integers(2, 101))
        r_prev = int(rng.integers(0, r))
        eps, z, nz = rng.normal(size=(3, 6))
        got = ddim_step(eps, z, r, r_prev, nz, s)
        want = ddim_step_scalar(eps, z, s.alpha_bars[r], s.alpha_bars[r_prev], nz)
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-14)


def test_ddim_requires_noise_when_stochastic():
    s = make_linear_schedule(100)
    with pytest.raises(ValueError, match="requires noise"):
        ddim_step(np.zeros(2), np.zeros(2), 50, 40, None, s)


def test_ddim_deterministic_ignores_noise():
    s = make_linear_schedule(100)
    a = ddim_step(np.ones(2), np.ones(2), 30, 0, np.array([100.0, -100.0]), s)
    b = ddim_step(np.ones(2), np.ones(2), 30, 0, None, s)
    np.testing.assert_array_equal(a, b)


def test_ddim_rejects_inconsistent_schedule():
    # non-monotone hand-built table; generated schedules can never produce this
    s = make_linear_schedule(10)
    broken = type(s)(betas=s.betas, alphas=s.alphas, alpha_bars=np.array([1.0] + [0.5] * 5 + [0.6] * 5))
    with pytest.raises(ValueError):
        ddim_step(np.zeros(1), np.zeros(1), 6, 5, np.zeros(1), broken)


def test_ddim_is_differentiable_in_eps():
    s = make_linear_schedule(100)
    rng = np.random.default_rng(2)
    z = rng.normal(size=(2, 3))
    eps = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    out = ddim_step(eps, z, 40, 0, None, s)
    (g,) = grad(ops.sum(out), [eps])
    ab = s.alpha_bars[40]
    np.testing.assert_allclose(g, np.full((2, 3), -math.sqrt(1 - ab) / math.sqrt(ab)), rtol=1e-12)
    np.testing.assert_allclose(out.data, ddim_step(eps.data, z, 40, 0, None, s), rtol=1e-15)


def test_subsequence_examples():
    assert make_ddim_subsequence(1000, 1).steps == (1000,)
    assert make_ddim_subsequence(8, 4).steps == (2, 4, 6, 8)
    assert make_ddim_subsequence(8, 4).pairs() == [(8, 6), (6, 4), (4, 2), (2, 0)]
    with pytest.raises(ValueError):
        make_ddim_subsequence(8, 9)


@given(n=st.integers(1, 2000), data=st.data())
def test_subsequence_contract(n, data):
    m = data.draw(st.integers(1, n))
    steps = make_ddim_subsequence(n, m).steps
    assert len(steps) == m and steps[-1] == n and steps[0] >= 1
    assert all(a < b for a, b in zip(steps, steps[1:]))


def test_time_embedding():
    e1, e1b, e2 = time_embed(1, 32), time_embed(1, 32), time_embed(2, 32)
    assert e1.shape == (32,)
    np.testing.assert_array_equal(e1, e1b)
    assert not np.array_equal(e1, e2)
    batch = time_embed(np.arange(1, 1001), 32)
    assert len({row.tobytes() for row in batch}) == 1000
    with pytest.raises(ValueError):
        time_embed(1, 7)


def test_q_sample_and_sigma_match_scalar_oracles():
    s = make_linear_schedule(1000)
    rng = np.random.default_rng(9)
    for _ in range(100):
        r = int(rng.integers(1, 1001))
        z0, xi = rng.normal(size=5), rng.normal(size=5)
        np.testing.assert_allclose(q_sample(z0, r, xi, s), q_sample_scalar(z0, r, xi, s.alpha_bars), rtol=1e-12)
        if r > 1:
            assert sigma(r, s) == pytest.approx(sigma_scalar(s.alpha_bars[r], s.alpha_bars[r - 1]), rel=1e-12)
