"""Variance schedules, forward noising, sinusoidal time embedding and the DDIM reverse step.

Timesteps are 1-based (``1..n_steps``); index 0 of :attr:`VarianceSchedule.alpha_bars`
holds the ``alpha_bar_0 = 1`` convention so the final reverse step is noiseless.
"""
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class VarianceSchedule:
    betas: np.ndarray  # beta_1..beta_N
    alphas: np.ndarray  # 1 - beta
    alpha_bars: np.ndarray  # length N+1; alpha_bars[0] == 1

    @property
    def n_steps(self):
        return len(self.betas)

    def alpha_bar(self, r):
        if not 0 <= r <= self.n_steps:
            raise ValueError(f"timestep {r} outside [0, {self.n_steps}]")
        return float(self.alpha_bars[r])


def schedule_from_betas(betas):
    betas = np.asarray(betas, dtype=np.float64)
    if betas.ndim != 1 or len(betas) < 1:
        raise ValueError("betas must be a non-empty 1-D sequence")
    if np.any(betas <= 0.0) or np.any(betas >= 1.0):
        raise ValueError("every beta must lie strictly inside (0, 1)")
    alphas = 1.0 - betas
    alpha_bars = np.empty(len(betas) + 1)
    alpha_bars[0] = 1.0
    # explicit recurrence keeps alpha_bar_r == alpha_bar_{r-1} * alpha_r bit-exact
    for r, a in enumerate(alphas, start=1):
        alpha_bars[r] = alpha_bars[r - 1] * a
    return VarianceSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def make_linear_schedule(n_steps=1000, beta_start=1e-4, beta_end=0.02):
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return schedule_from_betas(np.linspace(beta_start, beta_end, n_steps))


def _check_timestep(r, sched):
    if not 1 <= r <= sched.n_steps:
        raise ValueError(f"timestep {r} outside [1, {sched.n_steps}]")


def q_sample(z0, r, xi, sched):
    """Closed-form forward noising ``sqrt(ab_r) z0 + sqrt(1 - ab_r) xi``.

    ``r`` is a single timestep or, for a batch, one timestep per leading row.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    xi = np.asarray(xi, dtype=np.float64)
    if z0.shape != xi.shape:
        raise ValueError(f"q_sample: shape mismatch {list(z0.shape)} vs {list(xi.shape)}")
    r_arr = np.asarray(r)
    if r_arr.ndim == 0:
        _check_timestep(int(r_arr), sched)
        ab = sched.alpha_bars[int(r_arr)]
        return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * xi
    if r_arr.shape != z0.shape[:1]:
        raise ValueError(f"q_sample: need one timestep per sample, got {list(r_arr.shape)}")
    if np.any(r_arr < 1) or np.any(r_arr > sched.n_steps):
        raise ValueError(f"timesteps outside [1, {sched.n_steps}]")
    ab = sched.alpha_bars[r_arr].reshape((-1,) + (1,) * (z0.ndim - 1))
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * xi


def sigma(r, sched, r_prev=None):
    """Reverse-step noise scale.

    ``r_prev`` defaults to ``r - 1``; on a strided DDIM subsequence pass the
    predecessor within the subsequence. ``sigma == 0`` whenever ``r_prev == 0``.
    """
    _check_timestep(r, sched)
    r_prev = r - 1 if r_prev is None else r_prev
    ab = sched.alpha_bars[r]
    ab_prev = sched.alpha_bars[r_prev]
    if ab_prev == ab:
        return 0.0
    var = (1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)
    if var < 0.0:
        raise ValueError(f"schedule inconsistency: alpha_bar not decreasing between {r_prev} and {r}")
    return float(np.sqrt(var))


def _ddim_coefficients(ab, ab_prev, sig, tol=1e-12):
    dir_sq = 1.0 - ab_prev - sig * sig
    if dir_sq < -tol:
        raise ValueError(f"schedule inconsistency: 1 - alpha_bar_prev - sigma^2 = {dir_sq:.3e} < 0")
    return float(np.sqrt(max(dir_sq, 0.0)))


def ddim_step(eps_theta, z, r, r_prev, noise, sched):
    """One reverse step from timestep ``r`` to ``r_prev``.

    Returns ``sqrt(ab_prev) * z_tilde + sqrt(1 - ab_prev - sigma^2) * eps + sigma * noise``
    with ``z_tilde = (z - sqrt(1 - ab_r) * eps) / sqrt(ab_r)``. Works with numpy
    arrays and with autodiff tensors for ``eps_theta``; ``noise`` is ignored (and
    may be None) when sigma is zero.
    """
    if tuple(np.shape(getattr(eps_theta, "data", eps_theta))) != tuple(np.shape(getattr(z, "data", z))):
        raise ValueError(
            f"ddim_step: shape mismatch {list(np.shape(getattr(eps_theta, 'data', eps_theta)))}"
            f" vs {list(np.shape(getattr(z, 'data', z)))}"
        )
    _check_timestep(r, sched)
    if not 0 <= r_prev < r:
        raise ValueError(f"ddim_step: need 0 <= r_prev < r, got r={r}, r_prev={r_prev}")
    ab = sched.alpha_bars[r]
    ab_prev = sched.alpha_bars[r_prev]
    sig = sigma(r, sched, r_prev)
    dir_coef = _ddim_coefficients(ab, ab_prev, sig)
    z_tilde = (z - np.sqrt(1.0 - ab) * eps_theta) / np.sqrt(ab)
    out = np.sqrt(ab_prev) * z_tilde + dir_coef * eps_theta
    if sig > 0.0:
        if noise is None:
            raise ValueError(f"ddim_step: sigma={sig:.3e} > 0 at r={r} requires noise")
        out = out + sig * np.asarray(noise, dtype=np.float64)
    return out


@dataclass(frozen=True)
class DdimSubsequence:
    steps: tuple  # strictly increasing, subset of 1..N

    @property
    def m(self):
        return len(self.steps)

    def pairs(self):
        """(r, r_prev) in traversal order S_m..S_1; the last pair ends at 0."""
        desc = list(reversed(self.steps))
        return [(r, desc[i + 1] if i + 1 < len(desc) else 0) for i, r in enumerate(desc)]


def make_ddim_subsequence(n_steps, m):
    if not 1 <= m <= n_steps:
        raise ValueError(f"subsequence length m={m} outside [1, {n_steps}]")
    return DdimSubsequence(tuple((k * n_steps) // m for k in range(1, m + 1)))


def time_embed(r, dim=32, max_period=10000.0):
    """Sinusoidal embedding: ``[sin(r * f_k), cos(r * f_k)]`` at geometric frequencies.

    ``r`` may be a scalar (returns shape (dim,)) or a 1-D array (returns (len(r), dim)).
    """
    if dim <= 0 or dim % 2:
        raise ValueError(f"embedding dimension must be even and positive, got {dim}")
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    r_arr = np.asarray(r, dtype=np.float64)
    args = r_arr[..., None] * freqs
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)
