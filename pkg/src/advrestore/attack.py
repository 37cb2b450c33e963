"""Adversarial restoration attack and the pixel-space sign-gradient baselines.

All attacks run batched over (source, target) pairs. Pairs never interact: the
loss is a sum of per-pair terms and every model acts per sample, so the sign
of the batched gradient equals the per-pair sign.
"""
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, grad, no_grad, ops
from .diffusion import ddim_step
from .facerec import dfanet_dropout_wrap, embeddings
from .rldm import as_batch, restore

VARIANTS = ("fim", "dfanet", "advrestore-fim", "advrestore-dfanet")
ROW_LABELS = {
    "fim": "FIM",
    "advrestore-fim": "FIM+AdvRestore",
    "dfanet": "DFANet",
    "advrestore-dfanet": "DFANet+AdvRestore",
}


@dataclass(frozen=True)
class AttackConfig:
    beta: float = 1 / 255
    n_max: int = 200
    rho: float = 8 / 255
    seed: int = 0
    variant: str = "advrestore-fim"
    dropout_p: float = 0.1
    exact_clip_grad: bool = False  # straight-through gradient for the budget clamp by default

    def __post_init__(self):
        if not self.beta >= 0.0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.n_max < 1:
            raise ValueError(f"n_max must be >= 1, got {self.n_max}")
        if not 0.0 < self.rho < 1.0:
            raise ValueError(f"rho must lie in (0, 1), got {self.rho}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown attack variant {self.variant!r}; expected one of {', '.join(VARIANTS)}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")


@dataclass
class AttackResult:
    x_adv: np.ndarray
    x_ref: np.ndarray  # clip anchor
    loss_trace: np.ndarray  # (iterations_run, n_pairs), loss before each update
    final_loss: np.ndarray  # surrogate loss of x_adv (no dropout)
    iterations_run: int
    variant: str = ""
    extras: dict = field(default_factory=dict, repr=False)

    @property
    def budget_linf(self):
        return float(np.max(np.abs(self.x_adv - self.x_ref)))


def clip_budget(y, anchor, rho):
    """Clamp to the L-inf ball of radius ``rho`` around ``anchor``, then to [0, 1]."""
    y, anchor = np.asarray(y, dtype=np.float64), np.asarray(anchor, dtype=np.float64)
    if y.shape != anchor.shape:
        raise ValueError(f"clip_budget: shape mismatch {list(y.shape)} vs {list(anchor.shape)}")
    return np.clip(np.clip(y, anchor - rho, anchor + rho), 0.0, 1.0)


def clip_budget_t(y, anchor, rho, straight_through=True):
    """Differentiable :func:`clip_budget`; the valid-range clamp always uses its exact gradient."""
    if y.shape != anchor.shape:
        raise ValueError(f"clip_budget: shape mismatch {list(y.shape)} vs {list(anchor.shape)}")
    boxed = ops.clamp(y, anchor - rho, anchor + rho, straight_through=straight_through)
    return ops.clamp(boxed, 0.0, 1.0)


def _base(surrogate):
    return getattr(surrogate, "base", surrogate)


def target_embedding(surrogate, x_t):
    """``phi(F(x_t))`` on the plain surrogate; constant during an attack."""
    return embeddings(_base(surrogate), as_batch(x_t, 1))


def pair_losses(surrogate, x, target):
    """Per-pair ``||phi(F(x_i)) - target_i||^2`` as a (N,) Tensor."""
    diff = ops.sub(ops.l2_normalize(surrogate(x)), Tensor(target))
    return ops.sum(ops.square(diff), axis=1)


def adv_loss(surrogate, x_adv, x_t):
    """Attack loss summed over pairs; a scalar node differentiable back to ``x_adv``."""
    x_adv = x_adv if isinstance(x_adv, Tensor) else Tensor(as_batch(x_adv, 1))
    _base(surrogate).check_input(x_adv)
    return ops.sum(pair_losses(surrogate, x_adv, target_embedding(surrogate, x_t)))


def _clean_losses(surrogate, x, target):
    with no_grad():
        return pair_losses(_base(surrogate), Tensor(x), target).data


def _check_finite(values, it):
    if not np.all(np.isfinite(values)):
        raise FloatingPointError(f"non-finite attack loss at iteration {it}")


def _surrogate_for(cfg, surrogate):
    if cfg.variant.endswith("dfanet"):
        return dfanet_dropout_wrap(_base(surrogate), cfg.dropout_p, seed=cfg.seed)
    return surrogate


def fim_attack(x_s, x_t, surrogate, cfg=AttackConfig(variant="fim")):
    """Iterative sign-gradient attack in pixel space, anchored at ``x_s``."""
    x_s = as_batch(x_s, 1)
    view = _surrogate_for(cfg, surrogate)
    target = target_embedding(surrogate, x_t)
    x = x_s.copy()
    trace = []
    for it in range(cfg.n_max):
        xt = Tensor(x, requires_grad=True)
        losses = pair_losses(view, xt, target)
        _check_finite(losses.data, it)
        trace.append(losses.data.copy())
        (g,) = grad(ops.sum(losses), [xt])
        x = clip_budget(x - cfg.beta * np.sign(g), x_s, cfg.rho)
    return AttackResult(
        x_adv=x,
        x_ref=x_s,
        loss_trace=np.array(trace),
        final_loss=_clean_losses(surrogate, x, target),
        iterations_run=cfg.n_max,
        variant=cfg.variant,
    )


def advrestore_attack(x_s, x_t, rldm, surrogate, cfg=AttackConfig()):
    """Restore ``x_s``, then perturb the UNet output of the final reverse step.

    The final-step latent is recomputed from the saved pre-final latent each
    iteration, decoded, clipped around the restoration ``x_bar``, and scored.
    """
    x_s = as_batch(x_s, 1)
    view = _surrogate_for(cfg, surrogate)
    target = target_embedding(surrogate, x_t)
    state = restore(x_s, rldm, seed=cfg.seed)
    ae, sched = rldm.autoencoder, rldm.schedule
    r, z_last, x_bar = state.r_final, state.z_before_final, state.x_bar
    eps = state.eps_final.copy()
    st = not cfg.exact_clip_grad
    trace = []
    for it in range(cfg.n_max):
        e = Tensor(eps, requires_grad=True)
        x = clip_budget_t(ae.decode_t(ddim_step(e, z_last, r, 0, None, sched)), x_bar, cfg.rho, st)
        losses = pair_losses(view, x, target)
        _check_finite(losses.data, it)
        trace.append(losses.data.copy())
        (g,) = grad(ops.sum(losses), [e])
        eps = eps - cfg.beta * np.sign(g)
    x_adv = decode_perturbed(rldm, eps, z_last, r, x_bar, cfg.rho)
    return AttackResult(
        x_adv=x_adv,
        x_ref=x_bar,
        loss_trace=np.array(trace),
        final_loss=_clean_losses(surrogate, x_adv, target),
        iterations_run=cfg.n_max,
        variant=cfg.variant,
        extras={"eps": eps, "restore": state},
    )


def decode_perturbed(rldm, eps, z_last, r, x_bar, rho):
    """``Clip_{x_bar}(Dec(H(eps, z_last)))`` without taping."""
    with no_grad():
        z = ddim_step(eps, z_last, r, 0, None, rldm.schedule)
        return clip_budget(rldm.autoencoder.decode_t(Tensor(z)).data, x_bar, rho)


def run_attack(x_s, x_t, rldm, surrogate, cfg):
    if cfg.variant.startswith("advrestore"):
        return advrestore_attack(x_s, x_t, rldm, surrogate, cfg)
    return fim_attack(x_s, x_t, surrogate, cfg)


def success_curve(result, threshold):
    """White-box success rate (percent) before each iteration and after the last."""
    losses = np.vstack([result.loss_trace, result.final_loss[None]])
    return 100.0 * (losses < threshold).mean(axis=1)
