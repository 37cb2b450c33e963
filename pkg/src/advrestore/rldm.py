"""Restoration latent diffusion model: frozen autoencoder + conditional UNet.

The UNet predicts the noise of a noisy high-quality latent given the latent of
the degraded image, concatenated along channels, and a sinusoidal timestep
embedding. Restoration runs the strided DDIM reverse process in latent space
and decodes the final latent.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, backward, no_grad, nn, ops, optim
from .diffusion import (
    DdimSubsequence,
    ddim_step,
    make_ddim_subsequence,
    make_linear_schedule,
    q_sample,
    sigma,
    time_embed,
)

log = logging.getLogger(__name__)


def as_batch(x, channels=None):
    """Promote (H, W) or (C, H, W) images to a (N, C, H, W) batch."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or (channels is not None and x.shape[1] != channels):
        raise ValueError(f"expected an image batch with {channels} channel(s), got shape {list(x.shape)}")
    return x


# ---------------------------------------------------------------- autoencoder


@dataclass
class AutoencoderConfig:
    image_size: int = 32
    image_channels: int = 1
    factor: int = 4
    latent_channels: int = 4
    widths: tuple = (16, 32)


class Autoencoder(nn.Module):
    """Deterministic conv autoencoder with ``log2(factor)`` stride-2 stages.

    ``latent_scale`` rescales encoder outputs to roughly unit variance; it is
    fixed once after training and applied inside :meth:`encode_t`/:meth:`decode_t`.
    """

    def __init__(self, cfg=AutoencoderConfig(), seed=0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        n_down = int(np.log2(cfg.factor))
        if 2**n_down != cfg.factor or cfg.image_size % cfg.factor:
            raise ValueError(f"factor {cfg.factor} must be a power of 2 dividing {cfg.image_size}")
        w0, w1 = cfg.widths
        self.enc_in = nn.Conv2d(cfg.image_channels, w0, 3, rng)
        self.enc_down = [nn.Conv2d(w0 if i == 0 else w1, w1, 3, rng, stride=2) for i in range(n_down)]
        self.enc_out = nn.Conv2d(w1, cfg.latent_channels, 1, rng)
        self.dec_in = nn.Conv2d(cfg.latent_channels, w1, 3, rng)
        self.dec_up = [nn.ConvTranspose2d(w1, w1 if i + 1 < n_down else w0, 2, rng, stride=2) for i in range(n_down)]
        self.dec_out = nn.Conv2d(w0, cfg.image_channels, 3, rng)
        self.latent_scale = 1.0

    @property
    def latent_shape(self):
        s = self.cfg.image_size // self.cfg.factor
        return (self.cfg.latent_channels, s, s)

    def encode_t(self, x):
        h = ops.silu(self.enc_in(x))
        for layer in self.enc_down:
            h = ops.silu(layer(h))
        return ops.scale(self.enc_out(h), self.latent_scale)

    def decode_t(self, z):
        h = ops.silu(self.dec_in(ops.scale(z, 1.0 / self.latent_scale)))
        for layer in self.dec_up:
            h = ops.silu(layer(h))
        return self.dec_out(h)

    def _check_image(self, x):
        x = as_batch(x, self.cfg.image_channels)
        size = self.cfg.image_size
        if x.shape[2:] != (size, size):
            raise ValueError(f"encode: expected {size}x{size} images, got {list(x.shape[2:])}")
        return x

    def encode(self, x):
        x = self._check_image(x)
        with no_grad():
            return self.encode_t(Tensor(x)).data

    def decode(self, z):
        """Decode latents and clamp the image to [0, 1]."""
        z = np.asarray(z, dtype=np.float64)
        if z.ndim == 3:
            z = z[None]
        if z.shape[1:] != self.latent_shape:
            raise ValueError(f"decode: expected latent shape {list(self.latent_shape)}, got {list(z.shape[1:])}")
        with no_grad():
            return np.clip(self.decode_t(Tensor(z)).data, 0.0, 1.0)

    def config_dict(self):
        return {
            "image_size": self.cfg.image_size,
            "image_channels": self.cfg.image_channels,
            "factor": self.cfg.factor,
            "latent_channels": self.cfg.latent_channels,
            "widths": list(self.cfg.widths),
            "latent_scale": self.latent_scale,
        }

    @classmethod
    def from_state(cls, state, config):
        cfg = AutoencoderConfig(
            image_size=config["image_size"],
            image_channels=config["image_channels"],
            factor=config["factor"],
            latent_channels=config["latent_channels"],
            widths=tuple(config["widths"]),
        )
        ae = cls(cfg)
        ae.load_state_dict(state)
        ae.latent_scale = float(config["latent_scale"])
        return ae.freeze()


def train_autoencoder(images, steps=1500, batch_size=32, lr=2e-3, seed=0, cfg=AutoencoderConfig()):
    """Fit the autoencoder by pixel MSE, fix ``latent_scale``, and freeze it."""
    images = as_batch(images, cfg.image_channels)
    rng = np.random.default_rng(seed)
    ae = Autoencoder(cfg, seed=seed)
    opt = optim.Adam(ae.parameters(), lr)
    for step in range(steps):
        if step == int(0.7 * steps):
            opt.lr = lr * 0.3
        idx = rng.integers(0, len(images), size=batch_size)
        x = Tensor(images[idx])
        opt.zero_grad()
        loss = ops.mse(ae.decode_t(ae.encode_t(x)), x)
        if not np.isfinite(loss.data):
            raise FloatingPointError(f"autoencoder training diverged at step {step}")
        backward(loss)
        opt.step()
        if step % 250 == 0:
            log.info("autoencoder step %d loss %.5f", step, float(loss.data))
    with no_grad():
        z = np.concatenate([ae.encode_t(Tensor(images[i : i + 128])).data for i in range(0, len(images), 128)])
    ae.latent_scale = float(1.0 / z.std())
    return ae.freeze()


# ----------------------------------------------------------------------- UNet


@dataclass
class UNetConfig:
    latent_channels: int = 4
    widths: tuple = (24, 32)
    time_dim: int = 32
    groups: int = 8


class ResBlock(nn.Module):
    def __init__(self, channels, tdim, groups, rng):
        self.norm1 = nn.GroupNorm(groups, channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, rng)
        self.temb = nn.Linear(tdim, channels, rng)
        self.norm2 = nn.GroupNorm(groups, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, rng)

    def forward(self, x, t):
        h = self.conv1(ops.silu(self.norm1(x)))
        h = ops.add_bias(h, self.temb(t))
        h = self.conv2(ops.silu(self.norm2(h)))
        return ops.add(x, h)


class ConditionalUNet(nn.Module):
    """Two-level UNet over concatenated ``[condition, noisy]`` latents."""

    def __init__(self, cfg=UNetConfig(), seed=0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        c0, c1 = cfg.widths
        tdim = 2 * cfg.time_dim
        self.t1 = nn.Linear(cfg.time_dim, tdim, rng)
        self.t2 = nn.Linear(tdim, tdim, rng)
        self.conv_in = nn.Conv2d(2 * cfg.latent_channels, c0, 3, rng)
        self.res_hi = ResBlock(c0, tdim, cfg.groups, rng)
        self.down = nn.Conv2d(c0, c1, 3, rng, stride=2)
        self.res_lo = ResBlock(c1, tdim, cfg.groups, rng)
        self.up = nn.Conv2d(c0 + c1, c0, 3, rng)
        self.norm_out = nn.GroupNorm(cfg.groups, c0)
        self.conv_out = nn.Conv2d(c0, cfg.latent_channels, 3, rng)

    @property
    def in_channels(self):
        return self.conv_in.weight.shape[1]

    def forward(self, z_cond, z_noisy, r):
        z_cond = z_cond if isinstance(z_cond, Tensor) else Tensor(z_cond)
        z_noisy = z_noisy if isinstance(z_noisy, Tensor) else Tensor(z_noisy)
        if z_cond.shape != z_noisy.shape:
            raise ValueError(f"unet: shape mismatch {list(z_cond.shape)} vs {list(z_noisy.shape)}")
        n = z_noisy.shape[0]
        r = np.broadcast_to(np.asarray(r), (n,))
        t = Tensor(time_embed(r, self.cfg.time_dim))
        t = ops.silu(self.t2(ops.silu(self.t1(t))))
        h = self.conv_in(ops.concat([z_cond, z_noisy], axis=1))
        skip = self.res_hi(h, t)
        h = self.res_lo(self.down(skip), t)
        h = self.up(ops.concat([ops.upsample_nearest(h, 2), skip], axis=1))
        return self.conv_out(ops.silu(self.norm_out(h)))

    def config_dict(self):
        return {
            "latent_channels": self.cfg.latent_channels,
            "widths": list(self.cfg.widths),
            "time_dim": self.cfg.time_dim,
            "groups": self.cfg.groups,
        }


# ----------------------------------------------------------------------- RLDM


@dataclass
class RLDM:
    autoencoder: Autoencoder
    unet: ConditionalUNet
    schedule: object = field(default_factory=make_linear_schedule)
    subsequence: DdimSubsequence = None

    def __post_init__(self):
        if self.subsequence is None:
            self.subsequence = make_ddim_subsequence(self.schedule.n_steps, 8)
        if max(self.subsequence.steps) > self.schedule.n_steps:
            raise ValueError("DDIM subsequence exceeds the schedule length")

    def unet_forward(self, z_cond, z_noisy, r):
        return self.unet(z_cond, z_noisy, r)


def rldm_loss(eps_pred, xi):
    """Noise-prediction objective ``mean ||xi - eps_pred||^2``."""
    return ops.mse(eps_pred, Tensor(xi))


def _latent_loss_step(model, z_hq, z_d, rng, opt, r=None, xi=None):
    n = len(z_hq)
    if r is None:
        r = rng.integers(1, model.schedule.n_steps + 1, size=n)
    if xi is None:
        xi = rng.standard_normal(z_hq.shape)
    z_r = q_sample(z_hq, r, xi, model.schedule)
    opt.zero_grad()
    loss = rldm_loss(model.unet_forward(z_d, z_r, r), xi)
    if not np.isfinite(loss.data):
        raise FloatingPointError("RLDM training diverged (non-finite loss)")
    backward(loss)
    opt.step()
    return float(loss.data)


def train_rldm_step(model, x_hq, x_d, rng, opt, r=None, xi=None):
    """One optimisation step on a batch of (high-quality, degraded) images; returns the loss."""
    if not model.autoencoder.frozen:
        raise RuntimeError("autoencoder must be frozen before RLDM training")
    z_hq = model.autoencoder.encode(x_hq)
    z_d = model.autoencoder.encode(x_d)
    return _latent_loss_step(model, z_hq, z_d, rng, opt, r, xi)


def train_rldm(model, x_hq, x_d, steps=3000, batch_size=64, lr=1e-3, seed=0, callback=None):
    """Train the UNet only. Latents are precomputed once since the encoder is frozen."""
    if not model.autoencoder.frozen:
        raise RuntimeError("autoencoder must be frozen before RLDM training")
    rng = np.random.default_rng(seed)
    z_hq = model.autoencoder.encode(x_hq)
    z_d = model.autoencoder.encode(x_d)
    opt = optim.Adam(model.unet.parameters(), lr)
    losses = []
    for step in range(steps):
        if step == int(0.75 * steps):
            opt.lr = lr * 0.3
        idx = rng.integers(0, len(z_hq), size=batch_size)
        losses.append(_latent_loss_step(model, z_hq[idx], z_d[idx], rng, opt))
        if callback is not None:
            callback(step, model)
        if step % 500 == 0:
            log.info("rldm step %d loss %.4f", step, losses[-1])
    return np.array(losses)


@dataclass
class RestoreState:
    x_bar: np.ndarray  # decoded, clamped restoration
    eps_final: np.ndarray  # UNet output at the last reverse timestep
    z_final: np.ndarray  # latent that was decoded
    z_before_final: np.ndarray  # latent entering the last reverse step
    r_final: int  # last reverse timestep (S_1)
    timesteps: list  # UNet call timesteps in call order


def restore(x_in, model, seed=0):
    """Restore degraded image(s) ``x_in`` with the strided DDIM reverse process.

    Deterministic given ``seed``; the returned state lets an attack resume
    from the final reverse step.
    """
    if model.subsequence.m < 1:
        raise ValueError("empty DDIM subsequence")
    ae = model.autoencoder
    z_cond = ae.encode(x_in)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(z_cond.shape)
    calls = []
    eps = z_before = None
    with no_grad():
        for r, r_prev in model.subsequence.pairs():
            eps = model.unet_forward(z_cond, z, r).data
            calls.append(r)
            sig = sigma(r, model.schedule, r_prev)
            noise = rng.standard_normal(z.shape) if sig > 0 else None
            z_before = z
            z = ddim_step(eps, z, r, r_prev, noise, model.schedule)
    return RestoreState(
        x_bar=ae.decode(z),
        eps_final=eps,
        z_final=z,
        z_before_final=z_before,
        r_final=model.subsequence.steps[0],
        timesteps=calls,
    )


def rldm_config_dict(model):
    return {
        "unet": model.unet.config_dict(),
        "n_steps": model.schedule.n_steps,
        "beta_start": float(model.schedule.betas[0]),
        "beta_end": float(model.schedule.betas[-1]),
        "ddim_steps": list(model.subsequence.steps),
    }


def rldm_from_state(autoencoder, state, config):
    from .diffusion import DdimSubsequence as _Sub

    ucfg = config["unet"]
    unet = ConditionalUNet(
        UNetConfig(ucfg["latent_channels"], tuple(ucfg["widths"]), ucfg["time_dim"], ucfg["groups"])
    )
    unet.load_state_dict(state)
    sched = make_linear_schedule(config["n_steps"], config["beta_start"], config["beta_end"])
    return RLDM(autoencoder, unet.freeze(), sched, _Sub(tuple(config["ddim_steps"])))
