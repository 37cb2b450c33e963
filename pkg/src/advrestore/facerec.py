"""Toy face-embedding models, the normalized-embedding distance, and verification thresholds."""
import logging
from dataclasses import dataclass

import numpy as np

from .autodiff import Parameter, Tensor, backward, grad, no_grad, nn, ops, optim

log = logging.getLogger(__name__)

ROLES = ("surrogate", "victim")


@dataclass(frozen=True)
class FRConfig:
    widths: tuple = (16, 32, 48)
    first_kernel: int = 3
    extra_blocks: int = 0  # stride-1 convs appended at the lowest resolution
    embed_dim: int = 32
    image_size: int = 32

    def to_dict(self):
        return {
            "widths": list(self.widths),
            "first_kernel": self.first_kernel,
            "extra_blocks": self.extra_blocks,
            "embed_dim": self.embed_dim,
            "image_size": self.image_size,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["widths"]), d["first_kernel"], d["extra_blocks"], d["embed_dim"], d["image_size"])


SURROGATE_CONFIG = FRConfig()


def victim_config(arch_seed, embed_dim=32, image_size=32):
    """Draw a victim architecture that differs from the surrogate in width, kernel or depth."""
    rng = np.random.default_rng([arch_seed, 7919])
    while True:
        w0 = int(rng.choice([8, 12, 20, 24]))
        cfg = FRConfig(
            widths=(w0, 2 * w0, int(rng.choice([32, 40, 56, 64]))),
            first_kernel=int(rng.choice([3, 5])),
            extra_blocks=int(rng.integers(0, 2)),
            embed_dim=embed_dim,
            image_size=image_size,
        )
        if cfg != SURROGATE_CONFIG:
            return cfg


class EmbeddingModel(nn.Module):
    """Conv backbone: one full-resolution conv, two stride-2 stages, optional extra blocks, mean pool, linear."""

    def __init__(self, cfg=SURROGATE_CONFIG, role="surrogate", arch_seed=0, seed=0):
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}")
        self.cfg = cfg
        self.role = role
        self.arch_seed = arch_seed
        rng = np.random.default_rng(seed)
        w0, w1, w2 = cfg.widths
        self.stem = nn.Conv2d(1, w0, cfg.first_kernel, rng)
        self.stages = [nn.Conv2d(w0, w1, 3, rng, stride=2), nn.Conv2d(w1, w2, 3, rng, stride=2)]
        self.stages += [nn.Conv2d(w2, w2, 3, rng) for _ in range(cfg.extra_blocks)]
        self.head = nn.Linear(w2, cfg.embed_dim, rng)

    def features(self, x, feature_hook=None):
        h = ops.silu(self.stem(ops.add_scalar(x, -0.5)))
        for i, layer in enumerate([None] + self.stages):
            if i > 0:
                h = ops.silu(layer(h))
            if feature_hook is not None and i < len(self.stages):
                h = feature_hook(h)
        return h

    def forward(self, x, feature_hook=None):
        h = self.features(x, feature_hook)
        n, c, hh, ww = h.shape
        pooled = ops.scale(ops.sum(h, axis=(2, 3)), 1.0 / (hh * ww))
        return self.head(pooled)

    def check_input(self, x):
        size = self.cfg.image_size
        if x.ndim != 4 or x.shape[1:] != (1, size, size):
            raise ValueError(f"embed: expected (N, 1, {size}, {size}) images, got {list(x.shape)}")

    def config_dict(self):
        return {"arch": self.cfg.to_dict(), "role": self.role, "arch_seed": self.arch_seed}

    @classmethod
    def from_state(cls, state, config):
        model = cls(FRConfig.from_dict(config["arch"]), config["role"], config["arch_seed"])
        model.load_state_dict(state)
        return model.freeze()


def embed(model, x):
    """Raw embedding Tensor (N, D) of image batch ``x``; differentiable w.r.t. ``x``."""
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    if x.ndim == 3:
        x = ops.reshape(x, (1,) + x.shape)
    model.check_input(x)
    return model(x)


def embeddings(model, x, batch_size=256):
    """Normalized embeddings as a numpy array, computed without taping."""
    x = np.asarray(x, dtype=np.float64)
    out = []
    with no_grad():
        for i in range(0, len(x), batch_size):
            out.append(ops.l2_normalize(embed(model, x[i : i + batch_size])).data)
    return np.concatenate(out)


def normalize_phi(v):
    """L2 normalization of one vector or a batch of row vectors (arrays or Tensors)."""
    if isinstance(v, Tensor):
        return ops.l2_normalize(v if v.ndim == 2 else ops.reshape(v, (1, -1)))
    v = np.asarray(v, dtype=np.float64)
    out = ops.l2_normalize(np.atleast_2d(v)).data
    return out[0] if v.ndim == 1 else out


def embedding_distance(a, b):
    """``||phi(a) - phi(b)||^2`` per row; in [0, 4]."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"embedding_distance: dimension mismatch {list(a.shape)} vs {list(b.shape)}")
    d = normalize_phi(a) - normalize_phi(b)
    return np.sum(d * d, axis=-1)


def pair_distances(model, xa, xb):
    return np.sum((embeddings(model, xa) - embeddings(model, xb)) ** 2, axis=1)


# ------------------------------------------------------------------- threshold


@dataclass(frozen=True)
class VerificationThreshold:
    threshold: float
    far: float
    n_pairs: int

    def accepts(self, distances):
        return np.asarray(distances) < self.threshold


def threshold_from_distances(impostor_distances, far=0.01, min_pairs=100):
    """Smallest threshold whose accept set (``d < threshold``) holds ``floor(far * n)`` impostor pairs."""
    d = np.sort(np.asarray(impostor_distances, dtype=np.float64).reshape(-1))
    if len(d) < min_pairs:
        raise ValueError(f"threshold calibration needs at least {min_pairs} impostor pairs, got {len(d)}")
    if not 0.0 < far <= 1.0:
        raise ValueError(f"far must lie in (0, 1], got {far}")
    k = int(np.floor(far * len(d) + 1e-9))
    thr = np.nextafter(d[-1], np.inf) if k >= len(d) else d[k]
    if thr <= 0.0:
        raise ValueError("degenerate impostor distances: the FAR quantile is zero")
    return VerificationThreshold(float(thr), float(far), len(d))


def calibrate_threshold(model, xa, xb, far=0.01):
    """Calibrate on impostor image pairs ``(xa[i], xb[i])``."""
    return threshold_from_distances(pair_distances(model, xa, xb), far)


def verification_accuracy(model, threshold, genuine, impostor):
    """Fraction of correct accept/reject decisions over genuine and impostor pairs ``(xa, xb)``."""
    acc_g = threshold.accepts(pair_distances(model, *genuine))
    acc_i = threshold.accepts(pair_distances(model, *impostor))
    return float((acc_g.sum() + (~acc_i).sum()) / (len(acc_g) + len(acc_i)))


# -------------------------------------------------------------------- training


def _cosine_logits(model, x, head, scale):
    f = ops.l2_normalize(model(x))
    w = ops.transpose(ops.l2_normalize(ops.transpose(head)))
    return ops.scale(ops.matmul(f, w), scale)


def _jitter(x, rng):
    """Random one-pixel shifts; keeps the model from keying on exact pixel positions."""
    out = np.empty_like(x)
    shifts = rng.integers(-1, 2, size=(len(x), 2))
    for i, (dy, dx) in enumerate(shifts):
        out[i] = np.roll(x[i], (dy, dx), axis=(-2, -1))
    return out


def _prototype_head(model, images, labels, n_classes):
    f = embeddings(model, images)
    protos = np.stack([f[labels == k].mean(axis=0) for k in range(n_classes)])
    return Parameter(protos.T.copy(), "head")


def train_fr_model(
    images, labels, role="surrogate", arch_seed=0, cfg=None, steps=1500, batch_size=64, lr=2e-3, scale=16.0, seed=0
):
    """Train with a cosine-softmax identity head, then drop the head and freeze."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    classes, labels = np.unique(labels, return_inverse=True)
    counts = np.bincount(labels)
    if len(classes) < 2 or counts.min() < 2:
        raise ValueError("train_fr_model needs at least 2 identities with at least 2 images each")
    if cfg is None:
        cfg = SURROGATE_CONFIG if role == "surrogate" else victim_config(arch_seed)
    rng = np.random.default_rng(seed)
    model = EmbeddingModel(cfg, role, arch_seed, seed=seed)
    head = Parameter(rng.normal(size=(cfg.embed_dim, len(classes))), "head")
    opt = optim.Adam(model.parameters() + [head], lr)
    for step in range(steps):
        if step == int(0.7 * steps):
            opt.lr = lr * 0.2
        idx = rng.integers(0, len(images), size=batch_size)
        opt.zero_grad()
        loss = ops.cross_entropy(_cosine_logits(model, Tensor(_jitter(images[idx], rng)), head, scale), labels[idx])
        if not np.isfinite(loss.data):
            raise FloatingPointError(f"face model training diverged at step {step}")
        backward(loss)
        opt.step()
        if step % 500 == 0:
            log.info("%s(%d) step %d loss %.4f", role, arch_seed, step, float(loss.data))
    return model.freeze()


def adversarial_finetune(
    model, images, labels, rho=8 / 255, steps=400, batch_size=64, lr=5e-4, scale=16.0, seed=0
):
    """Single-step sign-gradient adversarial training of a copy of ``model``.

    The identity head is re-seeded from class-mean embedding directions; each
    step trains on clean and FGSM-perturbed images.
    """
    images = np.asarray(images, dtype=np.float64)
    classes, labels = np.unique(np.asarray(labels), return_inverse=True)
    rng = np.random.default_rng(seed)
    robust = EmbeddingModel(model.cfg, model.role, model.arch_seed)
    robust.load_state_dict(model.state_dict())
    head = _prototype_head(robust, images, labels, len(classes))
    opt = optim.Adam(robust.parameters() + [head], lr)
    for step in range(steps):
        idx = rng.integers(0, len(images), size=batch_size)
        x, y = images[idx], labels[idx]
        xt = Tensor(x, requires_grad=True)
        (gx,) = grad(ops.cross_entropy(_cosine_logits(robust, xt, head, scale), y), [xt])
        x_adv = np.clip(x + rho * rng.uniform(0.5, 1.0, size=(len(x), 1, 1, 1)) * np.sign(gx), 0.0, 1.0)
        opt.zero_grad()
        loss = ops.cross_entropy(_cosine_logits(robust, Tensor(np.concatenate([x, x_adv])), head, scale), np.concatenate([y, y]))
        if not np.isfinite(loss.data):
            raise FloatingPointError(f"adversarial fine-tuning diverged at step {step}")
        backward(loss)
        opt.step()
    return robust.freeze()


# ------------------------------------------------------------------- dropout view


class DropoutSurrogate:
    """Surrogate view that drops intermediate feature-map entries with a fresh mask per forward call."""

    def __init__(self, base, p, seed=0):
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
        self.base = base
        self.p = p
        self.cfg = base.cfg
        self.rng = np.random.default_rng(seed)

    def _drop(self, h):
        keep = (self.rng.random(h.shape) >= self.p) / (1.0 - self.p)
        return ops.mul(h, Tensor(keep))

    def check_input(self, x):
        self.base.check_input(x)

    def __call__(self, x):
        if self.p == 0.0:
            return self.base(x)
        return self.base(x, feature_hook=self._drop)


def dfanet_dropout_wrap(surrogate, p=0.1, seed=0):
    return DropoutSurrogate(surrogate, p, seed)
