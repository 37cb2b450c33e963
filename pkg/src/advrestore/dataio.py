"""Synthetic face data, degradation, and on-disk formats.

Formats
-------
* Images: 8-bit binary PGM (``P5``), plus lossless ``.npy`` float64 dumps.
* Checkpoints: ``ADVRCKPT`` magic, little-endian version/kind/config header,
  named float64 parameter blobs and a trailing SHA-256 of everything before it.
* Manifests: JSON with sorted keys and a trailing newline.
"""
import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

IMAGE_SIZE = 32

# ----------------------------------------------------------------- synthetic faces


def _soft_ellipse(yy, xx, cy, cx, ry, rx, softness=0.08):
    d = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
    return 1.0 / (1.0 + np.exp(-(1.0 - d) / softness))


def _identity_params(rng):
    return {
        "bg": rng.uniform(0.1, 0.35),
        "bg_tilt": rng.uniform(-0.1, 0.1),
        "face_rx": rng.uniform(8.0, 11.0),
        "face_ry": rng.uniform(10.0, 13.0),
        "face_dy": rng.uniform(-1.0, 1.5),
        "skin": rng.uniform(0.55, 0.85),
        "hair": rng.uniform(0.02, 0.45),
        "hairline": rng.uniform(0.35, 0.75),
        "eye_dy": rng.uniform(-5.0, -2.5),
        "eye_dx": rng.uniform(3.5, 6.0),
        "eye_r": rng.uniform(1.1, 2.2),
        "eye_dark": rng.uniform(0.05, 0.3),
        "brow_gap": rng.uniform(1.8, 3.2),
        "brow_len": rng.uniform(1.5, 3.2),
        "brow_dark": rng.uniform(0.05, 0.45),
        "nose_len": rng.uniform(1.5, 4.5),
        "nose_dark": rng.uniform(0.3, 0.6),
        "mouth_dy": rng.uniform(4.0, 7.0),
        "mouth_w": rng.uniform(2.5, 6.5),
        "mouth_h": rng.uniform(0.6, 1.5),
        "mouth_curve": rng.uniform(-1.2, 1.2),
        "mouth_dark": rng.uniform(0.1, 0.45),
    }


def render_face(p, shift=(0.0, 0.0), gain=1.0, offset=0.0, light=0.0, curve_jitter=0.0, size=IMAGE_SIZE):
    """Rasterize one face from identity parameters ``p`` and per-variant jitter."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    cy, cx = c + p["face_dy"] + shift[0], c + shift[1]
    img = p["bg"] + p["bg_tilt"] * (yy - c) / size

    face = _soft_ellipse(yy, xx, cy, cx, p["face_ry"], p["face_rx"])
    img = img + face * (p["skin"] - img)

    head = _soft_ellipse(yy, xx, cy - 0.6, cx, p["face_ry"] + 1.2, p["face_rx"] + 1.2)
    top = 1.0 / (1.0 + np.exp(-((cy - p["hairline"] * p["face_ry"]) - yy) / 0.6))
    hair = head * top
    img = img + hair * (p["hair"] - img)

    ey = cy + p["eye_dy"]
    for side in (-1.0, 1.0):
        ex = cx + side * p["eye_dx"]
        eye = _soft_ellipse(yy, xx, ey, ex, p["eye_r"] * 0.8, p["eye_r"], softness=0.15)
        img = img + eye * (p["eye_dark"] - img)
        brow = _soft_ellipse(yy, xx, ey - p["brow_gap"], ex, 0.6, p["brow_len"], softness=0.2)
        img = img + brow * (p["brow_dark"] - img)

    nose = _soft_ellipse(yy, xx, cy + p["nose_len"] / 2.0 - 0.5, cx, p["nose_len"], 0.7, softness=0.2)
    img = img + 0.6 * nose * (p["nose_dark"] * p["skin"] - img)

    my = cy + p["mouth_dy"]
    curve = p["mouth_curve"] + curve_jitter
    bend = -curve * ((xx - cx) / max(p["mouth_w"], 1e-6)) ** 2
    mouth = _soft_ellipse(yy - bend, xx, my, cx, p["mouth_h"], p["mouth_w"], softness=0.15)
    img = img + mouth * (p["mouth_dark"] - img)

    img = img * gain + offset + light * (xx - c) / size
    return img


def generate_synthetic_faces(seed, n_identities, n_variants, noise_sigma=0.01, size=IMAGE_SIZE):
    """Procedural face images, shape (n_identities * n_variants, 1, size, size).

    Identity parameters are fixed per identity; pose shift, illumination, a small
    expression change and pixel noise vary per variant. Pure function of its arguments.
    """
    if n_identities < 2:
        raise ValueError(f"need at least 2 identities, got {n_identities}")
    if n_variants < 1:
        raise ValueError(f"need at least 1 variant per identity, got {n_variants}")
    root = np.random.SeedSequence(seed)
    id_seqs = root.spawn(n_identities)
    images = np.empty((n_identities * n_variants, 1, size, size))
    identities = np.repeat(np.arange(n_identities), n_variants)
    variants = np.tile(np.arange(n_variants), n_identities)
    for i, sq in enumerate(id_seqs):
        id_seq, var_seq = sq.spawn(2)
        params = _identity_params(np.random.default_rng(id_seq))
        var_rng = np.random.default_rng(var_seq)
        for v in range(n_variants):
            img = render_face(
                params,
                shift=tuple(var_rng.uniform(-1.5, 1.5, size=2)),
                gain=var_rng.uniform(0.85, 1.15),
                offset=var_rng.uniform(-0.05, 0.05),
                light=var_rng.uniform(-0.12, 0.12),
                curve_jitter=var_rng.uniform(-0.3, 0.3),
                size=size,
            )
            img = img + noise_sigma * var_rng.normal(size=img.shape)
            images[i * n_variants + v, 0] = np.clip(img, 0.0, 1.0)
    return images, identities, variants


# -------------------------------------------------------------------- degradation


@dataclass(frozen=True)
class DegradationParams:
    blur_sigma: float = 1.0
    factor: int = 4
    noise_sigma: float = 0.02


def degrade(hq, params=DegradationParams(), seed=0):
    """Gaussian blur, decimate by ``factor``, add noise, nearest-upsample, clamp to [0, 1].

    ``hq`` is (H, W) or (1, H, W); the output has the same shape.
    """
    hq = np.asarray(hq, dtype=np.float64)
    img = hq.reshape(hq.shape[-2:])
    f = int(params.factor)
    blurred = gaussian_filter(img, params.blur_sigma, mode="reflect") if params.blur_sigma > 0 else img
    off = f // 2
    small = blurred[off::f, off::f]
    if params.noise_sigma > 0:
        small = small + params.noise_sigma * np.random.default_rng(seed).normal(size=small.shape)
    up = small.repeat(f, axis=0).repeat(f, axis=1)[: img.shape[0], : img.shape[1]]
    return np.clip(up, 0.0, 1.0).reshape(hq.shape)


# ----------------------------------------------------------------------- dataset


@dataclass
class FaceDataset:
    hq: np.ndarray
    degraded: np.ndarray
    identity: np.ndarray
    variant: np.ndarray
    split: np.ndarray  # 0 = train, 1 = test
    degrade_seeds: np.ndarray
    manifest: dict = field(default_factory=dict)

    def indices(self, split):
        code = {"train": 0, "test": 1}[split]
        return np.flatnonzero(self.split == code)

    def __len__(self):
        return len(self.hq)


def _pairs(rng, idx, identity, n, genuine):
    out = []
    seen = set()
    attempts = 0
    while len(out) < n and attempts < 100 * n:
        attempts += 1
        a, b = rng.choice(idx, size=2, replace=False)
        same = identity[a] == identity[b]
        if same != genuine or (a, b) in seen:
            continue
        seen.add((a, b))
        out.append((int(a), int(b)))
    return out


def sample_attack_pairs(ds, n, seed):
    """Cross-identity (source, target) pairs from the test split, one stream per attack seed."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    return _pairs(rng, ds.indices("test"), ds.identity, n, genuine=False)


def build_dataset(
    seed=0,
    n_identities=40,
    n_variants=12,
    n_test_variants=4,
    degradation=DegradationParams(),
    n_genuine_pairs=300,
    n_impostor_pairs=1000,
    n_attack_pairs=60,
    noise_sigma=0.01,
):
    """Generate images, degraded twins, the train/test split and all pair lists."""
    if not 1 <= n_test_variants < n_variants:
        raise ValueError("need 1 <= n_test_variants < n_variants")
    hq, identity, variant = generate_synthetic_faces(seed, n_identities, n_variants, noise_sigma)
    deg_seeds = np.array(
        [np.random.SeedSequence([seed, 1, i]).generate_state(1)[0] for i in range(len(hq))], dtype=np.uint64
    )
    degraded = np.stack([degrade(x, degradation, int(s)) for x, s in zip(hq, deg_seeds)])
    split = (variant >= n_variants - n_test_variants).astype(np.int64)
    ds = FaceDataset(hq, degraded, identity, variant, split, deg_seeds)

    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    test = ds.indices("test")
    genuine = _pairs(rng, test, identity, n_genuine_pairs, genuine=True)
    impostor = _pairs(rng, test, identity, n_impostor_pairs, genuine=False)
    attack = sample_attack_pairs(ds, n_attack_pairs, seed)
    ds.manifest = {
        "generator_seed": int(seed),
        "n_identities": int(n_identities),
        "n_variants": int(n_variants),
        "n_test_variants": int(n_test_variants),
        "pixel_noise_sigma": float(noise_sigma),
        "image_size": IMAGE_SIZE,
        "degradation": {
            "blur_sigma": degradation.blur_sigma,
            "factor": degradation.factor,
            "noise_sigma": degradation.noise_sigma,
        },
        "splits": {"train": ds.indices("train").tolist(), "test": test.tolist()},
        "pairs": {"genuine": genuine, "impostor": impostor, "attack": attack},
    }
    return ds


def save_dataset(ds, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in ("hq", "degraded", "identity", "variant", "split", "degrade_seeds"):
        save_array(directory / f"{name}.npy", getattr(ds, name))
    write_manifest(directory / "dataset.json", ds.manifest)


def load_dataset(directory):
    directory = Path(directory)
    manifest_path = directory / "dataset.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"dataset manifest not found: {manifest_path}")
    arrays = {n: load_array(directory / f"{n}.npy") for n in ("hq", "degraded", "identity", "variant", "split", "degrade_seeds")}
    return FaceDataset(manifest=read_manifest(manifest_path), **arrays)


# --------------------------------------------------------------------- image I/O


def save_image(path, img, comments=()):
    """Write a [0, 1] grayscale image as binary 8-bit PGM, with optional header comment lines."""
    img = np.asarray(img, dtype=np.float64)
    img = img.reshape(img.shape[-2:])
    q = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = q.shape
    header = "P5\n"
    for line in comments:
        if "\n" in line or "\r" in line:
            raise ValueError("PGM comment lines must not contain newlines")
        header += f"# {line}\n"
    with open(path, "wb") as fh:
        fh.write(f"{header}{w} {h} 255\n".encode("ascii"))
        fh.write(q.tobytes())


def _read_token(data, pos):
    n = len(data)
    while pos < n:
        ch = data[pos : pos + 1]
        if ch == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ValueError(f"malformed PGM header: unexpected end of data at byte {start}")
    return data[start:pos], start, pos


def load_image(path):
    """Read a binary 8-bit PGM into a float64 (H, W) array in [0, 1]."""
    data = Path(path).read_bytes()
    magic, start, pos = _read_token(data, 0)
    if magic != b"P5":
        raise ValueError(f"unsupported image format {magic!r} at byte {start}; only binary P5 is accepted")
    fields = []
    for _ in range(3):
        tok, start, pos = _read_token(data, pos)
        if not tok.isdigit():
            raise ValueError(f"malformed PGM header: expected integer, got {tok!r} at byte {start}")
        fields.append(int(tok))
    w, h, maxval = fields
    if not 0 < maxval <= 255:
        raise ValueError(f"unsupported PGM max value {maxval} at byte {start}; only 8-bit images are accepted")
    if w <= 0 or h <= 0:
        raise ValueError(f"malformed PGM header: invalid size {w}x{h}")
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise ValueError(f"malformed PGM header: missing separator at byte {pos}")
    pos += 1
    body = data[pos : pos + w * h]
    if len(body) != w * h:
        raise ValueError(f"truncated PGM: expected {w * h} pixel bytes at byte {pos}, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).astype(np.float64) / maxval


def save_array(path, arr):
    """Lossless dump (``.npy``)."""
    with open(path, "wb") as fh:
        np.save(fh, np.asarray(arr), allow_pickle=False)


def load_array(path):
    return np.load(path, allow_pickle=False)


# -------------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"ADVRCKPT"
CHECKPOINT_VERSION = 1
MODEL_KINDS = ("autoencoder", "rldm", "fr")


class CheckpointError(ValueError):
    pass


def encode_checkpoint(kind, state, config):
    if kind not in MODEL_KINDS:
        raise CheckpointError(f"unknown model kind '{kind}'")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    kind_b = kind.encode("utf-8")
    buf.write(struct.pack("<H", len(kind_b)) + kind_b)
    cfg_b = json.dumps(_jsonable(config), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg_b)) + cfg_b)
    buf.write(struct.pack("<I", len(state)))
    for name, value in state.items():
        arr = np.ascontiguousarray(value, dtype="<f8")
        name_b = name.encode("utf-8")
        buf.write(struct.pack("<H", len(name_b)) + name_b)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def decode_checkpoint(blob, expected_kind=None):
    """Parse checkpoint bytes into ``(kind, state, config)``."""
    if len(blob) < len(CHECKPOINT_MAGIC) + 4 + 32:
        raise CheckpointError("truncated checkpoint")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint digest mismatch (corrupted or truncated file)")
    if body[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(body):
            raise CheckpointError("truncated checkpoint")
        out = body[pos : pos + n]
        pos += n
        return out

    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (klen,) = struct.unpack("<H", take(2))
    kind = take(klen).decode("utf-8")
    if kind not in MODEL_KINDS:
        raise CheckpointError(f"unknown model kind '{kind}'")
    if expected_kind is not None and kind != expected_kind:
        raise CheckpointError(f"expected a '{expected_kind}' checkpoint, found '{kind}'")
    (clen,) = struct.unpack("<I", take(4))
    config = json.loads(take(clen).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    return kind, state, config


def save_checkpoint(path, kind, state, config):
    blob = encode_checkpoint(kind, state, config)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path, expected_kind=None):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes(), expected_kind)


def file_digest(path):
    """SHA-256 hex digest of a file's bytes."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------- manifests


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def dumps_manifest(obj):
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n"


def write_manifest(path, obj):
    Path(path).write_text(dumps_manifest(obj), encoding="utf-8")


def read_manifest(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))
