"""Experiment configuration: nested dataclasses loaded from JSON with strict key checking."""
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n_identities: int = 40
    n_variants: int = 12
    n_test_variants: int = 4
    blur_sigma: float = 1.0
    factor: int = 4
    noise_sigma: float = 0.02
    n_genuine_pairs: int = 300
    n_impostor_pairs: int = 1000
    n_attack_pairs: int = 60


@dataclass
class ScheduleConfig:
    n_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    ddim_steps: int = 8


@dataclass
class AutoencoderTrainConfig:
    steps: int = 1000
    batch_size: int = 32
    lr: float = 2e-3
    latent_channels: int = 4
    widths: list = field(default_factory=lambda: [16, 32])


@dataclass
class RLDMTrainConfig:
    steps: int = 2500
    batch_size: int = 64
    lr: float = 1e-3
    widths: list = field(default_factory=lambda: [24, 32])
    time_dim: int = 32


@dataclass
class FRTrainConfig:
    steps: int = 1200
    batch_size: int = 64
    lr: float = 2e-3
    victim_arch_seeds: list = field(default_factory=lambda: [1, 2])
    far: float = 0.01
    robust_steps: int = 600
    robust_rho: float = 16 / 255  # half the desk attack budget


@dataclass
class AttackSection:
    # Desk defaults: the toy models need a wider budget than 8/255 to be fooled reliably.
    beta: float = 4 / 255
    n_max: int = 200
    rho: float = 32 / 255
    variant: str = "advrestore-fim"
    dropout_p: float = 0.1
    exact_clip_grad: bool = True
    n_seeds: int = 3  # attack seeds are seed, seed+1, ...


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    autoencoder: AutoencoderTrainConfig = field(default_factory=AutoencoderTrainConfig)
    rldm: RLDMTrainConfig = field(default_factory=RLDMTrainConfig)
    fr: FRTrainConfig = field(default_factory=FRTrainConfig)
    attack: AttackSection = field(default_factory=AttackSection)

    def to_dict(self):
        return dataclasses.asdict(self)

    def digest(self):
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()

    @property
    def attack_seeds(self):
        return [self.seed + k for k in range(self.attack.n_seeds)]


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _build(cls, raw, path):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join((path + '.' if path else '') + k for k in unknown)}")
    kwargs = {}
    for name, value in raw.items():
        default = getattr(cls(), name)
        key = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, key)
        else:
            kwargs[name] = _coerce(value, default, key)
    return cls(**kwargs)


def _coerce(value, default, key):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return list(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


def config_from_dict(raw):
    return _build(ExperimentConfig, raw, "")


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: line {exc.lineno} column {exc.colno}") from exc
    return config_from_dict(raw)


def apply_overrides(cfg, **overrides):
    """Return a copy with flag values (those not None) written over file values."""
    raw = cfg.to_dict()
    mapping = {
        "seed": ("seed",),
        "rho": ("attack", "rho"),
        "beta": ("attack", "beta"),
        "n_max": ("attack", "n_max"),
        "variant": ("attack", "variant"),
        "ddim_steps": ("schedule", "ddim_steps"),
    }
    for name, value in overrides.items():
        if value is None:
            continue
        *parents, leaf = mapping[name]
        node = raw
        for p in parents:
            node = node[p]
        node[leaf] = value
    return config_from_dict(raw)
