"""Training configuration, presets, and the flat key=value config file."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError


@dataclass
class TrainConfig:
    # loss balance
    alpha: float = 0.01
    beta: float = 1000.0
    use_reconstruction: bool = True
    variational: bool = True
    # multi-angle splitting
    V: int = 12
    W: int = 6
    N: int = 128
    k: int = 10
    split_mode: str = "geodesic"
    scheme: str = "uniform"
    axis: str = "y"
    radius_scale: float = 2.0
    # architecture
    Z: int = 16
    D_f: int = 64
    D_h: int = 64
    encoder_widths: str = "64,128"
    point_channels: int = 64
    batch_norm: bool = False
    # optimisation
    lr: float = 1e-3
    batch_size: int = 8
    steps: int = 2000
    seed: int = 0
    emd_solver: str = "scipy"
    pretrain_steps: int = 600
    pretrain_lr: float = 1e-3
    pretrain_loss: str = "chamfer"
    checkpoint_every: int = 0
    threads: int = 1
    # data
    train_data: str = ""
    test_data: str = ""

    def validate(self) -> "TrainConfig":
        if self.V < 1 or not 1 <= self.W <= self.V:
            raise ConfigError(f"need 1 <= W <= V, got V={self.V}, W={self.W}")
        if self.scheme == "uniform" and self.V % self.W:
            raise ConfigError(f"uniform scheme needs W to divide V (V={self.V}, W={self.W})")
        if self.scheme not in ("uniform", "contiguous", "random"):
            raise ConfigError(f"unknown scheme {self.scheme!r}")
        if self.split_mode not in ("euclidean", "geodesic"):
            raise ConfigError(f"unknown split mode {self.split_mode!r}")
        if self.pretrain_loss not in ("emd", "chamfer"):
            raise ConfigError(f"unknown pretrain loss {self.pretrain_loss!r}")
        if self.N < 2 or self.k < 1 or self.k >= 2 * self.N:
            raise ConfigError("need N >= 2 and 1 <= k < 2N")
        if min(self.Z, self.D_f, self.D_h, self.point_channels, self.batch_size) < 1:
            raise ConfigError("dimensions and batch size must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be nonnegative")
        self.widths()
        return self

    def widths(self):
        try:
            out = tuple(int(w) for w in self.encoder_widths.split(",") if w.strip())
        except ValueError:
            raise ConfigError(f"bad encoder_widths {self.encoder_widths!r}")
        if not out or min(out) < 1:
            raise ConfigError("encoder_widths must list positive ints")
        return out

    @property
    def trunk(self):
        """Decoder fully connected widths, proportional to the 2N point count."""
        n2 = 2 * self.N
        return (max(n2 // 2, 8), n2, 3 * n2)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}
_BY_LOWER = {name.lower(): name for name in FIELD_TYPES}


def canonical_key(key):
    """Config field for ``key``, ignoring case (``v`` and ``V`` both name V)."""
    try:
        return key if key in FIELD_TYPES else _BY_LOWER[key.lower()]
    except KeyError:
        raise ConfigError(f"unknown config key {key!r}") from None


def coerce(key, text):
    """Parse ``text`` into the type of config field ``key``."""
    if key not in FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = FIELD_TYPES[key]
    try:
        if kind == "bool":
            low = text.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}")
    return text.strip()


def read_config(path, base: TrainConfig = None) -> TrainConfig:
    base = base or TrainConfig()
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = canonical_key(key)
        values[key] = coerce(key, value)
    return base.replace(**values)


def write_config(cfg: TrainConfig, path):
    lines = [f"{k} = {str(v).lower() if isinstance(v, bool) else v}"
             for k, v in cfg.to_dict().items()]
    Path(path).write_text("\n".join(lines) + "\n")


def desk_config(**overrides) -> TrainConfig:
    """Laptop-scale defaults: 2N=256 points, small latent and hidden sizes."""
    return TrainConfig(**overrides).validate()


def full_config(**overrides) -> TrainConfig:
    base = dict(N=1024, Z=128, D_f=1024, D_h=512, point_channels=256,
                encoder_widths="64,128,1024", batch_norm=True)
    base.update(overrides)
    return TrainConfig(**base).validate()


def completion_config(**overrides) -> TrainConfig:
    """Completion preset: no KL term, all twelve angles, deterministic latent."""
    base = dict(alpha=0.0, W=12, variational=False)
    base.update(overrides)
    return TrainConfig(**base).validate()


ABLATIONS = {
    "All": {},
    "No R": {"use_reconstruction": False},
    "No P": {"beta": 0.0},
    "No KL": {"alpha": 0.0, "variational": False},
    "Eucli": {"split_mode": "euclidean"},
    "S-6": {"scheme": "contiguous"},
    "R-6": {"scheme": "random"},
}
