"""Plain-text ``key = value`` configuration and the training hyperparameters."""

import dataclasses
from dataclasses import dataclass

from .errors import ConfigError

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_kv_text(text, source="<config>"):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        values[key.strip()] = value.strip()
    return values


def parse_kv_file(path):
    try:
        with open(path) as f:
            return parse_kv_text(f.read(), str(path))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None


def _coerce(value, default, name):
    if not isinstance(value, str):
        if isinstance(default, tuple) and isinstance(value, list):
            return tuple(value)
        return value
    try:
        if isinstance(default, bool):
            low = value.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            items = [v.strip() for v in value.split(",") if v.strip()]
            if default and isinstance(default[0], (int, float)) and not isinstance(default[0], bool):
                kind = type(default[0])
                return tuple(kind(v) for v in items)
            return tuple(items)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {value!r}") from None
    return value


def coerce_fields(obj):
    """Convert string-valued fields of a dataclass to the type of their default."""
    for f in dataclasses.fields(obj):
        if f.default is dataclasses.MISSING:
            continue
        setattr(obj, f.name, _coerce(getattr(obj, f.name), f.default, f.name))


def format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class TrainConfig:
    # optimization
    batch_size: int = 32
    lr_start: float = 1e-3
    lr_end: float = 1e-4
    lambda_d: float = 1e-3
    lambda_u: float = 5.0
    delta: float = 0.3
    iou_t: float = 0.3
    alpha0: float = 0.9996
    warmup_epochs: int = 40
    mutual_epochs: int = 20
    fewshot_epochs: int = 30
    fewshot_shots: int = 10
    disc_noise: float = 0.05
    seed: int = 0
    # ablations
    use_pam: bool = True
    fusion: str = "mha"
    use_snm: bool = True
    use_score: bool = True
    unsup_loss: str = "l2"
    # prototypes
    k: int = 3
    ae_latent: int = 128
    ae_epochs: int = 60
    ae_lr: float = 1e-3
    ae_batch_size: int = 32
    # architecture
    r_v: int = 16
    image_size: int = 32
    query_dim: int = 256  # C
    token_dim: int = 128  # D
    heads: int = 2
    fusion_dim: int = 256
    enc2d_channels: tuple = (16, 32, 64, 128)
    enc3d_channels: tuple = (8, 16, 32)
    dec_channels: tuple = (64, 32, 16)
    disc_channels: tuple = (8, 16, 32)

    def __post_init__(self):
        coerce_fields(self)
        self.validate()

    def validate(self):
        positive = ("batch_size", "lr_start", "lr_end", "lambda_u", "k", "heads", "r_v",
                    "image_size", "query_dim", "token_dim", "fusion_dim", "ae_latent")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")
        for name in ("lambda_d", "warmup_epochs", "mutual_epochs", "fewshot_epochs", "ae_epochs", "disc_noise"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)!r}")
        for name in ("delta", "iou_t"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {getattr(self, name)!r}")
        if not 0.0 < self.alpha0 <= 1.0:
            raise ConfigError(f"alpha0 must lie in (0, 1], got {self.alpha0!r}")
        if self.token_dim % self.heads:
            raise ConfigError(f"heads={self.heads} does not divide token_dim={self.token_dim}")
        if self.fusion not in ("mha", "average"):
            raise ConfigError(f"fusion must be 'mha' or 'average', got {self.fusion!r}")
        if self.unsup_loss not in ("l2", "bce"):
            raise ConfigError(f"unsup_loss must be 'l2' or 'bce', got {self.unsup_loss!r}")
        if self.batch_size % 2:
            raise ConfigError("batch_size must be even (half labeled, half unlabeled)")
        if self.r_v & (self.r_v - 1) or self.r_v < 8:
            raise ConfigError(f"r_v must be a power of two >= 8, got {self.r_v}")
        if 2 ** len(self.dec_channels) > self.r_v:
            raise ConfigError("too many decoder stages for r_v")
        if len(self.enc3d_channels) != 3 or len(self.disc_channels) != 3:
            raise ConfigError("3D encoders use exactly three stride-2 blocks")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    def to_text(self):
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self.to_dict().items())

    @classmethod
    def from_dict(cls, values):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**values)

    @classmethod
    def from_file(cls, path, **overrides):
        values = parse_kv_file(path)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(values)
