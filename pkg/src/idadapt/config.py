"""Run configuration: a flat ``key = value`` text format with ``#`` comments."""

from dataclasses import asdict, dataclass, fields, replace
import hashlib

from .errors import ContractError


class ConfigError(ValueError):
    pass


# Fields that change parameter shapes or the meaning of stored weights. The
# checkpoint header carries a hash of exactly these.
ARCH_FIELDS = (
    "d",
    "n_blocks",
    "d_t",
    "c1",
    "heads",
    "ffn_mult",
    "perceiver_depth",
    "n_face_tokens",
    "patch",
    "height",
    "width",
    "frames",
    "T",
    "beta_start",
    "beta_end",
)

ABLATION_FLAGS = (
    "disable_can",
    "disable_id_branch",
    "disable_face_branch",
    "direct_can_prediction",
    "skip_pretrain",
)


@dataclass(frozen=True)
class Config:
    # model
    d: int = 64
    n_blocks: int = 4
    d_t: int = 32
    c1: int = 16
    heads: int = 1
    ffn_mult: int = 2
    perceiver_depth: int = 2
    n_face_tokens: int = 32
    patch: int = 4
    # frames
    height: int = 16
    width: int = 16
    frames: int = 4
    # noise schedule
    T: int = 100
    beta_start: float = 1e-3
    beta_end: float = 0.2
    # training
    lr: float = 1e-3
    base_lr: float = 2e-3
    weight_decay: float = 0.0
    base_steps: int = 3000
    stage1_steps: int = 2000
    stage2_steps: int = 500
    batch_image: int = 8
    batch_video: int = 4
    lambda_id: float = 0.1
    face_mask_prob: float = 0.5
    # data
    n_ids: int = 64
    per_id: int = 8
    angle_max: float = 0.3
    shift_max: float = 1.25
    scale_min: float = 0.9
    scale_max: float = 1.1
    filter_threshold: float = 0.65
    seed: int = 0
    # ablations
    disable_can: bool = False
    disable_id_branch: bool = False
    disable_face_branch: bool = False
    direct_can_prediction: bool = False
    skip_pretrain: bool = False

    def __post_init__(self):
        positive = (
            "d", "n_blocks", "d_t", "c1", "heads", "ffn_mult", "perceiver_depth",
            "n_face_tokens", "patch", "height", "width", "frames", "T",
            "batch_image", "batch_video", "n_ids", "per_id",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("base_steps", "stage1_steps", "stage2_steps", "lambda_id", "weight_decay", "seed"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.heads != 1:
            raise ConfigError("only single-head attention is implemented")
        if self.height % self.patch or self.width % self.patch:
            raise ConfigError("frame size must be divisible by the patch size")
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ConfigError("need 0 < beta_start <= beta_end < 1")
        if not 0.0 <= self.face_mask_prob <= 1.0:
            raise ConfigError("face_mask_prob must lie in [0, 1]")
        if not -1.0 < self.filter_threshold < 1.0:
            raise ConfigError("filter_threshold must lie in (-1, 1)")
        if not 0.0 < self.scale_min <= self.scale_max:
            raise ConfigError("need 0 < scale_min <= scale_max")

    @property
    def n_patches(self):
        return (self.height // self.patch) * (self.width // self.patch)

    @property
    def patch_dim(self):
        return self.patch * self.patch

    def adapter_layers(self):
        """Block indices that carry the facial adapter: the even ones."""
        return tuple(l for l in range(self.n_blocks) if l % 2 == 0)

    def with_overrides(self, **kw):
        return replace(self, **kw)

    def arch_hash(self):
        text = "\n".join(f"{k}={_fmt(getattr(self, k))}" for k in ARCH_FIELDS)
        return hashlib.sha256(text.encode("ascii")).hexdigest()

    def config_hash(self):
        return hashlib.sha256(dumps(self).encode("utf-8")).hexdigest()

    def to_dict(self):
        return asdict(self)


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(name, kind, text):
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {text!r}") from None


_TYPES = {f.name: type(f.default) for f in fields(Config)}


def coerce(values):
    """Turn a mapping of strings (or already-typed values) into Config kwargs."""
    out = {}
    for key, raw in values.items():
        key = key.replace("-", "_")
        if key not in _TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        kind = _TYPES[key]
        out[key] = _parse_value(key, kind, raw) if isinstance(raw, str) else kind(raw)
    return out


def loads(text, base=None):
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value
    try:
        return replace(base or Config(), **coerce(values))
    except ConfigError as exc:
        raise ConfigError(str(exc)) from None


def dumps(cfg):
    return "".join(f"{f.name} = {_fmt(getattr(cfg, f.name))}\n" for f in fields(Config))


def load(path, base=None):
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read(), base)


def require_same_arch(expected_hash, cfg):
    if expected_hash != cfg.arch_hash():
        raise ContractError("checkpoint was written for a different model configuration")
