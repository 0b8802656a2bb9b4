"""Training configuration, ablation presets and ``key=value`` config files."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .errors import InvalidArgument
from .filtering import DEFAULT_DILATIONS, validate_dilations
from .kpn import KpnConfig
from .losses import LossConfig

# Ablation variants: v1 no dilation, v2 +dilation, v3 +SSIM loss, v4 +RainMix.
VARIANTS = {
    "v1": {"dilations": (1,), "ssim_enabled": False, "rainmix_enabled": False},
    "v2": {"dilations": DEFAULT_DILATIONS, "ssim_enabled": False, "rainmix_enabled": False},
    "v3": {"dilations": DEFAULT_DILATIONS, "ssim_enabled": True, "rainmix_enabled": False},
    "v4": {"dilations": DEFAULT_DILATIONS, "ssim_enabled": True, "rainmix_enabled": True},
}


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    epochs: int = 0  # if > 0, overrides iterations: epochs * ceil(len(dataset) / batch_size)
    batch_size: int = 4
    lr: float = 1e-3
    lam: float = 0.2
    ssim_enabled: bool = True
    rainmix_enabled: bool = False
    dilations: tuple = DEFAULT_DILATIONS
    kernel_width: int = 5
    levels: int = 3
    base_channels: int = 32
    normalize_kernels: bool = False
    seed: int = 0
    crop_size: int = 64
    checkpoint_interval: int = 500
    eval_interval: int = 50
    precision: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(sorted(validate_dilations(self.dilations))))
        if self.batch_size < 1:
            raise InvalidArgument(f"batch_size must be >= 1, got {self.batch_size}")
        if self.iterations < 0 or self.epochs < 0:
            raise InvalidArgument("iterations and epochs must be non-negative")
        if self.lr <= 0:
            raise InvalidArgument(f"lr must be positive, got {self.lr}")
        if self.lam < 0:
            raise InvalidArgument(f"lambda must be >= 0, got {self.lam}")
        m = 2 ** (self.levels - 1)
        if self.crop_size < 1 or self.crop_size % m:
            raise InvalidArgument(f"crop_size {self.crop_size} must be a positive multiple of {m} (2^(levels-1))")
        if self.precision not in ("float32", "float64"):
            raise InvalidArgument(f"precision must be float32 or float64, got {self.precision!r}")
        if self.checkpoint_interval < 0 or self.eval_interval < 0:
            raise InvalidArgument("checkpoint_interval and eval_interval must be non-negative")
        self.kpn_config()

    def kpn_config(self, input_channels=3):
        return KpnConfig(
            levels=self.levels,
            base_channels=self.base_channels,
            kernel_width=self.kernel_width,
            dilations=self.dilations,
            input_channels=input_channels,
            normalize_kernels=self.normalize_kernels,
        )

    def loss_config(self):
        return LossConfig(lam=self.lam, ssim_enabled=self.ssim_enabled)

    def total_iterations(self, dataset_size):
        if self.epochs:
            return self.epochs * -(-dataset_size // self.batch_size)
        return self.iterations

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["dilations"] = list(self.dilations)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "dilations" in d:
            d["dilations"] = tuple(d["dilations"])
        return cls(**d)

    def header_lines(self):
        """``key=value`` echo written at the top of metrics logs."""
        return [f"{k}={_format_value(v)}" for k, v in self.to_dict().items()]

    def with_variant(self, name):
        if name not in VARIANTS:
            raise InvalidArgument(f"unknown variant {name!r}, expected one of {sorted(VARIANTS)}")
        return dataclasses.replace(self, **VARIANTS[name])


def _format_value(v):
    if isinstance(v, bool):
        return "on" if v else "off"
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


def parse_bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise InvalidArgument(f"expected on/off, got {text!r}")


def parse_int_list(text):
    try:
        return tuple(int(t) for t in str(text).replace(" ", "").split(",") if t)
    except ValueError:
        raise InvalidArgument(f"expected comma-separated integers, got {text!r}") from None


def read_kv_file(path):
    """Parse ``key = value`` lines; ``#`` starts a comment. Keys are normalised to snake_case."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidArgument(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out
