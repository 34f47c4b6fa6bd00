"""Architecture and optimization settings shared by the model and the pipeline."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from .errors import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    n_bands: int
    window: int = 30
    latent_t: int = 8
    latent_s: int | None = None
    conv_hidden: int = 32
    gru_hidden: int = 32
    prior_hidden: int = 32
    head_hidden: int = 32
    flow_layers: int = 4
    flow_hidden: int = 16
    use_flow: bool = True
    # "per_band": one learned log-variance per band; "conditional": predicted from (e_s_t, z_t)
    head_logvar: str = "per_band"

    def __post_init__(self):
        if self.latent_s is None:
            object.__setattr__(self, "latent_s", max(1, self.n_bands // 2))
        if self.window % 2:
            raise ConfigError("window length must be even")
        if self.n_bands < 2:
            raise ConfigError("need at least 2 bands")
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, int) and not isinstance(v, bool) and v < 0:
                raise ConfigError(f"{f.name} must be non-negative")
        if self.head_logvar not in ("per_band", "conditional"):
            raise ConfigError(f"unknown head_logvar {self.head_logvar!r}")
        if min(self.window, self.latent_t, self.latent_s) < 1:
            raise ConfigError("window and latent sizes must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass(frozen=True)
class TrainingHyper:
    batch_size: int = 32
    lr: float = 0.002
    lr_decay: float = 0.1
    decay_every: int = 10
    epochs: int = 50
    momentum: float = 0.9
    weight_decay: float = 0.0005
    mc_train: int = 1
    mc_eval: int = 40
    window: int = 30
    seed: int = 0
    optimizer: str = "sgd"
    # objectives are divided by C*W before differentiation; clip bounds the global grad norm
    grad_clip: float | None = 10.0
    # curation pretraining ramps the KL weight from 0 to 1 over this many epochs
    kl_warmup: int = 10

    def __post_init__(self):
        if self.batch_size < 1 or self.lr <= 0 or self.decay_every < 1:
            raise ConfigError("batch_size, lr and decay_every must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.mc_train < 1 or self.mc_eval < 1:
            raise ConfigError("Monte Carlo sample counts must be >= 1")
        if self.kl_warmup < 0:
            raise ConfigError("kl_warmup must be non-negative")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingHyper":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})
