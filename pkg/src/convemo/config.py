"""Run and synthetic-data configuration."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

DENOISE_MODES = ("diff", "none", "ma", "ema", "median")
DIFF_ON = ("av", "a", "v", "none")
SEGMENTATION = ("none", "overlap50", "no_overlap")
FUSION_MODES = ("diffusion", "none")
FUSION_WEIGHTS = ("fixed", "lsf", "adf")
GRAPH_STRATEGIES = ("single", "parallel_sum", "parallel_concat", "rel_incremental", "incremental", "none")


@dataclass
class RunConfig:
    # architecture
    d: int = 64
    heads: int = 4
    window: int = 4
    gamma: float = 1.0
    lambda_init: float = 0.5
    delta: int = 1
    denoise: str = "diff"
    diff_on: str = "av"
    use_gate: bool = True
    scale_full_d: bool = False
    gn_eps: float = 1e-5
    smooth_window: int = 3
    ema_coef: float = 0.5
    graph_strategy: str = "incremental"
    graph_heads: int = 2
    rel_dim: int = 10
    leaky_slope: float = 0.2
    gat_activation: str = "elu"
    fusion: str = "diffusion"
    degree_mode: str = "row"
    fusion_scale_sqrt: bool = False
    encode_text_with_se_pe: bool = False
    modalities: str = "tav"
    alpha_t: float = 1.0
    alpha_a: float = 1.0
    alpha_v: float = 0.4
    fusion_weights: str = "fixed"
    msl_factor: float = 0.1
    # optimisation
    lr: float = 1e-3
    lr_min: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    epochs: int = 30
    batch_size: int = 16
    dropout: float = 0.1
    dtype: str = "float32"
    seed: int = 1
    # evaluation / robustness
    segmentation: str = "none"
    segment_length: int = 0  # 0: use the context window k
    speaker_noise: float = 0.0
    no_speaker: bool = False

    def __post_init__(self):
        self.validate()

    @property
    def alpha(self) -> dict[str, float]:
        return {"t": self.alpha_t, "a": self.alpha_a, "v": self.alpha_v}

    @property
    def denoised_modalities(self) -> str:
        return "" if self.diff_on == "none" else self.diff_on

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.d > 0 and self.d % 2 == 0, f"hidden dim d must be even and positive, got {self.d}")
        need(self.heads >= 1 and self.d % self.heads == 0, f"d={self.d} not divisible by heads={self.heads}")
        need(self.window >= 0, "window must be >= 0")
        need(0.0 <= self.gamma <= 1.0, f"gamma must lie in [0, 1], got {self.gamma}")
        need(self.delta >= 1, "delta must be >= 1")
        need(self.denoise in DENOISE_MODES, f"denoise must be one of {DENOISE_MODES}")
        need(self.diff_on in DIFF_ON, f"diff_on must be one of {DIFF_ON}")
        need(self.smooth_window >= 1 and self.smooth_window % 2 == 1, "smooth_window must be odd")
        need(0.0 < self.ema_coef < 1.0, "ema_coef must lie in (0, 1)")
        need(self.graph_strategy in GRAPH_STRATEGIES, f"graph_strategy must be one of {GRAPH_STRATEGIES}")
        need(self.graph_heads >= 1 and self.rel_dim >= 1, "graph_heads and rel_dim must be positive")
        need(self.gat_activation in ("elu", "identity", "tanh"), "unknown gat_activation")
        need(self.fusion in FUSION_MODES, f"fusion must be one of {FUSION_MODES}")
        need(self.degree_mode in ("row", "sym"), "degree_mode must be row or sym")
        need(len(self.modalities) > 0 and set(self.modalities) <= set("tav")
             and len(set(self.modalities)) == len(self.modalities), "modalities must be a subset of 'tav'")
        need(min(self.alpha_t, self.alpha_a, self.alpha_v) >= 0, "fusion weights must be >= 0")
        need(self.fusion_weights in FUSION_WEIGHTS, f"fusion_weights must be one of {FUSION_WEIGHTS}")
        need(self.fusion_weights != "adf", "fusion_weights 'adf' is reserved and not implemented")
        need(self.msl_factor >= 0, "msl_factor must be >= 0")
        need(self.lr > 0 and 0 <= self.lr_min <= self.lr, "need 0 <= lr_min <= lr, lr > 0")
        need(0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.adam_eps > 0, "bad Adam hyperparameters")
        need(self.weight_decay >= 0, "weight_decay must be >= 0")
        need(self.epochs >= 0 and self.batch_size >= 1, "epochs >= 0 and batch_size >= 1 required")
        need(0.0 <= self.dropout < 1.0, "dropout must lie in [0, 1)")
        need(self.dtype in ("float32", "float64"), "dtype must be float32 or float64")
        need(self.segmentation in SEGMENTATION, f"segmentation must be one of {SEGMENTATION}")
        need(self.segment_length >= 0, "segment_length must be >= 0")
        need(0.0 <= self.speaker_noise <= 1.0, "speaker_noise must lie in [0, 1]")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        preset = data.pop("preset", None)
        base = PRESETS[preset].to_dict() if preset else {}
        base.update(data)
        return cls.from_dict(base)


# Full-scale settings, reachable via {"preset": "..."} in a config file.
PRESETS = {
    "desk": RunConfig(),
    "iemocap": RunConfig(d=512, heads=64, window=20, lr=1e-4, alpha_t=1.0, alpha_a=1.0, alpha_v=0.4),
    "meld": RunConfig(d=256, heads=16, window=25, lr=5e-5, alpha_t=3.0, alpha_a=1.0, alpha_v=0.3),
}


def _default_transition(C: int = 4, stay: float = 0.8) -> list[list[float]]:
    off = (1.0 - stay) / (C - 1)
    return [[stay if i == j else off for j in range(C)] for i in range(C)]


@dataclass
class SyntheticSpec:
    n_classes: int = 4
    speakers_per_dialogue: int = 2
    min_len: int = 8
    max_len: int = 16
    switch_prob: float = 0.7
    transition: list[list[float]] = field(default_factory=_default_transition)
    text_dim: int = 32
    audio_dim: int = 24
    visual_dim: int = 24
    separation: float = 1.0
    text_noise: float = 0.6
    av_noise: float = 1.0
    av_static: float = 1.0
    ar_coef: float = 0.8
    impulse_prob: float = 0.02
    impulse_mag: float = 5.0
    n_train: int = 200
    n_valid: int = 50
    n_test: int = 50

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        C = self.n_classes
        if C < 2:
            raise ConfigError("need at least two classes")
        if len(self.transition) != C or any(len(r) != C for r in self.transition):
            raise ConfigError(f"transition matrix must be {C}x{C}")
        for row in self.transition:
            if any(p < 0 for p in row) or abs(sum(row) - 1.0) > 1e-9:
                raise ConfigError("transition matrix rows must be non-negative and sum to 1")
        if min(self.text_noise, self.av_noise, self.av_static, self.impulse_mag) < 0:
            raise ConfigError("noise scales must be >= 0")
        if not 0.0 <= self.impulse_prob <= 1.0 or not 0.0 <= self.switch_prob <= 1.0:
            raise ConfigError("probabilities must lie in [0, 1]")
        if not -1.0 < self.ar_coef < 1.0:
            raise ConfigError("AR(1) coefficient must lie in (-1, 1)")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError("need 1 <= min_len <= max_len")
        if self.speakers_per_dialogue < 1:
            raise ConfigError("need at least one speaker")

    def replace(self, **changes) -> "SyntheticSpec":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticSpec":
        return cls(**data)


def impulse_heavy(spec: SyntheticSpec | None = None) -> SyntheticSpec:
    """Audio/visual streams hit by frequent large impulses."""
    return (spec or SyntheticSpec()).replace(impulse_prob=0.15, impulse_mag=5.0)
