"""Experiment configuration: typed sections, strict JSON round-trip.

Unknown keys are rejected with a message that lists every offending key
path, so a stale or misspelled config fails closed in one pass.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError


@dataclass
class DataConfig:
    size: int = 32
    n_train: int = 8
    phantom_seed: int = 0
    n_ellipsoids: int = 3
    density_range: tuple = (0.0, 100.0)
    implant_every: int = 0
    spacing_mm: float = 1.0


@dataclass
class DrrConfig:
    mode: str = "parallel"
    source_distance_mm: float = 400.0
    step_mm: float = 0.5
    exponential: bool = False
    exposure_k: float = 1.0


@dataclass
class ModelConfig:
    base_channels: int = 8
    channel_multipliers: tuple = (1, 2, 4)
    window_size: tuple = (4, 4, 4)
    num_heads: int = 4
    time_embed_dim: int = 32
    dropout: float = 0.2
    icm_channels: int = 8
    noise_sigma: float = 0.1
    per_level_mlp: bool = False
    transpose_vw: bool = False


@dataclass
class ScheduleConfig:
    T: int = 100
    kind: str = "linear"
    variance: str = "beta"


@dataclass
class LossConfig:
    lambda_mode: str = "inverse_T"
    lambda_value: float = 0.01
    predict_y0_mode: str = "standard"


@dataclass
class TrainConfig:
    lr: float = 2e-4
    lr_schedule: str = "constant"  # or "cosine" (decays to 0 over iterations)
    iterations: int = 500
    batch_size: int = 4
    seed: int = 0
    log_every: int = 10
    ema_decay: float = 0.995  # 0 disables weight averaging


@dataclass
class EvalConfig:
    dice_threshold_hu: float = 300.0
    with_dice: bool = True


@dataclass
class AblationConfig:
    baseline_conditioning: bool = False
    no_proj_loss: bool = False
    no_view_modulators: bool = False
    no_learnable_embedding: bool = False
    resnet_fusion: bool = False


_SECTIONS = {
    "data": DataConfig,
    "drr": DrrConfig,
    "model": ModelConfig,
    "schedule": ScheduleConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
    "ablation": AblationConfig,
}

_TUPLE_FIELDS = {"density_range", "channel_multipliers", "window_size"}


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    drr: DrrConfig = field(default_factory=DrrConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def to_dict(self) -> dict:
        def plain(value):
            if isinstance(value, tuple):
                return list(value)
            return value

        out = {}
        for name, cls in _SECTIONS.items():
            section = getattr(self, name)
            out[name] = {f.name: plain(getattr(section, f.name)) for f in dataclasses.fields(cls)}
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config root must be a JSON object")
        bad_keys = [k for k in doc if k not in _SECTIONS]
        sections = {}
        for name, section_cls in _SECTIONS.items():
            raw = doc.get(name, {})
            if not isinstance(raw, dict):
                bad_keys.append(f"{name} (must be an object)")
                continue
            known = {f.name for f in dataclasses.fields(section_cls)}
            kwargs = {}
            for key, value in raw.items():
                if key not in known:
                    bad_keys.append(f"{name}.{key}")
                    continue
                if key in _TUPLE_FIELDS and isinstance(value, list):
                    value = tuple(value)
                kwargs[key] = value
            sections[name] = section_cls(**kwargs)
        if bad_keys:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(bad_keys))}")
        cfg = cls(**sections)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        problems = []
        d, m, s, lo, tr, ab = self.data, self.model, self.schedule, self.loss, self.train, self.ablation
        if d.size < 8 or d.size % 4 != 0:
            problems.append(f"data.size must be >= 8 and divisible by 4 (got {d.size})")
        if d.n_train < 1:
            problems.append("data.n_train must be positive")
        if d.spacing_mm <= 0:
            problems.append("data.spacing_mm must be positive")
        if d.implant_every < 0:
            problems.append("data.implant_every must be >= 0")
        if self.drr.mode not in ("parallel", "cone"):
            problems.append(f"drr.mode must be parallel or cone (got {self.drr.mode!r})")
        if self.drr.step_mm <= 0:
            problems.append("drr.step_mm must be positive")
        if len(m.channel_multipliers) != 3:
            problems.append("model.channel_multipliers needs exactly 3 entries")
        if len(m.window_size) != 3:
            problems.append("model.window_size needs exactly 3 entries")
        else:
            deepest = d.size >> 2
            for win in m.window_size:
                if win < 1 or deepest % win != 0:
                    problems.append(
                        f"model.window_size {m.window_size} must divide the deepest "
                        f"stage extent {deepest}"
                    )
                    break
        if m.icm_channels % 4 != 0:
            problems.append("model.icm_channels must be divisible by 4")
        deep_ch = m.base_channels * (m.channel_multipliers[-1] if m.channel_multipliers else 1)
        if m.num_heads < 1 or deep_ch % m.num_heads != 0:
            problems.append(
                f"model.num_heads must divide the deepest channel count {deep_ch}"
            )
        if m.time_embed_dim % 2 != 0:
            problems.append("model.time_embed_dim must be even")
        if not (0.0 <= m.dropout < 1.0):
            problems.append("model.dropout must lie in [0, 1)")
        if m.noise_sigma < 0:
            problems.append("model.noise_sigma must be >= 0")
        if s.T < 1:
            problems.append("schedule.T must be >= 1")
        if s.kind != "linear":
            problems.append(f"schedule.kind must be linear (got {s.kind!r})")
        if s.variance not in ("beta", "posterior"):
            problems.append(f"schedule.variance must be beta or posterior (got {s.variance!r})")
        if lo.lambda_mode not in ("inverse_T", "fixed"):
            problems.append(f"loss.lambda_mode must be inverse_T or fixed (got {lo.lambda_mode!r})")
        if lo.lambda_value < 0:
            problems.append("loss.lambda_value must be >= 0")
        if lo.predict_y0_mode not in ("standard", "paper_exact"):
            problems.append(
                f"loss.predict_y0_mode must be standard or paper_exact "
                f"(got {lo.predict_y0_mode!r})"
            )
        if tr.lr <= 0:
            problems.append("train.lr must be positive")
        if tr.iterations < 0:
            problems.append("train.iterations must be >= 0")
        if tr.batch_size < 1:
            problems.append("train.batch_size must be >= 1")
        if tr.log_every < 1:
            problems.append("train.log_every must be >= 1")
        if not 0.0 <= tr.ema_decay < 1.0:
            problems.append("train.ema_decay must lie in [0, 1)")
        if tr.lr_schedule not in ("constant", "cosine"):
            problems.append(
                f"train.lr_schedule must be constant or cosine (got {tr.lr_schedule!r})"
            )
        conditioning_flags = [
            ab.baseline_conditioning, ab.no_view_modulators, ab.resnet_fusion
        ]
        if sum(conditioning_flags) > 1:
            problems.append(
                "at most one of ablation.baseline_conditioning, "
                "ablation.no_view_modulators, ablation.resnet_fusion may be set"
            )
        if ab.baseline_conditioning and ab.no_learnable_embedding:
            problems.append(
                "ablation.no_learnable_embedding has no effect with baseline_conditioning"
            )
        if problems:
            raise ConfigError("; ".join(problems))

    def resolved_lambda(self) -> float | None:
        """None means tie the weight to the schedule as 1/T."""
        return None if self.loss.lambda_mode == "inverse_T" else self.loss.lambda_value


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {path} ({exc})") from exc
    return ExperimentConfig.from_dict(doc)


def save_config(cfg: ExperimentConfig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
