"""
Run configuration: one flat JSON object, every key documented in KEYS.

Command-line flags override file keys. The resolved config is echoed into
every artifact a command writes.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .inference import GenConfig
from .model import ModelConfig
from .training import STRATEGIES, CurriculumSchedule, LossWeights, Stage, TrainConfig


class ConfigError(ValueError):
    pass


KEYS = {
    "seed": "root seed; every subsystem stream derives from it",
    "n_events": "number of sound-event types in the world",
    "n_words": "lexicon size",
    "max_frames": "longest rendered grid, and the generation frame budget",
    "v_audio": "tokens per codebook",
    "q": "number of codebooks",
    "d_sem": "semantic / latent vector width",
    "k": "latent plan length",
    "n_train_sound": "training SOUND records",
    "n_train_speech": "training SPEECH records",
    "n_train_composite": "training COMPOSITE records",
    "n_test_sound": "held-out SOUND records",
    "n_test_speech": "held-out SPEECH records",
    "n_test_composite": "held-out COMPOSITE records",
    "d_model": "transformer width",
    "n_layers": "transformer blocks",
    "n_heads": "attention heads",
    "d_ff": "MLP hidden width",
    "max_positions": "learned position table size",
    "lambda_cos": "cosine weight inside the latent loss",
    "lambda_latent": "latent loss weight (0 disables the plan objective)",
    "lambda_audio": "audio loss weight",
    "lr_peak": "peak learning rate after warmup",
    "warmup": "warmup optimizer steps",
    "floor_factor": "learning-rate floor as a fraction of lr_peak",
    "accumulation": "micro-batches per optimizer step",
    "max_batch_bin": "token budget per micro-batch",
    "max_batch_size": "records per micro-batch",
    "beta1": "Adam first-moment decay",
    "beta2": "Adam second-moment decay",
    "adam_eps": "Adam denominator epsilon",
    "weight_decay": "decoupled weight decay",
    "clip_norm": "global gradient-norm clip, null for none",
    "schedule": "curriculum: constant | gradual | disjoint | custom",
    "custom_stages": "for schedule=custom: list of [end_epoch, w_sound, w_speech, w_composite]",
    "epochs": "total training epochs; named schedules scale their stage boundaries to this",
    "top_k": "sampling support size",
    "temperature": "sampling temperature",
    "gen_seed": "generation seed",
    "constrain_layout": "enforce the delay pattern while sampling",
    "scf_sim_threshold": "minimum similarity for an SCF match",
    "scf_conf_floor": "detections below this confidence are ignored",
    "data_dir": "world + dataset directory",
    "run_dir": "checkpoints, logs and reports",
}


@dataclass
class RunConfig:
    seed: int = 0
    n_events: int = 16
    n_words: int = 32
    max_frames: int = 96
    v_audio: int = 64
    q: int = 4
    d_sem: int = 32
    k: int = 6
    n_train_sound: int = 1000
    n_train_speech: int = 1000
    n_train_composite: int = 1000
    n_test_sound: int = 30
    n_test_speech: int = 30
    n_test_composite: int = 30
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 512
    max_positions: int = 160
    lambda_cos: float = 1.0
    lambda_latent: float = 1.0
    lambda_audio: float = 1.0
    lr_peak: float = 1e-3
    warmup: int = 300
    floor_factor: float = 0.1
    accumulation: int = 2
    max_batch_bin: int = 2000
    max_batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: float | None = None
    schedule: str = "constant"
    custom_stages: list | None = None
    epochs: int = 15
    top_k: int = 8
    temperature: float = 1.0
    gen_seed: int = 0
    constrain_layout: bool = True
    scf_sim_threshold: float = 0.5
    scf_conf_floor: float = 0.1
    data_dir: str = "data"
    run_dir: str = "run"

    def __post_init__(self):
        if set(KEYS) != {f.name for f in fields(self)}:
            raise AssertionError("KEYS and RunConfig fields disagree")
        if self.schedule not in (*STRATEGIES, "custom"):
            raise ConfigError(f"unknown schedule {self.schedule!r}; choose from {[*STRATEGIES, 'custom']}")
        if self.schedule == "custom" and not self.custom_stages:
            raise ConfigError("schedule=custom needs custom_stages")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")

    # ------------------------------------------------------------------ io

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = sorted(set(d) - set(KEYS))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(d)

    def override(self, **kw) -> "RunConfig":
        d = self.to_dict()
        d.update({k: v for k, v in kw.items() if v is not None})
        return RunConfig.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)

    # ------------------------------------------------------------- views

    def world_kwargs(self) -> dict:
        return dict(seed=self.seed, n_events=self.n_events, n_words=self.n_words, v_audio=self.v_audio,
                    q=self.q, d_sem=self.d_sem, k=self.k, max_frames=self.max_frames)

    def train_counts(self) -> dict[str, int]:
        return {"SOUND": self.n_train_sound, "SPEECH": self.n_train_speech, "COMPOSITE": self.n_train_composite}

    def test_counts(self) -> dict[str, int]:
        return {"SOUND": self.n_test_sound, "SPEECH": self.n_test_speech, "COMPOSITE": self.n_test_composite}

    def model_config(self, v_text: int) -> ModelConfig:
        return ModelConfig(self.d_model, self.n_layers, self.n_heads, self.d_ff, v_text, self.v_audio,
                           self.q, self.d_sem, self.k, self.max_positions)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, lr_peak=self.lr_peak, warmup=self.warmup, floor_factor=self.floor_factor,
            accumulation=self.accumulation, max_batch_bin=self.max_batch_bin, max_batch_size=self.max_batch_size,
            weights=LossWeights(self.lambda_cos, self.lambda_latent, self.lambda_audio), seed=self.seed,
            beta1=self.beta1, beta2=self.beta2, eps=self.adam_eps, weight_decay=self.weight_decay,
            clip_norm=self.clip_norm,
        )

    def curriculum(self) -> CurriculumSchedule:
        if self.schedule != "custom":
            return CurriculumSchedule.named(self.schedule, self.epochs)
        stages, start = [], 0
        for i, row in enumerate(self.custom_stages):
            if len(row) != 4:
                raise ConfigError(f"custom stage {i}: expected [end_epoch, w_sound, w_speech, w_composite]")
            end = int(row[0])
            stages.append(Stage(start, end, tuple(float(x) for x in row[1:]), f"stage{i}"))
            start = end
        try:
            sched = CurriculumSchedule(stages, "custom")
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if sched.total_epochs != self.epochs:
            raise ConfigError(f"custom stages end at epoch {sched.total_epochs}, epochs={self.epochs}")
        return sched

    def gen_config(self) -> GenConfig:
        return GenConfig(self.top_k, self.temperature, self.max_frames, self.gen_seed, self.constrain_layout)
