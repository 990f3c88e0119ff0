"""Flat key=value training configuration with presets."""

from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace
from typing import Optional

from ..model import ModelConfig
from ..training import OptimState
from .tasks import TaskSpec


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    task: str = "recall"
    scheme: str = "mrbp"
    seed: int = 0
    # optimisation schedule (image-generation column of the training table)
    batch_size: int = 256
    warmup_steps: int = 1000
    learning_rate: float = 1e-3
    dropout: float = 0.1
    temperature: float = 0.25
    time_horizon: int = 8
    weight_decay: float = 0.01
    max_grad_norm: float = 1.0
    training_steps: int = 10000
    rollout_stride: int = 0          # 0 -> advance by time_horizon
    # architecture
    memory_slots: int = 64
    model_dim: int = 128
    n_heads: int = 4
    ffn_dim: int = 256
    n_encoder_layers: int = 4
    n_decoder_layers: int = 8
    n_cls_tokens: int = 4
    segment_len: int = 16
    vbias_norm: float = 0.5
    init_std: float = 0.02
    dtype: str = "float32"
    # ablations
    no_memory: bool = False
    no_forgetting: bool = False
    no_multihead_writer: bool = False
    tau_override: Optional[float] = None
    # data
    stream_len: int = 1200
    n_pairs: int = 4
    n_keys: int = 8
    n_values: int = 8
    distance: int = 4
    train_min_distance: Optional[int] = None   # training documents draw d from [this, distance]
    keyed_values: bool = True
    curriculum: Optional[str] = None   # "d:steps,d:steps" stages before the final distance
    image_size: int = 10
    bit_depth: int = 4
    image_dir: Optional[str] = None
    corpus_path: Optional[str] = None
    eval_segments: int = 240
    log_every: int = 1

    @property
    def stride(self):
        return self.rollout_stride or self.time_horizon

    def stages(self) -> list[tuple[int, int]]:
        """(distance, steps) per training stage; the last is (distance, training_steps)."""
        out = []
        for item in (self.curriculum or "").split(","):
            item = item.strip()
            if not item:
                continue
            try:
                d, n = (int(x) for x in item.split(":"))
            except ValueError:
                raise ConfigError(f"curriculum stage {item!r} is not 'distance:steps'") from None
            if d < 0 or n < 1:
                raise ConfigError(f"curriculum stage {item!r} needs distance >= 0 and steps >= 1")
            out.append((d, n))
        out.append((self.distance, self.training_steps))
        return out

    @property
    def total_steps(self) -> int:
        return sum(n for _, n in self.stages())

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size, model_dim=self.model_dim, n_heads=self.n_heads,
            ffn_dim=self.ffn_dim, n_encoder_layers=self.n_encoder_layers,
            n_decoder_layers=self.n_decoder_layers, memory_slots=self.memory_slots,
            n_cls_tokens=self.n_cls_tokens, tau=self.temperature, dropout_rate=self.dropout,
            max_segment_len=self.segment_len, no_memory=self.no_memory,
            no_forgetting=self.no_forgetting, no_multihead_writer=self.no_multihead_writer,
            tau_override=self.tau_override, vbias_norm=self.vbias_norm, init_std=self.init_std,
            dtype=self.dtype,
            seed=self.seed)

    def task_spec(self, seed_offset: int = 0, train: bool = True) -> TaskSpec:
        return TaskSpec(task=self.task, segment_len=self.segment_len, stream_len=self.stream_len,
                        batch=self.batch_size, seed=self.seed * 7919 + seed_offset,
                        n_pairs=self.n_pairs, n_keys=self.n_keys, n_values=self.n_values,
                        distance=self.distance, keyed_values=self.keyed_values,
                        min_distance=self.train_min_distance if train else None,
                        image_size=self.image_size,
                        bit_depth=self.bit_depth, image_dir=self.image_dir,
                        corpus_path=self.corpus_path)

    def optim_state(self) -> OptimState:
        return OptimState(lr=self.learning_rate, warmup_steps=self.warmup_steps,
                          weight_decay=self.weight_decay, max_grad_norm=self.max_grad_norm)


REQUIRED = ("task",)

# desk-scale presets; "paper_*" keep the published training table but are slow on a CPU
PRESETS = {
    "recall": dict(task="recall", batch_size=16, warmup_steps=1000, dropout=0.0,
                   temperature=0.125, init_std=0.125, vbias_norm=0.1, memory_slots=8, model_dim=64,
                   n_heads=4, ffn_dim=128, n_encoder_layers=2, n_decoder_layers=2,
                   segment_len=16, curriculum="1:1500,2:500,3:500", training_steps=3000,
                   time_horizon=8),
    "char_lm": dict(task="char_lm", batch_size=16, warmup_steps=200, temperature=0.125,
                    memory_slots=32, model_dim=128, n_heads=4, ffn_dim=256,
                    n_encoder_layers=4, n_decoder_layers=4, segment_len=64,
                    training_steps=3000),
    "image_seq": dict(task="image_seq", batch_size=16, warmup_steps=200, memory_slots=8,
                      model_dim=64, n_heads=4, ffn_dim=128, n_encoder_layers=2,
                      n_decoder_layers=2, segment_len=10, training_steps=2000),
    "paper_image": dict(task="image_seq", batch_size=256, warmup_steps=1000, memory_slots=64,
                        model_dim=128, n_heads=4, ffn_dim=256, n_encoder_layers=4,
                        n_decoder_layers=8, temperature=0.25, training_steps=10000,
                        image_size=28, bit_depth=8, segment_len=8),
    "paper_lm": dict(task="char_lm", batch_size=128, warmup_steps=10000, memory_slots=1024,
                     model_dim=512, n_heads=8, ffn_dim=2048, n_encoder_layers=4,
                     n_decoder_layers=16, temperature=0.125, training_steps=150000,
                     segment_len=128),
}

_FIELDS = {f.name: f for f in fields(TrainConfig)}


def _coerce(key, value: str):
    f = _FIELDS[key]
    kind = str(f.type)
    v = value.strip()
    try:
        if "bool" in kind:
            low = v.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(v)
        if "Optional" in kind and v.lower() in ("", "none", "null"):
            return None
        if "int" in kind:
            return int(v)
        if "float" in kind:
            return float(v)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {value!r} as {kind}") from None
    return v


def parse_config_text(text: str, source: str = "<config>") -> TrainConfig:
    """Parse key=value lines; '#' starts a comment; ``preset`` applies first."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key != "preset" and key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        values[key] = value
    for key in REQUIRED:
        if key not in values and "preset" not in values:
            raise ConfigError(f"{source}: missing required config key {key!r}")
    cfg = TrainConfig()
    if "preset" in values:
        name = values.pop("preset")
        if name not in PRESETS:
            raise ConfigError(f"{source}: unknown preset {name!r}")
        cfg = replace(cfg, **PRESETS[name])
    cfg = replace(cfg, **{k: _coerce(k, v) for k, v in values.items()})
    cfg.stages()  # validates the curriculum string
    return apply_env(cfg)


def load_config(path) -> TrainConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config_text(text, str(path))


def apply_env(cfg: TrainConfig) -> TrainConfig:
    seed = os.environ.get("MEMF_SEED")
    if seed is not None and seed.strip():
        try:
            cfg = replace(cfg, seed=int(seed))
        except ValueError:
            raise ConfigError(f"MEMF_SEED must be an integer, got {seed!r}") from None
    return cfg


def preset(name: str, **overrides) -> TrainConfig:
    return replace(TrainConfig(), **{**PRESETS[name], **overrides})


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(TrainConfig):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {'none' if v is None else v}")
    return "\n".join(lines) + "\n"


TIME_HORIZON_SWEEP = (1, 2, 4, 8, 16, 32)


def time_horizon_sweep(base: TrainConfig, horizons=TIME_HORIZON_SWEEP) -> list[TrainConfig]:
    """One config per back-propagation horizon, everything else shared."""
    return [replace(base, time_horizon=h) for h in horizons]
