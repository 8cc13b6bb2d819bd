"""Configuration dataclasses and JSON (de)serialization.

Defaults are desk-scale: small enough that a full training run takes a
couple of minutes on one CPU core, while keeping every shape contract of
the full-scale system (T x K magnitudes, T x F fbank features, shared
dual-path recognizer).
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .errors import InvalidInputError


@dataclass(frozen=True)
class CorpusConfig:
    """Synthetic corpus generation parameters.

    The default split is deliberately lopsided: training data is kept
    scarce so the training variants separate measurably, while the test
    split is large because variant comparisons need error-rate estimates
    much tighter than the gaps between variants.
    """

    train: int = 110
    valid: int = 80
    test: int = 200
    n_content_tokens: int = 12
    min_tokens: int = 2
    max_tokens: int = 4
    snr_db_min: float = -6.0
    snr_db_max: float = 0.0
    seed: int = 0
    sample_rate: int = 8000
    frame: int = 200
    hop: int = 80
    n_mels: int = 40
    token_duration_s: float = 0.1

    def __post_init__(self):
        for name in ("train", "valid", "test"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} count must be >= 1")
        if self.n_content_tokens < 2:
            raise InvalidInputError("need at least two content tokens")
        if self.min_tokens < 1 or self.max_tokens < self.min_tokens:
            raise InvalidInputError(
                f"bad utterance-length range [{self.min_tokens}, {self.max_tokens}]"
            )
        if not (math.isfinite(self.snr_db_min) and math.isfinite(self.snr_db_max)):
            raise InvalidInputError("SNR range must be finite")
        if self.snr_db_min > self.snr_db_max:
            raise InvalidInputError(
                f"snr_db_min {self.snr_db_min} exceeds snr_db_max {self.snr_db_max}"
            )
        if self.hop < 1 or self.frame < self.hop:
            raise InvalidInputError(f"need frame >= hop >= 1, got {self.frame}, {self.hop}")
        if self.n_mels < 2:
            raise InvalidInputError("n_mels must be >= 2")
        if not self.token_duration_s > 0:
            raise InvalidInputError("token_duration_s must be > 0")


@dataclass(frozen=True)
class EnhancerConfig:
    """Mask-estimator shape: bidirectional recurrent stack + rectified projection."""

    n_layers: int = 2
    hidden: int = 64


@dataclass(frozen=True)
class FusionConfig:
    """Feature-fusion network shape."""

    blocks: int = 2
    channels: int = 16


@dataclass(frozen=True)
class AsrConfig:
    """Recognizer shape. Decoder depth is always enc_layers // 2."""

    dim: int = 64
    enc_layers: int = 4
    heads: int = 2
    ff_dim: int = 256
    dropout: float = 0.0

    def __post_init__(self):
        if self.enc_layers < 2 or self.enc_layers % 2 != 0:
            raise InvalidInputError(
                f"enc_layers must be even and >= 2, got {self.enc_layers}"
            )
        if self.heads < 1 or self.dim % self.heads != 0:
            raise InvalidInputError(
                f"dim {self.dim} must divide evenly into heads {self.heads}"
            )

    @property
    def dec_layers(self) -> int:
        return self.enc_layers // 2


@dataclass(frozen=True)
class LossWeights:
    """Weights of the multi-task objective.

    lambda_asr and lambda_fused sit inside convex combinations and must lie
    in [0, 1]; lambda_sl and lambda_cl are plain non-negative multipliers.

    The regularizer defaults are tuned empirically for the desk-scale
    corpus and model shipped here, with no claim of transfer. The style
    term in particular needs retuning whenever scale changes: Gram entries
    sum over frames, so its magnitude grows quadratically with sequence
    length, and a weight fit for one scale can dominate or vanish at
    another.
    """

    lambda_asr: float = 0.7
    lambda_sl: float = 1e-4
    lambda_cl: float = 0.3
    lambda_fused: float = 0.3

    def __post_init__(self):
        for name in ("lambda_asr", "lambda_sl", "lambda_cl", "lambda_fused"):
            v = getattr(self, name)
            if not (v == v) or v in (float("inf"), float("-inf")):
                raise InvalidInputError(f"{name} must be finite, got {v}")
            if v < 0:
                raise InvalidInputError(f"{name} must be non-negative, got {v}")
        for name in ("lambda_asr", "lambda_fused"):
            if getattr(self, name) > 1:
                raise InvalidInputError(f"{name} must be <= 1, got {getattr(self, name)}")


@dataclass(frozen=True)
class TrainingConfig:
    """Optimization schedule, batching, and ablation switches.

    Defaults are chosen empirically for the desk-scale corpus: the epoch
    budget leaves room for the slow ramp that the 500-step warmup imposes
    at this corpus size, and the style term is restricted to the upper
    encoder layers, where branch agreement is informative rather than an
    anchor that keeps early layers from differentiating.
    """

    peak_lr: float = 1e-3
    warmup_steps: int = 500
    batch_size: int = 8
    epochs: int = 80
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    dual_path: bool = True
    use_sl: bool = True
    use_cl: bool = True
    layer_selection: str = "3-4"
    stop_clean_gradient: bool = True
    freeze: tuple[str, ...] = ()
    max_decode_len: int = 12

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise InvalidInputError(f"warmup_steps must be >= 1, got {self.warmup_steps}")
        if not self.peak_lr > 0:
            raise InvalidInputError(f"peak_lr must be > 0, got {self.peak_lr}")
        if self.batch_size < 1:
            raise InvalidInputError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise InvalidInputError(f"epochs must be >= 0, got {self.epochs}")
        for name in self.freeze:
            if name not in ("enhancer", "fusion", "asr"):
                raise InvalidInputError(f"unknown freeze target {name!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one training run needs, minus the corpus data itself."""

    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    enhancer: EnhancerConfig = field(default_factory=EnhancerConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    asr: AsrConfig = field(default_factory=AsrConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    corpus_dir: str | None = None

    def replace_training(self, **kwargs) -> "ExperimentConfig":
        return dataclasses.replace(self, training=dataclasses.replace(self.training, **kwargs))


def parse_layer_selection(sel, n_layers: int) -> tuple[int, ...]:
    """Normalize a layer selection into a sorted tuple of 1-based indices.

    Accepts "all", a "lo-hi" range string, a single index string, or an
    iterable of ints.
    """
    if isinstance(sel, str):
        text = sel.strip().lower()
        if text == "all":
            indices = range(1, n_layers + 1)
        elif "-" in text:
            lo_s, hi_s = text.split("-", 1)
            indices = range(int(lo_s), int(hi_s) + 1)
        else:
            indices = [int(text)]
    else:
        indices = list(sel)
    out = tuple(sorted(set(int(i) for i in indices)))
    if not out:
        raise InvalidInputError("layer selection is empty")
    for i in out:
        if i < 1 or i > n_layers:
            raise InvalidInputError(f"layer index {i} outside [1, {n_layers}]")
    return out


def _from_dict(cls, data: dict):
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        if f.name == "weights":
            value = LossWeights(**value)
        elif f.name == "freeze":
            value = tuple(value)
        kwargs[f.name] = value
    return cls(**kwargs)


def experiment_from_dict(data: dict) -> ExperimentConfig:
    return ExperimentConfig(
        corpus=_from_dict(CorpusConfig, data.get("corpus", {})),
        enhancer=_from_dict(EnhancerConfig, data.get("enhancer", {})),
        fusion=_from_dict(FusionConfig, data.get("fusion", {})),
        asr=_from_dict(AsrConfig, data.get("asr", {})),
        training=_from_dict(TrainingConfig, data.get("training", {})),
        corpus_dir=data.get("corpus_dir"),
    )


def experiment_to_dict(cfg: ExperimentConfig) -> dict:
    data = dataclasses.asdict(cfg)
    data["training"]["freeze"] = list(cfg.training.freeze)
    return data


def load_experiment(path) -> ExperimentConfig:
    with open(path) as fh:
        return experiment_from_dict(json.load(fh))


def save_experiment(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(experiment_to_dict(cfg), indent=2, sort_keys=True) + "\n")
