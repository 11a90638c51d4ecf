"""Run configuration: one flat, JSON-serializable record reproduces a run.

Recipe defaults (Adam at 0.0002, plateau factor 0.7 with patience 8, stop
patience 32, label smoothing 0.1, checkpoint interval 4000, beam 5, length
penalty 1.0) follow the toolkit's published training recipe and are safe to
leave untouched for real runs; the toy suites override them for speed.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields

from minimt.errors import ConfigurationError

ARCHITECTURES = ("rnn", "transformer", "cnn")


@dataclass
class RunConfig:
    # architecture
    architecture: str = "rnn"
    embed_dim: int = 64
    model_dim: int = 64
    tie_source_target: bool = False
    tie_output_embedding: bool = False
    dropout: float = 0.1
    label_smoothing: float = 0.1
    max_positions: int = 512

    # rnn
    rnn_cell: str = "lstm"                 # lstm | gru
    rnn_encoder_layers: int = 1
    rnn_decoder_layers: int = 1
    rnn_attention: str = "mlp"             # mlp | dot | bilinear | multihead | location
    rnn_attention_dim: int = 0             # 0 -> model_dim
    rnn_attention_heads: int = 4
    rnn_context_gate: bool = False
    rnn_coverage: str = "none"             # none | count | gru
    rnn_coverage_dim: int = 4
    rnn_attention_first_layer: bool = False

    # transformer
    transformer_layers: int = 2
    transformer_heads: int = 4
    transformer_ff_dim: int = 0            # 0 -> 4 * model_dim
    transformer_postnorm: bool = True
    transformer_positional: str = "fixed"  # fixed | learned

    # cnn
    cnn_layers: int = 4
    cnn_kernel: int = 3
    cnn_positional: str = "learned"        # fixed | learned

    # data
    train_source: str = ""
    train_target: str = ""
    valid_source: str = ""
    valid_target: str = ""
    source_vocab: str = ""
    target_vocab: str = ""
    joint_vocab: bool = False
    vocab_max_size: int = 0                # 0 -> unlimited
    vocab_min_count: int = 1
    max_length: int = 100
    word_budget: int = 4096
    bucket_width: int = 8

    # optimization
    optimizer: str = "adam"                # sgd | adam | eve
    learning_rate: float = 0.0002
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    eve_beta3: float = 0.999
    eve_clip: float = 10.0
    clip_mode: str = "absolute"            # none | norm | absolute
    clip_threshold: float = 1.0

    # learning-rate schedule
    scheduler: str = "plateau_reduce"      # plateau_reduce | fixed_step | none
    lr_reduce_factor: float = 0.7
    lr_reduce_patience: int = 8
    lr_reset_to_best: bool = False
    fixed_step_schedule: str = ""          # "rate:checkpoints,rate:checkpoints"

    # stopping / monitoring
    stop_metric: str = "perplexity"        # perplexity | accuracy | bleu
    stop_patience: int = 32
    min_updates: int = 0
    max_updates: int = 0                   # 0 -> unbounded
    min_epochs: int = 0
    max_epochs: int = 0                    # 0 -> unbounded
    checkpoint_interval: int = 4000
    monitor_bleu: bool = False

    # decoding defaults
    beam_size: int = 5
    length_penalty_alpha: float = 1.0
    max_output_length_factor: float = 2.0
    max_output_length_constant: int = 10

    seed: int = 1

    def validate(self) -> "RunConfig":
        if self.architecture not in ARCHITECTURES:
            raise ConfigurationError(
                f"config field architecture must be one of {ARCHITECTURES}, "
                f"got {self.architecture!r}"
            )
        if self.rnn_cell not in ("lstm", "gru"):
            raise ConfigurationError(f"config field rnn_cell is invalid: {self.rnn_cell!r}")
        if self.rnn_attention not in ("mlp", "dot", "bilinear", "multihead", "location"):
            raise ConfigurationError(
                f"config field rnn_attention is invalid: {self.rnn_attention!r}"
            )
        if self.rnn_coverage not in ("none", "count", "gru"):
            raise ConfigurationError(f"config field rnn_coverage is invalid: {self.rnn_coverage!r}")
        if self.optimizer not in ("sgd", "adam", "eve"):
            raise ConfigurationError(f"config field optimizer is invalid: {self.optimizer!r}")
        if self.clip_mode not in ("none", "norm", "absolute"):
            raise ConfigurationError(f"config field clip_mode is invalid: {self.clip_mode!r}")
        if self.scheduler not in ("plateau_reduce", "fixed_step", "none"):
            raise ConfigurationError(f"config field scheduler is invalid: {self.scheduler!r}")
        if self.stop_metric not in ("perplexity", "accuracy", "bleu"):
            raise ConfigurationError(f"config field stop_metric is invalid: {self.stop_metric!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"config field dropout must be in [0, 1): {self.dropout}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigurationError(
                f"config field label_smoothing must be in [0, 1): {self.label_smoothing}"
            )
        if self.architecture == "transformer" and self.model_dim % self.transformer_heads != 0:
            raise ConfigurationError(
                f"config field transformer_heads must divide model_dim: "
                f"{self.transformer_heads} vs {self.model_dim}"
            )
        if self.architecture == "cnn" and self.cnn_kernel % 2 == 0:
            raise ConfigurationError(
                f"config field cnn_kernel must be odd for the encoder: {self.cnn_kernel}"
            )
        if self.scheduler == "plateau_reduce" and self.stop_patience <= self.lr_reduce_patience:
            raise ConfigurationError(
                "config field stop_patience must exceed lr_reduce_patience when "
                f"plateau_reduce is active: {self.stop_patience} vs {self.lr_reduce_patience}"
            )
        if self.beam_size < 1:
            raise ConfigurationError(f"config field beam_size must be >= 1: {self.beam_size}")
        return self

    @property
    def attention_dim(self) -> int:
        return self.rnn_attention_dim or self.model_dim

    @property
    def ff_dim(self) -> int:
        return self.transformer_ff_dim or 4 * self.model_dim

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, values: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ConfigurationError(f"unknown config field: {sorted(unknown)[0]}")
        coerced = {}
        for name, value in values.items():
            expected = known[name].type
            try:
                if expected == "int":
                    coerced[name] = int(value)
                elif expected == "float":
                    coerced[name] = float(value)
                elif expected == "bool":
                    if isinstance(value, str):
                        value = {"true": True, "false": False}[value.lower()]
                    coerced[name] = bool(value)
                else:
                    coerced[name] = str(value)
            except (ValueError, KeyError) as exc:
                raise ConfigurationError(
                    f"config field {name} has invalid value {value!r}"
                ) from exc
        return cls(**coerced).validate()

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            values = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(values, dict):
            raise ConfigurationError("config JSON must be an object")
        return cls.from_dict(values)

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json() + "\n")
