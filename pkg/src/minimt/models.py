"""Common model plumbing: parameter registry, decode-state protocol, factory."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from minimt.autodiff import Tensor, no_grad, ops
from minimt.config import RunConfig
from minimt.data import BOS_ID, Batch, PAD_ID
from minimt.errors import ConfigurationError
from minimt.layers import LossResult, cross_entropy_label_smoothed, xavier_uniform


class ParamSet:
    """Ordered name -> Tensor registry; checkpoints and optimizers key on it."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.params: dict[str, Tensor] = {}

    def xavier(self, name: str, shape: tuple[int, ...]) -> Tensor:
        return self.add(name, Tensor(xavier_uniform(self.rng, shape), requires_grad=True))

    def zeros(self, name: str, shape: tuple[int, ...]) -> Tensor:
        return self.add(name, Tensor(np.zeros(shape), requires_grad=True))

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self.params:
            raise ConfigurationError(f"duplicate parameter name: {name}")
        self.params[name] = tensor
        return tensor

    def alias(self, name: str, tensor: Tensor) -> Tensor:
        """Expose shared storage under its canonical name only; no new entry."""
        return tensor


@dataclass
class StepResult:
    log_probs: np.ndarray          # [rows, V or V'] over the (restricted) vocabulary
    attention: np.ndarray | None   # [rows, n] rows summing to 1, if the model exposes it


class DecodeState:
    """Per-hypothesis decoder arrays. ``reorder`` gathers rows for beam search."""

    def reorder(self, rows: np.ndarray) -> "DecodeState":
        raise NotImplementedError


class Seq2SeqModel:
    """Interface shared by the three architectures."""

    architecture: str = ""
    exports_attention: bool = False

    def __init__(self, config: RunConfig, source_vocab_size: int, target_vocab_size: int):
        self.config = config
        self.source_vocab_size = source_vocab_size
        self.target_vocab_size = target_vocab_size

    @property
    def parameters(self) -> dict[str, Tensor]:
        return self._params.params

    def loss(self, batch: Batch, epsilon: float, train: bool,
             rng: np.random.Generator | None = None) -> LossResult:
        """Teacher-forced label-smoothed loss over one batch."""
        logits = self.forward_logits(batch, train=train, rng=rng)
        flat_targets = batch.target.reshape(-1)
        return cross_entropy_label_smoothed(logits, flat_targets, epsilon)

    def forward_logits(self, batch: Batch, train: bool,
                       rng: np.random.Generator | None = None) -> Tensor:
        raise NotImplementedError

    def start_state(self, source: np.ndarray, lengths: np.ndarray,
                    restrict: np.ndarray | None = None) -> DecodeState:
        """Prepare decoding for a batch of sources, one hypothesis row each."""
        raise NotImplementedError

    def step(self, state: DecodeState, prev_ids: np.ndarray) -> tuple[StepResult, DecodeState]:
        raise NotImplementedError


def shifted_decoder_input(target: np.ndarray) -> np.ndarray:
    """Gold decoder inputs: BOS followed by the target sequence minus its last id."""
    shifted = np.empty_like(target)
    shifted[:, 0] = BOS_ID
    shifted[:, 1:] = target[:, :-1]
    # positions after EOS hold PAD in `target`; the shifted copy keeps PAD there
    return shifted


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def length_mask(lengths: np.ndarray, n: int) -> np.ndarray:
    return np.arange(n)[None, :] < np.asarray(lengths)[:, None]


def build_model(config: RunConfig, source_vocab_size: int, target_vocab_size: int,
                rng: np.random.Generator) -> Seq2SeqModel:
    from minimt.rnn import RnnModel
    from minimt.transformer import TransformerModel
    from minimt.cnn import CnnModel

    config.validate()
    if config.tie_source_target and source_vocab_size != target_vocab_size:
        raise ConfigurationError(
            "tie_source_target requires identical vocabulary sizes, got "
            f"{source_vocab_size} and {target_vocab_size}"
        )
    if config.tie_output_embedding and config.embed_dim != config.model_dim:
        raise ConfigurationError(
            "tie_output_embedding requires embed_dim == model_dim, got "
            f"{config.embed_dim} and {config.model_dim}"
        )
    if config.architecture == "rnn":
        return RnnModel(config, source_vocab_size, target_vocab_size, rng)
    if config.architecture == "transformer":
        return TransformerModel(config, source_vocab_size, target_vocab_size, rng)
    return CnnModel(config, source_vocab_size, target_vocab_size, rng)
