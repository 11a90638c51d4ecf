"""Components shared by all three architectures.

Embeddings are stored as ``[dim, vocab]`` matrices so that looking a token up
is picking a column; the output projection may share that storage when tied.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from minimt.autodiff import Tensor, ops
from minimt.data import PAD_ID
from minimt.errors import ConfigurationError, DimensionError, InputError, NumericalError


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Glorot uniform init; fans taken from the first two extents."""
    if len(shape) == 1:
        fan_in = fan_out = shape[0]
    else:
        fan_out, fan_in = shape[0], shape[1]
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Embedding:
    """Token embedding table of shape ``[dim, vocab_size]``."""

    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator,
                 weight: Tensor | None = None):
        self.vocab_size = vocab_size
        self.dim = dim
        if weight is not None:
            if weight.shape != (dim, vocab_size):
                raise DimensionError(
                    f"shared embedding shape {weight.shape} does not match "
                    f"({dim}, {vocab_size})"
                )
            self.weight = weight
        else:
            self.weight = Tensor(xavier_uniform(rng, (dim, vocab_size)), requires_grad=True)

    def __call__(self, ids: np.ndarray, scale: float | None = None) -> Tensor:
        """Embed a 1-d or 2-d id array into ``[..., dim]``."""
        ids = np.asarray(ids, dtype=np.int64)
        flat = ids.reshape(-1)
        out = ops.gather_columns(self.weight, flat)
        if scale is not None:
            out = ops.mul(out, float(scale))
        if ids.ndim == 2:
            out = ops.reshape(out, (ids.shape[0], ids.shape[1], self.dim))
        return out


def embed(ids: np.ndarray, weight: Tensor, scale: float | None = None) -> Tensor:
    """Functional form: row i of the result is column ids[i] of ``weight``."""
    out = ops.gather_columns(weight, np.asarray(ids, dtype=np.int64))
    if scale is not None:
        out = ops.mul(out, float(scale))
    return out


def sinusoid_table(n: int, d: int) -> np.ndarray:
    """Fixed positional encodings: sin on even dims, cos on odd dims."""
    if d % 2 != 0:
        raise ConfigurationError(f"fixed positional encoding needs an even dimension, got {d}")
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(0, d, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, i / d)
    table = np.zeros((n, d), dtype=np.float64)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table


class PositionalEncoding:
    """Fixed sinusoidal or learned positional table, returned as ``[n, d]``."""

    def __init__(self, kind: str, dim: int, max_length: int = 512,
                 rng: np.random.Generator | None = None):
        if kind not in ("fixed", "learned"):
            raise ConfigurationError(f"positional encoding kind must be fixed or learned, got {kind!r}")
        self.kind = kind
        self.dim = dim
        self.max_length = max_length
        if kind == "learned":
            if rng is None:
                raise ConfigurationError("learned positional encoding needs an init generator")
            self.weight = Tensor(xavier_uniform(rng, (dim, max_length)), requires_grad=True)
        else:
            self.weight = None

    def table(self, n: int) -> Tensor:
        if self.kind == "fixed":
            return ops.constant(sinusoid_table(n, self.dim))
        if n > self.max_length:
            raise InputError(
                f"sequence length {n} exceeds learned positional table size {self.max_length}"
            )
        return ops.transpose(ops.slice_axis(self.weight, 1, 0, n))


def positional_table(kind: str, n: int, d: int,
                     params: PositionalEncoding | None = None) -> Tensor:
    if kind == "fixed":
        return ops.constant(sinusoid_table(n, d))
    if params is None or params.kind != "learned":
        raise ConfigurationError("learned positional table requires learned parameters")
    return params.table(n)


def add_positions(embedded: Tensor, table: Tensor) -> Tensor:
    """Add an ``[n, d]`` positional table to ``[b, n, d]`` embeddings."""
    b = embedded.shape[0]
    n, d = table.shape
    tiled = ops.repeat_axis(ops.reshape(table, (1, n, d)), b, 0)
    return ops.add(embedded, tiled)


class OutputLayer:
    """Projection to target-vocabulary logits, optionally tied to the embedding."""

    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator,
                 tied_embedding: Tensor | None = None):
        self.vocab_size = vocab_size
        self.dim = dim
        self.tied = tied_embedding is not None
        if tied_embedding is not None:
            if tied_embedding.shape != (dim, vocab_size):
                raise DimensionError(
                    f"tying requires embedding shape ({dim}, {vocab_size}), "
                    f"got {tied_embedding.shape}"
                )
            self.weight = tied_embedding  # stored as [d, V]; logits use it directly
        else:
            self.weight = Tensor(xavier_uniform(rng, (vocab_size, dim)), requires_grad=True)
        self.bias = Tensor(np.zeros(vocab_size), requires_grad=True)

    def _weight_t(self, restrict: np.ndarray | None) -> Tensor:
        """Projection as ``[d, V']``."""
        if self.tied:
            w = self.weight
            if restrict is not None:
                w = ops.transpose(ops.take_rows(ops.transpose(w), restrict))
            return w
        w = self.weight
        if restrict is not None:
            w = ops.take_rows(w, restrict)
        return ops.transpose(w)

    def logits(self, sbar: Tensor, restrict: np.ndarray | None = None) -> Tensor:
        """``sbar @ W_o^T + b_o`` for ``[..., d]`` inputs.

        ``restrict`` selects a subset of vocabulary rows (vocabulary selection
        during decoding); the bias is subset accordingly.
        """
        if sbar.shape[-1] != self.dim:
            raise DimensionError(
                f"decoder representation dim {sbar.shape[-1]} does not match "
                f"output layer dim {self.dim}"
            )
        bias = self.bias
        if restrict is not None:
            restrict = np.asarray(restrict, dtype=np.int64)
            bias_col = ops.take_rows(ops.reshape(self.bias, (self.vocab_size, 1)), restrict)
            bias = ops.reshape(bias_col, (restrict.size,))
        wt = self._weight_t(restrict)
        if sbar.ndim == 2:
            return ops.add(ops.matmul(sbar, wt), bias)
        lead = sbar.shape[:-1]
        flat = ops.reshape(sbar, (int(np.prod(lead)), self.dim))
        out = ops.add(ops.matmul(flat, wt), bias)
        return ops.reshape(out, lead + (out.shape[-1],))


def output_logits(sbar: Tensor, layer: OutputLayer,
                  restrict: np.ndarray | None = None) -> Tensor:
    return layer.logits(sbar, restrict)


@dataclass
class LossResult:
    loss: Tensor          # label-smoothed total, differentiable
    token_count: int
    nll: float            # unsmoothed total negative log-likelihood
    correct: int          # argmax matches over non-PAD tokens


def cross_entropy_label_smoothed(
    logits: Tensor,
    targets: np.ndarray,
    epsilon: float,
    pad_mask: np.ndarray | None = None,
) -> LossResult:
    """Total smoothed cross-entropy over non-PAD tokens.

    The per-token target distribution puts ``1 - epsilon`` on the gold id and
    ``epsilon / (V - 1)`` on every other id. The returned ``nll`` is the
    unsmoothed negative log-likelihood of the same tokens, which is what
    perplexity is computed from.
    """
    if not 0.0 <= epsilon < 1.0:
        raise ConfigurationError(f"label smoothing must be in [0, 1), got {epsilon}")
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.ndim == 3:
        logits = ops.reshape(logits, (logits.shape[0] * logits.shape[1], logits.shape[2]))
    n, v = logits.shape
    if targets.shape != (n,):
        raise DimensionError(f"targets shape {targets.shape} does not match logits rows {n}")
    if pad_mask is None:
        mask = (targets != PAD_ID).astype(np.float64)
    else:
        mask = np.asarray(pad_mask).reshape(-1).astype(np.float64)
    logp = ops.log_softmax_rows(logits)
    gold = ops.select_index(logp, targets)
    gold_masked = ops.mul(gold, mask)
    nll_total = -float(gold_masked.data.sum())
    if epsilon == 0.0:
        loss = ops.neg(ops.sum_all(gold_masked))
    else:
        off = epsilon / (v - 1)
        row_sums = ops.mul(ops.sum_axis(logp, 1), mask)
        # q . logp = (1-eps) logp[gold] + off * (sum(logp) - logp[gold])
        weighted = ops.add(
            ops.mul(gold_masked, 1.0 - epsilon - off),
            ops.mul(row_sums, off),
        )
        loss = ops.neg(ops.sum_all(weighted))
    token_count = int(mask.sum())
    predictions = logp.data.argmax(axis=-1)
    correct = int(((predictions == targets) & (mask > 0)).sum())
    return LossResult(loss=loss, token_count=token_count, nll=nll_total, correct=correct)


def perplexity(total_loss: float, token_count: int) -> float:
    """exp of the average per-token negative log-likelihood."""
    if token_count <= 0:
        raise InputError("perplexity needs a positive token count")
    return float(np.exp(total_loss / token_count))


class WeightNorm:
    """Reparameterize a ``[out, in]`` weight as ``g * v / ||v||`` per output row."""

    def __init__(self, v: Tensor, g: Tensor):
        if v.ndim != 2 or g.shape != (v.shape[0],):
            raise DimensionError(
                f"weight norm needs v [out, in] and g [out], got {v.shape} and {g.shape}"
            )
        self.v = v
        self.g = g

    @classmethod
    def wrap(cls, rng: np.random.Generator, out_dim: int, in_dim: int) -> "WeightNorm":
        v = Tensor(xavier_uniform(rng, (out_dim, in_dim)), requires_grad=True)
        g = Tensor(np.ones(out_dim), requires_grad=True)
        return cls(v, g)

    def effective(self) -> Tensor:
        norms_sq = ops.sum_axis(ops.mul(self.v, self.v), 1, keepdims=True)
        if (norms_sq.data <= 0.0).any():
            raise NumericalError("weight normalization encountered a zero-norm row")
        inv_norm = ops.reciprocal(ops.sqrt(norms_sq))
        g_col = ops.reshape(self.g, (self.v.shape[0], 1))
        scale = ops.repeat_axis(ops.mul(g_col, inv_norm), self.v.shape[1], 1)
        return ops.mul(self.v, scale)


def weight_normalize(p: WeightNorm) -> Tensor:
    return p.effective()
