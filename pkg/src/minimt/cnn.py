"""Fully convolutional encoder-decoder with gated linear units.

Encoder convolutions are centered (odd kernel, zero padding at both ends);
decoder convolutions see only the current and previous positions (zero
padding on the left), and every decoder layer attends to the final encoder
states with a single head.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from minimt.autodiff import Tensor, no_grad, ops
from minimt.config import RunConfig
from minimt.data import Batch
from minimt.errors import ConfigurationError, DimensionError
from minimt.layers import Embedding, OutputLayer, PositionalEncoding, add_positions
from minimt.models import (
    DecodeState,
    ParamSet,
    Seq2SeqModel,
    StepResult,
    length_mask,
    log_softmax_np,
    shifted_decoder_input,
)
from minimt.transformer import MultiHeadParams, attend_projected, _project


def glu(h: Tensor) -> Tensor:
    """Gated linear unit over the last axis: split [a; b] -> a * sigmoid(b)."""
    d2 = h.shape[-1]
    if d2 % 2 != 0:
        raise DimensionError(f"glu needs an even last axis, got {h.shape}")
    d = d2 // 2
    a = ops.slice_axis(h, h.ndim - 1, 0, d)
    b = ops.slice_axis(h, h.ndim - 1, d, d2)
    return ops.mul(a, ops.sigmoid(b))


class ConvLayer:
    """One convolution W [k*d -> 2d] + bias, applied through GLU."""

    def __init__(self, ps: ParamSet, name: str, dim: int, kernel: int):
        self.dim = dim
        self.kernel = kernel
        self.W = ps.xavier(f"{name}.W", (kernel * dim, 2 * dim))
        self.b = ps.zeros(f"{name}.b", (2 * dim,))

    def windows(self, x: Tensor, left: int, right: int) -> Tensor:
        """Concatenate k shifted views of zero-padded x: [b,t,d] -> [b,t,k*d]."""
        b, t, d = x.shape
        padded = ops.pad_axis(x, 1, left, right)
        parts = [ops.slice_axis(padded, 1, j, j + t) for j in range(self.kernel)]
        return ops.concat(parts, 2)

    def apply(self, stacked: Tensor) -> Tensor:
        b, t, kd = stacked.shape
        flat = ops.reshape(stacked, (b * t, kd))
        out = ops.add(ops.matmul(flat, self.W), self.b)
        return glu(ops.reshape(out, (b, t, 2 * self.dim)))


def conv_encoder_layer(layer: ConvLayer, x: Tensor, mask3: np.ndarray) -> Tensor:
    """Centered convolution + GLU + residual; padding positions stay zero."""
    if layer.kernel % 2 == 0:
        raise ConfigurationError(f"encoder kernel width must be odd, got {layer.kernel}")
    half = layer.kernel // 2
    conv = layer.apply(layer.windows(x, half, half))
    out = ops.add(conv, x)
    return ops.mul(out, ops.constant(mask3))


def conv_decoder_layer(layer: ConvLayer, att: MultiHeadParams, sbar: Tensor,
                       kproj: Tensor, vproj: Tensor, src_mask: np.ndarray) -> Tensor:
    """Causal convolution, single-head source attention, residual sum.

    Returns s*_t + c_t + sbar_{t-1 layer}, per position.
    """
    m = sbar.shape[1]
    conv = layer.apply(layer.windows(sbar, layer.kernel - 1, 0))
    enc_mask = np.repeat(src_mask[:, None, :], m, axis=1)
    context = attend_projected(att, conv, kproj, vproj, enc_mask)
    return ops.add(ops.add(conv, context), sbar)


@dataclass
class CnnDecodeState(DecodeState):
    src_k: list[np.ndarray]        # per layer [R, n, d]
    src_v: list[np.ndarray]
    windows: list[np.ndarray]      # per layer [R, k-1, d] of that layer's inputs
    src_mask: np.ndarray
    position: int
    restrict: np.ndarray | None

    def reorder(self, rows: np.ndarray) -> "CnnDecodeState":
        return CnnDecodeState(
            src_k=[k[rows] for k in self.src_k],
            src_v=[v[rows] for v in self.src_v],
            windows=[w[rows] for w in self.windows],
            src_mask=self.src_mask[rows],
            position=self.position,
            restrict=self.restrict,
        )


class CnnModel(Seq2SeqModel):
    architecture = "cnn"
    exports_attention = True   # last decoder layer's single-head attention

    def __init__(self, cfg: RunConfig, source_vocab_size: int, target_vocab_size: int,
                 rng: np.random.Generator):
        super().__init__(cfg, source_vocab_size, target_vocab_size)
        ps = ParamSet(rng)
        self._params = ps
        e, d = cfg.embed_dim, cfg.model_dim
        if e != d:
            raise ConfigurationError(
                f"the convolutional model requires embed_dim == model_dim, got {e} and {d}"
            )
        self.src_embed = Embedding(source_vocab_size, e, rng)
        ps.add("src_embed", self.src_embed.weight)
        if cfg.tie_source_target:
            self.trg_embed = Embedding(target_vocab_size, e, rng, weight=self.src_embed.weight)
        else:
            self.trg_embed = Embedding(target_vocab_size, e, rng)
            ps.add("trg_embed", self.trg_embed.weight)
        self.pos = PositionalEncoding(cfg.cnn_positional, d, cfg.max_positions, rng)
        if self.pos.weight is not None:
            ps.add("pos", self.pos.weight)
        self.kernel = cfg.cnn_kernel
        self.enc_layers = [
            ConvLayer(ps, f"enc.l{i}", d, cfg.cnn_kernel) for i in range(cfg.cnn_layers)
        ]
        self.dec_layers = [
            ConvLayer(ps, f"dec.l{i}", d, cfg.cnn_kernel) for i in range(cfg.cnn_layers)
        ]
        self.dec_att = [
            MultiHeadParams(ps, f"dec.l{i}.att", d, 1) for i in range(cfg.cnn_layers)
        ]
        self.output = OutputLayer(
            target_vocab_size, d, rng,
            tied_embedding=self.trg_embed.weight if cfg.tie_output_embedding else None,
        )
        if not cfg.tie_output_embedding:
            ps.add("out.W", self.output.weight)
        ps.add("out.b", self.output.bias)

    def _embed(self, embedding: Embedding, ids: np.ndarray, mode: str,
               rng: np.random.Generator | None) -> Tensor:
        x = embedding(ids)
        x = add_positions(x, self.pos.table(ids.shape[1]))
        return ops.dropout(x, self.config.dropout, mode, rng)

    def encode(self, source: np.ndarray, lengths: np.ndarray, train: bool,
               rng: np.random.Generator | None) -> tuple[Tensor, np.ndarray]:
        mode = "train" if train else "infer"
        b, n = source.shape
        mask = length_mask(lengths, n)
        mask3 = np.repeat(mask[:, :, None], self.config.model_dim, axis=2).astype(np.float64)
        x = self._embed(self.src_embed, source, mode, rng)
        x = ops.mul(x, ops.constant(mask3))
        for layer in self.enc_layers:
            x = conv_encoder_layer(layer, x, mask3)
        return x, mask

    def forward_logits(self, batch: Batch, train: bool,
                       rng: np.random.Generator | None = None) -> Tensor:
        mode = "train" if train else "infer"
        H, src_mask = self.encode(batch.source, batch.source_lengths, train, rng)
        dec_in = shifted_decoder_input(batch.target)
        sbar = self._embed(self.trg_embed, dec_in, mode, rng)
        for layer, att in zip(self.dec_layers, self.dec_att):
            kproj = _project(H, att.wk)
            vproj = _project(H, att.wv)
            sbar = conv_decoder_layer(layer, att, sbar, kproj, vproj, src_mask)
        return self.output.logits(sbar)

    # -- incremental decoding --------------------------------------------------

    def start_state(self, source: np.ndarray, lengths: np.ndarray,
                    restrict: np.ndarray | None = None) -> CnnDecodeState:
        with no_grad():
            H, src_mask = self.encode(source, lengths, train=False, rng=None)
            src_k = [_project(H, att.wk).data for att in self.dec_att]
            src_v = [_project(H, att.wv).data for att in self.dec_att]
        b = H.shape[0]
        d = self.config.model_dim
        window = np.zeros((b, self.kernel - 1, d))
        return CnnDecodeState(
            src_k=src_k,
            src_v=src_v,
            windows=[window.copy() for _ in self.dec_layers],
            src_mask=src_mask,
            position=0,
            restrict=restrict,
        )

    def step(self, state: CnnDecodeState, prev_ids: np.ndarray
             ) -> tuple[StepResult, CnnDecodeState]:
        r = len(prev_ids)
        t = state.position
        d = self.config.model_dim
        new_windows: list[np.ndarray] = []
        with no_grad():
            x = self.trg_embed(np.asarray(prev_ids, dtype=np.int64).reshape(r, 1))
            pos_row = self.pos.table(t + 1)
            x = ops.add(x, ops.reshape(ops.slice_axis(pos_row, 0, t, t + 1), (d,)))
            alpha_last = None
            for i, (layer, att) in enumerate(zip(self.dec_layers, self.dec_att)):
                # window over this layer's input history, current position last
                new_windows.append(
                    np.concatenate([state.windows[i][:, 1:], x.data], axis=1)
                )
                stacked = ops.reshape(
                    ops.concat([ops.constant(state.windows[i]), x], 1),
                    (r, 1, self.kernel * d),
                )
                conv = layer.apply(stacked)
                enc_mask = state.src_mask[:, None, :]
                context = attend_projected(
                    att, conv, ops.constant(state.src_k[i]),
                    ops.constant(state.src_v[i]), enc_mask,
                )
                if i == len(self.dec_layers) - 1:
                    alpha_last = _single_head_alpha(
                        att, conv, state.src_k[i], state.src_mask
                    )
                x = ops.add(ops.add(conv, context), x)
            logits = self.output.logits(
                ops.reshape(x, (r, d)), restrict=state.restrict
            )
        new_state = replace(state, windows=new_windows, position=t + 1)
        return (
            StepResult(log_probs=log_softmax_np(logits.data), attention=alpha_last),
            new_state,
        )


def _single_head_alpha(att: MultiHeadParams, q_in: Tensor, kproj: np.ndarray,
                       mask: np.ndarray) -> np.ndarray:
    """Attention distribution of the single-head layer, for visualization."""
    q = q_in.data.reshape(q_in.shape[0], -1) @ att.wq.data
    scores = np.einsum("rd,rnd->rn", q, kproj) / np.sqrt(att.head_dim)
    scores = np.where(mask, scores, -np.inf)
    scores -= scores.max(axis=1, keepdims=True)
    e = np.exp(scores)
    return e / e.sum(axis=1, keepdims=True)
