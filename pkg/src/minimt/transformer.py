"""Self-attentional encoder-decoder.

Every block is Self-attention -> Post-process -> (Encoder attention ->
Post-process ->) Feed-forward -> Post-process, where post-processing is
either LayerNorm(x + Dropout(Sublayer(x))) (post_norm, the default) or the
pre-norm variant x + Dropout(Sublayer(LayerNorm(x))) with one final
normalization after the last block.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from minimt.autodiff import Tensor, no_grad, ops
from minimt.config import RunConfig
from minimt.data import Batch
from minimt.errors import ConfigurationError, ContractError, DimensionError
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


class MultiHeadParams:
    """Per-head projections stored as column blocks of combined [d, d] matrices."""

    def __init__(self, ps: ParamSet, name: str, dim: int, heads: int):
        if dim % heads != 0:
            raise ConfigurationError(
                f"model dim {dim} is not divisible by {heads} attention heads"
            )
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = ps.xavier(f"{name}.wq", (dim, dim))
        self.wk = ps.xavier(f"{name}.wk", (dim, dim))
        self.wv = ps.xavier(f"{name}.wv", (dim, dim))
        self.wo = ps.xavier(f"{name}.wo", (dim, dim))


def _project(x: Tensor, w: Tensor) -> Tensor:
    b, t, d = x.shape
    return ops.reshape(ops.matmul(ops.reshape(x, (b * t, d)), w), (b, t, w.shape[1]))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    du = d // heads
    return ops.reshape(
        ops.transpose(ops.reshape(x, (b, t, heads, du)), (0, 2, 1, 3)), (b * heads, t, du)
    )


def _merge_heads(x: Tensor, b: int, heads: int) -> Tensor:
    _, t, du = x.shape
    return ops.reshape(
        ops.transpose(ops.reshape(x, (b, heads, t, du)), (0, 2, 1, 3)), (b, t, heads * du)
    )


def attend_projected(params: MultiHeadParams, q_in: Tensor, kproj: Tensor, vproj: Tensor,
                     mask: np.ndarray | None) -> Tensor:
    """Multi-head attention with keys/values already projected to [b, k, d].

    The query projection happens here, so the incremental decoder can cache
    ``kproj``/``vproj`` and still share this code path with training.
    """
    b, q_len, _ = q_in.shape
    h, du = params.heads, params.head_dim
    q = _split_heads(_project(q_in, params.wq), h)
    k = _split_heads(kproj, h)
    v = _split_heads(vproj, h)
    scores = ops.mul(ops.bmm(q, ops.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(du))
    head_mask = None
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim == 2:
            mask = np.broadcast_to(mask[None], (b,) + mask.shape)
        head_mask = np.repeat(mask[:, None], h, axis=1).reshape(b * h, q_len, -1)
    alpha = ops.softmax_rows(scores, mask=head_mask)
    ctx = _merge_heads(ops.bmm(alpha, v), b, h)
    return _project(ctx, params.wo)


def multi_head_attention(params: MultiHeadParams, Q: Tensor, K: Tensor, V: Tensor,
                         mask: np.ndarray | None = None) -> Tensor:
    """Contract form over single-sentence matrices [q, d] / [k, d]."""
    if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
        raise DimensionError(
            f"multi_head_attention expects matrices, got {Q.shape}, {K.shape}, {V.shape}"
        )
    if mask is not None and np.asarray(mask).shape != (Q.shape[0], K.shape[0]):
        raise DimensionError(
            f"mask shape {np.asarray(mask).shape} does not match "
            f"[{Q.shape[0]}, {K.shape[0]}]"
        )
    q3 = ops.reshape(Q, (1,) + Q.shape)
    k3 = ops.reshape(K, (1,) + K.shape)
    v3 = ops.reshape(V, (1,) + V.shape)
    out = attend_projected(
        params, q3, _project(k3, params.wk), _project(v3, params.wv), mask
    )
    return ops.reshape(out, (Q.shape[0], params.dim))


class FeedForward:
    def __init__(self, ps: ParamSet, name: str, dim: int, ff_dim: int):
        self.W1 = ps.xavier(f"{name}.W1", (dim, ff_dim))
        self.b1 = ps.zeros(f"{name}.b1", (ff_dim,))
        self.W2 = ps.xavier(f"{name}.W2", (ff_dim, dim))
        self.b2 = ps.zeros(f"{name}.b2", (dim,))

    def __call__(self, x: Tensor) -> Tensor:
        return position_wise_ffn(self, x)


def position_wise_ffn(params: FeedForward, x: Tensor) -> Tensor:
    """max(0, x W1 + b1) W2 + b2, applied identically to every row."""
    lead = x.shape[:-1]
    flat = ops.reshape(x, (int(np.prod(lead)), x.shape[-1])) if x.ndim != 2 else x
    hidden = ops.relu(ops.add(ops.matmul(flat, params.W1), params.b1))
    out = ops.add(ops.matmul(hidden, params.W2), params.b2)
    return ops.reshape(out, lead + (out.shape[-1],)) if x.ndim != 2 else out


class SublayerNorm:
    def __init__(self, ps: ParamSet, name: str, dim: int):
        self.gain = ps.add(f"{name}.gain", Tensor(np.ones(dim), requires_grad=True))
        self.bias = ps.zeros(f"{name}.bias", (dim,))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_normalize(x, self.gain, self.bias)


def sublayer_apply(x: Tensor, sublayer: Callable[[Tensor], Tensor], mode: str,
                   structure: str, norm: SublayerNorm, dropout_p: float = 0.0,
                   rng: np.random.Generator | None = None) -> Tensor:
    """Residual + dropout + layer norm wrapping, post_norm or pre_norm."""
    if structure not in ("post_norm", "pre_norm"):
        raise ConfigurationError(f"unknown sublayer structure: {structure!r}")
    if structure == "post_norm":
        out = sublayer(x)
        if out.shape != x.shape:
            raise ContractError(
                f"sublayer changed shape from {x.shape} to {out.shape}"
            )
        out = ops.dropout(out, dropout_p, mode, rng)
        return norm(ops.add(x, out))
    out = sublayer(norm(x))
    if out.shape != x.shape:
        raise ContractError(f"sublayer changed shape from {x.shape} to {out.shape}")
    return ops.add(x, ops.dropout(out, dropout_p, mode, rng))


def causal_mask(m: int) -> np.ndarray:
    """Boolean [m, m] mask; entry (t, t') is true iff t' <= t."""
    if m < 1:
        raise ConfigurationError(f"causal mask needs m >= 1, got {m}")
    return np.tril(np.ones((m, m), dtype=bool))


class TransformerBlock:
    def __init__(self, ps: ParamSet, name: str, cfg: RunConfig, decoder: bool):
        d = cfg.model_dim
        self.self_att = MultiHeadParams(ps, f"{name}.self", d, cfg.transformer_heads)
        self.norm_self = SublayerNorm(ps, f"{name}.ln_self", d)
        self.src_att = None
        self.norm_src = None
        if decoder:
            self.src_att = MultiHeadParams(ps, f"{name}.src", d, cfg.transformer_heads)
            self.norm_src = SublayerNorm(ps, f"{name}.ln_src", d)
        self.ffn = FeedForward(ps, f"{name}.ffn", d, cfg.ff_dim)
        self.norm_ffn = SublayerNorm(ps, f"{name}.ln_ffn", d)


@dataclass
class TransformerDecodeState(DecodeState):
    src_k: list[np.ndarray]       # per block [R, n, d]
    src_v: list[np.ndarray]
    self_k: list[np.ndarray]      # per block [R, t, d]
    self_v: list[np.ndarray]
    src_mask: np.ndarray          # [R, n]
    position: int
    restrict: np.ndarray | None

    def reorder(self, rows: np.ndarray) -> "TransformerDecodeState":
        return TransformerDecodeState(
            src_k=[k[rows] for k in self.src_k],
            src_v=[v[rows] for v in self.src_v],
            self_k=[k[rows] for k in self.self_k],
            self_v=[v[rows] for v in self.self_v],
            src_mask=self.src_mask[rows],
            position=self.position,
            restrict=self.restrict,
        )


class TransformerModel(Seq2SeqModel):
    architecture = "transformer"
    exports_attention = False

    def __init__(self, cfg: RunConfig, source_vocab_size: int, target_vocab_size: int,
                 rng: np.random.Generator):
        super().__init__(cfg, source_vocab_size, target_vocab_size)
        ps = ParamSet(rng)
        self._params = ps
        e, d = cfg.embed_dim, cfg.model_dim
        if e != d:
            raise ConfigurationError(
                f"the transformer requires embed_dim == model_dim, got {e} and {d}"
            )
        self.src_embed = Embedding(source_vocab_size, e, rng)
        ps.add("src_embed", self.src_embed.weight)
        if cfg.tie_source_target:
            self.trg_embed = Embedding(target_vocab_size, e, rng, weight=self.src_embed.weight)
        else:
            self.trg_embed = Embedding(target_vocab_size, e, rng)
            ps.add("trg_embed", self.trg_embed.weight)
        self.pos = PositionalEncoding(cfg.transformer_positional, d, cfg.max_positions, rng)
        if self.pos.weight is not None:
            ps.add("pos", self.pos.weight)
        self.structure = "post_norm" if cfg.transformer_postnorm else "pre_norm"
        self.enc_blocks = [
            TransformerBlock(ps, f"enc.b{i}", cfg, decoder=False)
            for i in range(cfg.transformer_layers)
        ]
        self.dec_blocks = [
            TransformerBlock(ps, f"dec.b{i}", cfg, decoder=True)
            for i in range(cfg.transformer_layers)
        ]
        self.final_norm_enc = self.final_norm_dec = None
        if self.structure == "pre_norm":
            self.final_norm_enc = SublayerNorm(ps, "enc.ln_final", d)
            self.final_norm_dec = SublayerNorm(ps, "dec.ln_final", d)
        self.output = OutputLayer(
            target_vocab_size, d, rng,
            tied_embedding=self.trg_embed.weight if cfg.tie_output_embedding else None,
        )
        if not cfg.tie_output_embedding:
            ps.add("out.W", self.output.weight)
        ps.add("out.b", self.output.bias)
        self.scale = float(np.sqrt(d))

    # -- training path --------------------------------------------------------

    def _embed(self, embedding: Embedding, ids: np.ndarray, mode: str,
               rng: np.random.Generator | None) -> Tensor:
        x = embedding(ids, scale=self.scale)
        x = add_positions(x, self.pos.table(ids.shape[1]))
        return ops.dropout(x, self.config.dropout, mode, rng)

    def encode(self, source: np.ndarray, lengths: np.ndarray, train: bool,
               rng: np.random.Generator | None) -> tuple[Tensor, np.ndarray]:
        mode = "train" if train else "infer"
        b, n = source.shape
        key_mask = length_mask(lengths, n)
        x = self._embed(self.src_embed, source, mode, rng)
        att_mask = np.repeat(key_mask[:, None, :], n, axis=1)
        for block in self.enc_blocks:
            x = sublayer_apply(
                x,
                lambda y, blk=block: attend_projected(
                    blk.self_att, y, _project(y, blk.self_att.wk),
                    _project(y, blk.self_att.wv), att_mask,
                ),
                mode, self.structure, block.norm_self, self.config.dropout, rng,
            )
            x = sublayer_apply(
                x, block.ffn, mode, self.structure, block.norm_ffn,
                self.config.dropout, rng,
            )
        if self.final_norm_enc is not None:
            x = self.final_norm_enc(x)
        return x, key_mask

    def decode_teacher_forced(self, target_in: np.ndarray, H: Tensor,
                              src_mask: np.ndarray, train: bool,
                              rng: np.random.Generator | None) -> Tensor:
        mode = "train" if train else "infer"
        b, m = target_in.shape
        s = self._embed(self.trg_embed, target_in, mode, rng)
        self_mask = np.broadcast_to(causal_mask(m)[None], (b, m, m))
        enc_mask = np.repeat(src_mask[:, None, :], m, axis=1)
        for block in self.dec_blocks:
            s = sublayer_apply(
                s,
                lambda y, blk=block: attend_projected(
                    blk.self_att, y, _project(y, blk.self_att.wk),
                    _project(y, blk.self_att.wv), self_mask,
                ),
                mode, self.structure, block.norm_self, self.config.dropout, rng,
            )
            s = sublayer_apply(
                s,
                lambda y, blk=block: attend_projected(
                    blk.src_att, y, _project(H, blk.src_att.wk),
                    _project(H, blk.src_att.wv), enc_mask,
                ),
                mode, self.structure, block.norm_src, self.config.dropout, rng,
            )
            s = sublayer_apply(
                s, block.ffn, mode, self.structure, block.norm_ffn,
                self.config.dropout, rng,
            )
        if self.final_norm_dec is not None:
            s = self.final_norm_dec(s)
        return s

    def forward_logits(self, batch: Batch, train: bool,
                       rng: np.random.Generator | None = None) -> Tensor:
        H, src_mask = self.encode(batch.source, batch.source_lengths, train, rng)
        dec_in = shifted_decoder_input(batch.target)
        s = self.decode_teacher_forced(dec_in, H, src_mask, train, rng)
        return self.output.logits(s)

    # -- incremental decoding --------------------------------------------------

    def start_state(self, source: np.ndarray, lengths: np.ndarray,
                    restrict: np.ndarray | None = None) -> TransformerDecodeState:
        with no_grad():
            H, src_mask = self.encode(source, lengths, train=False, rng=None)
            src_k = [
                _project(H, blk.src_att.wk).data for blk in self.dec_blocks
            ]
            src_v = [
                _project(H, blk.src_att.wv).data for blk in self.dec_blocks
            ]
        b, _, d = H.shape
        empty = np.zeros((b, 0, d))
        return TransformerDecodeState(
            src_k=src_k,
            src_v=src_v,
            self_k=[empty.copy() for _ in self.dec_blocks],
            self_v=[empty.copy() for _ in self.dec_blocks],
            src_mask=src_mask,
            position=0,
            restrict=restrict,
        )

    def _apply_infer(self, x: Tensor, fn, norm: SublayerNorm) -> Tensor:
        if self.structure == "post_norm":
            return norm(ops.add(x, fn(x)))
        return ops.add(x, fn(norm(x)))

    def step(self, state: TransformerDecodeState, prev_ids: np.ndarray
             ) -> tuple[StepResult, TransformerDecodeState]:
        r = len(prev_ids)
        t = state.position
        new_self_k: list[np.ndarray] = []
        new_self_v: list[np.ndarray] = []
        with no_grad():
            x = self.trg_embed(
                np.asarray(prev_ids, dtype=np.int64).reshape(r, 1), scale=self.scale
            )
            pos_row = self.pos.table(t + 1)
            x = ops.add(x, ops.reshape(ops.slice_axis(pos_row, 0, t, t + 1), (x.shape[2],)))
            n = state.src_mask.shape[1]
            enc_mask = state.src_mask[:, None, :]
            for i, block in enumerate(self.dec_blocks):
                def self_fn(y, blk=block, idx=i):
                    k_new = _project(y, blk.self_att.wk).data
                    v_new = _project(y, blk.self_att.wv).data
                    k_all = np.concatenate([state.self_k[idx], k_new], axis=1)
                    v_all = np.concatenate([state.self_v[idx], v_new], axis=1)
                    new_self_k.append(k_all)
                    new_self_v.append(v_all)
                    return attend_projected(
                        blk.self_att, y, ops.constant(k_all), ops.constant(v_all), None
                    )

                x = self._apply_infer(x, self_fn, block.norm_self)
                x = self._apply_infer(
                    x,
                    lambda y, idx=i, blk=block: attend_projected(
                        blk.src_att, y, ops.constant(state.src_k[idx]),
                        ops.constant(state.src_v[idx]), enc_mask,
                    ),
                    block.norm_src,
                )
                x = self._apply_infer(x, block.ffn, block.norm_ffn)
            if self.final_norm_dec is not None:
                x = self.final_norm_dec(x)
            logits = self.output.logits(
                ops.reshape(x, (r, self.config.model_dim)), restrict=state.restrict
            )
        new_state = replace(
            state, self_k=new_self_k, self_v=new_self_v, position=t + 1
        )
        return StepResult(log_probs=log_softmax_np(logits.data), attention=None), new_state
