"""Stacked recurrent encoder-decoder with input feeding and attention.

The first encoder layer is bidirectional (states concatenated); upper layers
are unidirectional with residual connections, where the recurrent input of a
residual layer is the residual-summed output of the previous position. The
decoder feeds the previous attentional vector into its first layer.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from minimt.autodiff import Tensor, no_grad, ops
from minimt.config import RunConfig
from minimt.data import Batch
from minimt.errors import ConfigurationError, DimensionError, InputError
from minimt.layers import Embedding, OutputLayer
from minimt.models import (
    DecodeState,
    ParamSet,
    Seq2SeqModel,
    StepResult,
    length_mask,
    log_softmax_np,
    shifted_decoder_input,
)


class LstmCell:
    """LSTM with gate order (input, forget, candidate, output).

    The forget-gate bias is initialized to 1.0.
    """

    kind = "lstm"

    def __init__(self, ps: ParamSet, name: str, in_dim: int, hidden: int):
        self.hidden = hidden
        self.Wx = ps.xavier(f"{name}.Wx", (in_dim, 4 * hidden))
        self.Wh = ps.xavier(f"{name}.Wh", (hidden, 4 * hidden))
        self.b = ps.zeros(f"{name}.b", (4 * hidden,))
        self.b.data[hidden : 2 * hidden] = 1.0

    def step(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        d = self.hidden
        g = ops.add(ops.add(ops.matmul(x, self.Wx), ops.matmul(h, self.Wh)), self.b)
        i = ops.sigmoid(ops.slice_axis(g, 1, 0, d))
        f = ops.sigmoid(ops.slice_axis(g, 1, d, 2 * d))
        cand = ops.tanh(ops.slice_axis(g, 1, 2 * d, 3 * d))
        o = ops.sigmoid(ops.slice_axis(g, 1, 3 * d, 4 * d))
        c_new = ops.add(ops.mul(f, c), ops.mul(i, cand))
        h_new = ops.mul(o, ops.tanh(c_new))
        return h_new, c_new


class GruCell:
    """GRU with the reset-before-candidate convention h' = (1-z) h + z h~."""

    kind = "gru"

    def __init__(self, ps: ParamSet, name: str, in_dim: int, hidden: int):
        self.hidden = hidden
        self.Wx = ps.xavier(f"{name}.Wx", (in_dim, 3 * hidden))
        self.Wg = ps.xavier(f"{name}.Wg", (hidden, 2 * hidden))
        self.Wc = ps.xavier(f"{name}.Wc", (hidden, hidden))
        self.b = ps.zeros(f"{name}.b", (3 * hidden,))

    def step(self, x: Tensor, h: Tensor, c: Tensor | None = None) -> tuple[Tensor, None]:
        d = self.hidden
        gx = ops.add(ops.matmul(x, self.Wx), self.b)
        gh = ops.matmul(h, self.Wg)
        r = ops.sigmoid(ops.add(ops.slice_axis(gx, 1, 0, d), ops.slice_axis(gh, 1, 0, d)))
        z = ops.sigmoid(ops.add(ops.slice_axis(gx, 1, d, 2 * d), ops.slice_axis(gh, 1, d, 2 * d)))
        cand = ops.tanh(
            ops.add(ops.slice_axis(gx, 1, 2 * d, 3 * d), ops.matmul(ops.mul(r, h), self.Wc))
        )
        h_new = ops.add(ops.mul(ops.sub(1.0, z), h), ops.mul(z, cand))
        return h_new, None


def make_cell(kind: str, ps: ParamSet, name: str, in_dim: int, hidden: int):
    if kind == "lstm":
        return LstmCell(ps, name, in_dim, hidden)
    if kind == "gru":
        return GruCell(ps, name, in_dim, hidden)
    raise ConfigurationError(f"unknown rnn cell kind: {kind!r}")


def rnn_cell_step(cell, x: Tensor, state: tuple[Tensor, Tensor | None]):
    """Contract form of a single cell step: state is (hidden, memory)."""
    h, c = state
    return cell.step(x, h, c)


# ---------------------------------------------------------------------------
# attention family


@dataclass
class AttentionPrecompute:
    """Once-per-source quantities reused at every decoder step."""

    H: Tensor                      # [b, n, d_enc]
    mask: np.ndarray               # [b, n] bool
    mlp_pre: Tensor | None = None  # [b, n, a]
    keys: Tensor | None = None     # [b, h, n, du]
    values: Tensor | None = None   # [b, h, n, du]


class RnnAttention:
    """Score network over encoder states; kind selects the Table-style family."""

    def __init__(self, ps: ParamSet, cfg: RunConfig, enc_dim: int, dec_dim: int):
        self.kind = cfg.rnn_attention
        self.enc_dim = enc_dim
        self.dec_dim = dec_dim
        self.heads = cfg.rnn_attention_heads
        self.att_dim = cfg.attention_dim
        self.max_positions = cfg.max_positions
        coverage_dim = {"none": 0, "count": 1, "gru": cfg.rnn_coverage_dim}[cfg.rnn_coverage]
        if self.kind == "mlp":
            a = self.att_dim
            self.W_u = ps.xavier("att.W_u", (dec_dim, a))
            self.W_v = ps.xavier("att.W_v", (enc_dim, a))
            self.v_a = ps.xavier("att.v_a", (a, 1))
            self.W_c = ps.xavier("att.W_c", (coverage_dim, a)) if coverage_dim else None
        elif self.kind == "dot":
            if enc_dim != dec_dim:
                raise ConfigurationError(
                    f"dot attention needs equal dims, got encoder {enc_dim} "
                    f"and decoder {dec_dim}"
                )
        elif self.kind == "bilinear":
            self.W = ps.xavier("att.W", (dec_dim, enc_dim))
        elif self.kind == "multihead":
            if self.att_dim % self.heads != 0:
                raise ConfigurationError(
                    f"attention dim {self.att_dim} not divisible by {self.heads} heads"
                )
            self.wq = ps.xavier("att.wq", (dec_dim, self.att_dim))
            self.wk = ps.xavier("att.wk", (enc_dim, self.att_dim))
            self.wv = ps.xavier("att.wv", (enc_dim, self.att_dim))
            self.wo = ps.xavier("att.wo", (self.att_dim, self.att_dim))
        elif self.kind == "location":
            self.W_loc = ps.xavier("att.W_loc", (dec_dim, self.max_positions))
        else:
            raise ConfigurationError(f"unknown rnn attention kind: {self.kind!r}")

    @property
    def context_dim(self) -> int:
        return self.att_dim if self.kind == "multihead" else self.enc_dim

    def prepare(self, H: Tensor, mask: np.ndarray) -> AttentionPrecompute:
        b, n, de = H.shape
        pre = AttentionPrecompute(H=H, mask=mask)
        flat = ops.reshape(H, (b * n, de))
        if self.kind == "mlp":
            pre.mlp_pre = ops.reshape(ops.matmul(flat, self.W_v), (b, n, self.att_dim))
        elif self.kind == "multihead":
            du = self.att_dim // self.heads
            k = ops.reshape(ops.matmul(flat, self.wk), (b, n, self.heads, du))
            v = ops.reshape(ops.matmul(flat, self.wv), (b, n, self.heads, du))
            pre.keys = ops.transpose(k, (0, 2, 1, 3))
            pre.values = ops.transpose(v, (0, 2, 1, 3))
        return pre

    def __call__(self, s: Tensor, pre: AttentionPrecompute,
                 coverage: Tensor | None = None) -> tuple[Tensor, Tensor]:
        """Attend with a batch of queries: returns (alpha [b,n], context [b,dc])."""
        b, n, de = pre.H.shape
        if self.kind == "multihead":
            return self._multihead(s, pre)
        if self.kind == "mlp":
            q = ops.repeat_axis(ops.reshape(ops.matmul(s, self.W_u), (b, 1, self.att_dim)), n, 1)
            inner = ops.add(q, pre.mlp_pre)
            if coverage is not None:
                if self.W_c is None:
                    raise ConfigurationError("coverage term used but coverage is disabled")
                cd = coverage.shape[-1]
                cov_term = ops.reshape(
                    ops.matmul(ops.reshape(coverage, (b * n, cd)), self.W_c),
                    (b, n, self.att_dim),
                )
                inner = ops.add(inner, cov_term)
            scores = ops.reshape(
                ops.matmul(ops.reshape(ops.tanh(inner), (b * n, self.att_dim)), self.v_a),
                (b, n),
            )
        elif self.kind == "dot":
            scores = ops.reshape(ops.bmm(pre.H, ops.reshape(s, (b, self.dec_dim, 1))), (b, n))
        elif self.kind == "bilinear":
            sw = ops.matmul(s, self.W)
            scores = ops.reshape(ops.bmm(pre.H, ops.reshape(sw, (b, self.enc_dim, 1))), (b, n))
        else:  # location: scores come from the decoder state alone
            if n > self.max_positions:
                raise InputError(
                    f"location attention table covers {self.max_positions} positions, "
                    f"source has {n}"
                )
            scores = ops.slice_axis(ops.matmul(s, self.W_loc), 1, 0, n)
        alpha = ops.softmax_rows(scores, mask=pre.mask)
        context = ops.reshape(ops.bmm(ops.reshape(alpha, (b, 1, n)), pre.H), (b, de))
        return alpha, context

    def _multihead(self, s: Tensor, pre: AttentionPrecompute) -> tuple[Tensor, Tensor]:
        b, n, _ = pre.H.shape
        h, du = self.heads, self.att_dim // self.heads
        q = ops.reshape(ops.matmul(s, self.wq), (b, h, 1, du))
        q = ops.reshape(q, (b * h, 1, du))
        keys = ops.reshape(pre.keys, (b * h, n, du))
        values = ops.reshape(pre.values, (b * h, n, du))
        scores = ops.mul(ops.bmm(q, ops.transpose(keys, (0, 2, 1))), 1.0 / np.sqrt(du))
        mask = np.repeat(pre.mask[:, None, None, :], h, axis=1).reshape(b * h, 1, n)
        alpha_h = ops.softmax_rows(scores, mask=mask)
        ctx = ops.reshape(ops.bmm(alpha_h, values), (b, self.att_dim))
        context = ops.matmul(ctx, self.wo)
        # distribution for coverage/visualization: average over heads
        alpha = ops.mul(
            ops.reshape(ops.sum_axis(ops.reshape(alpha_h, (b, h, n)), 1), (b, n)),
            1.0 / h,
        )
        return alpha, context


def attention_score(att: RnnAttention, s: Tensor, H: Tensor,
                    coverage: Tensor | None = None) -> Tensor:
    """Pre-softmax scores for one query over ``[n, d_enc]`` encoder states.

    Defined for the scalar-score kinds; the multihead kind produces per-head
    contexts rather than a single score vector and must go through the
    attention object itself.
    """
    n, de = H.shape
    if att.kind == "mlp":
        q = ops.matmul(ops.reshape(s, (1, att.dec_dim)), att.W_u)
        inner = ops.add(ops.matmul(H, att.W_v), ops.repeat_axis(q, n, 0))
        if coverage is not None:
            inner = ops.add(inner, ops.matmul(coverage, att.W_c))
        return ops.reshape(ops.matmul(ops.tanh(inner), att.v_a), (n,))
    if att.kind == "dot":
        if s.shape != (de,):
            raise ConfigurationError(
                f"dot attention needs matching dims, got query {s.shape} and states {H.shape}"
            )
        return ops.reshape(ops.matmul(H, ops.reshape(s, (de, 1))), (n,))
    if att.kind == "bilinear":
        sw = ops.matmul(ops.reshape(s, (1, att.dec_dim)), att.W)
        return ops.reshape(ops.matmul(H, ops.transpose(sw)), (n,))
    if att.kind == "location":
        scores = ops.matmul(ops.reshape(s, (1, att.dec_dim)), att.W_loc)
        return ops.reshape(ops.slice_axis(scores, 1, 0, n), (n,))
    raise ConfigurationError(
        "multihead attention produces per-head contexts; call the attention object"
    )


def attention_context(scores: Tensor, H: Tensor,
                      mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Masked softmax over scores and the weighted sum of encoder states."""
    n = scores.shape[0]
    row_mask = None if mask is None else np.asarray(mask, bool).reshape(1, n)
    alpha = ops.softmax_rows(ops.reshape(scores, (1, n)), mask=row_mask)
    context = ops.reshape(ops.matmul(alpha, H), (H.shape[1],))
    return ops.reshape(alpha, (n,)), context


class ContextGate:
    """Sigmoid gate balancing decoder state against source context."""

    def __init__(self, ps: ParamSet, embed_dim: int, dec_dim: int, ctx_dim: int):
        if ctx_dim != dec_dim:
            raise ConfigurationError(
                "context gating requires the context dim to equal the decoder dim, "
                f"got {ctx_dim} and {dec_dim}"
            )
        self.W_z = ps.xavier("gate.W_z", (embed_dim, dec_dim))
        self.U_z = ps.xavier("gate.U_z", (dec_dim, dec_dim))
        self.C_z = ps.xavier("gate.C_z", (dec_dim, dec_dim))

    def __call__(self, y_prev_emb: Tensor, s_prev: Tensor, sbar: Tensor) -> Tensor:
        return context_gate(y_prev_emb, s_prev, sbar, self)


def context_gate(y_prev_embedding: Tensor, s_prev: Tensor, sbar_t: Tensor,
                 gate: ContextGate) -> Tensor:
    """z_t = sigmoid(W_z E_T(y_{t-1}) + U_z s_{t-1} + C_z sbar_t)."""
    if y_prev_embedding.shape[-1] != gate.W_z.shape[0]:
        raise DimensionError(
            f"gate embedding input dim {y_prev_embedding.shape[-1]} does not match "
            f"W_z {gate.W_z.shape}"
        )
    return ops.sigmoid(
        ops.add(
            ops.add(ops.matmul(y_prev_embedding, gate.W_z), ops.matmul(s_prev, gate.U_z)),
            ops.matmul(sbar_t, gate.C_z),
        )
    )


def coverage_update(cov: Tensor, alpha: Tensor, s: Tensor, H: Tensor,
                    kind: str, cell: GruCell | None = None) -> Tensor:
    """Advance per-source-position coverage after one attention step.

    count: cov'_i = cov_i + alpha_i. gru: cov'_i = GRU(cov_i; [alpha_i, h_i, s]).
    Shapes: cov [b,n,cd], alpha [b,n], s [b,d], H [b,n,de].
    """
    b, n, cd = cov.shape
    if kind == "count":
        return ops.add(cov, ops.reshape(alpha, (b, n, 1)))
    if kind != "gru" or cell is None:
        raise ConfigurationError(f"unknown coverage kind: {kind!r}")
    de = H.shape[-1]
    d = s.shape[-1]
    s_tiled = ops.repeat_axis(ops.reshape(s, (b, 1, d)), n, 1)
    x = ops.concat([ops.reshape(alpha, (b, n, 1)), H, s_tiled], 2)
    flat_x = ops.reshape(x, (b * n, 1 + de + d))
    flat_cov = ops.reshape(cov, (b * n, cd))
    new_cov, _ = cell.step(flat_x, flat_cov)
    return ops.reshape(new_cov, (b, n, cd))


def decoder_init(H: Tensor, lengths: np.ndarray, W_init: Tensor, b_init: Tensor) -> Tensor:
    """s_0 = tanh(W_init h_n + b_init) from the state at the true last position."""
    b, n, d_top = H.shape
    onehot = np.zeros((b, 1, n))
    onehot[np.arange(b), 0, np.asarray(lengths) - 1] = 1.0
    h_n = ops.reshape(ops.bmm(ops.constant(onehot), H), (b, d_top))
    return ops.tanh(ops.add(ops.matmul(h_n, W_init), b_init))


# ---------------------------------------------------------------------------
# full model


@dataclass
class RnnDecodeState(DecodeState):
    H: np.ndarray
    mask: np.ndarray
    mlp_pre: np.ndarray | None
    keys: np.ndarray | None
    values: np.ndarray | None
    hidden: list[np.ndarray]
    cell: list[np.ndarray] | None
    sbar: np.ndarray
    coverage: np.ndarray | None
    restrict: np.ndarray | None

    def reorder(self, rows: np.ndarray) -> "RnnDecodeState":
        take = lambda a: None if a is None else a[rows]
        return RnnDecodeState(
            H=self.H[rows],
            mask=self.mask[rows],
            mlp_pre=take(self.mlp_pre),
            keys=take(self.keys),
            values=take(self.values),
            hidden=[h[rows] for h in self.hidden],
            cell=None if self.cell is None else [c[rows] for c in self.cell],
            sbar=self.sbar[rows],
            coverage=take(self.coverage),
            restrict=self.restrict,
        )

    def precompute(self) -> AttentionPrecompute:
        pre = AttentionPrecompute(H=ops.constant(self.H), mask=self.mask)
        if self.mlp_pre is not None:
            pre.mlp_pre = ops.constant(self.mlp_pre)
        if self.keys is not None:
            pre.keys = ops.constant(self.keys)
            pre.values = ops.constant(self.values)
        return pre


class RnnModel(Seq2SeqModel):
    architecture = "rnn"
    exports_attention = True

    def __init__(self, cfg: RunConfig, source_vocab_size: int, target_vocab_size: int,
                 rng: np.random.Generator):
        super().__init__(cfg, source_vocab_size, target_vocab_size)
        ps = ParamSet(rng)
        self._params = ps
        e, d = cfg.embed_dim, cfg.model_dim
        self.src_embed = Embedding(source_vocab_size, e, rng)
        ps.add("src_embed", self.src_embed.weight)
        if cfg.tie_source_target:
            self.trg_embed = Embedding(target_vocab_size, e, rng, weight=self.src_embed.weight)
        else:
            self.trg_embed = Embedding(target_vocab_size, e, rng)
            ps.add("trg_embed", self.trg_embed.weight)

        kind = cfg.rnn_cell
        self.enc_layers = cfg.rnn_encoder_layers
        self.dec_layers = cfg.rnn_decoder_layers
        self.fwd_cell = make_cell(kind, ps, "enc.l0.fwd", e, d)
        self.bwd_cell = make_cell(kind, ps, "enc.l0.bwd", e, d)
        self.enc_upper = []
        if self.enc_layers > 1:
            self.W_bridge = ps.xavier("enc.bridge", (2 * d, d))
            for l in range(1, self.enc_layers):
                self.enc_upper.append(make_cell(kind, ps, f"enc.l{l}", d, d))
        else:
            self.W_bridge = None
        self.enc_out_dim = 2 * d if self.enc_layers == 1 else d

        self.attention = RnnAttention(ps, cfg, self.enc_out_dim, d)
        ctx_dim = self.attention.context_dim
        self.coverage_kind = cfg.rnn_coverage
        if self.coverage_kind != "none" and cfg.rnn_attention != "mlp":
            raise ConfigurationError("coverage models require mlp attention")
        self.coverage_cell = (
            make_cell("gru", ps, "cov", 1 + self.enc_out_dim + d, cfg.rnn_coverage_dim)
            if self.coverage_kind == "gru"
            else None
        )
        self.coverage_dim = {"none": 0, "count": 1, "gru": cfg.rnn_coverage_dim}[
            self.coverage_kind
        ]

        self.attention_first_layer = cfg.rnn_attention_first_layer
        dec_in = e + d  # input feeding: [E_T y_{t-1}; sbar_{t-1}]
        self.dec_cells = [make_cell(kind, ps, "dec.l0", dec_in, d)]
        upper_in = d + (ctx_dim if self.attention_first_layer else 0)
        for l in range(1, self.dec_layers):
            self.dec_cells.append(make_cell(kind, ps, f"dec.l{l}", upper_in, d))

        self.W_init = ps.xavier("init.W", (self.enc_out_dim, d))
        self.b_init = ps.zeros("init.b", (d,))
        self.W_sbar = ps.xavier("dec.W_sbar", (d + ctx_dim, d))
        self.gate = (
            ContextGate(ps, e, d, ctx_dim) if cfg.rnn_context_gate else None
        )
        self.output = OutputLayer(
            target_vocab_size, d, rng,
            tied_embedding=self.trg_embed.weight if cfg.tie_output_embedding else None,
        )
        if not cfg.tie_output_embedding:
            ps.add("out.W", self.output.weight)
        ps.add("out.b", self.output.bias)
        self.is_lstm = kind == "lstm"

    # -- encoder ------------------------------------------------------------

    def _run_direction(self, cell, steps: list[Tensor], mask: np.ndarray,
                       reverse: bool) -> list[Tensor]:
        b = steps[0].shape[0]
        d = cell.hidden
        h = ops.constant(np.zeros((b, d)))
        c = ops.constant(np.zeros((b, d)))
        out: list[Tensor | None] = [None] * len(steps)
        order = range(len(steps) - 1, -1, -1) if reverse else range(len(steps))
        for i in order:
            h_new, c_new = cell.step(steps[i], h, c)
            if reverse:
                # hold zero state across trailing PADs so the true suffix
                # starts from a clean state
                m = ops.constant(np.repeat(mask[:, i : i + 1], d, axis=1))
                h = ops.mul(h_new, m)
                c = h if c_new is None else ops.mul(c_new, m)
            else:
                h = h_new
                c = h if c_new is None else c_new
            out[i] = h
        return out  # type: ignore[return-value]

    def encode_source(self, source: np.ndarray, lengths: np.ndarray, train: bool,
                      rng: np.random.Generator | None) -> tuple[Tensor, np.ndarray]:
        b, n = source.shape
        mask = length_mask(lengths, n)
        emb = self.src_embed(source)
        emb = ops.dropout(emb, self.config.dropout, "train" if train else "infer", rng)
        steps = [
            ops.reshape(ops.slice_axis(emb, 1, i, i + 1), (b, self.config.embed_dim))
            for i in range(n)
        ]
        fwd = self._run_direction(self.fwd_cell, steps, mask, reverse=False)
        bwd = self._run_direction(self.bwd_cell, steps, mask, reverse=True)
        d = self.config.model_dim
        rows = [
            ops.reshape(ops.concat([f, bk], 1), (b, 1, 2 * d)) for f, bk in zip(fwd, bwd)
        ]
        H = ops.concat(rows, 1)
        mask3 = np.repeat(mask[:, :, None], 2 * d, axis=2)
        H = ops.mul(H, ops.constant(mask3.astype(np.float64)))
        if self.enc_layers > 1:
            flat = ops.reshape(H, (b * n, 2 * d))
            X = ops.reshape(ops.matmul(flat, self.W_bridge), (b, n, d))
            maskd = ops.constant(np.repeat(mask[:, :, None], d, axis=2).astype(np.float64))
            for cell in self.enc_upper:
                cols = [
                    ops.reshape(ops.slice_axis(X, 1, i, i + 1), (b, d)) for i in range(n)
                ]
                outs = self._run_direction(cell, cols, mask, reverse=False)
                stacked = ops.concat(
                    [ops.reshape(o, (b, 1, d)) for o in outs], 1
                )
                X = ops.mul(ops.add(X, stacked), maskd)
            H = X
        return H, mask

    # -- decoder ------------------------------------------------------------

    def _initial_decoder(self, H: Tensor, lengths: np.ndarray):
        s0 = decoder_init(H, lengths, self.W_init, self.b_init)
        hidden = [s0 for _ in range(self.dec_layers)]
        b = H.shape[0]
        d = self.config.model_dim
        zeros = ops.constant(np.zeros((b, d)))
        cell = [zeros for _ in range(self.dec_layers)] if self.is_lstm else None
        sbar = ops.constant(np.zeros((b, d)))
        coverage = None
        if self.coverage_kind != "none":
            coverage = ops.constant(np.zeros((b, H.shape[1], self.coverage_dim)))
        return hidden, cell, sbar, coverage

    def _decoder_step(self, prev_emb: Tensor, sbar_prev: Tensor, hidden: list[Tensor],
                      cell: list[Tensor] | None, pre: AttentionPrecompute,
                      coverage: Tensor | None):
        """One input-fed decoder step; returns the new (sbar, states, alpha, coverage)."""
        x = ops.concat([prev_emb, sbar_prev], 1)
        new_hidden: list[Tensor] = []
        new_cell: list[Tensor] = []
        s_prev_top = hidden[-1]
        h1, c1 = self.dec_cells[0].step(x, hidden[0], cell[0] if cell else None)
        new_hidden.append(h1)
        new_cell.append(c1)
        s = h1
        alpha = context = None
        if self.attention_first_layer:
            alpha, context = self.attention(h1, pre, coverage)
        for l in range(1, self.dec_layers):
            inp = ops.concat([s, context], 1) if self.attention_first_layer else s
            hl, cl = self.dec_cells[l].step(inp, hidden[l], cell[l] if cell else None)
            s = ops.add(s, hl)  # residual stack
            new_hidden.append(s)
            new_cell.append(cl)
        if not self.attention_first_layer:
            alpha, context = self.attention(s, pre, coverage)
        if self.gate is not None:
            sbar_raw = ops.tanh(ops.matmul(ops.concat([s, context], 1), self.W_sbar))
            z = self.gate(prev_emb, s_prev_top, sbar_raw)
            gated = ops.concat([ops.mul(z, s), ops.mul(ops.sub(1.0, z), context)], 1)
            sbar = ops.tanh(ops.matmul(gated, self.W_sbar))
        else:
            sbar = ops.tanh(ops.matmul(ops.concat([s, context], 1), self.W_sbar))
        new_coverage = coverage
        if coverage is not None:
            new_coverage = coverage_update(
                coverage, alpha, s, pre.H, self.coverage_kind, self.coverage_cell
            )
        return sbar, new_hidden, (new_cell if self.is_lstm else None), alpha, new_coverage

    def forward_logits(self, batch: Batch, train: bool,
                       rng: np.random.Generator | None = None) -> Tensor:
        mode = "train" if train else "infer"
        H, mask = self.encode_source(batch.source, batch.source_lengths, train, rng)
        pre = self.attention.prepare(H, mask)
        hidden, cell, sbar, coverage = self._initial_decoder(H, batch.source_lengths)
        b, m = batch.target.shape
        dec_in = shifted_decoder_input(batch.target)
        emb = self.trg_embed(dec_in)
        emb = ops.dropout(emb, self.config.dropout, mode, rng)
        sbars = []
        for t in range(m):
            prev_emb = ops.reshape(ops.slice_axis(emb, 1, t, t + 1), (b, self.config.embed_dim))
            sbar, hidden, cell, _, coverage = self._decoder_step(
                prev_emb, sbar, hidden, cell, pre, coverage
            )
            sbars.append(ops.reshape(sbar, (b, 1, self.config.model_dim)))
        stacked = ops.concat(sbars, 1)
        stacked = ops.dropout(stacked, self.config.dropout, mode, rng)
        return self.output.logits(stacked)

    # -- incremental decoding -----------------------------------------------

    def start_state(self, source: np.ndarray, lengths: np.ndarray,
                    restrict: np.ndarray | None = None) -> RnnDecodeState:
        with no_grad():
            H, mask = self.encode_source(source, lengths, train=False, rng=None)
            pre = self.attention.prepare(H, mask)
            hidden, cell, sbar, coverage = self._initial_decoder(H, lengths)
        return RnnDecodeState(
            H=H.data,
            mask=mask,
            mlp_pre=None if pre.mlp_pre is None else pre.mlp_pre.data,
            keys=None if pre.keys is None else pre.keys.data,
            values=None if pre.values is None else pre.values.data,
            hidden=[h.data for h in hidden],
            cell=None if cell is None else [c.data for c in cell],
            sbar=sbar.data,
            coverage=None if coverage is None else coverage.data,
            restrict=restrict,
        )

    def step(self, state: RnnDecodeState, prev_ids: np.ndarray
             ) -> tuple[StepResult, RnnDecodeState]:
        with no_grad():
            pre = state.precompute()
            prev_emb = self.trg_embed(np.asarray(prev_ids, dtype=np.int64))
            hidden = [ops.constant(h) for h in state.hidden]
            cell = None if state.cell is None else [ops.constant(c) for c in state.cell]
            coverage = None if state.coverage is None else ops.constant(state.coverage)
            sbar, hidden, cell, alpha, coverage = self._decoder_step(
                prev_emb, ops.constant(state.sbar), hidden, cell, pre, coverage
            )
            logits = self.output.logits(sbar, restrict=state.restrict)
        new_state = replace(
            state,
            hidden=[h.data for h in hidden],
            cell=None if cell is None else [c.data for c in cell],
            sbar=sbar.data,
            coverage=None if coverage is None else coverage.data,
        )
        return StepResult(log_probs=log_softmax_np(logits.data), attention=alpha.data), new_state
