"""Attention decoder: horizon-specific decoder-encoder attention, a
horizon-agnostic context, feedback-aware decoder self-attention, and a
shared per-(FCT, horizon) output MLP.

Index conventions: FCTs t = 0..T-1; horizons h = 1..H with array index
h_idx = h-1; the target period of cell (t, h) is t + h. The decoder
self-attention set H(t, h) = {(s, r) | s + r = t + h, s <= t} is realized by
re-indexing contexts by target period, which turns the constrained
attention into dense attention over at most H candidates.
"""

from __future__ import annotations

import numpy as np

from .nn import Dense, LayerNorm, glorot
from .tensor import Tensor, concat

__all__ = [
    "hs_attention",
    "ds_attention",
    "ds_attention_all",
    "mqcnn_context",
    "Decoder",
]

_NEG = -1e30  # additive mask; finite so the graph stays NaN-free


def _tile_h(x, n_h):
    """(B, T, d) -> (B, T, n_h, d) by broadcast."""
    return x.expand_dims(2) + Tensor(np.zeros((1, 1, n_h, 1)))


def future_encoding_index(n_fct, n_horizons):
    """idx[t, h_idx] = t + h_idx + 1, the target period of cell (t, h)."""
    return np.arange(n_fct)[:, None] + np.arange(1, n_horizons + 1)[None, :]


def _causal_window_mask(n_fct, lookback):
    """(T, T) additive mask allowing keys s in [t - L, t]."""
    t = np.arange(n_fct)
    allowed = t[None, :] <= t[:, None]
    if lookback is not None:
        if lookback < 0:
            raise ValueError("look-back must be >= 0")
        allowed &= t[None, :] >= t[:, None] - lookback
    return np.where(allowed, 0.0, _NEG)


def hs_attention(h, r, wq_base, wq_fut, wk, wv, n_horizons, lookback=None):
    """Horizon-specific decoder-encoder attention.

    h: (B, T, d_enc) encoder states; r: (B, T', 2*d_h) position encodings
    with T' >= T + H. Queries are [h_t ; r_t ; r_{t+h}], keys [h_s ; r_s],
    values h_s; one head per horizon with all projection weights shared, so
    heads differ only through r_{t+h} in the query. Softmax over keys
    s in [t - L, t], scores scaled by 1/sqrt(d_head).
    """
    n_fct = h.shape[1]
    d_head = wk.shape[-1]
    r_past = r[:, :n_fct]
    idx = future_encoding_index(n_fct, n_horizons)
    r_fut = r.gather_time(idx)  # (B, T, H, 2*d_h)

    q_base = concat([h, r_past], axis=-1) @ wq_base  # (B, T, e)
    q = q_base.expand_dims(2) + r_fut @ wq_fut       # (B, T, H, e)
    k = concat([h, r_past], axis=-1) @ wk            # (B, T, e)
    scores = (q @ k.swapaxes(1, 2).expand_dims(1)) * (1.0 / np.sqrt(d_head))
    scores = scores + Tensor(_causal_window_mask(n_fct, lookback)[None, :, None, :])
    attn = scores.softmax(axis=-1)                   # (B, T, H, T)
    values = (h @ wv).expand_dims(1)                 # (B, 1, T, d_c)
    return attn @ values


def _align_by_period(x, rows, cols, n_periods):
    """(B, T, H, d) -> (B, P, H, d) with out[:, t+h_idx, h_idx] = x[:, t, h_idx]."""
    return x.scatter_pairs(rows, cols, n_periods)


def ds_attention(c, h, r, wq, wk, wv, n_horizons):
    """Feedback-aware decoder self-attention.

    For each cell (t, h) the attention is over previous forecasts of the
    same target period: H(t, h) = {(s, r) | s + r = t + h, s <= t}. Queries
    are [h_t ; c_{t,h} ; r_t ; r_{t+h}], keys [c_{s,r} ; r_s ; r_{s+r}],
    values c_{s,r}; separate projections per horizon head.
    """
    n_fct = c.shape[1]
    n_h = n_horizons
    d_head = wk.shape[-1]
    n_periods = n_fct + n_h - 1

    idx = future_encoding_index(n_fct, n_h)
    r_fut = r.gather_time(idx)                       # (B, T, H, 2*d_h)
    r_past = _tile_h(r[:, :n_fct], n_h)              # (B, T, H, 2*d_h)
    h_tile = _tile_h(h, n_h)                         # (B, T, H, d_enc)

    q_in = concat([h_tile, c, r_past, r_fut], axis=-1)
    k_in = concat([c, r_past, r_fut], axis=-1)

    # score(q, k) = (Wq^h q) . (Wk^h k) = q^T M^h k with M^h = Wq^h Wk^h^T
    m = wq @ wk.swapaxes(-1, -2)                     # (H, dq, dk)
    u = (q_in.expand_dims(-2) @ m).reshape(
        q_in.shape[0], n_fct, n_h, k_in.shape[-1]
    )

    t_grid = np.arange(n_fct)[:, None] + np.zeros(n_h, dtype=int)[None, :]
    h_grid = np.zeros(n_fct, dtype=int)[:, None] + np.arange(n_h)[None, :]
    rows = t_grid + h_grid                           # target-period row index
    ud = _align_by_period(u, rows, h_grid, n_periods)      # (B, P, H, dk)
    kd = _align_by_period(k_in, rows, h_grid, n_periods)   # (B, P, H, dk)
    vd = _align_by_period(c, rows, h_grid, n_periods)      # (B, P, H, d_c)

    scores = (ud @ kd.swapaxes(-1, -2)) * (1.0 / np.sqrt(d_head))  # (B,P,H,H)
    p_ix = np.arange(n_periods)[:, None, None]
    h_ix = np.arange(n_h)[None, :, None]
    r_ix = np.arange(n_h)[None, None, :]
    s_key = p_ix - r_ix
    allowed = (r_ix >= h_ix) & (s_key >= 0) & (s_key <= n_fct - 1)
    scores = scores + Tensor(np.where(allowed, 0.0, _NEG)[None])
    attn = scores.softmax(axis=-1)

    mixed = attn @ vd                                # (B, P, H, d_c)
    out = (mixed.expand_dims(-2) @ wv).reshape(
        c.shape[0], n_periods, n_h, c.shape[-1]
    )
    return out.take_pairs(rows, h_grid)              # back to (B, T, H, d_c)


def ds_attention_all(c, h, r, wq, wk, wv, n_horizons, lookback=None):
    """Standard multi-head self-attention over concatenated contexts.

    Queries [c_{t,1..H} ; h_t ; r_t], keys [c_{s,1..H} ; r_s], values
    c_{s,1..H}; one head per horizon, attending over all s in [t - L, t].
    """
    b, n_fct, n_h, d_c = c.shape
    d_head = wk.shape[-1]
    c_flat = c.reshape(b, n_fct, n_h * d_c)
    r_past = r[:, :n_fct]
    q_in = concat([c_flat, h, r_past], axis=-1)      # (B, T, dq)
    k_in = concat([c_flat, r_past], axis=-1)         # (B, T, dk)

    m = wq @ wk.swapaxes(-1, -2)                     # (H, dq, dk)
    u = (q_in.expand_dims(2).expand_dims(3) @ m).reshape(
        b, n_fct, n_h, k_in.shape[-1]
    )
    scores = (u @ k_in.swapaxes(1, 2).expand_dims(1)) * (1.0 / np.sqrt(d_head))
    scores = scores + Tensor(_causal_window_mask(n_fct, lookback)[None, :, None, :])
    attn = scores.softmax(axis=-1)                   # (B, T, H, T)
    mixed = attn @ c_flat.expand_dims(1)             # (B, T, H, H*d_c)
    return (mixed.expand_dims(-2) @ wv).reshape(b, n_fct, n_h, d_c)


def mqcnn_context(h, r, dense, n_horizons):
    """Baseline horizon-specific context c_{t,h} = f(h_t, r_{t+h})."""
    n_fct = h.shape[1]
    idx = future_encoding_index(n_fct, n_horizons)
    r_fut = r.gather_time(idx)
    h_tile = _tile_h(h, n_horizons)
    return dense(concat([h_tile, r_fut], axis=-1)).relu()


class Decoder:
    """Variant-switched decoder producing the (T, H, Q) forecast cube."""

    VARIANTS = ("mqcnn", "mqt", "mqt_nods", "mqt_all")

    def __init__(self, store, name, d_enc, d_h, n_horizons, n_quantiles, rng,
                 variant="mqt", lookback=None, dropout=0.0):
        if variant not in self.VARIANTS:
            raise ValueError(f"unknown variant: {variant}")
        if n_horizons < 1:
            raise ValueError("need at least one horizon")
        self.variant = variant
        self.n_horizons = n_horizons
        self.lookback = lookback
        self.p_drop = dropout
        self.d_enc = d_enc
        d_head = d_h // 2
        self.d_c = d_head
        self.d_a = d_h // 2
        d_r = 2 * d_h

        if variant == "mqcnn":
            self.ctx_dense = Dense(store, f"{name}.ctx", d_enc + d_r, self.d_c, rng)
        else:
            self.ln_enc = LayerNorm(store, f"{name}.ln_enc", d_enc)
            self.wq_base = store.add(
                f"{name}.hs.wq_base", glorot(rng, d_enc + d_r, d_head))
            self.wq_fut = store.add(f"{name}.hs.wq_fut", glorot(rng, d_r, d_head))
            self.wk_hs = store.add(f"{name}.hs.wk", glorot(rng, d_enc + d_r, d_head))
            self.wv_hs = store.add(f"{name}.hs.wv", glorot(rng, d_enc, self.d_c))
            self.res_proj = Dense(store, f"{name}.hs.res", d_enc, self.d_c, rng)

        if variant == "mqt":
            h_n = n_horizons
            dq = d_enc + self.d_c + 2 * d_r
            dk = self.d_c + 2 * d_r
            self.ln_c = LayerNorm(store, f"{name}.ln_c", self.d_c)
            self.wq_ds = store.add(
                f"{name}.ds.wq", glorot(rng, dq, d_head, (h_n, dq, d_head)))
            self.wk_ds = store.add(
                f"{name}.ds.wk", glorot(rng, dk, d_head, (h_n, dk, d_head)))
            self.wv_ds = store.add(
                f"{name}.ds.wv", glorot(rng, self.d_c, self.d_c,
                                        (h_n, self.d_c, self.d_c)))
        elif variant == "mqt_all":
            h_n = n_horizons
            dq = h_n * self.d_c + d_enc + d_r
            dk = h_n * self.d_c + d_r
            self.ln_c = LayerNorm(store, f"{name}.ln_c", self.d_c)
            self.wq_all = store.add(
                f"{name}.dsall.wq", glorot(rng, dq, d_head, (h_n, dq, d_head)))
            self.wk_all = store.add(
                f"{name}.dsall.wk", glorot(rng, dk, d_head, (h_n, dk, d_head)))
            self.wv_all = store.add(
                f"{name}.dsall.wv", glorot(rng, h_n * self.d_c, self.d_c,
                                           (h_n, h_n * self.d_c, self.d_c)))

        self.ca_dense = Dense(store, f"{name}.ca", d_enc + d_r, self.d_a, rng)
        d_ml = self.d_a + 2 * self.d_c + d_r
        self.out1 = Dense(store, f"{name}.out1", d_ml, d_h // 2, rng)
        self.out2 = Dense(store, f"{name}.out2", d_h // 2, n_quantiles, rng)

    # -- forward ---------------------------------------------------------

    def contexts(self, h, r, training=False, rng=None):
        """Compute the horizon-specific contexts c (pre self-attention)."""
        p = self.p_drop if training else 0.0
        if self.variant == "mqcnn":
            return mqcnn_context(h, r, self.ctx_dense, self.n_horizons)
        n_h = self.ln_enc(h)
        c_att = hs_attention(n_h, r, self.wq_base, self.wq_fut, self.wk_hs,
                             self.wv_hs, self.n_horizons, self.lookback)
        if p > 0.0:
            c_att = c_att.dropout(p, rng)
        base = _tile_h(self.res_proj(n_h), self.n_horizons)
        return base + c_att

    def output_from_contexts(self, c, h, r, training=False, rng=None):
        """Map contexts to the forecast cube (B, T, H, Q).

        Split out from forward() so the feedback-masking property of the
        self-attention branch can be probed with c as a graph leaf.
        """
        p = self.p_drop if training else 0.0
        n_fct = h.shape[1]
        r_past = r[:, :n_fct]
        c_a = self.ca_dense(concat([h, r_past], axis=-1)).relu()

        if self.variant == "mqt":
            att = ds_attention(self.ln_c(c), self.ln_enc(h), r,
                               self.wq_ds, self.wk_ds, self.wv_ds,
                               self.n_horizons)
            c_tilde = c + (att.dropout(p, rng) if p > 0.0 else att)
        elif self.variant == "mqt_all":
            att = ds_attention_all(self.ln_c(c), self.ln_enc(h), r,
                                   self.wq_all, self.wk_all, self.wv_all,
                                   self.n_horizons, self.lookback)
            c_tilde = c + (att.dropout(p, rng) if p > 0.0 else att)
        else:  # mqcnn, mqt_nods: identity pass-through
            c_tilde = c

        idx = future_encoding_index(n_fct, self.n_horizons)
        r_fut = r.gather_time(idx)
        m_in = concat([_tile_h(c_a, self.n_horizons), c, c_tilde, r_fut],
                      axis=-1)
        hidden = self.out1(m_in).relu()
        if p > 0.0:
            hidden = hidden.dropout(p, rng)
        return self.out2(hidden)

    def forward(self, h, r, training=False, rng=None):
        c = self.contexts(h, r, training=training, rng=rng)
        return self.output_from_contexts(c, h, r, training=training, rng=rng)
