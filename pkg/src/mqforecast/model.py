"""Model configuration and the end-to-end forecaster.

One forward pass consumes a whole history window and emits forecasts for
every FCT simultaneously (forking sequences): the encoder runs once and the
decoder attends causally, so cube[:, t] equals what a per-FCT re-encoding
would produce.
"""

from __future__ import annotations

import dataclasses
import json

import numpy as np

from .decoder import Decoder
from .encoder import SeriesEncoder, StaticEncoder
from .nn import ParamStore
from .position import GlobalPositionEncoder, LocalPositionEncoder
from .tensor import Tensor, concat, no_grad

__all__ = ["ModelConfig", "MQForecaster"]

VARIANTS = ("mqcnn", "mqt", "mqt_nods", "mqt_all")


@dataclasses.dataclass
class ModelConfig:
    """Variant selector plus all architecture hyperparameters."""

    variant: str = "mqt"
    n_horizons: int = 12
    quantiles: tuple = (0.5, 0.9)
    d_h: int = 32
    conv_filters: int = 32
    static_dim: int = 64
    enc_dilations: tuple = (1, 2, 4, 8, 16, 32)
    pos_dilations: tuple = (1, 2, 4, 8, 16, 20)
    enc_kernel_width: int = 2
    pos_kernel_width: int = 3
    lookback: int | None = None
    dropout: float = 0.15
    # input dimensions (filled in from the dataset)
    d_cov: int = 0
    d_local: int = 1
    d_global: int = 1
    d_static: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant: {self.variant}")
        if self.d_h % 2 != 0:
            raise ValueError("d_h must be even (head dim is d_h / 2)")
        if not all(0.0 < q < 1.0 for q in self.quantiles):
            raise ValueError("quantile levels must lie in (0, 1)")
        if self.dropout < 0.0 or self.dropout >= 1.0:
            raise ValueError("dropout must be in [0, 1)")

    def to_json(self):
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, s):
        d = json.loads(s)
        for k in ("quantiles", "enc_dilations", "pos_dilations"):
            d[k] = tuple(d[k])
        return cls(**d)


class MQForecaster:
    """Full forecaster: position encodings -> encoder -> attention decoder."""

    def __init__(self, config: ModelConfig, seed=0):
        self.config = config
        self.store = ParamStore()
        rng = np.random.default_rng(seed)
        self.dropout_rng = np.random.default_rng(seed + 1)
        c = config

        self.pe_global = GlobalPositionEncoder(
            self.store, "pe_global", c.d_global, c.d_h, c.pos_dilations, rng,
            kernel_width=c.pos_kernel_width)
        self.pe_local = LocalPositionEncoder(
            self.store, "pe_local", c.d_local, c.d_h, rng)
        enc_in = 1 + c.d_cov + 2 * c.d_h
        self.series_enc = SeriesEncoder(
            self.store, "encoder", enc_in, c.conv_filters, c.enc_dilations, rng,
            kernel_width=c.enc_kernel_width)
        self.static_enc = StaticEncoder(
            self.store, "static", c.d_static, c.static_dim, rng)
        self.d_enc = c.conv_filters + c.static_dim
        self.decoder = Decoder(
            self.store, "decoder", self.d_enc, c.d_h, c.n_horizons,
            len(c.quantiles), rng, variant=c.variant, lookback=c.lookback,
            dropout=c.dropout)

    # -- forward ---------------------------------------------------------

    def position_encodings(self, global_ind, local_ind, training=False):
        """Combined r = [r_global ; r_local], shape (B, T', 2*d_h).

        The global encoding depends only on the shared indicators, so it is
        computed once per call and broadcast over the batch.
        """
        p = self.config.dropout if training else 0.0
        r_g = self.pe_global(Tensor(global_ind), dropout=p, rng=self.dropout_rng)
        r_l = self.pe_local(Tensor(local_ind))
        batch = local_ind.shape[0]
        r_g_b = r_g.expand_dims(0) + Tensor(np.zeros((batch, 1, 1)))
        return concat([r_g_b, r_l], axis=-1)

    def encode(self, y_std, covariates, r, static, training=False):
        """EncoderState rows h_t = [conv(y, x, r)_t ; static encoding]."""
        n_fct = y_std.shape[1]
        parts = [Tensor(y_std[:, :, None])]
        if self.config.d_cov > 0:
            parts.append(Tensor(covariates))
        parts.append(r[:, :n_fct])
        x = concat(parts, axis=-1)
        p = self.config.dropout if training else 0.0
        h1 = self.series_enc(x, dropout=p, rng=self.dropout_rng)
        h2 = self.static_enc(Tensor(static))
        h2_rep = h2.expand_dims(1) + Tensor(np.zeros((1, n_fct, 1)))
        return concat([h1, h2_rep], axis=-1)

    def forward(self, batch, training=False):
        """batch keys: y_std (B,T), covariates (B,T,d_x), global_ind (T',d_g),
        local_ind (B,T',d_l), static (B,d_s). Returns cube (B, T, H, Q).
        """
        t_len = batch["y_std"].shape[1]
        t_ind = batch["local_ind"].shape[1]
        if t_ind < t_len + self.config.n_horizons:
            raise ValueError(
                "indicator series must cover every target horizon "
                f"(need {t_len + self.config.n_horizons} steps, got {t_ind})")
        r = self.position_encodings(batch["global_ind"], batch["local_ind"],
                                    training=training)
        h = self.encode(batch["y_std"], batch.get("covariates"), r,
                        batch["static"], training=training)
        return self.decoder.forward(h, r, training=training,
                                    rng=self.dropout_rng)

    def predict(self, batch):
        """Deterministic inference; returns a plain (B, T, H, Q) array."""
        with no_grad():
            return self.forward(batch, training=False).data
