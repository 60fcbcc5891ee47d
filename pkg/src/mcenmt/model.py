"""Full encoder-decoder: parameter layout, teacher-forced loss and gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import decoder as dec
from . import encoder as enc
from .corpus import ParallelBatch
from .encoder import ChannelConfig
from .numerics import NonFiniteError, Rng


@dataclass(frozen=True)
class ModelConfig:
    channels: ChannelConfig = field(default_factory=ChannelConfig)
    src_vocab_size: int = 30000
    tgt_vocab_size: int = 30000
    dropout: float = 0.5
    zero_init_state: bool = False
    init_scale: float = 0.04
    dtype: str = "float64"

    def __post_init__(self):
        if self.src_vocab_size < 5 or self.tgt_vocab_size < 4:
            raise ValueError("vocabularies need the reserved tokens plus at least one word")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")

    def shapes(self) -> dict[str, tuple]:
        c = self.channels
        shapes = enc.encoder_shapes(c, self.src_vocab_size)
        d = c.hidden_dim if c.recurrent else c.emb_dim
        shapes.update(dec.decoder_shapes(self.tgt_vocab_size, c.emb_dim, d, c.annotation_dim, c.emb_bias))
        return shapes


@dataclass
class LossStats:
    loss: float         # mean over sentences of summed token NLL
    nll_per_token: float
    accuracy: float     # teacher-forced argmax accuracy over target tokens
    tokens: int


class Model:
    """Parameters plus the configuration that gives them meaning."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        shapes = config.shapes()
        if set(shapes) != set(params):
            missing = sorted(set(shapes) - set(params))
            extra = sorted(set(params) - set(shapes))
            raise ValueError(f"parameter set mismatch; missing={missing} extra={extra}")
        for name, shape in shapes.items():
            if params[name].shape != tuple(shape):
                raise ValueError(f"{name}: expected shape {shape}, got {params[name].shape}")
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig, rng: Rng) -> "Model":
        params = enc.init_params(config.shapes(), rng, config.init_scale, np.dtype(config.dtype))
        return cls(config, params)

    @property
    def channels(self) -> ChannelConfig:
        return self.config.channels

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def encode(self, src: np.ndarray, mask: np.ndarray):
        return enc.encode_forward(src, mask.astype(self.dtype), self.params, self.channels)[0]

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def forward(self, batch: ParallelBatch, rng: Rng | None = None, training: bool = False):
        """Teacher-forced pass. Returns (loss, stats, cache)."""
        if len(batch) == 0:
            raise ValueError("empty batch")
        dtype = np.result_type(self.dtype, self.params["src_emb"].dtype)
        src_mask = batch.src_mask.astype(dtype)
        tgt_mask = batch.tgt_mask.astype(dtype)
        encoding, ecache = enc.encode_forward(batch.src, src_mask, self.params, self.channels)
        tgt_in = batch.tgt_in
        rate = self.config.dropout if training else 0.0
        logp, dcache = dec.decode_forward(encoding.A, src_mask, tgt_in, self.params,
                                          self.config.zero_init_state, rate, rng)
        gold = np.take_along_axis(logp, batch.tgt[:, :, None], axis=2)[:, :, 0]
        B = len(batch)
        total_nll = -(gold * tgt_mask).sum()
        loss = total_nll / B
        if not np.isfinite(loss):
            raise NonFiniteError("loss is not finite")
        tokens = int(tgt_mask.sum())
        correct = float(((logp.argmax(-1) == batch.tgt) * tgt_mask).sum())
        stats = LossStats(float(loss), float(total_nll) / tokens, correct / tokens, tokens)
        return loss, stats, (encoding, ecache, logp, dcache, src_mask, tgt_mask, tgt_in)

    def loss_and_grads(self, batch: ParallelBatch, rng: Rng | None = None, training: bool = True):
        """Loss ``-(1/B) sum_b sum_j log p(y_j)`` and its gradient for every parameter."""
        loss, stats, cache = self.forward(batch, rng, training)
        encoding, ecache, logp, dcache, src_mask, tgt_mask, tgt_in = cache
        B = len(batch)
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        dlogits = np.exp(logp)
        np.put_along_axis(dlogits, batch.tgt[:, :, None],
                          np.take_along_axis(dlogits, batch.tgt[:, :, None], axis=2) - 1.0, axis=2)
        dlogits *= tgt_mask[:, :, None] / B
        dA = dec.decode_backward(dlogits, dcache, encoding.A, src_mask, tgt_in, self.params, grads,
                                 self.config.zero_init_state)
        enc.encode_backward(dA, ecache, self.params, self.channels, grads)
        return loss, grads, stats

    def sequence_loss(self, batch: ParallelBatch) -> LossStats:
        return self.forward(batch, None, False)[1]
