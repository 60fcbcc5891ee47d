"""Optimizer, learning-rate schedule, checkpoints and the training loop."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Vocabulary, make_batches
from .encoder import ChannelConfig
from .model import Model, ModelConfig
from .numerics import NonFiniteError, Rng, clip_global_norm

log = logging.getLogger(__name__)

MAGIC = b"MCENMTCK"
FORMAT_VERSION = 1

# stream tags under the run seed
INIT_STREAM, SHUFFLE_STREAM, DROPOUT_STREAM = 0, 1, 2


def lrate(step: int, d: int, warmup: int = 6000, num_gpus: int = 1) -> float:
    """``d**-0.5 * min(a**-0.5, a * warmup**-1.5)`` with ``a = step / num_gpus``."""
    if step < 1:
        raise ValueError("the schedule starts at step 1")
    a = step / num_gpus
    return d ** -0.5 * min(a ** -0.5, a * warmup ** -1.5)


@dataclass
class AdamState:
    d_model: int
    warmup: int = 6000
    num_gpus: int = 1
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    fixed_lr: float | None = None   # constant rate instead of the schedule
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict, d_model: int, **kw) -> "AdamState":
        st = cls(d_model, **kw)
        st.m = {k: np.zeros_like(p) for k, p in params.items()}
        st.v = {k: np.zeros_like(p) for k, p in params.items()}
        return st

    def learning_rate(self) -> float:
        if self.fixed_lr is not None:
            return self.fixed_lr
        return lrate(max(self.step, 1), self.d_model, self.warmup, self.num_gpus)


def adam_step(params: dict, grads: dict, state: AdamState) -> dict:
    """Bias-corrected Adam update in place, using the scheduled learning rate."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}")
    state.step += 1
    lr = state.learning_rate()
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# -- checkpoints ----------------------------------------------------------------------------


def model_config_text(cfg: ModelConfig) -> str:
    """Canonical ``key = value`` text of everything that shapes the parameters."""
    c = cfg.channels
    items = {
        "use_emb": c.use_emb, "use_rnn": c.use_rnn, "use_ntm": c.use_ntm,
        "emb_dim": c.emb_dim, "hidden_dim": c.hidden_dim, "mem_dim": c.mem_dim,
        "read_weighting": c.read_weighting, "stacked_bidir": c.stacked_bidir, "emb_bias": c.emb_bias,
        "src_vocab_size": cfg.src_vocab_size, "tgt_vocab_size": cfg.tgt_vocab_size,
        "zero_init_state": cfg.zero_init_state, "dropout": cfg.dropout, "init_scale": cfg.init_scale,
        "precision": 64 if cfg.dtype == "float64" else 32,
    }
    return "".join(f"{k} = {str(v).lower() if isinstance(v, bool) else v}\n" for k, v in sorted(items.items()))


def model_config_from_text(text: str) -> ModelConfig:
    kv = {}
    for line in text.splitlines():
        k, v = (s.strip() for s in line.split("=", 1))
        kv[k] = v
    b = lambda k: kv[k] == "true"  # noqa: E731
    channels = ChannelConfig(use_emb=b("use_emb"), use_rnn=b("use_rnn"), use_ntm=b("use_ntm"),
                             emb_dim=int(kv["emb_dim"]), hidden_dim=int(kv["hidden_dim"]),
                             mem_dim=int(kv["mem_dim"]), read_weighting=kv["read_weighting"],
                             stacked_bidir=b("stacked_bidir"), emb_bias=b("emb_bias"))
    return ModelConfig(channels, int(kv["src_vocab_size"]), int(kv["tgt_vocab_size"]),
                       dropout=float(kv["dropout"]), zero_init_state=b("zero_init_state"),
                       init_scale=float(kv["init_scale"]),
                       dtype="float64" if kv["precision"] == "64" else "float32")


def fingerprint(cfg: ModelConfig) -> str:
    return hashlib.sha256(model_config_text(cfg).encode()).hexdigest()[:16]


class FingerprintMismatch(ValueError):
    pass


@dataclass
class Checkpoint:
    model: Model
    adam: AdamState
    src_vocab: Vocabulary
    tgt_vocab: Vocabulary
    best_loss: float = math.inf

    @property
    def step(self) -> int:
        return self.adam.step

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.model.config)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write the binary checkpoint container.

    Layout: 8-byte magic, u32 format version, u64 header length, UTF-8 JSON
    header, then every tensor as contiguous little-endian float64 values in
    header order. The header lists (group, name, shape) per tensor, with
    group one of ``param``, ``adam_m``, ``adam_v``.
    """
    tensors = []
    for group, tree in (("param", ckpt.model.params), ("adam_m", ckpt.adam.m), ("adam_v", ckpt.adam.v)):
        for name in sorted(tree):
            tensors.append((group, name, tree[name]))
    a = ckpt.adam
    header = {
        "fingerprint": ckpt.fingerprint,
        "config": model_config_text(ckpt.model.config),
        "step": a.step,
        "adam": {"d_model": a.d_model, "warmup": a.warmup, "num_gpus": a.num_gpus,
                 "beta1": a.beta1, "beta2": a.beta2, "eps": a.eps, "fixed_lr": a.fixed_lr},
        "best_loss": None if math.isinf(ckpt.best_loss) else ckpt.best_loss,
        "src_vocab": ckpt.src_vocab.itos,
        "tgt_vocab": ckpt.tgt_vocab.itos,
        "tensors": [{"group": g, "name": n, "shape": list(t.shape)} for g, n, t in tensors],
    }
    hbytes = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for _, _, t in tensors:
            fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())
    tmp.replace(path)


def load_checkpoint(path, expected_fingerprint: str | None = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[20 : 20 + hlen].decode("utf-8"))
    if expected_fingerprint is not None and header["fingerprint"] != expected_fingerprint:
        raise FingerprintMismatch(
            f"checkpoint fingerprint {header['fingerprint']} does not match configuration {expected_fingerprint}")
    cfg = model_config_from_text(header["config"])
    if fingerprint(cfg) != header["fingerprint"]:
        raise ValueError("checkpoint header is inconsistent with its fingerprint")
    dtype = np.dtype(cfg.dtype)
    offset = 20 + hlen
    groups: dict[str, dict] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(entry["shape"])
        groups[entry["group"]][entry["name"]] = arr.astype(dtype)
        offset += 8 * count
    model = Model(cfg, groups["param"])
    adam = AdamState(step=header["step"], m=groups["adam_m"], v=groups["adam_v"], **header["adam"])
    best = header["best_loss"]
    return Checkpoint(model, adam, Vocabulary(header["src_vocab"]), Vocabulary(header["tgt_vocab"]),
                      math.inf if best is None else best)


# -- training loop ----------------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    seed: int = 1
    warmup: int = 6000
    num_gpus: int = 1
    clip_norm: float = 1.0
    fixed_lr: float | None = None
    checkpoint_every: int = 500
    max_steps: int | None = None
    out_dir: str | None = None


@dataclass
class TraceRow:
    step: int
    lrate: float
    loss: float
    tokens_per_sec: float


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last_good: str | None):
        super().__init__(f"loss became non-finite at step {step}; last good checkpoint: {last_good}")
        self.step = step
        self.last_good = last_good


def write_trace(path, trace: list[TraceRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lrate", "loss", "tokens_per_sec"])
        for r in trace:
            w.writerow([r.step, repr(r.lrate), repr(r.loss), f"{r.tokens_per_sec:.1f}"])


def fit(pairs, src_vocab: Vocabulary, tgt_vocab: Vocabulary, model_config: ModelConfig,
        train: TrainConfig, resume: Checkpoint | None = None, on_epoch=None):
    """Train with teacher forcing, global-norm clipping and scheduled Adam.

    Every random draw is derived from ``train.seed``: parameter init, the
    per-epoch shuffle and the per-step dropout masks each get their own
    stream, so resuming from a checkpoint at step k reproduces an
    uninterrupted run exactly. ``on_epoch(epoch, mean_loss, checkpoint)``
    runs after each full epoch; a truthy return ends training early.
    Returns ``(checkpoint, trace)``.
    """
    root = Rng(train.seed)
    dtype = np.dtype(model_config.dtype)
    if resume is not None:
        if resume.fingerprint != fingerprint(model_config):
            raise FingerprintMismatch("resume checkpoint was trained with a different configuration")
        ckpt = resume
    else:
        model = Model.init(model_config, root.child(INIT_STREAM))
        d_model = model_config.channels.hidden_dim if model_config.channels.recurrent else model_config.channels.emb_dim
        adam = AdamState.for_params(model.params, d_model, warmup=train.warmup, num_gpus=train.num_gpus,
                                    fixed_lr=train.fixed_lr)
        ckpt = Checkpoint(model, adam, src_vocab, tgt_vocab)
    model, adam = ckpt.model, ckpt.adam
    trace: list[TraceRow] = []
    if train.epochs <= 0 or not pairs:
        if not pairs and train.epochs > 0:
            raise ValueError("cannot train on an empty corpus")
        return ckpt, trace
    out = Path(train.out_dir) if train.out_dir else None
    last_good = None
    n_batches = math.ceil(len(pairs) / train.batch_size)
    total = train.epochs * n_batches
    if train.max_steps is not None:
        total = min(total, train.max_steps)
    while adam.step < total:
        epoch, offset = divmod(adam.step, n_batches)
        batches = make_batches(pairs, src_vocab, tgt_vocab, train.batch_size,
                               root.child(SHUFFLE_STREAM, epoch), dtype)
        epoch_losses = []
        for batch in batches[offset:]:
            if adam.step >= total:
                break
            t0 = time.perf_counter()
            try:
                loss, grads, stats = model.loss_and_grads(batch, root.child(DROPOUT_STREAM, adam.step), True)
                grads, _ = clip_global_norm(grads, train.clip_norm)
            except NonFiniteError:
                raise TrainingDiverged(adam.step + 1, last_good) from None
            adam_step(model.params, grads, adam)
            elapsed = max(time.perf_counter() - t0, 1e-9)
            lr = adam.learning_rate()
            trace.append(TraceRow(adam.step, lr, float(loss), stats.tokens / elapsed))
            epoch_losses.append(float(loss))
            if out is not None and train.checkpoint_every > 0 and adam.step % train.checkpoint_every == 0:
                last_good = str(out / f"checkpoint_step{adam.step}.bin")
                save_checkpoint(last_good, ckpt)
        if epoch_losses:
            mean = float(np.mean(epoch_losses))
            log.info("epoch %d step %d mean loss %.4f", epoch + 1, adam.step, mean)
            if adam.step % n_batches == 0 and mean < ckpt.best_loss:
                ckpt.best_loss = mean
                if out is not None:
                    save_checkpoint(out / "checkpoint_best.bin", ckpt)
            if on_epoch is not None and on_epoch(epoch + 1, mean, ckpt):
                break
    if out is not None:
        save_checkpoint(out / "checkpoint_last.bin", ckpt)
    return ckpt, trace
