"""Attention decoder: additive attention, GRU state, readout and output softmax."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import (Prefixed, attention_weights, attention_weights_backward, embed, embed_backward,
                      gru_forward, gru_backward, gru_shapes, sub)
from .numerics import Rng, dropout_mask


def decoder_shapes(tgt_vocab_size: int, e: int, d: int, D: int, emb_bias: bool = True) -> dict[str, tuple]:
    r = d
    shapes: dict[str, tuple] = {"tgt_emb": (tgt_vocab_size, e)}
    if emb_bias:
        shapes["tgt_emb_bias"] = (e,)
    for k, v in gru_shapes(e + D, d).items():
        shapes[f"dec.gru.{k}"] = v
    shapes.update({
        "dec.att.W_a": (D, d), "dec.att.U_a": (d, d), "dec.att.b_a": (d,), "dec.att.V_a": (d,),
        "dec.init.W": (D, d), "dec.init.b": (d,),
        "dec.out.W_t1": (d, r), "dec.out.W_t2": (e, r), "dec.out.W_t3": (D, r), "dec.out.b_t": (r,),
        "dec.out.W_o": (r, tgt_vocab_size), "dec.out.b_o": (tgt_vocab_size,),
    })
    return shapes


@dataclass
class DecoderStep:
    state: np.ndarray      # s_j (B, d)
    context: np.ndarray    # c_j (B, D)
    alpha: np.ndarray      # attention weights (B, n)
    readout: np.ndarray    # t_j after dropout (B, r)
    logp: np.ndarray       # log-probabilities (B, V)


def attention_keys(A: np.ndarray, p_att: dict) -> np.ndarray:
    return A @ p_att["W_a"] + p_att["b_a"]


def attend(s: np.ndarray, A: np.ndarray, mask: np.ndarray, p_att: dict, keys: np.ndarray | None = None):
    """Attention weights over annotation rows and the resulting context.

    ``s`` is the previous decoder state (B, d); ``A`` is (B, n, D) or (1, n, D)
    shared across the batch. Masked rows receive exactly zero weight.
    """
    if not np.all((mask > 0).any(axis=-1)):
        raise ValueError("attention over a fully masked source")
    if keys is None:
        keys = attention_keys(A, p_att)
    alpha, hid = attention_weights(keys, s, p_att["U_a"], p_att["V_a"], np.broadcast_to(mask, keys.shape[:2]))
    c = np.einsum("bn,bnd->bd", alpha, np.broadcast_to(A, alpha.shape + A.shape[-1:]))
    return alpha, c, hid


def initial_state(A: np.ndarray, mask: np.ndarray, p_init: dict, zero: bool = False):
    B = A.shape[0]
    if zero:
        return np.zeros((B, p_init["W"].shape[1]), dtype=A.dtype), None
    mean = np.einsum("bnd,bn->bd", A, mask) / mask.sum(axis=1, keepdims=True)
    s0 = np.tanh(mean @ p_init["W"] + p_init["b"])
    return s0, (mean, s0)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def decoder_step_forward(s_prev, y_prev, A, mask, params: dict, keys=None, drop: np.ndarray | None = None):
    """One decoding step for a batch of previous tokens ``y_prev`` (B,).

    Returns ``(DecoderStep, cache)``. ``drop`` is an optional inverted-dropout
    mask applied to the readout.
    """
    p_att = sub(params, "dec.att.")
    p_out = sub(params, "dec.out.")
    emb = embed(y_prev, params["tgt_emb"], params.get("tgt_emb_bias"))
    alpha, c, hid = attend(s_prev, A, mask, p_att, keys)
    x = np.concatenate([emb, c], axis=-1)
    s, gc = gru_forward(x, s_prev, sub(params, "dec.gru."))
    t = np.tanh(s @ p_out["W_t1"] + emb @ p_out["W_t2"] + c @ p_out["W_t3"] + p_out["b_t"])
    td = t * drop if drop is not None else t
    logp = _log_softmax(td @ p_out["W_o"] + p_out["b_o"])
    step = DecoderStep(s, c, alpha, td, logp)
    return step, (y_prev, s_prev, emb, alpha, c, hid, gc, s, t, td, drop)


def decoder_step(s_prev, y_prev, A, mask, params: dict, drop=None) -> DecoderStep:
    return decoder_step_forward(s_prev, y_prev, A, mask, params, drop=drop)[0]


def decoder_step_backward(dlogits: np.ndarray, ds: np.ndarray, cache, A: np.ndarray, params: dict, g: dict):
    """Backward of one step given d(logits) and d(s_j) from later steps.

    Returns ``(ds_prev, dA_ctx, dkeys, demb)`` where ``dA_ctx`` is the gradient
    through the context sum and ``dkeys`` the one through the scores.
    """
    y_prev, s_prev, emb, alpha, c, hid, gc, s, t, td, drop = cache
    p_out = sub(params, "dec.out.")
    g["dec.out.W_o"] += td.T @ dlogits
    g["dec.out.b_o"] += dlogits.sum(0)
    dt = dlogits @ p_out["W_o"].T
    if drop is not None:
        dt = dt * drop
    da = dt * (1.0 - t * t)
    g["dec.out.W_t1"] += s.T @ da
    g["dec.out.W_t2"] += emb.T @ da
    g["dec.out.W_t3"] += c.T @ da
    g["dec.out.b_t"] += da.sum(0)
    ds = ds + da @ p_out["W_t1"].T
    demb = da @ p_out["W_t2"].T
    dc = da @ p_out["W_t3"].T
    gg = Prefixed(g, "dec.gru.")
    dx, ds_prev = gru_backward(ds, gc, sub(params, "dec.gru."), gg)
    e = emb.shape[-1]
    demb = demb + dx[:, :e]
    dc = dc + dx[:, e:]
    dalpha = np.einsum("bd,bnd->bn", dc, np.broadcast_to(A, alpha.shape + A.shape[-1:]))
    dA_ctx = alpha[:, :, None] * dc[:, None, :]
    ga = Prefixed(g, "dec.att.")
    dkeys, ds_att = attention_weights_backward(dalpha, alpha, hid, s_prev, params["dec.att.U_a"],
                                               params["dec.att.V_a"], ga)
    return ds_prev + ds_att, dA_ctx, dkeys, demb


def decode_forward(A, mask, tgt_in, params: dict, zero_init: bool = False,
                   dropout: float = 0.0, rng: Rng | None = None):
    """Teacher-forced decoder pass over ``tgt_in`` (B, T). Returns (logp (B, T, V), cache)."""
    keys = attention_keys(A, sub(params, "dec.att."))
    s, icache = initial_state(A, mask, sub(params, "dec.init."), zero_init)
    B, T = tgt_in.shape
    logps, steps = [], []
    for j in range(T):
        drop = None
        if dropout > 0 and rng is not None:
            drop = dropout_mask((B, params["dec.out.b_t"].shape[0]), rng, dropout, True, A.dtype)
        step, cache = decoder_step_forward(s, tgt_in[:, j], A, mask, params, keys, drop)
        s = step.state
        logps.append(step.logp)
        steps.append(cache)
    return np.stack(logps, axis=1), (keys, icache, steps)


def decode_backward(dlogits: np.ndarray, cache, A, mask, tgt_in, params: dict, g: dict, zero_init: bool = False):
    """Backward of :func:`decode_forward`; returns dA and accumulates into ``g``."""
    keys, icache, steps = cache
    B, T, _ = dlogits.shape
    dA = np.zeros_like(A)
    dkeys = np.zeros_like(keys)
    ds = np.zeros((B, params["dec.init.b"].shape[0]), dtype=A.dtype)
    demb_all = np.zeros((B, T, params["tgt_emb"].shape[1]), dtype=A.dtype)
    for j in range(T - 1, -1, -1):
        ds, dA_ctx, dk, demb = decoder_step_backward(dlogits[:, j], ds, steps[j], A, params, g)
        dA += dA_ctx
        dkeys += dk
        demb_all[:, j] = demb
    D = A.shape[-1]
    g["dec.att.W_a"] += A.reshape(-1, D).T @ dkeys.reshape(B * A.shape[1], -1)
    g["dec.att.b_a"] += dkeys.sum(axis=(0, 1))
    dA += dkeys @ params["dec.att.W_a"].T
    if not zero_init:
        mean, s0 = icache
        da = ds * (1.0 - s0 * s0)
        g["dec.init.W"] += mean.T @ da
        g["dec.init.b"] += da.sum(0)
        dmean = da @ params["dec.init.W"].T
        dA += dmean[:, None, :] * (mask / mask.sum(axis=1, keepdims=True))[:, :, None]
    dtable, dbias = embed_backward(demb_all, tgt_in, params["tgt_emb"].shape,
                                   with_bias="tgt_emb_bias" in params)
    g["tgt_emb"] += dtable
    if dbias is not None:
        g["tgt_emb_bias"] += dbias
    return dA
