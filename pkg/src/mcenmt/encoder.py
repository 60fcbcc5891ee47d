"""Multi-channel source encoder.

Three channels are produced for every source position: the raw embedding,
the bidirectional GRU state and the final content of an external memory the
GRU reads from and writes to at each step. :func:`combine_channels` blends
the enabled channels into the annotation matrix read by the decoder.

All functions work on batches: a leading batch axis ``B`` precedes the
position axis ``n``. Forward functions return ``(outputs, cache)`` and the
matching ``*_backward`` accumulates parameter gradients into a dict keyed by
the same local names as the parameter dict.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Rng, fast_sigmoid, uniform_init

SYSTEMS = {
    "RNN": (False, True, False),
    "NTM": (False, False, True),
    "EMB": (True, False, False),
    "NTM-EMB": (True, False, True),
    "NTM-RNN": (False, True, True),
    "RNN-EMB": (True, True, False),
    "NTM-RNN-EMB": (True, True, True),
}


@dataclass(frozen=True)
class ChannelConfig:
    use_emb: bool = True
    use_rnn: bool = True
    use_ntm: bool = True
    emb_dim: int = 512
    hidden_dim: int = 512
    mem_dim: int = 512
    read_weighting: str = "literal"
    stacked_bidir: bool = False
    emb_bias: bool = True

    def __post_init__(self):
        if not (self.use_emb or self.use_rnn or self.use_ntm):
            raise ValueError("at least one encoder channel must be enabled")
        if self.read_weighting not in ("literal", "single"):
            raise ValueError(f"read_weighting must be 'literal' or 'single', got {self.read_weighting!r}")
        if min(self.emb_dim, self.hidden_dim, self.mem_dim) < 1:
            raise ValueError("dimensions must be positive")
        if self.use_ntm and not (self.mem_dim == self.emb_dim == self.hidden_dim):
            raise ValueError("the memory channel requires mem_dim == emb_dim == hidden_dim")
        if self.use_emb and self.emb_dim != self.hidden_dim and (self.use_rnn or self.use_ntm):
            raise ValueError("blending the embedding channel requires emb_dim == hidden_dim")

    @classmethod
    def for_system(cls, name: str, **kw) -> "ChannelConfig":
        use_emb, use_rnn, use_ntm = SYSTEMS[name.upper()]
        return cls(use_emb=use_emb, use_rnn=use_rnn, use_ntm=use_ntm, **kw)

    @property
    def system(self) -> str:
        flags = (self.use_emb, self.use_rnn, self.use_ntm)
        return next(k for k, v in SYSTEMS.items() if v == flags)

    @property
    def recurrent(self) -> bool:
        return self.use_rnn or self.use_ntm

    @property
    def annotation_dim(self) -> int:
        return 2 * (self.hidden_dim if self.recurrent else self.emb_dim)

    @property
    def gates(self) -> tuple[str, ...]:
        name = self.system
        return {"NTM-RNN": ("gate0",), "RNN-EMB": ("gate1",), "NTM-EMB": ("gate2",),
                "NTM-RNN-EMB": ("gate0", "gate3")}.get(name, ())


# -- parameter construction ---------------------------------------------------


def gru_shapes(in_dim: int, d: int) -> dict[str, tuple]:
    return {"W": (in_dim, d), "U": (d, d), "b": (d,),
            "W_r": (in_dim, d), "U_r": (d, d), "b_r": (d,),
            "W_z": (in_dim, d), "U_z": (d, d), "b_z": (d,)}


def memory_shapes(d: int, m: int, k: int) -> dict[str, tuple]:
    return {"W_a": (m, k), "U_a": (d, k), "b_a": (k,), "V_a": (k,),
            "W_read": (d, m), "b_read": (m,), "W_update": (d, m), "b_update": (m,)}


def encoder_shapes(cfg: ChannelConfig, src_vocab_size: int) -> dict[str, tuple]:
    e, d, m = cfg.emb_dim, cfg.hidden_dim, cfg.mem_dim
    shapes: dict[str, tuple] = {"src_emb": (src_vocab_size, e)}
    if cfg.emb_bias:
        shapes["src_emb_bias"] = (e,)
    if cfg.recurrent:
        for direction in ("fwd", "bwd"):
            in_dim = d if (direction == "bwd" and cfg.stacked_bidir) else e
            for k, v in gru_shapes(in_dim, d).items():
                shapes[f"enc.{direction}.gru.{k}"] = v
            if cfg.use_ntm:
                for k, v in memory_shapes(d, m, d).items():
                    shapes[f"enc.{direction}.mem.{k}"] = v
    D = cfg.annotation_dim
    for gate in cfg.gates:
        shapes[f"enc.{gate}.W"] = (D, D)
        shapes[f"enc.{gate}.U"] = (D, D)
        shapes[f"enc.{gate}.b"] = (D,)
    return shapes


def init_params(shapes: dict[str, tuple], rng: Rng, half_width: float = 0.04, dtype=np.float64):
    return {name: uniform_init(shape, rng, half_width, dtype) for name, shape in shapes.items()}


def sub(tree: dict, prefix: str) -> dict:
    """View of the entries under ``prefix`` with the prefix stripped."""
    return {k[len(prefix):]: v for k, v in tree.items() if k.startswith(prefix)}


def zeros_like_params(p: dict) -> dict:
    return {k: np.zeros_like(v) for k, v in p.items()}


class Prefixed:
    """Dict-like window onto ``tree`` that prefixes every key.

    Lets backward helpers written against local names accumulate straight
    into a gradient dict keyed by full parameter names.
    """

    def __init__(self, tree: dict, prefix: str):
        self.tree, self.prefix = tree, prefix

    def __getitem__(self, k):
        return self.tree[self.prefix + k]

    def __setitem__(self, k, v):
        self.tree[self.prefix + k] = v


# -- embedding ----------------------------------------------------------------


def embed(ids: np.ndarray, table: np.ndarray, bias: np.ndarray | None = None,
          mask: np.ndarray | None = None) -> np.ndarray:
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError("token id out of range for the embedding table")
    E = table[ids]
    if bias is not None:
        E = E + bias
    if mask is not None:
        E = E * mask[..., None]
    return E


def embed_backward(dE: np.ndarray, ids: np.ndarray, table_shape, mask=None, with_bias: bool = False):
    if mask is not None:
        dE = dE * mask[..., None]
    flat = dE.reshape(-1, table_shape[1])
    dtable = np.zeros(table_shape, dtype=dE.dtype)
    np.add.at(dtable, ids.reshape(-1), flat)
    dbias = flat.sum(0) if with_bias else None
    return dtable, dbias


# -- GRU ------------------------------------------------------------------------


def gru_forward(x: np.ndarray, s: np.ndarray, p: dict):
    if x.shape[-1] != p["W"].shape[0] or s.shape[-1] != p["U"].shape[0]:
        raise ValueError(f"GRU shape mismatch: input {x.shape}, state {s.shape}")
    r = fast_sigmoid(x @ p["W_r"] + s @ p["U_r"] + p["b_r"])
    z = fast_sigmoid(x @ p["W_z"] + s @ p["U_z"] + p["b_z"])
    us = s @ p["U"]
    cand = np.tanh(x @ p["W"] + r * us + p["b"])
    out = (1.0 - z) * cand + z * s
    return out, (x, s, r, z, us, cand)


def gru_step(x: np.ndarray, s: np.ndarray, p: dict) -> np.ndarray:
    """One GRU update: reset gate r, update gate z, candidate, interpolation."""
    return gru_forward(x, s, p)[0]


def gru_backward(dout: np.ndarray, cache, p: dict, g: dict):
    x, s, r, z, us, cand = cache
    dcand = dout * (1.0 - z)
    ds = dout * z
    da_z = dout * (s - cand) * z * (1.0 - z)
    da_h = dcand * (1.0 - cand * cand)
    da_r = da_h * us * r * (1.0 - r)
    dus = da_h * r
    g["W"] += x.T @ da_h
    g["W_r"] += x.T @ da_r
    g["W_z"] += x.T @ da_z
    g["U"] += s.T @ dus
    g["U_r"] += s.T @ da_r
    g["U_z"] += s.T @ da_z
    g["b"] += da_h.sum(0)
    g["b_r"] += da_r.sum(0)
    g["b_z"] += da_z.sum(0)
    dx = da_h @ p["W"].T + da_r @ p["W_r"].T + da_z @ p["W_z"].T
    ds = ds + dus @ p["U"].T + da_r @ p["U_r"].T + da_z @ p["U_z"].T
    return dx, ds


# -- additive attention scoring (shared with the decoder) -------------------------


def attention_weights(keys: np.ndarray, s: np.ndarray, U_a: np.ndarray, V_a: np.ndarray,
                      mask: np.ndarray):
    """Masked softmax of ``V_a . tanh(keys_i + s U_a)`` over positions.

    ``keys`` already holds ``X W_a + b_a`` for the addressed rows.
    """
    hid = np.tanh(keys + (s @ U_a)[:, None, :])
    scores = hid @ V_a
    keep = mask > 0
    peak = np.where(keep, scores, -np.inf).max(axis=1, keepdims=True)
    ex = np.where(keep, np.exp(np.where(keep, scores - peak, 0.0)), 0.0)
    w = ex / ex.sum(axis=1, keepdims=True)
    return w, hid


def attention_weights_backward(dw: np.ndarray, w: np.ndarray, hid: np.ndarray, s: np.ndarray,
                               U_a: np.ndarray, V_a: np.ndarray, g: dict):
    """Returns (dkeys, ds); accumulates ``U_a`` and ``V_a`` gradients into ``g``."""
    dscore = w * (dw - (w * dw).sum(axis=1, keepdims=True))
    g["V_a"] += np.einsum("bn,bnk->k", dscore, hid)
    dpre = dscore[:, :, None] * V_a * (1.0 - hid * hid)
    dq = dpre.sum(axis=1)
    g["U_a"] += s.T @ dq
    return dpre, dq @ U_a.T


# -- external memory ------------------------------------------------------------------


def memory_read_forward(M: np.ndarray, s: np.ndarray, cell_mask: np.ndarray, p: dict,
                        literal: bool = True):
    """Address the memory with the previous state and read a context vector.

    Cell weights ``w`` come from additive attention over memory rows. The read
    gate ``R = sigmoid(s W_read)`` gates every row: ``Mt[i] = w[i] * (M[i] * R)``.
    The context is ``sum_i w[i] * Mt[i]`` in literal mode (the weight is applied
    a second time) and ``sum_i Mt[i]`` in single mode.
    """
    if M.ndim != 3 or M.shape[1] == 0:
        raise ValueError("memory must be a non-empty (B, n, m) array")
    if M.shape[2] != p["W_a"].shape[0] or s.shape[-1] != p["U_a"].shape[0]:
        raise ValueError(f"memory shape mismatch: memory {M.shape}, state {s.shape}")
    keys = M @ p["W_a"] + p["b_a"]
    w, hid = attention_weights(keys, s, p["U_a"], p["V_a"], cell_mask)
    R = fast_sigmoid(s @ p["W_read"] + p["b_read"])
    Mt = w[:, :, None] * M * R[:, None, :]
    if literal:
        c = np.einsum("bn,bnm->bm", w, Mt)
    else:
        c = Mt.sum(axis=1)
    return (w, R, Mt, c), (M, s, w, hid, R, Mt, literal)


def memory_read(M, s, p, cell_mask=None, literal: bool = True):
    if cell_mask is None:
        cell_mask = np.ones(M.shape[:2])
    return memory_read_forward(M, s, cell_mask, p, literal)[0]


def memory_read_backward(dc, dMt, dw, cache, p: dict, g: dict):
    """Backward of the read; ``dMt``/``dw`` carry gradients from the write."""
    M, s, w, hid, R, Mt, literal = cache
    if literal:
        dMt = dMt + w[:, :, None] * dc[:, None, :]
        dw = dw + np.einsum("bnm,bm->bn", Mt, dc)
    else:
        dMt = dMt + dc[:, None, :]
    MR = M * R[:, None, :]
    dw = dw + np.einsum("bnm,bnm->bn", dMt, MR)
    wd = w[:, :, None] * dMt
    dM = wd * R[:, None, :]
    dR = np.einsum("bnm,bnm->bm", wd, M)
    da_R = dR * R * (1.0 - R)
    g["W_read"] += s.T @ da_R
    g["b_read"] += da_R.sum(0)
    ds = da_R @ p["W_read"].T
    dkeys, ds_att = attention_weights_backward(dw, w, hid, s, p["U_a"], p["V_a"], g)
    g["W_a"] += np.einsum("bnm,bnk->mk", M, dkeys)
    g["b_a"] += dkeys.sum(axis=(0, 1))
    dM += dkeys @ p["W_a"].T
    return dM, ds + ds_att


def memory_write_forward(Mt: np.ndarray, s: np.ndarray, w: np.ndarray, p: dict):
    """Rank-one additive write ``M = Mt + w (x) sigmoid(s W_update)``."""
    if s.shape[-1] != p["W_update"].shape[0] or Mt.shape[2] != p["W_update"].shape[1]:
        raise ValueError(f"memory write shape mismatch: memory {Mt.shape}, state {s.shape}")
    U = fast_sigmoid(s @ p["W_update"] + p["b_update"])
    return Mt + w[:, :, None] * U[:, None, :], (s, w, U)


def memory_write(Mt, s, w, p) -> np.ndarray:
    return memory_write_forward(Mt, s, w, p)[0]


def memory_write_backward(dM, cache, p: dict, g: dict):
    """Returns (dMt, dw, ds)."""
    s, w, U = cache
    dw = np.einsum("bnm,bm->bn", dM, U)
    dU = np.einsum("bnm,bn->bm", dM, w)
    da = dU * U * (1.0 - U)
    g["W_update"] += s.T @ da
    g["b_update"] += da.sum(0)
    return dM, dw, da @ p["W_update"].T


# -- one direction of the recurrence --------------------------------------------------------


def encode_direction_forward(X: np.ndarray, M0: np.ndarray | None, mask: np.ndarray,
                             p_gru: dict, p_mem: dict | None = None, literal: bool = True):
    """Run the recurrence left to right over ``X`` (B, n, in).

    With a memory (``p_mem`` given) each step reads a context from the memory
    using the previous state, feeds it to the GRU as the state input, and
    writes the new state back with the same cell weights. Positions past a
    sentence's length freeze the state and memory and emit zeros.

    Returns ``(H, M_final, cache)``; ``M_final`` is None without a memory.
    """
    B, n, _ = X.shape
    d = p_gru["U"].shape[0]
    s = np.zeros((B, d), dtype=X.dtype)
    M = M0
    H = np.zeros((B, n, d), dtype=X.dtype)
    steps = []
    for t in range(n):
        act = mask[:, t : t + 1]
        full = bool(act.all())
        if p_mem is not None:
            (w, _, Mt, c), rc = memory_read_forward(M, s, mask, p_mem, literal)
            s_new, gc = gru_forward(X[:, t], c, p_gru)
            M_new, wc = memory_write_forward(Mt, s_new, w, p_mem)
            M = M_new if full else act[:, :, None] * M_new + (1.0 - act[:, :, None]) * M
        else:
            rc = wc = None
            s_new, gc = gru_forward(X[:, t], s, p_gru)
        s = s_new if full else act * s_new + (1.0 - act) * s
        H[:, t] = s_new * act
        steps.append((act, full, rc, gc, wc))
    return H, M, steps


def encode_direction_backward(dH: np.ndarray, dM_final: np.ndarray | None, steps, p_gru: dict,
                              p_mem: dict | None, g_gru: dict, g_mem: dict | None):
    """Returns (dX, dM0); dM0 is None without a memory."""
    B, n, d = dH.shape
    in_dim = p_gru["W"].shape[0]
    dX = np.zeros((B, n, in_dim), dtype=dH.dtype)
    dS = np.zeros((B, d), dtype=dH.dtype)
    dM = dM_final
    for t in range(n - 1, -1, -1):
        act, full, rc, gc, wc = steps[t]
        if full:
            ds_new = dS + dH[:, t]
            ds_carry = None
        else:
            ds_new = act * (dS + dH[:, t])
            ds_carry = (1.0 - act) * dS
        if p_mem is not None:
            if full:
                dM_new, dM_carry = dM, None
            else:
                dM_new = act[:, :, None] * dM
                dM_carry = (1.0 - act[:, :, None]) * dM
            dMt, dw, ds_w = memory_write_backward(dM_new, wc, p_mem, g_mem)
            dx, dc = gru_backward(ds_new + ds_w, gc, p_gru, g_gru)
            dM_prev, ds_prev = memory_read_backward(dc, dMt, dw, rc, p_mem, g_mem)
            dM = dM_prev if dM_carry is None else dM_prev + dM_carry
        else:
            dx, ds_prev = gru_backward(ds_new, gc, p_gru, g_gru)
        dX[:, t] = dx
        dS = ds_prev if ds_carry is None else ds_prev + ds_carry
    return dX, dM


def encode_direction(E, p_gru, p_mem=None, mask=None, reverse: bool = False, literal: bool = True):
    """Convenience single-call direction run for (B, n, e) embeddings.

    The memory starts from ``E`` itself. ``reverse`` runs right to left over
    each sentence and returns outputs aligned to the original positions.
    """
    if mask is None:
        mask = np.ones(E.shape[:2], dtype=E.dtype)
    idx = reverse_index(mask) if reverse else None
    X = gather_positions(E, idx) if reverse else E
    H, M, _ = encode_direction_forward(X, X if p_mem is not None else None, mask, p_gru, p_mem, literal)
    if reverse:
        H = gather_positions(H, idx)
        M = gather_positions(M, idx) if M is not None else None
    return H, M


# -- per-sentence reversal ----------------------------------------------------------------------


def reverse_index(mask: np.ndarray) -> np.ndarray:
    """Index that reverses each row's first ``length`` positions in place.

    Padding positions map to themselves, so the index is its own inverse.
    """
    B, n = mask.shape
    lengths = mask.sum(axis=1).astype(np.int64)[:, None]
    pos = np.arange(n)[None, :]
    return np.where(pos < lengths, lengths - 1 - pos, pos)


def gather_positions(X: np.ndarray, idx: np.ndarray) -> np.ndarray:
    return X[np.arange(X.shape[0])[:, None], idx]


# -- channel combination -------------------------------------------------------------------------


def gate_forward(X1: np.ndarray, X2: np.ndarray, p: dict):
    """Position-wise blend ``g * X1 + (1 - g) * X2`` with ``g = sigmoid(X1 W + X2 U + b)``."""
    g = fast_sigmoid(X1 @ p["W"] + X2 @ p["U"] + p["b"])
    return g * X1 + (1.0 - g) * X2, (X1, X2, g)


def gate_backward(dA: np.ndarray, cache, p: dict, grads: dict):
    X1, X2, g = cache
    da = dA * (X1 - X2) * g * (1.0 - g)
    D = X1.shape[-1]
    da2 = da.reshape(-1, D)
    grads["W"] += X1.reshape(-1, D).T @ da2
    grads["U"] += X2.reshape(-1, D).T @ da2
    grads["b"] += da2.sum(0)
    dX1 = dA * g + da @ p["W"].T
    dX2 = dA * (1.0 - g) + da @ p["U"].T
    return dX1, dX2


def combine_channels_forward(E2, h, M, params: dict, cfg: ChannelConfig):
    """Blend the enabled channels into the annotation matrix.

    ``params`` holds ``gate0`` .. ``gate3`` sub-dicts as needed. Returns
    ``(A, cache)``.
    """
    system = cfg.system
    need = {"EMB": E2 if cfg.use_emb else None, "RNN": h if cfg.use_rnn else None,
            "NTM": M if cfg.use_ntm else None}
    for name, value in need.items():
        if value is None and name in system.split("-"):
            raise ValueError(f"{system} requires the {name} channel")
    if system in ("RNN", "NTM", "EMB"):
        return need[system], None
    if system == "NTM-RNN":
        A, c0 = gate_forward(M, h, params["gate0"])
        return A, (c0,)
    if system == "RNN-EMB":
        A, c1 = gate_forward(E2, h, params["gate1"])
        return A, (c1,)
    if system == "NTM-EMB":
        A, c2 = gate_forward(E2, M, params["gate2"])
        return A, (c2,)
    mixed, c0 = gate_forward(M, h, params["gate0"])
    A, c3 = gate_forward(E2, mixed, params["gate3"])
    return A, (c0, c3)


def combine_channels(E2, h, M, params: dict, cfg: ChannelConfig) -> np.ndarray:
    return combine_channels_forward(E2, h, M, params, cfg)[0]


def combine_channels_backward(dA, cache, params: dict, grads: dict, cfg: ChannelConfig):
    """Returns (dE2, dh, dM) with None for channels that are not in use."""
    system = cfg.system
    if system == "RNN":
        return None, dA, None
    if system == "NTM":
        return None, None, dA
    if system == "EMB":
        return dA, None, None
    if system == "NTM-RNN":
        dM, dh = gate_backward(dA, cache[0], params["gate0"], grads["gate0"])
        return None, dh, dM
    if system == "RNN-EMB":
        dE2, dh = gate_backward(dA, cache[0], params["gate1"], grads["gate1"])
        return dE2, dh, None
    if system == "NTM-EMB":
        dE2, dM = gate_backward(dA, cache[0], params["gate2"], grads["gate2"])
        return dE2, None, dM
    dE2, dmixed = gate_backward(dA, cache[1], params["gate3"], grads["gate3"])
    dM, dh = gate_backward(dmixed, cache[0], params["gate0"], grads["gate0"])
    return dE2, dh, dM


# -- whole encoder -----------------------------------------------------------------------------------


@dataclass
class SourceEncoding:
    E2: np.ndarray          # (B, n, 2e) tiled embeddings
    h: np.ndarray | None    # (B, n, 2d) bidirectional states
    M: np.ndarray | None    # (B, n, 2m) final memories, position aligned
    A: np.ndarray           # (B, n, D) combined annotation
    mask: np.ndarray        # (B, n)


def encode_forward(src: np.ndarray, mask: np.ndarray, params: dict, cfg: ChannelConfig):
    E = embed(src, params["src_emb"], params.get("src_emb_bias"), mask)
    h = M = None
    cache: dict = {"src": src, "mask": mask}
    if cfg.recurrent:
        literal = cfg.read_weighting == "literal"
        p_f, p_b = sub(params, "enc.fwd.gru."), sub(params, "enc.bwd.gru.")
        m_f = sub(params, "enc.fwd.mem.") if cfg.use_ntm else None
        m_b = sub(params, "enc.bwd.mem.") if cfg.use_ntm else None
        H_f, M_f, steps_f = encode_direction_forward(E, E if cfg.use_ntm else None, mask, p_f, m_f, literal)
        idx = reverse_index(mask)
        E_r = gather_positions(E, idx)
        X_b = gather_positions(H_f, idx) if cfg.stacked_bidir else E_r
        H_br, M_br, steps_b = encode_direction_forward(X_b, E_r if cfg.use_ntm else None, mask, p_b, m_b, literal)
        H_b = gather_positions(H_br, idx)
        h = np.concatenate([H_f, H_b], axis=-1)
        if cfg.use_ntm:
            M = np.concatenate([M_f, gather_positions(M_br, idx)], axis=-1)
        cache.update(idx=idx, steps_f=steps_f, steps_b=steps_b)
    E2 = np.concatenate([E, E], axis=-1)
    gate_params = {gname: sub(params, f"enc.{gname}.") for gname in cfg.gates}
    A, ccache = combine_channels_forward(E2, h, M, gate_params, cfg)
    cache["combine"] = ccache
    return SourceEncoding(E2, h, M, A, mask), cache


def encode_backward(dA: np.ndarray, cache, params: dict, cfg: ChannelConfig, grads: dict):
    """Accumulate every encoder gradient into ``grads`` (full parameter names)."""
    gate_params = {gname: sub(params, f"enc.{gname}.") for gname in cfg.gates}
    gate_grads = {gname: Prefixed(grads, f"enc.{gname}.") for gname in cfg.gates}
    dE2, dh, dM = combine_channels_backward(dA, cache["combine"], gate_params, gate_grads, cfg)
    e = cfg.emb_dim
    mask = cache["mask"]
    dE = np.zeros(mask.shape + (e,), dtype=dA.dtype)
    if dE2 is not None:
        dE += dE2[..., :e] + dE2[..., e:]
    if cfg.recurrent:
        d, m = cfg.hidden_dim, cfg.mem_dim
        if dh is None:
            dh = np.zeros(mask.shape + (2 * d,), dtype=dA.dtype)
        idx = cache["idx"]
        dH_f, dH_b = dh[..., :d], dh[..., d:]
        dM_f = dM[..., :m] if cfg.use_ntm else None
        dM_b = gather_positions(dM[..., m:], idx) if cfg.use_ntm else None
        p_f, p_b = sub(params, "enc.fwd.gru."), sub(params, "enc.bwd.gru.")
        g_f, g_b = Prefixed(grads, "enc.fwd.gru."), Prefixed(grads, "enc.bwd.gru.")
        m_f = sub(params, "enc.fwd.mem.") if cfg.use_ntm else None
        m_b = sub(params, "enc.bwd.mem.") if cfg.use_ntm else None
        gm_f = Prefixed(grads, "enc.fwd.mem.") if cfg.use_ntm else None
        gm_b = Prefixed(grads, "enc.bwd.mem.") if cfg.use_ntm else None
        dX_b, dM0_b = encode_direction_backward(gather_positions(dH_b, idx), dM_b, cache["steps_b"],
                                                p_b, m_b, g_b, gm_b)
        dX_b = gather_positions(dX_b, idx)
        if cfg.stacked_bidir:
            dH_f = dH_f + dX_b
        else:
            dE += dX_b
        if cfg.use_ntm:
            dE += gather_positions(dM0_b, idx)
        dX_f, dM0_f = encode_direction_backward(dH_f, dM_f, cache["steps_f"], p_f, m_f, g_f, gm_f)
        dE += dX_f
        if cfg.use_ntm:
            dE += dM0_f
    dtable, dbias = embed_backward(dE, cache["src"], params["src_emb"].shape, mask,
                                   with_bias="src_emb_bias" in params)
    grads["src_emb"] += dtable
    if dbias is not None:
        grads["src_emb_bias"] += dbias
