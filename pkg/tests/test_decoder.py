import math

import numpy as np
import pytest

from conftest import toy_model, zero_params
from mcenmt import decoder as dec
from mcenmt.corpus import BOS, ParallelBatch, build_vocab, make_batch
from mcenmt.encoder import ChannelConfig
from mcenmt.gradcheck import check_attention, check_decoder_step
from mcenmt.model import ModelConfig
from mcenmt.numerics import Rng
from mcenmt.tasks import task_splits
from mcenmt.training import TrainConfig, fit


def att_params(rng, D=6, d=4):
    return {"W_a": rng.uniform(-1, 1, (D, d)), "U_a": rng.uniform(-1, 1, (d, d)),
            "b_a": rng.uniform(-1, 1, d), "V_a": rng.uniform(-1, 1, d)}


def test_attend_single_position():
    rng = Rng(0)
    A = rng.uniform(-1, 1, (1, 1, 6))
    alpha, c, _ = dec.attend(rng.uniform(-1, 1, (1, 4)), A, np.ones((1, 1)), att_params(rng))
    assert alpha.tolist() == [[1.0]]
    np.testing.assert_array_equal(c, A[:, 0])


def test_attend_identical_rows_uniform():
    rng = Rng(1)
    A = np.repeat(rng.uniform(-1, 1, (1, 1, 6)), 5, axis=1)
    mask = np.array([[1, 1, 1, 0, 0.0]])
    alpha, _, _ = dec.attend(rng.uniform(-1, 1, (1, 4)), A, mask, att_params(rng))
    np.testing.assert_allclose(alpha, [[1 / 3, 1 / 3, 1 / 3, 0, 0]], atol=1e-15)
    assert alpha[0, 3] == 0.0 and alpha[0, 4] == 0.0


def test_attend_matches_direct_computation():
    rng = Rng(2)
    p = att_params(rng)
    A, s = rng.uniform(-1, 1, (1, 5, 6)), rng.uniform(-1, 1, (1, 4))
    alpha, c, _ = dec.attend(s, A, np.ones((1, 5)), p)
    e = np.array([p["V_a"] @ np.tanh(p["U_a"].T @ s[0] + p["W_a"].T @ A[0, i] + p["b_a"]) for i in range(5)])
    ref = np.exp(e) / np.exp(e).sum()
    np.testing.assert_allclose(alpha[0], ref, atol=1e-12)
    np.testing.assert_allclose(c[0], ref @ A[0], atol=1e-12)


def test_attend_fully_masked_raises():
    rng = Rng(3)
    with pytest.raises(ValueError):
        dec.attend(np.zeros((1, 4)), np.zeros((1, 3, 6)), np.zeros((1, 3)), att_params(rng))


def test_attention_and_step_gradients():
    assert check_attention(Rng(4)) < 1e-4
    assert check_decoder_step(Rng(5)) < 1e-4


def _step(model, drop=None):
    p = model.params
    D = p["dec.att.W_a"].shape[0]
    A = Rng(6).uniform(-1, 1, (2, 3, D))
    return dec.decoder_step(np.zeros((2, p["dec.init.b"].shape[0])), np.array([BOS, 5]), A, np.ones((2, 3)), p,
                            drop=drop)


def test_zero_params_uniform_output():
    model = zero_params(toy_model())
    st = _step(model)
    np.testing.assert_allclose(np.exp(st.logp), 1 / 7, atol=1e-15)


def test_rate_zero_mask_matches_no_dropout():
    model = toy_model()
    a = _step(model)
    b = _step(model, drop=np.ones((2, 4)))
    np.testing.assert_array_equal(a.logp, b.logp)


def test_step_distribution_normalized_and_deterministic():
    model = toy_model(seed=7)
    a, b = _step(model), _step(model)
    assert np.all(np.abs(np.logaddexp.reduce(a.logp, axis=1)) < 1e-9)
    np.testing.assert_array_equal(a.logp, b.logp)
    assert np.all(np.abs(a.alpha.sum(1) - 1) < 1e-12)


def test_initial_state():
    rng = Rng(8)
    A = rng.uniform(-1, 1, (1, 3, 6))
    mask = np.array([[1, 1, 0.0]])
    p = {"W": rng.uniform(-1, 1, (6, 4)), "b": rng.uniform(-1, 1, 4)}
    s0, _ = dec.initial_state(A, mask, p)
    np.testing.assert_allclose(s0[0], np.tanh(A[0, :2].mean(0) @ p["W"] + p["b"]), atol=1e-15)
    zero = {"W": np.zeros((6, 4)), "b": np.zeros(4)}
    assert np.all(dec.initial_state(A, mask, zero)[0] == 0)
    assert np.all(dec.initial_state(A, mask, p, zero=True)[0] == 0)


def test_uniform_model_loss(pair_batch):
    batch, sv, tv = pair_batch
    model = zero_params(toy_model(src_vocab=len(sv), tgt_vocab=len(tv)))
    stats = model.sequence_loss(batch)
    lengths = batch.tgt_lengths
    assert stats.loss == pytest.approx(lengths.mean() * math.log(len(tv)), abs=1e-12)
    assert stats.nll_per_token == pytest.approx(math.log(len(tv)), abs=1e-12)


def test_half_probability_loss():
    # target "x" then EOS; force p(gold) = 1/2 at every step with a two-way tie
    sv = build_vocab([["a"]])
    tv = build_vocab([["x"]])
    batch = make_batch([(["a"], [])], sv, tv)   # single token: EOS
    model = zero_params(toy_model(src_vocab=len(sv), tgt_vocab=len(tv)))
    b_o = model.params["dec.out.b_o"]
    b_o[:] = -1e3
    b_o[2] = b_o[4] = 0.0                        # EOS and "x" share the mass
    assert model.sequence_loss(batch).loss == pytest.approx(math.log(2), abs=1e-12)


def test_empty_batch_raises(pair_batch):
    batch, sv, tv = pair_batch
    model = toy_model(src_vocab=len(sv), tgt_vocab=len(tv))
    with pytest.raises(ValueError):
        model.forward(ParallelBatch(*(getattr(batch, f)[:0] for f in
                                      ("src", "src_mask", "tgt", "tgt_mask", "src_lengths", "tgt_lengths"))))


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_loss_decreases_over_first_epochs(seed):
    train, _, _ = task_splits("copy", seed, n_train=64, n_dev=1, n_test=1, vocab=8, max_len=6)
    sv = build_vocab([s for s, _ in train])
    tv = build_vocab([t for _, t in train])
    cfg = ModelConfig(ChannelConfig.for_system("NTM-RNN-EMB", emb_dim=8, hidden_dim=8, mem_dim=8),
                      len(sv), len(tv), dropout=0.0)
    losses = []
    fit(train, sv, tv, cfg, TrainConfig(epochs=5, batch_size=8, seed=seed, fixed_lr=3e-3),
        on_epoch=lambda e, loss, ck: losses.append(loss))
    assert len(losses) == 5
    assert all(b < a for a, b in zip(losses, losses[1:])), losses
