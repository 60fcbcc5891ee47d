import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mcenmt.corpus import build_vocab
from mcenmt.encoder import ChannelConfig
from mcenmt.model import ModelConfig
from mcenmt.numerics import NonFiniteError
from mcenmt.training import (AdamState, FingerprintMismatch, TrainConfig, TrainingDiverged, adam_step, fingerprint,
                             fit, load_checkpoint, lrate, save_checkpoint, write_trace)


def test_lrate_fixtures():
    assert lrate(6000, 512) == pytest.approx(5.706e-4, rel=1e-3)
    assert lrate(6000, 512) == pytest.approx(512 ** -0.5 * 6000 ** -0.5, rel=1e-14)
    assert lrate(1, 512) == pytest.approx(512 ** -0.5 * 6000 ** -1.5, rel=1e-14)
    assert lrate(1, 512) == pytest.approx(9.51e-8, rel=1e-3)
    assert lrate(12000, 512, num_gpus=2) == lrate(6000, 512)
    with pytest.raises(ValueError):
        lrate(0, 512)


def test_lrate_monotone_pieces():
    up = [lrate(s, 512) for s in range(1, 6001, 50)]
    down = [lrate(s, 512) for s in range(6000, 60000, 500)]
    assert all(b >= a for a, b in zip(up, up[1:]))
    assert all(b <= a for a, b in zip(down, down[1:]))


@given(st.integers(1, 10 ** 7), st.integers(1, 4096), st.integers(1, 20000))
def test_lrate_positive(step, d, warmup):
    assert lrate(step, d, warmup) > 0


def test_adam_zero_gradient():
    params = {"w": np.array([1.5, -2.0])}
    state = AdamState.for_params(params, 512)
    for _ in range(3):
        adam_step(params, {"w": np.zeros(2)}, state)
    assert params["w"].tolist() == [1.5, -2.0]
    assert state.step == 3


def test_adam_moments_decay_under_zero_gradient():
    params = {"w": np.array([1.0])}
    state = AdamState.for_params(params, 512)
    state.m["w"][:] = 0.3
    state.v["w"][:] = 0.2
    adam_step(params, {"w": np.zeros(1)}, state)
    assert state.m["w"][0] == pytest.approx(0.27, rel=1e-15)
    assert state.v["w"][0] == pytest.approx(0.196, rel=1e-15)


def test_adam_constant_gradient_limit():
    # with bias correction m/c1 = g and v/c2 = g^2 exactly, so each update is -lr * sign(g)
    params = {"w": np.array([0.0])}
    state = AdamState.for_params(params, 64, warmup=10)
    for _ in range(50):
        before = params["w"].copy()
        adam_step(params, {"w": np.array([0.7])}, state)
        step = (params["w"] - before)[0]
        assert step == pytest.approx(-lrate(state.step, 64, 10), rel=1e-7)


def test_adam_fixed_rate_and_errors():
    params = {"w": np.array([0.0])}
    state = AdamState.for_params(params, 64, fixed_lr=0.01)
    adam_step(params, {"w": np.array([-3.0])}, state)
    assert params["w"][0] == pytest.approx(0.01, rel=1e-7)
    with pytest.raises(NonFiniteError):
        adam_step(params, {"w": np.array([np.inf])}, state)


def _copy_data(n=12):
    pairs = [([f"w{(i + j) % 5}" for j in range(3)], [f"w{(i + j) % 5}" for j in range(3)]) for i in range(n)]
    sv = build_vocab([s for s, _ in pairs])
    return pairs, sv, sv


def _cfg(sv, tv, system="NTM-RNN-EMB", dim=6, dropout=0.3):
    return ModelConfig(ChannelConfig.for_system(system, emb_dim=dim, hidden_dim=dim, mem_dim=dim),
                       len(sv), len(tv), dropout=dropout)


def test_adam_runs_bitwise_deterministic():
    pairs, sv, tv = _copy_data()
    a, _ = fit(pairs, sv, tv, _cfg(sv, tv), TrainConfig(epochs=3, batch_size=4, warmup=10))
    b, _ = fit(pairs, sv, tv, _cfg(sv, tv), TrainConfig(epochs=3, batch_size=4, warmup=10))
    assert a.step == 9
    for k in a.model.params:
        assert np.array_equal(a.model.params[k], b.model.params[k])


def test_zero_epochs_returns_initial_model():
    pairs, sv, tv = _copy_data()
    ckpt, trace = fit(pairs, sv, tv, _cfg(sv, tv), TrainConfig(epochs=0))
    ref, _ = fit(pairs, sv, tv, _cfg(sv, tv), TrainConfig(epochs=0))
    assert trace == [] and ckpt.step == 0
    assert all(np.array_equal(ckpt.model.params[k], ref.model.params[k]) for k in ref.model.params)


def test_empty_corpus_raises():
    _, sv, tv = _copy_data()
    with pytest.raises(ValueError):
        fit([], sv, tv, _cfg(sv, tv), TrainConfig(epochs=1))


def test_overfit_single_sentence():
    pairs = [("a b c d".split(), "x y z".split())]
    sv = build_vocab([pairs[0][0]])
    tv = build_vocab([pairs[0][1]])
    ckpt, trace = fit(pairs, sv, tv, _cfg(sv, tv, dim=16, dropout=0.0),
                      TrainConfig(epochs=200, batch_size=1, warmup=50))
    assert len(trace) == 200
    assert trace[-1].loss < 0.01


def test_resume_matches_uninterrupted(tmp_path):
    pairs, sv, tv = _copy_data()
    cfg = _cfg(sv, tv)
    full, full_trace = fit(pairs, sv, tv, cfg, TrainConfig(epochs=4, batch_size=5, warmup=10))
    part, part_trace = fit(pairs, sv, tv, cfg, TrainConfig(epochs=4, batch_size=5, warmup=10, max_steps=5))
    save_checkpoint(tmp_path / "k.bin", part)
    resumed, rest_trace = fit(pairs, sv, tv, cfg, TrainConfig(epochs=4, batch_size=5, warmup=10),
                              resume=load_checkpoint(tmp_path / "k.bin"))
    assert resumed.step == full.step == 12
    for k in full.model.params:
        assert np.array_equal(full.model.params[k], resumed.model.params[k])
    strip = lambda tr: [(r.step, r.lrate, r.loss) for r in tr]  # noqa: E731
    assert strip(part_trace + rest_trace) == strip(full_trace)


def test_resume_rejects_other_config():
    pairs, sv, tv = _copy_data()
    ckpt, _ = fit(pairs, sv, tv, _cfg(sv, tv), TrainConfig(epochs=1, batch_size=6))
    with pytest.raises(FingerprintMismatch):
        fit(pairs, sv, tv, _cfg(sv, tv, system="RNN"), TrainConfig(epochs=2), resume=ckpt)


def test_checkpoint_round_trip_bitwise(tmp_path):
    pairs, sv, tv = _copy_data()
    ckpt, _ = fit(pairs, sv, tv, _cfg(sv, tv), TrainConfig(epochs=1, batch_size=4, warmup=10))
    save_checkpoint(tmp_path / "c.bin", ckpt)
    back = load_checkpoint(tmp_path / "c.bin", ckpt.fingerprint)
    assert back.step == ckpt.step and back.fingerprint == ckpt.fingerprint
    assert back.src_vocab == ckpt.src_vocab and back.best_loss == ckpt.best_loss
    for k in ckpt.model.params:
        assert np.array_equal(back.model.params[k], ckpt.model.params[k])
        assert np.array_equal(back.adam.m[k], ckpt.adam.m[k])
        assert np.array_equal(back.adam.v[k], ckpt.adam.v[k])
    save_checkpoint(tmp_path / "d.bin", back)
    assert (tmp_path / "c.bin").read_bytes() == (tmp_path / "d.bin").read_bytes()
    with pytest.raises(FingerprintMismatch):
        load_checkpoint(tmp_path / "c.bin", "0" * 16)
    (tmp_path / "bad.bin").write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.bin")


def test_fingerprint_tracks_shape_relevant_config():
    _, sv, tv = _copy_data()
    assert fingerprint(_cfg(sv, tv)) == fingerprint(_cfg(sv, tv))
    assert fingerprint(_cfg(sv, tv)) != fingerprint(_cfg(sv, tv, dim=8))
    assert fingerprint(_cfg(sv, tv)) != fingerprint(_cfg(sv, tv, system="NTM-RNN"))


def test_checkpoint_files_and_trace(tmp_path):
    pairs, sv, tv = _copy_data()
    _, trace = fit(pairs, sv, tv, _cfg(sv, tv),
                   TrainConfig(epochs=2, batch_size=4, warmup=10, checkpoint_every=2, out_dir=str(tmp_path)))
    names = sorted(p.name for p in tmp_path.iterdir())
    assert "checkpoint_last.bin" in names and "checkpoint_best.bin" in names
    assert "checkpoint_step2.bin" in names and "checkpoint_step6.bin" in names
    assert [r.step for r in trace] == list(range(1, 7))
    assert all(r.lrate > 0 and math.isfinite(r.loss) for r in trace)
    write_trace(tmp_path / "trace.csv", trace)
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "step,lrate,loss,tokens_per_sec" and len(lines) == 7


def test_post_clip_norm_bounded(monkeypatch):
    import mcenmt.training as tr
    seen = []
    real = tr.clip_global_norm

    def spy(grads, c=1.0):
        out, pre = real(grads, c)
        seen.append(math.sqrt(sum(float((g * g).sum()) for g in out.values())))
        return out, pre
    monkeypatch.setattr(tr, "clip_global_norm", spy)
    pairs, sv, tv = _copy_data()
    fit(pairs, sv, tv, _cfg(sv, tv), TrainConfig(epochs=2, batch_size=3, fixed_lr=0.05))
    assert seen and max(seen) <= 1.0 + 1e-9


def test_divergence_reports_last_good(tmp_path):
    pairs, sv, tv = _copy_data()
    cfg = _cfg(sv, tv)
    ckpt, _ = fit(pairs, sv, tv, cfg, TrainConfig(epochs=1, batch_size=4))
    ckpt.model.params["dec.out.b_o"][:] = np.nan
    with pytest.raises(TrainingDiverged) as err:
        fit(pairs, sv, tv, cfg, TrainConfig(epochs=2, batch_size=4), resume=ckpt)
    assert err.value.step == 4
