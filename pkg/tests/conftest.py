import pytest

from mcenmt.corpus import build_vocab, make_batch
from mcenmt.encoder import ChannelConfig
from mcenmt.model import Model, ModelConfig
from mcenmt.numerics import Rng


def toy_model(system="NTM-RNN-EMB", seed=0, dim=4, src_vocab=9, tgt_vocab=7, scale=0.5, **kw):
    channels = ChannelConfig.for_system(system, emb_dim=dim, hidden_dim=dim, mem_dim=dim)
    cfg = ModelConfig(channels, src_vocab, tgt_vocab, dropout=kw.pop("dropout", 0.0), init_scale=scale, **kw)
    return Model.init(cfg, Rng(seed))


@pytest.fixture
def pair_batch():
    pairs = [("a b c".split(), "x y".split()), ("c a".split(), "y y x".split())]
    sv = build_vocab([s for s, _ in pairs])
    tv = build_vocab([t for _, t in pairs])
    return make_batch(pairs, sv, tv), sv, tv


def zero_params(model):
    for v in model.params.values():
        v[...] = 0.0
    return model
