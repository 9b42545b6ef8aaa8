from __future__ import annotations

import numpy as np
import pytest

from taltransfer import numerics as nx
from taltransfer.data import N_WEATHER
from taltransfer.models import (
    EMBED_DIM,
    N_OUT,
    ModelError,
    as_tensors,
    encode,
    init_model,
    load_bundle,
    predict_embedding,
    predict_multihead,
    predict_task,
    save_bundle,
)

TASKS = ("a", "b", "c")


@pytest.fixture
def mh():
    return init_model("multihead", TASKS, 8, 12, rng=0, output_bias=np.arange(7.0))


@pytest.fixture
def emb():
    return init_model("embedding", TASKS, 8, 12, rng=0)


def test_parameter_layout(mh, emb):
    assert mh.arrays["gru.W"].shape == (12, 36) and mh.arrays["gru.U"].shape == (12, 36)
    assert mh.arrays["fc1.W"].shape == (N_WEATHER, 8)
    assert emb.arrays["fc1.W"].shape == (N_WEATHER + EMBED_DIM, 8)
    assert {k for k in mh.arrays if k.startswith("head.")} == {f"head.{t}.{p}" for t in TASKS for p in "Wb"}
    assert {k for k in emb.arrays if k.startswith("head.")} == {"head.W", "head.b"}
    assert emb.embeddings().shape == (3, EMBED_DIM)
    assert np.abs(emb.embeddings()).max() <= 0.1
    lim = np.sqrt(6 / (N_WEATHER + 8))
    assert np.abs(mh.arrays["fc1.W"]).max() <= lim
    np.testing.assert_array_equal(mh.arrays["head.b.b"], np.arange(7.0))


def test_output_shapes(mh, emb, rng):
    x = rng.normal(size=(3, N_WEATHER))
    assert predict_multihead(mh, "a", x).shape == (3, N_OUT)
    assert predict_embedding(emb, rng.normal(size=EMBED_DIM), x).shape == (3, N_OUT)
    assert predict_task(emb, "b", x[:1]).shape == (1, N_OUT)
    assert encode(mh, x[:1]).shape == (1, 8)


def test_causality(mh, emb, rng):
    x = rng.normal(size=(30, N_WEATHER))
    full = predict_multihead(mh, "b", x)
    for t in range(1, 30):
        assert np.array_equal(predict_multihead(mh, "b", x[:t]), full[:t])
    e = rng.normal(size=EMBED_DIM)
    full = predict_embedding(emb, e, x)
    assert np.array_equal(predict_embedding(emb, e, x[:11]), full[:11])


def test_gru_hidden_bounded(mh, rng):
    x = rng.normal(size=(2, 40, 12))
    h = nx.gru_scan(x, mh.arrays["gru.W"], mh.arrays["gru.U"], mh.arrays["gru.b"]).value
    assert np.all(np.abs(h) < 1)
    # saturated gates may round tanh to exactly 1.0 in double precision; never beyond
    h = nx.gru_scan(x * 50, mh.arrays["gru.W"] * 5, mh.arrays["gru.U"] * 5, mh.arrays["gru.b"]).value
    assert np.all(np.abs(h) <= 1)


def test_backbone_shared_across_heads(mh, rng):
    x = rng.normal(size=(10, N_WEATHER))
    feats = encode(mh, x)
    for t in TASKS:
        expected = feats @ mh.arrays[f"head.{t}.W"] + mh.arrays[f"head.{t}.b"]
        np.testing.assert_allclose(predict_multihead(mh, t, x), expected, rtol=0, atol=1e-12)


def test_zero_head_gives_bias(mh, rng):
    m = mh.copy()
    m.arrays["head.a.W"][:] = 0
    out = predict_multihead(m, "a", rng.normal(size=(5, N_WEATHER)))
    np.testing.assert_array_equal(out, np.tile(np.arange(7.0), (5, 1)))


def test_embedding_accepts_any_vector(emb, rng):
    x = rng.normal(size=(6, N_WEATHER))
    outs = [predict_embedding(emb, rng.normal(scale=s, size=EMBED_DIM), x) for s in (0.01, 1.0, 50.0)]
    assert all(np.isfinite(o).all() for o in outs)
    assert not np.allclose(outs[0], outs[1])
    assert np.array_equal(predict_task(emb, "c", x), predict_embedding(emb, emb.embedding("c"), x))


def test_errors(mh, emb, rng):
    x = rng.normal(size=(4, N_WEATHER))
    with pytest.raises(ModelError):
        predict_multihead(mh, "zzz", x)
    with pytest.raises(ModelError):
        predict_embedding(emb, np.zeros(5), x)
    with pytest.raises(ModelError):
        predict_multihead(mh, "a", rng.normal(size=(4, 3)))
    with pytest.raises(ModelError):
        predict_multihead(emb, "a", x)
    with pytest.raises(ModelError):
        init_model("transformer", TASKS)


def test_bundle_round_trip(tmp_path, emb_model, mh_model):
    for m in (emb_model, mh_model):
        path = tmp_path / f"{m.variant}.npz"
        save_bundle(m, path)
        back = load_bundle(path)
        assert back.fingerprint() == m.fingerprint()
        assert back.tasks == m.tasks and back.variant == m.variant
        assert back.meta["train_config"] == m.meta["train_config"]
        assert "mse_reduction" in back.meta["train_config"]
        np.testing.assert_array_equal(back.feature_stats.mean, m.feature_stats.mean)
        for k in m.arrays:
            assert np.array_equal(back.arrays[k], m.arrays[k])


def test_bundle_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.npz"
    np.savez(p, __header__=np.frombuffer(b'{"format": "other"}', dtype=np.uint8))
    with pytest.raises(ModelError):
        load_bundle(p)


def test_fingerprint_tracks_values(emb):
    m = emb.copy()
    assert m.fingerprint() == emb.fingerprint()
    m.arrays["fc1.b"][0] += 1e-12
    assert m.fingerprint() != emb.fingerprint()


def test_as_tensors_trainable(emb):
    p = as_tensors(emb, trainable=True, keys=["fc1.W"])
    assert p["fc1.W"].requires_grad and list(p) == ["fc1.W"]
