from __future__ import annotations

import numpy as np
import pytest

from portdfcl.data import generate_synthetic
from portdfcl.forecaster import (FeatureBundle, ForecasterPair, ForecastModel, LayoutMismatch, ModelConfig,
                                 Normalizer, build_features, context_dim, mae, mse_loss, targets)
from portdfcl.port_model import load_fixture


@pytest.fixture(scope="module")
def setup():
    ds = generate_synthetic(0, 30)
    task = load_fixture(1)
    days = np.arange(7, 12)
    return ds, task, days


def small(kind, seed=0, T=6):
    return ForecastModel(ModelConfig(kind, T=T, embed=5, attn=4, hidden=7, seed=seed))


def bundle(kind, n=3, J=4, seed=0):
    rng = np.random.default_rng(seed)
    return FeatureBundle(kind, rng.normal(size=(n, context_dim(kind))), rng.uniform(0, 1, (J, 10)), np.arange(n))


def test_feature_layout(setup):
    ds, task, days = setup
    fp = build_features(ds, days, task, "price")
    fl = build_features(ds, days, task, "load")
    assert fp.context.shape == (5, 127) and fl.context.shape == (5, 151)
    assert fp.vessels.shape == (9, 10)
    s = 24 * 7
    np.testing.assert_array_equal(fp.context[0, :72], ds.price[s - 72:s])
    np.testing.assert_array_equal(fp.context[0, 72:96], ds.price[s - 168:s - 144])
    np.testing.assert_array_equal(fl.context[0, :72], ds.net_load[s - 72:s])
    assert fp.context[0, 96] == 1 and fp.context[0, 96:120].sum() == 1
    assert fp.context[:, 120:127].sum() == 5
    # day 7 from a Monday start is a Monday
    assert fp.context[0, 120] == 1
    np.testing.assert_array_equal(fl.context[0, 127:], ds.irradiance[s:s + 24] / 1000)
    y = targets(ds, days, 32, "load")
    np.testing.assert_array_equal(y[0], ds.net_load[s:s + 32])
    with pytest.raises(IndexError):
        build_features(ds, [6], task, "price")


def test_output_shape_and_finite():
    m = ForecastModel(ModelConfig("load", T=32))
    y = m.predict(bundle("load"))
    assert y.shape == (3, 32) and np.all(np.isfinite(y))


def test_permutation_invariance():
    rng = np.random.default_rng(1)
    m = ForecastModel(ModelConfig("price", T=32, seed=3))
    for _ in range(10):
        b = bundle("price", J=int(rng.integers(2, 12)), seed=int(rng.integers(1 << 30)))
        perm = rng.permutation(b.vessels.shape[0])
        y0 = m.predict(b)
        y1 = m.predict(FeatureBundle("price", b.context, b.vessels[perm], b.days))
        assert np.max(np.abs(y0 - y1)) <= 1e-12


def test_zero_vessels_uses_null_embedding():
    m = small("price")
    b = bundle("price", J=0)
    y = m.predict(b)
    assert y.shape == (3, 6)
    m2 = small("price")
    m2.params["null"][...] += 0.5
    assert not np.allclose(m2.predict(b), y)
    off = ForecastModel(ModelConfig("price", T=6, embed=5, attn=4, hidden=7, use_vessels=False))
    np.testing.assert_allclose(off.predict(bundle("price", J=4)), off.predict(b))


@pytest.mark.parametrize("kind,J", [("price", 3), ("load", 2), ("price", 0)])
def test_gradient_of_mean_output_matches_fd(kind, J):
    m = small(kind, seed=2)
    m.set_normalizer(Normalizer(np.zeros(context_dim(kind)), np.ones(context_dim(kind)), 1.5, 2.0))
    b = bundle(kind, n=2, J=J, seed=5)
    y = m.predict(b)
    g = m.flatten(m.vjp(np.full_like(y, 1.0 / y.size)))
    theta = m.flatten()
    h = 1e-6
    floor = 1e-3 * np.abs(g).max()
    for i in range(theta.size):
        if J == 0 and i < m.param_slices()["null"].start:
            assert g[i] == 0
            continue
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        m.set_flat(tp)
        fp = m.predict(b).mean()
        m.set_flat(tm)
        fm = m.predict(b).mean()
        fd = (fp - fm) / (2 * h)
        assert abs(fd - g[i]) <= 1e-4 * max(abs(fd), abs(g[i]), floor), (i, fd, g[i])
    m.set_flat(theta)


def test_mse_examples():
    y = np.arange(6.0)
    assert mse_loss(y, y) == 0.0
    assert mse_loss(y + 1, y) == 1.0
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    hand = sum((a[i, j] - b[i, j]) ** 2 for i in range(3) for j in range(4)) / 12
    assert mse_loss(a, b) == pytest.approx(hand, rel=1e-14)
    assert mae(a, b) == pytest.approx(np.abs(a - b).sum() / 12, rel=1e-14)
    with pytest.raises(ValueError):
        mse_loss(a, b[:2])


def test_mse_grad_matches_fd():
    m = small("load", seed=4)
    b = bundle("load", n=2, J=2)
    y = np.random.default_rng(3).normal(size=(2, 6))
    _, g = m.mse_grad(b, y)
    g = m.flatten(g)
    theta = m.flatten()
    rng = np.random.default_rng(0)
    for i in rng.choice(theta.size, 25, replace=False):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += 1e-6
        tm[i] -= 1e-6
        m.set_flat(tp)
        fp = mse_loss(m.predict(b), y)
        m.set_flat(tm)
        fm = mse_loss(m.predict(b), y)
        fd = (fp - fm) / 2e-6
        assert abs(fd - g[i]) <= 1e-4 * max(abs(fd), abs(g[i]), 1e-6)
    m.set_flat(theta)


def test_flatten_round_trip_and_head_mask():
    m = small("price")
    theta = m.flatten()
    rng = np.random.default_rng(0)
    new = rng.normal(size=theta.size)
    m.set_flat(new)
    np.testing.assert_array_equal(m.flatten(), new)
    parts = m.unflatten(new)
    np.testing.assert_array_equal(np.concatenate([parts[n].ravel() for n in m.names]), new)
    mask = m.head_mask()
    assert mask.sum() == 7 * 6 + 6
    assert mask[m.param_slices()["W3"]].all() and not mask[m.param_slices()["W2"]].any()
    with pytest.raises(ValueError):
        m.set_flat(new[:-1])


def test_determinism_and_seed():
    a, b = small("price", seed=9), small("price", seed=9)
    np.testing.assert_array_equal(a.flatten(), b.flatten())
    assert not np.array_equal(a.flatten(), small("price", seed=10).flatten())
    x = bundle("price")
    np.testing.assert_array_equal(a.predict(x), b.predict(x))


def test_uniform_init_bounds():
    m = ForecastModel(ModelConfig("load"))
    assert np.abs(m.params["W1c"]).max() <= 1 / np.sqrt(151 + 32)
    assert np.abs(m.params["enc_W"]).max() <= 1 / np.sqrt(10)


def test_checkpoint_round_trip(tmp_path):
    pair = ForecasterPair.create(T=8, seed=1)
    pair.price.set_normalizer(Normalizer.fit(np.random.default_rng(0).normal(size=(5, 127)), np.arange(5.0)))
    pair.save(tmp_path / "m.json")
    back = ForecasterPair.load(tmp_path / "m.json")
    np.testing.assert_array_equal(back.flatten(), pair.flatten())
    x = bundle("price")
    np.testing.assert_array_equal(back.price.predict(x), pair.price.predict(x))
    d = pair.price.to_dict()
    d["format_version"] = 99
    with pytest.raises(ValueError):
        ForecastModel.from_dict(d)


def test_layout_mismatch():
    m = small("price")
    with pytest.raises(LayoutMismatch):
        m.predict(bundle("load"))
    with pytest.raises(LayoutMismatch):
        FeatureBundle("price", np.zeros((1, 100)), np.zeros((0, 10)), np.arange(1))
    b = bundle("price")
    b.version = 2
    with pytest.raises(LayoutMismatch):
        m.predict(b)


def test_copy_is_independent():
    m = small("price")
    c = m.copy()
    c.params["W3"][...] = 0
    assert not np.all(m.params["W3"] == 0)
