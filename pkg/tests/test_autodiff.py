import json
import zlib

import numpy as np
import pytest

from portdfcl import autodiff as ad
from oracles import rel_err


def _square_graph():
    g = ad.Graph()
    x = g.param("x", np.array(3.0))
    g.output("y", x * x)
    return g


class TestForward:
    def test_square(self):
        g = _square_graph()
        out = g.forward({})
        np.testing.assert_allclose(out["y"], 9.0)

    def test_softmax_symmetric(self):
        g = ad.Graph()
        x = g.input("x")
        g.output("s", g.softmax(x))
        np.testing.assert_allclose(g.forward({"x": [0.0, 0.0]})["s"], [0.5, 0.5])

    def test_two_layer_mlp_by_hand(self):
        W1 = np.array([[1.0, 2.0], [0.0, -1.0]])
        b1 = np.array([0.5, -0.5])
        W2 = np.array([[1.0], [1.0]])
        g = ad.Graph()
        x = g.input("x")
        h = g.relu(g.affine(x, g.param("W1", W1), g.param("b1", b1)))
        g.output("y", g.matmul(h, g.param("W2", W2)))
        # x = [1, 1]: pre-activation [1.5, 0.5], output 2.0
        np.testing.assert_allclose(g.forward({"x": [1.0, 1.0]})["y"], [2.0])
        # x = [1, -1]: pre-activation [1.5, 2.5], output 4.0
        np.testing.assert_allclose(g.forward({"x": [1.0, -1.0]})["y"], [4.0])

    def test_unbound_input(self):
        g = ad.Graph()
        g.output("y", g.tanh(g.input("x")))
        with pytest.raises(ad.GraphError):
            g.forward({})

    def test_shape_mismatch(self):
        g = ad.Graph()
        g.output("y", g.matmul(g.input("a"), g.input("b")))
        with pytest.raises(ad.ShapeError):
            g.forward({"a": np.ones((2, 3)), "b": np.ones((2, 3))})

    def test_non_finite_reports_node(self):
        g = ad.Graph()
        x = g.input("x")
        y = g.log(x)
        g.output("y", y)
        with pytest.raises(ad.NonFiniteError) as err:
            g.forward({"x": [-1.0]})
        assert err.value.node_id == y.id


class TestBackward:
    def test_power_rule(self):
        g = _square_graph()
        g.forward({})
        np.testing.assert_allclose(g.backward("y")["x"], 6.0)

    def test_constant_scale_exact(self):
        g = ad.Graph()
        x = g.param("x", np.array(1.7))
        g.output("y", 2.5 * x)
        g.forward({})
        assert g.backward("y")["x"] == 2.5

    def test_unused_param_zero(self):
        g = _square_graph()
        g.param("unused", np.ones((2, 2)))
        g.forward({})
        np.testing.assert_array_equal(g.backward("y")["unused"], np.zeros((2, 2)))

    def test_backward_before_forward(self):
        g = _square_graph()
        with pytest.raises(ad.BackwardBeforeForward):
            g.backward("y")

    def test_non_scalar_loss(self):
        g = ad.Graph()
        g.output("y", g.tanh(g.param("w", np.ones(3))))
        g.forward({})
        with pytest.raises(ad.GraphError):
            g.backward("y")

    def test_mlp_finite_differences(self):
        rng = np.random.default_rng(0)
        g = ad.Graph()
        x = g.input("x")
        h = x
        for i, (a, b) in enumerate([(4, 6), (6, 5), (5, 1)]):
            h = g.affine(h, g.param(f"W{i}", rng.normal(size=(a, b))), g.param(f"b{i}", rng.normal(size=b)))
            if i < 2:
                h = g.tanh(h)
        g.output("loss", g.mean(h * h))
        err = ad.finite_difference_check(g, "loss", {"x": rng.normal(size=(3, 4))}, h=1e-5)
        assert err < 1e-4


def _op_graphs():
    """(name, builder(graph, x) -> scalar ref, input shape, input sampler)."""
    pos = lambda r, s: r.uniform(0.5, 2.0, s)
    nz = lambda r, s: r.choice([-1, 1], s) * r.uniform(0.2, 2.0, s)
    std = lambda r, s: r.normal(size=s)
    return [
        ("affine", lambda g, x: g.sum(g.affine(x, g.const(np.arange(6.0).reshape(3, 2) / 5), g.const([0.1, -0.2]))), (3,), std),
        ("tanh", lambda g, x: g.sum(g.tanh(x)), (5,), std),
        ("relu", lambda g, x: g.sum(g.relu(x) * x), (5,), nz),
        ("exp", lambda g, x: g.sum(g.exp(x)), (5,), std),
        ("log", lambda g, x: g.sum(g.log(x)), (5,), pos),
        ("abs", lambda g, x: g.sum(g.abs(x) * x), (5,), nz),
        ("smooth_sign", lambda g, x: g.sum(g.smooth_sign(x, 0.5)), (5,), std),
        ("softmax", lambda g, x: g.sum(g.softmax(x) * g.const(np.arange(5.0))), (5,), std),
        ("concat", lambda g, x: g.sum(g.concat([x, x * x]) * g.const(np.arange(10.0))), (5,), std),
        ("slice", lambda g, x: g.sum(x[1:4] * x[0:3]), (5,), std),
        ("mean", lambda g, x: g.mean(g.reshape(x, (2, 3)) * g.const(np.ones((2, 3))), axis=None), (6,), std),
        ("sum_axis", lambda g, x: g.sum(g.sum(g.reshape(x, (2, 3)), axis=0) * g.const([1.0, 2.0, 3.0])), (6,), std),
        ("mul", lambda g, x: g.sum(x * x * g.const(2.0)), (5,), std),
        ("attention", lambda g, x: g.sum(g.attention(g.reshape(x, (3, 2)), g.reshape(x, (3, 2)) * 0.5,
                                                      g.reshape(x, (3, 2)) * g.reshape(x, (3, 2)))), (6,), std),
    ]


@pytest.mark.parametrize("name,build,shape,sample", _op_graphs(), ids=[o[0] for o in _op_graphs()])
def test_builtin_gradients_random_points(name, build, shape, sample):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    g = ad.Graph()
    x = g.param("x", np.zeros(shape))
    g.output("f", build(g, x))
    worst = 0.0
    for _ in range(100):
        g.params["x"][...] = sample(rng, shape)
        worst = max(worst, ad.finite_difference_check(g, "f", {}, h=1e-5))
    assert worst < 1e-4, name


def test_linearity_of_backward():
    rng = np.random.default_rng(3)
    W = rng.normal(size=(4, 3))
    g = ad.Graph()
    x = g.input("x")
    w = g.param("W", W)
    f = g.sum(g.tanh(g.matmul(x, w)))
    h = g.mean(g.exp(g.matmul(x, w) * 0.1))
    a, b = 1.7, -0.6
    combo = g.output("c", g.add(g.scale(f, a), g.scale(h, b)))
    inputs = {"x": rng.normal(size=(2, 4))}
    g.forward(inputs)
    gc = g.backward(combo)["W"]
    gf = g.backward(f)["W"]
    gh = g.backward(h)["W"]
    np.testing.assert_allclose(gc, a * gf + b * gh, rtol=0, atol=1e-10)


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(11)
        g = ad.Graph()
        x = g.input("x")
        y = g.attention(g.tanh(g.affine(x, g.param("W", rng.normal(size=(3, 4))), g.param("b", np.zeros(4)))),
                        x @ g.param("K", rng.normal(size=(3, 4))), x)
        g.output("l", g.sum(y * y))
        g.forward({"x": rng.normal(size=(5, 3))})
        return g.backward("l")

    a, b = run(), run()
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()


class TestCustomNodes:
    def test_identity_passthrough(self):
        ad.register_custom_node("test_identity", lambda x: (x.copy(), None), lambda ctx, g: (g,))
        g = ad.Graph()
        x = g.param("x", np.array([1.0, -2.0, 3.0]))
        g.output("l", g.sum(g.custom("test_identity", x) * g.const([1.0, 2.0, 3.0])))
        g.forward({})
        np.testing.assert_array_equal(g.backward("l")["x"], [1.0, 2.0, 3.0])

    def test_sum_broadcasts_seed(self):
        ad.register_custom_node("test_sum", lambda x: (np.sum(x), x.shape),
                                lambda shape, g: (np.full(shape, float(g)),))
        g = ad.Graph()
        x = g.param("x", np.ones((2, 3)))
        g.output("l", g.custom("test_sum", x))
        g.forward({})
        np.testing.assert_array_equal(g.backward("l", seed=2.5)["x"], np.full((2, 3), 2.5))

    def test_duplicate_name_rejected(self):
        ad.register_custom_node("test_dup", lambda x: (x, None), lambda c, g: (g,))
        with pytest.raises(ValueError):
            ad.register_custom_node("test_dup", lambda x: (x, None), lambda c, g: (g,))


def test_checkpoint_roundtrip(tmp_path):
    params = {"W": np.arange(6.0).reshape(2, 3), "b": np.array([0.25])}
    path = tmp_path / "ckpt.json"
    ad.save_params(params, path)
    doc = json.loads(path.read_text())
    assert doc["format_version"] == ad.FORMAT_VERSION
    assert doc["params"]["W"]["shape"] == [2, 3]
    back = ad.load_params(path)
    for k in params:
        np.testing.assert_array_equal(back[k], params[k])


def test_checkpoint_version_rejected():
    with pytest.raises(ValueError):
        ad.params_from_json({"format_version": 99, "params": {}})


def test_rel_err_helper_sanity():
    assert rel_err([1.0], [1.0]) == 0.0
