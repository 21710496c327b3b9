"""Primitives, backpropagation, gradient checking and checkpoints."""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

import autodiff as ad
from autodiff import (CheckpointError, Graph, NonFiniteError, ParameterRegistry, Primitive, ShapeError)


def quadratic_graph(dtype=np.float64):
    params = ParameterRegistry(dtype)
    rng = np.random.default_rng(3)
    params.add("w", rng.normal(size=(4, 3)))
    params.add("b", rng.normal(size=(3,)))

    def build(inputs, p, ctx):
        y = ad.dense(inputs["x"], p["w"], p["b"])
        return {"y": y, "loss": ad.reduce_mean(ad.multiply(y, y))}

    return Graph(build, params, {"x": (None, 4)}, name="quadratic")


def lstm_bce_graph():
    rng = np.random.default_rng(11)
    params = ParameterRegistry(np.float64)
    params.add("wx", rng.normal(scale=0.3, size=(3, 16)))
    params.add("wh", rng.normal(scale=0.3, size=(4, 16)))
    params.add("b", rng.normal(scale=0.1, size=(16,)))
    params.add("out_w", rng.normal(scale=0.3, size=(4, 1)))
    params.add("out_b", np.zeros(1))

    def build(inputs, p, ctx):
        x = inputs["x"]
        batch = x.shape[0]
        h = ad.constant(np.zeros((batch, 4)))
        c = ad.constant(np.zeros((batch, 4)))
        for step in range(2):
            state = ad.lstm_cell(ad.slice_tensor(x, (slice(None), step)), h, c, p["wx"], p["wh"], p["b"])
            h = ad.slice_tensor(state, (slice(None), slice(0, 4)))
            c = ad.slice_tensor(state, (slice(None), slice(4, 8)))
        logit = ad.reshape(ad.dense(h, p["out_w"], p["out_b"]), (batch,))
        return {"loss": ad.reduce_mean(ad.bce_logits(logit, inputs["t"]))}

    return Graph(build, params, {"x": (None, 2, 3), "t": (None,)}, name="lstm-bce")


def signed(rng, shape):
    """Entries at least 0.5 away from 0, clear of the relu/abs/max kinks."""
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.5, 1.5, size=shape)


def positive(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape)


def spread(rng, shape):
    """Distinct values at least 0.15 apart, so max-pool winners are unambiguous."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.2 + rng.uniform(0.0, 0.05, size=n)).reshape(shape)


def bce_case(rng):
    targets = ad.constant(rng.integers(0, 2, size=(4,)).astype(np.float64))
    return {"y": 2.0 * rng.normal(size=(4,))}, lambda p: ad.bce_logits(p["y"], targets)


def lstm_case(rng):
    shapes = {"x": (3, 2), "h": (3, 2), "c": (3, 2), "wx": (2, 8), "wh": (2, 8), "b": (8,)}
    values = {name: rng.normal(scale=0.5, size=shape) for name, shape in shapes.items()}
    return values, lambda p: ad.lstm_cell(p["x"], p["h"], p["c"], p["wx"], p["wh"], p["b"])


# primitive name -> rng -> (parameter values, function of the parameters)
PRIMITIVE_CASES = {
    "add": lambda rng: ({"a": rng.normal(size=(2, 3)), "b": rng.normal(size=(3,))},
                        lambda p: ad.add(p["a"], p["b"])),
    "sub": lambda rng: ({"a": rng.normal(size=(2, 3)), "b": rng.normal(size=(3,))},
                        lambda p: ad.sub(p["a"], p["b"])),
    "multiply": lambda rng: ({"a": rng.normal(size=(2, 3)), "b": rng.normal(size=(3,))},
                             lambda p: ad.multiply(p["a"], p["b"])),
    "scale": lambda rng: ({"x": rng.normal(size=(2, 3))}, lambda p: ad.scale(p["x"], 2.5)),
    "shift": lambda rng: ({"x": rng.normal(size=(2, 3))}, lambda p: ad.shift(p["x"], 0.7)),
    "matmul": lambda rng: ({"a": rng.normal(size=(2, 3)), "b": rng.normal(size=(3, 4))},
                           lambda p: ad.matmul(p["a"], p["b"])),
    "conv2d": lambda rng: ({"x": rng.normal(size=(1, 2, 4, 4)), "k": rng.normal(size=(2, 2, 3, 3))},
                           lambda p: ad.conv2d(p["x"], p["k"])),
    "maxpool2x2": lambda rng: ({"x": spread(rng, (1, 2, 4, 4))}, lambda p: ad.maxpool2x2(p["x"])),
    "relu": lambda rng: ({"x": signed(rng, (2, 3))}, lambda p: ad.relu(p["x"])),
    "sigmoid": lambda rng: ({"x": rng.normal(size=(2, 3))}, lambda p: ad.sigmoid(p["x"])),
    "tanh": lambda rng: ({"x": rng.normal(size=(2, 3))}, lambda p: ad.tanh(p["x"])),
    "softmax": lambda rng: ({"x": rng.normal(size=(2, 3))}, lambda p: ad.softmax(p["x"])),
    "exp": lambda rng: ({"x": rng.normal(size=(2, 3))}, lambda p: ad.exp(p["x"])),
    "log": lambda rng: ({"x": positive(rng, (2, 3))}, lambda p: ad.log(p["x"])),
    "abs": lambda rng: ({"x": signed(rng, (2, 3))}, lambda p: ad.absolute(p["x"])),
    "sqrt": lambda rng: ({"x": positive(rng, (2, 3))}, lambda p: ad.sqrt(p["x"])),
    "cos": lambda rng: ({"x": rng.normal(size=(2, 3))}, lambda p: ad.cos(p["x"])),
    "sin": lambda rng: ({"x": rng.normal(size=(2, 3))}, lambda p: ad.sin(p["x"])),
    "max_scalar": lambda rng: ({"x": signed(rng, (2, 3))}, lambda p: ad.maximum_scalar(p["x"], 0.1)),
    "sum": lambda rng: ({"x": rng.normal(size=(2, 3))}, lambda p: ad.reduce_sum(p["x"], axis=0)),
    "mean": lambda rng: ({"x": rng.normal(size=(2, 3))}, lambda p: ad.reduce_mean(p["x"], axis=0)),
    "concatenate": lambda rng: ({"a": rng.normal(size=(2, 3)), "b": rng.normal(size=(2, 2))},
                                lambda p: ad.concatenate([p["a"], p["b"]], axis=1)),
    "slice": lambda rng: ({"x": rng.normal(size=(2, 4))},
                          lambda p: ad.slice_tensor(p["x"], (slice(None), slice(1, 3)))),
    "reshape": lambda rng: ({"x": rng.normal(size=(2, 3))}, lambda p: ad.reshape(p["x"], (3, 2))),
    "lstm_cell": lstm_case,
    "bce_logits": bce_case,
}


def primitive_graph(values, fn):
    """Loss = sum(fn(params) * fixed random weights)."""
    params = ParameterRegistry(np.float64)
    for name, value in values.items():
        params.add(name, value)

    def build(inputs, p, ctx):
        out = fn(p)
        weights = np.random.default_rng(99).normal(size=out.shape)
        return {"loss": ad.reduce_sum(ad.multiply(out, ad.constant(weights)))}

    return Graph(build, params, name="primitive")


class TestPrimitives:
    def test_matmul_identity(self):
        a = ad.constant([[1.0, 2.0], [3.0, 4.0]])
        out = ad.matmul(a, ad.constant(np.eye(2)))
        assert_array_equal(out.numpy(), [[1.0, 2.0], [3.0, 4.0]])

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ad.matmul(ad.constant(np.ones((2, 3))), ad.constant(np.ones((2, 3))))

    def test_softmax_uniform(self):
        out = ad.softmax(ad.constant([0.0, 0.0, 0.0]))
        assert_allclose(out.numpy(), [1 / 3, 1 / 3, 1 / 3], atol=1e-12)

    def test_softmax_large_logits_stay_finite(self):
        out = ad.softmax(ad.constant([1000.0, 0.0]))
        assert_allclose(out.numpy(), [1.0, 0.0], atol=1e-12)

    def test_conv_ones_kernel_on_constant_image(self):
        c = 2.5
        x = ad.constant(np.full((1, 1, 6, 6), c))
        out = ad.conv2d(x, ad.constant(np.ones((1, 1, 3, 3)))).numpy()
        assert out.shape == (1, 1, 6, 6)
        assert_allclose(out[0, 0, 1:-1, 1:-1], 9 * c)
        assert out[0, 0, 0, 0] == pytest.approx(4 * c)

    def test_conv_even_kernel_rejected(self):
        with pytest.raises(ShapeError):
            ad.conv2d(ad.constant(np.ones((1, 1, 4, 4))), ad.constant(np.ones((1, 1, 2, 2))))

    def test_maxpool(self):
        x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
        out = ad.maxpool2x2(ad.constant(x)).numpy()
        assert_array_equal(out[0, 0], [[5, 7], [13, 15]])

    def test_per_channel_bias_broadcast(self):
        x = ad.constant(np.zeros((2, 3, 4, 4)))
        bias = ad.constant(np.array([1.0, 2.0, 3.0]).reshape(3, 1, 1))
        out = ad.add(x, bias).numpy()
        assert_array_equal(out[1, 2], np.full((4, 4), 3.0))

    def test_misaligned_operands_rejected(self):
        with pytest.raises(ShapeError):
            ad.add(ad.constant(np.zeros((2, 3))), ad.constant(np.zeros((2,))))

    def test_log_of_negative_is_non_finite(self):
        with pytest.raises(NonFiniteError):
            ad.log(ad.constant([-1.0]))

    def test_bce_matches_naive_form(self):
        y = np.linspace(-15, 15, 61)
        for t in (0.0, 1.0):
            stable = ad.bce_logits(ad.constant(y), ad.constant(np.full_like(y, t))).numpy()
            p = 1 / (1 + np.exp(-y))
            naive = -(t * np.log(p) + (1 - t) * np.log(1 - p))
            assert_allclose(stable, naive, atol=1e-9)


class TestBackpropagation:
    def test_square(self):
        params = ParameterRegistry(np.float64)
        x = params.add("x", [3.0])
        loss = ad.reduce_sum(ad.multiply(x, x))
        assert_allclose(ad.gradients(params, loss)["x"], [6.0])

    def test_relu_gradient(self):
        params = ParameterRegistry(np.float64)
        x = params.add("x", [-1.0, 2.0])
        loss = ad.reduce_sum(ad.relu(x))
        assert_array_equal(ad.gradients(params, loss)["x"], [0.0, 1.0])

    def test_bce_gradient_at_zero(self):
        params = ParameterRegistry(np.float64)
        y = params.add("y", [0.0])
        loss = ad.reduce_sum(ad.bce_logits(y, ad.constant([0.0])))
        assert_allclose(ad.gradients(params, loss)["y"], [0.5])

    def test_shared_node_accumulates(self):
        params = ParameterRegistry(np.float64)
        x = params.add("x", [2.0])
        y = ad.add(x, x)
        loss = ad.reduce_sum(ad.multiply(y, x))
        # loss = 2x^2
        assert_allclose(ad.gradients(params, loss)["x"], [8.0])

    def test_non_scalar_loss(self):
        params = ParameterRegistry(np.float64)
        x = params.add("x", [1.0, 2.0])
        with pytest.raises(ShapeError):
            ad.gradients(params, ad.multiply(x, x))

    def test_unreachable_parameter_gets_zero(self):
        params = ParameterRegistry(np.float64)
        x = params.add("x", [1.0])
        params.add("unused", np.ones((2, 2)))
        grads = ad.gradients(params, ad.reduce_sum(x))
        assert_array_equal(grads["unused"], np.zeros((2, 2)))

    def test_deep_chain(self):
        params = ParameterRegistry(np.float64)
        x = params.add("x", [1.0])
        y = x
        for _ in range(5000):
            y = ad.shift(y, 0.0)
        assert_allclose(ad.gradients(params, ad.reduce_sum(y))["x"], [1.0])

    def test_forward_checks_input_shapes(self):
        graph = quadratic_graph()
        with pytest.raises(ShapeError):
            ad.forward(graph, {"x": np.ones((2, 5))})
        with pytest.raises(ShapeError):
            ad.forward(graph, {})


class TestGradientCheck:
    def test_dense_quadratic(self):
        x = np.random.default_rng(0).normal(size=(5, 4))
        report = ad.finite_difference_check(quadratic_graph(), {"x": x}, tolerance=1e-6)
        assert report.passed, report.to_dict()
        assert report.checked_entries == 15

    def test_lstm_with_bce(self):
        rng = np.random.default_rng(1)
        inputs = {"x": rng.normal(size=(4, 2, 3)), "t": np.array([0.0, 1.0, 1.0, 0.0])}
        report = ad.finite_difference_check(lstm_bce_graph(), inputs, tolerance=1e-4)
        assert report.passed, report.to_dict()

    def test_float32_graph_is_checked_in_float64(self):
        x = np.random.default_rng(0).normal(size=(3, 4))
        report = ad.finite_difference_check(quadratic_graph(np.float32), {"x": x})
        assert report.passed

    def test_corrupted_backward_is_detected(self, monkeypatch):
        original = ad.PRIMITIVES["add"]
        doubled = Primitive(
            "add", original.forward,
            lambda g, out, a, b: tuple(None if r is None else 2 * r for r in original.backward(g, out, a, b)))
        monkeypatch.setitem(ad.PRIMITIVES, "add", doubled)
        x = np.random.default_rng(0).normal(size=(5, 4))
        report = ad.finite_difference_check(quadratic_graph(), {"x": x})
        assert not report.passed
        assert report.max_error > 1e-2

    def test_sampled_entries(self):
        x = np.random.default_rng(0).normal(size=(5, 4))
        report = ad.finite_difference_check(quadratic_graph(), {"x": x}, max_entries=2)
        assert report.checked_entries == 4

    def test_every_primitive_has_a_case(self):
        assert set(PRIMITIVE_CASES) == set(ad.PRIMITIVES)

    @pytest.mark.parametrize("op", sorted(PRIMITIVE_CASES))
    def test_primitive_at_random_points(self, op):
        for point in range(100):
            values, fn = PRIMITIVE_CASES[op](np.random.default_rng(point))
            report = ad.finite_difference_check(primitive_graph(values, fn), {}, tolerance=1e-4)
            assert report.passed, (point, report.to_dict())


class TestParameters:
    def test_duplicate_name(self):
        params = ParameterRegistry()
        params.add("w", [1.0])
        with pytest.raises(ValueError):
            params.add("w", [2.0])

    def test_state_dict_is_a_copy(self):
        params = ParameterRegistry()
        params.add("w", [1.0, 2.0])
        state = params.state_dict()
        params["w"].data[0] = 5.0
        assert state["w"][0] == 1.0
        params.load_state_dict(state)
        assert params["w"].data[0] == 1.0

    def test_load_state_dict_errors(self):
        params = ParameterRegistry()
        params.add("w", [1.0, 2.0])
        with pytest.raises(KeyError):
            params.load_state_dict({})
        with pytest.raises(ShapeError):
            params.load_state_dict({"w": np.zeros(3)})

    def test_count(self):
        assert quadratic_graph().parameters.count() == 15


class TestCheckpoints:
    def test_round_trip(self, tmp_path):
        params = quadratic_graph(np.float32).parameters
        path = tmp_path / "params.bin"
        ad.save_parameters(params, str(path))
        loaded = ad.load_parameters(str(path))
        assert loaded.names() == params.names()
        assert loaded.dtype == np.float32
        for name in params:
            assert_array_equal(loaded[name].data, params[name].data)
        ad.save_parameters(loaded, str(tmp_path / "again.bin"))
        assert (tmp_path / "again.bin").read_bytes() == path.read_bytes()

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "params.bin"
        ad.save_parameters(quadratic_graph().parameters, str(path))
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(CheckpointError):
            ad.load_parameters(str(path))

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            ad.load_parameters(str(tmp_path / "absent.bin"))
