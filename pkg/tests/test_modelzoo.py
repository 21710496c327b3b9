"""Candidate models: shapes, parameter counts, initialization and checkpoints."""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

import autodiff as ad
from autodiff import ForwardContext, Graph, ShapeError
from datagen import normalize_features
from losses import loss_task1, loss_task2_logits
from modelzoo import (ModelSpec, base_specs, build_model, load_model, replicate_models, save_model,
                      system_mass)


def task1_inputs(n=3, seed=0):
    rng = np.random.default_rng(seed)
    jets = rng.normal(size=(n, 2, 4))
    jets[..., 0] = np.log(0.1 + rng.uniform(10, 60, size=(n, 2)))
    return {"jets": jets, "images": rng.uniform(0, 1, size=(n, 2, 3, 16, 16))}


def task2_inputs(n=4, seed=0):
    rng = np.random.default_rng(seed)
    taus = rng.normal(scale=0.5, size=(n, 2, 3))
    taus[..., 0] = np.log(0.1 + rng.uniform(10, 60, size=(n, 2)))
    return {"taus": taus}


def model(task, kind, dtype=np.float64, seed=5):
    return build_model(ModelSpec(task=task, kind=kind, init_seed=seed), dtype)


def randomize_output(m, scale=0.3):
    rng = np.random.default_rng(99)
    for name, tensor in m.parameters.items():
        if "/out/" in name or "/residual/" in name:
            tensor.data[...] = rng.normal(scale=scale, size=tensor.shape)


class TestSpecs:
    def test_kind_must_fit_task(self):
        with pytest.raises(ValueError):
            ModelSpec(task=1, kind="MLP2")
        with pytest.raises(ValueError):
            ModelSpec(task=3, kind="MLP1")

    def test_base_specs(self):
        assert [s.kind for s in base_specs(1)] == ["MLP1", "CNN1", "SF"]
        assert [s.kind for s in base_specs(2, include_dummies=True)] == ["MLP2", "LSTM2", "MASS", "ZEROS", "NOISE"]
        assert len({s.init_seed for s in base_specs(1, seed=0) + base_specs(1, seed=1)}) == 6

    def test_model_id(self):
        assert ModelSpec(task=2, kind="LSTM2", replica=3).model_id == "t2-LSTM2-r3"


class TestParameterCounts:
    @pytest.mark.parametrize("task,kind,count", [
        (1, "CNN1", 42531),
        (1, "MLP1", 111299),
        (1, "SF", 6),
        (2, "MLP2", 2369),
        (2, "LSTM2", 21281),
        (2, "MASS", 4353),
        (1, "ZEROS", 0),
        (2, "NOISE", 0),
    ])
    def test_count(self, task, kind, count):
        assert model(task, kind).parameter_count() == count

    def test_cnn_smaller_than_mlp(self):
        assert model(1, "CNN1").parameter_count() < model(1, "MLP1").parameter_count()


class TestTask1:
    @pytest.mark.parametrize("kind", ["MLP1", "CNN1", "SF"])
    def test_initial_output_is_jet(self, kind):
        inputs = task1_inputs()
        out = model(1, kind)(inputs).numpy()
        assert out.shape == (3, 2, 3)
        assert_allclose(out, inputs["jets"][..., :3], atol=1e-12)

    def test_zero_images(self):
        inputs = task1_inputs()
        inputs["images"] = np.zeros_like(inputs["images"])
        assert_allclose(model(1, "CNN1")(inputs).numpy(), inputs["jets"][..., :3], atol=1e-12)

    def test_scale_factor(self):
        sf = model(1, "SF")
        sf.parameters["t1-SF-r0/a"].data[...] = [2.0, 1.0, 1.0]
        jets = np.zeros((1, 2, 4))
        jets[0, 0, :3] = [1.0, 0.5, -1.0]
        out = sf({"jets": jets, "images": np.zeros((1, 2, 3, 16, 16))}).numpy()
        assert_allclose(out[0, 0], [2.0, 0.5, -1.0])

    def test_candidates_share_one_calibration(self):
        inputs = task1_inputs(n=1)
        swapped = {"jets": inputs["jets"][:, ::-1].copy(), "images": inputs["images"][:, ::-1].copy()}
        m = model(1, "MLP1")
        randomize_output(m)
        assert_allclose(m(swapped).numpy()[0, 0], m(inputs).numpy()[0, 1], atol=1e-10)

    def test_shape_mismatch(self):
        inputs = task1_inputs()
        inputs["images"] = inputs["images"][..., :8]
        with pytest.raises(ShapeError):
            model(1, "CNN1")(inputs)

    def test_cnn_gradient_check(self):
        m = model(1, "CNN1")
        randomize_output(m, scale=0.05)
        inputs = task1_inputs(n=2)
        truth = inputs["jets"][..., :3] + 0.05

        def build(x, params, ctx):
            return {"loss": loss_task1(m.forward(x, params, ctx), truth)}

        report = ad.finite_difference_check(Graph(build, m.parameters, name="cnn"), inputs,
                                             max_entries=8, step=1e-6)
        assert report.passed, report.to_dict()


class TestTask2:
    @pytest.mark.parametrize("kind", ["MLP2", "LSTM2", "MASS"])
    def test_zero_output_layer_gives_zero_logit(self, kind):
        out = model(2, kind)(task2_inputs()).numpy()
        assert out.shape == (4,)
        assert_array_equal(out, np.zeros(4))

    def test_deterministic_init(self):
        a, b = model(2, "MLP2"), model(2, "MLP2")
        for name in a.parameters:
            assert_array_equal(a.parameters[name].data, b.parameters[name].data)

    def test_lstm_is_order_sensitive(self):
        m = model(2, "LSTM2")
        randomize_output(m)
        inputs = task2_inputs()
        flipped = {"taus": inputs["taus"][:, ::-1].copy()}
        assert not np.allclose(m(inputs).numpy(), m(flipped).numpy())

    def test_lstm_needs_two_steps(self):
        with pytest.raises(ShapeError):
            model(2, "LSTM2")({"taus": np.zeros((2, 3, 3))})

    @pytest.mark.parametrize("kind", ["MLP2", "LSTM2", "MASS"])
    def test_gradient_check(self, kind):
        m = model(2, kind)
        randomize_output(m)
        inputs = task2_inputs()
        targets = np.array([1.0, 0.0, 1.0, 0.0])

        def build(x, params, ctx):
            return {"loss": loss_task2_logits(m.forward(x, params, ctx), targets)}

        report = ad.finite_difference_check(Graph(build, m.parameters, name=kind), inputs, max_entries=16)
        assert report.passed, report.to_dict()


class TestSystemMass:
    def test_higgs_truth_pair(self, small_events):
        event = next(e for e in small_events if e.label == 1)
        truth = normalize_features(event)["truth"][None]
        assert system_mass(ad.constant(truth)).item() == pytest.approx(1.25, abs=1e-4)

    def test_common_rotation(self, small_events):
        truth = normalize_features(small_events[2])["truth"][None]
        turned = truth.copy()
        turned[..., 2] = np.mod(turned[..., 2] + 0.7 + np.pi, 2 * np.pi) - np.pi
        assert system_mass(ad.constant(turned)).item() == pytest.approx(
            system_mass(ad.constant(truth)).item(), rel=1e-9)


class TestDummies:
    def test_zeros(self):
        zeros = model(1, "ZEROS")
        assert_array_equal(zeros(task1_inputs()).numpy(), np.zeros((3, 2, 3)))

    def test_zeros_pass_no_gradient(self):
        sf = model(1, "SF")
        zeros = model(2, "ZEROS")
        ctx = ForwardContext()
        taus = sf.forward({k: ad.constant(v) for k, v in task1_inputs().items()}, sf.parameters, ctx)
        loss = loss_task2_logits(zeros.forward({"taus": taus}, zeros.parameters, ctx), np.ones(3))
        for grad in ad.gradients(sf.parameters, loss).values():
            assert_array_equal(grad, np.zeros_like(grad))

    def test_noise_moments(self):
        noise = model(2, "NOISE")
        ctx = ForwardContext(rng=np.random.default_rng(0))
        draws = noise.forward({"taus": ad.constant(np.zeros((100000, 2, 3)))}, noise.parameters, ctx).numpy()
        assert abs(draws.mean()) < 0.01
        assert abs(draws.var() - 1.0) < 0.02

    def test_noise_differs_between_calls(self):
        noise = model(2, "NOISE")
        ctx = ForwardContext(rng=np.random.default_rng(0))
        inputs = {"taus": ad.constant(np.zeros((5, 2, 3)))}
        assert not np.array_equal(noise.forward(inputs, noise.parameters, ctx).numpy(),
                                  noise.forward(inputs, noise.parameters, ctx).numpy())


class TestReplicas:
    def test_single_replica_is_identity(self):
        specs = base_specs(2)
        assert replicate_models(specs, 1) == specs

    def test_three_replicas(self):
        specs = replicate_models(base_specs(1), 3)
        assert len(specs) == 9
        assert len({s.model_id for s in specs}) == 9
        assert len({s.init_seed for s in specs}) == 9
        models = [build_model(s) for s in specs]
        storages = [id(t.data) for m in models for t in m.parameters.tensors()]
        assert len(storages) == len(set(storages))

    def test_replicas_differ(self):
        a, b = [build_model(s, np.float64) for s in replicate_models(base_specs(2)[:1], 2)]
        inputs = {k: ad.constant(v) for k, v in task2_inputs().items()}
        assert not np.allclose(a.features(inputs, a.parameters, ForwardContext()).numpy(),
                               b.features(inputs, b.parameters, ForwardContext()).numpy())

    def test_invalid_count(self):
        with pytest.raises(ValueError):
            replicate_models(base_specs(1), 0)


class TestCheckpoints:
    def test_save_load(self, tmp_path):
        m = model(2, "MASS", dtype=np.float32)
        randomize_output(m)
        save_model(m, str(tmp_path))
        again = load_model(str(tmp_path), m.model_id)
        assert again.spec == m.spec
        inputs = task2_inputs()
        assert_array_equal(again(inputs).numpy(), m(inputs).numpy())

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_model(str(tmp_path), "t1-SF-r0")
