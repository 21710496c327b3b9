"""Training loop, DARTS, SPOS and grid search on the small dataset."""

import numpy as np
import pytest
from scipy.stats import chisquare

from autodiff import ParameterRegistry
from dataset_store import Batch
from modelzoo import ModelSpec, base_specs, build_model, replicate_models
from pipeline import (SelectionConfig, SupernetState, argmax_index, darts_search, evaluate_loss,
                      grid_search, pair_loss_fn, post_train, pretrain_states, sample_path,
                      select_argmax, softmax, spos_search, task_loss_fn, train_models)


def quick_config(**overrides):
    settings = dict(v1=0.5, batch_size=40, max_epochs=3, patience=1, search_patience=2, seed=0)
    settings.update(overrides)
    return SelectionConfig(**settings)


def models_of(specs):
    return [build_model(s) for s in specs]


def identity_batch(n, seed):
    """Jets whose calibrated kinematics equal the truth."""
    rng = np.random.default_rng(seed)
    jets = np.zeros((n, 2, 4), dtype=np.float32)
    jets[..., 0] = rng.uniform(-1.0, 4.0, size=(n, 2))
    jets[..., 1] = rng.uniform(-2.0, 2.0, size=(n, 2))
    jets[..., 2] = rng.uniform(-3.0, 3.0, size=(n, 2))
    jets[..., 3] = 1.0
    return Batch(jets=jets, images=np.zeros((n, 2, 3, 16, 16), dtype=np.float32),
                 truth=jets[..., :3].copy(), labels=(np.arange(n) % 2).astype(np.float32))


class TestConfig:
    def test_task_weights(self):
        cfg = SelectionConfig(v1=0.9)
        assert sum(cfg.weights) == pytest.approx(1.0)
        assert cfg.v2 == pytest.approx(0.1)

    @pytest.mark.parametrize("settings", [
        {"v1": 1.5}, {"v1": -0.1}, {"epsilon": -1.0}, {"patience": 100}, {"batch_size": 0},
    ])
    def test_invalid(self, settings):
        with pytest.raises(ValueError):
            SelectionConfig(**settings)

    def test_from_dict_ignores_other_keys(self):
        cfg = SelectionConfig.from_dict({"v1": 0.1, "method": "darts"})
        assert cfg.v1 == 0.1


class TestSelection:
    def test_softmax_sums_to_one(self):
        assert softmax(np.array([0.3, -2.0, 5.0])).sum() == pytest.approx(1.0, abs=1e-12)

    def test_shift_invariance(self):
        alpha = np.array([0.1, 0.7, 0.2, -3.0, -3.0])
        np.testing.assert_allclose(softmax(alpha + 12.5), softmax(alpha), atol=1e-12)
        assert argmax_index(alpha + 12.5) == argmax_index(alpha) == 1

    def test_ties_go_to_lowest_index(self):
        assert argmax_index([0.2, 0.2, 0.1]) == 0
        assert argmax_index([-5.0, 3.0, 0.0]) == 1

    def test_empty(self):
        with pytest.raises(ValueError):
            argmax_index([])

    def test_select_argmax(self):
        combo = select_argmax({1: np.array([0.1, 0.7, 0.2, -3, -3]), 2: np.array([1.0, 0.0])},
                              {1: ["MLP", "CNN", "SF", "Zeros", "Noise"], 2: ["MLP2", "LSTM2"]})
        assert (combo.task1, combo.task2, combo.provenance) == ("CNN", "MLP2", "darts")


class TestTraining:
    def test_scale_factor_learns_identity(self):
        sf = build_model(ModelSpec(task=1, kind="SF"))
        sf.parameters["t1-SF-r0/a"].data[...] = [1.2, 0.8, 1.1]
        sf.parameters["t1-SF-r0/b"].data[...] = [-0.1, 0.1, 0.05]
        cfg = SelectionConfig(lr=0.01, batch_size=64, max_epochs=200, patience=30, search_patience=30)
        train_models([sf], task_loss_fn(sf), identity_batch(640, 0), identity_batch(128, 1),
                     cfg, np.random.default_rng(0))
        np.testing.assert_allclose(sf.parameters["t1-SF-r0/a"].data, 1.0, atol=0.05)
        np.testing.assert_allclose(sf.parameters["t1-SF-r0/b"].data, 0.0, atol=0.05)

    def test_best_state_is_restored(self, small_dataset):
        mlp = build_model(ModelSpec(task=2, kind="MLP2", init_seed=2))
        cfg = quick_config(max_epochs=5, patience=2)
        valid = small_dataset.split("valid")
        report = train_models([mlp], task_loss_fn(mlp), small_dataset.split("train"), valid,
                              cfg, np.random.default_rng(0))
        assert report.stop_epoch <= cfg.max_epochs
        assert len(report.valid_losses) == report.stop_epoch
        assert evaluate_loss(task_loss_fn(mlp), valid, mlp.parameters, cfg) == \
            pytest.approx(report.best_valid_loss, abs=1e-6)

    def test_dummy_only_training(self, small_dataset):
        zeros = build_model(ModelSpec(task=2, kind="ZEROS"))
        report = train_models([zeros], task_loss_fn(zeros), small_dataset.split("train"),
                              small_dataset.split("valid"), quick_config(), np.random.default_rng(0))
        assert report.stop_reason == "no_parameters"
        assert report.best_valid_loss == pytest.approx(np.log(2.0), rel=1e-6)

    def test_pretrain_states_keep_initial_weights(self, small_dataset):
        models = models_of([ModelSpec(task=1, kind="SF"), ModelSpec(task=2, kind="MLP2", init_seed=3),
                            ModelSpec(task=2, kind="NOISE")])
        initial = [m.parameters.state_dict() for m in models]
        states, epochs = pretrain_states(models, small_dataset.split("train"), small_dataset.split("valid"),
                                         quick_config(), np.random.default_rng(0))
        assert set(states) == {"t1-SF-r0", "t2-MLP2-r0"}
        assert all(1 <= e <= 3 for e in epochs.values())
        for m, before in zip(models, initial):
            for name, value in before.items():
                np.testing.assert_array_equal(m.parameters[name].data, value)
        assert not np.array_equal(states["t2-MLP2-r0"]["t2-MLP2-r0/out/w"], initial[1]["t2-MLP2-r0/out/w"])

    def test_post_train_single_path(self, small_dataset):
        sf, mass = models_of([ModelSpec(task=1, kind="SF"), ModelSpec(task=2, kind="MASS", init_seed=1)])
        cfg = quick_config()
        report = post_train(sf, mass, small_dataset.split("train"), small_dataset.split("valid"),
                            cfg, np.random.default_rng(0))
        assert report.best_valid_loss == pytest.approx(
            evaluate_loss(pair_loss_fn(sf, mass, cfg), small_dataset.split("valid"),
                          ParameterRegistry.union([sf.parameters, mass.parameters]), cfg), abs=1e-6)


class TestDarts:
    def test_search_records_alpha(self, small_dataset):
        task1 = models_of([ModelSpec(task=1, kind="SF")] + base_specs(1, include_dummies=True)[3:])
        task2 = models_of(base_specs(2)[::2] + base_specs(2, include_dummies=True)[3:])
        supernet = SupernetState(task1, task2)
        cfg = quick_config()
        combo, report = darts_search(supernet, small_dataset.split("train"), small_dataset.split("valid"),
                                     cfg, np.random.default_rng(0))
        assert combo.provenance == "darts"
        assert combo.task1 in supernet.candidate_ids()[1]
        assert combo.task2 in supernet.candidate_ids()[2]
        assert len(report.alpha_trajectory) == report.stop_epoch
        assert not np.allclose(report.alpha_trajectory[-1][1], 0.0)
        for coefficients in supernet.coefficients().values():
            assert coefficients.sum() == pytest.approx(1.0, abs=1e-6)

    def test_darts_is_deterministic(self, small_dataset):
        def run():
            supernet = SupernetState(models_of([ModelSpec(task=1, kind="SF"), ModelSpec(task=1, kind="ZEROS")]),
                                     models_of([ModelSpec(task=2, kind="MLP2", init_seed=5)]))
            combo, report = darts_search(supernet, small_dataset.split("train"), small_dataset.split("valid"),
                                         quick_config(), np.random.default_rng(4))
            return combo.to_dict(), report.alpha_trajectory

        assert run() == run()

    def test_needs_candidates(self):
        with pytest.raises(ValueError):
            SupernetState([], models_of([ModelSpec(task=2, kind="MLP2")]))


class TestSpos:
    def test_sampler_is_uniform(self):
        rng = np.random.default_rng(0)
        counts = np.zeros((3, 3))
        for _ in range(9000):
            counts[sample_path(rng, 3, 3)] += 1
        assert np.all(np.abs(counts - 1000) <= 100)
        assert chisquare(counts.ravel()).pvalue > 0.001

    def test_search_picks_lowest_validation_loss(self, small_dataset):
        task1 = models_of([ModelSpec(task=1, kind="SF"), ModelSpec(task=1, kind="SF", replica=1)])
        task2 = models_of([ModelSpec(task=2, kind="MLP2", init_seed=8), ModelSpec(task=2, kind="MASS", init_seed=9)])
        cfg = quick_config()
        valid = small_dataset.split("valid")
        combo, report = spos_search(task1, task2, small_dataset.split("train"), valid, cfg,
                                    np.random.default_rng(0))
        assert sum(report.path_counts.values()) == report.stop_epoch * small_dataset.split("train").n_batches(40)
        assert set(report.phase_seconds) == {"spos-supernet", "spos-search"}
        losses = {(m1.model_id, m2.model_id): evaluate_loss(
            pair_loss_fn(m1, m2, cfg), valid, ParameterRegistry.union([m1.parameters, m2.parameters]), cfg)
            for m1 in task1 for m2 in task2}
        assert (combo.task1, combo.task2) == min(losses, key=losses.get)
        assert combo.validation_loss == pytest.approx(min(losses.values()))

    def test_dummies_are_dropped(self, small_dataset):
        task1 = models_of([ModelSpec(task=1, kind="SF"), ModelSpec(task=1, kind="NOISE")])
        task2 = models_of([ModelSpec(task=2, kind="MLP2")])
        combo, _ = spos_search(task1, task2, small_dataset.split("train"), small_dataset.split("valid"),
                               quick_config(), np.random.default_rng(0))
        assert (combo.task1, combo.task2) == ("t1-SF-r0", "t2-MLP2-r0")


class TestGrid:
    def test_three_by_three(self, small_dataset):
        task1 = models_of(replicate_models([ModelSpec(task=1, kind="SF")], 3))
        task2 = models_of(replicate_models([ModelSpec(task=2, kind="MASS", init_seed=2)], 3))
        result = grid_search(task1, task2, small_dataset.split("train"), small_dataset.split("valid"),
                             quick_config(), np.random.default_rng(0), reoptimize=True,
                             test=small_dataset.split("test"))
        assert result.trainings == 9
        assert len(result.ranked) == 9
        losses = [r.validation_loss for r in result.ranked]
        assert losses == sorted(losses)
        assert all(r.reoptimized and r.test is not None for r in result.ranked)
        assert result.combo().provenance == "grid"

    def test_pair_count_grows_quadratically(self, small_dataset):
        task1 = models_of(replicate_models([ModelSpec(task=1, kind="SF")], 6))
        task2 = models_of(replicate_models([ModelSpec(task=2, kind="MLP2", init_seed=2)], 6))
        result = grid_search(task1, task2, small_dataset.split("train"), small_dataset.split("valid"),
                             quick_config(max_epochs=2), np.random.default_rng(0), reoptimize=False)
        assert result.trainings == 36
        assert all(not r.reoptimized and r.epochs_post == 0 for r in result.ranked)

    def test_shared_pretraining(self, small_dataset):
        task1 = models_of([ModelSpec(task=1, kind="SF")])
        task2 = models_of([ModelSpec(task=2, kind="MLP2", init_seed=6)])
        train, valid = small_dataset.split("train"), small_dataset.split("valid")
        cfg = quick_config()
        states, epochs = pretrain_states(task1 + task2, train, valid, cfg, np.random.default_rng(1))
        first = grid_search(task1, task2, train, valid, cfg, np.random.default_rng(2), reoptimize=True,
                            pretrained=states, pretrained_epochs=epochs)
        assert first.best.epochs_task1 == epochs["t1-SF-r0"]
        assert first.best.state is not None
