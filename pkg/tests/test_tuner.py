"""Tests for configuration sampling and successive halving."""

import json
import math

import numpy as np
import pytest

from edgefbg.errors import InvalidInputError, SearchFailedError, TrainingDivergedError
from edgefbg.nn import ConvSpec, DenseSpec, Model
from edgefbg.tuner import (
    SearchSpace,
    TrialConfig,
    run_search,
    sample_config,
    successive_halving,
)

TINY_SPACE = SearchSpace(
    n_conv=(1, 1),
    n_fc=(1, 1),
    bn_per_layer=(False,),
    dropout_after_fc=(False,),
    dropout_rate=(0.1, 0.1),
    stride=(2,),
    pool_kernel=(3,),
    init_scheme=("xavier_uniform",),
    learning_rate=(1e-3,),
    sort_conv=(False,),
    channels=(16,),
    l2=(0.0,),
    smooth_l1_beta=(4.04, 4.04),
    fc_width=(32,),
    batch_size=16,
)


def tiny_data(n_train=24, n_val=8, seed=0):
    rng = np.random.default_rng(seed)
    return (
        rng.random((n_train, 3, 190)).astype(np.float32),
        rng.normal(0, 5, (n_train, 60)).astype(np.float32),
        rng.random((n_val, 3, 190)).astype(np.float32),
        rng.normal(0, 5, (n_val, 60)).astype(np.float32),
    )


class TestSampleConfig:
    def test_bounds_hold_over_many_draws(self):
        rng = np.random.default_rng(0)
        space = SearchSpace()
        for _ in range(1000):
            c = sample_config(space, rng)
            assert 1 <= c.n_conv <= 20
            assert 1 <= c.n_fc <= 20
            assert 0.1 <= c.dropout_rate <= 0.8
            assert 0.0 <= c.smooth_l1_beta <= 5.0
            assert c.stride in (1, 2)
            assert c.pool_kernel in (2, 3)
            assert c.learning_rate in (1e-2, 1e-3, 1e-4, 1e-5)
            assert c.l2 in (0.1, 0.01, 0.001, 0.0001, 0.00001, 0.0)
            assert len(c.conv_channels) == c.n_conv
            assert all(ch in (16, 32, 64, 128, 256) for ch in c.conv_channels)

    def test_sorted_conv_channels_non_decreasing(self):
        rng = np.random.default_rng(1)
        space = SearchSpace(sort_conv=(True,), n_conv=(5, 8))
        for _ in range(50):
            c = sample_config(space, rng)
            assert list(c.conv_channels) == sorted(c.conv_channels)

    def test_degenerate_space_is_exact(self):
        c = sample_config(TINY_SPACE, np.random.default_rng(2))
        assert c.n_conv == 1 and c.n_fc == 1
        assert c.conv_channels == (16,)
        assert c.learning_rate == 1e-3
        assert c.smooth_l1_beta == 4.04

    def test_fixed_seed_reproducible(self):
        space = SearchSpace()
        a = [sample_config(space, np.random.default_rng(3)) for _ in range(20)]
        b = [sample_config(space, np.random.default_rng(3)) for _ in range(20)]
        assert a == b

    def test_paper_selection_expressible(self):
        space = SearchSpace(
            n_conv=(5, 5),
            n_fc=(5, 5),
            init_scheme=("xavier_normal",),
            learning_rate=(1e-4,),
            l2=(0.0,),
            smooth_l1_beta=(4.04, 4.04),
            sort_conv=(True,),
        )
        c = sample_config(space, np.random.default_rng(4))
        assert c.n_conv == 5 and c.n_fc == 5
        assert c.init_scheme == "xavier_normal"
        assert c.learning_rate == 1e-4 and c.l2 == 0.0
        assert c.smooth_l1_beta == 4.04

    def test_sampled_configs_build_models(self):
        rng = np.random.default_rng(5)
        space = SearchSpace(fc_width=(16,))
        for _ in range(10):
            c = sample_config(space, rng)
            model = Model(c.model_config(), seed=0)
            assert model.output_shape == (60,)


class FakeRunner:
    """Deterministic stand-in recording every training call."""

    def __init__(self, losses, diverge=()):
        self.losses = losses
        self.diverge = set(diverge)
        self.calls = []

    def __call__(self, config, data, epochs, seed):
        idx = config.n_fc - 1  # configs tagged by n_fc below
        self.calls.append((idx, epochs))
        if idx in self.diverge:
            raise TrainingDivergedError("boom")
        return self.losses[idx]


def tagged_configs(n):
    base = sample_config(TINY_SPACE, np.random.default_rng(0))
    return [
        TrialConfig(**{**base.__dict__, "n_fc": i + 1}) for i in range(n)
    ]


class TestSuccessiveHalving:
    def test_round_sizes_nine_three_one(self):
        runner = FakeRunner(losses=list(range(9)))
        survivors = successive_halving(
            tagged_configs(9), None, eta=3, base_epochs=1, trial_runner=runner
        )
        sizes = {}
        for idx, epochs in runner.calls:
            sizes.setdefault(epochs, set()).add(idx)
        assert [len(sizes[e]) for e in sorted(sizes)] == [9, 3, 1]
        assert survivors[0].config.n_fc == 1  # lowest loss wins

    def test_single_config_survives(self):
        runner = FakeRunner(losses=[1.0])
        survivors = successive_halving(
            tagged_configs(1), None, eta=3, trial_runner=runner
        )
        assert len(survivors) == 1
        assert survivors[0].status == "ok"

    def test_survivors_match_brute_force_ranking(self):
        losses = [5.0, 1.0, 4.0, 2.0, 9.0, 3.0]
        runner = FakeRunner(losses=losses)
        survivors = successive_halving(
            tagged_configs(6), None, eta=2, base_epochs=1, trial_runner=runner
        )
        assert survivors[0].config.n_fc - 1 == int(np.argmin(losses))

    def test_diverged_eliminated_first(self):
        runner = FakeRunner(losses=[0.1, 1.0, 2.0], diverge={0})
        survivors = successive_halving(
            tagged_configs(3), None, eta=3, trial_runner=runner
        )
        assert all(r.config.n_fc != 1 for r in survivors)

    def test_all_diverged_raises(self):
        runner = FakeRunner(losses=[1.0, 2.0], diverge={0, 1})
        with pytest.raises(SearchFailedError):
            successive_halving(tagged_configs(2), None, trial_runner=runner)

    def test_monotone_resource(self):
        runner = FakeRunner(losses=list(range(9)))
        survivors = successive_halving(
            tagged_configs(9), None, eta=3, base_epochs=1, trial_runner=runner
        )
        max_eliminated = max(e for _, e in runner.calls[:9])
        assert survivors[0].epochs >= max_eliminated

    def test_eta_validation(self):
        with pytest.raises(InvalidInputError):
            successive_halving(tagged_configs(2), None, eta=1)


class TestRunSearch:
    def test_best_is_min_and_log_written(self, tmp_path):
        runner = FakeRunner(losses=[3.0, 1.0, 2.0, 5.0, 4.0, 6.0, 7.0, 8.0, 9.0])

        def tag_runner(config, data, epochs, seed):
            return float(config.smooth_l1_beta)  # any deterministic metric

        log = tmp_path / "trials.jsonl"
        best = run_search(
            SearchSpace(fc_width=(16,)),
            None,
            n_configs=6,
            eta=2,
            seed=7,
            log_path=log,
            trial_runner=tag_runner,
        )
        lines = [json.loads(l) for l in log.read_text().splitlines()]
        assert len(lines) == 6
        finished = [l for l in lines if l["status"] == "ok"]
        assert best.val_rmse == min(l["val_rmse"] for l in finished)

    def test_same_seed_same_best(self):
        def runner(config, data, epochs, seed):
            return float(config.dropout_rate)

        kwargs = dict(n_configs=5, eta=2, seed=13, trial_runner=runner)
        a = run_search(SearchSpace(), None, **kwargs)
        b = run_search(SearchSpace(), None, **kwargs)
        assert a.config == b.config

    def test_end_to_end_tiny_training(self):
        best = run_search(
            TINY_SPACE,
            tiny_data(),
            n_configs=2,
            eta=2,
            base_epochs=1,
            max_epochs=2,
            seed=3,
        )
        assert best.status == "ok"
        assert math.isfinite(best.val_rmse)
