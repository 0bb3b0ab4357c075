"""Hyperparameter search: random sampling plus successive halving.

Configurations are drawn uniformly from the menu-style search space and
ranked by a fixed validation metric (marker RMSE in mm) so trials with
different loss thresholds stay comparable.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import InvalidInputError, SearchFailedError, TrainingDivergedError
from .nn import (
    BatchNormSpec,
    ConvSpec,
    DenseSpec,
    DropoutSpec,
    FlattenSpec,
    INIT_SCHEMES,
    Model,
    ModelConfig,
    N_INPUT_LENGTH,
    PoolSpec,
    ReluSpec,
    TrainConfig,
    predict_batch,
    train,
)

CHANNEL_CHOICES = (16, 32, 64, 128, 256)


@dataclass(frozen=True)
class SearchSpace:
    """Menu of tunable dimensions; singleton entries pin a dimension."""

    n_conv: tuple = (1, 20)  # inclusive integer range
    n_fc: tuple = (1, 20)
    bn_per_layer: tuple = (False, True)
    dropout_after_fc: tuple = (False, True)
    dropout_rate: tuple = (0.1, 0.8)  # continuous range
    stride: tuple = (1, 2)
    pool_kernel: tuple = (2, 3)
    init_scheme: tuple = INIT_SCHEMES
    learning_rate: tuple = (1e-2, 1e-3, 1e-4, 1e-5)
    sort_conv: tuple = (False, True)
    channels: tuple = CHANNEL_CHOICES
    l2: tuple = (0.1, 0.01, 0.001, 0.0001, 0.00001, 0.0)
    smooth_l1_beta: tuple = (0.0, 5.0)  # continuous range
    fc_width: tuple = (256,)
    batch_size: int = 256


@dataclass(frozen=True)
class TrialConfig:
    """One sampled point: the architecture plus its training settings."""

    n_conv: int
    n_fc: int
    bn_per_layer: bool
    dropout_after_fc: bool
    dropout_rate: float
    stride: int
    pool_kernel: int
    init_scheme: str
    learning_rate: float
    sort_conv: bool
    conv_channels: tuple
    l2: float
    smooth_l1_beta: float
    fc_width: int
    batch_size: int

    def model_config(self) -> ModelConfig:
        layers = [BatchNormSpec()]
        length = N_INPUT_LENGTH
        for ch in self.conv_channels:
            layers += [ConvSpec(ch, 3, self.stride), ReluSpec()]
            length = -(-length // self.stride)
            if self.bn_per_layer:
                layers.append(BatchNormSpec())
            if length >= self.pool_kernel:
                layers.append(PoolSpec(self.pool_kernel))
                length = (length - self.pool_kernel) // self.pool_kernel + 1
        layers.append(FlattenSpec())
        for _ in range(self.n_fc):
            layers += [DenseSpec(self.fc_width), ReluSpec()]
            if self.bn_per_layer:
                layers.append(BatchNormSpec())
            if self.dropout_after_fc:
                layers.append(DropoutSpec(self.dropout_rate))
        layers.append(DenseSpec(60))
        return ModelConfig(layers=tuple(layers), init_scheme=self.init_scheme)

    def train_config(self, epochs: int, seed: int) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            smooth_l1_beta=max(self.smooth_l1_beta, 1e-6),
            l2_regularization=self.l2,
            epochs=epochs,
            seed=seed,
        )


def _pick(rng, menu):
    return menu[rng.integers(len(menu))]


def sample_config(space: SearchSpace, rng: np.random.Generator) -> TrialConfig:
    """Uniform draw per dimension; conv channels optionally sorted."""
    n_conv = int(rng.integers(space.n_conv[0], space.n_conv[-1] + 1))
    sort_conv = bool(_pick(rng, space.sort_conv))
    channels = [int(_pick(rng, space.channels)) for _ in range(n_conv)]
    if sort_conv:
        channels.sort()
    return TrialConfig(
        n_conv=n_conv,
        n_fc=int(rng.integers(space.n_fc[0], space.n_fc[-1] + 1)),
        bn_per_layer=bool(_pick(rng, space.bn_per_layer)),
        dropout_after_fc=bool(_pick(rng, space.dropout_after_fc)),
        dropout_rate=float(rng.uniform(space.dropout_rate[0], space.dropout_rate[-1])),
        stride=int(_pick(rng, space.stride)),
        pool_kernel=int(_pick(rng, space.pool_kernel)),
        init_scheme=str(_pick(rng, space.init_scheme)),
        learning_rate=float(_pick(rng, space.learning_rate)),
        sort_conv=sort_conv,
        conv_channels=tuple(channels),
        l2=float(_pick(rng, space.l2)),
        smooth_l1_beta=float(rng.uniform(space.smooth_l1_beta[0], space.smooth_l1_beta[-1])),
        fc_width=int(_pick(rng, space.fc_width)),
        batch_size=space.batch_size,
    )


@dataclass
class TrialRecord:
    index: int
    config: TrialConfig
    epochs: int = 0
    val_rmse: float = math.inf
    status: str = "pending"  # pending | ok | diverged

    def to_json(self) -> str:
        d = asdict(self)
        d["config"]["conv_channels"] = list(self.config.conv_channels)
        return json.dumps(d, sort_keys=True)


def run_trial(config: TrialConfig, data, epochs: int, seed: int) -> float:
    """Train one configuration from scratch; returns validation RMSE in mm."""
    train_x, train_y, val_x, val_y = data
    model = Model(config.model_config(), seed=seed, dtype=np.float32)
    cfg = config.train_config(epochs, seed)
    train(model, train_x, train_y, val_x, val_y, cfg)
    pred = predict_batch(model, val_x).reshape(len(val_x), -1)
    return float(np.sqrt(np.mean((pred - np.asarray(val_y)) ** 2)))


def successive_halving(
    configs,
    data,
    eta: int = 3,
    base_epochs: int = 1,
    max_epochs: int = 27,
    seed: int = 0,
    trial_runner=run_trial,
    records: list | None = None,
) -> list:
    """Rounds of training with growing budget, keeping the top 1/eta.

    Returns the final survivors' TrialRecords; diverged trials are
    eliminated before any loss ranking.
    """
    if eta < 2:
        raise InvalidInputError("halving factor must be at least 2")
    if not configs:
        raise InvalidInputError("need at least one configuration")
    alive = [TrialRecord(index=i, config=c) for i, c in enumerate(configs)]
    if records is not None:
        records.extend(alive)
    epochs = base_epochs
    while True:
        for rec in alive:
            try:
                rmse = trial_runner(rec.config, data, epochs, seed ^ (rec.index + 1))
                rec.val_rmse = float(rmse)
                rec.status = "ok"
            except TrainingDivergedError:
                rec.val_rmse = math.inf
                rec.status = "diverged"
            rec.epochs = epochs
        survivors = [r for r in alive if r.status == "ok"]
        if not survivors:
            raise SearchFailedError("every configuration diverged")
        survivors.sort(key=lambda r: r.val_rmse)
        if len(alive) <= 1 or epochs * eta > max_epochs:
            return survivors
        alive = survivors[: math.ceil(len(alive) / eta)]
        epochs *= eta


def run_search(
    space: SearchSpace,
    data,
    n_configs: int = 9,
    eta: int = 3,
    base_epochs: int = 1,
    max_epochs: int = 27,
    seed: int = 0,
    log_path=None,
    trial_runner=run_trial,
) -> TrialRecord:
    """Sample, halve, and return the best trial; optionally log all trials."""
    if n_configs < 1:
        raise InvalidInputError("need at least one configuration in the budget")
    rng = np.random.default_rng(seed)
    configs = [sample_config(space, rng) for _ in range(n_configs)]
    records: list[TrialRecord] = []
    survivors = successive_halving(
        configs,
        data,
        eta=eta,
        base_epochs=base_epochs,
        max_epochs=max_epochs,
        seed=seed,
        trial_runner=trial_runner,
        records=records,
    )
    if log_path is not None:
        with open(log_path, "w") as fh:
            for rec in records:
                fh.write(rec.to_json() + "\n")
    return survivors[0]
