"""Training loop for the velocity field."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from deltafm.model import VelocityField, loss_and_gradient
from deltafm.objective import Batch, LossReport, ObjectiveConfig, delta_fm_plan, fm_plan
from deltafm.schedule import LINEAR, Schedule
from deltafm.streams import Streams

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "adaptive_moments")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    iterations: int = 20_000
    learning_rate: float = 1e-3
    lam: float = 0.05
    p_uncond: float = 0.1
    seed: int = 0
    optimizer: str = "adaptive_moments"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.iterations < 0:
            raise ValueError("batch_size must be >= 1 and iterations >= 0")
        if self.lam > 0 and self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 when lambda > 0")
        if not 0.0 <= self.p_uncond <= 1.0:
            raise ValueError("p_uncond must lie in [0, 1]")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}; expected one of {OPTIMIZERS}")
        ObjectiveConfig(lam=self.lam)

    def objective(self) -> ObjectiveConfig:
        return ObjectiveConfig(lam=self.lam, seed=self.seed)


class SGD:
    def __init__(self, learning_rate):
        self.learning_rate = learning_rate

    def step(self, params, grad):
        params -= self.learning_rate * grad


class Adam:
    def __init__(self, learning_rate, beta1=0.9, beta2=0.999, eps=1e-8):
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = self.v = None
        self.count = 0

    def step(self, params, grad):
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.count += 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.count)
        v_hat = self.v / (1.0 - self.beta2**self.count)
        params -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(config: TrainConfig):
    if config.optimizer == "sgd":
        return SGD(config.learning_rate)
    return Adam(config.learning_rate, config.beta1, config.beta2, config.adam_eps)


def train_step(model: VelocityField, batch, schedule: Schedule, objective: ObjectiveConfig | None,
               optimizer, rng: Streams):
    """One parameter update on the batch-mean loss; ``objective=None`` means plain FM.

    Parameters are updated in place; the model is returned for convenience.
    """
    if objective is None:
        plan = fm_plan(batch, schedule, rng)
    else:
        plan = delta_fm_plan(batch, schedule, objective, rng)
    tape = loss_and_gradient(model, plan)
    if not np.all(np.isfinite(tape.gradient)):
        raise FloatingPointError("non-finite gradient")
    optimizer.step(model.params, tape.gradient)
    return model, tape.report


def draw_batch(dataset, config: TrainConfig, null_class: int, rng: Streams) -> Batch:
    idx = rng.batch.integers(0, len(dataset), size=config.batch_size)
    x = dataset.points[idx]
    y = dataset.labels[idx].copy()
    eps = rng.noise.standard_normal(x.shape)
    drop = rng.dropout.random(config.batch_size) < config.p_uncond
    y[drop] = null_class
    return Batch(x, y, eps)


def train(model: VelocityField, dataset, config: TrainConfig, schedule: Schedule = LINEAR,
          contrastive: bool = True, callback=None):
    """Run ``config.iterations`` steps, returning the model and per-step records.

    With ``contrastive=False`` the plain FM objective is used and
    ``config.lam`` is ignored.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if dataset.dim != model.input_dim:
        raise ValueError(f"data dimension {dataset.dim} does not match model input {model.input_dim}")
    if dataset.num_classes > model.num_classes:
        raise ValueError("dataset has more classes than the model")
    rng = Streams.from_seed(config.seed)
    optimizer = make_optimizer(config)
    objective = config.objective() if contrastive else None
    history = []
    for it in range(config.iterations):
        batch = draw_batch(dataset, config, model.null_class, rng)
        model, report = train_step(model, batch, schedule, objective, optimizer, rng)
        history.append({"iteration": it, **report.as_row()})
        if callback is not None:
            callback(it, model, report)
        if it % 1000 == 0:
            log.debug("iter %d fm=%.5f contrastive=%.5f total=%.5f", it, report.fm_term,
                      report.contrastive_term, report.total)
    return model, history
