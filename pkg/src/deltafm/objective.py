"""Flow-matching and contrastive flow-matching objectives.

The contrastive loss for one sample is

    ||v_hat - v||^2 - lam * ||v_hat - v_neg||^2

where ``v`` is the target velocity of the sample itself and ``v_neg`` the
target velocity of another element of the same batch, evaluated at the same
time. Both terms are averaged over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from deltafm.schedule import LINEAR, Schedule
from deltafm.streams import Streams

NEGATIVE_POLICIES = ("uniform_excluding_self",)
MEAN_MODES = ("analytic_noise_mean_zero", "empirical")


@dataclass(frozen=True)
class FlowSample:
    x: np.ndarray
    y: int
    eps: np.ndarray

    def __post_init__(self):
        if np.shape(self.x) != np.shape(self.eps):
            raise ValueError(f"x and eps differ in shape: {np.shape(self.x)} vs {np.shape(self.eps)}")


@dataclass
class Batch:
    """Column-stacked flow samples: ``x`` and ``eps`` are (n, d), ``y`` is (n,)."""

    x: np.ndarray
    y: np.ndarray
    eps: np.ndarray

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        self.eps = np.atleast_2d(np.asarray(self.eps, dtype=np.float64))
        self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        if self.x.shape != self.eps.shape:
            raise ValueError(f"dimension mismatch in batch: x {self.x.shape} vs eps {self.eps.shape}")
        if self.y.shape[0] != self.x.shape[0]:
            raise ValueError("label count does not match batch size")

    @classmethod
    def from_samples(cls, samples) -> "Batch":
        samples = list(samples)
        if not samples:
            raise ValueError("empty batch")
        dims = {np.shape(s.x) for s in samples}
        if len(dims) != 1:
            raise ValueError(f"dimension mismatch within batch: {sorted(dims)}")
        return cls(np.stack([s.x for s in samples]), [s.y for s in samples], np.stack([s.eps for s in samples]))

    def __len__(self):
        return self.x.shape[0]


def as_batch(batch) -> Batch:
    if isinstance(batch, Batch):
        return batch
    return Batch.from_samples(batch)


@dataclass(frozen=True)
class ObjectiveConfig:
    lam: float = 0.05
    negative_policy: str = "uniform_excluding_self"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.lam < 1.0:
            raise ValueError(f"lambda must lie in [0, 1), got {self.lam}")
        if self.negative_policy not in NEGATIVE_POLICIES:
            raise ValueError(f"unknown negative policy {self.negative_policy!r}")


@dataclass(frozen=True)
class LossReport:
    fm_term: float
    contrastive_term: float
    total: float

    def as_row(self):
        return {"fm_term": self.fm_term, "contrastive_term": self.contrastive_term, "total": self.total}


@dataclass
class BatchObjective:
    """Everything random about one loss evaluation, drawn up front.

    ``v_neg`` is None for plain flow matching.
    """

    x_t: np.ndarray
    t: np.ndarray
    y: np.ndarray
    v_pos: np.ndarray
    v_neg: np.ndarray | None = None
    lam: float = 0.0
    negatives: np.ndarray | None = None

    def value_and_grad(self, v_hat):
        n = v_hat.shape[0]
        r_pos = v_hat - self.v_pos
        fm_term = float(np.mean(np.sum(r_pos * r_pos, axis=1)))
        grad = (2.0 / n) * r_pos
        if self.v_neg is None:
            return LossReport(fm_term, 0.0, fm_term), grad
        r_neg = v_hat - self.v_neg
        contrastive = float(np.mean(np.sum(r_neg * r_neg, axis=1)))
        report = LossReport(fm_term, contrastive, fm_term - self.lam * contrastive)
        return report, grad - self.lam * ((2.0 / n) * r_neg)


def _draw_times(batch: Batch, rng: Streams):
    return rng.t.uniform(0.0, 1.0, size=len(batch))


def fm_plan(batch, schedule: Schedule, rng: Streams) -> BatchObjective:
    batch = as_batch(batch)
    if len(batch) == 0:
        raise ValueError("empty batch")
    t = _draw_times(batch, rng)
    x_t = schedule.interpolate(batch.x, batch.eps, t)
    return BatchObjective(x_t, t, batch.y, schedule.target_velocity(batch.x, batch.eps, t))


def sample_negative(batch, i: int, rng) -> int:
    """Index of a negative for element ``i``, uniform over all other indices."""
    n = len(batch)
    if n < 2:
        raise ValueError("contrastive loss needs a batch of at least 2 samples")
    if not 0 <= i < n:
        raise IndexError(i)
    gen = rng.negatives if isinstance(rng, Streams) else rng
    j = int(gen.integers(0, n - 1))
    return j + (j >= i)


def sample_negatives(n: int, gen: np.random.Generator) -> np.ndarray:
    """Vectorized ``sample_negative`` for every index of a batch of size ``n``."""
    if n < 2:
        raise ValueError("contrastive loss needs a batch of at least 2 samples")
    j = gen.integers(0, n - 1, size=n)
    return j + (j >= np.arange(n))


def delta_fm_plan(batch, schedule: Schedule, config: ObjectiveConfig, rng: Streams) -> BatchObjective:
    batch = as_batch(batch)
    if not 0.0 <= config.lam < 1.0:
        raise ValueError(f"lambda must lie in [0, 1), got {config.lam}")
    if len(batch) < 2:
        raise ValueError("contrastive loss needs a batch of at least 2 samples")
    plan = fm_plan(batch, schedule, rng)
    neg = sample_negatives(len(batch), rng.negatives)
    # negatives reuse the positive's time
    plan.v_neg = schedule.target_velocity(batch.x[neg], batch.eps[neg], plan.t)
    plan.lam = config.lam
    plan.negatives = neg
    return plan


def fm_loss(model, batch, schedule: Schedule, rng: Streams) -> LossReport:
    plan = fm_plan(batch, schedule, rng)
    report, _ = plan.value_and_grad(np.atleast_2d(model.forward(plan.x_t, plan.t, plan.y)))
    return report


def delta_fm_loss(model, batch, schedule: Schedule, config: ObjectiveConfig, rng: Streams) -> LossReport:
    plan = delta_fm_plan(batch, schedule, config, rng)
    report, _ = plan.value_and_grad(np.atleast_2d(model.forward(plan.x_t, plan.t, plan.y)))
    return report


@dataclass(frozen=True)
class MeanTrajectory:
    """Average target velocity over the training set as a function of time."""

    data_mean: np.ndarray
    mode: str = "analytic_noise_mean_zero"
    noise_mean: np.ndarray | None = None

    def at(self, t, schedule: Schedule = LINEAR):
        """T_hat at a scalar time, or one row per entry of a time vector."""
        _, _, ad, sd = schedule.eval(t)
        ad, sd = np.asarray(ad)[..., None], np.asarray(sd)[..., None]
        value = ad * np.asarray(self.data_mean)
        if self.mode == "empirical":
            value = value + sd * np.asarray(self.noise_mean)
        return value


def mean_trajectory_of(points, mode="analytic_noise_mean_zero", noise_samples=100_000, seed=0) -> MeanTrajectory:
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if points.shape[0] == 0 or points.size == 0:
        raise ValueError("empty dataset")
    if mode not in MEAN_MODES:
        raise ValueError(f"unknown mean-trajectory mode {mode!r}")
    mean = points.mean(axis=0)
    if mode == "empirical":
        eps = np.random.default_rng(seed).standard_normal((noise_samples, mean.size))
        return MeanTrajectory(mean, mode, eps.mean(axis=0))
    return MeanTrajectory(mean, mode)


def mean_trajectory(dataset, schedule: Schedule, t, mode="analytic_noise_mean_zero",
                    noise_samples=100_000, seed=0) -> np.ndarray:
    """T_hat(t) for ``dataset`` (a point array or anything with ``.points``)."""
    points = getattr(dataset, "points", dataset)
    return mean_trajectory_of(points, mode, noise_samples, seed).at(t, schedule)


def optimal_velocity_shift(v_fm, t_hat, lam):
    """Pointwise minimizer of the contrastive loss given the FM minimizer."""
    if not 0.0 <= lam < 1.0:
        raise ValueError(f"lambda must lie in [0, 1), got {lam}")
    return (np.asarray(v_fm, dtype=np.float64) - lam * np.asarray(t_hat, dtype=np.float64)) / (1.0 - lam)
