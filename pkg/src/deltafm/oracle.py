"""Brute-force checks of the contrastive optimum and interpolant identities.

The pointwise objectives are minimized by coarse-to-fine grid search over
candidate velocities, without using any closed form, and compared with
``optimal_velocity_shift`` applied to the brute-force FM minimizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from deltafm import data as data_mod
from deltafm.objective import mean_trajectory_of, optimal_velocity_shift
from deltafm.schedule import LINEAR, Schedule

TOLERANCE = 0.02


def grid_minimize(objective, center, half_width=8.0, points=41, levels=9, shrink=5.0):
    """Minimize ``objective(candidates (m, d)) -> (m,)`` on nested grids (d <= 3)."""
    center = np.asarray(center, dtype=np.float64)
    d = center.size
    for _ in range(levels):
        axes = [np.linspace(c - half_width, c + half_width, points) for c in center]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
        center = grid[np.argmin(objective(grid))]
        half_width /= shrink
    return center


@dataclass
class PointwiseProblem:
    """Weighted positives through one x_t and a pool of negatives."""

    v_pos: np.ndarray
    weights: np.ndarray
    v_neg: np.ndarray

    def fm(self, cand):
        return cdist(cand, self.v_pos, "sqeuclidean") @ self.weights

    def delta_fm(self, lam):
        def obj(cand):
            neg = cdist(cand, self.v_neg, "sqeuclidean").mean(axis=1)
            return self.fm(cand) - lam * neg
        return obj


def build_problem(x_t, t, points_y, negatives, rng, schedule: Schedule = LINEAR) -> PointwiseProblem:
    """Importance-weighted posterior over class data given x_t, plus antithetic negatives."""
    a, s, ad, sd = (float(v) for v in schedule.eval(t))
    eps = (x_t[None, :] - a * points_y) / s
    logw = -0.5 * np.sum(eps**2, axis=1)
    w = np.exp(logw - logw.max())
    w /= w.sum()
    v_pos = ad * points_y + sd * eps
    noise = rng.standard_normal(negatives.shape)
    neg_x = np.concatenate([negatives, negatives])
    neg_eps = np.concatenate([noise, -noise])
    return PointwiseProblem(v_pos, w, ad * neg_x + sd * neg_eps)


@dataclass
class Probe:
    y: int
    t: float
    x_t: np.ndarray
    lam: float
    v_fm: np.ndarray
    v_brute: np.ndarray
    v_shift: np.ndarray

    @property
    def rel_error(self):
        return float(np.linalg.norm(self.v_brute - self.v_shift) / np.linalg.norm(self.v_shift))


@dataclass
class OracleReport:
    probes: list = field(default_factory=list)
    consistency: dict = field(default_factory=dict)
    tolerance: float = TOLERANCE

    @property
    def max_rel_error(self):
        return max((p.rel_error for p in self.probes), default=0.0)

    @property
    def passed(self):
        return self.max_rel_error <= self.tolerance and all(ok for ok, _ in self.consistency.values())


def closed_form_check(lams=(0.05, 0.5), probes=50, n_per_class=1000, seed=0, separation=None, scale=1.0,
                      schedule: Schedule = LINEAR, shift=optimal_velocity_shift) -> list:
    """Brute-force contrastive minimizer vs. the shifted brute-force FM minimizer.

    ``shift`` is injectable so a corrupted formula can serve as a negative control.
    """
    rng = np.random.default_rng(seed)
    cloud, spec = data_mod.two_gaussians(separation, scale, n_per_class, seed)
    t_hat = mean_trajectory_of(cloud.points)
    out = []
    for _ in range(probes):
        y = int(rng.integers(cloud.num_classes))
        t = float(rng.uniform(0.05, 0.95))
        x0 = cloud.of_class(y)[rng.integers(n_per_class)]
        x_t = schedule.interpolate(x0, rng.standard_normal(x0.shape), t)
        prob = build_problem(x_t, t, cloud.of_class(y), cloud.points, rng, schedule)
        start = data_mod.optimal_velocity(spec, x_t, t, y, schedule)
        v_fm = grid_minimize(prob.fm, start)
        for lam in lams:
            v_brute = grid_minimize(prob.delta_fm(lam), start)
            v_shift = shift(v_fm, t_hat.at(t, schedule), lam)
            out.append(Probe(y, t, x_t, lam, v_fm, v_brute, np.asarray(v_shift)))
    return out


def consistency_checks(seed=0, probes=100, schedule: Schedule = LINEAR) -> dict:
    """Score and denoising identities against the single-Gaussian oracle.

    Returns ``{name: (passed, max_error)}``.
    """
    rng = np.random.default_rng(seed)
    mean = np.array([1.5, -0.5])
    scale = 0.7
    spec = data_mod.single_gaussian_spec(mean, scale)
    t = rng.uniform(0.0, 0.99, size=probes)
    x_t = rng.normal(size=(probes, 2)) * 2.0
    v = data_mod.optimal_velocity(spec, x_t, t, 0, schedule)
    a, s, _, _ = schedule.eval(t)
    var = (a**2 * scale**2 + s**2)[:, None]
    analytic = -(x_t - a[:, None] * mean) / var
    score_err = float(np.max(np.abs(schedule.velocity_to_score(x_t, v, t) - analytic)))

    x = rng.normal(size=(probes, 2)) * 3.0
    eps = rng.normal(size=(probes, 2))
    rt = schedule.denoise_expectation(schedule.interpolate(x, eps, t), schedule.target_velocity(x, eps, t), t)
    rt_err = float(np.max(np.abs(rt - x)))

    xt0 = rng.normal(size=(probes, 2))
    t0_err = float(np.max(np.abs(schedule.velocity_to_score(xt0, rng.normal(size=(probes, 2)), 0.0) + xt0)))
    return {
        "score_vs_analytic": (score_err <= 1e-8, score_err),
        "denoise_round_trip": (rt_err <= 1e-12, rt_err),
        "score_at_t0": (t0_err == 0.0, t0_err),
    }


def run(lams=(0.05, 0.5), probes=50, seed=0, shift=optimal_velocity_shift, **kw) -> OracleReport:
    return OracleReport(closed_form_check(lams, probes, seed=seed, shift=shift, **kw), consistency_checks(seed))
