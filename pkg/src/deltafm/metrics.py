"""Sample-quality metrics for low-dimensional generators."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from deltafm.data import class_posterior

EXACT_LIMIT = 4096


def _points(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2 or a.shape[0] == 0:
        raise ValueError("point sets must be non-empty (n, d) arrays")
    return a


def wasserstein2(a, b, mode="auto", projections=128, seed=0) -> float:
    """Empirical 2-Wasserstein distance between two point sets.

    ``exact`` solves the optimal assignment (equal sizes up to 4096 points);
    ``sliced`` averages squared 1-D distances over random directions.
    ``auto`` picks exact whenever it is allowed.
    """
    a, b = _points(a), _points(b)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    exact_ok = a.shape[0] == b.shape[0] and a.shape[0] <= EXACT_LIMIT
    if mode == "auto":
        mode = "exact" if exact_ok else "sliced"
    if mode == "exact":
        if not exact_ok:
            raise ValueError(f"exact mode needs equal sizes <= {EXACT_LIMIT}, got {a.shape[0]} and {b.shape[0]}")
        cost = cdist(a, b, "sqeuclidean")
        rows, cols = linear_sum_assignment(cost)
        return float(np.sqrt(cost[rows, cols].mean()))
    if mode != "sliced":
        raise ValueError(f"unknown mode {mode!r}")
    return sliced_wasserstein2(a, b, projections, seed)


def sliced_wasserstein2(a, b, projections=128, seed=0) -> float:
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((projections, a.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pa = np.sort(a @ dirs.T, axis=0)
    pb = np.sort(b @ dirs.T, axis=0)
    if pa.shape[0] != pb.shape[0]:
        # compare quantile functions on a common grid
        q = (np.arange(max(pa.shape[0], pb.shape[0])) + 0.5) / max(pa.shape[0], pb.shape[0])
        pa = np.quantile(pa, q, axis=0, method="inverted_cdf")
        pb = np.quantile(pb, q, axis=0, method="inverted_cdf")
    return float(np.sqrt(np.mean((pa - pb) ** 2)))


def ambiguity_fraction(samples, labels, spec, threshold=0.5) -> float:
    """Share of samples whose posterior for their intended class is <= ``threshold``."""
    if not 1.0 / spec.num_classes <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [1/{spec.num_classes}, 1], got {threshold}")
    samples = _points(samples)
    labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (samples.shape[0],))
    post = class_posterior(spec, samples)
    return float(np.mean(post[np.arange(len(labels)), labels] <= threshold))


def mean_nn_distance(paths_a, paths_b) -> float:
    """Mean over time of the average distance from each A state to its nearest B state."""
    a = np.asarray(paths_a, dtype=np.float64)
    b = np.asarray(paths_b, dtype=np.float64)
    if a.ndim != 3 or b.ndim != 3 or a.shape[1:] != b.shape[1:]:
        raise ValueError(f"trajectory sets must share the time grid: {a.shape} vs {b.shape}")
    per_step = [cKDTree(b[:, k]).query(a[:, k])[0].mean() for k in range(a.shape[1])]
    return float(np.mean(per_step))


def flow_overlap(paths_a, paths_b) -> float:
    """exp(-mean nearest-neighbour distance); 1 means the two flows coincide."""
    return float(np.exp(-mean_nn_distance(paths_a, paths_b)))


@dataclass
class MetricsReport:
    wasserstein2: float
    ambiguity_fraction: float
    flow_overlap: float
    flow_distance: float
    per_class: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.isnan(self.ambiguity_fraction) and not 0.0 <= self.ambiguity_fraction <= 1.0:
            raise ValueError("ambiguity_fraction must lie in [0, 1]")

    def to_text(self) -> str:
        lines = [f"wasserstein2={self.wasserstein2!r}", f"ambiguity_fraction={self.ambiguity_fraction!r}",
                 f"flow_overlap={self.flow_overlap!r}", f"flow_distance={self.flow_distance!r}"]
        for c, row in sorted(self.per_class.items()):
            lines += [f"class{c}.{k}={v!r}" for k, v in row.items()]
        return "\n".join(lines) + "\n"

    def rows(self):
        """One row per class followed by the aggregate row."""
        out = [{"class": str(c), **row, "flow_overlap": "", "flow_distance": ""}
               for c, row in sorted(self.per_class.items())]
        out.append({"class": "all", "wasserstein2": self.wasserstein2,
                    "ambiguity_fraction": self.ambiguity_fraction,
                    "flow_overlap": self.flow_overlap, "flow_distance": self.flow_distance})
        return out
