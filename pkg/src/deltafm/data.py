"""Synthetic class-conditional Gaussian data with closed-form oracles."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import brentq
from scipy.special import logsumexp, ndtr

from deltafm.schedule import LINEAR, Schedule

TARGET_OVERLAP = 0.5


class CSVFormatError(ValueError):
    pass


@dataclass
class LabeledPointCloud:
    points: np.ndarray
    labels: np.ndarray
    num_classes: int
    label_mapping: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.points.shape[0] != self.labels.shape[0]:
            raise ValueError("points and labels differ in length")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels must lie in [0, num_classes)")

    @property
    def dim(self):
        return self.points.shape[1]

    def __len__(self):
        return self.points.shape[0]

    def of_class(self, y):
        return self.points[self.labels == y]


@dataclass
class GaussianMixtureSpec:
    """Per-class diagonal Gaussian mixtures.

    ``means`` and ``variances`` have shape (classes, components, dim);
    ``weights`` has shape (classes, components) with rows summing to one.
    """

    means: np.ndarray
    variances: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        self.variances = np.asarray(self.variances, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.means.ndim != 3 or self.variances.shape != self.means.shape:
            raise ValueError("means and variances must share shape (classes, components, dim)")
        if self.weights.shape != self.means.shape[:2]:
            raise ValueError("weights must have shape (classes, components)")
        if np.any(self.variances <= 0):
            raise ValueError("covariances must be positive")
        if not np.allclose(self.weights.sum(axis=1), 1.0, atol=1e-12):
            raise ValueError("component weights of each class must sum to 1")

    @property
    def num_classes(self):
        return self.means.shape[0]

    @property
    def dim(self):
        return self.means.shape[2]

    def to_dict(self):
        return {"means": self.means.tolist(), "variances": self.variances.tolist(), "weights": self.weights.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["means"], d["variances"], d["weights"])

    def sample(self, n_per_class, rng) -> LabeledPointCloud:
        pts, labels = [], []
        for c in range(self.num_classes):
            comp = rng.choice(self.means.shape[1], size=n_per_class, p=self.weights[c])
            z = rng.standard_normal((n_per_class, self.dim))
            pts.append(self.means[c, comp] + np.sqrt(self.variances[c, comp]) * z)
            labels.append(np.full(n_per_class, c))
        return LabeledPointCloud(np.concatenate(pts), np.concatenate(labels), self.num_classes)

    def class_mean(self, y):
        return self.weights[y] @ self.means[y]

    def marginal_mean(self):
        return np.mean([self.class_mean(c) for c in range(self.num_classes)], axis=0)


def overlap_coefficient(separation, scale=1.0):
    """Integral of min(p0, p1) for two isotropic Gaussians ``separation`` apart."""
    return 2.0 * ndtr(-abs(separation) / (2.0 * scale))


def default_separation(scale=1.0, target=TARGET_OVERLAP):
    return brentq(lambda s: overlap_coefficient(s, scale) - target, 0.0, 20.0 * scale, xtol=1e-14)


def two_gaussians_spec(separation=None, scale=1.0) -> GaussianMixtureSpec:
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    if separation is None:
        separation = default_separation(scale)
    means = np.array([[[-separation / 2.0, 0.0]], [[separation / 2.0, 0.0]]])
    return GaussianMixtureSpec(means, np.full_like(means, scale**2), np.ones((2, 1)))


def two_gaussians(separation=None, scale=1.0, n_per_class=5000, seed=0):
    """Two unit-weight 2-D Gaussian classes on the horizontal axis.

    The default separation gives an overlap coefficient of 0.5, i.e. a Bayes
    error of 0.25 between the classes.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    spec = two_gaussians_spec(separation, scale)
    return spec.sample(n_per_class, np.random.default_rng(seed)), spec


def single_gaussian_spec(mean, scale=1.0) -> GaussianMixtureSpec:
    mean = np.asarray(mean, dtype=np.float64)
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    return GaussianMixtureSpec(mean[None, None, :], np.full((1, 1, mean.size), scale**2), np.ones((1, 1)))


def _component_logpdf(spec, x, alpha, sigma):
    # x: (n, d); alpha, sigma: scalars or (n,) -> (n, classes, components)
    alpha = np.reshape(alpha, (-1, 1, 1, 1))
    sigma = np.reshape(sigma, (-1, 1, 1, 1))
    var = alpha**2 * spec.variances[None] + sigma**2
    diff = x[:, None, None, :] - alpha * spec.means[None]
    return -0.5 * np.sum(diff**2 / var + np.log(2 * np.pi * var), axis=-1)


def class_posterior(spec: GaussianMixtureSpec, x) -> np.ndarray:
    """Bayes posterior over classes under equal priors."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    logp = logsumexp(_component_logpdf(spec, x, 1.0, 0.0) + np.log(spec.weights)[None], axis=2)
    post = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
    return post[0] if single else post


def optimal_velocity(spec: GaussianMixtureSpec, x_t, t, y, schedule: Schedule = LINEAR):
    """Exact E[alpha_dot x + sigma_dot eps | x_t, y]; ``y=None`` marginalizes classes.

    ``t`` may be a scalar or one time per row. Labels equal to
    ``spec.num_classes`` are also treated as the null class.
    """
    x = np.asarray(x_t, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    n = x.shape[0]
    a, s, ad, sd = (np.broadcast_to(v, (n,)).reshape(n, 1, 1, 1) for v in schedule.eval(t))
    var = a**2 * spec.variances[None] + s**2
    if np.any(var <= 0):
        raise ValueError("singular covariance for x_t")

    logw = np.log(spec.weights)  # (C, K)
    resid = x[:, None, None, :] - a * spec.means[None]
    logpdf = -0.5 * np.sum(resid**2 / var + np.log(2 * np.pi * var), axis=-1)
    ex = spec.means[None] + (a * spec.variances[None] / var) * resid
    ee = (s / var) * resid
    v_comp = ad * ex + sd * ee  # (n, C, K, d)

    labels = np.broadcast_to(np.asarray(spec.num_classes if y is None else y), (n,))
    out = np.empty_like(x)
    for lab in np.unique(labels):
        rows = labels == lab
        m = int(rows.sum())
        if lab == spec.num_classes:
            logr = (logpdf[rows] + logw[None]).reshape(m, -1)
            vc = v_comp[rows].reshape(m, -1, x.shape[1])
        elif 0 <= lab < spec.num_classes:
            logr = logpdf[rows, lab] + logw[lab][None]
            vc = v_comp[rows, lab]
        else:
            raise ValueError(f"label {lab} out of range")
        r = np.exp(logr - logsumexp(logr, axis=1, keepdims=True))
        out[rows] = np.einsum("nk,nkd->nd", r, vc)
    return out[0] if single else out


class OracleModel:
    """The analytic optimal velocity field behind the model interface.

    ``scale`` multiplies the field; ``1 / (1 - lam)`` turns it into the
    contrastive optimum when the mean trajectory vanishes.
    """

    def __init__(self, spec: GaussianMixtureSpec, schedule: Schedule = LINEAR, scale: float = 1.0):
        self.spec = spec
        self.schedule = schedule
        self.scale = scale
        self.input_dim = spec.dim
        self.num_classes = spec.num_classes

    @property
    def null_class(self):
        return self.num_classes

    def forward(self, x_t, t, y):
        return self.scale * optimal_velocity(self.spec, x_t, t, y, self.schedule)

    __call__ = forward


# -- CSV ----------------------------------------------------------------------

def save_csv(path, points, labels) -> None:
    points = np.atleast_2d(points)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class"] + [f"dim{i}" for i in range(points.shape[1])])
        for lab, row in zip(labels, points):
            w.writerow([int(lab)] + [repr(float(v)) for v in row])


def load_csv(path) -> LabeledPointCloud:
    """Read ``class,dim0,dim1,...`` rows; labels are densified to 0..K-1.

    The original-to-dense mapping is kept in ``label_mapping``.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CSVFormatError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if len(header) < 2 or header[0] != "class" or header[1:] != [f"dim{i}" for i in range(len(header) - 1)]:
        raise CSVFormatError(f"{path}: line 1: expected header 'class,dim0,...', got {','.join(header)!r}")
    dim = len(header) - 1
    raw_labels, pts = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != dim + 1:
            raise CSVFormatError(f"{path}: line {lineno}: expected {dim + 1} columns, got {len(row)}")
        try:
            raw_labels.append(int(row[0]))
            pts.append([float(c) for c in row[1:]])
        except ValueError as exc:
            raise CSVFormatError(f"{path}: line {lineno}: {exc}") from exc
    if not pts:
        raise CSVFormatError(f"{path}: no data rows")
    uniq = sorted(set(raw_labels))
    mapping = {orig: dense for dense, orig in enumerate(uniq)}
    labels = np.array([mapping[v] for v in raw_labels])
    return LabeledPointCloud(np.array(pts), labels, len(uniq), mapping)
