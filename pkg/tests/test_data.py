import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import multivariate_normal, norm

from deltafm import data as D
from deltafm.schedule import LINEAR


def bayes_error(spec, n=20_000, seed=0):
    cloud = spec.sample(n, np.random.default_rng(seed))
    post = D.class_posterior(spec, cloud.points)
    return np.mean(np.argmax(post, axis=1) != cloud.labels)


def test_zero_separation_is_indistinguishable():
    spec = D.two_gaussians_spec(separation=0.0)
    x = np.random.default_rng(0).normal(size=(100, 2)) * 3
    np.testing.assert_allclose(D.class_posterior(spec, x), 0.5, atol=1e-15)


def test_large_separation_error_vanishes():
    assert bayes_error(D.two_gaussians_spec(separation=12.0)) == 0.0
    assert bayes_error(D.two_gaussians_spec(separation=4.0)) < bayes_error(D.two_gaussians_spec())


def test_default_overlap_by_quadrature():
    spec = D.two_gaussians_spec()
    m0, m1 = spec.means[0, 0, 0], spec.means[1, 0, 0]
    overlap, _ = quad(lambda u: min(norm.pdf(u, m0), norm.pdf(u, m1)), -20, 20, points=[0.0], limit=200)
    assert overlap == pytest.approx(0.5, abs=0.02)
    assert 1.3 < m1 - m0 < 1.4


def test_default_bayes_error_near_quarter():
    assert bayes_error(D.two_gaussians_spec(), n=50_000) == pytest.approx(0.25, abs=0.01)


def test_sampling_shapes_and_determinism():
    a, spec = D.two_gaussians(n_per_class=300, seed=4)
    b, _ = D.two_gaussians(n_per_class=300, seed=4)
    assert a.points.shape == (600, 2) and a.num_classes == 2
    np.testing.assert_array_equal(a.points, b.points)
    np.testing.assert_allclose(a.of_class(1).mean(axis=0), spec.class_mean(1), atol=0.2)


def test_bad_inputs():
    with pytest.raises(ValueError):
        D.two_gaussians(scale=0.0)
    with pytest.raises(ValueError):
        D.two_gaussians(n_per_class=0)
    with pytest.raises(ValueError):
        D.GaussianMixtureSpec(np.zeros((1, 2, 2)), np.ones((1, 2, 2)), [[0.5, 0.6]])
    with pytest.raises(ValueError):
        D.GaussianMixtureSpec(np.zeros((1, 1, 2)), -np.ones((1, 1, 2)), [[1.0]])
    with pytest.raises(ValueError):
        D.LabeledPointCloud(np.zeros((2, 2)), [0, 5], 2)


def test_posterior_values():
    spec = D.two_gaussians_spec()
    np.testing.assert_allclose(D.class_posterior(spec, [0.0, 1.7]), [0.5, 0.5], atol=1e-15)
    far = D.two_gaussians_spec(separation=8.0)
    assert D.class_posterior(far, far.class_mean(0))[0] > 0.99
    x = np.random.default_rng(1).normal(size=(500, 2)) * 5
    assert np.max(np.abs(D.class_posterior(spec, x).sum(axis=1) - 1.0)) <= 1e-12


def test_posterior_relabel_invariance():
    g = np.random.default_rng(2)
    means = g.normal(size=(3, 2, 2)) * 2
    variances = g.uniform(0.3, 2.0, size=(3, 2, 2))
    weights = np.array([[0.3, 0.7], [0.5, 0.5], [0.9, 0.1]])
    spec = D.GaussianMixtureSpec(means, variances, weights)
    perm = np.array([2, 0, 1])
    permuted = D.GaussianMixtureSpec(means[perm], variances[perm], weights[perm])
    x = g.normal(size=(50, 2)) * 3
    np.testing.assert_allclose(D.class_posterior(permuted, x), D.class_posterior(spec, x)[:, perm], atol=1e-14)


def monte_carlo_velocity(mean, x_t, t, n=1_000_000, seed=0):
    """Importance-weighted conditional expectation of the target velocity given x_t."""
    g = np.random.default_rng(seed)
    x = mean + g.standard_normal((n, mean.size))
    a, s, ad, sd = (float(v) for v in LINEAR.eval(t))
    logw = -0.5 * np.sum((x_t - a * x) ** 2, axis=1) / s**2
    w = np.exp(logw - logw.max())
    w /= w.sum()
    ex = w @ x
    ee = (x_t - a * ex) / s
    return ad * ex + sd * ee


def test_optimal_velocity_vs_monte_carlo():
    mean = np.array([1.5, -0.5])
    spec = D.single_gaussian_spec(mean)
    probes = [(np.array([0.2, 0.1]), 0.2), (np.array([-1.0, 0.5]), 0.4), (np.array([1.0, 0.0]), 0.5),
              (np.array([0.5, -1.0]), 0.7), (np.array([2.0, 1.0]), 0.3)]
    for k, (x_t, t) in enumerate(probes):
        exact = D.optimal_velocity(spec, x_t, t, 0)
        mc = monte_carlo_velocity(mean, x_t, t, seed=k)
        assert np.linalg.norm(mc - exact) / np.linalg.norm(exact) < 0.01


def test_symmetric_null_velocity_at_origin():
    spec = D.two_gaussians_spec()
    for t in (0.0, 0.3, 0.8):
        np.testing.assert_allclose(D.optimal_velocity(spec, np.zeros(2), t, None), 0.0, atol=1e-15)
        np.testing.assert_allclose(D.optimal_velocity(spec, np.zeros(2), t, spec.num_classes), 0.0, atol=1e-15)


def test_null_is_responsibility_weighted_mixture():
    spec = D.two_gaussians_spec(separation=2.0, scale=0.7)
    g = np.random.default_rng(3)
    for _ in range(20):
        x_t, t = g.normal(size=2) * 2, g.uniform(0.05, 0.95)
        a, s = t, 1 - t
        dens = np.array([multivariate_normal.pdf(x_t, a * spec.means[c, 0], (a**2 * 0.49 + s**2) * np.eye(2))
                         for c in range(2)])
        r = dens / dens.sum()
        mix = sum(r[c] * D.optimal_velocity(spec, x_t, t, c) for c in range(2))
        np.testing.assert_allclose(D.optimal_velocity(spec, x_t, t, None), mix, rtol=1e-10, atol=1e-12)


def test_optimal_velocity_vectorized_over_time():
    spec = D.two_gaussians_spec()
    x = np.random.default_rng(0).normal(size=(4, 2))
    t = np.array([0.1, 0.3, 0.6, 0.9])
    rows = D.optimal_velocity(spec, x, t, [0, 1, 2, 0])
    for i, lab in enumerate([0, 1, None, 0]):
        np.testing.assert_allclose(rows[i], D.optimal_velocity(spec, x[i], t[i], lab), rtol=1e-13)
    with pytest.raises(ValueError):
        D.optimal_velocity(spec, x, 0.5, 7)


def test_oracle_score_consistency():
    spec = D.single_gaussian_spec([0.5, -1.0], 0.8)
    x, t = np.array([[0.3, 0.2]]), 0.4
    v = D.optimal_velocity(spec, x, t, 0)
    a, s = t, 1 - t
    var = a**2 * 0.64 + s**2
    analytic = -(x - a * np.array([0.5, -1.0])) / var
    np.testing.assert_allclose(LINEAR.velocity_to_score(x, v, t), analytic, rtol=1e-8)


def test_csv_round_trip(tmp_path):
    cloud, _ = D.two_gaussians(n_per_class=50, seed=1)
    path = tmp_path / "pts.csv"
    D.save_csv(path, cloud.points, cloud.labels)
    back = D.load_csv(path)
    np.testing.assert_array_equal(back.points, cloud.points)
    np.testing.assert_array_equal(back.labels, cloud.labels)


def test_csv_missing_column_names_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("class,dim0,dim1\n0,1.0,2.0\n1,3.0\n")
    with pytest.raises(D.CSVFormatError, match="line 3"):
        D.load_csv(path)


def test_csv_other_errors(tmp_path):
    for text in ("", "label,x,y\n0,1,2\n", "class,dim0\n", "class,dim0\n0,abc\n"):
        path = tmp_path / "bad.csv"
        path.write_text(text)
        with pytest.raises(D.CSVFormatError):
            D.load_csv(path)


def test_csv_label_densification(tmp_path):
    path = tmp_path / "pts.csv"
    path.write_text("class,dim0\n7,1.0\n3,2.0\n7,0.5\n")
    cloud = D.load_csv(path)
    assert cloud.label_mapping == {3: 0, 7: 1}
    np.testing.assert_array_equal(cloud.labels, [1, 0, 1])
    assert cloud.num_classes == 2 and cloud.dim == 1
