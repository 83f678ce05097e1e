import math

import numpy as np
import pytest
from scipy.special import logsumexp
from scipy.stats import norm

from conftest import dataset_from
from tckae.mts import TimeSeriesDataset
from tckae.tck import (GmmMember, MemberSpec, TckConfig, TckModel, _build_prior, _update_means,
                       _view, fit_tck, kernel_matrix, log_likelihood_observed, map_em_fit,
                       posteriors, sample_member_configs, time_correlation)


def spec_for(n_samples, G, T, V, a0=0.5, b0=0.5, n0=0.1, seed=0, segment=None, attrs=None):
    segment = segment or (0, T)
    attrs = tuple(range(V)) if attrs is None else attrs
    return MemberSpec(0, G, attrs, segment, a0, b0, n0, np.arange(n_samples), seed)


def member_1d(means, weights=None, var=1.0):
    G = len(means)
    weights = np.full(G, 1.0 / G) if weights is None else np.asarray(weights, float)
    spec = MemberSpec(0, G, (0,), (0, 1), 0.5, 0.5, 0.1, np.arange(1), 0)
    return GmmMember(spec, weights, np.asarray(means, float).reshape(G, 1, 1),
                     np.full((G, 1, 1), var))


# ---------------------------------------------------------------- sampling

def test_member_count_and_components():
    specs = sample_member_configs(TckConfig(max_components=3, realizations=2), 10, 4, 30)
    assert [s.n_components for s in specs] == [2, 2, 3, 3]


def test_sampling_is_deterministic():
    cfg = TckConfig(max_components=4, realizations=3, master_seed=9)
    a = sample_member_configs(cfg, 12, 5, 40)
    b = sample_member_configs(cfg, 12, 5, 40)
    for x, y in zip(a, b):
        assert (x.attributes, x.segment, x.a0, x.b0, x.n0, x.seed) == \
               (y.attributes, y.segment, y.a0, y.b0, y.n0, y.seed)
        np.testing.assert_array_equal(x.subsample, y.subsample)


def test_sampled_specs_respect_ranges():
    cfg = TckConfig(max_components=5, realizations=20, master_seed=2)
    T, V, N = 20, 10, 50
    for s in sample_member_configs(cfg, T, V, N):
        assert 6 <= s.segment_length <= T and 0 <= s.segment[0] and s.segment[1] <= T
        assert 2 <= len(s.attributes) <= V and len(set(s.attributes)) == len(s.attributes)
        assert 0.1 <= s.a0 <= 1 and 0.1 <= s.b0 <= 1 and 0.05 <= s.n0 <= 0.2
        assert len(s.subsample) == 40 and len(np.unique(s.subsample)) == 40


def test_infeasible_segment():
    with pytest.raises(ValueError):
        sample_member_configs(TckConfig(min_segment=8), 5, 3, 30)
    with pytest.raises(ValueError):
        sample_member_configs(TckConfig(min_attributes=4), 10, 3, 30)


def test_config_validation():
    with pytest.raises(ValueError):
        TckConfig(max_components=1)
    with pytest.raises(ValueError):
        TckConfig(a0_range=(0.0, 1.0))
    with pytest.raises(ValueError):
        TckConfig(b0_range=(0.5, 0.2))


# ---------------------------------------------------------------- likelihood

def test_loglik_all_missing_is_zero():
    x = np.array([1.0, 2.0])
    assert log_likelihood_observed(x, [False, False], np.zeros(2), np.ones(2)) == 0.0


def test_loglik_at_mean():
    val = log_likelihood_observed(np.array([3.0]), [True], np.array([3.0]), np.array([1.0]))
    assert val == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-15)


def test_loglik_matches_density_product():
    x = np.array([0.3, -1.2, 7.0])
    mask = np.array([True, True, False])
    mu = np.array([0.1, -0.5, 0.0])
    var = np.array([0.7, 2.5, 1.0])
    oracle = math.log(norm.pdf(0.3, 0.1, math.sqrt(0.7)) * norm.pdf(-1.2, -0.5, math.sqrt(2.5)))
    assert log_likelihood_observed(x, mask, mu, var) == pytest.approx(oracle, abs=1e-12)


def test_loglik_ignores_values_under_mask():
    mu, var = np.zeros(2), np.ones(2)
    a = log_likelihood_observed(np.array([0.5, np.nan]), [True, False], mu, var)
    b = log_likelihood_observed(np.array([0.5, 1e9]), [True, False], mu, var)
    assert a == b


# ---------------------------------------------------------------- posteriors

def test_posterior_of_fully_missing_series_is_weights():
    member = member_1d([0.0, 10.0], weights=[0.3, 0.7])
    ds = TimeSeriesDataset(np.full((1, 1, 1), np.nan), np.zeros((1, 1, 1), bool))
    np.testing.assert_allclose(posteriors(member, ds)[0], [0.3, 0.7], atol=1e-15)


def test_posterior_bayes_oracle():
    member = member_1d([0.0, 10.0])
    ds = dataset_from([[[0.0]]])
    # equal priors, unit variances: ratio exp(-(0-10)^2 / 2)
    r = math.exp(-50.0)
    np.testing.assert_allclose(posteriors(member, ds)[0], [1 / (1 + r), r / (1 + r)],
                               rtol=1e-12, atol=1e-30)


def test_posterior_rows_sum_to_one(small_synth):
    cfg = TckConfig(max_components=4, realizations=2, master_seed=5)
    model = fit_tck(small_synth, cfg)
    rng = np.random.default_rng(0)
    mask = rng.random(small_synth.shape) < 0.3
    mask[:5] = False                       # all-missing rows included
    ds = TimeSeriesDataset(np.where(mask, small_synth.masked_values(), np.nan), mask)
    for m in model.members:
        P = posteriors(m, ds)
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-9)


def test_posterior_no_underflow_far_from_all_components():
    member = member_1d([0.0, 1.0], var=1e-4)
    P = posteriors(member, dataset_from([[[1e4]]]))
    assert np.all(np.isfinite(P)) and P.sum() == pytest.approx(1.0)


# ---------------------------------------------------------------- MAP-EM

def textbook_em(x, weights, mu, var, iters):
    """Plain ML EM for a diagonal GMM on complete data (scipy densities)."""
    for _ in range(iters):
        logp = norm.logpdf(x[:, None, :], mu[None], np.sqrt(var[None])).sum(axis=2) + np.log(weights)
        r = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
        Nk = r.sum(axis=0)
        weights = Nk / len(x)
        mu = (r.T @ x) / Nk[:, None]
        var = np.stack([(r[:, g:g + 1] * (x - mu[g]) ** 2).sum(axis=0) / Nk[g]
                        for g in range(len(Nk))])
    logp = norm.logpdf(x[:, None, :], mu[None], np.sqrt(var[None])).sum(axis=2) + np.log(weights)
    return np.exp(logp - logsumexp(logp, axis=1, keepdims=True))


def test_matches_textbook_em_when_priors_vanish():
    rng = np.random.default_rng(4)
    T, V, G, N = 3, 2, 3, 90
    centers = rng.normal(0, 2, size=(G, T * V))
    x = centers[rng.integers(G, size=N)] + rng.normal(size=(N, T * V))
    ds = dataset_from(x.reshape(N, T, V))
    spec = spec_for(N, G, T, V, a0=0.0, b0=0.0)
    w0 = np.array([0.2, 0.3, 0.5])
    mu0 = x[[0, 1, 2]]
    var0 = np.ones((G, T * V))
    member = map_em_fit(spec, ds, max_iters=15, tol=-np.inf,
                        init=(w0, mu0.reshape(G, T, V), var0.reshape(G, T, V)))
    oracle = textbook_em(x, w0, mu0, var0, iters=15)
    np.testing.assert_allclose(posteriors(member, ds), oracle, atol=1e-6)


def test_single_component_mean_equals_observed_mean():
    rng = np.random.default_rng(8)
    v = rng.normal(size=(30, 4, 2))
    v[rng.random(v.shape) < 0.3] = np.nan
    ds = dataset_from(v)
    spec = spec_for(30, 1, 4, 2, a0=0.7, b0=0.4, n0=0.15)
    member = map_em_fit(spec, ds, max_iters=50, tol=1e-12)
    np.testing.assert_allclose(member.weights, [1.0])
    # the prior is centred at the observed mean, which is also the data's weighted
    # mean for G = 1, so the MAP mean is their (identical) shrinkage combination
    obs_mean = np.nanmean(v, axis=0)
    np.testing.assert_allclose(member.means[0], obs_mean, atol=1e-10)
    # variance fixed point: (S + b0 s0^2) / (W + b0)
    x, m = _view(spec, ds)
    prior = _build_prior(spec, x, m)
    W = m.sum(axis=0)
    S = (m * (x - member.means[0].ravel()) ** 2).sum(axis=0)
    s0 = np.tile(prior.var, 4)
    np.testing.assert_allclose(member.variances[0].ravel(), (S + 0.4 * s0) / (W + 0.4), rtol=1e-8)


def test_mean_update_shrinkage_closed_form():
    # one step, one attribute: prior precision is a0 / s0^2 with no time coupling
    spec = spec_for(3, 2, 1, 1, a0=0.8)
    x = np.array([[1.0], [2.0], [6.0]])
    m = np.ones_like(x, dtype=bool)
    prior = _build_prior(spec, x, m)
    W = np.array([[2.0], [0.5]])
    S1 = np.array([[3.0], [4.0]])
    var = np.array([[0.5], [2.0]])
    mu = _update_means(W, S1, var, prior, np.zeros((2, 1)))
    m0, s0 = prior.mean[0, 0], prior.var[0]
    expected = (S1 / var + 0.8 * m0 / s0) / (W / var + 0.8 / s0)
    np.testing.assert_allclose(mu, expected, rtol=1e-12)
    assert m0 == pytest.approx(3.0) and s0 == pytest.approx(14.0 / 3.0)


def test_time_correlation_is_valid():
    R = time_correlation(12, 2.4)
    np.testing.assert_allclose(np.diag(R), 1.0)
    assert np.linalg.eigvalsh(R).min() > 0
    np.testing.assert_allclose(time_correlation(4, 0.0), np.eye(4))


def test_separated_clouds():
    rng = np.random.default_rng(21)
    a = rng.normal(-5, 0.5, size=(40, 3, 2))
    b = rng.normal(5, 0.5, size=(40, 3, 2))
    v = np.concatenate([a, b])
    v[rng.random(v.shape) < 0.2] = np.nan
    ds = dataset_from(v)
    member = map_em_fit(spec_for(80, 2, 3, 2, seed=3), ds, max_iters=30)
    P = posteriors(member, ds)
    ga, gb = P[:40].mean(axis=0).argmax(), P[40:].mean(axis=0).argmax()
    assert ga != gb
    assert np.all(P[:40, ga] >= 0.99) and np.all(P[40:, gb] >= 0.99)


def _assert_monotone(member):
    tr = np.asarray(member.objective_trace)
    for k in range(1, len(tr)):
        if k in member.restarts:
            continue
        assert tr[k] >= tr[k - 1] - 1e-9 * max(1.0, abs(tr[k - 1])), (member.spec.index, k)


def test_objective_monotone_on_random_members(small_synth):
    cfg = TckConfig(max_components=6, realizations=4, min_segment=3, master_seed=77,
                    em_max_iters=40, em_tol=0.0)
    model = fit_tck(small_synth, cfg)
    assert len(model.members) >= 20
    for member in model.members:
        assert len(member.objective_trace) > 2
        _assert_monotone(member)


def test_collapsed_component_is_reseeded():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(20, 2, 1))
    ds = dataset_from(x)
    spec = spec_for(20, 2, 2, 1)
    far = np.array([[[0.0], [0.0]], [[1e3], [1e3]]])
    member = map_em_fit(spec, ds, max_iters=10,
                        init=([0.5, 0.5], far, np.full((2, 2, 1), 1e-3)))
    assert member.restarts
    assert np.all(member.weights > 1e-8)
    _assert_monotone(member)


# ---------------------------------------------------------------- kernel

def test_kernel_hand_values_orthogonal():
    member = member_1d([0.0, 10.0])
    model = TckModel([member], TckConfig())
    K = kernel_matrix(model, dataset_from([[[0.0]], [[10.0]]]))
    np.testing.assert_allclose(K, np.eye(2), atol=1e-12)


def test_kernel_hand_values_uniform():
    member = member_1d([0.0, 10.0], weights=[0.5, 0.5])
    ds = TimeSeriesDataset(np.full((2, 1, 1), np.nan), np.zeros((2, 1, 1), bool))
    K = kernel_matrix(TckModel([member], TckConfig()), ds)
    np.testing.assert_allclose(K, np.full((2, 2), 0.5), atol=1e-15)


@pytest.fixture(scope="module")
def fitted(small_synth):
    return fit_tck(small_synth, TckConfig(max_components=4, realizations=3, master_seed=3))


def test_kernel_symmetric_psd_cauchy_schwarz(fitted, small_synth):
    K = kernel_matrix(fitted, small_synth)
    assert np.max(np.abs(K - K.T)) <= 1e-9
    ev = np.linalg.eigvalsh(K)
    assert ev.min() >= -1e-8 * ev.max()
    d = np.sqrt(np.diag(K))
    assert np.all(K <= np.outer(d, d) + 1e-9)
    assert np.all(K >= 0)


def test_cross_kernel_shape_and_consistency(fitted, small_synth):
    a, b = small_synth.subset(slice(0, 40)), small_synth.subset(slice(40, None))
    Kab = kernel_matrix(fitted, a, b)
    assert Kab.shape == (40, 20)
    full = kernel_matrix(fitted, small_synth)
    np.testing.assert_allclose(Kab, full[:40, 40:], atol=1e-10)


def test_refit_is_bitwise_identical(small_synth, fitted):
    again = fit_tck(small_synth, fitted.config)
    for m1, m2 in zip(fitted.members, again.members):
        assert np.array_equal(m1.means, m2.means)
        assert np.array_equal(m1.variances, m2.variances)
        assert np.array_equal(m1.weights, m2.weights)


def test_threaded_fit_matches_sequential(small_synth, fitted):
    par = fit_tck(small_synth, fitted.config, n_jobs=3)
    np.testing.assert_allclose(kernel_matrix(par, small_synth),
                               kernel_matrix(fitted, small_synth), rtol=0, atol=1e-12)


def test_different_seed_gives_correlated_but_different_kernel(small_synth, fitted):
    other = fit_tck(small_synth, TckConfig(max_components=4, realizations=3, master_seed=4))
    K1, K2 = kernel_matrix(fitted, small_synth), kernel_matrix(other, small_synth)
    assert not np.allclose(K1, K2)
    assert np.corrcoef(K1.ravel(), K2.ravel())[0, 1] > 0.5


def test_model_json_round_trip(tmp_path, fitted, small_synth):
    fitted.save(tmp_path / "m.json")
    back = TckModel.load(tmp_path / "m.json")
    assert len(back.members) == len(fitted.members)
    np.testing.assert_array_equal(kernel_matrix(back, small_synth), kernel_matrix(fitted, small_synth))


def test_masked_values_do_not_matter(small_synth, fitted):
    junk = np.random.default_rng(0).normal(0, 1e3, size=small_synth.shape)
    perturbed = TimeSeriesDataset(np.where(small_synth.mask, small_synth.values, junk),
                                  small_synth.mask)
    for m in fitted.members:
        assert np.array_equal(posteriors(m, small_synth), posteriors(m, perturbed))
    assert np.array_equal(kernel_matrix(fitted, small_synth), kernel_matrix(fitted, perturbed))
    refit = fit_tck(perturbed, fitted.config)
    for m1, m2 in zip(fitted.members, refit.members):
        assert np.array_equal(m1.means, m2.means)
