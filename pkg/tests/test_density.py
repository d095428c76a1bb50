import math

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from conftest import random_spd, trapezoid_marginal
from sfexplain.dataset import Dataset
from sfexplain.density import (
    DegenerateCluster,
    EgmmConfig,
    EgmmModel,
    GaussianComponent,
    GmmModel,
    _rank_by_score,
    egmm_fit,
    egmm_log_marginal,
    fit_gmm,
    gmm_log_marginal,
    identity_egmm,
    load_egmm,
    rank_points,
    save_egmm,
)

LOG_STD_NORMAL_PEAK = -0.5 * math.log(2.0 * math.pi)


def single_standard_normal(n):
    return GmmModel(
        components=(GaussianComponent(weight=1.0, mean=np.zeros(n), covariance=np.eye(n)),),
        n=n,
    )


def random_mixture(rng, n, k, spread=3.0):
    weights = rng.dirichlet(np.ones(k))
    means = [rng.normal(scale=spread, size=n) for _ in range(k)]
    covs = [random_spd(rng, n, scale=rng.uniform(0.3, 1.5)) for _ in range(k)]
    model = GmmModel(
        components=tuple(
            GaussianComponent(weight=float(w), mean=m, covariance=c)
            for w, m, c in zip(weights, means, covs)
        ),
        n=n,
    )
    return model, weights, means, covs


class TestFitGmm:
    def test_single_component_recovers_sample_moments(self):
        rng = np.random.default_rng(11)
        X = rng.normal(size=(1000, 2))
        model = fit_gmm(X, k=1, seed=0)
        comp = model.components[0]
        # Independent oracle: moments computed directly from the sample.
        sample_mean = X.mean(axis=0)
        sample_cov = np.cov(X, rowvar=False, ddof=0)
        np.testing.assert_allclose(comp.mean, sample_mean, atol=1e-8)
        np.testing.assert_allclose(comp.covariance, sample_cov, atol=1e-4)
        # Law-of-large-numbers bounds from the contract.
        assert np.all(np.abs(comp.mean) < 0.1)
        assert np.all(np.abs(np.diag(comp.covariance) - 1.0) < 0.15)

    def test_one_component_per_point_dominates_single_fit(self):
        rng = np.random.default_rng(5)
        X = rng.normal(scale=4.0, size=(8, 2))
        per_point = fit_gmm(X, k=8, seed=1)
        single = fit_gmm(X, k=1, seed=1)
        for x in X:
            many = gmm_log_marginal(per_point, x, [0, 1])
            one = gmm_log_marginal(single, x, [0, 1])
            assert many >= one

    def test_log_likelihood_monotone(self):
        rng = np.random.default_rng(2)
        for trial in range(5):
            X = rng.normal(size=(rng.integers(50, 200), rng.integers(1, 4)))
            model = fit_gmm(X, k=int(rng.integers(1, 4)), seed=trial)
            lls = np.array(model.em_log_likelihoods)
            assert np.all(np.diff(lls) >= -1e-9)

    def test_requires_enough_points(self):
        with pytest.raises(ValueError):
            fit_gmm(np.zeros((2, 1)), k=3, seed=0)

    def test_degenerate_data_surfaces_after_retries(self):
        # Zero-variance data defeats every retry.
        with pytest.raises(DegenerateCluster):
            fit_gmm(np.ones((20, 2)), k=2, seed=0)


class TestGmmLogMarginal:
    def test_standard_normal_singleton(self):
        model = single_standard_normal(2)
        value = gmm_log_marginal(model, np.array([0.0, 123.4]), {0})
        assert value == pytest.approx(LOG_STD_NORMAL_PEAK, abs=1e-12)

    def test_full_subset_equals_joint(self):
        rng = np.random.default_rng(7)
        model, weights, means, covs = random_mixture(rng, 3, 2)
        x = rng.normal(size=3)
        full = gmm_log_marginal(model, x, [0, 1, 2])
        # Independent oracle: scipy mixture evaluation.
        direct = math.log(
            sum(
                w * multivariate_normal.pdf(x, mean=m, cov=c)
                for w, m, c in zip(weights, means, covs)
            )
        )
        assert full == pytest.approx(direct, rel=1e-10)

    def test_marginal_matches_numerical_integration(self):
        rng = np.random.default_rng(13)
        model, weights, means, covs = random_mixture(rng, 3, 2)
        x = rng.normal(size=3)
        got = math.exp(gmm_log_marginal(model, x, [0, 2]))
        want = trapezoid_marginal(weights, means, covs, x, keep=[0, 2], drop=[1])
        assert got == pytest.approx(want, rel=1e-3)

    def test_singleton_normalizes_to_one(self):
        rng = np.random.default_rng(17)
        model, weights, means, covs = random_mixture(rng, 2, 3)
        lows = [m[0] - 8 * math.sqrt(c[0, 0]) for m, c in zip(means, covs)]
        highs = [m[0] + 8 * math.sqrt(c[0, 0]) for m, c in zip(means, covs)]
        grid = np.linspace(min(lows), max(highs), 2001)
        dens = [math.exp(gmm_log_marginal(model, np.array([g, 0.0]), [0])) for g in grid]
        assert np.trapezoid(dens, grid) == pytest.approx(1.0, abs=1e-3)

    def test_marginalization_consistency(self):
        # Integrating the {0,1} marginal over feature 1 matches the {0} marginal.
        rng = np.random.default_rng(23)
        model, weights, means, covs = random_mixture(rng, 3, 2)
        x = rng.normal(size=3)
        lows = [m[1] - 8 * math.sqrt(c[1, 1]) for m, c in zip(means, covs)]
        highs = [m[1] + 8 * math.sqrt(c[1, 1]) for m, c in zip(means, covs)]
        grid = np.linspace(min(lows), max(highs), 2001)
        dens = []
        for g in grid:
            probe = x.copy()
            probe[1] = g
            dens.append(math.exp(gmm_log_marginal(model, probe, [0, 1])))
        integrated = np.trapezoid(dens, grid)
        assert integrated == pytest.approx(math.exp(gmm_log_marginal(model, x, [0])), rel=1e-3)

    def test_empty_subset_rejected(self):
        model = single_standard_normal(2)
        with pytest.raises(ValueError):
            gmm_log_marginal(model, np.zeros(2), [])

    def test_out_of_range_subset_rejected(self):
        model = single_standard_normal(2)
        with pytest.raises(ValueError):
            gmm_log_marginal(model, np.zeros(2), [2])


class TestEgmmFit:
    def test_default_config_counts(self):
        rng = np.random.default_rng(31)
        X = np.vstack([rng.normal(size=(200, 2)), rng.normal(loc=3.0, size=(100, 2))])
        model = egmm_fit(X, EgmmConfig(seed=3))
        assert 41 <= len(model.members) <= 45
        counts = sorted({len(m.components) for m in model.members})
        assert set(counts) <= {3, 4, 5}

    def test_zero_retention_quantile_keeps_all(self):
        rng = np.random.default_rng(37)
        X = rng.normal(size=(120, 2))
        config = EgmmConfig(members_per_k=2, component_counts=(2, 3), retention_quantile=0.0, seed=1)
        model = egmm_fit(X, config)
        assert len(model.members) == 4

    def test_deterministic(self):
        rng = np.random.default_rng(41)
        X = rng.normal(size=(150, 3))
        config = EgmmConfig(members_per_k=2, component_counts=(2,), seed=8)
        m1 = egmm_fit(X, config)
        m2 = egmm_fit(X, config)
        assert len(m1.members) == len(m2.members)
        x = rng.normal(size=3)
        assert egmm_log_marginal(m1, x, [0, 2]) == egmm_log_marginal(m2, x, [0, 2])

    def test_parallel_matches_serial(self):
        rng = np.random.default_rng(43)
        X = rng.normal(size=(150, 2))
        config = EgmmConfig(members_per_k=3, component_counts=(2, 3), seed=2)
        serial = egmm_fit(X, config, workers=1)
        parallel = egmm_fit(X, config, workers=4)
        x = rng.normal(size=2)
        assert egmm_log_marginal(serial, x, [0]) == egmm_log_marginal(parallel, x, [0])


class TestEgmmLogMarginal:
    def test_single_member_identity(self):
        rng = np.random.default_rng(47)
        member, *_ = random_mixture(rng, 2, 2)
        ensemble = identity_egmm([member])
        x = rng.normal(size=2)
        assert egmm_log_marginal(ensemble, x, [1]) == gmm_log_marginal(member, x, [1])

    def test_two_identical_members(self):
        rng = np.random.default_rng(53)
        member, *_ = random_mixture(rng, 2, 2)
        ensemble = identity_egmm([member, member])
        x = rng.normal(size=2)
        assert egmm_log_marginal(ensemble, x, [0, 1]) == pytest.approx(
            gmm_log_marginal(member, x, [0, 1]), rel=1e-14
        )

    def test_matches_pooled_mixture(self):
        # Oracle: flatten a 3-member ensemble into one big mixture with
        # member weights divided by the member count.
        rng = np.random.default_rng(59)
        members = []
        pooled = []
        for _ in range(3):
            model, weights, means, covs = random_mixture(rng, 3, 2)
            members.append(model)
            pooled.extend(zip(weights / 3.0, means, covs))
        ensemble = identity_egmm(members)
        pooled_model = GmmModel(
            components=tuple(
                GaussianComponent(weight=float(w), mean=m, covariance=c) for w, m, c in pooled
            ),
            n=3,
        )
        x = rng.normal(size=3)
        got = egmm_log_marginal(ensemble, x, [0, 1, 2])
        want = gmm_log_marginal(pooled_model, x, [0, 1, 2])
        assert got == pytest.approx(want, rel=1e-12)

    def test_member_order_invariant(self):
        rng = np.random.default_rng(61)
        members = [random_mixture(rng, 2, 2)[0] for _ in range(4)]
        x = rng.normal(size=2)
        forward = egmm_log_marginal(identity_egmm(members), x, [0])
        backward = egmm_log_marginal(identity_egmm(members[::-1]), x, [0])
        assert forward == pytest.approx(backward, rel=1e-14)

    def test_standardization_corrects_units(self):
        # Fit on badly scaled data; the density must integrate to 1 in
        # original units, which fails without the Jacobian correction.
        rng = np.random.default_rng(67)
        X = np.column_stack([rng.normal(scale=1000.0, size=400), rng.normal(scale=0.01, size=400)])
        model = egmm_fit(X, EgmmConfig(members_per_k=2, component_counts=(1,), seed=4))
        grid = np.linspace(-8000, 8000, 4001)
        dens = [math.exp(egmm_log_marginal(model, np.array([g, 0.0]), [0])) for g in grid]
        assert np.trapezoid(dens, grid) == pytest.approx(1.0, abs=1e-3)


class TestRankPoints:
    def test_rank_by_score_sorts_ascending(self):
        assert _rank_by_score(np.log(np.array([0.5, 0.1, 0.9]))).tolist() == [1, 0, 2]

    def test_rank_by_score_ties_by_index(self):
        assert _rank_by_score(np.zeros(4)).tolist() == [0, 1, 2, 3]

    def test_far_outlier_ranked_first(self):
        rng = np.random.default_rng(71)
        train = rng.normal(size=(300, 2))
        model = egmm_fit(train, EgmmConfig(members_per_k=2, component_counts=(1, 2), seed=0))
        X = rng.normal(size=(200, 2))
        X[37] = (10.0, 10.0)
        labels = np.zeros(200, bool)
        labels[37] = True
        ds = Dataset(points=X, labels=labels, feature_names=("a", "b"))
        ranking = rank_points(model, ds)
        assert ranking[0] == 37
        # Direct density comparison: the outlier's joint density is the smallest.
        densities = [egmm_log_marginal(model, x, [0, 1]) for x in X]
        assert densities[37] == min(densities)

    def test_duplicate_points_rank_by_index(self):
        X = np.tile([[1.0, 2.0]], (6, 1))
        # Fit on distinct data, rank duplicates.
        rng = np.random.default_rng(73)
        train = rng.normal(size=(50, 2))
        model = egmm_fit(train, EgmmConfig(members_per_k=1, component_counts=(1,), seed=0))
        ds = Dataset(points=X, labels=[False] * 6, feature_names=("a", "b"))
        assert rank_points(model, ds).tolist() == [0, 1, 2, 3, 4, 5]


class TestSerialization:
    def test_round_trip_preserves_log_densities(self, tmp_path):
        rng = np.random.default_rng(79)
        X = np.vstack([rng.normal(size=(120, 3)), rng.normal(loc=2.5, size=(60, 3))])
        model = egmm_fit(X, EgmmConfig(members_per_k=2, component_counts=(2, 3), seed=6))
        path = tmp_path / "model.json"
        save_egmm(model, path)
        loaded = load_egmm(path)
        for _ in range(10):
            x = rng.normal(size=3)
            subset = rng.choice(3, size=rng.integers(1, 4), replace=False)
            a = egmm_log_marginal(model, x, subset)
            b = egmm_log_marginal(loaded, x, subset)
            assert b == pytest.approx(a, abs=1e-12)

    def test_rejects_wrong_format(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"format": "something-else", "version": 1}')
        with pytest.raises(ValueError, match="not an ensemble model"):
            load_egmm(path)

    def test_config_survives_round_trip(self, tmp_path):
        rng = np.random.default_rng(83)
        X = rng.normal(size=(80, 2))
        config = EgmmConfig(members_per_k=1, component_counts=(2,), seed=12)
        model = egmm_fit(X, config)
        path = tmp_path / "model.json"
        save_egmm(model, path)
        assert load_egmm(path).config == config


class TestComponentValidation:
    def test_asymmetric_covariance_rejected(self):
        with pytest.raises(ValueError, match="symmetric"):
            GaussianComponent(weight=1.0, mean=np.zeros(2), covariance=np.array([[1.0, 0.5], [0.1, 1.0]]))

    def test_weights_must_sum_to_one(self):
        comp = GaussianComponent(weight=0.4, mean=np.zeros(1), covariance=np.eye(1))
        with pytest.raises(ValueError, match="sum to 1"):
            GmmModel(components=(comp,), n=1)
