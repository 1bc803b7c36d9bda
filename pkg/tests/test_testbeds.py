import numpy as np
import pytest
from scipy.special import ndtri

from bico.gp import GpHyperparams
from bico.optim import BoxBounds
from bico.posterior import SourceSpec
from bico.testbeds import (
    GpTestFunction,
    NewsvendorConfig,
    TruthOracle,
    gp_testfunc_build,
    gp_testfunc_simulate,
    make_newsvendor_oracle,
    newsvendor_simulate,
    newsvendor_theta,
    newsvendor_xstar,
    opportunity_cost,
    source_simulate,
)

CFG = NewsvendorConfig()


class TestNewsvendorSimulate:
    def test_zero_stock_zero_profit(self, rng):
        for _ in range(50):
            assert newsvendor_simulate(0.0, 40.0, CFG, rng) == 0.0

    def test_mc_mean_matches_theta(self):
        rng = np.random.default_rng(8)
        n = 100_000
        ys = np.array([newsvendor_simulate(40.0, 40.0, CFG, rng) for _ in range(n)])
        se = ys.std(ddof=1) / np.sqrt(n)
        assert abs(ys.mean() - newsvendor_theta(40.0, 40.0, CFG)) <= 3 * se

    def test_no_margin_no_expected_profit(self):
        cfg = NewsvendorConfig(price=3.0, cost=2.999999)
        for x in np.linspace(0, 100, 21):
            assert newsvendor_theta(x, 40.0, cfg) <= 1e-3

    def test_config_validation(self):
        with pytest.raises(ValueError):
            NewsvendorConfig(price=2.0, cost=3.0)
        with pytest.raises(ValueError):
            NewsvendorConfig(demand_var=0.0)


class TestNewsvendorTheta:
    def test_zero_stock(self):
        assert newsvendor_theta(0.0, 40.0, CFG) == pytest.approx(0.0, abs=1e-12)

    def test_overstock_limit_trend(self):
        assert newsvendor_theta(1e6, 40.0, CFG) == pytest.approx(
            CFG.price * 40.0 - CFG.cost * 1e6, rel=1e-9
        )

    def test_matches_mc_at_35_40(self):
        rng = np.random.default_rng(15)
        n = 1_000_000
        demand = 40.0 + np.sqrt(CFG.demand_var) * rng.standard_normal(n)
        ys = CFG.price * np.minimum(35.0, demand) - CFG.cost * 35.0
        se = ys.std(ddof=1) / np.sqrt(n)
        assert abs(ys.mean() - newsvendor_theta(35.0, 40.0, CFG)) <= 3 * se

    def test_concave_in_stock(self):
        xs = np.arange(0.0, 100.0 + 1e-9, 0.1)
        vals = np.array([newsvendor_theta(x, 40.0, CFG) for x in xs])
        second = vals[2:] - 2 * vals[1:-1] + vals[:-2]
        assert (second <= 1e-9).all()


class TestNewsvendorXstar:
    def test_critical_ratio_value(self):
        x_star, theta_star = newsvendor_xstar(CFG)
        expected = 40.0 + np.sqrt(10.0) * ndtri(0.4)
        assert x_star == pytest.approx(expected, abs=1e-12)
        assert x_star == pytest.approx(39.20, abs=0.01)
        assert theta_star == pytest.approx(newsvendor_theta(x_star, 40.0, CFG))

    def test_symmetric_margin_orders_mean(self):
        cfg = NewsvendorConfig(price=2.0, cost=1.0)
        x_star, _ = newsvendor_xstar(cfg)
        assert x_star == pytest.approx(40.0, abs=1e-12)

    def test_grid_search_confirms_argmax(self):
        x_star, _ = newsvendor_xstar(CFG)
        xs = np.arange(0.0, 100.0, 0.01)
        vals = np.array([newsvendor_theta(x, 40.0, CFG) for x in xs])
        assert abs(xs[vals.argmax()] - x_star) <= 0.02


HYP = GpHyperparams(1.0, 10.0, 0.01)
BOUNDS = (BoxBounds([0.0], [100.0]), BoxBounds([0.0], [100.0]))


def build(seed=0, n_anchor=None):
    return gp_testfunc_build(seed, (1, 1), HYP, n_anchor, BOUNDS)


class TestGpTestFunction:
    def test_anchor_reproduction(self):
        fn, _ = build(3)
        recon = fn.theta_joint(fn.anchors)
        assert np.abs(recon - fn.anchor_values).max() <= 1e-6

    def test_same_seed_bit_identical(self):
        fn1, or1 = build(9)
        fn2, or2 = build(9)
        assert np.array_equal(fn1.anchor_values, fn2.anchor_values)
        assert np.array_equal(or1.a_star, or2.a_star)
        assert np.array_equal(or1.x_star, or2.x_star)

    def test_prior_variance_over_seeds(self):
        # anchor values across many independent draws have variance ~ sigma0^2
        vals = np.concatenate([build(s, n_anchor=60)[0].anchor_values for s in range(50)])
        assert abs(vals.var() - 1.0) <= 0.3

    def test_oracle_dominates_dense_grid(self):
        fn, oracle = build(5)
        xs = np.linspace(0, 100, 10_000)[:, None]
        rows = np.concatenate([xs, np.tile(oracle.a_star, (xs.shape[0], 1))], axis=1)
        assert oracle.theta_star >= fn.theta_joint(rows).max() - 1e-9

    def test_continuity_lipschitz_scaled(self):
        fn, oracle = build(7)
        delta = 1e-4
        bound = 3.0 * np.sqrt(HYP.sigma0_sq) / 10.0 * delta
        for x in (5.0, 33.0, 71.0):
            d = abs(fn.theta([x + delta], oracle.a_star) - fn.theta([x], oracle.a_star))
            assert d <= 3 * bound  # slack for interpolant gradients near anchors

    def test_simulate_noise_free_config(self, rng):
        hyper = GpHyperparams(1.0, 10.0, 0.0)
        fn, oracle = gp_testfunc_build(1, (1, 1), hyper, 200, BOUNDS)
        v1 = gp_testfunc_simulate(fn, [20.0], oracle.a_star, rng)
        assert v1 == fn.theta([20.0], oracle.a_star)

    def test_simulate_noise_moments(self):
        fn, oracle = build(2)
        rng = np.random.default_rng(0)
        ys = np.array([gp_testfunc_simulate(fn, [50.0], [50.0], rng) for _ in range(10_000)])
        assert ys.std(ddof=1) == pytest.approx(0.1, rel=0.1)
        se = ys.std(ddof=1) / np.sqrt(ys.size)
        assert abs(ys.mean() - fn.theta([50.0], [50.0])) <= 3 * se

    def test_two_parameter_build(self):
        bounds = (BoxBounds([0.0], [100.0]), BoxBounds([0.0, 0.0], [100.0, 100.0]))
        fn, oracle = gp_testfunc_build(4, (1, 2), HYP, 300, bounds)
        assert oracle.a_star.shape == (2,)
        assert np.isfinite(fn.theta([10.0], oracle.a_star))


class TestSourceSimulate:
    def test_tiny_noise_returns_truth(self, rng):
        spec = SourceSpec(id=1, target_dim=0, obs_noise_sq=1e-18, cost=1.0)
        r = source_simulate(spec, np.array([40.0]), rng)
        assert r == pytest.approx(40.0, abs=1e-6)

    def test_mean_matches_target_coordinate(self):
        spec = SourceSpec(id=2, target_dim=1, obs_noise_sq=10.0, cost=1.0)
        rng = np.random.default_rng(21)
        rs = np.array([source_simulate(spec, np.array([1.0, 77.0]), rng) for _ in range(10_000)])
        se = rs.std(ddof=1) / np.sqrt(rs.size)
        assert abs(rs.mean() - 77.0) <= 3 * se

    def test_finite(self, rng):
        for _ in range(100):
            assert np.isfinite(source_simulate(SourceSpec(1, 0, 10.0, 1.0), [40.0], rng))


class TestOpportunityCost:
    def test_zero_at_optimum(self):
        oracle = make_newsvendor_oracle(CFG)
        assert opportunity_cost(oracle.x_star, oracle) == 0.0

    def test_zero_stock_costs_theta_star(self):
        oracle = make_newsvendor_oracle(CFG)
        assert opportunity_cost([0.0], oracle) == pytest.approx(oracle.theta_star, abs=1e-9)

    def test_nonnegative_for_random_recommendations(self, rng):
        oracle = make_newsvendor_oracle(CFG)
        xs = rng.uniform(0, 100, size=1000)
        for x in xs:
            assert opportunity_cost([x], oracle) >= -1e-3

    def test_nonnegative_on_gp_oracle(self, rng):
        _, oracle = build(11)
        for x in rng.uniform(0, 100, size=200):
            assert opportunity_cost([x], oracle) >= -1e-3

    def test_invariant_to_constant_offset(self, rng):
        _, oracle = build(13)
        shifted = TruthOracle(
            oracle.a_star,
            lambda x, a: oracle.theta_true(x, a) + 100.0,
            oracle.x_star,
            oracle.theta_star + 100.0,
        )
        for x in rng.uniform(0, 100, size=20):
            assert opportunity_cost([x], shifted) == pytest.approx(
                opportunity_cost([x], oracle), abs=1e-9
            )
