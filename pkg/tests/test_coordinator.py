import numpy as np
import pytest

from fedboost.boostcore import FULL, BoostingConfig
from fedboost.coordinator import (CallLedger, Coordinator,
                                  DirectAggregateProvider, InProcessChannel,
                                  LengthMismatchError, MissingSiteError,
                                  PairMismatchError, SiteError,
                                  pool_covariances, pool_univariable,
                                  run_inprocess)
from fedboost.pooled import standardize_pooled
from fedboost.protocol import DisclosurePolicy
from fedboost.sitenode import SiteDataset, SiteSession


def ternary(rng, n, p):
    x = rng.integers(-1, 2, size=(n, p)).astype(float)
    x[0], x[1] = 1.0, -1.0
    y = (rng.random(n) < 0.5).astype(float)
    y[0], y[1] = 1.0, 0.0
    return x, y


def split(x, y, cuts):
    parts = []
    start = 0
    for size in cuts:
        parts.append(SiteDataset(x[start:start + size], y[start:start + size]))
        start += size
    return parts


def make_coordinator(sites, min_site_n=1):
    policy = DisclosurePolicy(min_site_n=min_site_n)
    channels = [InProcessChannel(SiteSession(s, policy)) for s in sites]
    return Coordinator(channels)


class TestPoolUnivariable:
    def test_single_site_identity(self):
        a, c = pool_univariable([(np.array([1.0, 2.0]), np.array([3.0, 4.0]))])
        assert a.tolist() == [1.0, 2.0]
        assert c.tolist() == [3.0, 4.0]

    def test_elementwise_addition(self):
        a, _ = pool_univariable([([1.0, 2.0], [1.0, 1.0]),
                                 ([3.0, -2.0], [1.0, 1.0])])
        assert a.tolist() == [4.0, 0.0]

    def test_local_mode_diagonal_pools_to_n_minus_sites(self):
        rng = np.random.default_rng(0)
        responses = []
        for _ in range(5):
            data = SiteDataset(*ternary(rng, 100, 3))
            data.standardize_local()
            responses.append(data.univariable_stats())
        _, c_diag = pool_univariable(responses)
        assert c_diag.tolist() == [495.0, 495.0, 495.0]  # 5 * 99 = n - L

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatchError):
            pool_univariable([([1.0], [1.0]), ([1.0, 2.0], [1.0, 2.0])])

    def test_no_sites(self):
        with pytest.raises(MissingSiteError):
            pool_univariable([])


class TestPoolCovariances:
    def test_single_site_identity(self):
        out = pool_covariances([[(0, 1, 0.25)]], [(0, 1)])
        assert out == [(0, 1, 0.25)]

    def test_opposite_values_cancel(self):
        out = pool_covariances([[(0, 1, 0.5)], [(0, 1, -0.5)]], [(0, 1)])
        assert out == [(0, 1, 0.0)]

    def test_pair_mismatch(self):
        with pytest.raises(PairMismatchError):
            pool_covariances([[(0, 2, 0.5)]], [(0, 1)])

    def test_split_dataset_pools_to_unsplit_values(self):
        rng = np.random.default_rng(1)
        x, y = ternary(rng, 90, 4)
        x_std, _ = standardize_pooled(x, y)
        sites = split(x, y, [30, 30, 30])
        coordinator = make_coordinator(sites)
        coordinator.describe()
        coordinator.standardize("global")
        pairs = [(0, 1), (0, 3), (2, 3)]
        pooled = coordinator.fetch_covariances(pairs)
        for j, k, value in pooled:
            assert value == pytest.approx(float(x_std[:, j] @ x_std[:, k]),
                                          rel=1e-12, abs=1e-12)


class TestStandardizationRounds:
    def test_local_mode_one_round(self):
        rng = np.random.default_rng(2)
        x, y = ternary(rng, 60, 3)
        coordinator = make_coordinator(split(x, y, [20, 20, 20]))
        coordinator.describe()
        coordinator.standardize("local")
        assert coordinator.ledger.setup_rounds == 2  # describe + one round

    def test_global_single_site_equals_local_params(self):
        rng = np.random.default_rng(3)
        x, y = ternary(rng, 40, 3)
        site = SiteDataset(x, y)
        coordinator = make_coordinator([site])
        coordinator.describe()
        coordinator.standardize("global")
        twin = SiteDataset(x, y)
        params = twin.standardize_local()
        np.testing.assert_allclose(site.params.means, params.means, rtol=1e-14)
        np.testing.assert_allclose(site.params.sds, params.sds, rtol=1e-14)
        assert coordinator.ledger.setup_rounds == 4  # describe + three rounds

    def test_global_split_matches_pooled_standardization(self):
        rng = np.random.default_rng(4)
        x, y = ternary(rng, 80, 4)
        x_std, y_std = standardize_pooled(x, y)
        sites = split(x, y, [50, 30])
        coordinator = make_coordinator(sites)
        coordinator.describe()
        coordinator.standardize("global")
        a, c_diag = coordinator.fetch_univariable()
        np.testing.assert_allclose(a, x_std.T @ y_std, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(c_diag, np.full(4, 79.0), rtol=1e-12)

    def test_refusal_aborts(self):
        rng = np.random.default_rng(5)
        x, y = ternary(rng, 8, 3)
        coordinator = make_coordinator([SiteDataset(x, y)], min_site_n=10)
        coordinator.describe()
        coordinator.standardize("local")
        with pytest.raises(SiteError):
            coordinator.fetch_univariable()


class TestFetchLedger:
    def make_ready(self, rng, cuts=(20, 20)):
        x, y = ternary(rng, sum(cuts), 5)
        coordinator = make_coordinator(split(x, y, list(cuts)))
        coordinator.describe()
        coordinator.standardize("local")
        return coordinator

    def test_one_logical_call_counts_pooled_values(self):
        coordinator = self.make_ready(np.random.default_rng(6), (10,) * 5)
        coordinator.fetch_covariances([(0, 1), (0, 2), (0, 3), (0, 4)])
        assert coordinator.ledger.covariance_calls == 1
        assert coordinator.ledger.covariance_values == 4

    def test_site_order_does_not_change_pooled_values(self):
        rng = np.random.default_rng(7)
        x, y = ternary(rng, 60, 4)
        sites = split(x, y, [20, 20, 20])
        values = {}
        for order in ((0, 1, 2), (2, 0, 1)):
            arranged = [SiteDataset(sites[i].raw_x, sites[i].raw_y) for i in order]
            coordinator = make_coordinator(arranged)
            coordinator.describe()
            coordinator.standardize("global")
            values[order] = coordinator.fetch_covariances([(0, 1), (2, 3)])
        for (_, _, v1), (_, _, v2) in zip(values[(0, 1, 2)], values[(2, 0, 1)]):
            assert v1 == pytest.approx(v2, abs=1e-15)

    def test_ledger_values_equal_distinct_pairs_fetched(self):
        rng = np.random.default_rng(8)
        x, y = ternary(rng, 80, 12)
        fetched = []

        class Tracking(DirectAggregateProvider):
            def fetch_covariances(self, pairs):
                fetched.extend(pairs)
                return super().fetch_covariances(pairs)

        x_std, y_std = standardize_pooled(x, y)
        provider = Tracking(x_std, y_std)
        from fedboost.boostcore import run_boosting
        _, ledger = run_boosting(provider, BoostingConfig(p=12, max_steps=30,
                                                          mode="heuristic"))
        distinct = {(min(j, k), max(j, k)) for j, k in fetched}
        assert len(distinct) == len(fetched)  # plans never re-request
        assert ledger.covariance_values == len(fetched)


class TestRunInprocess:
    def test_full_run_accounting(self):
        rng = np.random.default_rng(9)
        x, y = ternary(rng, 100, 20)
        sites = split(x, y, [50, 50])
        config = BoostingConfig(p=20, max_steps=200, target_model_size=4, mode=FULL)
        state, ledger = run_inprocess(sites, config, standardize="local")
        assert len(state.inclusion_order) == 4
        assert ledger.data_calls == 5
        assert ledger.covariance_values == sum(20 - k for k in range(1, 5))
        assert ledger.per_site[0]["requests"] == ledger.per_site[1]["requests"]

    def test_ledger_rows_are_consistent(self):
        rng = np.random.default_rng(10)
        x, y = ternary(rng, 60, 8)
        config = BoostingConfig(p=8, max_steps=50, target_model_size=3)
        _, ledger = run_inprocess(split(x, y, [30, 30]), config)
        rows = dict(ledger.to_rows())
        assert rows["data_calls"] == rows["univariable_calls"] + rows["covariance_calls"]
        assert rows["covariance_values"] == ledger.covariance_values

    def test_sites_disagreeing_on_p_rejected(self):
        rng = np.random.default_rng(11)
        xa, ya = ternary(rng, 20, 3)
        xb, yb = ternary(rng, 20, 4)
        with pytest.raises(LengthMismatchError):
            make_coordinator([SiteDataset(xa, ya), SiteDataset(xb, yb)]).describe()


class TestPooledSitesProvider:
    @pytest.mark.parametrize("standardize", ["local", "global"])
    def test_bitwise_identical_to_wire_path(self, standardize):
        from fedboost.coordinator import run_pooled_sites
        rng = np.random.default_rng(12)
        x, y = ternary(rng, 120, 15)
        config = BoostingConfig(p=15, max_steps=60, target_model_size=6,
                                mode="heuristic")
        sites_a = split(x, y, [40, 40, 40])
        sites_b = split(x, y, [40, 40, 40])
        wire_state, wire_ledger = run_inprocess(sites_a, config,
                                                standardize=standardize)
        fast_state, fast_ledger = run_pooled_sites(sites_b, config,
                                                   standardize=standardize)
        assert fast_state.inclusion_order == wire_state.inclusion_order
        assert fast_state.beta == wire_state.beta  # bit-exact
        assert fast_ledger.data_calls == wire_ledger.data_calls
        assert fast_ledger.covariance_values == wire_ledger.covariance_values
