import numpy as np
import pytest

from fedboost import protocol
from fedboost.protocol import (Ack, CovarianceBlock, Describe,
                               DisclosurePolicy, GlobalMeans, GlobalSsq,
                               Refusal, SiteMeta, StandardizeLocal,
                               UnivariableStats, UnivariableValues)
from fedboost.sitenode import (DegenerateColumnError, IndexOutOfRangeError,
                               NotStandardizedError, SiteDataset, SiteSession)


def ternary_dataset(rng, n=24, p=5):
    x = rng.integers(-1, 2, size=(n, p)).astype(float)
    # guard against constant columns in tiny draws
    x[0] = 1.0
    x[1] = -1.0
    y = (rng.random(n) < 0.5).astype(float)
    y[0], y[1] = 1.0, 0.0
    return SiteDataset(x, y)


class TestStandardizeLocal:
    def test_symmetric_column_keeps_shape(self):
        data = SiteDataset(np.array([[1.0], [-1.0], [1.0], [-1.0]]),
                           np.array([1.0, 0.0, 1.0, 0.0]))
        data.standardize_local()
        col = data.x[:, 0]
        assert col.mean() == pytest.approx(0.0, abs=1e-15)
        assert (col ** 2).sum() == pytest.approx(3.0, rel=1e-15)
        # sd of (1,-1,1,-1) is sqrt(4/3)
        assert data.params.sds[0] == pytest.approx(np.sqrt(4.0 / 3.0), rel=1e-15)

    def test_constant_column_aborts(self):
        data = SiteDataset(np.ones((4, 1)), np.array([1.0, 0.0, 1.0, 0.0]))
        with pytest.raises(DegenerateColumnError) as err:
            data.standardize_local()
        assert err.value.column == 0

    def test_outcome_centering(self):
        data = SiteDataset(np.array([[1.0], [-1.0], [1.0], [-1.0]]),
                           np.array([1.0, 0.0, 1.0, 0.0]))
        data.standardize_local()
        assert data.y.tolist() == [0.5, -0.5, 0.5, -0.5]


class TestGlobalContributions:
    def test_single_site_equals_local_parameters(self):
        rng = np.random.default_rng(0)
        data = ternary_dataset(rng)
        n_l, sum_y, sum_x = data.global_moment_contrib()
        means = sum_x / n_l
        y_mean = sum_y / n_l
        ssq_x, _ = data.global_ssq_contrib(means, y_mean)
        sds = np.sqrt(ssq_x / (n_l - 1))
        twin = SiteDataset(data.raw_x, data.raw_y)
        params = twin.standardize_local()
        np.testing.assert_allclose(means, params.means, rtol=1e-14)
        np.testing.assert_allclose(sds, params.sds, rtol=1e-14)
        assert y_mean == pytest.approx(params.y_mean, rel=1e-14)

    def test_two_centered_sites_pool_to_zero_mean(self):
        a = SiteDataset(np.array([[1.0], [-1.0]]), np.array([1.0, 0.0]))
        b = SiteDataset(np.array([[2.0], [-2.0]]), np.array([0.0, 1.0]))
        total_x = a.global_moment_contrib()[2] + b.global_moment_contrib()[2]
        assert total_x[0] == 0.0

    def test_pooled_variance_matches_concatenated_data(self):
        rng = np.random.default_rng(1)
        xa, ya = rng.normal(size=(7, 3)), (rng.random(7) < 0.5).astype(float)
        xb, yb = rng.normal(size=(5, 3)), (rng.random(5) < 0.5).astype(float)
        a, b = SiteDataset(xa, ya), SiteDataset(xb, yb)
        n = 12
        sum_x = a.global_moment_contrib()[2] + b.global_moment_contrib()[2]
        sum_y = a.global_moment_contrib()[1] + b.global_moment_contrib()[1]
        means, y_mean = sum_x / n, sum_y / n
        ssq = (a.global_ssq_contrib(means, y_mean)[0]
               + b.global_ssq_contrib(means, y_mean)[0])
        full = np.concatenate([xa, xb])
        expected = ((full - full.mean(axis=0)) ** 2).sum(axis=0)
        np.testing.assert_allclose(ssq, expected, rtol=1e-12)


class TestUnivariableStats:
    def test_requires_standardization(self):
        rng = np.random.default_rng(2)
        data = ternary_dataset(rng)
        with pytest.raises(NotStandardizedError):
            data.univariable_stats()

    def test_orthogonal_column_gives_zero(self):
        x = np.array([[1.0, 1.0], [-1.0, 1.0], [1.0, -1.0], [-1.0, -1.0]])
        y = np.array([1.0, 1.0, 0.0, 0.0])
        data = SiteDataset(x, y)
        data.standardize_local()
        a, _ = data.univariable_stats()
        assert a[0] == pytest.approx(0.0, abs=1e-15)

    def test_outcome_equal_to_column_hits_diagonal(self):
        x = np.array([[1.0], [-1.0], [1.0], [-1.0]])
        data = SiteDataset(x, np.array([1.0, 0.0, 1.0, 0.0]))
        data.standardize_local()
        data.y = data.x[:, 0]  # outcome identical to the standardized column
        a, c_diag = data.univariable_stats()
        assert a[0] == pytest.approx(c_diag[0], rel=1e-14)

    def test_local_diagonal_is_exactly_n_minus_one(self):
        rng = np.random.default_rng(3)
        data = ternary_dataset(rng, n=30, p=4)
        data.standardize_local()
        _, c_diag = data.univariable_stats()
        assert c_diag.tolist() == [29.0] * 4

    def test_matches_dot_product_oracle(self):
        rng = np.random.default_rng(4)
        data = SiteDataset(rng.normal(size=(6, 3)), (rng.random(6) < 0.5).astype(float))
        data.standardize_local()
        a, c_diag = data.univariable_stats()
        np.testing.assert_allclose(a, [data.x[:, j] @ data.y for j in range(3)],
                                   rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(c_diag, [data.x[:, j] @ data.x[:, j]
                                            for j in range(3)], rtol=1e-12)


class TestCovarianceBlock:
    def setup_method(self):
        rng = np.random.default_rng(5)
        self.data = SiteDataset(rng.normal(size=(6, 4)),
                                (rng.random(6) < 0.5).astype(float))
        self.data.standardize_local()

    def test_identical_columns_equal_diagonal(self):
        data = SiteDataset(np.column_stack([np.array([1.0, -1.0, 1.0, -1.0])] * 2),
                           np.array([1.0, 0.0, 1.0, 0.0]))
        data.standardize_local()
        (j, k, value), = data.covariance_block([(0, 1)])
        _, c_diag = data.univariable_stats()
        assert value == pytest.approx(c_diag[0], rel=1e-14)

    def test_orthogonal_columns_give_zero(self):
        x = np.array([[1.0, 1.0], [-1.0, 1.0], [1.0, -1.0], [-1.0, -1.0]])
        data = SiteDataset(x, np.array([1.0, 0.0, 1.0, 0.0]))
        data.standardize_local()
        (_, _, value), = data.covariance_block([(0, 1)])
        assert value == pytest.approx(0.0, abs=1e-15)

    def test_matches_brute_force(self):
        values = self.data.covariance_block([(0, 2), (1, 3)])
        for j, k, value in values:
            assert value == pytest.approx(
                float(np.sum(self.data.x[:, j] * self.data.x[:, k])), rel=1e-12)

    def test_symmetry(self):
        (_, _, v1), = self.data.covariance_block([(0, 2)])
        (_, _, v2), = self.data.covariance_block([(2, 0)])
        assert v1 == v2

    def test_index_out_of_range(self):
        with pytest.raises(IndexOutOfRangeError):
            self.data.covariance_block([(0, 9)])


class TestSession:
    def make_session(self, rng=None, n=24, min_n=1):
        rng = rng or np.random.default_rng(6)
        data = ternary_dataset(rng, n=n)
        return SiteSession(data, DisclosurePolicy(min_site_n=min_n))

    def ask(self, session, msg, rid):
        msg.request_id = rid
        return session.handle(msg)

    def test_describe(self):
        session = self.make_session()
        resp = self.ask(session, Describe(), 1)
        assert resp == SiteMeta(n_l=24, p=5, request_id=1)

    def test_small_site_refuses_statistics(self):
        session = self.make_session(n=5, min_n=10)
        assert isinstance(self.ask(session, Describe(), 1), SiteMeta)
        resp = self.ask(session, CovarianceBlock(pairs=[(0, 1)]), 2)
        assert isinstance(resp, Refusal)

    def test_statistics_are_idempotent(self):
        session = self.make_session()
        assert isinstance(self.ask(session, StandardizeLocal(), 1), Ack)
        first = self.ask(session, UnivariableStats(), 2)
        second = self.ask(session, UnivariableStats(), 3)
        assert isinstance(first, UnivariableValues)
        assert first.a == second.a and first.c_diag == second.c_diag

    def test_unstandardized_statistics_refused(self):
        session = self.make_session()
        resp = self.ask(session, UnivariableStats(), 1)
        assert isinstance(resp, Refusal)
        assert "standardize" in resp.reason

    def test_request_ids_must_increase(self):
        session = self.make_session()
        self.ask(session, Describe(), 5)
        resp = self.ask(session, Describe(), 5)
        assert isinstance(resp, Refusal)
        session.reset_request_ids()
        assert isinstance(self.ask(session, Describe(), 1), SiteMeta)

    def test_payload_size_stays_flat_in_cohort_size(self):
        # aggregation property: 10x the individuals must not inflate replies
        sizes = {}
        for n in (40, 400):
            rng = np.random.default_rng(7)
            session = self.make_session(rng=rng, n=n)
            self.ask(session, StandardizeLocal(), 1)
            frame = protocol.encode(self.ask(session, UnivariableStats(), 2))
            sizes[n] = len(frame)
        assert sizes[400] < 1.5 * sizes[40]

    def test_frame_level_dispatch(self):
        session = self.make_session()
        frame = protocol.encode(Describe(request_id=1))
        resp = protocol.decode(session.handle_frame(frame))
        assert isinstance(resp, SiteMeta)


class TestCsvLoading:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(8)
        x = rng.integers(-1, 2, size=(10, 3))
        y = (rng.random(10) < 0.5).astype(int)
        path = tmp_path / "site.csv"
        header = "x1,x2,x3,y"
        rows = [",".join(map(str, list(xr) + [yr])) for xr, yr in zip(x, y)]
        path.write_text(header + "\n" + "\n".join(rows) + "\n")
        data = SiteDataset.from_csv(path)
        np.testing.assert_array_equal(data.raw_x, x.astype(float))
        np.testing.assert_array_equal(data.raw_y, y.astype(float))

    def test_missing_outcome_column(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x1,x2\n1,0\n")
        with pytest.raises(ValueError):
            SiteDataset.from_csv(path)

    def test_non_binary_outcome(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x1,y\n1,2\n0,1\n")
        with pytest.raises(ValueError):
            SiteDataset.from_csv(path)
