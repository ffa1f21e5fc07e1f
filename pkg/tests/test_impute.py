import numpy as np
import pytest

from gexrestore.data_io import ExpressionMatrix
from gexrestore.downstream.impute import (
    KNN,
    MEAN,
    METHODS,
    MICE,
    MODEL,
    ZERO,
    apply_mcar,
    impute,
    impute_knn,
    impute_mice,
    mcar_mask,
    nan_euclidean,
)

from conftest import tiny_model


def _masked(rng, n=40, p=6, rate=0.2):
    X = rng.normal(size=(n, p))
    hide = rng.random((n, p)) < rate
    return X, np.where(hide, np.nan, X)


class TestMcar:
    def test_rate_zero(self, rng):
        assert not mcar_mask(np.ones((20, 20), bool), 0.0, 1).hidden.any()

    def test_rate_half(self):
        frac = mcar_mask(np.ones((100, 200), bool), 0.5, 3).hidden.mean()
        assert 0.49 <= frac <= 0.51

    def test_large_matrix_within_half_percent(self):
        for rate in (0.01, 0.1, 0.3):
            frac = mcar_mask(np.ones((200, 100), bool), rate, 11).hidden.mean()
            assert abs(frac - rate) <= 0.005

    def test_same_seed(self):
        present = np.ones((30, 30), bool)
        assert np.array_equal(mcar_mask(present, 0.3, 9).hidden, mcar_mask(present, 0.3, 9).hidden)

    def test_only_present_cells(self, rng):
        present = rng.random((30, 30)) < 0.5
        assert not (mcar_mask(present, 0.9, 1).hidden & ~present).any()

    def test_rate_bounds(self):
        with pytest.raises(ValueError):
            mcar_mask(np.ones((2, 2), bool), 0.96, 0)

    def test_apply_and_zero_unmask(self, rng):
        X = rng.normal(size=(10, 5))
        m = ExpressionMatrix([f"s{i}" for i in range(10)], [f"g{j}" for j in range(5)], X,
                             np.ones((10, 5), bool))
        masked, mask = apply_mcar(m, 0.3, 4)
        assert np.isnan(masked.values[mask.hidden]).all()
        assert not masked.present[mask.hidden].any()
        filled = impute(ZERO, masked.values)
        restored = np.where(mask.hidden, m.values, filled)
        assert np.array_equal(restored, X)
        assert np.array_equal(m.values, X)


class TestMethods:
    @pytest.mark.parametrize("method", [ZERO, MEAN, KNN, MICE, MODEL])
    def test_no_missing_is_identity(self, method, rng):
        X = rng.normal(size=(15, 12))
        out = impute(method, X, k=3, model=tiny_model(), genes=np.arange(12))
        assert np.array_equal(out, X)

    @pytest.mark.parametrize("method", [ZERO, MEAN, KNN, MICE, MODEL])
    def test_observed_cells_untouched(self, method, rng):
        _, Xm = _masked(rng, n=30, p=12)
        out = impute(method, Xm, k=3, model=tiny_model(), genes=np.arange(12))
        obs = ~np.isnan(Xm)
        assert np.array_equal(out[obs], Xm[obs])
        assert np.isfinite(out).all()

    def test_zero_and_mean(self):
        X = np.array([[1.0, np.nan], [3.0, 4.0], [np.nan, 6.0]])
        np.testing.assert_array_equal(impute(ZERO, X), [[1, 0], [3, 4], [0, 6]])
        np.testing.assert_array_equal(impute(MEAN, X), [[1, 5], [3, 4], [2, 6]])

    def test_mean_unobserved_column(self):
        X = np.array([[1.0, np.nan], [3.0, np.nan]])
        with pytest.warns(UserWarning):
            out = impute(MEAN, X)
        assert np.array_equal(out[:, 1], [0.0, 0.0])

    def test_knn_matches_sklearn(self, rng):
        from sklearn.impute import KNNImputer

        _, Xm = _masked(rng, n=60, p=8, rate=0.25)
        ours = impute_knn(Xm, k=5)
        ref = KNNImputer(n_neighbors=5).fit_transform(Xm)
        np.testing.assert_allclose(ours, ref, atol=1e-12)

    def test_nan_euclidean_matches_sklearn(self, rng):
        from sklearn.metrics.pairwise import nan_euclidean_distances

        _, Xm = _masked(rng, n=20, p=6, rate=0.3)
        np.testing.assert_allclose(nan_euclidean(Xm), nan_euclidean_distances(Xm), atol=1e-10)

    def test_knn_duplicate_row(self, rng):
        X = rng.normal(size=(20, 6))
        X[5] = X[12]
        Xm = X.copy()
        Xm[5, [1, 4]] = np.nan
        out = impute_knn(Xm, k=1)
        np.testing.assert_array_equal(out[5], X[12])

    def test_knn_fallback_to_mean(self):
        X = np.array([[0.0, np.nan], [0.1, 2.0], [5.0, 4.0]])
        X2 = X.copy()
        X2[1, 1] = np.nan  # column 1 observed only by row 2
        out = impute_knn(X2, k=1)
        assert out[0, 1] == 4.0

    def test_knn_needs_k_rows(self):
        with pytest.raises(ValueError):
            impute_knn(np.array([[1.0, np.nan], [2.0, 3.0]]), k=3)

    def test_mice_correlated_columns(self, rng):
        a = rng.normal(size=50)
        X = np.c_[a, 2.0 * a + 1.0, rng.normal(size=50)]
        Xm = X.copy()
        Xm[7, 1] = np.nan
        out = impute_mice(Xm, cycles=10)
        assert abs(out[7, 1] - X[7, 1]) < 1e-3

    def test_model_restores_hidden_cells(self, rng):
        m = tiny_model()
        X = rng.normal(size=(4, 12))
        Xm = X.copy()
        Xm[1, [2, 5]] = np.nan
        out = impute(MODEL, Xm, model=m, genes=np.arange(12))
        expect = m.restore(np.arange(12)[None], Xm[1:2], np.arange(12))[0]
        np.testing.assert_allclose(out[1, [2, 5]], expect[[2, 5]], atol=1e-12)

    def test_model_needs_model(self, rng):
        _, Xm = _masked(rng)
        with pytest.raises(ValueError):
            impute(MODEL, Xm)

    def test_unknown(self, rng):
        with pytest.raises(ValueError):
            impute("BPCA", rng.normal(size=(3, 3)))

    def test_methods_constant(self):
        assert METHODS == ("ZERO", "MEAN", "KNN", "MICE", "MODEL")
