import warnings

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from gexrestore.data_io import SurvivalRecord
from gexrestore.downstream.survival import (
    AnchorSet,
    ConvergenceError,
    UndefinedCIndexError,
    c_index,
    c_index_bruteforce,
    c_index_columns,
    cox_loglik_terms,
    coxph_fit,
    kfold_indices,
    penalized_loglik,
    restore_anchor_expressions,
    screen_genes,
    select_anchor_genes,
    survival_eval,
)

from conftest import tiny_model


def _cohort(n, p=1, seed=0, beta=None, censor=0.3, tie_round=None):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p))
    beta = np.ones(p) if beta is None else np.asarray(beta)
    t = rng.exponential(np.exp(-X @ beta))
    c = rng.exponential(np.mean(t) / censor * (1 - censor), n)
    time = np.minimum(t, c)
    event = t <= c
    if tie_round is not None:
        time = np.round(time, tie_round) + 10.0 ** -tie_round
    return X, time, event


def _records(time, event):
    return [SurvivalRecord(f"s{i:04d}", float(t), bool(e)) for i, (t, e) in enumerate(zip(time, event))]


class TestCIndex:
    def test_perfect(self):
        t = np.array([1.0, 2.0, 3.0, 4.0])
        assert c_index(-t, t, np.ones(4, bool)) == 1.0

    def test_all_ties(self):
        t = np.array([1.0, 2.0, 3.0, 4.0])
        assert c_index(np.zeros(4), t, np.ones(4, bool)) == 0.5

    def test_hand_example_with_censoring(self):
        # comparable: (0,1) (0,2) (0,3) (2,3); sample 1 censored at 2 is never the earlier one
        t = np.array([1.0, 2.0, 3.0, 4.0])
        e = np.array([True, False, True, True])
        r = np.array([0.9, 0.1, 0.1, 0.3])
        # (0,1) 1, (0,2) 1, (0,3) 1, (2,3) 0
        assert c_index(r, t, e) == pytest.approx(3 / 4)

    def test_tied_times_not_comparable(self):
        t = np.array([1.0, 1.0, 2.0])
        e = np.array([True, True, False])
        assert c_index(np.array([0.0, 1.0, 0.5]), t, e) == pytest.approx(0.5)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_bruteforce(self, seed):
        rng = np.random.default_rng(seed)
        t = np.round(rng.exponential(size=200), 1) + 0.1
        e = rng.random(200) < 0.7
        r = np.round(rng.normal(size=200), 1)
        assert c_index(r, t, e) == c_index_bruteforce(r, t, e)

    def test_records_input(self):
        t = np.array([1.0, 2.0, 3.0])
        e = np.array([True, True, False])
        assert c_index(-t, _records(t, e)) == c_index(-t, t, e)

    def test_complement_without_ties(self, rng):
        t = rng.exponential(size=50)
        e = rng.random(50) < 0.6
        r = rng.normal(size=50)
        assert c_index(r, t, e) + c_index(-r, t, e) == pytest.approx(1.0, abs=1e-14)

    def test_monotone_transform_invariance(self, rng):
        t = rng.exponential(size=50)
        e = rng.random(50) < 0.6
        r = rng.normal(size=50)
        assert c_index(r, t, e) == c_index(np.exp(3 * r) + 1, t, e)

    def test_columns_match(self, rng):
        t = rng.exponential(size=40)
        e = rng.random(40) < 0.6
        R = np.round(rng.normal(size=(40, 7)), 1)
        np.testing.assert_allclose(c_index_columns(R, t, e),
                                   [c_index(R[:, j], t, e) for j in range(7)], atol=1e-14)

    def test_undefined(self):
        with pytest.raises(UndefinedCIndexError):
            c_index([0.1, 0.2], [1.0, 2.0], [False, False])
        with pytest.raises(UndefinedCIndexError):
            c_index([0.1, 0.2], [1.0, 1.0], [True, True])
        with pytest.raises(ValueError):
            c_index([0.1], [1.0], [True])


class TestCoxFit:
    def test_constant_covariate(self):
        _, t, e = _cohort(30)
        fit = coxph_fit(np.ones((30, 1)), t, e, l2=0.1)
        assert fit.beta[0] == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("seed", range(25))
    def test_golden_section_oracle(self, seed):
        X, t, e = _cohort(20, seed=seed, beta=[0.8])
        if not e.any():
            e[0] = True
        fit = coxph_fit(X, t, e, l2=0.1)
        f = lambda b: -penalized_loglik(X, t, e, np.array([b]), 0.1)
        grid = np.linspace(-30.0, 30.0, 601)
        i = int(np.argmin([f(b) for b in grid]))
        res = minimize_scalar(f, bracket=(grid[i - 1], grid[i], grid[i + 1]), method="golden",
                              tol=1e-10)
        assert fit.beta[0] == pytest.approx(res.x, abs=1e-3)

    def test_ridge_limit(self):
        X, t, e = _cohort(100, p=3, seed=1)
        assert np.linalg.norm(coxph_fit(X, t, e, l2=1e6).beta) < 1e-3

    def test_gradient_and_hessian_match_finite_differences(self):
        X, t, e = _cohort(60, p=3, seed=2, tie_round=1)
        rng = np.random.default_rng(3)
        for ties in ("breslow", "efron"):
            for _ in range(5):
                b = rng.normal(scale=0.5, size=3)
                _, g, H = cox_loglik_terms(X, t, e, b, ties)
                h = 1e-6
                num_g = np.array([(cox_loglik_terms(X, t, e, b + h * u, ties, False)[0]
                                   - cox_loglik_terms(X, t, e, b - h * u, ties, False)[0]) / (2 * h)
                                  for u in np.eye(3)])
                num_H = np.array([(cox_loglik_terms(X, t, e, b + h * u, ties, False)[1]
                                   - cox_loglik_terms(X, t, e, b - h * u, ties, False)[1]) / (2 * h)
                                  for u in np.eye(3)])
                np.testing.assert_allclose(g, num_g, rtol=1e-5, atol=1e-7)
                np.testing.assert_allclose(H, num_H, rtol=1e-5, atol=1e-6)

    def test_trace_non_decreasing(self):
        X, t, e = _cohort(200, p=5, seed=4, beta=[1.5, -1, 0.5, 0, 2])
        fit = coxph_fit(X, t, e, l2=0.01)
        assert np.all(np.diff(fit.loglik_trace) >= -1e-12)
        assert fit.grad_norm < 1e-6

    @pytest.mark.parametrize("ties", ["breslow", "efron"])
    def test_statsmodels_oracle(self, ties):
        from statsmodels.duration.hazard_regression import PHReg

        X, t, e = _cohort(150, p=3, seed=5, beta=[0.7, -0.4, 0.2], tie_round=1)
        ref = PHReg(t, X, status=e.astype(float), ties=ties).fit().params
        fit = coxph_fit(X, t, e, l2=0.0, ties=ties)
        np.testing.assert_allclose(fit.beta, ref, atol=1e-5)

    def test_separation_unpenalized_fails(self):
        t = np.arange(1.0, 11.0)
        X = -t[:, None]
        with pytest.raises(ConvergenceError) as info:
            coxph_fit(X, t, np.ones(10, bool), l2=0.0, max_iter=20)
        assert info.value.grad_norm >= 0

    def test_separation_penalized_converges(self):
        t = np.arange(1.0, 11.0)
        fit = coxph_fit(-t[:, None], t, np.ones(10, bool), l2=0.1)
        assert np.isfinite(fit.beta).all()

    def test_contract_errors(self):
        X, t, e = _cohort(10)
        with pytest.raises(ValueError):
            coxph_fit(X, t, np.zeros(10, bool))
        with pytest.raises(ValueError):
            coxph_fit(X, t, e, l2=-1.0)
        with pytest.raises(ValueError):
            coxph_fit(X[:5], t, e)


class TestAnchors:
    def _noiseless(self, n=200, g=20, seed=0, risk_gene=7):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(n, g))
        risk = X[:, risk_gene % g].copy()
        t = rng.exponential(np.exp(-risk))
        e = rng.random(n) < 0.8
        return X, t, e

    def test_true_risk_gene_ranks_first(self):
        X, t, e = self._noiseless()
        anchors = select_anchor_genes(X, t, e, k=5)
        assert anchors.genes[0] == 7
        assert anchors.cv_cindex[0] > 0.7

    def test_sign_flip_invariant(self):
        X, t, e = self._noiseless()
        a = screen_genes(X, t, e)
        X[:, 7] *= -1
        X[:, 3] *= -1
        np.testing.assert_allclose(screen_genes(X, t, e), a, atol=1e-12)

    def test_all_genes_sorted(self):
        X, t, e = self._noiseless(g=8)
        anchors = select_anchor_genes(X, t, e, k=8, gene_ids=[f"g{j}" for j in range(8)])
        assert sorted(anchors.genes) == list(range(8))
        assert np.all(np.diff(anchors.cv_cindex) <= 0)
        assert anchors.gene_ids == [f"g{j}" for j in anchors.genes]

    def test_ties_broken_by_id(self):
        X, t, e = self._noiseless(g=4)
        X[:, 1] = X[:, 2] = 1.0  # constant: both score 0.5
        anchors = select_anchor_genes(X, t, e, k=4, gene_ids=["d", "c", "b", "a"])
        const = [gid for gid in anchors.gene_ids if gid in ("c", "b")]
        assert const == ["b", "c"]
        assert np.all(anchors.cv_cindex[np.isin(anchors.genes, [1, 2])] == 0.5)

    def test_k_bounds(self):
        X, t, e = self._noiseless(g=4)
        with pytest.raises(ValueError):
            select_anchor_genes(X, t, e, k=5)

    def test_top(self):
        a = AnchorSet("ALL", np.array([3, 1, 2]), ["c", "a", "b"], np.array([0.9, 0.8, 0.7]))
        assert list(a.top(2).genes) == [3, 1] and a.top(2).gene_ids == ["c", "a"]

    def test_restore_anchor_expressions(self, model, rng):
        G = np.stack([rng.choice(12, 4, replace=False) for _ in range(5)])
        V = rng.normal(size=(5, 4))
        anchors = np.array([0, 5, 9])
        R = restore_anchor_expressions(model, G, V, anchors)
        assert R.shape == (5, 3)
        assert np.array_equal(R, restore_anchor_expressions(model, G, V, anchors))
        np.testing.assert_allclose(restore_anchor_expressions(model, G, V, [5])[:, 0], R[:, 1],
                                   atol=1e-12)


class TestKFold:
    def test_partition(self):
        folds = kfold_indices(23, 5, seed=1)
        assert sorted(np.concatenate(folds)) == list(range(23))
        assert max(map(len, folds)) - min(map(len, folds)) <= 1

    def test_bad_folds(self):
        with pytest.raises(ValueError):
            kfold_indices(3, 4, 0)


class TestSurvivalEval:
    def _data(self, n=300, seed=0):
        rng = np.random.default_rng(seed)
        risk = rng.normal(size=n) * 2.0
        t = rng.exponential(np.exp(-risk))
        c = rng.exponential(3.0, n)
        return risk, _records(np.minimum(t, c), t <= c)

    def test_true_risk(self):
        risk, recs = self._data()
        # the concordance ceiling of the true risk itself bounds any model
        t = np.array([r.time for r in recs])
        e = np.array([r.event for r in recs])
        ceiling = c_index(risk, t, e)
        res = survival_eval(risk[:, None] + 1e-6 * np.random.default_rng(1).normal(size=(300, 1)), recs)
        assert res.mean_cindex > 0.95 * ceiling
        assert len(res.fold_cindex) == 5

    def test_noiseless_deterministic_times(self):
        n = 200
        risk = np.random.default_rng(2).normal(size=n)
        recs = _records(np.exp(-risk), np.ones(n, bool))
        assert survival_eval(risk + 1e-9, recs).mean_cindex > 0.95

    def test_permutation_invariance(self, rng):
        risk, recs = self._data()
        F = np.c_[risk, rng.normal(size=(300, 3))]
        perm = rng.permutation(300)
        a = survival_eval(F, recs)
        b = survival_eval(F[perm], [recs[i] for i in perm])
        assert a.mean_cindex == b.mean_cindex

    def test_duplicated_single_feature(self, rng):
        risk, recs = self._data()
        x = risk + rng.normal(size=300)
        a = survival_eval(x[:, None], recs).mean_cindex
        b = survival_eval(np.c_[x, x], recs).mean_cindex
        assert abs(a - b) < 1e-6

    def test_duplicate_columns_equal_half_ridge(self, rng):
        # duplicating every column is the same model as the original with half the ridge
        X, t, e = _cohort(150, p=3, seed=6)
        one = coxph_fit(X, t, e, l2=0.5)
        two = coxph_fit(np.c_[X, X], t, e, l2=1.0)
        np.testing.assert_allclose(two.beta[:3], one.beta / 2, atol=1e-6)
        np.testing.assert_allclose(two.risk(np.c_[X, X]), one.risk(X), atol=1e-6)

    def test_zero_event_fold_skipped(self):
        n = 40
        t = np.arange(1.0, n + 1)
        e = np.zeros(n, bool)
        e[[3, 17]] = True
        recs = _records(t, e)
        x = -t + np.random.default_rng(0).normal(size=n)
        with warnings.catch_warnings(record=True) as w:
            warnings.simplefilter("always")
            res = survival_eval(x[:, None], recs, l2_grid=(0.1,))
        assert any("no events" in str(m.message) for m in w)
        assert len(res.fold_cindex) < 5

    def test_row_mismatch(self):
        _, recs = self._data(n=30)
        with pytest.raises(ValueError):
            survival_eval(np.zeros((29, 1)), recs)
