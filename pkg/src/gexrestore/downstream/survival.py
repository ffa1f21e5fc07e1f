"""Concordance index, ridge-penalized Cox regression and anchor-gene screening."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..data_io import SurvivalRecord, survival_arrays

log = logging.getLogger(__name__)


class UndefinedCIndexError(ValueError):
    """No comparable pair exists."""


class ConvergenceError(RuntimeError):
    def __init__(self, msg: str, grad_norm: float):
        super().__init__(f"{msg} (last gradient norm {grad_norm:.3e})")
        self.grad_norm = grad_norm


def _as_arrays(time, event):
    if event is None:
        time, event = survival_arrays(time)
    time = np.asarray(time, dtype=np.float64)
    event = np.asarray(event, dtype=bool)
    return time, event


# ---------------------------------------------------------------- C-index
#
# Harrell's convention: (i, j) is comparable when i had the event and
# t_i < t_j (j event or censored). Concordant when risk_i > risk_j; tied
# risks count one half.


def c_index_counts(risks, time, event=None) -> tuple[float, int]:
    """(concordant mass, comparable pairs) in O(n log n) with a Fenwick tree."""
    time, event = _as_arrays(time, event)
    risks = np.asarray(risks, dtype=np.float64)
    n = risks.size
    if time.size != n:
        raise ValueError(f"{n} risks for {time.size} survival records")
    ranks = np.unique(risks, return_inverse=True)[1] + 1
    tree = [0] * (int(ranks.max(initial=0)) + 1)

    def insert(r):
        while r < len(tree):
            tree[r] += 1
            r += r & -r

    def below(r):  # count of inserted ranks <= r
        s = 0
        while r > 0:
            s += tree[r]
            r -= r & -r
        return s

    order = np.argsort(-time, kind="stable")
    conc2, pairs, inserted = 0, 0, 0
    k = 0
    while k < n:
        t = time[order[k]]
        end = k
        while end < n and time[order[end]] == t:
            end += 1
        group = order[k:end]
        # every sample inserted so far has a strictly larger time
        for i in group:
            if event[i]:
                r = int(ranks[i])
                lt = below(r - 1)
                eq = below(r) - lt
                conc2 += 2 * lt + eq
                pairs += inserted
        for i in group:
            insert(int(ranks[i]))
        inserted += len(group)
        k = end
    return conc2 / 2.0, pairs


def c_index(risks, time, event=None) -> float:
    """Harrell's C. ``time`` may be a list of :class:`SurvivalRecord` instead of arrays."""
    risks = np.asarray(risks, dtype=np.float64)
    if risks.size < 2:
        raise ValueError("c_index needs at least 2 samples")
    t, e = _as_arrays(time, event)
    if not e.any():
        raise UndefinedCIndexError("c_index needs at least one event")
    conc, pairs = c_index_counts(risks, t, e)
    if pairs == 0:
        raise UndefinedCIndexError("no comparable pairs")
    return conc / pairs


def c_index_bruteforce(risks, time, event=None) -> float:
    """Reference O(n^2) pair enumeration."""
    time, event = _as_arrays(time, event)
    risks = np.asarray(risks, dtype=np.float64)
    conc, pairs = 0.0, 0
    n = risks.size
    for i in range(n):
        if not event[i]:
            continue
        for j in range(n):
            if time[i] < time[j]:
                pairs += 1
                if risks[i] > risks[j]:
                    conc += 1.0
                elif risks[i] == risks[j]:
                    conc += 0.5
    if pairs == 0:
        raise UndefinedCIndexError("no comparable pairs")
    return conc / pairs


def c_index_columns(R: np.ndarray, time, event) -> np.ndarray:
    """C-index of every column of ``R`` (samples x k), vectorized over columns."""
    time, event = _as_arrays(time, event)
    comp = event[:, None] & (time[:, None] < time[None, :])
    pairs = comp.sum()
    if pairs == 0:
        raise UndefinedCIndexError("no comparable pairs")
    ii, jj = np.nonzero(comp)
    out = np.empty(R.shape[1])
    for lo in range(0, R.shape[1], 256):
        ri, rj = R[ii, lo:lo + 256], R[jj, lo:lo + 256]
        out[lo:lo + 256] = ((ri > rj).sum(axis=0) + 0.5 * (ri == rj).sum(axis=0)) / pairs
    return out


# ---------------------------------------------------------------- Cox model


@dataclass
class CoxModel:
    beta: np.ndarray
    l2: float
    ties: str = "breslow"
    n_iter: int = 0
    loglik_trace: list[float] = field(default_factory=list)
    grad_norm: float = 0.0

    def risk(self, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.beta


def _risk_set_order(time):
    order = np.argsort(-time, kind="stable")
    ts = time[order]
    # last index (in descending order) of each sample's tie group
    end = np.searchsorted(-ts, -ts, side="right") - 1
    return order, end


def cox_loglik_terms(X, time, event, beta, ties: str = "breslow", need_hess: bool = True):
    """Partial log-likelihood, gradient and Hessian (unpenalized)."""
    X = np.asarray(X, dtype=np.float64)
    if ties == "efron":
        return _efron_terms(X, time, event, beta, need_hess)
    if ties != "breslow":
        raise ValueError(f"unknown ties method {ties!r}")
    order, end = _risk_set_order(time)
    Xs, es = X[order], event[order]
    eta = Xs @ beta
    c = eta.max()
    w = np.exp(eta - c)
    S0 = np.cumsum(w)[end]
    S1 = np.cumsum(w[:, None] * Xs, axis=0)[end]
    ev = np.flatnonzero(es)
    loglik = float(np.sum(eta[ev] - c - np.log(S0[ev])))
    M = S1[ev] / S0[ev, None]
    grad = (Xs[ev] - M).sum(axis=0)
    if not need_hess:
        return loglik, grad, None
    a = np.zeros(len(w))
    np.add.at(a, end[ev], 1.0 / S0[ev])
    coef = np.cumsum(a[::-1])[::-1] * w
    H = -((Xs * coef[:, None]).T @ Xs - M.T @ M)
    return loglik, grad, H


def _efron_terms(X, time, event, beta, need_hess):
    eta = X @ beta
    c = eta.max()
    w = np.exp(eta - c)
    p = X.shape[1]
    loglik, grad, H = 0.0, np.zeros(p), np.zeros((p, p))
    for t in np.unique(time[event]):
        at_risk = time >= t
        tied = (time == t) & event
        d = int(tied.sum())
        r0 = w[at_risk].sum()
        r1 = w[at_risk] @ X[at_risk]
        r2 = (X[at_risk] * w[at_risk, None]).T @ X[at_risk]
        t0 = w[tied].sum()
        t1 = w[tied] @ X[tied]
        t2 = (X[tied] * w[tied, None]).T @ X[tied]
        loglik += float(eta[tied].sum())
        grad += X[tied].sum(axis=0)
        for k in range(d):
            f = k / d
            s0 = r0 - f * t0
            s1 = r1 - f * t1
            loglik -= c + np.log(s0)
            m = s1 / s0
            grad -= m
            if need_hess:
                H -= (r2 - f * t2) / s0 - np.outer(m, m)
    return loglik, grad, (H if need_hess else None)


def penalized_loglik(X, time, event, beta, l2, ties="breslow") -> float:
    ll, _, _ = cox_loglik_terms(X, time, event, beta, ties, need_hess=False)
    return ll - 0.5 * l2 * float(beta @ beta)


def coxph_fit(X, time, event=None, l2: float = 0.0, ties: str = "breslow",
              tol: float = 1e-8, max_iter: int = 100, beta0=None) -> CoxModel:
    """Maximize the partial log-likelihood minus ``l2/2 * |beta|^2`` by Newton.

    Each step is halved until the penalized objective does not decrease.
    The fit has converged when the gradient norm drops below ``tol`` or when
    the predicted Newton gain is below the rounding error of the objective
    (large event counts put ``tol`` under the float64 noise floor). Raises
    :class:`ConvergenceError` otherwise after ``max_iter`` iterations.
    """
    time, event = _as_arrays(time, event)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n, p = X.shape
    if p < 1 or time.size != n:
        raise ValueError(f"design {X.shape} does not match {time.size} records")
    if not event.any():
        raise ValueError("coxph_fit needs at least one event")
    if l2 < 0:
        raise ValueError("l2 must be >= 0")
    beta = np.zeros(p) if beta0 is None else np.array(beta0, dtype=np.float64)

    def terms(b):
        ll, g, H = cox_loglik_terms(X, time, event, b, ties)
        return ll - 0.5 * l2 * float(b @ b), g - l2 * b, H - l2 * np.eye(p)

    f, g, H = terms(beta)
    trace = [f]
    gnorm = float(np.linalg.norm(g))
    for it in range(max_iter + 1):
        if gnorm < tol:
            return CoxModel(beta, l2, ties, it, trace, gnorm)
        try:
            step = np.linalg.solve(-H, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(-H, g, rcond=None)[0]
        if _at_precision_floor(float(g @ step), f):
            return CoxModel(beta, l2, ties, it, trace, gnorm)
        if it == max_iter:
            break
        s = 1.0
        for _ in range(60):
            cand = beta + s * step
            f_new = penalized_loglik(X, time, event, cand, l2, ties)
            if np.isfinite(f_new) and f_new >= f:
                break
            s *= 0.5
        else:
            raise ConvergenceError("step-halving failed to improve the objective", gnorm)
        beta = cand
        f, g, H = terms(beta)
        trace.append(f)
        gnorm = float(np.linalg.norm(g))
    raise ConvergenceError(f"Newton did not converge in {max_iter} iterations", gnorm)


def _at_precision_floor(decrement, f):
    """Predicted Newton gain below the rounding error of the objective itself."""
    return 0.5 * decrement <= 64 * np.finfo(float).eps * np.maximum(1.0, np.abs(f))


def _univariate_fits(X, time, event, l2, tol=1e-8, max_iter=100) -> np.ndarray:
    """Breslow ridge fit of every column separately; vectorized Newton."""
    order, end = _risk_set_order(time)
    Xs, es = X[order], event[order]
    ev = np.flatnonzero(es)
    G = X.shape[1]
    beta = np.zeros(G)

    def terms(b):
        eta = Xs * b
        c = eta.max(axis=0)
        w = np.exp(eta - c)
        S0 = np.cumsum(w, axis=0)[end][ev]
        S1 = np.cumsum(w * Xs, axis=0)[end][ev]
        S2 = np.cumsum(w * Xs * Xs, axis=0)[end][ev]
        m = S1 / S0
        f = (eta[ev] - c - np.log(S0)).sum(axis=0) - 0.5 * l2 * b * b
        g = (Xs[ev] - m).sum(axis=0) - l2 * b
        h = -(S2 / S0 - m * m).sum(axis=0) - l2
        return f, g, h

    f, g, h = terms(beta)
    for _ in range(max_iter):
        dec = np.where(h < 0, g * g / np.where(h < 0, -h, 1.0), np.inf)
        active = (np.abs(g) >= tol) & ~_at_precision_floor(dec, np.abs(f))
        if not active.any():
            break
        step = np.where(active & (h < 0), -g / np.where(h < 0, h, -1.0), 0.0)
        s = np.ones(G)
        for _ in range(60):
            f_new, g_new, h_new = terms(beta + s * step)
            bad = ~(np.isfinite(f_new) & (f_new >= f)) & active
            if not bad.any():
                break
            s = np.where(bad, s * 0.5, s)
        beta = beta + s * step
        f, g, h = terms(beta)
    return beta


# ---------------------------------------------------------------- folds


def kfold_indices(n: int, folds: int, seed: int) -> list[np.ndarray]:
    if folds < 2 or folds > n:
        raise ValueError(f"need 2 <= folds <= n ({n}), got {folds}")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(perm[k::folds]) for k in range(folds)]


# ---------------------------------------------------------------- anchors


@dataclass
class AnchorSet:
    label: str
    genes: np.ndarray  # column indices, best first
    gene_ids: list[str]
    cv_cindex: np.ndarray

    def top(self, k: int) -> "AnchorSet":
        return AnchorSet(self.label, self.genes[:k], self.gene_ids[:k], self.cv_cindex[:k])


def screen_genes(X, time, event=None, folds: int = 5, l2: float = 0.01,
                 seed: int = 0) -> np.ndarray:
    """Mean held-out C-index of a univariate Cox fit, per column of ``X``.

    A fold where the gene is constant (beta = 0) scores 0.5 for that gene.
    """
    time, event = _as_arrays(time, event)
    X = np.asarray(X, dtype=np.float64)
    n, G = X.shape
    total = np.zeros(G)
    used = 0
    for k, test in enumerate(kfold_indices(n, folds, seed)):
        train = np.setdiff1d(np.arange(n), test)
        if not event[train].any() or not event[test].any():
            warnings.warn(f"anchor screening: fold {k} has no events on one side; skipped")
            continue
        Xt = X[train]
        sd = Xt.std(axis=0)
        beta = _univariate_fits(Xt, time[train], event[train], l2)
        beta = np.where(sd > 1e-12, beta, 0.0)
        try:
            cidx = c_index_columns(X[test] * np.sign(beta), time[test], event[test])
        except UndefinedCIndexError:
            continue
        total += np.where(beta != 0.0, cidx, 0.5)
        used += 1
    if used == 0:
        raise UndefinedCIndexError("no usable fold for anchor screening")
    return total / used


def select_anchor_genes(X, time, event=None, k: int = 512, folds: int = 5,
                        gene_ids: Sequence[str] | None = None, label: str = "ALL",
                        l2: float = 0.01, seed: int = 0) -> AnchorSet:
    """Top-``k`` genes by cross-validated univariate C-index; ties by gene id."""
    X = np.asarray(X, dtype=np.float64)
    G = X.shape[1]
    if not 1 <= k <= G:
        raise ValueError(f"k={k} must lie in [1, {G}]")
    ids = list(gene_ids) if gene_ids is not None else [str(j) for j in range(G)]
    scores = screen_genes(X, time, event, folds, l2, seed)
    order = sorted(range(G), key=lambda j: (-scores[j], ids[j]))[:k]
    order = np.asarray(order, dtype=np.int64)
    return AnchorSet(label, order, [ids[j] for j in order], scores[order])


def restore_anchor_expressions(model, genes, values, anchors: AnchorSet | Sequence[int],
                               batch_size: int = 64) -> np.ndarray:
    """Restored anchor values (samples x |anchors|) from each row's input set."""
    targets = anchors.genes if isinstance(anchors, AnchorSet) else np.asarray(anchors)
    return model.restore(genes, values, np.asarray(targets, dtype=np.int64), batch_size)


# ---------------------------------------------------------------- evaluation

DEFAULT_L2_GRID = (0.01, 0.1, 1.0, 10.0)


def _standardize(train, other):
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    return (train - mu) / sd, (other - mu) / sd


def _fit_score(Xtr, ttr, etr, Xte, tte, ete, l2):
    Xtr, Xte = _standardize(Xtr, Xte)
    fit = coxph_fit(Xtr, ttr, etr, l2)
    return c_index(fit.risk(Xte), tte, ete)


@dataclass
class SurvivalEvalResult:
    mean_cindex: float
    fold_cindex: list[float]
    chosen_l2: list[float]


def survival_eval(features, records: Sequence[SurvivalRecord], l2_grid=DEFAULT_L2_GRID,
                  folds: int = 5, inner_folds: int = 3, seed: int = 0) -> SurvivalEvalResult:
    """Nested cross-validated C-index of a ridge Cox model on ``features``.

    Samples are put in sample-id order before fold assignment, so the
    result does not depend on row order. Features are standardized with
    training-fold statistics; the ridge strength is chosen by inner CV.
    """
    F = np.asarray(features, dtype=np.float64)
    if F.ndim == 1:
        F = F[:, None]
    if F.shape[0] != len(records):
        raise ValueError(f"{F.shape[0]} feature rows for {len(records)} records")
    canon = sorted(range(len(records)), key=lambda i: records[i].sample_id)
    F = F[canon]
    time, event = survival_arrays([records[i] for i in canon])
    n = F.shape[0]
    scores, chosen = [], []
    for k, test in enumerate(kfold_indices(n, folds, seed)):
        train = np.setdiff1d(np.arange(n), test)
        if not event[test].any() or not event[train].any():
            warnings.warn(f"survival_eval: outer fold {k} has no events; skipped")
            continue
        best_l2, best = l2_grid[0], -np.inf
        if len(l2_grid) > 1:
            for l2 in l2_grid:
                inner = []
                for itest in kfold_indices(train.size, inner_folds, seed + 1000 + k):
                    itr = train[np.setdiff1d(np.arange(train.size), itest)]
                    ite = train[itest]
                    if not event[ite].any() or not event[itr].any():
                        continue
                    try:
                        inner.append(_fit_score(F[itr], time[itr], event[itr],
                                                F[ite], time[ite], event[ite], l2))
                    except (ConvergenceError, UndefinedCIndexError):
                        continue
                if inner and np.mean(inner) > best:
                    best, best_l2 = float(np.mean(inner)), l2
        try:
            scores.append(_fit_score(F[train], time[train], event[train],
                                     F[test], time[test], event[test], best_l2))
            chosen.append(best_l2)
        except UndefinedCIndexError:
            warnings.warn(f"survival_eval: outer fold {k} has no comparable pairs; skipped")
    if not scores:
        raise UndefinedCIndexError("no evaluable fold")
    return SurvivalEvalResult(float(np.mean(scores)), scores, chosen)
