"""Cancer-type classification from random gene subsets.

Arms: PCA scores + linear head, linear head on frozen cls embeddings, a
one-hidden-layer MLP on raw values, and full fine-tuning of the encoder.
Every arm of a given repeat sees the same gene subset.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .. import tensor as T
from ..model import GexModel, fine_tune_step, new_classifier_head, classifier_logits
from ..optim import AdamW
from ..tensor import Tensor

PCA_LINEAR = "PCA200+linear"
CLS_LINEAR = "CLS+linear"
NN = "NN"
FINETUNE = "FINETUNE"
ARMS = (PCA_LINEAR, CLS_LINEAR, NN, FINETUNE)


# ---------------------------------------------------------------- PCA


@dataclass
class PCA:
    mean: np.ndarray
    components: np.ndarray  # (k, p), orthonormal rows
    singular_values: np.ndarray

    def transform(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) @ self.components.T

    def inverse_transform(self, Z) -> np.ndarray:
        return np.asarray(Z, dtype=np.float64) @ self.components + self.mean


def pca_fit(X, n_components: int) -> PCA:
    """Top right-singular vectors of the centered matrix.

    Each component is signed so that its largest-magnitude loading is positive.
    """
    X = np.asarray(X, dtype=np.float64)
    n, p = X.shape
    if not 1 <= n_components <= min(n - 1, p):
        raise ValueError(f"n_components={n_components} exceeds min(n_samples - 1, n_features) = {min(n - 1, p)}")
    mean = X.mean(axis=0)
    _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
    comps = vt[:n_components]
    lead = comps[np.arange(n_components), np.argmax(np.abs(comps), axis=1)]
    comps = comps * np.where(lead < 0, -1.0, 1.0)[:, None]
    return PCA(mean, comps, s[:n_components])


def pca_transform(pca: PCA, X) -> np.ndarray:
    return pca.transform(X)


# ---------------------------------------------------------------- linear head


@dataclass
class LinearClassifier:
    mean: np.ndarray
    scale: np.ndarray
    W: np.ndarray  # (p, k)
    b: np.ndarray
    classes: np.ndarray

    def logits(self, X) -> np.ndarray:
        return ((np.asarray(X, dtype=np.float64) - self.mean) / self.scale) @ self.W + self.b

    def predict(self, X) -> np.ndarray:
        return self.classes[np.argmax(self.logits(X), axis=1)]


def _encode_labels(y):
    classes, yi = np.unique(np.asarray(y), return_inverse=True)
    if classes.size < 2:
        raise ValueError("classification needs at least 2 classes")
    return classes, yi


def fit_linear_classifier(X, y, l2: float = 1e-3, max_iter: int = 500) -> LinearClassifier:
    """Multinomial logistic regression on standardized features (L-BFGS)."""
    X = np.asarray(X, dtype=np.float64)
    classes, yi = _encode_labels(y)
    n, p = X.shape
    k = classes.size
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    Z = (X - mu) / sd
    Y = np.eye(k)[yi]

    def f(theta):
        W = theta[:p * k].reshape(p, k)
        b = theta[p * k:]
        L = Z @ W + b
        L = L - L.max(axis=1, keepdims=True)
        lse = np.log(np.exp(L).sum(axis=1, keepdims=True))
        P = np.exp(L - lse)
        loss = -np.sum(Y * (L - lse)) / n + 0.5 * l2 * np.sum(W * W)
        G = (P - Y) / n
        return loss, np.concatenate([(Z.T @ G + l2 * W).ravel(), G.sum(axis=0)])

    res = minimize(f, np.zeros(p * k + k), jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter})
    return LinearClassifier(mu, sd, res.x[:p * k].reshape(p, k), res.x[p * k:], classes)


# ---------------------------------------------------------------- MLP baseline


@dataclass
class MLPClassifier:
    mean: np.ndarray
    scale: np.ndarray
    params: dict[str, Tensor]
    classes: np.ndarray

    def _forward(self, Z):
        p = self.params
        h = T.relu(T.add(T.matmul(Z, p["w1"]), p["b1"]))
        return T.add(T.matmul(h, p["w2"]), p["b2"])

    def logits(self, X) -> np.ndarray:
        Z = (np.asarray(X, dtype=np.float64) - self.mean) / self.scale
        with T.no_grad():
            return self._forward(Tensor(Z)).data

    def predict(self, X) -> np.ndarray:
        return self.classes[np.argmax(self.logits(X), axis=1)]


def nn_baseline_train(X, y, hidden: int = 128, layers: int = 2, epochs: int = 100,
                      batch_size: int = 32, lr: float = 1e-3, weight_decay: float = 0.01,
                      seed: int = 0) -> MLPClassifier:
    """Two-layer MLP (one ReLU hidden layer) trained with AdamW and cross-entropy."""
    if layers != 2:
        raise ValueError("only the 2-layer network is supported")
    X = np.asarray(X, dtype=np.float64)
    classes, yi = _encode_labels(y)
    n, p = X.shape
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    Z = (X - mu) / sd
    rng = np.random.default_rng(seed)
    params = {
        "w1": Tensor(rng.normal(0.0, np.sqrt(2.0 / p), (p, hidden)), requires_grad=True),
        "b1": Tensor(np.zeros(hidden), requires_grad=True),
        "w2": Tensor(rng.normal(0.0, np.sqrt(1.0 / hidden), (hidden, classes.size)), requires_grad=True),
        "b2": Tensor(np.zeros(classes.size), requires_grad=True),
    }
    clf = MLPClassifier(mu, sd, params, classes)
    opt = AdamW(params, lr=lr, weight_decay=weight_decay)
    for _ in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            opt.zero_grad()
            T.cross_entropy(clf._forward(Tensor(Z[idx])), yi[idx]).backward()
            opt.step()
    return clf


# ---------------------------------------------------------------- fine-tuning


@dataclass
class FineTuneSettings:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 0.01
    freeze_tables: bool = False


def fine_tune(model: GexModel, genes, values, y, settings: FineTuneSettings | None = None,
              seed: int = 0):
    """Fine-tune a copy of ``model`` end to end; returns (model, head, classes).

    The head starts from the linear probe fitted on the frozen cls
    embeddings, so training begins at the probe's solution.
    """
    s = settings or FineTuneSettings()
    classes, yi = _encode_labels(y)
    ft = model.copy()
    probe = fit_linear_classifier(ft.embed(genes, values), yi)
    head = new_classifier_head(ft.config.d, classes.size, seed)
    head["w"].data[...] = probe.W / probe.scale[:, None]
    head["b"].data[...] = probe.b - (probe.mean / probe.scale) @ probe.W
    params = {k: v for k, v in ft.params.items()
              if not (s.freeze_tables and k in ft.tables.names)}
    params.update({"head." + k: v for k, v in head.items()})
    opt = AdamW(params, lr=s.lr, weight_decay=s.weight_decay)
    rng = np.random.default_rng(seed)
    n = yi.size
    for _ in range(s.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, s.batch_size):
            idx = order[lo:lo + s.batch_size]
            fine_tune_step(ft, head, genes[idx], values[idx], yi[idx], opt)
    return ft, head, classes


def predict_fine_tuned(model: GexModel, head, classes, genes, values, batch_size: int = 64):
    out = []
    with T.no_grad():
        for lo in range(0, genes.shape[0], batch_size):
            out.append(classifier_logits(model, head, genes[lo:lo + batch_size],
                                         values[lo:lo + batch_size]).data)
    return classes[np.argmax(np.concatenate(out), axis=1)]


# ---------------------------------------------------------------- evaluation


@dataclass
class ClassifyResult:
    arm: str
    size: int
    accuracies: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies))

    def summary(self) -> str:
        return f"{self.mean:.3f} ({self.std:.3f})"


def gene_subset(vocab: int, size: int, seed: int, repeat: int) -> np.ndarray:
    if not 1 <= size <= vocab:
        raise ValueError(f"subset size {size} outside [1, {vocab}]")
    return np.sort(np.random.default_rng([seed, repeat]).choice(vocab, size, replace=False))


def classify_once(arm: str, values, labels, dev_rows, test_rows, genes, model=None,
                  seed: int = 0, nn_epochs: int = 100, finetune: FineTuneSettings | None = None,
                  n_pca: int = 200) -> float:
    """Test accuracy of one arm on one gene subset."""
    if arm not in ARMS:
        raise ValueError(f"unknown arm {arm!r}; expected one of {ARMS}")
    labels = np.asarray(labels)
    X = np.asarray(values, dtype=np.float64)[:, genes]
    ytr, yte = labels[dev_rows], labels[test_rows]
    if arm in (PCA_LINEAR, NN):
        Xf = np.where(np.isnan(X), 0.0, X)
        if arm == NN:
            clf = nn_baseline_train(Xf[dev_rows], ytr, epochs=nn_epochs, seed=seed)
            pred = clf.predict(Xf[test_rows])
        else:
            k = min(n_pca, len(dev_rows) - 1, Xf.shape[1])
            pca = pca_fit(Xf[dev_rows], k)
            clf = fit_linear_classifier(pca.transform(Xf[dev_rows]), ytr)
            pred = clf.predict(pca.transform(Xf[test_rows]))
        return float(np.mean(pred == yte))
    if model is None:
        raise ValueError(f"arm {arm} needs a trained model")
    G = np.broadcast_to(genes, X.shape)
    if arm == CLS_LINEAR:
        E = model.embed(G, X)
        clf = fit_linear_classifier(E[dev_rows], ytr)
        pred = clf.predict(E[test_rows])
    else:
        ft, head, classes = fine_tune(model, G[dev_rows], X[dev_rows], ytr, finetune, seed)
        pred = predict_fine_tuned(ft, head, classes, G[test_rows], X[test_rows])
    return float(np.mean(pred == yte))


def classify_eval(arm: str, values, labels, dev_rows, test_rows, size: int, repeats: int = 10,
                  model: GexModel | None = None, seed: int = 0, **kw) -> ClassifyResult:
    """Accuracy on ``test_rows`` for ``repeats`` independent gene subsets of ``size``."""
    vocab = np.asarray(values).shape[1]
    accs = [classify_once(arm, values, labels, dev_rows, test_rows,
                          gene_subset(vocab, size, seed, r), model, seed + r, **kw)
            for r in range(repeats)]
    return ClassifyResult(arm, size, accs)
