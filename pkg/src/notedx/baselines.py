"""Bag-of-words baselines: tf-idf features reduced by PCA, fed to a
multinomial logistic regression or a small ReLU network."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.optimize
import scipy.sparse as sp

from notedx import nn
from notedx.embeddings import N_RESERVED, Vocabulary, build_vocabulary
from notedx.errors import ConfigError, InputError
from notedx.metrics import MetricsReport, evaluate
from notedx.textprep import DEFAULT_SPLIT_RATIOS, CorpusSplit, Document, rank_labels, split_dataset


def _check_features(X):
    data = X.data if sp.issparse(X) else X
    if not np.all(np.isfinite(data)):
        raise InputError("features contain non-finite values")


# -- tf-idf -------------------------------------------------------------------------


@dataclass
class TfidfModel:
    vocab: Vocabulary
    df: np.ndarray
    idf: np.ndarray
    n_docs: int

    @property
    def columns(self) -> list[str]:
        return self.vocab.content_words()

    def transform(self, docs: Sequence[Document] | Sequence[Sequence[str]]) -> sp.csr_matrix:
        """Raw term counts times idf; out-of-vocabulary words are dropped."""
        index = self.vocab.index
        indptr, indices, counts = [0], [], []
        for doc in docs:
            tokens = doc.tokens if isinstance(doc, Document) else doc
            cols: dict[int, int] = {}
            for t in tokens:
                j = index.get(t, -1)
                if j >= N_RESERVED:
                    cols[j - N_RESERVED] = cols.get(j - N_RESERVED, 0) + 1
            for j in sorted(cols):
                indices.append(j)
                counts.append(cols[j])
            indptr.append(len(indices))
        X = sp.csr_matrix(
            (np.asarray(counts, dtype=np.float64), np.asarray(indices, dtype=np.int64), np.asarray(indptr)),
            shape=(len(indptr) - 1, len(self.idf)),
        )
        return sp.csr_matrix(X @ sp.diags(self.idf))


def fit_tfidf(docs: Sequence[Document], vocab: Vocabulary | None = None, min_count: int = 2) -> TfidfModel:
    """Document frequencies and ``idf = ln((1 + T) / (1 + df)) + 1`` over ``docs``."""
    token_lists = [d.tokens if isinstance(d, Document) else d for d in docs]
    if vocab is None:
        vocab = build_vocabulary(token_lists, min_count)
    words = vocab.content_words()
    col = {w: i for i, w in enumerate(words)}
    df = np.zeros(len(words), dtype=np.int64)
    for tokens in token_lists:
        for w in set(tokens):
            j = col.get(w)
            if j is not None:
                df[j] += 1
    n = len(token_lists)
    idf = np.log((1.0 + n) / (1.0 + df)) + 1.0
    return TfidfModel(vocab, df, idf, n)


def tfidf_features(corpus: Sequence[Document], vocab: Vocabulary) -> sp.csr_matrix:
    return fit_tfidf(corpus, vocab).transform(corpus)


# -- PCA ------------------------------------------------------------------------------


@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (V', V), orthonormal rows
    explained_variance: np.ndarray

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    def transform(self, X) -> np.ndarray:
        if sp.issparse(X):
            return np.asarray(X @ self.components.T) - self.mean @ self.components.T
        return (np.asarray(X, dtype=np.float64) - self.mean) @ self.components.T

    def inverse_transform(self, Z) -> np.ndarray:
        return Z @ self.components + self.mean


def fit_pca(X, n_components: int) -> PcaModel:
    """Top principal directions from the SVD of the centered data.

    Each component's sign is fixed so its largest-magnitude entry is positive.
    """
    X = X.toarray() if sp.issparse(X) else np.asarray(X, dtype=np.float64)
    _check_features(X)
    n, d = X.shape
    if not 1 <= n_components <= min(n, d):
        raise ConfigError(f"cannot take {n_components} components from a {n} x {d} matrix")
    mean = X.mean(axis=0)
    _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
    comps = vt[:n_components]
    pivots = np.argmax(np.abs(comps), axis=1)
    comps = comps * np.sign(comps[np.arange(n_components), pivots])[:, None]
    var = s[:n_components] ** 2 / max(n - 1, 1)
    return PcaModel(mean, comps, var)


# -- logistic regression ----------------------------------------------------------------


@dataclass
class LogRegModel:
    weights: np.ndarray  # (K, d)
    bias: np.ndarray  # (K,)
    l2: float
    n_iter: int = 0
    grad_norm: float = float("nan")

    def predict_proba(self, X) -> np.ndarray:
        return nn.softmax(np.asarray(X) @ self.weights.T + self.bias)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)


def logreg_objective(W, b, X, y, l2):
    """Mean cross-entropy plus ``l2/2 * ||W||^2`` (the bias is not penalized)."""
    logits = X @ W.T + b
    logp = nn.log_softmax(logits)
    n = X.shape[0]
    loss = -logp[np.arange(n), y].mean() + 0.5 * l2 * np.sum(W * W)
    g = np.exp(logp)
    g[np.arange(n), y] -= 1.0
    g /= n
    return loss, g.T @ X + l2 * W, g.sum(axis=0)


def train_logreg(X, y, n_classes: int, l2: float = 1e-4, tol: float = 1e-5, max_iter: int = 2000) -> LogRegModel:
    """L-BFGS on the penalized objective; stops once the gradient's
    Euclidean norm drops below ``tol``."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    _check_features(X)
    n, d = X.shape
    K = n_classes
    state = {"g": None, "x": None}

    def fun(theta):
        W = theta[: K * d].reshape(K, d)
        b = theta[K * d :]
        loss, dW, db = logreg_objective(W, b, X, y, l2)
        g = np.concatenate([dW.ravel(), db])
        state["g"], state["x"] = g, theta.copy()
        return loss, g

    def stop(intermediate_result):
        if state["g"] is not None and np.linalg.norm(state["g"]) < tol:
            raise StopIteration

    theta0 = np.zeros(K * d + K)
    res = scipy.optimize.minimize(
        fun, theta0, jac=True, method="L-BFGS-B", callback=stop,
        options={"maxiter": max_iter, "gtol": 0.0, "ftol": 0.0, "maxcor": 20},
    )
    theta = res.x
    _, g = fun(theta)
    return LogRegModel(theta[: K * d].reshape(K, d), theta[K * d :], l2, int(res.nit), float(np.linalg.norm(g)))


# -- MLP ----------------------------------------------------------------------------------


@dataclass
class MlpModel:
    params: dict[str, np.ndarray]
    hidden: tuple[int, ...]
    history: list[dict] = field(default_factory=list)

    def predict_proba(self, X) -> np.ndarray:
        return nn.softmax(_mlp_forward(self.params, np.asarray(X, dtype=np.float64), len(self.hidden))[0])

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)


def init_mlp(n_in: int, n_classes: int, hidden=(100, 10), seed: int = 0) -> MlpModel:
    rng = np.random.default_rng(seed)
    sizes = [n_in, *hidden, n_classes]
    params = {}
    for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
        bound = np.sqrt(6.0 / (a + b))
        params[f"W{i}"] = rng.uniform(-bound, bound, size=(b, a))
        params[f"b{i}"] = np.zeros(b)
    return MlpModel(params, tuple(hidden))


def _mlp_forward(params, X, n_hidden):
    caches = []
    h = X
    for i in range(n_hidden):
        z, dc = nn.dense(h, params[f"W{i}"], params[f"b{i}"])
        h, rc = nn.relu(z)
        caches.append((dc, rc))
    logits, dc = nn.dense(h, params[f"W{n_hidden}"], params[f"b{n_hidden}"])
    caches.append((dc, None))
    return logits, caches


def mlp_loss_and_grads(params, X, y, n_hidden: int, n_classes: int, l2: float = 0.0):
    logits, caches = _mlp_forward(params, X, n_hidden)
    loss, d = nn.softmax_cross_entropy(logits, nn.one_hot(y, n_classes))
    grads = {}
    for i in range(n_hidden, -1, -1):
        dc, rc = caches[i]
        if rc is not None:
            d = nn.relu_backward(d, rc)
        d, grads[f"W{i}"], grads[f"b{i}"] = nn.dense_backward(d, dc)
    if l2:
        for i in range(n_hidden + 1):
            W = params[f"W{i}"]
            loss += 0.5 * l2 * float(np.sum(W * W))
            grads[f"W{i}"] = grads[f"W{i}"] + l2 * W
    return loss, grads


def train_mlp(
    X,
    y,
    n_classes: int,
    hidden=(100, 10),
    lr: float = 1e-3,
    l2: float = 1e-4,
    batch_size: int = 200,
    max_epochs: int = 200,
    patience: int = 10,
    holdout: float = 0.1,
    seed: int = 0,
) -> MlpModel:
    """Adam on cross-entropy with early stopping on a held-out slice of the
    training data; the best held-out-accuracy weights are kept."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    _check_features(X)
    model = init_mlp(X.shape[1], n_classes, hidden, seed)
    if max_epochs == 0:
        return model
    rng = np.random.default_rng([seed, 3])
    order = rng.permutation(X.shape[0])
    n_hold = max(1, int(round(holdout * X.shape[0]))) if X.shape[0] > 1 else 0
    hold, fit = order[:n_hold], order[n_hold:]
    if fit.size == 0:
        raise InputError("too few samples to hold out an early-stopping set")
    opt = nn.Adam(lr=lr)
    best_acc, best, stale = -1.0, None, 0
    for epoch in range(1, max_epochs + 1):
        perm = rng.permutation(fit)
        total = 0.0
        for s in range(0, perm.size, batch_size):
            idx = perm[s : s + batch_size]
            loss, grads = mlp_loss_and_grads(model.params, X[idx], y[idx], len(hidden), n_classes, l2)
            opt.step(model.params, grads)
            total += loss * idx.size
        acc = float(np.mean(model.predict(X[hold]) == y[hold])) if hold.size else 0.0
        model.history.append({"epoch": epoch, "train_loss": total / perm.size, "holdout_accuracy": acc})
        # ties keep the later, longer-trained weights but do not reset patience
        if acc >= best_acc:
            best = {k: v.copy() for k, v in model.params.items()}
        if acc > best_acc:
            best_acc, stale = acc, 0
        else:
            stale += 1
            if stale >= patience:
                break
    model.params = best
    return model


# -- experiment runner ----------------------------------------------------------------------


@dataclass
class BaselineRun:
    seed: int
    split: CorpusSplit
    report: MetricsReport
    predictions: list[dict]
    pca_dim: int


def run_baseline(
    corpus: Sequence[Document],
    kind: str,
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    pca_dim: int = 256,
    min_count: int = 2,
    l2: float = 1e-4,
    ratios=DEFAULT_SPLIT_RATIOS,
    classes: Sequence[str] | None = None,
    on_seed: Callable[[BaselineRun], None] | None = None,
) -> list[BaselineRun]:
    """Per seed: split, fit tf-idf and PCA on the training split only, train,
    and evaluate on the test split. Uses the same splits as the CNN runs."""
    if kind not in ("logreg", "mlp"):
        raise ConfigError(f"unknown baseline {kind!r}; expected logreg or mlp")
    classes = list(classes) if classes is not None else [c for c, _ in rank_labels(d.label for d in corpus)]
    index = {c: i for i, c in enumerate(classes)}
    runs = []
    for seed in seeds:
        split = split_dataset(corpus, seed, ratios)
        tfidf = fit_tfidf(split.train, min_count=min_count)
        Xtr = tfidf.transform(split.train)
        # small corpora cannot support the requested dimension
        dim = min(pca_dim, Xtr.shape[0], Xtr.shape[1])
        pca = fit_pca(Xtr, dim)
        Ztr, Zte = pca.transform(Xtr), pca.transform(tfidf.transform(split.test))
        ytr = np.array([index[d.label] for d in split.train])
        if kind == "logreg":
            model = train_logreg(Ztr, ytr, len(classes), l2=l2)
        else:
            model = train_mlp(Ztr, ytr, len(classes), seed=seed)
        probs = model.predict_proba(Zte)
        preds = [classes[k] for k in probs.argmax(axis=1)]
        report = evaluate([d.label for d in split.test], preds, classes, seed)
        rows = [{"id": d.id, "gold": d.label, "pred": p, "probs": pr} for d, p, pr in zip(split.test, preds, probs)]
        run = BaselineRun(seed, split, report, rows, dim)
        if on_seed is not None:
            on_seed(run)
        runs.append(run)
    return runs
