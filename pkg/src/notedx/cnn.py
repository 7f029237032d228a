"""Convolutional document classifier.

Token ids go through an embedding lookup, parallel banks of "same"-padded
convolution filters with ReLU, max-over-time pooling, dropout on the
concatenated pooled features, and a dense softmax layer.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from notedx import _binio
from notedx import nn
from notedx.embeddings import N_RESERVED, EmbeddingStore, Vocabulary, build_vocabulary
from notedx.errors import ConfigError, EmptyCorpusError, InputError, ShapeError
from notedx.metrics import MetricsReport, evaluate
from notedx.runtime import numeric_mode
from notedx.textprep import DEFAULT_SPLIT_RATIOS, CorpusSplit, Document, rank_labels, split_dataset

_CKPT_MAGIC = b"NDXCNNMD"
_CKPT_VERSION = 1


@dataclass
class CnnConfig:
    embed_dim: int = 128
    filters: tuple = ((3, 64), (4, 64), (5, 64))  # (height, count) per bank
    n_classes: int | None = None
    p_keep: float = 0.5
    lr: float = 1e-4
    batch_size: int = 64
    max_epochs: int = 50
    patience: int = 5
    fine_tune: bool = True
    seed: int = 0
    dtype: str = "float64"
    deterministic: bool = False

    def __post_init__(self):
        self.filters = tuple((int(h), int(f)) for h, f in self.filters)

    def validate(self) -> "CnnConfig":
        if not self.filters:
            raise ConfigError("at least one filter bank is required")
        if any(h < 1 or f < 1 for h, f in self.filters):
            raise ConfigError(f"filter heights and counts must be positive, got {self.filters}")
        if self.n_classes is not None and self.n_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.n_classes}")
        if not 0.0 < self.p_keep <= 1.0:
            raise ConfigError(f"p_keep must lie in (0, 1], got {self.p_keep}")
        if self.embed_dim < 1 or self.batch_size < 1 or self.max_epochs < 0 or self.patience < 1:
            raise ConfigError("embed_dim, batch_size and patience must be positive, max_epochs non-negative")
        if self.lr < 0:
            raise ConfigError(f"learning rate must be non-negative, got {self.lr}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")
        return self

    @property
    def n_features(self) -> int:
        return sum(f for _, f in self.filters)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["filters"] = [list(f) for f in self.filters]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CnnConfig":
        return cls(**d)


@dataclass
class CnnModel:
    config: CnnConfig
    vocab: Vocabulary
    classes: list[str]
    max_len: int
    params: dict[str, np.ndarray]
    history: list[dict] = field(default_factory=list)

    @property
    def embedding(self) -> np.ndarray:
        return self.params["embedding"]

    @property
    def banks(self) -> list[nn.FilterBank]:
        return [nn.FilterBank(self.params[f"bank{i}.W"], self.params[f"bank{i}.b"]) for i in range(len(self.config.filters))]

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def copy(self) -> "CnnModel":
        return CnnModel(
            self.config, self.vocab, list(self.classes), self.max_len,
            {k: v.copy() for k, v in self.params.items()}, copy.deepcopy(self.history),
        )


def build_model(
    config: CnnConfig,
    vocab: Vocabulary,
    classes: Sequence[str],
    max_len: int,
    pretrained: EmbeddingStore | None = None,
) -> CnnModel:
    config.validate()
    classes = list(classes)
    if len(classes) < 2:
        raise ConfigError("a classifier needs at least two classes")
    if config.n_classes is not None and config.n_classes != len(classes):
        raise ConfigError(f"config expects {config.n_classes} classes, data has {len(classes)}")
    if max_len < 1:
        raise InputError(f"max_len must be positive, got {max_len}")
    dtype = np.dtype(config.dtype)
    rng = np.random.default_rng(config.seed)
    E = config.embed_dim
    if pretrained is not None:
        if pretrained.dim != E:
            raise ShapeError(f"pretrained vectors have dimension {pretrained.dim}, config wants {E}")
        table = np.zeros((len(vocab), E), dtype=np.float64)
        for i, word in enumerate(vocab.words[N_RESERVED:], N_RESERVED):
            table[i] = pretrained.embed(word)
    else:
        table = rng.uniform(-0.05, 0.05, size=(len(vocab), E))
        table[: N_RESERVED] = 0.0
    params = {"embedding": table}
    for i, (h, f) in enumerate(config.filters):
        bound = np.sqrt(6.0 / (h * E))
        params[f"bank{i}.W"] = rng.uniform(-bound, bound, size=(f, h, E))
        params[f"bank{i}.b"] = np.zeros(f)
    bound = np.sqrt(3.0 / config.n_features)
    params["dense.W"] = rng.uniform(-bound, bound, size=(len(classes), config.n_features))
    params["dense.b"] = np.zeros(len(classes))
    params = {k: np.ascontiguousarray(v, dtype=dtype) for k, v in params.items()}
    return CnnModel(config, vocab, classes, int(max_len), params)


# -- forward / backward --------------------------------------------------------------


def encode_documents(model: CnnModel, docs: Sequence[Document]) -> np.ndarray:
    """Token ids, truncated and right-padded with index 0 to ``max_len``."""
    ids = np.zeros((len(docs), model.max_len), dtype=np.int64)
    for i, doc in enumerate(docs):
        row = model.vocab.encode(doc.tokens[: model.max_len])
        ids[i, : row.size] = row
    return ids


def forward_batch(model: CnnModel, ids: np.ndarray, train: bool = False, rng=None):
    """Logits for a ``(B, L)`` id matrix, plus the cache for backprop."""
    p = model.params
    x, emb_cache = nn.embedding_lookup(ids, p["embedding"])
    pooled, bank_caches = [], []
    for i in range(len(model.config.filters)):
        h, conv_cache = nn.conv1d_same(x, p[f"bank{i}.W"], p[f"bank{i}.b"])
        m, pool_cache = nn.max_pool_time(h)
        pooled.append(m)
        bank_caches.append((conv_cache, pool_cache))
    z = np.concatenate(pooled, axis=-1)
    zd, mask = nn.dropout(z, model.config.p_keep, train, rng)
    logits, dense_cache = nn.dense(zd, p["dense.W"], p["dense.b"])
    return logits, (emb_cache, bank_caches, mask, dense_cache, z)


def backward_batch(model: CnnModel, dlogits: np.ndarray, cache, embedding: bool = True) -> dict:
    emb_cache, bank_caches, mask, dense_cache, _ = cache
    grads = {}
    dz, grads["dense.W"], grads["dense.b"] = nn.dense_backward(dlogits, dense_cache)
    dz = nn.dropout_backward(dz, mask)
    dx = None
    start = 0
    for i, (h, f) in enumerate(model.config.filters):
        conv_cache, pool_cache = bank_caches[i]
        dxi, grads[f"bank{i}.W"], grads[f"bank{i}.b"] = nn.conv_maxpool_backward(
            dz[..., start : start + f], conv_cache, pool_cache, need_dx=embedding
        )
        start += f
        if embedding:
            dx = dxi if dx is None else dx + dxi
    if embedding:
        grads["embedding"] = nn.embedding_backward(dx, emb_cache)
    return grads


def loss_and_grads(model: CnnModel, ids, labels, train: bool = False, rng=None, embedding: bool = True):
    logits, cache = forward_batch(model, ids, train, rng)
    y = nn.one_hot(labels, model.n_classes, dtype=logits.dtype)
    loss, dlogits = nn.softmax_cross_entropy(logits, y)
    return loss, backward_batch(model, dlogits, cache, embedding)


def predict_proba(model: CnnModel, docs_or_ids, batch_size: int = 512) -> np.ndarray:
    ids = docs_or_ids if isinstance(docs_or_ids, np.ndarray) else encode_documents(model, docs_or_ids)
    out = np.empty((ids.shape[0], model.n_classes), dtype=model.params["dense.W"].dtype)
    for s in range(0, ids.shape[0], batch_size):
        logits, _ = forward_batch(model, ids[s : s + batch_size])
        out[s : s + batch_size] = nn.softmax(logits)
    return out


def forward(model: CnnModel, doc: Document, mode: str = "infer", rng=None) -> np.ndarray:
    """Class distribution for one document; ``mode="train"`` applies dropout."""
    if mode not in ("infer", "train"):
        raise InputError(f"mode must be 'infer' or 'train', got {mode!r}")
    if mode == "train" and rng is None:
        rng = np.random.default_rng()
    logits, _ = forward_batch(model, encode_documents(model, [doc]), mode == "train", rng)
    return nn.softmax(logits)[0]


def pooled_features(model: CnnModel, docs: Sequence[Document]) -> np.ndarray:
    _, cache = forward_batch(model, encode_documents(model, docs))
    return cache[-1]


def predict(model: CnnModel, docs: Sequence[Document]) -> list[str]:
    return [model.classes[k] for k in np.argmax(predict_proba(model, docs), axis=1)]


# -- training -----------------------------------------------------------------------


def _label_ids(model: CnnModel, docs: Sequence[Document]) -> np.ndarray:
    index = {c: i for i, c in enumerate(model.classes)}
    try:
        return np.array([index[d.label] for d in docs], dtype=np.int64)
    except KeyError as exc:
        raise InputError(f"label {exc.args[0]!r} is not among the model's classes") from None


def _mean_loss(model, ids, labels, batch_size=512, rng=None) -> float:
    """Mean cross-entropy; with ``rng`` given, under training-time dropout."""
    total = 0.0
    for s in range(0, ids.shape[0], batch_size):
        logits, _ = forward_batch(model, ids[s : s + batch_size], rng is not None, rng)
        y = nn.one_hot(labels[s : s + batch_size], model.n_classes, dtype=logits.dtype)
        total += nn.softmax_cross_entropy(logits, y)[0] * y.shape[0]
    return total / ids.shape[0]


def _validation_scores(model, ids, labels) -> tuple[float, float, float]:
    probs = predict_proba(model, ids)
    report = evaluate(
        [model.classes[k] for k in labels], [model.classes[k] for k in probs.argmax(axis=1)], model.classes
    )
    loss = float(np.mean(-np.log(np.maximum(probs[np.arange(labels.size), labels], 1e-300))))
    return report.weighted["F1"], report.accuracy, loss


def train(model: CnnModel, split: CorpusSplit, callback: Callable | None = None) -> CnnModel:
    """Minibatch Adam on cross-entropy; keeps the epoch with the best
    validation weighted F1 and stops after ``patience`` epochs without gain.

    Epoch 0 in the history is the untrained model.
    """
    cfg = model.config
    if not split.train:
        raise EmptyCorpusError("the training split is empty")
    if not split.validation:
        raise EmptyCorpusError("the validation split is empty")
    with numeric_mode(cfg.deterministic):
        X, y = encode_documents(model, split.train), _label_ids(model, split.train)
        Xv, yv = encode_documents(model, split.validation), _label_ids(model, split.validation)
        rng = np.random.default_rng([cfg.seed, 1])
        opt = nn.Adam(lr=cfg.lr)
        names = [n for n in model.params if cfg.fine_tune or n != "embedding"]

        wf1, acc, vloss = _validation_scores(model, Xv, yv)
        init_loss = _mean_loss(model, X, y, rng=np.random.default_rng([cfg.seed, 2]))
        history = [{"epoch": 0, "train_loss": init_loss, "val_loss": vloss, "val_wf1": wf1, "val_accuracy": acc}]
        best_f1, best_params, stale = wf1, {k: v.copy() for k, v in model.params.items()}, 0
        for epoch in range(1, cfg.max_epochs + 1):
            order = rng.permutation(X.shape[0])
            total = 0.0
            for s in range(0, order.size, cfg.batch_size):
                idx = order[s : s + cfg.batch_size]
                loss, grads = loss_and_grads(model, X[idx], y[idx], True, rng, embedding=cfg.fine_tune)
                opt.step(model.params, {n: grads[n] for n in names})
                total += loss * idx.size
            wf1, acc, vloss = _validation_scores(model, Xv, yv)
            history.append(
                {"epoch": epoch, "train_loss": total / order.size, "val_loss": vloss, "val_wf1": wf1, "val_accuracy": acc}
            )
            if callback is not None:
                callback(epoch, model, history[-1])
            if wf1 > best_f1:
                best_f1, stale = wf1, 0
                best_params = {k: v.copy() for k, v in model.params.items()}
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
        model.params = best_params
        model.history = history
    return model


def evaluate_model(model: CnnModel, docs: Sequence[Document], seed=None):
    """Returns the metrics report and prediction rows for ``docs``."""
    probs = predict_proba(model, docs)
    preds = [model.classes[k] for k in probs.argmax(axis=1)]
    report = evaluate([d.label for d in docs], preds, model.classes, seed)
    rows = [{"id": d.id, "gold": d.label, "pred": p, "probs": pr} for d, p, pr in zip(docs, preds, probs)]
    return report, rows


@dataclass
class SeedRun:
    seed: int
    split: CorpusSplit
    model: CnnModel
    report: MetricsReport
    predictions: list[dict]


def class_order(docs: Sequence[Document]) -> list[str]:
    return [label for label, _ in rank_labels(d.label for d in docs)]


def run_seed(
    corpus: Sequence[Document],
    config: CnnConfig,
    seed: int,
    pretrained: EmbeddingStore | None = None,
    classes: Sequence[str] | None = None,
    max_len: int | None = None,
    ratios=DEFAULT_SPLIT_RATIOS,
    min_count: int = 2,
) -> SeedRun:
    classes = list(classes) if classes is not None else class_order(corpus)
    max_len = max_len or max(len(d) for d in corpus)
    split = split_dataset(corpus, seed, ratios)
    cfg = CnnConfig.from_dict({**config.to_dict(), "seed": seed})
    with numeric_mode(cfg.deterministic):
        vocab = build_vocabulary((d.tokens for d in split.train), min_count)
        model = build_model(cfg, vocab, classes, max_len, pretrained)
        train(model, split)
        report, rows = evaluate_model(model, split.test, seed)
    return SeedRun(seed, split, model, report, rows)


def run_experiment(
    corpus: Sequence[Document],
    config: CnnConfig,
    n_seeds: int = 5,
    pretrained: EmbeddingStore | None = None,
    seeds: Sequence[int] | None = None,
    on_seed: Callable[[SeedRun], None] | None = None,
    **kwargs,
) -> list[MetricsReport]:
    """Split, build, train and test once per seed."""
    if not corpus:
        raise EmptyCorpusError("no documents")
    seeds = list(seeds) if seeds is not None else list(range(n_seeds))
    if not seeds:
        raise ConfigError("n_seeds must be at least 1")
    kwargs.setdefault("classes", class_order(corpus))
    reports = []
    for seed in seeds:
        run = run_seed(corpus, config, seed, pretrained, **kwargs)
        if on_seed is not None:
            on_seed(run)
        reports.append(run.report)
    return reports


# -- checkpoints ----------------------------------------------------------------------


def save_checkpoint(model: CnnModel, path) -> None:
    meta = {
        "config": model.config.to_dict(),
        "classes": model.classes,
        "max_len": model.max_len,
        "words": model.vocab.words,
        "counts": model.vocab.counts.tolist(),
        "history": model.history,
    }
    _binio.write_container(path, _CKPT_MAGIC, _CKPT_VERSION, meta, model.params)


def load_checkpoint(path) -> CnnModel:
    meta, arrays = _binio.read_container(path, _CKPT_MAGIC, _CKPT_VERSION)
    config = CnnConfig.from_dict(meta["config"])
    return CnnModel(config, Vocabulary(meta["words"], meta["counts"]), meta["classes"], meta["max_len"], arrays, meta["history"])


def write_history(history: list[dict], path) -> None:
    cols = ["epoch", "train_loss", "val_loss", "val_wf1", "val_accuracy"]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(cols) + "\n")
        for row in history:
            fh.write(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in cols) + "\n")
