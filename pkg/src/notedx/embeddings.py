"""Vocabulary construction and skip-gram word embeddings with subword n-grams.

Training follows the usual fastText recipe: each center word is represented
by its own vector plus the mean of its hashed character n-gram vectors, and
the skip-gram softmax is approximated by negative sampling against a
unigram^0.75 noise distribution. The inner loop is compiled with numba.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numba
import numpy as np

from notedx import _binio
from notedx.errors import EmptyCorpusError, InputError

log = logging.getLogger(__name__)

# the system TBB is too old for numba; skip straight to the other layers
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

PAD = "<pad>"
UNK = "<unk>"
PAD_INDEX = 0
UNK_INDEX = 1
N_RESERVED = 2

_EMB_MAGIC = b"NDXEMBED"
_EMB_VERSION = 1


class Vocabulary:
    """Word/index bijection; index 0 is padding and index 1 the unknown token."""

    def __init__(self, words: Sequence[str], counts: Sequence[int]):
        words = list(words)
        if words[:N_RESERVED] != [PAD, UNK]:
            words = [PAD, UNK] + words
            counts = [0, 0] + list(counts)
        if len(words) != len(counts):
            raise InputError("words and counts differ in length")
        self.words = words
        self.counts = np.asarray(counts, dtype=np.int64)
        self.index = {w: i for i, w in enumerate(words)}
        if len(self.index) != len(words):
            raise InputError("duplicate words in vocabulary")

    def __len__(self):
        return len(self.words)

    def __contains__(self, word):
        idx = self.index.get(word)
        return idx is not None and idx >= N_RESERVED

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.words == other.words and np.array_equal(self.counts, other.counts)

    def lookup(self, word: str) -> int:
        idx = self.index.get(word, UNK_INDEX)
        return UNK_INDEX if idx == PAD_INDEX else idx

    def encode(self, tokens: Iterable[str]) -> np.ndarray:
        return np.fromiter((self.lookup(t) for t in tokens), dtype=np.int64)

    def content_words(self) -> list[str]:
        return self.words[N_RESERVED:]


def build_vocabulary(corpus: Iterable[Sequence[str]], min_count: int = 2) -> Vocabulary:
    """Words seen at least ``min_count`` times, most frequent first."""
    counts = Counter()
    n_docs = 0
    for tokens in corpus:
        n_docs += 1
        counts.update(tokens)
    if n_docs == 0 or not counts:
        raise EmptyCorpusError("cannot build a vocabulary from an empty corpus")
    counts.pop(PAD, None)
    counts.pop(UNK, None)
    kept = sorted(((w, c) for w, c in counts.items() if c >= min_count), key=lambda wc: (-wc[1], wc[0]))
    if not kept:
        raise InputError(f"no word occurs at least {min_count} times")
    return Vocabulary([w for w, _ in kept], [c for _, c in kept])


# -- subword hashing ------------------------------------------------------------


def char_ngrams(word: str, min_n: int = 3, max_n: int = 6) -> list[str]:
    bounded = f"<{word}>"
    out = []
    for n in range(min_n, max_n + 1):
        for i in range(len(bounded) - n + 1):
            out.append(bounded[i : i + n])
    return out


def fnv1a_32(text: str) -> int:
    h = 0x811C9DC5
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 0x01000193) & 0xFFFFFFFF
    return h


def ngram_buckets(word: str, min_n: int, max_n: int, n_buckets: int) -> list[int]:
    return [fnv1a_32(g) % n_buckets for g in char_ngrams(word, min_n, max_n)]


# -- configuration and store ---------------------------------------------------------


@dataclass
class SkipgramConfig:
    window: int = 5
    negatives: int = 5
    epochs: int = 5
    lr: float = 0.025
    subsample: float = 1e-4
    min_n: int = 3
    max_n: int = 6
    n_buckets: int = 2**21
    compose: str = "mean"
    seed: int = 0
    workers: int = 1
    neg_table_size: int = 1_000_000

    def validate(self):
        if self.window < 1:
            raise InputError("context window must be >= 1")
        if self.negatives < 1:
            raise InputError("need at least one negative sample")
        if self.epochs < 0:
            raise InputError("epochs must be >= 0")
        if not 1 <= self.min_n <= self.max_n:
            raise InputError("need 1 <= min_n <= max_n")
        if self.compose not in ("mean", "sum"):
            raise InputError(f"unknown n-gram composition {self.compose!r}")
        if self.n_buckets < 1:
            raise InputError("need at least one hash bucket")


@dataclass
class EmbeddingStore:
    """Trained vectors. Only n-gram buckets touched by the vocabulary are
    materialized; any other bucket reads as the zero vector."""

    vocab: Vocabulary
    word_vectors: np.ndarray
    context_vectors: np.ndarray
    bucket_ids: np.ndarray
    ngram_vectors: np.ndarray
    min_n: int = 3
    max_n: int = 6
    n_buckets: int = 2**21
    compose: str = "mean"
    loss_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        self._bucket_row = {int(b): i for i, b in enumerate(self.bucket_ids)}

    @property
    def dim(self) -> int:
        return self.word_vectors.shape[1]

    @classmethod
    def empty(cls, dim, **kwargs):
        vocab = Vocabulary([], [])
        return cls(
            vocab,
            np.zeros((N_RESERVED, dim)),
            np.zeros((N_RESERVED, dim)),
            np.zeros(0, dtype=np.int64),
            np.zeros((0, dim)),
            **kwargs,
        )

    def _subword_vector(self, word):
        buckets = ngram_buckets(word, self.min_n, self.max_n, self.n_buckets)
        vec = np.zeros(self.dim, dtype=self.ngram_vectors.dtype)
        if not buckets:
            return vec
        for b in buckets:
            row = self._bucket_row.get(b)
            if row is not None:
                vec += self.ngram_vectors[row]
        return vec / len(buckets) if self.compose == "mean" else vec

    def embed(self, word: str) -> np.ndarray:
        if word == PAD:
            return np.zeros(self.dim, dtype=self.word_vectors.dtype)
        vec = self._subword_vector(word)
        idx = self.vocab.index.get(word, -1)
        if idx >= N_RESERVED:
            vec = vec + self.word_vectors[idx]
        return vec

    def embed_many(self, words: Iterable[str]) -> np.ndarray:
        return np.array([self.embed(w) for w in words]).reshape(-1, self.dim)

    def save(self, path) -> None:
        meta = {
            "words": self.vocab.words,
            "counts": self.vocab.counts.tolist(),
            "min_n": self.min_n,
            "max_n": self.max_n,
            "n_buckets": self.n_buckets,
            "compose": self.compose,
            "loss_history": [float(x) for x in self.loss_history],
        }
        arrays = {
            "word_vectors": self.word_vectors,
            "context_vectors": self.context_vectors,
            "bucket_ids": self.bucket_ids,
            "ngram_vectors": self.ngram_vectors,
        }
        _binio.write_container(path, _EMB_MAGIC, _EMB_VERSION, meta, arrays)

    @classmethod
    def load(cls, path) -> "EmbeddingStore":
        meta, arrays = _binio.read_container(path, _EMB_MAGIC, _EMB_VERSION)
        return cls(
            Vocabulary(meta["words"], meta["counts"]),
            arrays["word_vectors"],
            arrays["context_vectors"],
            arrays["bucket_ids"],
            arrays["ngram_vectors"],
            meta["min_n"],
            meta["max_n"],
            meta["n_buckets"],
            meta["compose"],
            meta["loss_history"],
        )

    def save_text(self, path) -> None:
        words = self.vocab.content_words()
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"{len(words)} {self.dim}\n")
            for w in words:
                fh.write(w + " " + " ".join(repr(float(x)) for x in self.embed(w)) + "\n")


def embed(store: EmbeddingStore, word: str) -> np.ndarray:
    return store.embed(word)


def export_embeddings(store: EmbeddingStore, path, text_path=None) -> None:
    store.save(path)
    if text_path is not None:
        store.save_text(text_path)


def import_embeddings(path) -> EmbeddingStore:
    return EmbeddingStore.load(path)


# -- objective (reference implementation) -------------------------------------------


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def sgns_loss_and_grads(h, u_pos, u_negs):
    """Negative-sampling loss for one (center, context, negatives) triple.

    loss = -log s(u_pos . h) - sum_k log s(-u_neg_k . h); returns the loss and
    gradients w.r.t. ``h``, ``u_pos`` and ``u_negs``.
    """
    s_pos = u_pos @ h
    s_neg = u_negs @ h
    loss = -_log_sigmoid(s_pos) - np.sum(_log_sigmoid(-s_neg))
    g_pos = -(1.0 - 1.0 / (1.0 + np.exp(-s_pos)))  # d loss / d s_pos = sigma(s) - 1
    g_neg = 1.0 / (1.0 + np.exp(-s_neg))  # d loss / d s_neg = sigma(s)
    dh = g_pos * u_pos + g_neg @ u_negs
    return float(loss), {"h": dh, "u_pos": g_pos * h, "u_negs": np.outer(g_neg, h)}


def skipgram_softmax(store: EmbeddingStore, center: str) -> np.ndarray:
    """Exact P(context | center) over the content vocabulary (small vocabularies only)."""
    h = store.embed(center)
    scores = store.context_vectors[N_RESERVED:] @ h
    scores = scores - scores.max()
    p = np.exp(scores)
    return p / p.sum()


# -- numba kernel ---------------------------------------------------------------------


@numba.njit(cache=True)
def _pair_update(h, target, label, w_out, lr, grad):
    """One logistic update of ``w_out[target]``; accumulates the input gradient."""
    dim = h.shape[0]
    score = 0.0
    for d in range(dim):
        score += w_out[target, d] * h[d]
    if score > 30.0:
        sig = 1.0
    elif score < -30.0:
        sig = 0.0
    else:
        sig = 1.0 / (1.0 + np.exp(-score))
    coef = lr * (label - sig)
    for d in range(dim):
        grad[d] += coef * w_out[target, d]
        w_out[target, d] += coef * h[d]
    # softplus(-score) for a positive, softplus(score) for a negative
    z = -score if label > 0.5 else score
    if z > 30.0:
        return z
    return np.log1p(np.exp(z))


@numba.njit(cache=True)
def _train_range(
    tokens,
    offsets,
    sent_lo,
    sent_hi,
    keep_prob,
    ng_offsets,
    ng_rows,
    w_in,
    w_ng,
    w_out,
    neg_table,
    window,
    negatives,
    lr_start,
    lr_end,
    mean_compose,
    seed,
):
    np.random.seed(seed)
    dim = w_in.shape[1]
    h = np.empty(dim)
    grad = np.empty(dim)
    sent = np.empty(tokens.shape[0], dtype=np.int64)
    total = offsets[sent_hi] - offsets[sent_lo]
    done = 0
    loss = 0.0
    pairs = 0
    for s in range(sent_lo, sent_hi):
        n = 0
        for i in range(offsets[s], offsets[s + 1]):
            w = tokens[i]
            if np.random.random() < keep_prob[w]:
                sent[n] = w
                n += 1
        for i in range(n):
            frac = (done + i * (offsets[s + 1] - offsets[s]) / max(n, 1)) / max(total, 1)
            lr = lr_start + (lr_end - lr_start) * frac
            w = sent[i]
            r0 = ng_offsets[w]
            r1 = ng_offsets[w + 1]
            scale = 1.0 / (r1 - r0) if (mean_compose and r1 > r0) else 1.0
            for d in range(dim):
                acc = 0.0
                for r in range(r0, r1):
                    acc += w_ng[ng_rows[r], d]
                h[d] = w_in[w, d] + acc * scale
                grad[d] = 0.0
            b = np.random.randint(1, window + 1)
            for j in range(max(0, i - b), min(n, i + b + 1)):
                if j == i:
                    continue
                ctx = sent[j]
                loss += _pair_update(h, ctx, 1.0, w_out, lr, grad)
                for _ in range(negatives):
                    neg = ctx
                    tries = 0
                    while neg == ctx and tries < 32:
                        neg = neg_table[np.random.randint(0, neg_table.shape[0])]
                        tries += 1
                    if neg == ctx:
                        continue
                    loss += _pair_update(h, neg, 0.0, w_out, lr, grad)
                pairs += 1
            for d in range(dim):
                w_in[w, d] += grad[d]
            for r in range(r0, r1):
                row = ng_rows[r]
                for d in range(dim):
                    w_ng[row, d] += grad[d] * scale
        done += offsets[s + 1] - offsets[s]
    return loss, pairs


@numba.njit(parallel=True, cache=True)
def _train_sharded(
    tokens, offsets, bounds, keep_prob, ng_offsets, ng_rows, w_in, w_ng, w_out,
    neg_table, window, negatives, lr_start, lr_end, mean_compose, seed,
):
    n_shards = bounds.shape[0] - 1
    losses = np.zeros(n_shards)
    pairs = np.zeros(n_shards, dtype=np.int64)
    for k in numba.prange(n_shards):
        # unsynchronized updates to the shared matrices (hogwild)
        l, p = _train_range(
            tokens, offsets, bounds[k], bounds[k + 1], keep_prob, ng_offsets, ng_rows,
            w_in, w_ng, w_out, neg_table, window, negatives, lr_start, lr_end, mean_compose, seed + k,
        )
        losses[k] = l
        pairs[k] = p
    return losses.sum(), pairs.sum()


# -- training driver ----------------------------------------------------------------------


def _noise_table(counts, size):
    weights = counts.astype(np.float64) ** 0.75
    weights[:N_RESERVED] = 0.0
    cdf = np.cumsum(weights)
    cdf /= cdf[-1]
    return np.searchsorted(cdf, (np.arange(size) + 0.5) / size).astype(np.int64)


def _keep_probabilities(counts, threshold):
    if threshold <= 0:
        return np.ones(len(counts))
    freq = counts / max(counts.sum(), 1)
    with np.errstate(divide="ignore"):
        ratio = np.where(freq > 0, threshold / freq, np.inf)
    return np.minimum(1.0, np.sqrt(ratio) + ratio)


def train_skipgram(
    corpus: Sequence[Sequence[str]],
    config: SkipgramConfig | None = None,
    dim: int = 128,
    vocab: Vocabulary | None = None,
    min_count: int = 2,
    callback: Callable[[int, EmbeddingStore], None] | None = None,
) -> EmbeddingStore:
    """Train skip-gram vectors with negative sampling and subword n-grams.

    ``callback(epoch, store)`` runs after every epoch; the store it receives
    shares arrays with the one being trained.
    """
    config = config or SkipgramConfig()
    config.validate()
    if dim < 2:
        raise InputError(f"embedding dimension must be >= 2, got {dim}")
    corpus = [list(doc) for doc in corpus]
    if not any(corpus):
        raise EmptyCorpusError("cannot train embeddings on an empty corpus")
    vocab = vocab or build_vocabulary(corpus, min_count)
    if len(vocab) - N_RESERVED < 2:
        raise InputError("skip-gram training needs at least two distinct vocabulary words")

    # corpus -> flat id array; pruned words are dropped as in fastText
    ids = [np.array([vocab.index[t] for t in doc if t in vocab], dtype=np.int64) for doc in corpus]
    ids = [a for a in ids if a.size]
    tokens = np.concatenate(ids) if ids else np.zeros(0, dtype=np.int64)
    offsets = np.zeros(len(ids) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([a.size for a in ids])

    # subword rows: materialize only the buckets the vocabulary touches
    per_word = [[] for _ in range(N_RESERVED)]
    per_word += [ngram_buckets(w, config.min_n, config.max_n, config.n_buckets) for w in vocab.content_words()]
    bucket_ids = np.array(sorted({b for bs in per_word for b in bs}), dtype=np.int64)
    row_of = {int(b): i for i, b in enumerate(bucket_ids)}
    ng_offsets = np.zeros(len(vocab) + 1, dtype=np.int64)
    ng_offsets[1:] = np.cumsum([len(bs) for bs in per_word])
    ng_rows = np.array([row_of[b] for bs in per_word for b in bs], dtype=np.int64)

    rng = np.random.default_rng(config.seed)
    w_in = rng.uniform(-1.0 / dim, 1.0 / dim, size=(len(vocab), dim))
    w_in[:N_RESERVED] = 0.0
    w_ng = rng.uniform(-1.0 / dim, 1.0 / dim, size=(len(bucket_ids), dim))
    w_out = np.zeros((len(vocab), dim))

    store = EmbeddingStore(
        vocab, w_in, w_out, bucket_ids, w_ng, config.min_n, config.max_n, config.n_buckets, config.compose
    )
    keep_prob = _keep_probabilities(vocab.counts, config.subsample)
    neg_table = _noise_table(vocab.counts, config.neg_table_size)
    workers = max(1, min(config.workers, len(ids)))
    bounds = np.linspace(0, len(ids), workers + 1).astype(np.int64)
    mean_compose = config.compose == "mean"

    for epoch in range(config.epochs):
        lr_start = config.lr * max(1.0 - epoch / config.epochs, 1e-4)
        lr_end = config.lr * max(1.0 - (epoch + 1) / config.epochs, 1e-4)
        seed = int(rng.integers(0, 2**31 - 1))
        args = (keep_prob, ng_offsets, ng_rows, w_in, w_ng, w_out, neg_table,
                config.window, config.negatives, lr_start, lr_end, mean_compose)
        if workers == 1:
            loss, pairs = _train_range(tokens, offsets, 0, len(ids), *args, seed)
        else:
            loss, pairs = _train_sharded(tokens, offsets, bounds, *args, seed)
        store.loss_history.append(loss / max(pairs, 1))
        log.info("skip-gram epoch %d: loss %.4f over %d pairs", epoch + 1, store.loss_history[-1], pairs)
        if callback is not None:
            callback(epoch, store)
    return store
