"""Which n-grams drive each convolution filter.

Every window a filter scans in a corpus is scored by the filter's
post-ReLU output at that window, and the highest-scoring windows are kept
per filter. Windows that run into padding are skipped, so every reported
n-gram has exactly ``H`` real tokens.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from notedx import nn
from notedx.cnn import CnnModel, encode_documents
from notedx.errors import ConfigError, EmptyCorpusError, InputError
from notedx.runtime import worker_count
from notedx.textprep import Document


@dataclass(frozen=True)
class NgramActivation:
    bank: int
    filter: int
    doc_id: str
    position: int  # index of the window's first token
    ngram: str
    score: float

    @property
    def tokens(self) -> list[str]:
        return self.ngram.split(" ")


FilterKey = tuple  # (bank, filter)


def _banks64(model: CnnModel):
    # scoring runs in double precision whatever the training dtype, so a
    # reported score can be reproduced exactly from a single document
    return [(b.weights.astype(np.float64), b.biases.astype(np.float64)) for b in model.banks]


def _doc_order(corpus: Sequence[Document]) -> np.ndarray:
    order = sorted(range(len(corpus)), key=lambda i: (corpus[i].id, i))
    rank = np.empty(len(corpus), dtype=np.int64)
    rank[order] = np.arange(len(corpus))
    return rank


def _top(scores, doc_rank, starts, top_n):
    # descending score, then document id, then position
    return np.lexsort((starts, doc_rank, -scores))[:top_n]


def _score_chunk(model, banks, emb, docs, offset, doc_rank, top_n, wanted):
    ids = encode_documents(model, docs)
    x = emb[ids]
    lengths = [min(len(d.tokens), model.max_len) for d in docs]
    out = {}
    for b, (W, bias) in enumerate(banks):
        filters = wanted.get(b)
        if not filters:
            continue
        conv, _ = nn.conv1d_same(x, W, bias)
        height = W.shape[1]
        rows_d, rows_t, rows_s = [], [], []
        for i, n in enumerate(lengths):
            rows, starts = nn.conv1d_valid_positions(model.max_len, n, height)
            rows_d.append(np.full(rows.size, i, dtype=np.int64))
            rows_t.append(rows)
            rows_s.append(starts)
        d = np.concatenate(rows_d)
        t = np.concatenate(rows_t)
        s = np.concatenate(rows_s)
        if d.size == 0:
            continue
        scores = conv[d, t]
        ranks = doc_rank[d + offset]
        for f in filters:
            keep = _top(scores[:, f], ranks, s, top_n)
            out[(b, f)] = (scores[keep, f], ranks[keep], s[keep], d[keep] + offset)
    return out


def rank_ngrams(
    model: CnnModel,
    corpus: Sequence[Document],
    top_n: int = 10,
    filters: Sequence[FilterKey] | None = None,
    chunk_size: int = 256,
    workers: int | None = None,
) -> dict[FilterKey, list[NgramActivation]]:
    """Top-``top_n`` windows per filter over ``corpus``, best first.

    ``filters`` restricts the work to some ``(bank, filter)`` pairs; by
    default every filter is ranked. Chunks of documents are scored
    independently and merged, so the result does not depend on chunking
    or on the number of workers.
    """
    if not corpus:
        raise EmptyCorpusError("cannot rank n-grams over an empty corpus")
    if top_n < 1:
        raise ConfigError(f"top_n must be positive, got {top_n}")
    banks = _banks64(model)
    if filters is None:
        filters = [(b, f) for b, (W, _) in enumerate(banks) for f in range(W.shape[0])]
    wanted: dict[int, list[int]] = {}
    for b, f in filters:
        if not (0 <= b < len(banks) and 0 <= f < banks[b][0].shape[0]):
            raise InputError(f"model has no filter ({b}, {f})")
        wanted.setdefault(int(b), []).append(int(f))

    emb = model.embedding.astype(np.float64)
    doc_rank = _doc_order(corpus)
    starts = range(0, len(corpus), chunk_size)

    def job(s):
        return _score_chunk(model, banks, emb, corpus[s : s + chunk_size], s, doc_rank, top_n, wanted)

    n_workers = worker_count() if workers is None else max(1, workers)
    if n_workers > 1:
        with ThreadPoolExecutor(n_workers) as pool:
            parts = list(pool.map(job, starts))
    else:
        parts = [job(s) for s in starts]

    result: dict[FilterKey, list[NgramActivation]] = {}
    for b, f in filters:
        key = (int(b), int(f))
        pieces = [p[key] for p in parts if key in p]
        if not pieces:
            result[key] = []
            continue
        scores, ranks, pos, docs = (np.concatenate(c) for c in zip(*pieces))
        keep = _top(scores, ranks, pos, top_n)
        height = banks[b][0].shape[1]
        result[key] = [
            NgramActivation(
                key[0], key[1], corpus[docs[k]].id, int(pos[k]),
                " ".join(corpus[docs[k]].tokens[pos[k] : pos[k] + height]), float(scores[k]),
            )
            for k in keep
        ]
    return result


def activation_at(model: CnnModel, doc: Document, bank: int, filt: int, position: int) -> float:
    """Recompute one filter's post-ReLU output for the window starting at ``position``."""
    W, b = _banks64(model)[bank]
    x = model.embedding.astype(np.float64)[encode_documents(model, [doc])[0]]
    conv, _ = nn.conv1d_same(x, W, b)
    front, _ = nn.same_padding(W.shape[1])
    return float(conv[position + front, filt])


def select_filters(model: CnnModel, per_size: int = 2, seed: int = 0) -> list[FilterKey]:
    """``per_size`` filters drawn at random from each bank, reproducibly per seed."""
    rng = np.random.default_rng(seed)
    chosen = []
    for b, bank in enumerate(model.banks):
        if not 0 <= per_size <= bank.n_filters:
            raise ConfigError(f"cannot pick {per_size} of the {bank.n_filters} filters in bank {b}")
        chosen.extend((b, int(f)) for f in np.sort(rng.choice(bank.n_filters, per_size, replace=False)))
    return chosen


# -- reports ----------------------------------------------------------------------------


def _column_title(key, entries):
    size = f"{len(entries[0].tokens)}-gram" if entries else "empty"
    return f"bank{key[0]}/filter{key[1]} ({size})"


def render_tsv(rankings: dict[FilterKey, list[NgramActivation]]) -> str:
    """One column per filter, one row per rank."""
    if not rankings:
        return ""
    keys = list(rankings)
    depth = max(len(v) for v in rankings.values())
    lines = ["\t".join(_column_title(k, rankings[k]) for k in keys)]
    for r in range(depth):
        lines.append("\t".join(rankings[k][r].ngram if r < len(rankings[k]) else "" for k in keys))
    return "\n".join(lines) + "\n"


def rankings_to_json(rankings: dict[FilterKey, list[NgramActivation]]) -> str:
    payload = [
        {"bank": k[0], "filter": k[1], "top": [asdict(a) for a in v]}
        for k, v in rankings.items()
    ]
    return json.dumps(payload, indent=1, sort_keys=True) + "\n"


def rankings_from_json(text: str) -> dict[FilterKey, list[NgramActivation]]:
    out = {}
    for col in json.loads(text):
        out[(col["bank"], col["filter"])] = [NgramActivation(**a) for a in col["top"]]
    return out


def render_report(rankings: dict[FilterKey, list[NgramActivation]]) -> tuple[str, str]:
    """Tab-separated table and the equivalent JSON document."""
    return render_tsv(rankings), rankings_to_json(rankings)
