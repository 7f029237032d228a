"""Experiment orchestration.

``run_pipeline`` chains preprocessing, skip-gram pretraining, CNN training
over several seeds, the bag-of-words baselines, evaluation, significance
tests and filter reports into one output directory::

    out/
      config.txt  manifest.json
      preprocess/documents.jsonl  preprocess/summary.json
      embeddings/vectors.bin
      cnn/seed{N}/model.ckpt  history.csv  predictions.jsonl
      logreg/seed{N}/predictions.jsonl   mlp/seed{N}/predictions.jsonl
      reports/{model}/seed{N}.json  reports/{model}/aggregate.json
      compare/cnn_vs_{baseline}.json
      filters/seed{N}.tsv  filters/seed{N}.json

The manifest lists every artifact with its SHA-256 and carries no
timestamps, so two runs of the same configuration can be compared file by
file.
"""

from __future__ import annotations

import hashlib
import json
import logging
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy

import notedx
from notedx import cnn, interpret
from notedx.baselines import run_baseline
from notedx.config import RunConfig, save_config
from notedx.embeddings import EmbeddingStore, train_skipgram
from notedx.errors import EmptyCorpusError, InputError, NotedxError, StageError
from notedx.metrics import (
    MetricsReport,
    aggregate_seeds,
    dump_json,
    evaluate,
    load_report,
    read_predictions,
    save_report,
    welch_t_test,
    write_predictions,
)
from notedx.runtime import numeric_mode, worker_count
from notedx.textprep import (
    AliasMap,
    Document,
    PreprocessResult,
    preprocess_corpus,
    rank_labels,
    read_documents,
    read_raw_notes,
    split_dataset,
    write_documents,
)

log = logging.getLogger("notedx")

STAGES = ("preprocess", "embed-train", "train", "baselines", "evaluate", "compare", "visualize-filters")


class MissingPathError(InputError):
    code = "E_NOT_FOUND"


def require_file(path, what: str = "file") -> Path:
    p = Path(path)
    if not str(path) or not p.is_file():
        raise MissingPathError(f"{what} {str(path)!r} does not exist")
    return p


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def versions() -> dict:
    return {
        "notedx": notedx.__version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
    }


# -- corpus loading -------------------------------------------------------------------


@dataclass
class Corpus:
    documents: list[Document]
    classes: list[str]
    max_len: int


def _first_record(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                try:
                    return json.loads(line)
                except json.JSONDecodeError as exc:
                    raise InputError(f"{path}: invalid JSON ({exc.msg})") from None
    raise EmptyCorpusError(f"{path} holds no records")


def preprocess_file(path, alias_map: str = "", top_k: int = 10) -> PreprocessResult:
    require_file(path, "corpus")
    aliases = AliasMap.from_file(require_file(alias_map, "alias map")) if alias_map else None
    return preprocess_corpus(read_raw_notes(path), aliases, top_k=top_k)


def load_corpus(path, alias_map: str = "", top_k: int = 10) -> Corpus:
    """Raw notes (records with ``text``) are preprocessed on the fly;
    preprocessed documents (records with ``tokens``) are used as they are."""
    require_file(path, "corpus")
    if "tokens" in _first_record(path):
        docs = read_documents(path)
        if any(d.label is None for d in docs):
            raise InputError(f"{path}: every preprocessed document needs a label")
        return Corpus(docs, [c for c, _ in rank_labels(d.label for d in docs)], max(1, max(len(d) for d in docs)))
    res = preprocess_file(path, alias_map, top_k)
    return Corpus(res.documents, res.labels, res.max_len)


# -- stages ----------------------------------------------------------------------------


def pretrain_embeddings(docs: Sequence[Document], config: RunConfig, seed: int = 0) -> EmbeddingStore:
    sg = config.skipgram_config(seed=seed, workers=worker_count())
    return train_skipgram([d.tokens for d in docs], sg, dim=config.embed_dim, min_count=config.min_count)


def _train_one(args):
    corpus, config, seed, store, out = args
    run = cnn.run_seed(
        corpus.documents, config.cnn_config(seed), seed, store,
        classes=corpus.classes, max_len=corpus.max_len, ratios=config.ratios, min_count=config.min_count,
    )
    save_seed_run(run, out)
    return seed, run.report.weighted["F1"], run.report.accuracy


def save_seed_run(run: cnn.SeedRun, out) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cnn.save_checkpoint(run.model, out / "model.ckpt")
    cnn.write_history(run.model.history, out / "history.csv")
    write_predictions(out / "predictions.jsonl", run.predictions)


def _pool_map(fn, jobs, workers):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(min(workers, len(jobs))) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


def train_seeds(corpus: Corpus, config: RunConfig, store: EmbeddingStore | None, out, workers: int = 1) -> None:
    """One CNN per seed, written to ``out/seed{N}``; seeds may run in parallel processes."""
    jobs = [(corpus, config, seed, store, Path(out) / f"seed{seed}") for seed in config.seeds]
    for seed, wf1, acc in _pool_map(_train_one, jobs, workers):
        log.info("cnn seed %d: test WF1 %.4f, accuracy %.4f", seed, wf1, acc)


def _baseline_one(args):
    corpus, config, kind, seed, out = args
    (run,) = run_baseline(
        corpus.documents, kind, seeds=[seed], pca_dim=config.pca_dim, min_count=config.min_count,
        l2=config.l2, ratios=config.ratios, classes=corpus.classes,
    )
    Path(out).mkdir(parents=True, exist_ok=True)
    write_predictions(Path(out) / "predictions.jsonl", run.predictions)
    return seed, run.report.weighted["F1"], run.pca_dim


def train_baseline(corpus: Corpus, config: RunConfig, kind: str, out, workers: int = 1) -> None:
    jobs = [(corpus, config, kind, seed, Path(out) / f"seed{seed}") for seed in config.seeds]
    for seed, wf1, dim in _pool_map(_baseline_one, jobs, workers):
        log.info("%s seed %d: test WF1 %.4f (PCA dim %d)", kind, seed, wf1, dim)


def infer_classes(row_sets) -> list[str]:
    """Gold labels by descending frequency, then any predicted-only labels."""
    gold = [r["gold"] for rows in row_sets for r in rows]
    classes = [c for c, _ in rank_labels(gold)]
    return classes + sorted({r["pred"] for rows in row_sets for r in rows} - set(classes))


def evaluate_rows(rows, classes: Sequence[str] | None = None, seed=None) -> MetricsReport:
    if not rows:
        raise EmptyCorpusError("no predictions to evaluate")
    classes = list(classes) if classes is not None else infer_classes([rows])
    return evaluate([r["gold"] for r in rows], [r["pred"] for r in rows], classes, seed)


def evaluate_predictions(path, classes: Sequence[str] | None = None, seed=None) -> MetricsReport:
    return evaluate_rows(read_predictions(path), classes, seed)


def _seed_of(path: Path):
    name = path.parent.name if path.name == "predictions.jsonl" else path.stem
    return int(name[4:]) if name.startswith("seed") and name[4:].isdigit() else None


def evaluate_model_dir(pred_root, report_root, classes) -> list[MetricsReport]:
    """Reports for every ``seed*/predictions.jsonl`` under ``pred_root``, plus
    their mean and standard error."""
    report_root = Path(report_root)
    report_root.mkdir(parents=True, exist_ok=True)
    paths = sorted(Path(pred_root).glob("seed*/predictions.jsonl"), key=_seed_of)
    if not paths:
        raise MissingPathError(f"no prediction files under {pred_root}")
    reports = []
    for p in paths:
        seed = _seed_of(p)
        rep = evaluate_predictions(p, classes, seed)
        save_report(rep, report_root / f"seed{seed}.json")
        reports.append(rep)
    dump_json(aggregate_seeds(reports).to_dict(), report_root / "aggregate.json")
    return reports


def collect_reports(path) -> list[MetricsReport]:
    """Per-seed reports from a directory: saved ``seed*.json`` reports if
    present, otherwise evaluated from ``seed*/predictions.jsonl``."""
    root = Path(path)
    if not root.is_dir():
        raise MissingPathError(f"directory {str(path)!r} does not exist")
    saved = sorted(root.glob("seed*.json"), key=_seed_of)
    if saved:
        return [load_report(p) for p in saved]
    preds = sorted(root.glob("seed*/predictions.jsonl"), key=_seed_of)
    if not preds:
        raise MissingPathError(f"no reports or predictions under {path}")
    rows = [read_predictions(p) for p in preds]
    classes = infer_classes(rows)
    return [evaluate_rows(r, classes, _seed_of(p)) for r, p in zip(rows, preds)]


def compare_reports(a: Sequence[MetricsReport], b: Sequence[MetricsReport], metric: str = "WF1") -> dict:
    va = [r.value(metric) for r in a]
    vb = [r.value(metric) for r in b]
    res = welch_t_test(va, vb)
    return {
        "metric": metric, "a": va, "b": vb,
        "mean_a": float(np.mean(va)), "mean_b": float(np.mean(vb)),
        "t": res.t, "df": res.df, "p": res.p,
    }


def visualize(model: cnn.CnnModel, docs: Sequence[Document], per_size: int, top_n: int, seed: int):
    chosen = interpret.select_filters(model, per_size, seed)
    return interpret.rank_ngrams(model, docs, top_n=top_n, filters=chosen)


def write_filter_report(rankings, prefix) -> None:
    tsv, js = interpret.render_report(rankings)
    Path(f"{prefix}.tsv").write_text(tsv, encoding="utf-8")
    Path(f"{prefix}.json").write_text(js, encoding="utf-8")


# -- the whole run ------------------------------------------------------------------------


def _manifest(out: Path, config: RunConfig, done: list[str], failed: str | None = None) -> dict:
    artifacts = {
        p.relative_to(out).as_posix(): sha256_file(p)
        for p in sorted(out.rglob("*"))
        if p.is_file() and p.name != "manifest.json"
    }
    manifest = {
        "config_hash": config.config_hash(),
        "seeds": list(config.seeds),
        "versions": versions(),
        "stages": done,
        "status": "failed" if failed else "complete",
        "artifacts": artifacts,
    }
    if failed:
        manifest["failed_stage"] = failed
    dump_json(manifest, out / "manifest.json")
    return manifest


def run_pipeline(config: RunConfig, out_dir, workers: int | None = None, on_stage: Callable | None = None) -> dict:
    """Run every stage in order; a failing stage raises ``StageError`` after
    the manifest records what was completed.

    ``on_stage(name, seconds)`` is called after each stage finishes.
    """
    try:
        config.validate()
        require_file(config.corpus, "corpus")
        if config.alias_map:
            require_file(config.alias_map, "alias map")
    except NotedxError as exc:
        raise StageError("setup", exc) from exc
    workers = worker_count() if workers is None else workers
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(config, out / "config.txt")
    done: list[str] = []
    state: dict = {}

    def preprocess():
        res = preprocess_file(config.corpus, config.alias_map, config.top_k)
        (out / "preprocess").mkdir(exist_ok=True)
        write_documents(out / "preprocess" / "documents.jsonl", res.documents)
        dump_json(
            {"labels": res.labels, "label_counts": res.label_counts, "max_len": res.max_len,
             "documents": len(res.documents), "dropped_unlabeled": res.dropped_unlabeled},
            out / "preprocess" / "summary.json",
        )
        state["corpus"] = Corpus(res.documents, res.labels, res.max_len)

    def embed():
        state["store"] = None
        if config.pretrain:
            store = pretrain_embeddings(state["corpus"].documents, config)
            (out / "embeddings").mkdir(exist_ok=True)
            store.save(out / "embeddings" / "vectors.bin")
            state["store"] = store

    def train():
        train_seeds(state["corpus"], config, state["store"], out / "cnn", workers)

    def baselines():
        for kind in config.baselines:
            train_baseline(state["corpus"], config, kind, out / kind, workers)

    def evaluate_all():
        classes = state["corpus"].classes
        state["reports"] = {
            name: evaluate_model_dir(out / name, out / "reports" / name, classes)
            for name in ("cnn", *config.baselines)
        }

    def compare():
        (out / "compare").mkdir(exist_ok=True)
        reports = state["reports"]
        for kind in config.baselines:
            if len(config.seeds) < 2:
                log.info("skipping significance test: needs at least two seeds")
                break
            result = compare_reports(reports["cnn"], reports[kind], config.compare_metric)
            dump_json(result, out / "compare" / f"cnn_vs_{kind}.json")
            log.info("cnn vs %s on %s: t=%.4f df=%.4f p=%.4g", kind, config.compare_metric, result["t"], result["df"], result["p"])

    def filters():
        (out / "filters").mkdir(exist_ok=True)
        corpus = state["corpus"]
        for seed in config.seeds:
            model = cnn.load_checkpoint(out / "cnn" / f"seed{seed}" / "model.ckpt")
            test = split_dataset(corpus.documents, seed, config.ratios).test
            rankings = visualize(model, test, config.viz_per_size, config.viz_top, config.viz_seed)
            write_filter_report(rankings, out / "filters" / f"seed{seed}")

    steps = dict(zip(STAGES, (preprocess, embed, train, baselines, evaluate_all, compare, filters)))
    with numeric_mode(config.deterministic):
        for name, step in steps.items():
            log.info("stage %s", name)
            start = time.perf_counter()
            try:
                step()
            except Exception as exc:
                _manifest(out, config, done, failed=name)
                raise StageError(name, exc) from exc
            done.append(name)
            if on_stage is not None:
                on_stage(name, time.perf_counter() - start)
    return _manifest(out, config, done)
