"""Command-line entry point.

Every command exits 0 on success. On failure it prints exactly one line to
stderr::

    error: code=E_INPUT stage=train msg=...

and exits 1 (2 for usage errors). Set ``NOTEDX_WORKERS`` to run seeds in
parallel processes; ``--deterministic`` pins all numerics to one thread.
"""

from __future__ import annotations

import argparse
import logging
import sys

from notedx import cnn, pipeline, synthetic
from notedx.config import RunConfig, load_config
from notedx.embeddings import EmbeddingStore, SkipgramConfig, train_skipgram
from notedx.errors import NotedxError, StageError
from notedx.metrics import aggregate_seeds, dump_json, read_predictions
from notedx.runtime import numeric_mode, worker_count
from notedx.textprep import write_documents

log = logging.getLogger("notedx")


class UsageError(NotedxError):
    code = "E_USAGE"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _one_line(text) -> str:
    return " ".join(str(text).split())


def _run_config(args, **overrides) -> RunConfig:
    base = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "deterministic", False):
        overrides["deterministic"] = True
    return base.with_overrides(**overrides).validate()


def _seeds(args, config: RunConfig | None = None):
    if args.seeds is not None:
        if args.seeds < 1:
            raise UsageError("--seeds must be at least 1")
        return tuple(range(args.seeds))
    return config.seeds if config else (0, 1, 2, 3, 4)


# -- commands -----------------------------------------------------------------------------


def cmd_preprocess(args):
    res = pipeline.preprocess_file(args.corpus, args.alias_map or "", args.top_k)
    write_documents(args.out, res.documents)
    print(f"{len(res.documents)} documents, {len(res.labels)} labels, max_len {res.max_len}, "
          f"{res.dropped_unlabeled} unlabeled notes dropped")


def cmd_embed_train(args):
    corpus = pipeline.load_corpus(args.corpus)
    sg = SkipgramConfig(
        window=args.window, negatives=args.negatives, epochs=args.epochs, seed=args.seed,
        workers=1 if args.deterministic else worker_count(),
    )
    with numeric_mode(args.deterministic):
        store = train_skipgram([d.tokens for d in corpus.documents], sg, dim=args.dim, min_count=args.min_count)
    store.save(args.out)
    print(f"{len(store.vocab)} vectors of dimension {store.dim} written to {args.out}")


def cmd_train(args):
    config = _run_config(args)
    config = config.with_overrides(seeds=_seeds(args, config))
    corpus = pipeline.load_corpus(args.corpus, config.alias_map, config.top_k)
    store = EmbeddingStore.load(pipeline.require_file(args.embeddings, "embeddings")) if args.embeddings else None
    with numeric_mode(config.deterministic):
        pipeline.train_seeds(corpus, config, store, args.out, worker_count())
    print(f"trained {len(config.seeds)} seeds into {args.out}")


def cmd_baseline(args):
    config = _run_config(args, pca_dim=args.pca_dim)
    config = config.with_overrides(seeds=_seeds(args, config))
    corpus = pipeline.load_corpus(args.corpus, config.alias_map, config.top_k)
    with numeric_mode(config.deterministic):
        pipeline.train_baseline(corpus, config, args.model, args.out, worker_count())
    print(f"{args.model}: {len(config.seeds)} seeds written to {args.out}")


def cmd_evaluate(args):
    rows = [read_predictions(pipeline.require_file(p, "predictions")) for p in args.pred]
    classes = args.classes.split(",") if args.classes else pipeline.infer_classes(rows)
    reports = [pipeline.evaluate_rows(r, classes) for r in rows]
    if len(reports) == 1:
        dump_json(reports[0].to_dict(), args.out)
        r = reports[0]
        print(f"accuracy {r.accuracy:.4f}  F1 {r.macro['F1']:.4f}  WF1 {r.weighted['F1']:.4f}")
    else:
        agg = aggregate_seeds(reports)
        dump_json({"reports": [r.to_dict() for r in reports], "aggregate": agg.to_dict()}, args.out)
        print(f"{len(reports)} runs: accuracy {agg.mean['accuracy']:.4f}  WF1 {agg.mean['WF1']:.4f}")


def cmd_compare(args):
    res = pipeline.compare_reports(pipeline.collect_reports(args.a), pipeline.collect_reports(args.b), args.metric)
    print(f"t={res['t']:.6g} df={res['df']:.6g} p={res['p']:.6g}")


def cmd_visualize(args):
    model = cnn.load_checkpoint(pipeline.require_file(args.model, "model"))
    corpus = pipeline.load_corpus(args.corpus)
    rankings = pipeline.visualize(model, corpus.documents, args.per_size, args.top, args.seed)
    if args.out:
        pipeline.write_filter_report(rankings, args.out)
    sys.stdout.write(pipeline.interpret.render_tsv(rankings))


def cmd_synth(args):
    if args.kind == "reference":
        spec = synthetic.reference_spec(args.n_docs, args.seed)
    elif args.kind == "keyword":
        spec = synthetic.keyword_spec(args.classes, args.docs_per_class, args.seed)
    else:
        spec = synthetic.order_spec(args.classes, args.docs_per_class, args.seed)
    n = synthetic.generate_synthetic(spec, args.out)
    print(f"{n} notes written to {args.out}")


def cmd_pipeline(args):
    config = _run_config(args)
    if args.corpus:
        config = config.with_overrides(corpus=args.corpus)
    if args.seeds is not None:
        config = config.with_overrides(seeds=_seeds(args))
    manifest = pipeline.run_pipeline(config, args.out)
    print(f"pipeline complete: {len(manifest['artifacts'])} artifacts, config {manifest['config_hash'][:12]}")


# -- parser ----------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="notedx", description="Diagnosis classification from admission notes.")
    p.add_argument("-q", "--quiet", action="store_true", help="only report errors")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help):
        sp = sub.add_parser(name, help=help)
        sp.set_defaults(fn=fn)
        sp.add_argument("--deterministic", action="store_true", help="single-threaded, bit-reproducible numerics")
        return sp

    sp = add("preprocess", cmd_preprocess, "clean raw notes into token documents")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--alias-map")
    sp.add_argument("--top-k", type=int, default=10)
    sp.add_argument("--out", required=True)

    sp = add("embed-train", cmd_embed_train, "pretrain skip-gram vectors")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--dim", type=int, default=128)
    sp.add_argument("--window", type=int, default=5)
    sp.add_argument("--negatives", type=int, default=5)
    sp.add_argument("--epochs", type=int, default=5)
    sp.add_argument("--min-count", type=int, default=2)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "train the CNN once per seed")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--embeddings")
    sp.add_argument("--config")
    sp.add_argument("--seeds", type=int)
    sp.add_argument("--out", required=True)

    sp = add("baseline", cmd_baseline, "tf-idf + PCA baselines")
    sp.add_argument("--model", choices=("logreg", "mlp"), required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--config")
    sp.add_argument("--pca-dim", type=int, default=256)
    sp.add_argument("--seeds", type=int)
    sp.add_argument("--out", required=True)

    sp = add("evaluate", cmd_evaluate, "metrics report from prediction files")
    sp.add_argument("--pred", nargs="+", required=True)
    sp.add_argument("--classes", help="comma-separated class order")
    sp.add_argument("--out", required=True)

    sp = add("compare", cmd_compare, "Welch t-test between two sets of runs")
    sp.add_argument("--a", required=True)
    sp.add_argument("--b", required=True)
    sp.add_argument("--metric", default="wf1")

    sp = add("visualize-filters", cmd_visualize, "top n-grams per convolution filter")
    sp.add_argument("--model", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--per-size", type=int, default=2)
    sp.add_argument("--top", type=int, default=10)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", help="write <out>.tsv and <out>.json")

    sp = add("synth", cmd_synth, "generate a synthetic labeled corpus")
    sp.add_argument("--kind", choices=("reference", "keyword", "order"), default="reference")
    sp.add_argument("--n-docs", type=int, default=13140)
    sp.add_argument("--classes", type=int, default=3)
    sp.add_argument("--docs-per-class", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = add("pipeline", cmd_pipeline, "run every stage into one directory")
    sp.add_argument("--config")
    sp.add_argument("--corpus")
    sp.add_argument("--seeds", type=int)
    sp.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    command = "cli"
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        logging.basicConfig(
            level=logging.WARNING if args.quiet else logging.INFO,
            format="%(message)s", stream=sys.stderr,
        )
        with numeric_mode(args.deterministic):
            args.fn(args)
        return 0
    except StageError as exc:
        code = getattr(exc.cause, "code", exc.code)
        print(f"error: code={code} stage={exc.stage} msg={_one_line(exc.cause)}", file=sys.stderr)
    except NotedxError as exc:
        print(f"error: code={exc.code} stage={command} msg={_one_line(exc)}", file=sys.stderr)
        return 2 if isinstance(exc, UsageError) else 1
    except OSError as exc:
        print(f"error: code=E_IO stage={command} msg={_one_line(exc)}", file=sys.stderr)
    except Exception as exc:  # noqa: BLE001 - last-resort reporting
        print(f"error: code=E_INTERNAL stage={command} msg={type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
