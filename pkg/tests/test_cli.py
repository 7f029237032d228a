import json
import re
import subprocess
import sys

import pytest

from notedx import pipeline
from notedx.cli import main
from notedx.cnn import load_checkpoint
from notedx.config import RunConfig, save_config
from notedx.errors import StageError
from notedx.synthetic import generate_synthetic, keyword_spec, reference_spec, generate_notes

ERROR_LINE = re.compile(r"^error: code=E_[A-Z_]+ stage=\S+ msg=.*$")

TINY = dict(
    top_k=3, seeds=(0, 1), embed_dim=12, sg_epochs=1, filters=((3, 4), (4, 4), (5, 4)),
    lr=1e-3, max_epochs=3, pca_dim=12, viz_top=4, deterministic=True,
)


@pytest.fixture(scope="module")
def notes(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "notes.jsonl"
    generate_synthetic(keyword_spec(3, 30, seed=1), path)
    return path


@pytest.fixture(scope="module")
def run_dir(notes, tmp_path_factory):
    out = tmp_path_factory.mktemp("exp") / "run"
    cfg = RunConfig(corpus=str(notes), **TINY)
    manifest = pipeline.run_pipeline(cfg, out)
    return out, manifest, cfg


def assert_error(capsys, code=None):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and ERROR_LINE.match(err[0]), err
    if code:
        assert f"code={code} " in err[0]
    return err[0]


class TestPipeline:
    def test_layout(self, run_dir):
        out, manifest, cfg = run_dir
        arts = manifest["artifacts"]
        for seed in cfg.seeds:
            for f in ("model.ckpt", "history.csv", "predictions.jsonl"):
                assert f"cnn/seed{seed}/{f}" in arts
            for model in ("cnn", "logreg", "mlp"):
                assert f"reports/{model}/seed{seed}.json" in arts
            assert f"filters/seed{seed}.tsv" in arts and f"filters/seed{seed}.json" in arts
        for model in ("cnn", "logreg", "mlp"):
            assert f"reports/{model}/aggregate.json" in arts
        assert "compare/cnn_vs_logreg.json" in arts and "compare/cnn_vs_mlp.json" in arts
        assert manifest["status"] == "complete"
        assert manifest["stages"] == list(pipeline.STAGES)
        assert manifest["seeds"] == [0, 1]
        assert "numpy" in manifest["versions"]

    def test_manifest_hashes_are_current(self, run_dir):
        out, manifest, _ = run_dir
        for rel, digest in manifest["artifacts"].items():
            assert pipeline.sha256_file(out / rel) == digest

    def test_rerun_identical(self, run_dir, tmp_path):
        out, manifest, cfg = run_dir
        again = pipeline.run_pipeline(cfg, tmp_path / "again")
        assert again == manifest

    def test_filter_tables_use_checkpoint(self, run_dir):
        out, _, cfg = run_dir
        model = load_checkpoint(out / "cnn" / "seed0" / "model.ckpt")
        table = json.loads((out / "filters" / "seed0.json").read_text())
        assert len(table) == 3 * cfg.viz_per_size
        assert all(len(col["top"]) == cfg.viz_top for col in table)
        assert model.config.filters == cfg.filters

    def test_missing_corpus_writes_nothing(self, tmp_path):
        out = tmp_path / "never"
        with pytest.raises(StageError) as info:
            pipeline.run_pipeline(RunConfig(corpus=str(tmp_path / "absent.jsonl"), **TINY), out)
        assert info.value.stage == "setup"
        assert not out.exists()

    def test_failing_stage_keeps_partial_results(self, notes, tmp_path):
        out = tmp_path / "partial"
        # one label survives preprocessing, and a classifier needs two
        cfg = RunConfig(corpus=str(notes), **{**TINY, "top_k": 1})
        with pytest.raises(StageError) as info:
            pipeline.run_pipeline(cfg, out)
        assert info.value.stage == "train"
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["status"] == "failed"
        assert manifest["failed_stage"] == info.value.stage
        assert "preprocess/documents.jsonl" in manifest["artifacts"]


class TestCli:
    def test_synth_byte_identical(self, tmp_path, capsys):
        for name in ("a", "b"):
            assert main(["synth", "--kind", "keyword", "--classes", "2", "--docs-per-class", "5", "--out", str(tmp_path / name)]) == 0
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_synth_single_doc(self, tmp_path):
        from notedx.synthetic import SyntheticSpec

        notes = generate_notes(SyntheticSpec(["only"], [1], [["lone phrase"]]))
        assert len(notes) == 1 and notes[0]["label"] == "only"

    def test_synth_reference_counts(self):
        spec = reference_spec()
        assert sum(spec.class_sizes) == 13140
        assert spec.class_sizes[0] == 3193 and spec.class_sizes[-1] == 504

    def test_stepwise(self, notes, tmp_path, capsys):
        docs = tmp_path / "docs.jsonl"
        assert main(["-q", "preprocess", "--corpus", str(notes), "--top-k", "3", "--out", str(docs)]) == 0
        vec = tmp_path / "vec.bin"
        assert main(["-q", "embed-train", "--corpus", str(docs), "--dim", "8", "--epochs", "1", "--out", str(vec), "--deterministic"]) == 0
        cfg = tmp_path / "run.cfg"
        save_config(RunConfig(**{**TINY, "embed_dim": 8}), cfg)
        assert main(["-q", "train", "--corpus", str(docs), "--embeddings", str(vec), "--config", str(cfg), "--seeds", "2", "--out", str(tmp_path / "cnn")]) == 0
        assert main(["-q", "baseline", "--model", "logreg", "--corpus", str(docs), "--pca-dim", "8", "--seeds", "2", "--out", str(tmp_path / "lr")]) == 0
        preds = [str(tmp_path / "cnn" / f"seed{s}" / "predictions.jsonl") for s in (0, 1)]
        assert main(["-q", "evaluate", "--pred", *preds, "--out", str(tmp_path / "ev.json")]) == 0
        ev = json.loads((tmp_path / "ev.json").read_text())
        assert len(ev["reports"]) == 2 and ev["aggregate"]["n"] == 2
        capsys.readouterr()
        assert main(["-q", "compare", "--a", str(tmp_path / "cnn"), "--b", str(tmp_path / "lr"), "--metric", "wf1"]) == 0
        assert re.fullmatch(r"t=\S+ df=\S+ p=\S+\n", capsys.readouterr().out)
        ckpt = str(tmp_path / "cnn" / "seed0" / "model.ckpt")
        assert main(["-q", "visualize-filters", "--model", ckpt, "--corpus", str(docs), "--per-size", "1", "--top", "3", "--out", str(tmp_path / "viz")]) == 0
        table = capsys.readouterr().out.splitlines()
        assert len(table) == 4 and len(table[0].split("\t")) == 3
        assert (tmp_path / "viz.json").exists()

    def test_evaluate_single(self, run_dir, tmp_path, capsys):
        out, _, _ = run_dir
        assert main(["-q", "evaluate", "--pred", str(out / "mlp" / "seed1" / "predictions.jsonl"), "--out", str(tmp_path / "r.json")]) == 0
        saved = json.loads((out / "reports" / "mlp" / "seed1.json").read_text())
        fresh = json.loads((tmp_path / "r.json").read_text())
        assert fresh["aggregate"] == saved["aggregate"]

    def test_compare_on_pipeline_reports(self, run_dir, capsys):
        out, _, _ = run_dir
        assert main(["compare", "--a", str(out / "reports" / "cnn"), "--b", str(out / "reports" / "logreg")]) == 0
        stored = json.loads((out / "compare" / "cnn_vs_logreg.json").read_text())
        assert f"p={stored['p']:.6g}" in capsys.readouterr().out

    @pytest.mark.parametrize(
        "argv, code",
        [
            (["train", "--corpus", "nowhere.jsonl", "--out", "x"], "E_NOT_FOUND"),
            (["pipeline", "--corpus", "nowhere.jsonl", "--out", "x"], "E_NOT_FOUND"),
            (["evaluate", "--pred", "nowhere.jsonl", "--out", "x"], "E_NOT_FOUND"),
            (["visualize-filters", "--model", "nowhere.ckpt", "--corpus", "c", "--out", "x"], "E_NOT_FOUND"),
            (["frobnicate"], "E_USAGE"),
            (["train"], "E_USAGE"),
        ],
    )
    def test_errors_are_one_line(self, argv, code, capsys, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        rc = main(argv)
        assert rc != 0
        assert_error(capsys, code)

    def test_bad_config(self, tmp_path, capsys, notes):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("learning_rate = 3\n")
        assert main(["pipeline", "--config", str(cfg), "--corpus", str(notes), "--out", str(tmp_path / "o")]) == 1
        assert_error(capsys, "E_CONFIG")

    def test_corrupt_checkpoint(self, tmp_path, capsys, notes):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"not a checkpoint at all")
        assert main(["visualize-filters", "--model", str(bad), "--corpus", str(notes)]) == 1
        assert_error(capsys)

    def test_entry_point_exit_code(self, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "notedx.cli", "evaluate", "--pred", str(tmp_path / "none"), "--out", "x"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 1
        assert ERROR_LINE.match(proc.stderr.strip())
