import json
from pathlib import Path

import numpy as np
import pytest

from seqdenoise import synth
from seqdenoise.cli import dispatch
from seqdenoise.data import load_corpus


def tiny_bundle(tmp_path, seed=0, n_train=14, n_dev=4, n_test=4):
    config = synth.SynthConfig(
        seed=seed, n_train=n_train, n_dev=n_dev, n_test=n_test,
        len_min=3, len_max=7,
        sources=(
            synth.SourceChannel("a", precision=0.9, recall=0.6),
            synth.SourceChannel("b", precision=0.7, recall=0.5),
        ),
    )
    corpus = synth.generate(config)
    return synth.write_bundle(corpus, tmp_path / "bundle")


def test_unknown_subcommand_exits_2(capsys):
    assert dispatch(["frobnicate"]) == 2


def test_missing_required_corpus_flag_exits_2(capsys):
    code = dispatch(["train-hmm", "--out-dir", "x"])
    assert code == 2
    assert "--corpus" in capsys.readouterr().err


def test_eval_identical_files_scores_one(tmp_path, capsys):
    corpus_path, _ = tiny_bundle(tmp_path)
    code = dispatch(["eval", "--pred", str(corpus_path), "--gold", str(corpus_path)])
    assert code == 0
    report = json.loads(capsys.readouterr().out)
    assert report["f1"] == 1.0


def test_eval_disjoint_files_fail(tmp_path, capsys):
    a, _ = tiny_bundle(tmp_path / "a", seed=1)
    b, _ = tiny_bundle(tmp_path / "b", seed=2, n_train=2, n_dev=2, n_test=2)
    code = dispatch(["eval", "--pred", str(a), "--gold", str(b)])
    assert code == 1
    assert "error:" in capsys.readouterr().err


def test_synth_writes_bundle_and_config(tmp_path, capsys):
    out = tmp_path / "out"
    cfg_path = tmp_path / "cfg.json"
    config = synth.SynthConfig(
        seed=3, n_train=6, n_dev=2, n_test=2,
        sources=(synth.SourceChannel("a", precision=0.9, recall=0.6),))
    cfg_path.write_text(json.dumps(synth.config_to_json(config)))
    code = dispatch(["synth", "--config", str(cfg_path), "--out-dir", str(out)])
    assert code == 0
    assert (out / "corpus.jsonl").exists()
    assert (out / "embeddings.bin").exists()
    resolved = json.loads((out / "config.json").read_text())
    assert resolved["seed"] == 3
    assert json.loads((out / "metrics.json").read_text())["sentences"] == 10


def test_baseline_mv_and_consensus(tmp_path, capsys):
    corpus_path, _ = tiny_bundle(tmp_path)
    assert dispatch(["baseline-mv", "--corpus", str(corpus_path), "--seed", "1"]) == 0
    mv = json.loads(capsys.readouterr().out)
    assert 0.0 <= mv["f1"] <= 1.0
    assert dispatch(["baseline-consensus", "--corpus", str(corpus_path)]) == 0
    cons = json.loads(capsys.readouterr().out)
    assert cons["precision"] == 1.0


def test_train_hmm_writes_model_and_metrics(tmp_path, capsys):
    corpus_path, _ = tiny_bundle(tmp_path)
    out = tmp_path / "run"
    code = dispatch(["train-hmm", "--corpus", str(corpus_path),
                     "--out-dir", str(out), "--epochs", "3", "--seed", "0"])
    assert code == 0
    assert (out / "hmm.json").exists()
    metrics = json.loads((out / "metrics.json").read_text())
    assert len(metrics["objective_trace"]) >= 1
    assert json.loads((out / "config.json").read_text())["max_epochs"] == 3


def test_train_chmm_decode_refiner_pipeline(tmp_path, capsys):
    corpus_path, emb_path = tiny_bundle(tmp_path)
    run = tmp_path / "chmm-run"
    code = dispatch(["train-chmm", "--corpus", str(corpus_path),
                     "--embeddings", str(emb_path), "--out-dir", str(run),
                     "--epochs", "2", "--pretrain-epochs", "2",
                     "--batch-size", "6", "--seed", "0"])
    assert code == 0
    model_path = run / "chmm.bin"
    assert model_path.exists()

    denoised = tmp_path / "denoised.jsonl"
    code = dispatch(["decode", "--corpus", str(corpus_path),
                     "--embeddings", str(emb_path), "--model", str(model_path),
                     "--out", str(denoised)])
    assert code == 0
    den = load_corpus(denoised)
    assert den.source_names == ("denoised",)
    assert all(r.sentence.gold is not None for r in den.records)

    ref_run = tmp_path / "ref-run"
    code = dispatch(["train-refiner", "--corpus", str(corpus_path),
                     "--embeddings", str(emb_path), "--soft", str(denoised),
                     "--out-dir", str(ref_run), "--epochs", "3", "--seed", "0"])
    assert code == 0
    ckpt = ref_run / "refiner.bin"
    assert ckpt.exists()

    preds = tmp_path / "refined.jsonl"
    code = dispatch(["predict-refiner", "--corpus", str(corpus_path),
                     "--embeddings", str(emb_path), "--model", str(ckpt),
                     "--out", str(preds)])
    assert code == 0
    refined = load_corpus(preds)
    assert refined.source_names == ("refiner",)


def test_chmm_requires_embeddings(tmp_path, capsys):
    corpus_path, _ = tiny_bundle(tmp_path)
    code = dispatch(["train-chmm", "--corpus", str(corpus_path),
                     "--out-dir", str(tmp_path / "x"), "--epochs", "1"])
    assert code == 1
    assert "error:" in capsys.readouterr().err


def test_alt_end_to_end_writes_run_directory(tmp_path, capsys):
    corpus_path, emb_path = tiny_bundle(tmp_path)
    out = tmp_path / "alt-run"
    code = dispatch(["alt", "--corpus", str(corpus_path),
                     "--embeddings", str(emb_path), "--out-dir", str(out),
                     "--max-loops", "1", "--macro-patience", "1",
                     "--epochs", "2", "--pretrain-epochs", "1",
                     "--batch-size", "6", "--refiner-epochs", "3", "--seed", "1"])
    assert code == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["loops_run"] == 1
    assert metrics["best"] is not None
    assert (out / "denoised.jsonl").exists()
    ckpts = list((out / "checkpoints").glob("*.bin"))
    assert len(ckpts) >= 2
    resolved = json.loads((out / "config.json").read_text())
    assert resolved["seed"] == 1


def test_env_seed_fallback(tmp_path, monkeypatch, capsys):
    corpus_path, _ = tiny_bundle(tmp_path)
    monkeypatch.setenv("SEQDENOISE_SEED", "77")
    out = tmp_path / "mv-out.jsonl"
    assert dispatch(["baseline-mv", "--corpus", str(corpus_path),
                     "--out", str(out)]) == 0
    first = out.read_bytes()
    assert dispatch(["baseline-mv", "--corpus", str(corpus_path),
                     "--out", str(out)]) == 0
    assert out.read_bytes() == first
