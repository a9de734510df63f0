"""Unified command-line entry point.

One binary, subcommand style: synth, train-hmm, train-chmm, train-refiner,
predict-refiner, decode, alt, eval, baseline-mv, baseline-consensus. Every
training run writes its resolved config and metrics into the output
directory before exiting. Usage errors exit 2; runtime failures exit 1 with
a single machine-parsable ``error: ...`` line on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from seqdenoise import alt as alt_mod
from seqdenoise import chmm as chmm_mod
from seqdenoise import hmm as hmm_mod
from seqdenoise import metrics as metrics_mod
from seqdenoise import refiner as refiner_mod
from seqdenoise import synth as synth_mod
from seqdenoise.data import (Corpus, EmbeddingSequence, Record, Sentence,
                             WeakObservationTensor, load_corpus, save_corpus,
                             segment_corpus)
from seqdenoise.util import child_rng, resolve_seed

DEFAULT_MAX_LEN = 512


def _add_corpus_flags(parser: argparse.ArgumentParser, embeddings: bool = True) -> None:
    parser.add_argument("--corpus", required=True, help="corpus file (JSONL)")
    if embeddings:
        parser.add_argument("--embeddings", help="binary embedding file")
    parser.add_argument("--max-len", type=int, default=DEFAULT_MAX_LEN,
                        help="segment sentences longer than this many tokens")


def _load(args: argparse.Namespace, need_embeddings: bool = False) -> Corpus:
    emb = getattr(args, "embeddings", None)
    if need_embeddings and emb is None:
        raise RuntimeError("this command requires --embeddings")
    corpus = load_corpus(args.corpus, emb)
    return segment_corpus(corpus, args.max_len)


def _write_run_files(out_dir: Path, config: dict, metrics: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(config, indent=1, sort_keys=True),
                                         encoding="utf-8")
    (out_dir / "metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True),
                                          encoding="utf-8")


def predictions_to_corpus(corpus: Corpus, hard: dict[str, list[int]],
                          soft: dict[str, np.ndarray], source: str = "denoised",
                          ) -> Corpus:
    """Denoised output in the corpus format: hard labels in the gold field,
    soft rows as the single probability source."""
    records = []
    for rec in corpus.records:
        sid = rec.sentence.id
        sent = Sentence(sid, rec.sentence.tokens, tuple(hard[sid]))
        obs = WeakObservationTensor(np.asarray(soft[sid])[:, None, :], (source,))
        emb = EmbeddingSequence(rec.emb.vectors) if rec.emb is not None else None
        records.append(Record(sent, obs, emb, rec.split))
    return Corpus(corpus.label_set, (source,), tuple(records))


def _score_against_gold(hard: dict[str, list[int]], corpus: Corpus) -> dict | None:
    with_gold = [r for r in corpus.records if r.sentence.gold is not None]
    if not with_gold:
        return None
    sub = Corpus(corpus.label_set, corpus.source_names, tuple(with_gold))
    return metrics_mod.corpus_entity_f1(hard, sub).as_dict()


def _cmd_synth(args: argparse.Namespace) -> int:
    seed = resolve_seed(args.seed)
    if args.config:
        payload = json.loads(Path(args.config).read_text(encoding="utf-8"))
        payload.setdefault("seed", seed)
        if args.seed is not None:
            payload["seed"] = seed
        config = synth_mod.config_from_json(payload)
    else:
        config = synth_mod.reference_config(seed)
    corpus = synth_mod.generate(config)
    out_dir = Path(args.out_dir)
    corpus_path, emb_path = synth_mod.write_bundle(corpus, out_dir)
    _write_run_files(out_dir, synth_mod.config_to_json(config), {
        "sentences": len(corpus),
        "sources": list(corpus.source_names),
        "corpus": corpus_path.name,
        "embeddings": emb_path.name,
    })
    print(f"wrote {corpus_path} and {emb_path}")
    return 0


def _cmd_train_hmm(args: argparse.Namespace) -> int:
    corpus = _load(args)
    config = hmm_mod.HmmConfig(max_epochs=args.epochs, patience=args.patience,
                               seed=resolve_seed(args.seed))
    params, log = hmm_mod.train_hmm(corpus, config)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    hmm_mod.save_hmm(params, corpus.label_set.labels, corpus.source_names,
                     out_dir / "hmm.json")
    hard, _ = hmm_mod.decode_corpus(params, corpus.split("test") or corpus)
    test = corpus.split("test")
    scores = _score_against_gold(hard, test) if len(test) else None
    _write_run_files(out_dir, asdict(config), {
        "objective_trace": log.objective_trace(),
        "dev_f1_trace": log.dev_trace(),
        "selected_epoch": log.selected_epoch,
        "test": scores,
    })
    print(f"wrote {out_dir / 'hmm.json'}")
    return 0


def _cmd_train_chmm(args: argparse.Namespace) -> int:
    corpus = _load(args, need_embeddings=True)
    config = chmm_mod.ChmmConfig(
        lr=args.lr, epochs=args.epochs, pretrain_epochs=args.pretrain_epochs,
        batch_size=args.batch_size, patience=args.patience, iid_mode=args.iid,
        hidden=args.hidden, seed=resolve_seed(args.seed))
    model, log = chmm_mod.train_chmm(corpus, config)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    chmm_mod.save_chmm(model, out_dir / "chmm.bin")
    test = corpus.split("test")
    scores = None
    if len(test):
        hard, _ = chmm_mod.denoise(model, test)
        scores = _score_against_gold(hard, test)
    _write_run_files(out_dir, asdict(config), {
        "q_trace": log.objective_trace(),
        "dev_f1_trace": log.dev_trace(),
        "selected_epoch": log.selected_epoch,
        "test": scores,
    })
    print(f"wrote {out_dir / 'chmm.bin'}")
    return 0


def _cmd_decode(args: argparse.Namespace) -> int:
    corpus = _load(args, need_embeddings=True)
    model = chmm_mod.load_chmm(args.model)
    hard, soft = chmm_mod.denoise(model, corpus)
    save_corpus(predictions_to_corpus(corpus, hard, soft), args.out)
    print(f"wrote {args.out}")
    return 0


def _read_soft_source(path: str, corpus: Corpus) -> dict[str, np.ndarray]:
    denoised = load_corpus(path)
    soft = {}
    for rec in corpus.split("train").records:
        sid = rec.sentence.id
        match = next((r for r in denoised.records if r.sentence.id == sid), None)
        if match is None:
            raise RuntimeError(f"soft-label file is missing sentence {sid!r}")
        soft[sid] = match.obs.values[:, 0, :]
    return soft


def _cmd_train_refiner(args: argparse.Namespace) -> int:
    corpus = _load(args, need_embeddings=True)
    soft = _read_soft_source(args.soft, corpus)
    config = refiner_mod.RefinerConfig(lr=args.lr, epochs=args.epochs,
                                       batch_size=args.batch_size,
                                       patience=args.patience,
                                       seed=resolve_seed(args.seed))
    warm = refiner_mod.load_refiner(args.warm_start)[0] if args.warm_start else None
    model, log = refiner_mod.train_refiner(corpus, soft, config, model=warm,
                                           phase2=args.phase2)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    refiner_mod.save_refiner(model, out_dir / "refiner.bin", config)
    _write_run_files(out_dir, asdict(config), {
        "kl_trace": log.objective_trace(),
        "dev_f1_trace": log.dev_trace(),
        "selected_epoch": log.selected_epoch,
    })
    print(f"wrote {out_dir / 'refiner.bin'}")
    return 0


def _cmd_predict_refiner(args: argparse.Namespace) -> int:
    corpus = _load(args, need_embeddings=True)
    model, _ = refiner_mod.load_refiner(args.model)
    preds = refiner_mod.predict_refiner(model, corpus)
    hard = {sid: np.argmax(p, axis=1).tolist() for sid, p in preds.items()}
    save_corpus(predictions_to_corpus(corpus, hard, preds, source="refiner"), args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_alt(args: argparse.Namespace) -> int:
    corpus = _load(args, need_embeddings=True)
    seed = resolve_seed(args.seed)
    config = alt_mod.AltConfig(
        max_loops=args.max_loops,
        macro_patience=args.macro_patience,
        seed=seed,
        chmm=chmm_mod.ChmmConfig(lr=args.lr, epochs=args.epochs,
                                 pretrain_epochs=args.pretrain_epochs,
                                 batch_size=args.batch_size, seed=seed),
        refiner=refiner_mod.RefinerConfig(seed=seed, epochs=args.refiner_epochs),
    )
    state = alt_mod.run_alt(corpus, config)

    out_dir = Path(args.out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    chmm_mod.save_chmm(state.chmm_model, ckpt_dir / f"loop{state.loop}-chmm.bin")
    refiner_mod.save_refiner(state.refiner_model,
                             ckpt_dir / f"loop{state.loop}-refiner.bin")
    for name, (cm, rm) in state.checkpoints.items():
        chmm_mod.save_chmm(cm, ckpt_dir / f"{name}-chmm.bin")
        refiner_mod.save_refiner(rm, ckpt_dir / f"{name}-refiner.bin")

    best_loop = state.best.loop if state.best is not None else state.loop
    best_chmm = state.checkpoints.get(f"loop{best_loop}",
                                      (state.chmm_model, state.refiner_model))[0]
    hard, soft = chmm_mod.denoise(best_chmm, state.corpus)
    save_corpus(predictions_to_corpus(state.corpus, hard, soft),
                out_dir / "denoised.jsonl")

    resolved = {
        "max_loops": config.max_loops,
        "macro_patience": config.macro_patience,
        "seed": seed,
        "chmm": asdict(config.chmm),
        "refiner": asdict(config.refiner),
    }
    _write_run_files(out_dir, resolved, {
        "table": [m.as_dict() for m in state.table],
        "best": state.best.as_dict() if state.best is not None else None,
        "loops_run": state.loop,
    })
    print(f"wrote run directory {out_dir}")
    return 0


def _labels_from_file(path: str) -> tuple[Corpus, dict[str, list[int]]]:
    corpus = load_corpus(path)
    out = {}
    for rec in corpus.records:
        if rec.sentence.gold is None:
            raise RuntimeError(f"{path}: sentence {rec.sentence.id!r} carries "
                               "no labels in the gold field")
        out[rec.sentence.id] = list(rec.sentence.gold)
    return corpus, out


def _cmd_eval(args: argparse.Namespace) -> int:
    pred_corpus, preds = _labels_from_file(args.pred)
    gold_corpus, golds = _labels_from_file(args.gold)
    if set(preds) != set(golds):
        raise RuntimeError("prediction and gold files cover different sentences")
    order = sorted(preds)
    report = metrics_mod.entity_f1([preds[k] for k in order],
                                   [golds[k] for k in order],
                                   gold_corpus.label_set)
    print(json.dumps(report.as_dict()))
    return 0


def _cmd_baseline_mv(args: argparse.Namespace) -> int:
    corpus = _load(args)
    rng = child_rng(resolve_seed(args.seed), 20)
    hard = {rec.sentence.id: metrics_mod.majority_vote(rec.obs.values, rng)
            for rec in corpus.records}
    if args.out:
        soft = {rec.sentence.id: np.eye(len(corpus.label_set))[hard[rec.sentence.id]]
                for rec in corpus.records}
        save_corpus(predictions_to_corpus(corpus, hard, soft, source="mv"), args.out)
    scores = _score_against_gold(hard, corpus)
    print(json.dumps(scores if scores is not None else {"scored": False}))
    return 0


def _cmd_baseline_consensus(args: argparse.Namespace) -> int:
    corpus = _load(args)
    xs, golds = [], []
    for rec in corpus.records:
        if rec.sentence.gold is None:
            raise RuntimeError("best consensus requires gold labels")
        xs.append(rec.obs.values)
        golds.append(list(rec.sentence.gold))
    report = metrics_mod.best_consensus(xs, golds, corpus.label_set)
    print(json.dumps(report.as_dict()))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seqdenoise",
        description="Multi-source weak-supervision label denoising")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic benchmark bundle")
    p.add_argument("--config", help="JSON config mirroring the generator settings")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train-hmm", help="train the vanilla HMM baseline")
    _add_corpus_flags(p, embeddings=False)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_train_hmm)

    p = sub.add_parser("train-chmm", help="train the conditional HMM")
    _add_corpus_flags(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--pretrain-epochs", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--hidden", type=int, default=0)
    p.add_argument("--iid", action="store_true",
                   help="ablation: drop transitions, predict states per token")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_train_chmm)

    p = sub.add_parser("decode", help="denoise a corpus with a trained model")
    _add_corpus_flags(p)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_decode)

    p = sub.add_parser("train-refiner", help="train the feed-forward refiner")
    _add_corpus_flags(p)
    p.add_argument("--soft", required=True,
                   help="denoised corpus file providing the soft labels")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--lr", type=float, default=0.2)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=1024)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--warm-start", help="checkpoint to continue from")
    p.add_argument("--phase2", action="store_true",
                   help="smaller-rate, fewer-epoch, full-batch regime")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_train_refiner)

    p = sub.add_parser("predict-refiner", help="refiner forward pass")
    _add_corpus_flags(p)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_predict_refiner)

    p = sub.add_parser("alt", help="alternate training (phase I + phase II)")
    _add_corpus_flags(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--max-loops", type=int, default=10)
    p.add_argument("--macro-patience", type=int, default=5)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--pretrain-epochs", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--refiner-epochs", type=int, default=50)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_alt)

    p = sub.add_parser("eval", help="entity-level P/R/F1 of predictions vs gold")
    p.add_argument("--pred", required=True)
    p.add_argument("--gold", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("baseline-mv", help="majority-vote baseline")
    _add_corpus_flags(p, embeddings=False)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_baseline_mv)

    p = sub.add_parser("baseline-consensus", help="best-consensus oracle bound")
    _add_corpus_flags(p, embeddings=False)
    p.set_defaults(func=_cmd_baseline_consensus)

    return parser


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - single-line machine-parsable error
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
