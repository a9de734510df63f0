"""Alternate training: aggregator and refiner retrain on each other's output.

Phase I is acyclic: train the CHMM on the K raw sources, fine-tune the
refiner on its soft labels, and append the refiner's predictions as source
K+1. Phase II loops retrain the CHMM from scratch on the K+1 sources and
warm-start the refiner on the new soft labels, overwriting source K+1 each
time. A macro-scale early stopper over the loop-level dev score picks the
model that reports test results; micro-scale stopping lives inside the
individual trainers.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from seqdenoise import chmm as chmm_mod
from seqdenoise import refiner as refiner_mod
from seqdenoise.data import Corpus
from seqdenoise.metrics import corpus_entity_f1
from seqdenoise.util import TrainingLog


class AltError(RuntimeError):
    pass


def micro_early_stop(trace: list[float], patience: int | None = None) -> int:
    """Epoch (0-based) selected by micro-scale early stopping: the earliest
    maximum of the dev trace, optionally truncated by the patience rule."""
    if not trace:
        raise AltError("empty score trace")
    if patience is not None:
        best, stale, cut = -np.inf, 0, len(trace)
        for i, score in enumerate(trace):
            if score > best:
                best, stale = score, 0
            else:
                stale += 1
                if stale >= patience:
                    cut = i + 1
                    break
        trace = trace[:cut]
    return int(np.argmax(trace))


@dataclass
class EarlyStopper:
    """Fires once the score has not increased for ``patience`` consecutive
    evaluations (strict increases reset the counter)."""

    patience: int
    best: float = -np.inf
    since_best: int = 0
    best_ref: object = None

    def update(self, score: float, ref: object = None) -> bool:
        if score > self.best:
            self.best = score
            self.best_ref = ref
            self.since_best = 0
        else:
            self.since_best += 1
        return self.since_best >= self.patience


@dataclass
class AltConfig:
    max_loops: int = 10
    macro_patience: int = 5
    seed: int = 0
    chmm: chmm_mod.ChmmConfig = field(default_factory=chmm_mod.ChmmConfig)
    refiner: refiner_mod.RefinerConfig = field(default_factory=refiner_mod.RefinerConfig)
    chmm_warm_start: bool = False  # off by default; loops re-initialize the CHMM


@dataclass
class StageMetrics:
    stage: str
    loop: int
    model: str
    dev_f1: float
    test_f1: float

    def as_dict(self) -> dict:
        return {"stage": self.stage, "loop": self.loop, "model": self.model,
                "dev_f1": self.dev_f1, "test_f1": self.test_f1}


@dataclass
class AltState:
    loop: int
    corpus: Corpus                       # K+1 sources after phase I
    original_k: int
    chmm_model: chmm_mod.ChmmModel
    refiner_model: refiner_mod.RefinerModel
    stopper: EarlyStopper
    table: list[StageMetrics] = field(default_factory=list)
    best: StageMetrics | None = None
    logs: dict[str, TrainingLog] = field(default_factory=dict)
    checkpoints: dict[str, tuple] = field(default_factory=dict)

    def record(self, metrics: StageMetrics) -> None:
        self.table.append(metrics)


def _score_predictions(hard: dict[str, list[int]], corpus: Corpus) -> tuple[float, float]:
    dev = corpus.split("dev")
    test = corpus.split("test")
    return corpus_entity_f1(hard, dev).f1, corpus_entity_f1(hard, test).f1


def _train_and_score_chmm(corpus: Corpus, config: AltConfig, loop: int,
                          state: AltState | None,
                          ) -> tuple[chmm_mod.ChmmModel, dict[str, np.ndarray],
                                     StageMetrics, TrainingLog]:
    warm = state.chmm_model if (state is not None and config.chmm_warm_start) else None
    model, log = chmm_mod.train_chmm(corpus, config.chmm, model=warm)
    _, soft, marginal = chmm_mod.decode(
        model,
        chmm_mod.adjust_corpus(corpus, config.chmm.epsilon_sparsity)
        if config.chmm.apply_sparsity else corpus,
    )
    dev_f1, test_f1 = _score_predictions(marginal, corpus)
    stage = "phase1" if loop == 0 else f"loop{loop}"
    return model, soft, StageMetrics(stage, loop, "chmm", dev_f1, test_f1), log


def _train_and_score_refiner(corpus: Corpus, soft: dict[str, np.ndarray],
                             config: AltConfig, loop: int,
                             warm: refiner_mod.RefinerModel | None,
                             ) -> tuple[refiner_mod.RefinerModel,
                                        dict[str, np.ndarray], StageMetrics,
                                        TrainingLog]:
    model, log = refiner_mod.train_refiner(
        corpus, soft, config.refiner, model=warm, phase2=loop > 0)
    preds = refiner_mod.predict_refiner(model, corpus)
    hard = {sid: np.argmax(p, axis=1).tolist() for sid, p in preds.items()}
    dev_f1, test_f1 = _score_predictions(hard, corpus)
    stage = "phase1" if loop == 0 else f"loop{loop}"
    return model, preds, StageMetrics(stage, loop, "refiner", dev_f1, test_f1), log


def run_phase1(corpus: Corpus, config: AltConfig) -> AltState:
    """Train CHMM on the K sources, fit the refiner on its soft labels, and
    append the refiner's predictions as source K+1."""
    corpus.require_embeddings()
    for tag in ("train", "dev", "test"):
        if len(corpus.split(tag)) == 0:
            raise AltError(f"corpus is missing the {tag!r} split")
    base_k = corpus.n_sources

    chmm_model, soft, chmm_metrics, chmm_log = _train_and_score_chmm(
        corpus, config, loop=0, state=None)
    refiner_model, preds, ref_metrics, ref_log = _train_and_score_refiner(
        corpus, soft, config, loop=0, warm=None)
    augmented = refiner_mod.append_refiner_source(corpus, preds, base_k)

    state = AltState(
        loop=0,
        corpus=augmented,
        original_k=base_k,
        chmm_model=chmm_model,
        refiner_model=refiner_model,
        stopper=EarlyStopper(patience=config.macro_patience),
    )
    state.record(chmm_metrics)
    state.record(ref_metrics)
    state.logs["phase1-chmm"] = chmm_log
    state.logs["phase1-refiner"] = ref_log
    return state


def run_phase2(state: AltState, config: AltConfig) -> AltState:
    """Loop CHMM-on-(K+1) and warm-started refiner retraining until the macro
    dev score stalls for ``macro_patience`` loops or ``max_loops`` is hit.

    The reported model is the macro-best checkpoint, never the last loop's.
    """
    for loop in range(1, config.max_loops + 1):
        started = time.perf_counter()
        chmm_model, soft, chmm_metrics, chmm_log = _train_and_score_chmm(
            state.corpus, config, loop, state)
        refiner_model, preds, ref_metrics, ref_log = _train_and_score_refiner(
            state.corpus, soft, config, loop, warm=state.refiner_model)

        state.loop = loop
        state.chmm_model = chmm_model
        state.refiner_model = refiner_model
        state.corpus = refiner_mod.append_refiner_source(
            state.corpus, preds, state.original_k)
        state.record(chmm_metrics)
        state.record(ref_metrics)
        state.logs[f"loop{loop}-chmm"] = chmm_log
        state.logs[f"loop{loop}-refiner"] = ref_log
        state.checkpoints[f"loop{loop}"] = (chmm_model, refiner_model)

        loop_best = max((chmm_metrics, ref_metrics), key=lambda m: m.dev_f1)
        fired = state.stopper.update(loop_best.dev_f1, loop_best)
        if state.best is None or loop_best.dev_f1 > state.best.dev_f1:
            state.best = loop_best
        _ = time.perf_counter() - started
        if fired:
            break
    return state


def run_alt(corpus: Corpus, config: AltConfig) -> AltState:
    state = run_phase1(corpus, config)
    return run_phase2(state, config)
