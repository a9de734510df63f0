"""Canonical protocol for the desk-scale synthetic benchmark.

Fixes the hyper-parameters every aggregator uses on the reference suite so
that experiment scripts and the acceptance run are the same experiment. The
CHMM protocol pins the synthetic-data learning rate and a softer sparsity
epsilon than the library default: the benchmark's hallucination-bearing
channels need the residual O-belief (see SynthConfig docs); both values are
ordinary config fields.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from seqdenoise import alt as alt_mod
from seqdenoise import chmm as chmm_mod
from seqdenoise import hmm as hmm_mod
from seqdenoise import metrics as metrics_mod
from seqdenoise import refiner as refiner_mod
from seqdenoise import synth as synth_mod
from seqdenoise.data import Corpus
from seqdenoise.util import child_rng

CHMM_LR = 0.02
CHMM_EPSILON_SPARSITY = 0.03


def chmm_protocol(seed: int, iid_mode: bool = False,
                  strict: bool = False) -> chmm_mod.ChmmConfig:
    return chmm_mod.ChmmConfig(lr=CHMM_LR, epochs=20, pretrain_epochs=5,
                               batch_size=64, patience=5,
                               epsilon_sparsity=CHMM_EPSILON_SPARSITY,
                               iid_mode=iid_mode, seed=seed, strict=strict)


def hmm_protocol(seed: int) -> hmm_mod.HmmConfig:
    return hmm_mod.HmmConfig(max_epochs=20, patience=5, seed=seed)


def refiner_protocol(seed: int) -> refiner_mod.RefinerConfig:
    return refiner_mod.RefinerConfig(lr=0.2, epochs=50, batch_size=1024,
                                     patience=5, seed=seed)


def alt_protocol(seed: int, strict: bool = False) -> alt_mod.AltConfig:
    return alt_mod.AltConfig(max_loops=10, macro_patience=5, seed=seed,
                             chmm=chmm_protocol(seed, strict=strict),
                             refiner=refiner_protocol(seed))


@dataclass
class SuiteScores:
    mv: float
    consensus_recall: float
    hmm: float
    chmm: float
    chmm_iid: float


def score_aggregators(corpus: Corpus, seed: int) -> SuiteScores:
    """Test-split entity F1 of MV, HMM, CHMM, and CHMM-i.i.d., plus the
    best-consensus recall bound, under the canonical protocol."""
    test = corpus.split("test")

    rng = child_rng(seed, 20)
    mv_hard = {rec.sentence.id: metrics_mod.majority_vote(rec.obs.values, rng)
               for rec in test.records}
    mv_f1 = metrics_mod.corpus_entity_f1(mv_hard, test).f1

    consensus = metrics_mod.best_consensus(
        [rec.obs.values for rec in test.records],
        [list(rec.sentence.gold) for rec in test.records],
        corpus.label_set)

    hmm_params, _ = hmm_mod.train_hmm(corpus, hmm_protocol(seed))
    hmm_hard, _ = hmm_mod.decode_corpus(hmm_params, test)
    hmm_f1 = metrics_mod.corpus_entity_f1(hmm_hard, test).f1

    chmm_model, _ = chmm_mod.train_chmm(corpus, chmm_protocol(seed))
    chmm_hard, _ = chmm_mod.denoise(chmm_model, test)
    chmm_f1 = metrics_mod.corpus_entity_f1(chmm_hard, test).f1

    iid_model, _ = chmm_mod.train_chmm(corpus, chmm_protocol(seed, iid_mode=True))
    iid_hard, _ = chmm_mod.denoise(iid_model, test)
    iid_f1 = metrics_mod.corpus_entity_f1(iid_hard, test).f1

    return SuiteScores(mv=mv_f1, consensus_recall=consensus.recall,
                       hmm=hmm_f1, chmm=chmm_f1, chmm_iid=iid_f1)


def run_reference_seed(seed: int) -> SuiteScores:
    corpus = synth_mod.reference_suite(seed)
    return score_aggregators(corpus, seed)


def summarize(scores: list[SuiteScores]) -> dict[str, float]:
    arr = np.array([[s.mv, s.hmm, s.chmm, s.chmm_iid] for s in scores])
    mean = arr.mean(axis=0)
    return {
        "mv": float(mean[0]),
        "hmm": float(mean[1]),
        "chmm": float(mean[2]),
        "chmm_iid": float(mean[3]),
        "gap_hmm_mv": float(mean[1] - mean[0]),
        "gap_chmm_hmm": float(mean[2] - mean[1]),
        "gap_chmm_iid": float(mean[2] - mean[3]),
    }
