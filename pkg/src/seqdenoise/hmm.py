"""Vanilla multi-source HMM baseline.

Time-constant transition/emission matrices trained with classic EM. The
chain starts at the first token: ``pi`` is the distribution of the first
hidden label and transitions apply from the second token on. Evaluating a
sentence reuses the shared kernels by writing ``pi`` into every row of the
first transition slice, which leaves the evidence and all posteriors of the
classic parameterization unchanged.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from seqdenoise import batched, kernels
from seqdenoise.data import Corpus, Record
from seqdenoise.metrics import corpus_entity_f1, majority_vote
from seqdenoise.util import EpochStats, TrainingLog, child_rng

PROB_FLOOR = 1e-12


class HmmError(RuntimeError):
    pass


@dataclass
class HmmParams:
    pi: np.ndarray     # (L,)
    trans: np.ndarray  # (L, L)
    emit: np.ndarray   # (L, L, K)

    def floored(self) -> "HmmParams":
        pi = np.maximum(self.pi, PROB_FLOOR)
        trans = np.maximum(self.trans, PROB_FLOOR)
        emit = np.maximum(self.emit, PROB_FLOOR)
        return HmmParams(
            pi=pi / pi.sum(),
            trans=trans / trans.sum(axis=1, keepdims=True),
            emit=emit / emit.sum(axis=1, keepdims=True),
        )

    def validate(self) -> None:
        for name, arr, axis in (("pi", self.pi, 0), ("trans", self.trans, 1),
                                ("emit", self.emit, 1)):
            if np.any(arr <= 0) or not np.all(np.isfinite(arr)):
                raise HmmError(f"{name} must be strictly positive and finite")
            if np.any(np.abs(arr.sum(axis=axis) - 1.0) > 1e-8):
                raise HmmError(f"{name} rows must sum to 1")

    def copy(self) -> "HmmParams":
        return HmmParams(self.pi.copy(), self.trans.copy(), self.emit.copy())


@dataclass
class InitStats:
    """Add-one-smoothed statistics of the majority-voted label sequences."""

    trans: np.ndarray       # (L, L)
    emit: np.ndarray        # (L, L, K)
    first_freq: np.ndarray  # (L,) first-token label frequencies
    state_freq: np.ndarray  # (L,) overall label frequencies


@dataclass
class HmmConfig:
    max_epochs: int = 20
    patience: int = 5
    seed: int = 0


def init_statistics(corpus: Corpus, rng: np.random.Generator) -> InitStats:
    """Transition and per-source emission statistics from majority-voted labels."""
    if len(corpus) == 0:
        raise HmmError("cannot initialize from an empty corpus")
    n_labels = len(corpus.label_set)
    n_sources = corpus.n_sources
    trans = np.ones((n_labels, n_labels))
    emit = np.ones((n_labels, n_labels, n_sources))
    first = np.ones(n_labels)
    state = np.ones(n_labels)
    for rec in corpus.records:
        mv = majority_vote(rec.obs.values, rng)
        first[mv[0]] += 1
        for a, b in zip(mv[:-1], mv[1:]):
            trans[a, b] += 1
        for t, lab in enumerate(mv):
            state[lab] += 1
            emit[lab] += rec.obs.values[t].T  # (L_obs, K) -> adds x[t,k,j] at [lab,j,k]
    return InitStats(
        trans=trans / trans.sum(axis=1, keepdims=True),
        emit=emit / emit.sum(axis=1, keepdims=True),
        first_freq=first / first.sum(),
        state_freq=state / state.sum(),
    )


def token_params(params: HmmParams, n_steps: int) -> kernels.TokenConditionedParams:
    """Embed the constant HMM into the shared per-token parameterization."""
    n_labels = params.pi.shape[0]
    trans = np.empty((n_steps, n_labels, n_labels))
    trans[0] = np.broadcast_to(params.pi, (n_labels, n_labels))
    trans[1:] = params.trans
    return kernels.TokenConditionedParams(
        pi=kernels.initial_distribution(n_labels),
        trans=trans,
        emit=np.broadcast_to(params.emit, (n_steps,) + params.emit.shape).copy(),
    )


def _batch_trans(params: HmmParams, n_batch: int, t_max: int) -> np.ndarray:
    n_labels = params.pi.shape[0]
    trans = np.empty((n_batch, t_max, n_labels, n_labels))
    trans[:, 0] = params.pi
    trans[:, 1:] = params.trans
    return trans


def e_step(params: HmmParams, records: list[Record], chunk: int = 256,
           ) -> tuple[list[kernels.PosteriorStats], list[np.ndarray], float]:
    """Posterior statistics for every record plus the total log evidence."""
    stats: list[kernels.PosteriorStats] = []
    xs: list[np.ndarray] = []
    total = 0.0
    pi0 = kernels.initial_distribution(params.pi.shape[0])
    for lo in range(0, len(records), chunk):
        part = records[lo : lo + chunk]
        batch = batched.make_batch(part, with_emb=False)
        trans = _batch_trans(params, batch.size, batch.max_len)
        emit = np.broadcast_to(
            params.emit, (batch.size, batch.max_len) + params.emit.shape)
        _, log_phi = batched.batch_logphi(emit, batch.x)
        bstats = batched.forward_backward(pi0, trans, log_phi, batch.lengths)
        total += float(bstats.log_evidence.sum())
        for b, rec in enumerate(part):
            t_len = batch.lengths[b]
            stats.append(kernels.PosteriorStats(
                gamma=bstats.gamma[b, :t_len].copy(),
                xi=bstats.xi[b, :t_len].copy(),
                gamma0=bstats.gamma0[b].copy(),
                log_evidence=float(bstats.log_evidence[b]),
            ))
            xs.append(rec.obs.values)
    return stats, xs, total


def hmm_m_step(stats: list[kernels.PosteriorStats], xs: list[np.ndarray],
               gamma_1s: np.ndarray, prev: HmmParams | None = None,
               ) -> tuple[HmmParams, list[str]]:
    """Closed-form pseudo-count update pooled over the batch.

    States that were never visited keep their previous row (or fall back to
    uniform); each such event is reported in the returned flags.
    """
    n_labels = gamma_1s.shape[1]
    n_sources = xs[0].shape[1]
    pi = gamma_1s.mean(axis=0)

    trans_num = np.zeros((n_labels, n_labels))
    emit_num = np.zeros((n_labels, n_labels, n_sources))
    emit_den = np.zeros(n_labels)
    for st, x in zip(stats, xs):
        trans_num += st.xi[1:].sum(axis=0)
        emit_num += np.einsum("ti,tkj->ijk", st.gamma, x)
        emit_den += st.gamma.sum(axis=0)

    flags: list[str] = []
    trans = np.empty_like(trans_num)
    for i in range(n_labels):
        row_sum = trans_num[i].sum()
        if row_sum <= 0:
            flags.append(f"transition row {i} unvisited; kept previous")
            trans[i] = prev.trans[i] if prev is not None else 1.0 / n_labels
        else:
            trans[i] = trans_num[i] / row_sum

    emit = np.empty_like(emit_num)
    for i in range(n_labels):
        if emit_den[i] <= 0:
            flags.append(f"emission state {i} unvisited; kept previous")
            emit[i] = prev.emit[i] if prev is not None else 1.0 / n_labels
        else:
            emit[i] = emit_num[i] / emit_den[i]

    return HmmParams(pi=pi, trans=trans, emit=emit).floored(), flags


def decode_corpus(params: HmmParams, corpus: Corpus, method: str = "marginal",
                  chunk: int = 256) -> tuple[dict[str, list[int]], dict[str, np.ndarray]]:
    """Hard labels (and smoothed marginals) for every sentence."""
    hard: dict[str, list[int]] = {}
    soft: dict[str, np.ndarray] = {}
    pi0 = kernels.initial_distribution(params.pi.shape[0])
    records = list(corpus.records)
    for lo in range(0, len(records), chunk):
        part = records[lo : lo + chunk]
        batch = batched.make_batch(part, with_emb=False)
        trans = _batch_trans(params, batch.size, batch.max_len)
        emit = np.broadcast_to(
            params.emit, (batch.size, batch.max_len) + params.emit.shape)
        _, log_phi = batched.batch_logphi(emit, batch.x)
        bstats = batched.forward_backward(pi0, trans, log_phi, batch.lengths)
        if method == "viterbi":
            paths = batched.batch_viterbi(pi0, trans, log_phi, batch.lengths)
        elif method == "marginal":
            paths = [np.argmax(bstats.gamma[b, : batch.lengths[b]], axis=1).tolist()
                     for b in range(batch.size)]
        else:
            raise HmmError(f"unknown decode method {method!r}")
        for b, rec in enumerate(part):
            hard[rec.sentence.id] = paths[b]
            soft[rec.sentence.id] = bstats.gamma[b, : batch.lengths[b]].copy()
    return hard, soft


def train_hmm(corpus: Corpus, config: HmmConfig) -> tuple[HmmParams, TrainingLog]:
    """Classic EM from majority-vote statistics with dev-F1 early stopping."""
    train = corpus.split("train")
    if len(train) == 0:
        raise HmmError("training split is empty")
    dev = corpus.split("dev")
    use_dev = len(dev) > 0 and all(r.sentence.gold is not None for r in dev.records)

    rng = child_rng(config.seed, 0)
    stats0 = init_statistics(train, rng)
    params = HmmParams(pi=stats0.first_freq, trans=stats0.trans,
                       emit=stats0.emit).floored()

    log = TrainingLog()
    best = params.copy()
    best_f1 = -np.inf
    stale = 0
    for epoch in range(config.max_epochs):
        started = time.perf_counter()
        stats, xs, evidence = e_step(params, list(train.records))
        gamma_1s = np.stack([st.gamma[0] for st in stats])
        params, flags = hmm_m_step(stats, xs, gamma_1s, prev=params)
        log.notes.extend(f"epoch {epoch}: {f}" for f in flags)

        dev_f1 = None
        if use_dev:
            hard, _ = decode_corpus(params, dev, method="marginal")
            dev_f1 = corpus_entity_f1(hard, dev).f1
        log.add(EpochStats(epoch, evidence, dev_f1, time.perf_counter() - started))

        if use_dev:
            if dev_f1 > best_f1:
                best_f1, best, stale = dev_f1, params.copy(), 0
                log.selected_epoch = epoch
            else:
                stale += 1
                if stale >= config.patience:
                    break
        else:
            best = params.copy()
            log.selected_epoch = epoch
    return best, log


def save_hmm(params: HmmParams, corpus_labels: tuple[str, ...],
             source_names: tuple[str, ...], path: str | Path) -> None:
    payload = {
        "labels": list(corpus_labels),
        "sources": list(source_names),
        "pi": params.pi.tolist(),
        "trans": params.trans.tolist(),
        "emit": params.emit.tolist(),
    }
    Path(path).write_text(json.dumps(payload, indent=1), encoding="utf-8")


def load_hmm(path: str | Path) -> tuple[HmmParams, tuple[str, ...], tuple[str, ...]]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    params = HmmParams(
        pi=np.asarray(payload["pi"], dtype=float),
        trans=np.asarray(payload["trans"], dtype=float),
        emit=np.asarray(payload["emit"], dtype=float),
    )
    return params, tuple(payload["labels"]), tuple(payload["sources"])
