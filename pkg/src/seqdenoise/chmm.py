"""Conditional HMM: token-wise transition and emission matrices predicted
from embeddings, trained by generalized EM with a gradient M-step.

The E-step runs the shared forward-backward kernels under the current
per-token parameters; the M-step backpropagates the expected complete-data
log likelihood through the label-axis softmax and the affine stack and takes
one ascent step. Before EM, the net is pretrained to reproduce count-based
statistics at every token (MSE warm start). ``iid_mode`` drops the
transition structure: an L-sized head predicts a per-token state prior and
tokens decouple.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from seqdenoise import batched, kernels
from seqdenoise.data import Corpus
from seqdenoise.hmm import InitStats
from seqdenoise.labels import LabelSet
from seqdenoise.metrics import corpus_entity_f1, majority_vote
from seqdenoise.neural import AffineStack, GradientBuffer, sgd_step, softmax_label_axis
from seqdenoise.util import EpochStats, TrainingLog, child_rng


class ChmmError(RuntimeError):
    pass


@dataclass
class ChmmConfig:
    lr: float = 1e-3
    epochs: int = 20
    pretrain_epochs: int = 5
    pretrain_lr: float = 0.01
    batch_size: int = 64
    patience: int = 5
    epsilon_pi: float = 1e-6
    epsilon_sparsity: float = 0.05
    apply_sparsity: bool = True
    iid_mode: bool = False
    hidden: int = 0
    shared_trunk: bool = False
    seed: int = 0
    strict: bool = False  # validate row normalization after every batch


@dataclass
class ChmmModel:
    net: AffineStack
    label_set: LabelSet
    source_names: tuple[str, ...]
    d_emb: int
    config: ChmmConfig

    @property
    def n_labels(self) -> int:
        return len(self.label_set)

    @property
    def n_sources(self) -> int:
        return len(self.source_names)


def build_model(label_set: LabelSet, source_names: tuple[str, ...], d_emb: int,
                config: ChmmConfig) -> ChmmModel:
    n_labels, n_sources = len(label_set), len(source_names)
    trans_shape = (n_labels,) if config.iid_mode else (n_labels, n_labels)
    net = AffineStack(
        d_emb,
        {"trans": trans_shape, "emit": (n_labels, n_labels, n_sources)},
        hidden=config.hidden,
        shared_trunk=config.shared_trunk,
        rng=child_rng(config.seed, 1),
    )
    return ChmmModel(net, label_set, source_names, d_emb, config)


def sparsity_adjust(x: np.ndarray, epsilon: float) -> np.ndarray:
    """Soften confident-O rows of sources that miss an entity seen by another.

    A source observes an entity at t when it puts more than 0.5 mass on a
    non-O label. At such steps every non-observing source's row becomes the
    renormalized near-uniform row (epsilon at O, (1-epsilon)/L elsewhere).
    Idempotent: the replacement row never counts as observing.
    """
    if not 0.0 < epsilon < 1.0:
        raise ChmmError("sparsity epsilon must lie in (0, 1)")
    n_labels = x.shape[2]
    observes = (x[:, :, 1:] > 0.5).any(axis=2)       # (T, K)
    entity_steps = observes.any(axis=1)              # (T,)
    row = np.full(n_labels, (1.0 - epsilon) / n_labels)
    row[0] = epsilon
    row /= row.sum()
    out = x.copy()
    replace_mask = entity_steps[:, None] & ~observes
    out[replace_mask] = row
    return out


def adjust_corpus(corpus: Corpus, epsilon: float) -> Corpus:
    tensors = {rec.sentence.id: sparsity_adjust(rec.obs.values, epsilon)
               for rec in corpus.records}
    return corpus.with_observations(tensors)


_PROB_FLOOR = 1e-300  # keeps logs finite even if a softmax underflows


def _emission_probs(scores: np.ndarray) -> np.ndarray:
    """Softmax over the observed-label axis j of (..., i, j, k) scores."""
    probs = softmax_label_axis(np.moveaxis(scores, -1, -2)).swapaxes(-1, -2)
    return np.maximum(probs, _PROB_FLOOR)


def emit_params(model: ChmmModel, emb: np.ndarray) -> kernels.TokenConditionedParams:
    """Per-token transition/emission tensors for one sentence (full mode)."""
    if model.config.iid_mode:
        raise ChmmError("emit_params is undefined in iid mode; use emit_iid_params")
    if emb.ndim != 2 or emb.shape[1] != model.d_emb:
        raise ChmmError(f"embedding dim {emb.shape} != (T, {model.d_emb})")
    outs, _ = model.net.forward(np.asarray(emb, dtype=float))
    return kernels.TokenConditionedParams(
        pi=kernels.initial_distribution(model.n_labels, model.config.epsilon_pi),
        trans=softmax_label_axis(outs["trans"]),
        emit=_emission_probs(outs["emit"]),
    )


def emit_iid_params(model: ChmmModel, emb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-token state priors (T, L) and emission tensors (T, L, L, K)."""
    if not model.config.iid_mode:
        raise ChmmError("model is not in iid mode")
    outs, _ = model.net.forward(np.asarray(emb, dtype=float))
    return softmax_label_axis(outs["trans"]), _emission_probs(outs["emit"])


def _validate_rows(name: str, arr: np.ndarray, axis: int) -> None:
    if not np.all(np.isfinite(arr)):
        raise ChmmError(f"{name} contains non-finite values")
    if np.any(np.abs(arr.sum(axis=axis) - 1.0) > 1e-6):
        raise ChmmError(f"{name} rows do not sum to 1")


@dataclass
class _BatchWork:
    """Everything one mini-batch needs for Q and its exact gradients."""

    batch: batched.Batch
    scores: dict[str, np.ndarray]    # raw head outputs, batch-major
    trans: np.ndarray                # (B,T,L,L) probs, or (B,T,L) priors in iid mode
    emit: np.ndarray                 # (B,T,L,L,K) probs
    per_source: np.ndarray           # (B,T,L,K) emission dot products
    log_phi: np.ndarray              # (B,T,L)
    cache: dict


def _prepare(model: ChmmModel, batch: batched.Batch) -> _BatchWork:
    n_batch, t_max = batch.emb.shape[:2]
    outs, cache = model.net.forward(batch.emb.reshape(n_batch * t_max, model.d_emb))
    scores = {k: v.reshape((n_batch, t_max) + v.shape[1:]) for k, v in outs.items()}
    trans = np.maximum(softmax_label_axis(scores["trans"]), _PROB_FLOOR)
    emit = _emission_probs(scores["emit"])
    per_source, log_phi = batched.batch_logphi(emit, batch.x)
    return _BatchWork(batch, scores, trans, emit, per_source, log_phi, cache)


def _mask(batch: batched.Batch) -> np.ndarray:
    return np.arange(batch.max_len)[None, :] < batch.lengths[:, None]


def _chain_stats(model: ChmmModel, work: _BatchWork) -> tuple[batched.BatchStats, np.ndarray]:
    pi = kernels.initial_distribution(model.n_labels, model.config.epsilon_pi)
    stats = batched.forward_backward(pi, work.trans, work.log_phi, work.batch.lengths)
    q = batched.batch_q(pi, work.trans, work.log_phi, stats)
    return stats, q


def _iid_stats(work: _BatchWork) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-token posteriors, per-sentence log evidence and Q (iid mode)."""
    mask = _mask(work.batch)
    shifts = work.log_phi.max(axis=2, keepdims=True)
    weighted = work.trans * np.exp(work.log_phi - shifts)  # prior * scaled phi
    norm = weighted.sum(axis=2, keepdims=True)
    gamma = np.where(mask[:, :, None], weighted / norm, 0.0)
    log_ev = (np.where(mask, np.log(norm[:, :, 0]) + shifts[:, :, 0], 0.0)).sum(axis=1)
    q = np.einsum("bti,bti->b", gamma,
                  np.where(mask[:, :, None], np.log(work.trans) + work.log_phi, 0.0))
    return gamma, log_ev, q


def _emission_grad(work: _BatchWork, gamma: np.ndarray, scale: float) -> np.ndarray:
    """d(mean Q)/d(emission scores): Phi * gamma_i * (x_kj / d_ik - 1)."""
    x_byj = np.moveaxis(work.batch.x, 2, 3)                  # (B,T,L_j,K)
    ratio = x_byj[:, :, None, :, :] / work.per_source[:, :, :, None, :]
    grad = work.emit * gamma[:, :, :, None, None] * (ratio - 1.0)
    grad *= _mask(work.batch)[:, :, None, None, None]
    return grad * scale


def _batch_gradients(model: ChmmModel, work: _BatchWork,
                     ) -> tuple[np.ndarray, GradientBuffer]:
    """Per-sentence Q and d(mean Q)/d(theta) for one mini-batch."""
    n_batch, t_max = work.batch.emb.shape[:2]
    scale = 1.0 / n_batch
    if model.config.iid_mode:
        gamma, log_ev, q = _iid_stats(work)
        grad_trans = (gamma - work.trans * gamma.sum(axis=2, keepdims=True)) * scale
        grad_trans *= _mask(work.batch)[:, :, None]
    else:
        stats, q = _chain_stats(model, work)
        gamma, log_ev = stats.gamma, stats.log_evidence
        grad_trans = (stats.xi - stats.xi.sum(axis=3, keepdims=True) * work.trans) * scale
    if not np.all(np.isfinite(q)) or not np.all(np.isfinite(log_ev)):
        bad = work.batch.ids[int(np.flatnonzero(~np.isfinite(q + log_ev))[0])]
        raise ChmmError(f"non-finite objective on sentence {bad!r}")
    grad_emit = _emission_grad(work, gamma, scale)
    flat = n_batch * t_max
    grads = model.net.backward(
        {"trans": grad_trans.reshape(flat, -1), "emit": grad_emit.reshape(flat, -1)},
        work.cache,
    )
    if model.config.strict:
        _validate_rows("transition/prior", work.trans, -1)
        _validate_rows("emission", np.moveaxis(work.emit, -1, -2), -1)
        gsum = gamma.sum(axis=2)
        if np.any(np.abs(gsum[_mask(work.batch)] - 1.0) > 1e-6):
            raise ChmmError("posterior rows do not sum to 1")
    return q, grads


def _batches(records: list, batch_size: int, rng: np.random.Generator | None):
    order = np.arange(len(records))
    if rng is not None:
        rng.shuffle(order)
    for lo in range(0, len(order), batch_size):
        yield [records[i] for i in order[lo : lo + batch_size]]


def pretrain_init(model: ChmmModel, corpus: Corpus, init: InitStats,
                  epochs: int | None = None) -> list[float]:
    """MSE warm start: fit raw head scores to the log count statistics so the
    post-softmax outputs reproduce them at every token. The output biases are
    seeded with the targets (zero-order fit), then gradient descent shrinks
    the token-dependent residual. Returns the per-epoch loss trace."""
    config = model.config
    epochs = config.pretrain_epochs if epochs is None else epochs
    records = list(corpus.split("train").records)
    if config.iid_mode:
        trans_target = np.log(init.state_freq)
    else:
        trans_target = np.log(init.trans)
    emit_target = np.log(init.emit)
    model.net.params["trans.b"] = trans_target.reshape(-1).copy()
    model.net.params["emit.b"] = emit_target.reshape(-1).copy()
    rng = child_rng(config.seed, 2)

    trace: list[float] = []
    for _ in range(epochs):
        epoch_loss = 0.0
        n_sentences = 0
        for part in _batches(records, config.batch_size, rng):
            batch = batched.make_batch(part)
            n_batch, t_max = batch.emb.shape[:2]
            outs, cache = model.net.forward(
                batch.emb.reshape(n_batch * t_max, model.d_emb))
            mask = _mask(batch)
            weight = mask / batch.lengths[:, None] / n_batch  # (1/T per sentence)
            loss = 0.0
            grad_outs = {}
            for name, target in (("trans", trans_target), ("emit", emit_target)):
                scores = outs[name].reshape((n_batch, t_max) + target.shape)
                diff = scores - target
                w_full = weight.reshape(weight.shape + (1,) * target.ndim)
                loss += float(np.sum(diff ** 2 * w_full))
                grad = 2.0 * diff * w_full
                grad_outs[name] = -grad.reshape(n_batch * t_max, -1)  # ascent on -loss
            grads = model.net.backward(grad_outs, cache)
            sgd_step(model.net, grads, config.pretrain_lr)
            epoch_loss += loss * n_batch
            n_sentences += n_batch
        trace.append(epoch_loss / n_sentences)
        if len(trace) > 1 and trace[-2] - trace[-1] < 1e-10 * max(1.0, abs(trace[-2])):
            break  # plateau
    return trace


def generalized_em_epoch(model: ChmmModel, corpus: Corpus,
                         rng: np.random.Generator | None = None) -> float:
    """One pass of E-steps and gradient ascent M-steps; returns mean Q."""
    records = list(corpus.split("train").records)
    if not records:
        raise ChmmError("training split is empty")
    config = model.config
    q_total, n_total = 0.0, 0
    for part in _batches(records, config.batch_size, rng):
        work = _prepare(model, batched.make_batch(part))
        q, grads = _batch_gradients(model, work)
        sgd_step(model.net, grads, config.lr)
        q_total += float(q.sum())
        n_total += len(part)
    return q_total / n_total


def decode(model: ChmmModel, corpus: Corpus, chunk: int = 256,
           ) -> tuple[dict[str, list[int]], dict[str, np.ndarray], dict[str, list[int]]]:
    """Viterbi paths, smoothed marginals, and marginal-argmax paths."""
    corpus.require_embeddings()
    pi = kernels.initial_distribution(model.n_labels, model.config.epsilon_pi)
    viterbi: dict[str, list[int]] = {}
    soft: dict[str, np.ndarray] = {}
    marginal: dict[str, list[int]] = {}
    records = list(corpus.records)
    for lo in range(0, len(records), chunk):
        part = records[lo : lo + chunk]
        work = _prepare(model, batched.make_batch(part))
        if model.config.iid_mode:
            gamma, _, _ = _iid_stats(work)
            paths = [np.argmax(gamma[b, : work.batch.lengths[b]], axis=1).tolist()
                     for b in range(len(part))]
            vit = paths
        else:
            stats, _ = _chain_stats(model, work)
            gamma = stats.gamma
            vit = batched.batch_viterbi(pi, work.trans, work.log_phi, work.batch.lengths)
            paths = [np.argmax(gamma[b, : work.batch.lengths[b]], axis=1).tolist()
                     for b in range(len(part))]
        for b, rec in enumerate(part):
            sid = rec.sentence.id
            viterbi[sid] = vit[b]
            soft[sid] = gamma[b, : work.batch.lengths[b]].copy()
            marginal[sid] = paths[b]
    return viterbi, soft, marginal


def denoise(model: ChmmModel, corpus: Corpus,
            ) -> tuple[dict[str, list[int]], dict[str, np.ndarray]]:
    """Most probable label sequences (Viterbi) and soft labels (marginals).

    The corpus gets the same sparsity adjustment the model was trained with.
    """
    view = adjust_corpus(corpus, model.config.epsilon_sparsity) \
        if model.config.apply_sparsity else corpus
    hard, soft, _ = decode(model, view)
    return hard, soft


def _mixed_init_stats(raw_train: Corpus, adj_train: Corpus,
                      rng: np.random.Generator) -> InitStats:
    """Majority-vote labels from the raw observations, fractional emission
    counts from the adjusted tensor the model will actually train on."""
    n_labels = len(raw_train.label_set)
    n_sources = raw_train.n_sources
    trans = np.ones((n_labels, n_labels))
    emit = np.ones((n_labels, n_labels, n_sources))
    first = np.ones(n_labels)
    state = np.ones(n_labels)
    for raw_rec, adj_rec in zip(raw_train.records, adj_train.records):
        mv = majority_vote(raw_rec.obs.values, rng)
        first[mv[0]] += 1
        for a, b in zip(mv[:-1], mv[1:]):
            trans[a, b] += 1
        for t, lab in enumerate(mv):
            state[lab] += 1
            emit[lab] += adj_rec.obs.values[t].T
    return InitStats(
        trans=trans / trans.sum(axis=1, keepdims=True),
        emit=emit / emit.sum(axis=1, keepdims=True),
        first_freq=first / first.sum(),
        state_freq=state / state.sum(),
    )


def train_chmm(corpus: Corpus, config: ChmmConfig,
               model: ChmmModel | None = None) -> tuple[ChmmModel, TrainingLog]:
    """Pretrain then run generalized EM with dev-F1 micro early stopping."""
    corpus.require_embeddings()
    d_emb = corpus.d_emb
    view = adjust_corpus(corpus, config.epsilon_sparsity) if config.apply_sparsity else corpus
    train = view.split("train")
    if len(train) == 0:
        raise ChmmError("training split is empty")
    dev = view.split("dev")
    use_dev = len(dev) > 0 and all(r.sentence.gold is not None for r in dev.records)

    if model is None:
        model = build_model(corpus.label_set, corpus.source_names, d_emb, config)
        init = _mixed_init_stats(corpus.split("train"), train, child_rng(config.seed, 3))
        pretrain_init(model, view, init)

    log = TrainingLog()
    best = model.net.copy()
    best_f1 = -np.inf
    stale = 0
    shuffle_rng = child_rng(config.seed, 4)
    for epoch in range(config.epochs):
        started = time.perf_counter()
        mean_q = generalized_em_epoch(model, view, shuffle_rng)
        dev_f1 = None
        if use_dev:
            _, _, marginal = decode(model, dev)
            dev_f1 = corpus_entity_f1(marginal, dev).f1
        log.add(EpochStats(epoch, mean_q, dev_f1, time.perf_counter() - started))
        score = dev_f1 if use_dev else mean_q
        if score > best_f1:
            best_f1, stale = score, 0
            best = model.net.copy()
            log.selected_epoch = epoch
        else:
            stale += 1
            if stale >= config.patience:
                break
    model.net = best
    return model, log


def save_chmm(model: ChmmModel, path: str | Path) -> None:
    model.net.save(path, extra={
        "labels": list(model.label_set.labels),
        "sources": list(model.source_names),
        "d_emb": model.d_emb,
        "config": asdict(model.config),
    })


def load_chmm(path: str | Path) -> ChmmModel:
    net, extra = AffineStack.load(path)
    config = ChmmConfig(**extra["config"])
    return ChmmModel(net, LabelSet(tuple(extra["labels"])),
                     tuple(extra["sources"]), extra["d_emb"], config)
