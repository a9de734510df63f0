"""Discriminative refiner: a feed-forward token classifier over the frozen
embeddings, trained by KL divergence against the aggregator's soft labels.
Its probabilistic predictions rejoin the observation tensor as an extra
labeling source.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from seqdenoise.data import Corpus
from seqdenoise.labels import LabelSet
from seqdenoise.metrics import corpus_entity_f1
from seqdenoise.neural import AffineStack, sgd_step, softmax_label_axis
from seqdenoise.util import EpochStats, TrainingLog, child_rng

LOG_FLOOR = 1e-12


class RefinerError(RuntimeError):
    pass


@dataclass
class RefinerConfig:
    lr: float = 0.2
    epochs: int = 50
    batch_size: int = 1024  # tokens
    patience: int = 5
    hidden: int = -1        # -1: one hidden layer of width d_emb
    seed: int = 0
    # phase-II regime: half the learning rate, a fifth of the epochs,
    # full-batch descent
    phase2_lr_factor: float = 0.5
    phase2_epoch_factor: float = 0.2


@dataclass
class RefinerModel:
    net: AffineStack
    label_set: LabelSet
    d_emb: int


def build_refiner(label_set: LabelSet, d_emb: int, config: RefinerConfig) -> RefinerModel:
    hidden = d_emb if config.hidden < 0 else config.hidden
    net = AffineStack(d_emb, {"out": (len(label_set),)}, hidden=hidden,
                      rng=child_rng(config.seed, 11))
    return RefinerModel(net, label_set, d_emb)


def kl_divergence(target: np.ndarray, probs: np.ndarray) -> float:
    """Mean KL(target || probs) per token; 0*log 0 = 0, probs floored in the log."""
    safe = np.where(target > 0,
                    target * (np.log(np.maximum(target, LOG_FLOOR))
                              - np.log(np.maximum(probs, LOG_FLOOR))), 0.0)
    return float(safe.sum(axis=-1).mean())


def _forward_probs(model: RefinerModel, feats: np.ndarray) -> tuple[np.ndarray, dict]:
    outs, cache = model.net.forward(feats)
    return softmax_label_axis(outs["out"]), cache


def _token_matrix(corpus: Corpus, soft: dict[str, np.ndarray] | None,
                  ) -> tuple[np.ndarray, np.ndarray | None]:
    feats, targets = [], []
    for rec in corpus.records:
        if rec.emb is None:
            raise RefinerError(f"sentence {rec.sentence.id!r} has no embeddings")
        feats.append(rec.emb.vectors.astype(float))
        if soft is not None:
            y = np.asarray(soft[rec.sentence.id], dtype=float)
            if y.shape[0] != len(rec.sentence):
                raise RefinerError(f"sentence {rec.sentence.id!r}: soft-label "
                                   "length mismatch")
            targets.append(y)
    x_mat = np.concatenate(feats, axis=0)
    y_mat = np.concatenate(targets, axis=0) if soft is not None else None
    return x_mat, y_mat


def train_refiner(corpus: Corpus, soft_labels: dict[str, np.ndarray],
                  config: RefinerConfig, model: RefinerModel | None = None,
                  phase2: bool = False) -> tuple[RefinerModel, TrainingLog]:
    """Minimize KL(soft_labels || model output) over the train split.

    Passing an existing ``model`` warm-starts from its parameters; ``phase2``
    switches to the smaller-rate, fewer-epoch, full-batch regime.
    """
    train = corpus.split("train")
    if len(train) == 0:
        raise RefinerError("training split is empty")
    dev = corpus.split("dev")
    use_dev = len(dev) > 0 and all(r.sentence.gold is not None for r in dev.records)

    if model is None:
        model = build_refiner(corpus.label_set, corpus.d_emb, config)
    feats, targets = _token_matrix(train, soft_labels)
    n_tokens = feats.shape[0]

    lr = config.lr * (config.phase2_lr_factor if phase2 else 1.0)
    epochs = max(1, int(config.epochs * config.phase2_epoch_factor)) if phase2 \
        else config.epochs
    batch = n_tokens if phase2 else min(config.batch_size, n_tokens)

    rng = child_rng(config.seed, 12)
    log = TrainingLog()
    best = model.net.copy()
    best_score = -np.inf
    stale = 0
    for epoch in range(epochs):
        started = time.perf_counter()
        order = np.arange(n_tokens)
        if not phase2:
            rng.shuffle(order)
        epoch_loss = 0.0
        for lo in range(0, n_tokens, batch):
            idx = order[lo : lo + batch]
            probs, cache = _forward_probs(model, feats[idx])
            epoch_loss += kl_divergence(targets[idx], probs) * len(idx)
            grad_logits = (probs - targets[idx]) / len(idx)
            grads = model.net.backward({"out": -grad_logits}, cache)  # ascent on -KL
            sgd_step(model.net, grads, lr)
        epoch_loss /= n_tokens

        dev_f1 = None
        if use_dev:
            preds = predict_refiner(model, dev)
            hard = {sid: np.argmax(p, axis=1).tolist() for sid, p in preds.items()}
            dev_f1 = corpus_entity_f1(hard, dev).f1
        log.add(EpochStats(epoch, epoch_loss, dev_f1, time.perf_counter() - started))

        score = dev_f1 if use_dev else -epoch_loss
        if score > best_score:
            best_score, stale = score, 0
            best = model.net.copy()
            log.selected_epoch = epoch
        else:
            stale += 1
            if stale >= config.patience:
                break
    model.net = best
    return model, log


def predict_refiner(model: RefinerModel, corpus: Corpus) -> dict[str, np.ndarray]:
    """Per-sentence (T, L) probability rows; deterministic forward pass."""
    out: dict[str, np.ndarray] = {}
    for rec in corpus.records:
        if rec.emb is None:
            raise RefinerError(f"sentence {rec.sentence.id!r} has no embeddings")
        probs, _ = _forward_probs(model, rec.emb.vectors.astype(float))
        out[rec.sentence.id] = probs
    return out


def append_source(x: np.ndarray, refined: np.ndarray, base_k: int) -> np.ndarray:
    """Place the refiner's rows at source index base_k.

    The original base_k sources stay byte-identical; if the tensor already
    holds base_k + 1 sources, index base_k is overwritten instead of growing.
    """
    if refined.shape[0] != x.shape[0] or refined.shape[1] != x.shape[2]:
        raise RefinerError(f"refined labels {refined.shape} do not align with "
                           f"observations {x.shape}")
    if x.shape[1] == base_k:
        return np.concatenate([x, refined[:, None, :]], axis=1)
    if x.shape[1] == base_k + 1:
        out = x.copy()
        out[:, base_k, :] = refined
        return out
    raise RefinerError(f"tensor has {x.shape[1]} sources; expected {base_k} "
                       f"or {base_k + 1}")


def append_refiner_source(corpus: Corpus, preds: dict[str, np.ndarray],
                          base_k: int, name: str = "refiner") -> Corpus:
    tensors = {rec.sentence.id: append_source(rec.obs.values, preds[rec.sentence.id],
                                              base_k)
               for rec in corpus.records}
    names = corpus.source_names
    if len(names) == base_k:
        if name in names:
            raise RefinerError(f"source name {name!r} already present")
        names = names + (name,)
    return corpus.with_observations(tensors, source_names=names)


def save_refiner(model: RefinerModel, path: str | Path,
                 config: RefinerConfig | None = None) -> None:
    model.net.save(path, extra={
        "labels": list(model.label_set.labels),
        "d_emb": model.d_emb,
        "config": asdict(config) if config is not None else None,
    })


def load_refiner(path: str | Path) -> tuple[RefinerModel, RefinerConfig | None]:
    net, extra = AffineStack.load(path)
    model = RefinerModel(net, LabelSet(tuple(extra["labels"])), extra["d_emb"])
    config = RefinerConfig(**extra["config"]) if extra.get("config") else None
    return model, config
