"""Padded-batch forward-backward, Viterbi, and Q used by the trainers.

Semantics match the per-sentence kernels exactly (cross-checked in tests).
Sentences are padded to the batch max length; padded steps carry uniform
observation rows and transitions so the recursions stay finite, and every
output is zeroed on padding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from seqdenoise.data import Record


@dataclass
class Batch:
    ids: list[str]
    x: np.ndarray        # (B, T, K, L), uniform rows on padding
    emb: np.ndarray | None  # (B, T, d), zeros on padding
    lengths: np.ndarray  # (B,)
    gold: list[tuple[int, ...] | None]

    @property
    def size(self) -> int:
        return len(self.ids)

    @property
    def max_len(self) -> int:
        return int(self.x.shape[1])


@dataclass
class BatchStats:
    gamma: np.ndarray   # (B, T, L)
    xi: np.ndarray      # (B, T, L, L)
    gamma0: np.ndarray  # (B, L)
    log_evidence: np.ndarray  # (B,)


def make_batch(records: list[Record], with_emb: bool = True) -> Batch:
    sizes = [len(r.sentence) for r in records]
    t_max = max(sizes)
    n_k, n_l = records[0].obs.values.shape[1:]
    x = np.full((len(records), t_max, n_k, n_l), 1.0 / n_l)
    emb = None
    if with_emb:
        d = records[0].emb.vectors.shape[1]
        emb = np.zeros((len(records), t_max, d))
    for b, rec in enumerate(records):
        x[b, : sizes[b]] = rec.obs.values
        if with_emb:
            emb[b, : sizes[b]] = rec.emb.vectors.astype(float)
    return Batch(
        ids=[r.sentence.id for r in records],
        x=x,
        emb=emb,
        lengths=np.asarray(sizes),
        gold=[r.sentence.gold for r in records],
    )


def batch_logphi(emit: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-source dot products and summed log observation likelihoods.

    Returns (per_source (B,T,L,K), log_phi (B,T,L)).
    """
    per_source = np.einsum("btijk,btkj->btik", emit, x)
    return per_source, np.log(per_source).sum(axis=3)


def forward_backward(pi: np.ndarray, trans: np.ndarray, log_phi: np.ndarray,
                     lengths: np.ndarray) -> BatchStats:
    n_batch, t_max, n_labels = log_phi.shape
    step_mask = np.arange(t_max)[None, :] < lengths[:, None]  # (B, T)

    shifts = log_phi.max(axis=2, keepdims=True)               # (B, T, 1)
    phi_scaled = np.exp(log_phi - shifts)                     # (B, T, L)

    alphas = np.zeros((n_batch, t_max, n_labels))
    log_ev = np.zeros(n_batch)
    a = np.broadcast_to(pi, (n_batch, n_labels)).copy()
    for t in range(t_max):
        active = step_mask[:, t]
        raw = phi_scaled[:, t] * np.einsum("bi,bij->bj", a, trans[:, t])
        norm = raw.sum(axis=1)
        log_ev += np.where(active, np.log(norm) + shifts[:, t, 0], 0.0)
        a_new = raw / norm[:, None]
        a = np.where(active[:, None], a_new, a)
        alphas[:, t] = np.where(active[:, None], a_new, 0.0)

    betas = np.zeros((n_batch, t_max, n_labels))
    b = np.ones((n_batch, n_labels))
    for t in range(t_max - 1, -1, -1):
        b = np.where((lengths - 1 == t)[:, None], 1.0, b)
        betas[:, t] = np.where(step_mask[:, t, None], b, 0.0)
        raw = np.einsum("bij,bj->bi", trans[:, t], phi_scaled[:, t] * b)
        b_new = raw / raw.max(axis=1, keepdims=True)
        prop = (t >= 1) & step_mask[:, t]
        b = np.where(prop[:, None], b_new, b)

    gamma = alphas * betas
    sums = gamma.sum(axis=2, keepdims=True)
    gamma = np.where(step_mask[:, :, None], gamma / np.where(sums > 0, sums, 1.0), 0.0)

    a_prev = np.concatenate(
        [np.broadcast_to(pi, (n_batch, 1, n_labels)), alphas[:, :-1]], axis=1
    )
    xi = trans * a_prev[:, :, :, None] * (phi_scaled * betas)[:, :, None, :]
    xi_sums = xi.sum(axis=(2, 3), keepdims=True)
    xi = np.where(step_mask[:, :, None, None],
                  xi / np.where(xi_sums > 0, xi_sums, 1.0), 0.0)

    gamma0 = pi * np.einsum("bij,bj->bi", trans[:, 0], phi_scaled[:, 0] * betas[:, 0])
    gamma0 /= gamma0.sum(axis=1, keepdims=True)

    return BatchStats(gamma=gamma, xi=xi, gamma0=gamma0, log_evidence=log_ev)


def batch_viterbi(pi: np.ndarray, trans: np.ndarray, log_phi: np.ndarray,
                  lengths: np.ndarray) -> list[list[int]]:
    """Most probable paths per sentence; ties break to the lowest index."""
    n_batch, t_max, n_labels = log_phi.shape
    step_mask = np.arange(t_max)[None, :] < lengths[:, None]
    log_trans = np.log(trans)

    score = log_phi[:, 0] + np.log(np.einsum("i,bij->bj", pi, trans[:, 0]))
    back = np.zeros((n_batch, t_max, n_labels), dtype=int)
    for t in range(1, t_max):
        cand = score[:, :, None] + log_trans[:, t]  # (B, from, to)
        back[:, t] = cand.argmax(axis=1)
        new_score = log_phi[:, t] + cand.max(axis=1)
        score = np.where(step_mask[:, t, None], new_score, score)

    rows = np.arange(n_batch)
    state = score.argmax(axis=1)
    path = np.zeros((n_batch, t_max), dtype=int)
    for t in range(t_max - 1, -1, -1):
        path[:, t] = np.where(step_mask[:, t], state, 0)
        step_back = back[rows, t, state]
        state = np.where((t >= 1) & (t <= lengths - 1), step_back, state)
    return [path[b, : lengths[b]].tolist() for b in range(n_batch)]


def batch_q(pi: np.ndarray, trans: np.ndarray, log_phi: np.ndarray,
            stats: BatchStats) -> np.ndarray:
    """Per-sentence Q values (z0 marginal treated as one-hot O)."""
    q = np.full(stats.log_evidence.shape[0], np.log(pi[0]))
    q += np.einsum("btij,btij->b", stats.xi, np.log(trans))
    q += np.einsum("bti,bti->b", stats.gamma, log_phi)
    return q
