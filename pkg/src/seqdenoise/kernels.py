"""Log-domain dynamic-programming kernels shared by the HMM and the CHMM.

Conventions (0-based arrays for tokens t = 0..T-1):
  * ``pi`` is the distribution of the fixed pre-sequence state z0.
  * ``trans[t]`` moves from the state at step t-1 (z0 for t=0) to step t.
  * ``emit[t][i][j][k]`` is the probability that source k observes label j
    when the hidden label at step t is i.
  * forward/backward recursions renormalize per step and accumulate log
    normalizers, so the evidence comes out of the forward pass for free.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EPSILON_PI = 1e-6  # floor for the near-one-hot initial distribution
_NORM_TOL = 1e-6


class KernelError(ValueError):
    """Contract violations in kernel inputs."""


def initial_distribution(n_labels: int, epsilon: float = EPSILON_PI) -> np.ndarray:
    """Near-one-hot distribution at O: pi[0] = 1 - (L-1)*eps, else eps."""
    pi = np.full(n_labels, epsilon)
    pi[0] = 1.0 - (n_labels - 1) * epsilon
    return pi


@dataclass
class TokenConditionedParams:
    """Per-token transition and emission tensors plus the z0 distribution."""

    pi: np.ndarray     # (L,)
    trans: np.ndarray  # (T, L, L)
    emit: np.ndarray   # (T, L, L, K)

    @property
    def n_steps(self) -> int:
        return self.trans.shape[0]

    @property
    def n_labels(self) -> int:
        return self.pi.shape[0]

    @property
    def n_sources(self) -> int:
        return self.emit.shape[3]

    def validate(self) -> None:
        for name, arr in (("pi", self.pi), ("trans", self.trans), ("emit", self.emit)):
            if not np.all(np.isfinite(arr)):
                raise KernelError(f"{name} has non-finite entries")
            if np.any(arr <= 0):
                raise KernelError(f"{name} has non-positive entries")
        if abs(self.pi.sum() - 1.0) > _NORM_TOL:
            raise KernelError("pi does not sum to 1")
        if np.any(np.abs(self.trans.sum(axis=2) - 1.0) > _NORM_TOL):
            raise KernelError("transition rows do not sum to 1")
        if np.any(np.abs(self.emit.sum(axis=2) - 1.0) > _NORM_TOL):
            raise KernelError("emission rows do not sum to 1")


@dataclass
class PosteriorStats:
    """Forward-backward output: smoothed marginals and pairwise expectations.

    ``xi`` has T slices; slice t couples the states at steps t-1 and t, so
    slice 0 involves the fixed z0 (its marginal is ``gamma0``).
    """

    gamma: np.ndarray   # (T, L)
    xi: np.ndarray      # (T, L, L)
    gamma0: np.ndarray  # (L,)
    log_evidence: float


def constant_token_params(pi: np.ndarray, trans: np.ndarray, emit: np.ndarray,
                          n_steps: int) -> TokenConditionedParams:
    """Tile time-constant transition/emission matrices across n_steps."""
    return TokenConditionedParams(
        pi=np.asarray(pi, dtype=float),
        trans=np.broadcast_to(trans, (n_steps,) + trans.shape).copy(),
        emit=np.broadcast_to(emit, (n_steps,) + emit.shape).copy(),
    )


def observation_loglik(emit_t: np.ndarray, x_t: np.ndarray, check: bool = False) -> np.ndarray:
    """log phi[i] = sum_k log sum_j emit[i,j,k] * x[k,j], for one token."""
    if check:
        if np.any(np.abs(emit_t.sum(axis=1) - 1.0) > _NORM_TOL):
            raise KernelError("emission rows not normalized")
        if np.any(np.abs(x_t.sum(axis=1) - 1.0) > _NORM_TOL):
            raise KernelError("observation rows not normalized")
    per_source = np.einsum("ijk,kj->ik", emit_t, x_t)  # (L, K)
    return np.log(per_source).sum(axis=1)


def _all_logphi(params: TokenConditionedParams, x: np.ndarray) -> np.ndarray:
    return np.stack([observation_loglik(params.emit[t], x[t])
                     for t in range(params.n_steps)])


def forward_pass(params: TokenConditionedParams, x: np.ndarray,
                 log_phi: np.ndarray | None = None) -> tuple[np.ndarray, float]:
    """Scaled forward recursion; returns per-step log filtered marginals and
    the accumulated log evidence."""
    n_steps = params.n_steps
    if n_steps == 0:
        raise KernelError("empty sequence")
    if log_phi is None:
        log_phi = _all_logphi(params, x)
    alphas, log_ev = _scaled_forward(params, log_phi)
    return np.log(alphas), log_ev


def _scaled_forward(params: TokenConditionedParams,
                    log_phi: np.ndarray) -> tuple[np.ndarray, float]:
    n_steps, n_labels = log_phi.shape
    alphas = np.empty((n_steps, n_labels))
    a = params.pi
    log_ev = 0.0
    for t in range(n_steps):
        shift = log_phi[t].max()
        raw = np.exp(log_phi[t] - shift) * (params.trans[t].T @ a)
        norm = raw.sum()
        log_ev += np.log(norm) + shift
        a = raw / norm
        alphas[t] = a
    return alphas, log_ev


def _scaled_backward(params: TokenConditionedParams,
                     log_phi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-step max-normalized betas plus their log scale factors."""
    n_steps, n_labels = log_phi.shape
    betas = np.empty((n_steps, n_labels))
    scales = np.empty(n_steps)
    b = np.ones(n_labels)
    betas[n_steps - 1] = b
    scales[n_steps - 1] = 0.0
    for t in range(n_steps - 1, 0, -1):
        shift = log_phi[t].max()
        raw = params.trans[t] @ (np.exp(log_phi[t] - shift) * b)
        scale = raw.max()
        b = raw / scale
        betas[t - 1] = b
        scales[t - 1] = scales[t] + shift + np.log(scale)
    return betas, scales


def backward_pass(params: TokenConditionedParams, x: np.ndarray,
                  log_phi: np.ndarray | None = None) -> np.ndarray:
    """log beta[t][i] = log p(x[t+1:] | z_t = i); base case log beta[T-1] = 0."""
    if params.n_steps == 0:
        raise KernelError("empty sequence")
    if log_phi is None:
        log_phi = _all_logphi(params, x)
    betas, scales = _scaled_backward(params, log_phi)
    return np.log(betas) + scales[:, None]


def posterior_stats(params: TokenConditionedParams, x: np.ndarray,
                    log_phi: np.ndarray | None = None) -> PosteriorStats:
    """Smoothed marginals gamma, pairwise expectations xi, and log evidence."""
    if params.n_steps == 0:
        raise KernelError("empty sequence")
    if log_phi is None:
        log_phi = _all_logphi(params, x)
    n_steps = params.n_steps

    alphas, log_ev = _scaled_forward(params, log_phi)
    betas, _ = _scaled_backward(params, log_phi)

    gamma = alphas * betas
    gamma /= gamma.sum(axis=1, keepdims=True)

    xi = np.empty((n_steps, params.n_labels, params.n_labels))
    for t in range(n_steps):
        a_prev = params.pi if t == 0 else alphas[t - 1]
        weighted = np.exp(log_phi[t] - log_phi[t].max()) * betas[t]
        slice_t = params.trans[t] * np.outer(a_prev, weighted)
        xi[t] = slice_t / slice_t.sum()

    shift0 = log_phi[0].max()
    back0 = params.trans[0] @ (np.exp(log_phi[0] - shift0) * betas[0])
    gamma0 = params.pi * back0
    gamma0 /= gamma0.sum()

    return PosteriorStats(gamma=gamma, xi=xi, gamma0=gamma0, log_evidence=log_ev)


def viterbi(params: TokenConditionedParams, x: np.ndarray,
            log_phi: np.ndarray | None = None) -> list[int]:
    """Most probable label sequence (z0 marginalized); ties break to the
    lowest label index."""
    if params.n_steps == 0:
        raise KernelError("empty sequence")
    if log_phi is None:
        log_phi = _all_logphi(params, x)
    n_steps, n_labels = log_phi.shape

    score = log_phi[0] + np.log(params.trans[0].T @ params.pi)
    back = np.zeros((n_steps, n_labels), dtype=int)
    for t in range(1, n_steps):
        cand = score[:, None] + np.log(params.trans[t])  # (from, to)
        back[t] = np.argmax(cand, axis=0)
        score = log_phi[t] + cand.max(axis=0)

    path = [0] * n_steps
    state = int(np.argmax(score))
    path[n_steps - 1] = state
    for t in range(n_steps - 1, 0, -1):
        state = int(back[t, state])
        path[t - 1] = state
    return path


def marginal_decode(stats: PosteriorStats) -> tuple[list[int], np.ndarray]:
    """Per-token argmax of the smoothed marginals, plus the marginals."""
    hard = [int(i) for i in np.argmax(stats.gamma, axis=1)]
    return hard, stats.gamma


def q_objective(params: TokenConditionedParams, stats: PosteriorStats,
                x: np.ndarray, log_phi: np.ndarray | None = None) -> float:
    """Expected complete-data log likelihood under fixed posterior statistics.

    The z0 marginal is treated as the one-hot O vector, making the initial
    term the constant log pi[0].
    """
    if log_phi is None:
        log_phi = _all_logphi(params, x)
    q = np.log(params.pi[0])
    q += float(np.sum(stats.xi * np.log(params.trans)))
    q += float(np.sum(stats.gamma * log_phi))
    return q
