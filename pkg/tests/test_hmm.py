import numpy as np
import pytest

from seqdenoise import chmm as chmm_mod
from seqdenoise import hmm, kernels
from seqdenoise.data import (Corpus, EmbeddingSequence, Record, Sentence,
                             WeakObservationTensor)
from seqdenoise.labels import EntitySet, build_label_set
from seqdenoise.metrics import corpus_entity_f1, majority_vote
from seqdenoise.util import child_rng

from oracles import random_instance

ONE_TYPE = build_label_set(EntitySet(("X",)))  # O, B-X, I-X


def corpus_from_labels(label_seqs, labels=ONE_TYPE, n_sources=1, flip=None,
                       rng=None, split="train"):
    """One-hot corpus whose single source copies (or corrupts) the labels."""
    records = []
    names = tuple(f"s{i}" for i in range(n_sources))
    for idx, seq in enumerate(label_seqs):
        values = np.zeros((len(seq), n_sources, len(labels)))
        for k in range(n_sources):
            for t, lab in enumerate(seq):
                out = lab
                if flip is not None and rng is not None and rng.random() < flip:
                    out = int(rng.integers(len(labels)))
                values[t, k, out] = 1.0
        records.append(Record(
            Sentence(f"{split}-{idx}", tuple(f"w{t}" for t in range(len(seq))),
                     tuple(seq)),
            WeakObservationTensor(values, names), None, split))
    return Corpus(labels, names, tuple(records))


def test_init_statistics_single_perfect_source(rng):
    seqs = [[0, 1, 2, 0], [1, 2, 2, 0], [0, 0, 1, 0]]
    corpus = corpus_from_labels(seqs)
    stats = hmm.init_statistics(corpus, rng)
    # emission of the only source concentrates near identity
    for i in range(3):
        assert np.argmax(stats.emit[i, :, 0]) == i
    assert np.allclose(stats.emit.sum(axis=1), 1.0)


def test_init_statistics_all_o_concentrates_o(rng):
    corpus = corpus_from_labels([[0, 0, 0, 0]] * 5)
    stats = hmm.init_statistics(corpus, rng)
    assert np.argmax(stats.trans[0]) == 0
    assert stats.trans[0, 0] > 0.5


def test_init_statistics_counting_oracle(rng):
    """Recompute the add-one-smoothed statistics with independent loops."""
    seqs = [[0, 1, 2, 0, 1], [2, 2, 0, 1, 2], [0, 1, 1, 0, 0]]
    corpus = corpus_from_labels(seqs, n_sources=2)
    stats = hmm.init_statistics(corpus, child_rng(0, 0))

    mv_rng = child_rng(0, 0)
    n_labels = 3
    trans = np.ones((n_labels, n_labels))
    emit = np.ones((n_labels, n_labels, 2))
    for rec in corpus.records:
        mv = majority_vote(rec.obs.values, mv_rng)
        for a, b in zip(mv[:-1], mv[1:]):
            trans[a, b] += 1
        for t, lab in enumerate(mv):
            for k in range(2):
                for j in range(n_labels):
                    emit[lab, j, k] += rec.obs.values[t, k, j]
    trans /= trans.sum(axis=1, keepdims=True)
    emit /= emit.sum(axis=1, keepdims=True)
    assert np.array_equal(stats.trans, trans)
    assert np.array_equal(stats.emit, emit)


def test_m_step_one_hot_path_counts():
    """Degenerate posteriors along a single path make the update the
    empirical counts of that path."""
    n_labels, n_sources, n_steps = 3, 1, 4
    path = [0, 1, 2, 0]
    gamma = np.zeros((n_steps, n_labels))
    gamma[np.arange(n_steps), path] = 1.0
    xi = np.zeros((n_steps, n_labels, n_labels))
    prev = 0
    for t, lab in enumerate(path):
        xi[t, prev, lab] = 1.0
        prev = lab
    x = np.zeros((n_steps, n_sources, n_labels))
    x[np.arange(n_steps), 0, path] = 1.0
    stats = kernels.PosteriorStats(gamma, xi, np.eye(n_labels)[0], 0.0)
    params, flags = hmm.hmm_m_step([stats], [x], gamma[:1])
    assert not flags
    assert params.pi[path[0]] == pytest.approx(1.0, abs=1e-6)
    # transitions counted from the second step on: 0->1, 1->2, 2->0
    assert params.trans[0, 1] == pytest.approx(1.0, abs=1e-6)
    assert params.trans[1, 2] == pytest.approx(1.0, abs=1e-6)
    assert params.trans[2, 0] == pytest.approx(1.0, abs=1e-6)
    for i, j in ((0, 0), (1, 1), (2, 2)):
        assert params.emit[i, i, 0] == pytest.approx(1.0, abs=1e-6)


def test_m_step_dense_loop_oracle(rng):
    """Pooled update recomputed with independent dense loops, 1e-12."""
    n_labels, n_sources = 3, 2
    stats_list, xs = [], []
    for _ in range(4):
        n_steps = int(rng.integers(2, 6))
        gamma = rng.dirichlet(np.ones(n_labels), size=n_steps)
        xi = rng.dirichlet(np.ones(n_labels * n_labels),
                           size=n_steps).reshape(n_steps, n_labels, n_labels)
        x = rng.dirichlet(np.ones(n_labels), size=(n_steps, n_sources))
        stats_list.append(kernels.PosteriorStats(gamma, xi, gamma[0], 0.0))
        xs.append(x)
    gamma_1s = np.stack([s.gamma[0] for s in stats_list])
    params, _ = hmm.hmm_m_step(stats_list, xs, gamma_1s)

    pi = np.zeros(n_labels)
    for g in gamma_1s:
        pi += g / len(gamma_1s)
    trans_num = np.zeros((n_labels, n_labels))
    emit_num = np.zeros((n_labels, n_labels, n_sources))
    emit_den = np.zeros(n_labels)
    for st, x in zip(stats_list, xs):
        for t in range(1, st.gamma.shape[0]):
            for i in range(n_labels):
                for j in range(n_labels):
                    trans_num[i, j] += st.xi[t, i, j]
        for t in range(st.gamma.shape[0]):
            for i in range(n_labels):
                emit_den[i] += st.gamma[t, i]
                for k in range(n_sources):
                    for j in range(n_labels):
                        emit_num[i, j, k] += st.gamma[t, i] * x[t, k, j]
    trans = trans_num / trans_num.sum(axis=1, keepdims=True)
    emit = emit_num / emit_den[:, None, None]
    assert np.allclose(params.pi, pi / pi.sum(), atol=1e-12)
    assert np.allclose(params.trans, trans, atol=1e-12)
    assert np.allclose(params.emit, emit, atol=1e-12)


def test_m_step_zero_row_keeps_previous():
    n_labels = 3
    gamma = np.zeros((2, n_labels))
    gamma[:, 0] = 1.0  # state 1 and 2 never visited
    xi = np.zeros((2, n_labels, n_labels))
    xi[:, 0, 0] = 1.0
    x = np.zeros((2, 1, n_labels))
    x[:, 0, 0] = 1.0
    prev = hmm.HmmParams(
        pi=np.full(n_labels, 1 / 3),
        trans=np.full((n_labels, n_labels), 1 / 3),
        emit=np.full((n_labels, n_labels, 1), 1 / 3)).floored()
    stats = kernels.PosteriorStats(gamma, xi, gamma[0], 0.0)
    params, flags = hmm.hmm_m_step([stats], [x], gamma[:1], prev=prev)
    assert flags
    assert np.allclose(params.trans[1], prev.trans[1], atol=1e-9)
    assert np.allclose(params.emit[2], prev.emit[2], atol=1e-9)


def random_hmm(rng, n_labels=3, n_sources=2):
    return hmm.HmmParams(
        pi=rng.dirichlet(np.ones(n_labels)),
        trans=rng.dirichlet(np.ones(n_labels), size=n_labels),
        emit=rng.dirichlet(np.ones(n_labels),
                           size=(n_labels, n_sources)).transpose(0, 2, 1),
    ).floored()


def em_iteration(params, records):
    stats, xs, evidence = hmm.e_step(params, records)
    gamma_1s = np.stack([s.gamma[0] for s in stats])
    new_params, _ = hmm.hmm_m_step(stats, xs, gamma_1s, prev=params)
    return new_params, evidence


def make_records(rng, params, n_sentences=3):
    """Sample observation sequences from the generative model."""
    n_labels = params.pi.shape[0]
    n_sources = params.emit.shape[2]
    names = tuple(f"s{k}" for k in range(n_sources))
    records = []
    for idx in range(n_sentences):
        n_steps = int(rng.integers(2, 7))
        z = int(rng.choice(n_labels, p=params.pi))
        states = [z]
        for _ in range(n_steps - 1):
            z = int(rng.choice(n_labels, p=params.trans[z]))
            states.append(z)
        x = np.zeros((n_steps, n_sources, n_labels))
        for t, s in enumerate(states):
            for k in range(n_sources):
                j = int(rng.choice(n_labels, p=params.emit[s, :, k]))
                x[t, k, j] = 1.0
        records.append(Record(
            Sentence(f"r{idx}", tuple(f"w{t}" for t in range(n_steps)), None),
            WeakObservationTensor(x, names), None, "train"))
    return records


def test_em_monotonicity_100_instances():
    """One EM iteration never decreases total log evidence (small sample here;
    the acceptance suite runs 500)."""
    rng = np.random.default_rng(4242)
    for _ in range(100):
        truth = random_hmm(rng)
        records = make_records(rng, truth)
        start = random_hmm(rng)
        p1, ev0 = em_iteration(start, records)
        _, ev1 = em_iteration(p1, records)
        assert ev1 >= ev0 - 1e-9


def test_generate_then_fit_recovery():
    """EM initialized from majority-vote statistics recovers a well-separated
    generating model within total variation 0.05 per row at ~5000 tokens."""
    rng = np.random.default_rng(31)
    n_labels = 3
    emit_a = np.array([[0.90, 0.05, 0.05], [0.05, 0.90, 0.05], [0.05, 0.05, 0.90]])
    emit_b = np.array([[0.90, 0.06, 0.04], [0.04, 0.90, 0.06], [0.06, 0.04, 0.90]])
    truth = hmm.HmmParams(
        pi=np.array([0.5, 0.3, 0.2]),
        trans=np.array([[0.70, 0.20, 0.10], [0.20, 0.65, 0.15], [0.15, 0.25, 0.60]]),
        emit=np.stack([emit_a, emit_b], axis=2),
    ).floored()
    # ~5000 tokens across 800 sentences
    names = ("a", "b")
    records = []
    for idx in range(800):
        n_steps = int(rng.integers(4, 10))
        z = int(rng.choice(n_labels, p=truth.pi))
        states = [z]
        for _ in range(n_steps - 1):
            z = int(rng.choice(n_labels, p=truth.trans[z]))
            states.append(z)
        x = np.zeros((n_steps, 2, n_labels))
        for t, s in enumerate(states):
            for k in range(2):
                j = int(rng.choice(n_labels, p=truth.emit[s, :, k]))
                x[t, k, j] = 1.0
        records.append(Record(
            Sentence(f"g{idx}", tuple(f"w{t}" for t in range(n_steps)), None),
            WeakObservationTensor(x, names), None, "train"))
    labels = ONE_TYPE
    corpus = Corpus(labels, names, tuple(records))

    stats0 = hmm.init_statistics(corpus, child_rng(0, 1))
    params = hmm.HmmParams(stats0.first_freq, stats0.trans, stats0.emit).floored()
    for _ in range(40):
        params, _ = em_iteration(params, list(corpus.records))
    for i in range(n_labels):
        assert 0.5 * np.abs(params.trans[i] - truth.trans[i]).sum() < 0.05
        for k in range(2):
            assert 0.5 * np.abs(params.emit[i, :, k] - truth.emit[i, :, k]).sum() < 0.05
    assert 0.5 * np.abs(params.pi - truth.pi).sum() < 0.05


def test_monotone_evidence_trace_in_training():
    rng = np.random.default_rng(8)
    seqs = []
    for _ in range(30):
        n = int(rng.integers(3, 8))
        seqs.append([int(v) for v in rng.integers(0, 3, size=n)])
    corpus = corpus_from_labels(seqs, n_sources=2, flip=0.3, rng=rng)
    params, log = hmm.train_hmm(corpus, hmm.HmmConfig(max_epochs=10, seed=0))
    trace = log.objective_trace()
    assert all(b >= a - 1e-9 for a, b in zip(trace, trace[1:]))


def test_train_hmm_empty_split_rejected():
    corpus = corpus_from_labels([[0, 1]], split="dev")
    with pytest.raises(hmm.HmmError):
        hmm.train_hmm(corpus, hmm.HmmConfig())


def test_hmm_equivalence_with_constant_chmm(rng):
    """A CHMM whose net is forced to constant outputs must reproduce the
    constant-matrix kernel evaluation exactly (posteriors, evidence, paths)."""
    labels = ONE_TYPE
    n_labels, n_sources, d_emb, n_steps = 3, 2, 4, 6
    trans = rng.dirichlet(np.ones(n_labels), size=n_labels)
    emit = rng.dirichlet(np.ones(n_labels),
                         size=(n_labels, n_sources)).transpose(0, 2, 1)
    config = chmm_mod.ChmmConfig(seed=0)
    model = chmm_mod.build_model(labels, ("a", "b"), d_emb, config)
    for arr in model.net.params.values():
        arr[:] = 0.0
    model.net.params["trans.b"] = np.log(trans).reshape(-1)
    model.net.params["emit.b"] = np.log(emit).reshape(-1)

    emb = rng.normal(size=(n_steps, d_emb))
    token_params = chmm_mod.emit_params(model, emb)
    const = kernels.constant_token_params(
        kernels.initial_distribution(n_labels, config.epsilon_pi), trans, emit,
        n_steps)
    x = rng.dirichlet(np.ones(n_labels), size=(n_steps, n_sources))
    got = kernels.posterior_stats(token_params, x)
    want = kernels.posterior_stats(const, x)
    assert np.allclose(got.gamma, want.gamma, atol=1e-10)
    assert np.allclose(got.xi, want.xi, atol=1e-10)
    assert got.log_evidence == pytest.approx(want.log_evidence, abs=1e-10)
    assert kernels.viterbi(token_params, x) == kernels.viterbi(const, x)


def test_token_params_embedding_matches_classic_convention(rng):
    """The first-transition-row trick reproduces the classic chain whose pi
    is the first-token distribution (checked against enumeration)."""
    import itertools
    import math
    params = random_hmm(rng)
    n_labels = 3
    n_steps = 4
    x = rng.dirichlet(np.ones(n_labels), size=(n_steps, 2))
    token = hmm.token_params(params, n_steps)
    _, log_ev = kernels.forward_pass(token, x)

    total = 0.0
    for path in itertools.product(range(n_labels), repeat=n_steps):
        w = params.pi[path[0]]
        for t in range(1, n_steps):
            w *= params.trans[path[t - 1], path[t]]
        for t in range(n_steps):
            for k in range(2):
                w *= float(params.emit[path[t], :, k] @ x[t, k])
        total += w
    assert log_ev == pytest.approx(math.log(total), abs=1e-10)


def test_save_load_roundtrip(tmp_path, rng):
    params = random_hmm(rng)
    path = tmp_path / "hmm.json"
    hmm.save_hmm(params, ONE_TYPE.labels, ("a", "b"), path)
    loaded, labels, sources = hmm.load_hmm(path)
    assert labels == ONE_TYPE.labels and sources == ("a", "b")
    assert np.allclose(loaded.pi, params.pi)
    assert np.allclose(loaded.trans, params.trans)
    assert np.allclose(loaded.emit, params.emit)
