import numpy as np
import pytest

from seqdenoise import alt, chmm, refiner, synth
from seqdenoise.data import (Corpus, EmbeddingSequence, Record, Sentence,
                             WeakObservationTensor)
from seqdenoise.labels import EntitySet, build_label_set

ONE_TYPE = build_label_set(EntitySet(("X",)))
N_LABELS = 3


def test_micro_early_stop_monotone_trace_picks_last():
    assert alt.micro_early_stop([0.1, 0.2, 0.3, 0.4]) == 3


def test_micro_early_stop_tie_picks_earliest():
    assert alt.micro_early_stop([1, 3, 2, 3]) == 1


def test_micro_early_stop_oracle_scan(rng):
    for _ in range(200):
        trace = [float(v) for v in rng.integers(0, 6, size=int(rng.integers(1, 12)))]
        got = alt.micro_early_stop(trace)
        best = max(trace)
        assert trace[got] == best
        assert all(v < best for v in trace[:got])


def test_micro_early_stop_patience_truncates():
    # patience 2: stops after two consecutive non-improvements (epochs 3, 4);
    # the later maximum at the end is never seen
    trace = [0.5, 0.4, 0.4, 0.9]
    assert alt.micro_early_stop(trace, patience=2) == 0
    assert alt.micro_early_stop(trace, patience=None) == 3


def test_micro_early_stop_empty_rejected():
    with pytest.raises(alt.AltError):
        alt.micro_early_stop([])


def test_early_stopper_patience_zero_fires_immediately():
    stopper = alt.EarlyStopper(patience=0)
    assert stopper.update(0.5) is True  # fires right after the first loop


def test_early_stopper_fires_after_patience_consecutive():
    stopper = alt.EarlyStopper(patience=2)
    assert stopper.update(0.5) is False
    assert stopper.update(0.6) is False   # improvement resets
    assert stopper.update(0.6) is False   # ties are not improvements
    assert stopper.update(0.5) is True
    assert stopper.best == 0.6


def test_early_stopper_scripted_patience5_max10():
    """The macro rule from the loop-exit contract: patience 5, max 10 loops,
    verified on scripted dev-score traces."""
    # strictly improving trace: never fires; the loop cap must stop it
    stopper = alt.EarlyStopper(patience=5)
    fired_at = None
    for loop in range(1, 11):
        if stopper.update(loop * 0.01):
            fired_at = loop
            break
    assert fired_at is None  # max_loops enforced by the driver instead

    # improvement at loop 3, then stagnation: fires exactly at loop 8
    stopper = alt.EarlyStopper(patience=5)
    scores = [0.5, 0.6, 0.7, 0.7, 0.65, 0.7, 0.69, 0.7, 0.8, 0.9]
    fired_at = None
    for loop, score in enumerate(scores, start=1):
        if stopper.update(score):
            fired_at = loop
            break
    assert fired_at == 8
    assert stopper.best == pytest.approx(0.7)


def tiny_alt_corpus(rng, n_train=8, n_dev=3, n_test=3, uniform_sources=False):
    names = ("a", "b")
    records = []
    centroids = rng.normal(size=(N_LABELS, 4)) * 2.0
    for split, count in (("train", n_train), ("dev", n_dev), ("test", n_test)):
        for idx in range(count):
            length = int(rng.integers(3, 7))
            gold = [0] * length
            pos = int(rng.integers(0, length))
            gold[pos] = 1
            if pos + 1 < length and rng.random() < 0.5:
                gold[pos + 1] = 2
            x = np.zeros((length, 2, N_LABELS))
            if uniform_sources:
                x[:] = 1.0 / N_LABELS
            else:
                for t, lab in enumerate(gold):
                    for k in range(2):
                        out = lab if rng.random() < 0.75 else 0
                        x[t, k, out] = 1.0
            emb = (centroids[gold] + 0.6 * rng.normal(size=(length, 4))).astype(np.float32)
            records.append(Record(
                Sentence(f"{split}-{idx}", tuple(f"w{t}" for t in range(length)),
                         tuple(gold)),
                WeakObservationTensor(x, names), EmbeddingSequence(emb), split))
    return Corpus(ONE_TYPE, names, tuple(records))


def fast_config(seed=0, max_loops=2, macro_patience=5):
    return alt.AltConfig(
        max_loops=max_loops,
        macro_patience=macro_patience,
        seed=seed,
        chmm=chmm.ChmmConfig(seed=seed, epochs=2, batch_size=4, lr=0.01,
                             pretrain_epochs=2),
        refiner=refiner.RefinerConfig(seed=seed, epochs=4, batch_size=64),
    )


def test_phase1_uniform_sources_smoke(rng):
    corpus = tiny_alt_corpus(rng, uniform_sources=True)
    state = alt.run_phase1(corpus, fast_config())
    assert state.corpus.n_sources == 3
    assert state.corpus.source_names[-1] == "refiner"
    stages = {(m.model, m.stage) for m in state.table}
    assert ("chmm", "phase1") in stages and ("refiner", "phase1") in stages


def test_phase1_appends_source_and_keeps_originals(rng):
    corpus = tiny_alt_corpus(rng)
    before = {r.sentence.id: r.obs.values.copy() for r in corpus.records}
    state = alt.run_phase1(corpus, fast_config())
    for rec in state.corpus.records:
        orig = before[rec.sentence.id]
        assert np.array_equal(rec.obs.values[:, :2, :], orig)
        assert np.allclose(rec.obs.values[:, 2, :].sum(axis=1), 1.0, atol=1e-8)


def test_phase1_requires_all_splits(rng):
    corpus = tiny_alt_corpus(rng, n_dev=0)
    with pytest.raises(alt.AltError, match="dev"):
        alt.run_phase1(corpus, fast_config())


def test_phase2_respects_max_loops_and_overwrites(rng):
    corpus = tiny_alt_corpus(rng)
    config = fast_config(max_loops=2, macro_patience=99)
    state = alt.run_alt(corpus, config)
    assert state.loop == 2
    assert state.corpus.n_sources == 3  # still K+1, overwritten each loop
    loops = {m.loop for m in state.table}
    assert loops == {0, 1, 2}
    assert state.best is not None
    assert state.best.loop in (1, 2)


def test_phase2_patience_zero_single_loop(rng):
    corpus = tiny_alt_corpus(rng)
    config = fast_config(max_loops=10, macro_patience=0)
    state = alt.run_alt(corpus, config)
    assert state.loop == 1


def test_macro_best_is_running_maximum(rng):
    corpus = tiny_alt_corpus(rng)
    config = fast_config(max_loops=3, macro_patience=99)
    state = alt.run_alt(corpus, config)
    loop_best = {}
    for m in state.table:
        if m.loop >= 1:
            loop_best[m.loop] = max(loop_best.get(m.loop, -1.0), m.dev_f1)
    assert state.best.dev_f1 == pytest.approx(max(loop_best.values()))
    # macro-best dev F1 is the non-decreasing running max over loops
    running = -1.0
    for loop in sorted(loop_best):
        running = max(running, loop_best[loop])
    assert state.best.dev_f1 == pytest.approx(running)


def test_alt_deterministic_under_seed(rng):
    corpus = tiny_alt_corpus(rng)
    config = fast_config(seed=3, max_loops=2, macro_patience=99)
    state_a = alt.run_alt(corpus, config)
    state_b = alt.run_alt(corpus, config)
    table_a = [(m.stage, m.model, m.dev_f1, m.test_f1) for m in state_a.table]
    table_b = [(m.stage, m.model, m.dev_f1, m.test_f1) for m in state_b.table]
    assert table_a == table_b
    for k in state_a.chmm_model.net.params:
        assert np.array_equal(state_a.chmm_model.net.params[k],
                              state_b.chmm_model.net.params[k])
