"""Entity-level scoring and the non-learned reference aggregators."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from seqdenoise.data import Corpus
from seqdenoise.labels import LabelSet, labels_to_spans


class MetricError(ValueError):
    pass


@dataclass
class TypeScore:
    n_gold: int = 0
    n_pred: int = 0
    n_correct: int = 0

    @property
    def precision(self) -> float:
        return self.n_correct / self.n_pred if self.n_pred else 0.0

    @property
    def recall(self) -> float:
        return self.n_correct / self.n_gold if self.n_gold else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if (p + r) else 0.0


@dataclass
class ScoreReport:
    """Micro-averaged entity-level precision/recall/F1 with per-type counts.

    ``forced_precision`` serves the consensus oracle, whose precision is 1
    by construction even when it recalls nothing.
    """

    n_gold: int
    n_pred: int
    n_correct: int
    per_type: dict[str, TypeScore] = field(default_factory=dict)
    forced_precision: float | None = None

    @property
    def precision(self) -> float:
        if self.forced_precision is not None:
            return self.forced_precision
        return self.n_correct / self.n_pred if self.n_pred else 0.0

    @property
    def recall(self) -> float:
        return self.n_correct / self.n_gold if self.n_gold else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if (p + r) else 0.0

    def as_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "n_gold": self.n_gold,
            "n_pred": self.n_pred,
            "n_correct": self.n_correct,
            "per_type": {
                t: {"precision": s.precision, "recall": s.recall, "f1": s.f1,
                    "n_gold": s.n_gold, "n_pred": s.n_pred, "n_correct": s.n_correct}
                for t, s in sorted(self.per_type.items())
            },
        }


def entity_f1(pred: list[list[int]], gold: list[list[int]],
              labels: LabelSet) -> ScoreReport:
    """Exact span+type match, micro-averaged over all sentences."""
    if len(pred) != len(gold):
        raise MetricError(f"{len(pred)} predictions vs {len(gold)} gold sequences")
    report = ScoreReport(0, 0, 0)
    for p_seq, g_seq in zip(pred, gold):
        if len(p_seq) != len(g_seq):
            raise MetricError("prediction/gold length mismatch")
        p_spans = set(labels_to_spans(list(p_seq), labels))
        g_spans = set(labels_to_spans(list(g_seq), labels))
        hits = p_spans & g_spans
        report.n_gold += len(g_spans)
        report.n_pred += len(p_spans)
        report.n_correct += len(hits)
        for span_set, attr in ((g_spans, "n_gold"), (p_spans, "n_pred"), (hits, "n_correct")):
            for span in span_set:
                ts = report.per_type.setdefault(span.type, TypeScore())
                setattr(ts, attr, getattr(ts, attr) + 1)
    return report


def majority_vote(x: np.ndarray, rng: np.random.Generator) -> list[int]:
    """Per token, the label with the largest summed source probability;
    exact ties are broken uniformly at random with the supplied generator."""
    totals = x.sum(axis=1)  # (T, L)
    out = []
    for row in totals:
        best = np.flatnonzero(row == row.max())
        out.append(int(best[0] if len(best) == 1 else rng.choice(best)))
    return out


def source_hard_labels(x: np.ndarray, k: int) -> list[int]:
    """Argmax labels of one source (ties to the lowest index)."""
    return [int(i) for i in np.argmax(x[:, k, :], axis=1)]


def best_consensus(xs: list[np.ndarray], gold: list[list[int]],
                   labels: LabelSet) -> ScoreReport:
    """Oracle that keeps exactly the correct annotations present in any source.

    An entity counts as recalled iff at least one source's hard labels
    contain its exact span and type; precision is 1 by construction.
    """
    if len(xs) != len(gold):
        raise MetricError("observation/gold sentence count mismatch")
    report = ScoreReport(0, 0, 0, forced_precision=1.0)
    for x, g_seq in zip(xs, gold):
        if g_seq is None:
            raise MetricError("best consensus requires gold labels")
        g_spans = set(labels_to_spans(list(g_seq), labels))
        seen = set()
        for k in range(x.shape[1]):
            seen |= set(labels_to_spans(source_hard_labels(x, k), labels))
        hits = g_spans & seen
        report.n_gold += len(g_spans)
        report.n_pred += len(hits)
        report.n_correct += len(hits)
        for span in g_spans:
            ts = report.per_type.setdefault(span.type, TypeScore())
            ts.n_gold += 1
        for span in hits:
            ts = report.per_type.setdefault(span.type, TypeScore())
            ts.n_pred += 1
            ts.n_correct += 1
    return report


def corpus_entity_f1(pred: dict[str, list[int]], corpus: Corpus) -> ScoreReport:
    """Score id-keyed predictions against a corpus' gold labels."""
    preds, golds = [], []
    for rec in corpus.records:
        if rec.sentence.gold is None:
            raise MetricError(f"sentence {rec.sentence.id!r} has no gold labels")
        preds.append(pred[rec.sentence.id])
        golds.append(list(rec.sentence.gold))
    return entity_f1(preds, golds, corpus.label_set)
