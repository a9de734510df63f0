"""Multi-source label denoising for sequence tagging.

Aggregates K noisy token-level annotation sources into a single label
sequence with a token-conditioned hidden Markov model trained by
generalized EM, optionally refined by alternating with a discriminative
tagger trained on the aggregator's soft labels.
"""

from seqdenoise.labels import EntitySet, LabelSet, EntitySpan, build_label_set

__all__ = ["EntitySet", "LabelSet", "EntitySpan", "build_label_set"]
__version__ = "0.1.0"
