"""BIO label space: entity-type registry and the span <-> label-sequence codec.

Label index 0 is always O; each entity type contributes a B- and an I- label,
so the label set has size 2 * n_entity_types + 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

O_LABEL = "O"


class LabelSpaceError(ValueError):
    """Invalid entity sets, labels, or span sets."""


@dataclass(frozen=True)
class EntitySet:
    """Ordered registry of distinct entity-type names."""

    entity_types: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.entity_types:
            raise LabelSpaceError("entity set must be nonempty")
        seen = set()
        for name in self.entity_types:
            if not name:
                raise LabelSpaceError("entity-type names must be nonempty")
            if name in seen:
                raise LabelSpaceError(f"duplicate entity type: {name!r}")
            seen.add(name)

    def __len__(self) -> int:
        return len(self.entity_types)


@dataclass(frozen=True)
class LabelSet:
    """Ordered BIO labels with O pinned to index 0."""

    labels: tuple[str, ...]
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if not self.labels or self.labels[0] != O_LABEL:
            raise LabelSpaceError("label set must start with O")
        index = {name: i for i, name in enumerate(self.labels)}
        if len(index) != len(self.labels):
            raise LabelSpaceError("labels must be unique")
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise LabelSpaceError(f"unknown label: {label!r}") from None

    def name(self, idx: int) -> str:
        if not 0 <= idx < len(self.labels):
            raise LabelSpaceError(f"label index out of range: {idx}")
        return self.labels[idx]

    @property
    def entity_types(self) -> tuple[str, ...]:
        return tuple(lab[2:] for lab in self.labels if lab.startswith("B-"))

    def b_index(self, etype: str) -> int:
        return self.index(f"B-{etype}")

    def i_index(self, etype: str) -> int:
        return self.index(f"I-{etype}")


@dataclass(frozen=True, order=True)
class EntitySpan:
    """Typed token span, start inclusive, end exclusive."""

    type: str
    start: int
    end: int

    def __post_init__(self) -> None:
        if not 0 <= self.start < self.end:
            raise LabelSpaceError(f"bad span bounds: [{self.start}, {self.end})")


def build_label_set(entities: EntitySet) -> LabelSet:
    """O first, then a B-/I- pair per entity type in registry order."""
    labels = [O_LABEL]
    for etype in entities.entity_types:
        labels.append(f"B-{etype}")
        labels.append(f"I-{etype}")
    return LabelSet(tuple(labels))


def labels_to_spans(seq: list[int], labels: LabelSet) -> list[EntitySpan]:
    """Decode a label-index sequence into maximal entity spans.

    Malformed sequences are repaired leniently: an I-x with no open span of
    type x (preceded by O, sequence start, or a span of another type) opens
    a new span instead of being dropped.
    """
    spans: list[EntitySpan] = []
    start: int | None = None
    cur_type: str | None = None

    def close(pos: int) -> None:
        nonlocal start, cur_type
        if start is not None and cur_type is not None:
            spans.append(EntitySpan(cur_type, start, pos))
        start, cur_type = None, None

    for pos, idx in enumerate(seq):
        name = labels.name(idx)
        if name == O_LABEL:
            close(pos)
        elif name.startswith("B-"):
            close(pos)
            start, cur_type = pos, name[2:]
        else:  # I-x
            etype = name[2:]
            if cur_type != etype:
                close(pos)
                start, cur_type = pos, etype
    close(len(seq))
    return spans


def spans_to_labels(spans: list[EntitySpan], length: int, labels: LabelSet) -> list[int]:
    """Encode non-overlapping spans as BIO label indices; gaps become O."""
    seq = [0] * length
    for span in sorted(spans):
        if span.end > length:
            raise LabelSpaceError(f"span {span} exceeds sequence length {length}")
        for pos in range(span.start, span.end):
            if seq[pos] != 0:
                raise LabelSpaceError(f"overlapping span at token {pos}")
        seq[span.start] = labels.b_index(span.type)
        for pos in range(span.start + 1, span.end):
            seq[pos] = labels.i_index(span.type)
    return seq
