"""Offline embedding extraction for the denoiser's corpus format.

Reads the line-delimited corpus file, runs a pretrained transformer encoder
over each sentence, pools subword vectors back to one vector per word token
(first-subword by default, mean optionally), and writes the binary embedding
file: magic ``SDEMB1``, little-endian u32 d_emb, then per sentence u32 id
length, id bytes, u32 T, and T*d_emb float32 values row-major.

Sentences whose subword length exceeds the encoder window are split at word
boundaries (never inside a gold entity span, mirroring the corpus
segmentation rule), encoded per segment, and re-concatenated.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

EMB_MAGIC = b"SDEMB1"


class ExtractorError(RuntimeError):
    pass


@dataclass
class ExtractorConfig:
    encoder: str                 # model name or local path
    pooling: str = "first"       # "first" or "mean" over subword vectors
    max_length: int = 512        # encoder window including special tokens
    batch_size: int = 16
    layer: int = -1              # hidden layer to pool from (-1: last)
    d_emb: int | None = None     # expected dimension, validated when set

    def __post_init__(self) -> None:
        if self.pooling not in ("first", "mean"):
            raise ExtractorError(f"unknown pooling rule {self.pooling!r}")
        if self.max_length < 8:
            raise ExtractorError("max_length is too small to fit any sentence")
        if self.batch_size < 1:
            raise ExtractorError("batch_size must be positive")


@dataclass
class _Sentence:
    id: str
    tokens: list[str]
    gold: list[str] | None


def read_corpus_sentences(corpus_path: str | Path) -> list[_Sentence]:
    """Minimal reader for the corpus format: ids, tokens, optional gold."""
    lines = [ln for ln in Path(corpus_path).read_text(encoding="utf-8").splitlines()
             if ln.strip()]
    if not lines:
        raise ExtractorError(f"{corpus_path}: empty corpus file")
    json.loads(lines[0])  # header; label set and sources are not needed here
    sentences = []
    for line in lines[1:]:
        raw = json.loads(line)
        sentences.append(_Sentence(raw["id"], list(raw["tokens"]), raw.get("gold")))
    return sentences


def _gold_inside_mask(sentence: _Sentence) -> np.ndarray:
    """inside[p] is True when cutting before position p splits a gold span."""
    inside = np.zeros(len(sentence.tokens) + 1, dtype=bool)
    if sentence.gold:
        for pos in range(1, len(sentence.gold)):
            label = sentence.gold[pos]
            if label.startswith("I-"):
                inside[pos] = True
    return inside


def _segment_words(sentence: _Sentence, piece_counts: list[int],
                   budget: int) -> list[tuple[int, int]]:
    """Word-index segments whose subword totals fit the encoder budget."""
    inside = _gold_inside_mask(sentence)
    bounds = []
    start = 0
    n_words = len(sentence.tokens)
    while start < n_words:
        end = start
        used = 0
        while end < n_words and used + piece_counts[end] <= budget:
            used += piece_counts[end]
            end += 1
        if end < n_words:
            shifted = end
            while shifted > start and inside[shifted]:
                shifted -= 1
            if shifted > start:
                end = shifted
        if end == start:
            raise ExtractorError(
                f"sentence {sentence.id!r}: cannot fit a segment within the "
                f"encoder window of {budget} subword positions")
        bounds.append((start, end))
        start = end
    return bounds


def _load_encoder(config: ExtractorConfig):
    import torch
    from transformers import AutoModel, AutoTokenizer

    tokenizer = AutoTokenizer.from_pretrained(config.encoder)
    model = AutoModel.from_pretrained(config.encoder)
    model.eval()
    torch.set_grad_enabled(False)
    limit = getattr(model.config, "max_position_embeddings", config.max_length)
    if config.max_length > limit:
        raise ExtractorError(
            f"max_length {config.max_length} exceeds the encoder's positional "
            f"limit {limit}")
    return tokenizer, model


def _pool(hidden: np.ndarray, word_ids: list[int | None], n_words: int,
          pooling: str, sid: str, tokens: list[str]) -> np.ndarray:
    groups: dict[int, list[np.ndarray]] = {}
    for pos, wid in enumerate(word_ids):
        if wid is not None:
            groups.setdefault(wid, []).append(hidden[pos])
    rows = np.empty((n_words, hidden.shape[1]), dtype=np.float32)
    for w in range(n_words):
        if w not in groups:
            raise ExtractorError(
                f"sentence {sid!r}: token {tokens[w]!r} produced no subwords")
        vecs = groups[w]
        rows[w] = vecs[0] if pooling == "first" else np.mean(vecs, axis=0)
    return rows


def extract(corpus_path: str | Path, config: ExtractorConfig,
            output_path: str | Path) -> Path:
    """Run the encoder over the corpus and write the binary embedding file."""
    import torch

    sentences = read_corpus_sentences(corpus_path)
    tokenizer, model = _load_encoder(config)
    specials = tokenizer.num_special_tokens_to_add()
    budget = config.max_length - specials

    # (sentence index, word range) units small enough for the window
    units: list[tuple[int, int, int]] = []
    for idx, sent in enumerate(sentences):
        counts = [len(tokenizer.tokenize(tok)) for tok in sent.tokens]
        for w, count in enumerate(counts):
            if count == 0:
                raise ExtractorError(
                    f"sentence {sent.id!r}: token {sent.tokens[w]!r} produced "
                    "no subwords")
            if count > budget:
                raise ExtractorError(
                    f"sentence {sent.id!r}: token {sent.tokens[w]!r} alone "
                    "exceeds the encoder window")
        if sum(counts) <= budget:
            units.append((idx, 0, len(sent.tokens)))
        else:
            units.extend((idx, lo, hi)
                         for lo, hi in _segment_words(sentences[idx], counts, budget))

    pieces: dict[int, list[np.ndarray]] = {}
    for lo in range(0, len(units), config.batch_size):
        chunk = units[lo : lo + config.batch_size]
        words = [sentences[idx].tokens[a:b] for idx, a, b in chunk]
        enc = tokenizer(words, is_split_into_words=True, padding=True,
                        truncation=True, max_length=config.max_length,
                        return_tensors="pt")
        out = model(**enc, output_hidden_states=True)
        hidden = out.hidden_states[config.layer].numpy()
        for row, (idx, a, b) in enumerate(chunk):
            word_ids = enc.word_ids(batch_index=row)
            rows = _pool(hidden[row], word_ids, b - a, config.pooling,
                         sentences[idx].id, sentences[idx].tokens[a:b])
            pieces.setdefault(idx, []).append(rows)

    d_emb = int(model.config.hidden_size)
    if config.d_emb is not None and config.d_emb != d_emb:
        raise ExtractorError(
            f"encoder dimension {d_emb} does not match declared d_emb "
            f"{config.d_emb}")

    output_path = Path(output_path)
    with output_path.open("wb") as fh:
        fh.write(EMB_MAGIC)
        fh.write(struct.pack("<I", d_emb))
        for idx, sent in enumerate(sentences):
            rows = np.concatenate(pieces[idx], axis=0)
            if rows.shape[0] != len(sent.tokens):
                raise ExtractorError(
                    f"sentence {sent.id!r}: produced {rows.shape[0]} rows for "
                    f"{len(sent.tokens)} tokens")
            raw = sent.id.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", rows.shape[0]))
            fh.write(np.ascontiguousarray(rows, dtype="<f4").tobytes())
    return output_path
