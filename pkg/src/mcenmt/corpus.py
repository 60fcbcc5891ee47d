"""Vocabularies, numericalization, length filtering and padded batches."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numerics import Rng

PAD, BOS, EOS, OOV = 0, 1, 2, 3
RESERVED = ("<pad>", "<s>", "</s>", "OOV")


class Vocabulary:
    """Frequency-ranked token/id map with reserved PAD, BOS, EOS and OOV ids."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        self.itos = tokens
        self.stoi = {}
        for i, tok in enumerate(tokens):
            if tok in self.stoi:
                raise ValueError(f"duplicate vocabulary entry {tok!r}")
            self.stoi[tok] = i

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def lookup(self, token: str) -> int:
        return self.stoi.get(token, OOV)

    def render(self, idx: int) -> str:
        return self.itos[idx]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.lookup(t) for t in tokens]

    def decode(self, ids: Iterable[int], strip: bool = True) -> list[str]:
        """Map ids back to tokens, stopping at EOS and skipping PAD/BOS when ``strip``."""
        out = []
        for i in ids:
            i = int(i)
            if strip and i == EOS:
                break
            if strip and i in (PAD, BOS):
                continue
            out.append(self.itos[i])
        return out

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.itos), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


def build_vocab(streams: Iterable[Sequence[str]], max_size: int = 30000) -> Vocabulary:
    """Keep the ``max_size - 4`` most frequent tokens; ties go lexicographic."""
    if max_size < 4:
        raise ValueError("max_size must leave room for the 4 reserved tokens")
    counts = Counter()
    for sent in streams:
        counts.update(sent)
    for tok in RESERVED:
        counts.pop(tok, None)
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary(list(RESERVED) + [tok for tok, _ in ranked[: max_size - 4]])


def tokenize(line: str) -> list[str]:
    return line.split()


def read_parallel(src_path, tgt_path) -> list[tuple[list[str], list[str]]]:
    src = Path(src_path).read_text(encoding="utf-8").splitlines()
    tgt = Path(tgt_path).read_text(encoding="utf-8").splitlines()
    if len(src) != len(tgt):
        raise ValueError(f"line count mismatch: {src_path} has {len(src)}, {tgt_path} has {len(tgt)}")
    return [(tokenize(s), tokenize(t)) for s, t in zip(src, tgt)]


def write_lines(path, sentences: Iterable[Sequence[str]]) -> None:
    Path(path).write_text("".join(" ".join(s) + "\n" for s in sentences), encoding="utf-8")


def filter_pairs(pairs, max_len: int):
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    return [(s, t) for s, t in pairs if len(s) <= max_len and len(t) <= max_len]


@dataclass
class ParallelBatch:
    src: np.ndarray        # (B, n) int ids, PAD beyond each length
    src_mask: np.ndarray   # (B, n) 0/1 floats
    tgt: np.ndarray        # (B, T) int ids, EOS-terminated then PAD
    tgt_mask: np.ndarray   # (B, T)
    src_lengths: np.ndarray
    tgt_lengths: np.ndarray

    def __len__(self) -> int:
        return self.src.shape[0]

    @property
    def tgt_in(self) -> np.ndarray:
        """Teacher-forcing decoder inputs: BOS followed by the gold prefix."""
        out = np.empty_like(self.tgt)
        out[:, 0] = BOS
        out[:, 1:] = self.tgt[:, :-1]
        return out


def pad_ids(seqs: Sequence[Sequence[int]], dtype=np.float64) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    width = max(1, int(lengths.max()))
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    mask = (np.arange(width)[None, :] < lengths[:, None]).astype(dtype)
    return ids, mask, lengths


def make_batch(pairs, src_vocab: Vocabulary, tgt_vocab: Vocabulary, dtype=np.float64) -> ParallelBatch:
    srcs = [src_vocab.encode(s) for s, _ in pairs]
    if any(len(s) == 0 for s in srcs):
        raise ValueError("empty source sentence")
    tgts = [tgt_vocab.encode(t) + [EOS] for _, t in pairs]
    src, src_mask, src_len = pad_ids(srcs, dtype)
    tgt, tgt_mask, tgt_len = pad_ids(tgts, dtype)
    return ParallelBatch(src, src_mask, tgt, tgt_mask, src_len, tgt_len)


def make_batches(pairs, src_vocab: Vocabulary, tgt_vocab: Vocabulary, batch_size: int,
                 rng: Rng | None = None, dtype=np.float64) -> list[ParallelBatch]:
    """Numericalize, shuffle (when ``rng`` is given) and pad into batches.

    The final batch may be short.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    if not pairs:
        raise ValueError("no sentence pairs to batch")
    order = rng.permutation(len(pairs)) if rng is not None else np.arange(len(pairs))
    return [make_batch([pairs[i] for i in order[k : k + batch_size]], src_vocab, tgt_vocab, dtype)
            for k in range(0, len(pairs), batch_size)]
