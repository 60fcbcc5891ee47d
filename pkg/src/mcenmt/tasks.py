"""Synthetic parallel corpora for smoke tests and ablations."""

from __future__ import annotations

from typing import NamedTuple

from .numerics import Rng

TASKS = ("copy", "reverse")


class TaskSplits(NamedTuple):
    train: list
    dev: list
    test: list


def make_task(name: str, n_pairs: int, rng: Rng, vocab: int = 20, min_len: int = 3, max_len: int = 10):
    """Random token sequences paired with a copy or the reversal of themselves."""
    if name not in TASKS:
        raise ValueError(f"unknown task {name!r}; choose from {TASKS}")
    if not 1 <= min_len <= max_len:
        raise ValueError("need 1 <= min_len <= max_len")
    words = [f"w{i}" for i in range(vocab)]
    pairs = []
    for _ in range(n_pairs):
        n = int(rng.integers(min_len, max_len + 1))
        src = [words[i] for i in rng.integers(0, vocab, n)]
        tgt = list(src) if name == "copy" else src[::-1]
        pairs.append((src, tgt))
    return pairs


def task_splits(name: str, seed: int, n_train: int = 1000, n_dev: int = 100, n_test: int = 100, **kw) -> TaskSplits:
    """Train/dev/test splits drawn from independent streams under ``seed``."""
    root = Rng(seed, 7919)
    return TaskSplits(make_task(name, n_train, root.child(0), **kw),
                      make_task(name, n_dev, root.child(1), **kw),
                      make_task(name, n_test, root.child(2), **kw))
