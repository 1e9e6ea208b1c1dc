"""Synthetic sequence tasks with a controllable difficulty ladder.

Every task family produces fixed-layout token sequences with a fixed set
of answered positions, so loss and accuracy are computed over the same
positions for every example of a given (family, difficulty) pair.

* ``modular_sum``: K operand tokens interleaved with their running total
  mod vocab; the answered positions are the running totals, the last of
  which is the full sum. Exposing the partial sums turns the task into a
  composition of pairwise mod-additions, which a desk-scale model can
  actually learn, while the final target stays "sum of the K operands".
* ``object_tracking``: K objects start at slot i = object id, K pairwise
  slot swaps are applied, and the sequence ends with a query object and
  its final slot (the single answered position). The query object is
  uniform, so the answer slot is uniform for any swap pattern.
* ``copy``: K data tokens, a separator, then the same K tokens echoed;
  the echo positions are answered.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .seeding import rng_for

__all__ = ["TaskSpec", "TaskData", "Batch", "generate_task", "encode_tracking"]

FAMILIES = ("modular_sum", "object_tracking", "copy")


@dataclass
class TaskSpec:
    family: str
    difficulty: int
    train_size: int
    eval_size: int
    seed: int

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"TaskSpec: unknown family {self.family!r}")
        if self.difficulty < 2:
            raise ValueError("TaskSpec: difficulty must be >= 2")
        if self.train_size < 1 or self.eval_size < 1:
            raise ValueError("TaskSpec: set sizes must be >= 1")


@dataclass
class Batch:
    tokens: np.ndarray            # (batch, length) int64
    answer_positions: np.ndarray  # indices of answered tokens within a sequence


@dataclass
class TaskData:
    """A fixed-layout dataset: token matrix plus the answered positions."""

    tokens: np.ndarray
    answer_positions: np.ndarray
    vocab: int

    def __post_init__(self):
        self.answer_positions = np.asarray(self.answer_positions, dtype=np.int64)

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def length(self) -> int:
        return self.tokens.shape[1]

    def labels(self) -> np.ndarray:
        """Answered tokens, shape (examples, answered positions)."""
        return self.tokens[:, self.answer_positions]

    def subset(self, rows: np.ndarray) -> "TaskData":
        return TaskData(self.tokens[rows], self.answer_positions, self.vocab)

    def batch(self, rows: np.ndarray) -> Batch:
        return Batch(self.tokens[rows], self.answer_positions)

    def full_batch(self) -> Batch:
        return Batch(self.tokens, self.answer_positions)


def encode_tracking(swaps: list[tuple[int, int]], query: int, k: int,
                    vocab: int) -> np.ndarray:
    """Token sequence for one object-tracking example.

    Objects are tokens 0..k-1, slots are tokens k..2k-1, and the query
    marker is vocab-1. Object i starts in slot i; each swap exchanges the
    contents of two slots; the final token is the query object's slot.
    """
    if vocab < 2 * k + 1:
        raise ValueError(
            f"object_tracking: vocab {vocab} too small for {k} objects "
            f"(needs >= {2 * k + 1})"
        )
    slot_of = list(range(k))   # slot_of[object] = current slot
    tokens: list[int] = []
    for a, b in swaps:
        tokens.extend([k + a, k + b])
        for obj in range(k):
            if slot_of[obj] == a:
                slot_of[obj] = b
            elif slot_of[obj] == b:
                slot_of[obj] = a
    tokens.append(vocab - 1)  # query marker
    tokens.append(query)
    tokens.append(k + slot_of[query])
    return np.asarray(tokens, dtype=np.int64)


def _gen_modular_sum(spec: TaskSpec, vocab: int, count: int,
                     rng: np.random.Generator) -> TaskData:
    k = spec.difficulty
    operands = rng.integers(0, vocab, size=(count, k))
    columns = [operands[:, 0:1]]
    positions = []
    running = operands[:, 0]
    for j in range(1, k):
        columns.append(operands[:, j:j + 1])
        running = (running + operands[:, j]) % vocab
        columns.append(running[:, None])
        positions.append(2 * j)
    tokens = np.concatenate(columns, axis=1).astype(np.int64)
    return TaskData(tokens, answer_positions=np.asarray(positions), vocab=vocab)


def _gen_copy(spec: TaskSpec, vocab: int, count: int,
              rng: np.random.Generator) -> TaskData:
    if vocab < 3:
        raise ValueError("copy: vocab must be >= 3 (data tokens plus separator)")
    k = spec.difficulty
    data = rng.integers(0, vocab - 1, size=(count, k))
    sep = np.full((count, 1), vocab - 1)
    tokens = np.concatenate([data, sep, data], axis=1).astype(np.int64)
    return TaskData(tokens, answer_positions=np.arange(k + 1, 2 * k + 1), vocab=vocab)


def _gen_tracking(spec: TaskSpec, vocab: int, count: int,
                  rng: np.random.Generator) -> TaskData:
    k = spec.difficulty
    if vocab < 2 * k + 1:
        raise ValueError(
            f"object_tracking: vocab {vocab} too small for {k} objects "
            f"(needs >= {2 * k + 1})"
        )
    rows = []
    for _ in range(count):
        swaps = []
        for _ in range(k):
            a, b = rng.choice(k, size=2, replace=False)
            swaps.append((int(a), int(b)))
        query = int(rng.integers(0, k))
        rows.append(encode_tracking(swaps, query, k, vocab))
    tokens = np.stack(rows)
    return TaskData(tokens, answer_positions=np.asarray([tokens.shape[1] - 1]),
                    vocab=vocab)


_GENERATORS = {
    "modular_sum": _gen_modular_sum,
    "copy": _gen_copy,
    "object_tracking": _gen_tracking,
}


def generate_task(spec: TaskSpec, vocab: int) -> tuple[TaskData, TaskData]:
    """Deterministic (train, eval) datasets for a task spec."""
    gen = _GENERATORS[spec.family]
    train = gen(spec, vocab, spec.train_size, rng_for(spec.seed, "train"))
    eval_ = gen(spec, vocab, spec.eval_size, rng_for(spec.seed, "eval"))
    return train, eval_
