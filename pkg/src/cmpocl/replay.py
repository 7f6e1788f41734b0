"""Replay memories for the experience-replay baselines.

Buffers hold raw stream items (whatever the trainer pushes, typically
``(sample_id, input)`` pairs), never embeddings.
"""

from __future__ import annotations

import random
from collections import deque
from typing import Any, Sequence


class ReservoirBuffer:
    """Uniform fixed-size sample of everything seen so far (Algorithm R)."""

    policy = "reservoir"

    def __init__(self, capacity: int, seed: int = 0, rng: random.Random | None = None):
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        self.capacity = capacity
        self.seen = 0
        self.slots: list[Any] = []
        self.rng = rng if rng is not None else random.Random(seed)

    def __len__(self):
        return len(self.slots)

    def insert(self, item) -> "ReservoirBuffer":
        if self.seen < self.capacity:
            self.slots.append(item)
        else:
            j = int(self.rng.random() * (self.seen + 1))  # uniform on [0, seen]
            if j < self.capacity:
                self.slots[j] = item
        self.seen += 1
        return self

    def sample(self, k: int, rng: random.Random | None = None) -> list:
        """``k`` items without replacement; a buffer smaller than ``k`` is
        returned whole and topped up with uniform draws with replacement."""
        rng = rng or self.rng
        if not self.slots or k <= 0:
            return []
        if k <= len(self.slots):
            return rng.sample(self.slots, k)
        extra = [self.slots[rng.randrange(len(self.slots))] for _ in range(k - len(self.slots))]
        return rng.sample(self.slots, len(self.slots)) + extra

    def state(self) -> dict:
        return {"policy": self.policy, "capacity": self.capacity, "seen": self.seen,
                "rng": _rng_state_to_json(self.rng.getstate())}


class FifoBuffer:
    """The most recent ``capacity`` items in arrival order."""

    policy = "fifo"

    def __init__(self, capacity: int, seed: int = 0):
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        self.capacity = capacity
        self.queue: deque = deque(maxlen=capacity)
        self.pushed = 0

    def __len__(self):
        return len(self.queue)

    @property
    def slots(self) -> list:
        return list(self.queue)

    def insert(self, item) -> "FifoBuffer":
        if self.capacity:
            self.queue.append(item)
        self.pushed += 1
        return self

    def sample(self, k: int | None = None, rng=None) -> list:
        """The whole buffer, oldest first: its size is the replay quota."""
        return list(self.queue)

    def state(self) -> dict:
        return {"policy": self.policy, "capacity": self.capacity, "seen": self.pushed}


def reservoir_insert(buf: ReservoirBuffer, item) -> ReservoirBuffer:
    return buf.insert(item)


def fifo_push(buf: FifoBuffer, item) -> FifoBuffer:
    return buf.insert(item)


def sample_buffer(buf, k: int, rng: random.Random | None = None) -> list:
    return buf.sample(k, rng)


def assemble_er_batch(stream_batch: Sequence, replay: Sequence) -> list:
    """Stream items first, then replayed ones."""
    return list(stream_batch) + list(replay)


def make_buffer(policy: str, capacity: int, seed: int = 0):
    if policy == "reservoir":
        return ReservoirBuffer(capacity, seed)
    if policy == "fifo":
        return FifoBuffer(capacity, seed)
    raise ValueError(f"unknown buffer policy {policy!r}")


def _rng_state_to_json(state):
    version, internal, gauss = state
    return [version, list(internal), gauss]


def rng_state_from_json(state):
    version, internal, gauss = state
    return (version, tuple(internal), gauss)
