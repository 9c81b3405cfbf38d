"""Fixed-capacity replay store filled by reservoir sampling (Algorithm R)."""

import numpy as np

from . import kernels
from .errors import ArgumentError, EmptyBufferError


class ReplayBuffer:
    def __init__(self, capacity, input_dim):
        if capacity < 0:
            raise ArgumentError("capacity must be >= 0")
        self.capacity = int(capacity)
        self.features = np.zeros((self.capacity, int(input_dim)))
        self.labels = np.zeros(self.capacity, dtype=np.int64)
        self.tasks = np.zeros(self.capacity, dtype=np.int64)
        self.seen_count = 0

    def __len__(self):
        return min(self.seen_count, self.capacity)

    @property
    def items(self):
        n = len(self)
        return self.features[:n], self.labels[:n], self.tasks[:n]

    def extend(self, features, labels, task_id, rng):
        """Offer a stream of items in order, one Algorithm-R step each."""
        features = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        n = features.shape[0]
        if n == 0:
            return self
        seen = self.seen_count + np.arange(n)
        # j ~ U{0..seen}; the item replaces slot j when j < capacity
        draws = rng.integers(0, seen + 1)
        owner = kernels.reservoir_owner(draws.astype(np.int64), self.seen_count,
                                        self.capacity, np.full(self.capacity, -1, np.int64))
        slots = np.flatnonzero(owner >= 0)
        src = owner[slots]
        self.features[slots] = features[src]
        self.labels[slots] = labels[src]
        self.tasks[slots] = task_id
        self.seen_count += n
        return self

    def state_arrays(self, prefix="buffer."):
        f, y, t = self.items
        return {prefix + "features": f, prefix + "labels": y, prefix + "tasks": t,
                prefix + "meta": np.array([self.capacity, self.seen_count])}

    @classmethod
    def from_state_arrays(cls, arrays, prefix="buffer."):
        capacity, seen = (int(v) for v in arrays[prefix + "meta"])
        f = arrays[prefix + "features"]
        buf = cls(capacity, f.shape[1])
        n = f.shape[0]
        buf.features[:n] = f
        buf.labels[:n] = arrays[prefix + "labels"].astype(np.int64)
        buf.tasks[:n] = arrays[prefix + "tasks"].astype(np.int64)
        buf.seen_count = seen
        return buf


def reservoir_insert(buffer, item, rng):
    """Offer a single ``(features, label, task_id)`` item."""
    features, label, task_id = item
    return buffer.extend(np.asarray(features, dtype=np.float64)[None, :], [label], task_id, rng)


def sample_batch(buffer, n, rng):
    """``n`` stored items, without replacement when possible.

    Returns ``(features, labels, tasks)``; raises EmptyBufferError when empty.
    """
    size = len(buffer)
    if size == 0:
        raise EmptyBufferError("replay buffer is empty")
    if n > size:
        idx = rng.integers(0, size, n)
    else:
        idx = rng.choice(size, n, replace=False)
    return buffer.features[idx], buffer.labels[idx], buffer.tasks[idx]
