"""Class-incremental metrics computed from the lower-triangular accuracy matrix."""

import numpy as np

from .errors import StateError, UndefinedMetricError


class AccuracyMatrix:
    """``a[l][j]``: accuracy on task j after learning task l (0-based, j <= l).

    ``h[l]`` is control-set accuracy after task l and ``h0`` the frozen
    pretrained control accuracy.
    """

    def __init__(self, num_tasks, h0=None):
        self.T = int(num_tasks)
        self.a = np.full((self.T, self.T), np.nan)
        self.h = np.full(self.T, np.nan)
        self.h0 = h0

    @classmethod
    def from_rows(cls, rows, h=None, h0=None):
        """Build from ragged rows ``[[a00], [a10, a11], ...]``."""
        m = cls(len(rows), h0)
        for l, row in enumerate(rows):
            if len(row) != l + 1:
                raise StateError(f"row {l} has {len(row)} entries, expected {l + 1}")
            m.a[l, :l + 1] = row
        if h is not None:
            m.h[:len(h)] = h
        return m

    def set(self, l, j, value):
        if j > l:
            raise StateError(f"a[{l}][{j}] is above the diagonal")
        if not 0.0 <= value <= 1.0:
            raise StateError(f"accuracy {value} outside [0, 1]")
        self.a[l, j] = value

    def row(self, l):
        return self.a[l, :l + 1]

    def completed(self):
        """Number of fully filled rows from the top."""
        for l in range(self.T):
            if np.isnan(self.row(l)).any():
                return l
        return self.T

    def is_complete(self):
        return self.completed() == self.T

    def rows(self):
        return [self.row(l).tolist() for l in range(self.completed())]

    def to_dict(self):
        return {"a": self.rows(), "h": [float(v) for v in self.h[:self.completed()]],
                "h0": self.h0}


def _as_matrix(m):
    return m if isinstance(m, AccuracyMatrix) else AccuracyMatrix.from_rows(m)


def average_accuracy(matrix, upto=None):
    """Mean final-row accuracy; ``upto`` selects an intermediate row (0-based)."""
    m = _as_matrix(matrix)
    if upto is None:
        if not m.is_complete():
            raise StateError("accuracy matrix incomplete")
        upto = m.T - 1
    row = m.row(upto)
    if np.isnan(row).any():
        raise StateError(f"row {upto} incomplete")
    return float(row.mean())


def forgetting(matrix):
    """Mean over earlier tasks of best-previous minus final accuracy.

    Negative when the final model beats every earlier evaluation.
    """
    m = _as_matrix(matrix)
    if m.T < 2:
        raise UndefinedMetricError("forgetting needs at least two tasks")
    if not m.is_complete():
        raise StateError("accuracy matrix incomplete")
    last = m.T - 1
    drops = [m.a[j:last, j].max() - m.a[last, j] for j in range(last)]
    return float(np.mean(drops))
