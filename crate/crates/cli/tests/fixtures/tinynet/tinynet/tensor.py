import math
import random


class Matrix:
    """Row-major dense matrix with just enough operations for an MLP."""

    def __init__(self, rows):
        self.rows = [list(r) for r in rows]

    @property
    def shape(self):
        return (len(self.rows), len(self.rows[0]) if self.rows else 0)

    @classmethod
    def zeros(cls, n, m):
        return cls([[0.0] * m for _ in range(n)])

    @classmethod
    def randn(cls, n, m, rng=None, scale=0.1):
        rng = rng or random
        return cls([[rng.gauss(0.0, scale) for _ in range(m)] for _ in range(n)])

    def matmul(self, other):
        n, k = self.shape
        k2, m = other.shape
        if k != k2:
            raise ValueError(f"shape mismatch: {self.shape} @ {other.shape}")
        cols = list(zip(*other.rows))
        return Matrix([[sum(a * b for a, b in zip(row, col)) for col in cols] for row in self.rows])

    def add_row(self, bias):
        return Matrix([[a + b for a, b in zip(row, bias)] for row in self.rows])

    def apply(self, fn):
        return Matrix([[fn(x) for x in row] for row in self.rows])

    def transpose(self):
        return Matrix([list(c) for c in zip(*self.rows)])

    def reshape(self, n, m):
        flat = [x for row in self.rows for x in row]
        if n * m != len(flat):
            raise ValueError(f"shape mismatch: cannot view {len(flat)} values as ({n}, {m})")
        return Matrix([flat[i * m:(i + 1) * m] for i in range(n)])

    def mean(self):
        n, m = self.shape
        return sum(sum(r) for r in self.rows) / max(n * m, 1)

    def is_finite(self):
        return all(math.isfinite(x) for row in self.rows for x in row)
