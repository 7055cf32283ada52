"""Alphabets, label sequences, probability grids and the CTC collapse machinery.

Grids are plain ``numpy`` arrays of shape ``(H, W, Q)``; label sequences are
tuples of non-blank class indices. Class 0 is always the blank.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

BLANK = 0

# Entries are clamped to this before taking logs.
PROB_FLOOR = 1e-30

# Tolerance on per-cell sums for a validated grid.
SUM_TOL = 1e-9


@dataclass(frozen=True)
class Alphabet:
    """Class table: index 0 is blank, ``symbols[k - 1]`` is class ``k``."""

    symbols: str = "0123456789"
    blank_char: str = "-"
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.symbols) < 1:
            raise ValueError("alphabet needs at least one non-blank symbol")
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError(f"duplicate symbols in alphabet {self.symbols!r}")
        if self.blank_char in self.symbols:
            raise ValueError("blank character collides with a symbol")
        object.__setattr__(
            self, "_index", {c: k + 1 for k, c in enumerate(self.symbols)}
        )

    @property
    def size(self) -> int:
        return len(self.symbols) + 1

    @property
    def blank_index(self) -> int:
        return BLANK

    def encode(self, text: str) -> tuple[int, ...]:
        try:
            return tuple(self._index[c] for c in text)
        except KeyError as exc:
            raise ValueError(f"symbol {exc.args[0]!r} not in alphabet") from None

    def decode(self, labels: Iterable[int]) -> str:
        out = []
        for k in labels:
            if k == BLANK:
                out.append(self.blank_char)
            elif 1 <= k < self.size:
                out.append(self.symbols[k - 1])
            else:
                raise ValueError(f"class index {k} out of range [0, {self.size - 1}]")
        return "".join(out)


def as_label(labels: Sequence[int]) -> tuple[int, ...]:
    """Validate a label sequence: non-empty, no blanks."""
    label = tuple(int(k) for k in labels)
    if not label:
        raise ValueError("label sequence must be non-empty")
    if any(k == BLANK for k in label):
        raise ValueError(f"label sequence {label} contains the blank index")
    if any(k < 0 for k in label):
        raise ValueError(f"label sequence {label} contains a negative index")
    return label


def extend_label(labels: Sequence[int]) -> np.ndarray:
    """Interleave blanks: ``l -> (b, l1, b, l2, ..., b)`` of length ``2|l| + 1``."""
    label = as_label(labels)
    ext = np.full(2 * len(label) + 1, BLANK, dtype=np.int64)
    ext[1::2] = label
    return ext


def collapse(path: Iterable[int], alphabet: Alphabet | None = None) -> tuple[int, ...]:
    """Merge adjacent repeats then drop blanks. The result may be empty."""
    out = []
    prev = None
    q = alphabet.size if alphabet is not None else None
    for k in path:
        k = int(k)
        if k < 0 or (q is not None and k >= q):
            raise ValueError(f"class index {k} out of range")
        if k != prev and k != BLANK:
            out.append(k)
        prev = k
    return tuple(out)


def softmax_grid(z: np.ndarray) -> np.ndarray:
    """Per-cell softmax over the last axis."""
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("logits grid contains non-finite entries")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class GridDiagnostics:
    bad_sums: list = field(default_factory=list)  # ((i, j), deviation)
    min_entry: float = float("nan")
    nonfinite: list = field(default_factory=list)  # (i, j, k)
    negative: list = field(default_factory=list)  # (i, j, k)
    shape_error: str | None = None

    @property
    def ok(self) -> bool:
        return not (self.bad_sums or self.nonfinite or self.negative or self.shape_error)

    def __bool__(self):
        # Truthy when something was flagged, so ``if validate_grid(x):`` reads naturally.
        return not self.ok

    def summary(self) -> str:
        if self.ok:
            return "grid ok"
        parts = []
        if self.shape_error:
            parts.append(self.shape_error)
        if self.nonfinite:
            parts.append(f"{len(self.nonfinite)} non-finite entries, first at {self.nonfinite[0]}")
        if self.negative:
            parts.append(f"{len(self.negative)} negative entries, first at {self.negative[0]}")
        if self.bad_sums:
            (i, j), dev = self.bad_sums[0]
            parts.append(f"{len(self.bad_sums)} cells off-simplex, first at ({i}, {j}) by {dev:.3g}")
        return "; ".join(parts)


def validate_grid(x: np.ndarray, tol: float = SUM_TOL) -> GridDiagnostics:
    """Report problems with a probability grid without raising."""
    x = np.asarray(x, dtype=np.float64)
    diag = GridDiagnostics()
    if x.ndim != 3 or min(x.shape) < 1:
        diag.shape_error = f"expected a non-empty (H, W, Q) array, got shape {x.shape}"
        return diag
    finite = np.isfinite(x)
    diag.nonfinite = [tuple(int(v) for v in idx) for idx in np.argwhere(~finite)]
    diag.negative = [tuple(int(v) for v in idx) for idx in np.argwhere(finite & (x < 0))]
    if finite.any():
        diag.min_entry = float(x[finite].min())
    dev = np.abs(x.sum(axis=-1) - 1.0)
    for i, j in np.argwhere(np.isfinite(dev) & (dev > tol)):
        diag.bad_sums.append(((int(i), int(j)), float(dev[i, j])))
    return diag


def log_grid(x: np.ndarray) -> np.ndarray:
    """Elementwise log with the probability floor applied."""
    return np.log(np.maximum(np.asarray(x, dtype=np.float64), PROB_FLOOR))
