"""Prediction: argmax grid, fixed grouping strategies, and strategy selection.

A grouping strategy reads the argmax matrix as an ordered collection of
segments (full rows or full columns), concatenates each group's segments and
collapses the result into a label sequence.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from msra.core import Alphabet, collapse
from msra.metrics import ned

KINDS = ("rows", "columns", "rows-and-columns", "merged-rows")


@dataclass(frozen=True)
class Segment:
    """Cells ``start..end`` (inclusive) of row or column ``index``."""

    axis: str  # "row" or "col"
    index: int
    start: int
    end: int

    def cells(self, M: np.ndarray) -> np.ndarray:
        line = M[self.index] if self.axis == "row" else M[:, self.index]
        return line[self.start : self.end + 1]


@dataclass(frozen=True)
class GroupingStrategy:
    kind: str = "rows"
    # merged-rows: empty rows tolerated inside one group
    window: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown strategy {self.kind!r}; expected one of {KINDS}")
        if self.window < 0:
            raise ValueError("window must be non-negative")

    def __str__(self):
        return self.kind if not self.window else f"{self.kind}(window={self.window})"


@dataclass
class DecodeResult:
    sequences: list = field(default_factory=list)
    provenance: list = field(default_factory=list)

    def strings(self, alphabet: Alphabet) -> list[str]:
        return [alphabet.decode(s) for s in self.sequences]


def argmax_grid(x: np.ndarray) -> np.ndarray:
    """Per-cell argmax; ties go to the smallest class index."""
    return np.asarray(x).argmax(axis=-1)


def _lines(M: np.ndarray, axis: str) -> list[Segment]:
    H, W = M.shape
    if axis == "row":
        return [Segment("row", r, 0, W - 1) for r in range(H)]
    return [Segment("col", c, 0, H - 1) for c in range(W)]


def _read(M, groups, alphabet):
    result = DecodeResult()
    for group in groups:
        cells = np.concatenate([seg.cells(M) for seg in group])
        seq = collapse(cells, alphabet)
        if seq:
            result.sequences.append(seq)
            result.provenance.append(list(group))
    return result


def _merged_row_groups(M, window, alphabet):
    groups, current, gap = [], [], 0
    for seg in _lines(M, "row"):
        if collapse(seg.cells(M), alphabet):
            current.append(seg)
            gap = 0
        elif current:
            gap += 1
            if gap > window:
                groups.append(current)
                current, gap = [], 0
    if current:
        groups.append(current)
    return groups


def decode_with_strategy(M, strategy: GroupingStrategy | str = "rows",
                         alphabet: Alphabet | None = None) -> DecodeResult:
    """Decode an argmax matrix; empty groups are dropped."""
    if isinstance(strategy, str):
        strategy = GroupingStrategy(strategy)
    M = np.asarray(M)
    if M.ndim != 2:
        raise ValueError(f"argmax grid must be 2-D, got shape {M.shape}")
    kind = strategy.kind
    if kind == "rows":
        return _read(M, [[s] for s in _lines(M, "row")], alphabet)
    if kind == "columns":
        return _read(M, [[s] for s in _lines(M, "col")], alphabet)
    if kind == "merged-rows":
        return _read(M, _merged_row_groups(M, strategy.window, alphabet), alphabet)
    rows = decode_with_strategy(M, "rows", alphabet)
    cols = decode_with_strategy(M, "columns", alphabet)
    out = DecodeResult()
    for seq, prov in zip(rows.sequences + cols.sequences, rows.provenance + cols.provenance):
        if seq not in out.sequences:
            out.sequences.append(seq)
            out.provenance.append(prov)
    return out


def strategy_score(decoded: Sequence[Sequence[Sequence]], targets: Sequence[Sequence[Sequence]]) -> float:
    """Mean over all ground-truth sequences of the best NED among that image's decodes."""
    total, count = 0.0, 0
    for preds, gts in zip(decoded, targets):
        for gt in gts:
            total += min((ned(gt, p) for p in preds), default=1.0)
            count += 1
    if count == 0:
        raise ValueError("no ground-truth sequences to score against")
    return total / count


def select_strategy(candidates: Sequence[GroupingStrategy | str], samples,
                    alphabet: Alphabet | None = None) -> tuple[GroupingStrategy, float]:
    """Pick the candidate with the lowest score over ``(argmax_grid, targets)`` samples.

    Ties go to the earlier candidate.
    """
    candidates = [GroupingStrategy(c) if isinstance(c, str) else c for c in candidates]
    samples = list(samples)
    if not candidates:
        raise ValueError("no candidate strategies")
    if not samples:
        raise ValueError("no samples to score on")
    targets = [[tuple(t) for t in gts] for _, gts in samples]
    best, best_score = None, None
    for cand in candidates:
        decoded = [decode_with_strategy(M, cand, alphabet).sequences for M, _ in samples]
        score = strategy_score(decoded, targets)
        if best_score is None or score < best_score:
            best, best_score = cand, score
    return best, best_score
