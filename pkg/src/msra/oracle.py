"""Brute-force reference computations used to certify the lattice code.

Everything here runs in linear space with plain loops and deliberately shares
no code with :mod:`msra.lattice`.
"""

from __future__ import annotations

import itertools
import math
from collections import defaultdict
from typing import Callable, Sequence

import numpy as np

PATH_GUARD = 10_000
LABELLING_GUARD = 1_000_000


class GuardExceeded(ValueError):
    pass


def enumerate_paths(H: int, W: int) -> list[list[tuple[int, int]]]:
    """All monotone right/down paths from ``(0, 0)`` to ``(H-1, W-1)``."""
    if H < 1 or W < 1:
        raise ValueError("grid dimensions must be positive")
    count = math.comb(H + W - 2, H - 1)
    if count > PATH_GUARD:
        raise GuardExceeded(f"{count} paths exceeds the guard of {PATH_GUARD}")
    paths = []
    # choose which of the H+W-2 steps go down
    for downs in itertools.combinations(range(H + W - 2), H - 1):
        down_set = set(downs)
        i = j = 0
        cells = [(0, 0)]
        for step in range(H + W - 2):
            if step in down_set:
                i += 1
            else:
                j += 1
            cells.append((i, j))
        paths.append(cells)
    return paths


def path_weight(path, lambda1: float, lambda2: float) -> float:
    w = 1.0
    for (i0, j0), (i1, j1) in zip(path, path[1:]):
        w *= lambda1 if j1 == j0 + 1 else lambda2
    return w


def _b_map(labels) -> tuple:
    out = []
    prev = None
    for k in labels:
        if k != prev and k != 0:
            out.append(k)
        prev = k
    return tuple(out)


def ctc1d_forward(probs, label: Sequence[int]) -> float:
    """Textbook 1D CTC forward probability, linear space, blank = class 0."""
    probs = np.asarray(probs, dtype=np.float64)
    T = probs.shape[0]
    ext = [0]
    for k in label:
        ext += [int(k), 0]
    S = len(ext)
    repeats = sum(1 for a, b in zip(label, label[1:]) if a == b)
    if not label or len(label) + repeats > T:
        raise ValueError(f"label {tuple(label)} cannot be aligned to {T} steps")
    a = [0.0] * S
    a[0] = probs[0, ext[0]]
    a[1] = probs[0, ext[1]]
    for t in range(1, T):
        new = [0.0] * S
        for s in range(S):
            total = a[s]
            if s >= 1:
                total += a[s - 1]
            if s >= 2 and ext[s] != 0 and ext[s] != ext[s - 2]:
                total += a[s - 2]
            new[s] = total * probs[t, ext[s]]
        a = new
    return a[S - 1] + a[S - 2]


def ctc1d_enumerate(probs, label: Sequence[int]) -> float:
    """Sum over every labelling of the sequence that collapses to ``label``."""
    probs = np.asarray(probs, dtype=np.float64)
    T, Q = probs.shape
    if Q ** T > LABELLING_GUARD:
        raise GuardExceeded(f"{Q}^{T} labellings exceeds the guard")
    target = tuple(int(k) for k in label)
    total = 0.0
    for seq in itertools.product(range(Q), repeat=T):
        if _b_map(seq) == target:
            p = 1.0
            for t, k in enumerate(seq):
                p *= probs[t, k]
            total += p
    return total


def _cells(x, path):
    return np.array([x[i, j] for i, j in path])


def brute_force_sequence_prob(x, label, lambda1: float = 0.9, lambda2: float = 0.1) -> float:
    """Sum over monotone paths of (path weight) x (1D CTC probability along the path)."""
    x = np.asarray(x, dtype=np.float64)
    H, W, _ = x.shape
    label = tuple(int(k) for k in label)
    total = 0.0
    for path in enumerate_paths(H, W):
        total += path_weight(path, lambda1, lambda2) * ctc1d_forward(_cells(x, path), label)
    return total


def brute_force_total_prob(x, lambda1: float = 0.9, lambda2: float = 0.1, *, grouped: bool = False):
    """Total mass over all paths and per-cell labellings.

    With ``grouped=True`` returns ``(total, {collapsed_sequence: mass})``; the
    empty tuple key holds the all-blank mass.
    """
    x = np.asarray(x, dtype=np.float64)
    H, W, Q = x.shape
    paths = enumerate_paths(H, W)
    T = H + W - 1
    work = Q ** T * len(paths)
    if work > LABELLING_GUARD:
        raise GuardExceeded(f"{work} path-labellings exceeds the guard of {LABELLING_GUARD}")
    groups: dict[tuple, float] = defaultdict(float)
    total = 0.0
    for path in paths:
        w = path_weight(path, lambda1, lambda2)
        cells = _cells(x, path)
        for seq in itertools.product(range(Q), repeat=T):
            p = w
            for t, k in enumerate(seq):
                p *= cells[t, k]
            total += p
            if grouped:
                groups[_b_map(seq)] += p
    return (total, dict(groups)) if grouped else total


def finite_diff_grad(f: Callable[[np.ndarray], float], point, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function.

    Coordinates where either evaluation is non-finite come back as NaN.
    """
    point = np.array(point, dtype=np.float64)
    grad = np.empty_like(point)
    flat = point.reshape(-1)
    g = grad.reshape(-1)
    for n in range(flat.size):
        old = flat[n]
        flat[n] = old + eps
        hi = f(point)
        flat[n] = old - eps
        lo = f(point)
        flat[n] = old
        g[n] = (hi - lo) / (2 * eps) if np.isfinite(hi) and np.isfinite(lo) else np.nan
    return grad


def max_rel_error(analytic, numeric) -> float:
    """Largest ``|a - n| / max(|a|, |n|)`` over entries where either is non-zero."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if np.any(~np.isfinite(n)) or np.any(~np.isfinite(a)):
        return math.inf
    denom = np.maximum(np.abs(a), np.abs(n))
    nz = denom > 0
    if not nz.any():
        return 0.0
    return float(np.max(np.abs(a - n)[nz] / denom[nz]))


def random_grid(rng: np.random.Generator, H: int, W: int, Q: int) -> np.ndarray:
    """Random validated grid with entries bounded away from zero."""
    x = rng.uniform(0.05, 1.0, size=(H, W, Q))
    return x / x.sum(axis=-1, keepdims=True)


def random_label(rng: np.random.Generator, Q: int, max_len: int, max_cells: int) -> tuple[int, ...]:
    """Random non-empty label over classes ``1..Q-1`` that fits ``max_cells`` path cells."""
    while True:
        n = int(rng.integers(1, max_len + 1))
        label = tuple(int(k) for k in rng.integers(1, Q, size=n))
        repeats = sum(1 for a, b in zip(label, label[1:]) if a == b)
        if n + repeats <= max_cells:
            return label
