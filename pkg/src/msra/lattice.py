"""Forward/backward recursions over the 2D probability grid, the set loss and its gradients.

All dynamic programming happens in log-space. A path runs from the top-left cell
to the bottom-right cell moving one cell right or one cell down per step; a
rightward step is weighted by ``lambda1`` and a downward step by ``lambda2``.
Along a path the usual CTC alignment rules apply to the blank-extended label.

``log_alpha[i, j, s]`` is the log-mass of path prefixes ending at ``(i, j)``
whose labelling collapses to the first ``s + 1`` extended symbols, including
the emission at ``(i, j)``. ``log_beta[i, j, s]`` is the log-mass of the
completions from ``(i, j)`` in state ``s`` to the end, excluding the emission
at ``(i, j)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import IO, Sequence

import numpy as np

from msra.core import BLANK, as_label, extend_label, log_grid, softmax_grid, validate_grid

NEG_INF = -np.inf

LOSS_VARIANTS = ("mean", "sum_log")


class InfeasibleTarget(ValueError):
    """A label cannot be emitted along any path of the grid."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class InvalidGrid(ValueError):
    pass


@dataclass(frozen=True)
class LambdaParams:
    """Transition weights: ``lambda1`` for rightward steps, ``lambda2`` for downward."""

    lambda1: float = 0.9
    lambda2: float = 0.1

    def __post_init__(self):
        if not (self.lambda1 >= 0 and self.lambda2 >= 0):
            raise ValueError(f"lambda weights must be non-negative, got {self}")
        if self.lambda1 + self.lambda2 <= 0:
            raise ValueError("lambda1 + lambda2 must be positive")

    @property
    def stochastic(self) -> bool:
        return math.isclose(self.lambda1 + self.lambda2, 1.0, rel_tol=0, abs_tol=1e-12)

    @property
    def log_weights(self) -> tuple[float, float]:
        with np.errstate(divide="ignore"):
            return float(np.log(self.lambda1)), float(np.log(self.lambda2))

    def swapped(self) -> "LambdaParams":
        return LambdaParams(self.lambda2, self.lambda1)


DEFAULT_LAMBDA = LambdaParams()


@dataclass
class LatticeResult:
    log_prob: float
    ext: np.ndarray
    log_alpha: np.ndarray | None = None
    log_beta: np.ndarray | None = None

    @property
    def prob(self) -> float:
        return math.exp(self.log_prob)


def feasible(i: int, j: int, s: int, len_ext: int, H: int, W: int) -> bool:
    """Whether extended position ``s`` can be matched at cell ``(i, j)``.

    False when too few cells remain to emit the rest of the label, or when
    ``s`` is beyond what ``i + j + 1`` cells can have matched so far.
    """
    return not (s < len_ext - 2 * (H - i + W - j - 1) or s > 2 * (i + j) + 1)


def _bounds(H: int, W: int, S: int) -> tuple[np.ndarray, np.ndarray]:
    ii, jj = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    lo = np.maximum(0, S - 2 * (H - ii + W - jj - 1))
    hi = np.minimum(S - 1, 2 * (ii + jj) + 1)
    return lo, hi


def min_path_cells(label: Sequence[int]) -> int:
    """Shortest alignment length: one cell per symbol plus a blank between repeats."""
    label = as_label(label)
    repeats = sum(1 for a, b in zip(label, label[1:]) if a == b)
    return len(label) + repeats


def check_feasible(label: Sequence[int], H: int, W: int, index=None) -> None:
    need = min_path_cells(label)
    have = H + W - 1
    if need > have:
        where = f" (sequence {index})" if index is not None else ""
        raise InfeasibleTarget(
            f"label{where} of length {len(label)} needs {need} cells per path; "
            f"a {H}x{W} grid offers {have}",
            index=index,
        )


def _prepare(x, label, validate, index=None):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise InvalidGrid(f"expected an (H, W, Q) grid, got shape {x.shape}")
    if validate:
        diag = validate_grid(x)
        if diag:
            raise InvalidGrid(diag.summary())
    elif not np.all(np.isfinite(x)) or np.any(x < 0):
        raise InvalidGrid("grid entries must be finite and non-negative")
    ext = extend_label(label)
    if ext.max() >= x.shape[2]:
        raise ValueError(f"label uses class {ext.max()} but the grid has Q={x.shape[2]}")
    check_feasible(label, x.shape[0], x.shape[1], index=index)
    return x, ext


def _skip_mask(ext: np.ndarray) -> np.ndarray:
    # skip[s]: the transition s-2 -> s is allowed
    skip = np.zeros(len(ext), dtype=bool)
    skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    return skip


def _advance(prev: np.ndarray, skip: np.ndarray) -> np.ndarray:
    out = prev.copy()
    out[1:] = np.logaddexp(out[1:], prev[:-1])
    out[2:] = np.where(skip[2:], np.logaddexp(out[2:], prev[:-2]), out[2:])
    return out


def _retreat(nxt: np.ndarray, skip: np.ndarray) -> np.ndarray:
    out = nxt.copy()
    out[:-1] = np.logaddexp(out[:-1], nxt[1:])
    out[:-2] = np.where(skip[2:], np.logaddexp(out[:-2], nxt[2:]), out[:-2])
    return out


def _log_alpha(logx: np.ndarray, ext: np.ndarray, lam: LambdaParams) -> np.ndarray:
    H, W, _ = logx.shape
    S = len(ext)
    log_l1, log_l2 = lam.log_weights
    emit = logx[:, :, ext]
    skip = _skip_mask(ext)
    lo, hi = _bounds(H, W, S)
    alpha = np.full((H, W, S), NEG_INF)
    for i in range(H):
        for j in range(W):
            if i == 0 and j == 0:
                a = np.full(S, NEG_INF)
                a[0] = emit[0, 0, 0]
                a[1] = emit[0, 0, 1]
            else:
                acc = np.full(S, NEG_INF)
                if j > 0:
                    acc = log_l1 + _advance(alpha[i, j - 1], skip)
                if i > 0:
                    acc = np.logaddexp(acc, log_l2 + _advance(alpha[i - 1, j], skip))
                a = acc + emit[i, j]
            a[: lo[i, j]] = NEG_INF
            a[hi[i, j] + 1 :] = NEG_INF
            alpha[i, j] = a
    return alpha


def _log_beta(logx: np.ndarray, ext: np.ndarray, lam: LambdaParams) -> np.ndarray:
    H, W, _ = logx.shape
    S = len(ext)
    log_l1, log_l2 = lam.log_weights
    emit = logx[:, :, ext]
    skip = _skip_mask(ext)
    lo, hi = _bounds(H, W, S)
    beta = np.full((H, W, S), NEG_INF)
    for i in range(H - 1, -1, -1):
        for j in range(W - 1, -1, -1):
            if i == H - 1 and j == W - 1:
                b = np.full(S, NEG_INF)
                b[S - 1] = 0.0
                b[S - 2] = 0.0
            else:
                acc = np.full(S, NEG_INF)
                if j < W - 1:
                    acc = log_l1 + _retreat(beta[i, j + 1] + emit[i, j + 1], skip)
                if i < H - 1:
                    acc = np.logaddexp(
                        acc, log_l2 + _retreat(beta[i + 1, j] + emit[i + 1, j], skip)
                    )
                b = acc
            b[: lo[i, j]] = NEG_INF
            b[hi[i, j] + 1 :] = NEG_INF
            beta[i, j] = b
    return beta


def _final(log_alpha: np.ndarray) -> float:
    last = log_alpha[-1, -1]
    return float(np.logaddexp(last[-1], last[-2]))


def forward(x, label, lam: LambdaParams = DEFAULT_LAMBDA, *, validate: bool = True) -> LatticeResult:
    """Run the forward recursion; returns ``log p(label | x)`` and the alpha tensor.

    ``validate=False`` accepts any non-negative grid (used for gradient checks
    where entries are treated as free variables).
    """
    x, ext = _prepare(x, label, validate)
    log_alpha = _log_alpha(log_grid(x), ext, lam)
    return LatticeResult(_final(log_alpha), ext, log_alpha=log_alpha)


def backward(x, label, lam: LambdaParams = DEFAULT_LAMBDA, *, validate: bool = True) -> np.ndarray:
    """Return the log-beta tensor of shape ``(H, W, 2|l| + 1)``."""
    x, ext = _prepare(x, label, validate)
    return _log_beta(log_grid(x), ext, lam)


def forward_backward(x, label, lam: LambdaParams = DEFAULT_LAMBDA, *, validate: bool = True) -> LatticeResult:
    x, ext = _prepare(x, label, validate)
    logx = log_grid(x)
    log_alpha = _log_alpha(logx, ext, lam)
    log_beta = _log_beta(logx, ext, lam)
    return LatticeResult(_final(log_alpha), ext, log_alpha=log_alpha, log_beta=log_beta)


def sequence_log_prob(x, label, lam: LambdaParams = DEFAULT_LAMBDA, *, validate: bool = True) -> float:
    return forward(x, label, lam, validate=validate).log_prob


@dataclass
class SetLoss:
    loss: float
    log_probs: list[float]
    variant: str = "mean"


def _check_variant(variant):
    if variant not in LOSS_VARIANTS:
        raise ValueError(f"unknown loss variant {variant!r}; expected one of {LOSS_VARIANTS}")


def _as_targets(targets) -> list[tuple[int, ...]]:
    targets = [as_label(t) for t in targets]
    if not targets:
        raise ValueError("target set must contain at least one sequence")
    return targets


def _combine(log_probs: Sequence[float], variant: str) -> float:
    lp = np.asarray(log_probs)
    if variant == "mean":
        # negative log of the mean sequence probability
        return -float(np.logaddexp.reduce(lp) - math.log(len(lp)))
    # alternative: independent per-sequence likelihoods
    return -float(lp.sum())


def set_loss(x, targets, lam: LambdaParams = DEFAULT_LAMBDA, *, variant: str = "mean",
             validate: bool = True) -> SetLoss:
    """Per-image objective ``-(ln sum_i p(l_i|x) - ln N)`` over an unordered target set.

    ``variant="sum_log"`` switches to ``-sum_i ln p(l_i|x)`` for experiments.
    """
    _check_variant(variant)
    targets = _as_targets(targets)
    x = np.asarray(x, dtype=np.float64)
    log_probs = []
    for n, t in enumerate(targets):
        xx, ext = _prepare(x, t, validate, index=n)
        log_probs.append(_final(_log_alpha(log_grid(xx), ext, lam)))
    return SetLoss(_combine(log_probs, variant), log_probs, variant)


def _log_occupancy(logx, targets, lam, variant, validate, x):
    """Log of ``-x * dO/dx`` per cell and class, plus the per-sequence log-probs."""
    H, W, Q = logx.shape
    per_seq = []
    log_probs = []
    for n, t in enumerate(targets):
        _, ext = _prepare(x, t, validate, index=n)
        la = _log_alpha(logx, ext, lam)
        lb = _log_beta(logx, ext, lam)
        lp = _final(la)
        if not np.isfinite(lp):
            raise InfeasibleTarget(f"sequence {n} has zero probability under the grid", index=n)
        ab = la + lb
        occ = np.full((H, W, Q), NEG_INF)
        for s, k in enumerate(ext):
            occ[:, :, k] = np.logaddexp(occ[:, :, k], ab[:, :, s])
        per_seq.append(occ)
        log_probs.append(lp)
    lp = np.asarray(log_probs)
    if variant == "mean":
        log_gamma = np.logaddexp.reduce(np.stack(per_seq), axis=0) - np.logaddexp.reduce(lp)
    else:
        log_gamma = np.logaddexp.reduce(
            np.stack([o - p for o, p in zip(per_seq, lp)]), axis=0
        )
    return log_gamma, log_probs


def grad_wrt_probs(x, targets, lam: LambdaParams = DEFAULT_LAMBDA, *, variant: str = "mean",
                   validate: bool = True) -> np.ndarray:
    """Gradient of the set loss w.r.t. grid entries taken as free variables."""
    _check_variant(variant)
    targets = _as_targets(targets)
    x = np.asarray(x, dtype=np.float64)
    logx = log_grid(x)
    log_gamma, _ = _log_occupancy(logx, targets, lam, variant, validate, x)
    return -np.exp(log_gamma - logx)


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Per-cell vector-Jacobian product of softmax."""
    inner = np.sum(probs * grad_probs, axis=-1, keepdims=True)
    return probs * (grad_probs - inner)


def loss_and_logit_grad(z, targets, lam: LambdaParams = DEFAULT_LAMBDA, *,
                        variant: str = "mean") -> tuple[SetLoss, np.ndarray]:
    """Loss and its gradient w.r.t. logits, sharing one forward/backward pass."""
    _check_variant(variant)
    targets = _as_targets(targets)
    probs = softmax_grid(z)
    logx = log_grid(probs)
    log_gamma, log_probs = _log_occupancy(logx, targets, lam, variant, True, probs)
    gamma = np.exp(log_gamma)
    # J^T g with g = -gamma / probs, written without the division
    grad = -gamma + probs * gamma.sum(axis=-1, keepdims=True)
    return SetLoss(_combine(log_probs, variant), log_probs, variant), grad


def grad_wrt_logits(z, targets, lam: LambdaParams = DEFAULT_LAMBDA, *, variant: str = "mean") -> np.ndarray:
    return loss_and_logit_grad(z, targets, lam, variant=variant)[1]


def write_alpha_beta_csv(x, label, lam: LambdaParams, fh: IO[str], *, validate: bool = True) -> int:
    """Write ``i, j, s, log_alpha, log_beta`` rows; returns the number of rows."""
    res = forward_backward(x, label, lam, validate=validate)
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["i", "j", "s", "log_alpha", "log_beta"])
    H, W, S = res.log_alpha.shape
    for i in range(H):
        for j in range(W):
            for s in range(S):
                writer.writerow(
                    [i, j, s, repr(float(res.log_alpha[i, j, s])), repr(float(res.log_beta[i, j, s]))]
                )
    return H * W * S
