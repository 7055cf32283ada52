"""Seeded certification runs: lattice vs brute force, analytic vs numeric gradients."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from msra import oracle
from msra.core import softmax_grid
from msra.lattice import (
    LambdaParams,
    forward_backward,
    grad_wrt_logits,
    grad_wrt_probs,
    sequence_log_prob,
    set_loss,
)


@dataclass
class SuiteResult:
    name: str
    trials: int
    max_rel_err: float
    tol: float
    worst: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: trials={self.trials} max_rel_err={self.max_rel_err:.3e} tol={self.tol:.0e}"


def _instance(rng, max_hw=4, max_q=4, max_len=3):
    H = int(rng.integers(1, max_hw + 1))
    W = int(rng.integers(1, max_hw + 1))
    Q = int(rng.integers(2, max_q + 1))
    x = oracle.random_grid(rng, H, W, Q)
    label = oracle.random_label(rng, Q, max_len, H + W - 1)
    return x, label


def oracle_suite(trials: int = 200, seed: int = 7, lam: LambdaParams = LambdaParams(),
                 tol: float = 1e-9) -> SuiteResult:
    """Lattice forward vs path-enumeration oracle on random small instances."""
    rng = np.random.default_rng(seed)
    res = SuiteResult("oracle-equivalence", trials, 0.0, tol)
    for n in range(trials):
        x, label = _instance(rng)
        dp = math.exp(sequence_log_prob(x, label, lam))
        ref = oracle.brute_force_sequence_prob(x, label, lam.lambda1, lam.lambda2)
        err = abs(dp - ref) / ref
        if err >= res.max_rel_err:
            res.max_rel_err = err
            res.worst = {"trial": n, "shape": list(x.shape), "label": list(label), "dp": dp, "oracle": ref}
    return res


def antidiagonal_suite(trials: int = 50, seed: int = 11, lam: LambdaParams = LambdaParams(),
                       tol: float = 1e-9) -> SuiteResult:
    """Each anti-diagonal's sum of exp(alpha + beta) must equal p(l|x)."""
    rng = np.random.default_rng(seed)
    res = SuiteResult("antidiagonal-identity", trials, 0.0, tol)
    for n in range(trials):
        x, label = _instance(rng, max_hw=5, max_q=5, max_len=4)
        fb = forward_backward(x, label, lam)
        p = fb.prob
        H, W, _ = x.shape
        ab = np.exp(fb.log_alpha + fb.log_beta).sum(axis=-1)
        for d in range(H + W - 1):
            total = sum(ab[i, d - i] for i in range(max(0, d - W + 1), min(H, d + 1)))
            err = abs(total - p) / p
            if err >= res.max_rel_err:
                res.max_rel_err = err
                res.worst = {"trial": n, "diagonal": d, "sum": total, "p": p}
    return res


def gradcheck_suite(trials: int = 50, seed: int = 3, lam: LambdaParams = LambdaParams(),
                    eps: float = 1e-6, tol: float = 1e-5, variant: str = "mean") -> tuple[SuiteResult, SuiteResult]:
    """Analytic gradients vs central differences, on probabilities (free) and on logits."""
    rng = np.random.default_rng(seed)
    probs = SuiteResult("grad-wrt-probs", trials, 0.0, tol)
    logits = SuiteResult("grad-wrt-logits", trials, 0.0, tol)
    for n in range(trials):
        H, W = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        Q = int(rng.integers(2, 5))
        N = int(rng.integers(1, 4))
        targets = [oracle.random_label(rng, Q, 3, H + W - 1) for _ in range(N)]
        # relaxed grid: positive entries, rows need not sum to one
        x = rng.uniform(0.05, 1.0, size=(H, W, Q))
        g = grad_wrt_probs(x, targets, lam, variant=variant, validate=False)
        num = oracle.finite_diff_grad(
            lambda p: set_loss(p, targets, lam, variant=variant, validate=False).loss, x, eps
        )
        err = oracle.max_rel_error(g, num)
        if err >= probs.max_rel_err:
            probs.max_rel_err, probs.worst = err, {"trial": n, "shape": [H, W, Q], "targets": targets}
        z = rng.normal(0.0, 1.5, size=(H, W, Q))
        g = grad_wrt_logits(z, targets, lam, variant=variant)
        num = oracle.finite_diff_grad(
            lambda v: set_loss(softmax_grid(v), targets, lam, variant=variant).loss, z, eps
        )
        err = oracle.max_rel_error(g, num)
        if err >= logits.max_rel_err:
            logits.max_rel_err, logits.worst = err, {"trial": n, "shape": [H, W, Q], "targets": targets}
    return probs, logits
