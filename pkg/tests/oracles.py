"""Independent oracles used to freeze expected values in tests.

Everything here is deliberately brute force and shares no code with the
implementation paths it checks.
"""

from __future__ import annotations

import numpy as np


def finite_diff_grads(loss_fn, params: list, h: float = 1e-5) -> list:
    """Central finite differences of a scalar loss over parameter arrays."""
    grads = []
    for p in params:
        g = np.zeros_like(p)
        flat_p = p.ravel()
        flat_g = g.ravel()
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + h
            up = loss_fn()
            flat_p[i] = orig - h
            down = loss_fn()
            flat_p[i] = orig
            flat_g[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def max_relative_error(analytic: list, numeric: list, floor: float = 1e-8) -> float:
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def tabular_q_fixed_point(rows, gamma: float, iters: int = 10000, tol: float = 1e-12):
    """Dynamic-programming fixed point of the data-expectation backup.

    ``rows`` is a list of (s, a, r, s2, a2, terminal) with hashable s/a.
    Solves Q(s,a) = mean over matching rows of r + gamma * Q(s2, a2)
    (zero continuation on terminal rows), which is exactly what a SARSA
    style regression on the dataset converges to.
    """
    by_sa: dict = {}
    for s, a, r, s2, a2, term in rows:
        by_sa.setdefault((s, a), []).append((r, s2, a2, term))
    q = {key: 0.0 for key in by_sa}
    for _ in range(iters):
        delta = 0.0
        for key, entries in by_sa.items():
            total = 0.0
            for r, s2, a2, term in entries:
                cont = 0.0 if term else q.get((s2, a2), 0.0)
                total += r + gamma * cont
            new = total / len(entries)
            delta = max(delta, abs(new - q[key]))
            q[key] = new
        if delta < tol:
            break
    return q


def brute_force_failure_labels(outcome: str, length: int, horizon: int) -> np.ndarray:
    """Forward scan over explicit per-state latch indicators."""
    latched = np.zeros(length + 1, dtype=bool)
    latched[length] = outcome == "failure"
    y = np.zeros(length, dtype=np.uint8)
    for t in range(length):
        window = latched[t + 1 : t + 1 + horizon]
        y[t] = 1 if window.any() else 0
    return y


def roc_auc(labels: np.ndarray, scores: np.ndarray) -> float:
    """Rank-based AUC (Mann-Whitney), ties handled by midranks."""
    labels = np.asarray(labels).astype(bool)
    scores = np.asarray(scores, dtype=float)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("need both classes for AUC")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum = ranks[labels].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))
