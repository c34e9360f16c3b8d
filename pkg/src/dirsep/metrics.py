"""Separation metrics and assignment: SI-SDR, ordered and
permutation-searched losses, and a deterministic Hungarian solver.

The SI-SDR stabilizer is relative to the estimate's energy so the metric
stays exactly invariant under a positive gain on the estimate; a fixed
absolute epsilon would leak an O(eps) gain dependence into the value.
"""

from __future__ import annotations

from itertools import permutations

import numpy as np
from scipy.optimize import linear_sum_assignment

SISDR_EPS = 1e-8
_TINY = 1e-30


def si_sdr(estimate, reference) -> float:
    """Scale-invariant signal-to-distortion ratio in dB.

    Projects the estimate onto the reference (target = <est,ref>/||ref||^2
    * ref) and returns 10*log10 of target energy over residual energy,
    both guarded by eps*||est||^2. Raises on a zero-energy reference.
    """
    est = np.asarray(estimate, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {est.shape} vs {ref.shape}")
    ref_energy = float(np.dot(ref, ref))
    if ref_energy <= 0.0:
        raise ValueError("reference signal has zero energy")
    alpha = float(np.dot(est, ref)) / ref_energy
    target = alpha * ref
    residual = est - target
    guard = SISDR_EPS * float(np.dot(est, est)) + _TINY
    num = float(np.dot(target, target)) + guard
    den = float(np.dot(residual, residual)) + guard
    return 10.0 * np.log10(num / den)


def ordered_loss(estimates, references) -> float:
    """Mean negative SI-SDR over channels in the given fixed order."""
    if len(estimates) != len(references):
        raise ValueError("channel count mismatch")
    values = [si_sdr(e, r) for e, r in zip(estimates, references)]
    return -float(np.mean(values))


def pit_loss(estimates, references):
    """Minimum ordered_loss over all reference permutations.

    Returns (loss, permutation) where permutation[j] is the reference
    index assigned to estimate channel j. Exhaustive search, so only
    sensible for small channel counts.
    """
    if len(estimates) != len(references):
        raise ValueError("channel count mismatch")
    n = len(estimates)
    best_loss, best_perm = np.inf, None
    for perm in permutations(range(n)):
        loss = ordered_loss(estimates, [references[p] for p in perm])
        if loss < best_loss:
            best_loss, best_perm = loss, perm
    return best_loss, best_perm


def hungarian_assign(cost) -> tuple:
    """Minimum-cost assignment on a square matrix.

    Returns the permutation p with p[i] = column assigned to row i. Ties
    are broken toward the lexicographically smallest permutation: row by
    row, the smallest column is kept whenever an optimal completion of
    the remaining rows still reaches the global optimum.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"cost matrix must be square, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix contains non-finite values")
    n = c.shape[0]
    rows, cols = linear_sum_assignment(c)
    best_total = float(c[rows, cols].sum())
    tol = 1e-12 * max(1.0, np.max(np.abs(c))) * n

    perm = []
    free_cols = list(range(n))
    fixed_cost = 0.0
    for i in range(n):
        for j in sorted(free_cols):
            remaining = [col for col in free_cols if col != j]
            if remaining:
                sub = c[np.ix_(range(i + 1, n), remaining)]
                r, k = linear_sum_assignment(sub)
                completion = float(sub[r, k].sum())
            else:
                completion = 0.0
            if fixed_cost + c[i, j] + completion <= best_total + tol:
                perm.append(j)
                free_cols.remove(j)
                fixed_cost += c[i, j]
                break
    return tuple(perm)
