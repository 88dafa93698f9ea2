"""Iterated-bootstrap bias estimates and bias-corrected estimators.

The order-k corrected estimator combines the nested bootstrap level
means with alternating binomial coefficients; the order-k bias estimate
is whatever it leaves of the original estimate. Both identities

    corrected(k) + bias(k) = theta_hat        (exactly)
    theta_hat + sum_{j<=k} delta(j) = corrected(k)

hold by construction and are asserted in tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .resampling import BootstrapLedger, correction_coefficients


@dataclass(frozen=True)
class CorrectedEstimate:
    """Order-k corrected estimator with its bias estimate and increment."""

    k: int
    theta_tilde: np.ndarray
    tau_tilde: np.ndarray        # theta_hat - theta_tilde
    delta: np.ndarray            # theta_tilde(k) - theta_tilde(k-1)


def bias_estimate_level1(ledger: BootstrapLedger) -> np.ndarray:
    """Mean first-level excess over the original estimate."""
    if ledger.depth < 1:
        raise ValueError("ledger has no first-level replicates")
    return ledger.level_grand_mean(1) - ledger.theta_hat


def corrected_estimate(ledger: BootstrapLedger, k: int) -> CorrectedEstimate:
    """Order-k corrected estimator from the ledger's level means.

    k = 0 returns the original estimate with zero bias. Orders 1..3 use
    single/double/triple nesting; order 4 additionally needs a depth-4
    ledger.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    if k > ledger.depth:
        raise ValueError(f"order {k} exceeds ledger depth {ledger.depth}")
    if k == 0:
        zero = np.zeros_like(ledger.theta_hat)
        return CorrectedEstimate(0, ledger.theta_hat.copy(), zero, zero.copy())
    coeffs = correction_coefficients(k)
    theta = np.zeros_like(ledger.theta_hat)
    for j, cj in enumerate(coeffs):
        theta = theta + cj * ledger.level_grand_mean(j)
    prev = corrected_estimate(ledger, k - 1).theta_tilde if k > 1 else ledger.theta_hat
    return CorrectedEstimate(k, theta, ledger.theta_hat - theta, theta - prev)


def delta_k(ledger: BootstrapLedger, k: int) -> np.ndarray:
    """Order-k bias change, as the mean of the retained per-replicate terms.

    Identical (to round-off) to subtracting successive corrected
    estimates; the per-replicate terms additionally feed the
    with-replacement percentile machinery.
    """
    if not 1 <= k <= ledger.depth:
        raise ValueError(f"order {k} exceeds ledger depth {ledger.depth}")
    return ledger.leaf_terms[k].mean(axis=0)
