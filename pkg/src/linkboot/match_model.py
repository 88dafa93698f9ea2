"""Match / non-match agreement model and its EM estimation.

The model treats each agreement pattern as a draw from one of two
independence Bernoulli products: component M with per-variable agreement
probabilities m_l, component U with probabilities u_l, mixed with weight
`prevalence`. Probabilities are clamped away from {0, 1} so that all
log-ratio weights stay finite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .agreement import AgreementMatrix

PROB_CLAMP = 1e-6


class UnidentifiableMixture(ValueError):
    """Every agreement pattern is identical; the two components cannot be told apart."""


def clamp_probs(p: np.ndarray) -> np.ndarray:
    return np.clip(np.asarray(p, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)


@dataclass(frozen=True)
class MatchModel:
    """Agreement probabilities given a true match (m) and non-match (u)."""

    m: np.ndarray
    u: np.ndarray
    prevalence: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "m", clamp_probs(self.m))
        object.__setattr__(self, "u", clamp_probs(self.u))
        if self.m.shape != self.u.shape or self.m.ndim != 1:
            raise ValueError("m and u must be 1-D vectors of equal length")
        if not 0.0 < self.prevalence < 1.0:
            raise ValueError("prevalence must lie in (0, 1)")

    @property
    def n_vars(self) -> int:
        return len(self.m)

    def pattern_log_likelihood(self, bits: np.ndarray, matched: bool) -> np.ndarray:
        """log P(pattern | component) for each row of `bits`."""
        p = self.m if matched else self.u
        bits = np.asarray(bits, dtype=np.float64)
        return bits @ np.log(p) + (1.0 - bits) @ np.log(1.0 - p)

    def pattern_probabilities(self, matched: bool) -> np.ndarray:
        """Probability of each of the 2^L patterns, indexed by bit code.

        Code order: bit l of the code corresponds to linking variable l,
        i.e. code = sum_l gamma_l << l.
        """
        p = self.m if matched else self.u
        codes = np.arange(1 << self.n_vars)
        out = np.ones(len(codes))
        for l in range(self.n_vars):
            bit = (codes >> l) & 1
            out *= np.where(bit == 1, p[l], 1.0 - p[l])
        return out


def pattern_codes(bits: np.ndarray) -> np.ndarray:
    """Pack binary pattern rows into integer codes (variable l -> bit l)."""
    bits = np.asarray(bits, dtype=np.uint64)
    weights = (np.uint64(1) << np.arange(bits.shape[1], dtype=np.uint64))
    return (bits * weights).sum(axis=1).astype(np.int64)


def codes_to_bits(codes: np.ndarray, n_vars: int) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    return ((codes[:, None] >> np.arange(n_vars)) & 1).astype(np.uint8)


@dataclass
class EMFit:
    """EM result: the fitted model plus convergence diagnostics."""

    model: MatchModel
    converged: bool
    n_iter: int
    log_likelihood: np.ndarray   # observed-data log-likelihood per iteration


def default_init(n_vars: int, n_a: int, n_b: int) -> MatchModel:
    """Conventional starting point: agreeable matches, disagreeable non-matches."""
    expected_matches = min(n_a, n_b)
    return MatchModel(np.full(n_vars, 0.9), np.full(n_vars, 0.1),
                      expected_matches / (n_a * n_b))


def estimate_match_model_em(gamma: AgreementMatrix, init: MatchModel | None = None,
                            tol: float = 1e-6, max_iter: int = 1000) -> EMFit:
    """Fit the two-component independence mixture by EM.

    Patterns are deduplicated with multiplicities so each E-step touches
    every distinct pattern once. The observed-data log-likelihood is
    checked to be nondecreasing at every iteration. Raises
    UnidentifiableMixture when all rows are identical; a run that hits
    `max_iter` is returned with ``converged=False``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if init is None:
        init = default_init(gamma.n_vars, gamma.n_a, gamma.n_b)
    if init.n_vars != gamma.n_vars:
        raise ValueError("init model dimension does not match the agreement matrix")
    if not np.all(init.m > init.u):
        raise ValueError("init must satisfy m_l > u_l for every linking variable")

    codes = pattern_codes(gamma.bits)
    uniq, counts = np.unique(codes, return_counts=True)
    if len(uniq) == 1:
        raise UnidentifiableMixture("all agreement patterns are identical")
    bits = codes_to_bits(uniq, gamma.n_vars).astype(np.float64)
    counts = counts.astype(np.float64)
    total = counts.sum()

    m, u = init.m.copy(), init.u.copy()
    prev = init.prevalence
    ll_trace = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        log_pm = bits @ np.log(m) + (1.0 - bits) @ np.log(1.0 - m)
        log_pu = bits @ np.log(u) + (1.0 - bits) @ np.log(1.0 - u)
        num = prev * np.exp(log_pm)
        den = num + (1.0 - prev) * np.exp(log_pu)
        g = num / den
        ll = float(counts @ np.log(den))
        if ll_trace and ll < ll_trace[-1] - 1e-9:
            raise AssertionError(f"EM log-likelihood decreased at iteration {it}")
        ll_trace.append(ll)

        wm = counts * g
        wu = counts * (1.0 - g)
        new_m = clamp_probs((wm @ bits) / wm.sum())
        new_u = clamp_probs((wu @ bits) / wu.sum())
        new_prev = float(np.clip(wm.sum() / total, PROB_CLAMP, 1 - PROB_CLAMP))

        delta = max(np.abs(new_m - m).max(), np.abs(new_u - u).max(),
                    abs(new_prev - prev))
        m, u, prev = new_m, new_u, new_prev
        if delta < tol:
            converged = True
            break

    if np.mean(m) < np.mean(u):  # keep the match component the agreeable one
        m, u, prev = u, m, 1.0 - prev
    return EMFit(MatchModel(m, u, prev), converged, it, np.array(ll_trace))
