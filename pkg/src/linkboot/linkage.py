"""Weight scoring, error-rate cut-offs and one-to-one linking.

The weight of a pair is the log-likelihood ratio of its agreement pattern
under the match vs non-match model, summed over linking variables:

    w = sum_l [ g_l log m_l + (1-g_l) log(1-m_l)
              - g_l log u_l - (1-g_l) log(1-u_l) ].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .agreement import AgreementMatrix
from .match_model import MatchModel, pattern_codes
from .tables import LinkedDataset, RecordTable


def weight_terms(model: MatchModel) -> tuple[np.ndarray, float]:
    """Per-variable weight contribution of an agreement, plus the all-zero base.

    weight(pattern) = base + bits @ gain, with
    gain_l = log(m_l/u_l) - log((1-m_l)/(1-u_l)) and
    base   = sum_l log((1-m_l)/(1-u_l)).
    """
    gain = np.log(model.m / model.u) - np.log((1.0 - model.m) / (1.0 - model.u))
    base = float(np.sum(np.log((1.0 - model.m) / (1.0 - model.u))))
    return gain, base


def fs_weight(pattern: np.ndarray, model: MatchModel) -> float:
    """Log-likelihood-ratio weight of a single agreement pattern."""
    pattern = np.asarray(pattern, dtype=np.float64).reshape(-1)
    if len(pattern) != model.n_vars:
        raise ValueError(f"pattern has {len(pattern)} variables, model expects {model.n_vars}")
    gain, base = weight_terms(model)
    return float(pattern @ gain + base)


def score_pairs(gamma: AgreementMatrix, model: MatchModel) -> np.ndarray:
    """Weight for every candidate pair, in row order."""
    if gamma.n_vars != model.n_vars:
        raise ValueError("agreement matrix and model disagree on the number of linking variables")
    gain, base = weight_terms(model)
    return gamma.bits @ gain + base


@dataclass
class ScoredPairs:
    """Pair weights plus the matrix geometry they refer to."""

    weights: np.ndarray
    n_a: int
    n_b: int
    cutoffs: tuple[float, float] | None = None   # (w_U, w_M), w_U <= w_M

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if len(self.weights) != self.n_a * self.n_b:
            raise ValueError("need one weight per candidate pair")
        if not np.isfinite(self.weights).all():
            raise ValueError("non-finite pair weight")
        if self.cutoffs is not None and self.cutoffs[0] > self.cutoffs[1]:
            raise ValueError("cut-offs must satisfy w_U <= w_M")


@dataclass
class Classification:
    """Threshold classification of all pairs at tolerated error rates."""

    w_u: float
    w_m: float
    labels: np.ndarray           # 1 matched, 0 undetermined, -1 non-matched
    infeasible: bool = False     # True when the two cut-off rules crossed

    def counts(self) -> dict[str, int]:
        return {"matched": int((self.labels == 1).sum()),
                "undetermined": int((self.labels == 0).sum()),
                "non_matched": int((self.labels == -1).sum())}


def compute_cutoffs(model: MatchModel, mu: float, lam: float) -> tuple[float, float, bool]:
    """Cut-offs (w_U, w_M) with model-implied error rates below mu and lam.

    Patterns are ranked by weight; w_M is the smallest weight whose
    match-region keeps expected false-positive mass <= mu, w_U the largest
    whose non-match region keeps false-negative mass <= lam. When the two
    regions would overlap, the overlap is handed to the undetermined class
    and the classification is flagged.
    """
    if not (0.0 < mu < 1.0 and 0.0 < lam < 1.0):
        raise ValueError("mu and lambda must lie in (0, 1)")
    gain, base = weight_terms(model)
    codes = np.arange(1 << model.n_vars)
    bits = ((codes[:, None] >> np.arange(model.n_vars)) & 1).astype(np.float64)
    w = bits @ gain + base
    p_match = model.pattern_probabilities(matched=True)
    p_unmatch = model.pattern_probabilities(matched=False)

    # ties share a threshold, so masses accumulate over weight-value groups
    uw = np.unique(w)[::-1]
    fp_group = np.array([p_unmatch[w == v].sum() for v in uw])
    fn_group = np.array([p_match[w == v].sum() for v in uw])

    top = np.nonzero(np.cumsum(fp_group) <= mu)[0]
    w_m = float(uw[top[-1]]) if len(top) else np.inf

    bottom = np.nonzero(np.cumsum(fn_group[::-1]) <= lam)[0]
    w_u = float(uw[::-1][bottom[-1]]) if len(bottom) else -np.inf

    infeasible = w_u > w_m
    if infeasible:
        w_u, w_m = w_m, w_u   # widest undetermined band; both bounds still hold
    return w_u, w_m, infeasible


def classify_pairs(scored: ScoredPairs, model: MatchModel, mu: float, lam: float) -> Classification:
    """Partition pairs into matched / undetermined / non-matched."""
    w_u, w_m, infeasible = compute_cutoffs(model, mu, lam)
    labels = np.zeros(len(scored.weights), dtype=np.int8)
    labels[scored.weights >= w_m] = 1
    labels[(scored.weights <= w_u) & (labels != 1)] = -1
    return Classification(w_u, w_m, labels, infeasible)


def greedy_one_to_one(weights: np.ndarray, n_a: int, n_b: int, n_links: int) -> np.ndarray:
    """Take the highest-weight pair with unused row and column, repeatedly.

    Ties break on lower row index, then lower column index, so the result
    is independent of input ordering.
    """
    w = weights.reshape(n_a, n_b)
    flat = w.reshape(-1)
    order = np.argsort(-flat, kind="stable")   # stable sort => (i, j) tie-break
    used_a = np.zeros(n_a, dtype=bool)
    used_b = np.zeros(n_b, dtype=bool)
    out = np.empty((n_links, 2), dtype=np.int64)
    taken = 0
    for idx in order:
        i, j = divmod(int(idx), n_b)
        if used_a[i] or used_b[j]:
            continue
        used_a[i] = used_b[j] = True
        out[taken] = (i, j)
        taken += 1
        if taken == n_links:
            break
    if taken < n_links:
        raise ValueError(f"only {taken} disjoint pairs available, {n_links} requested")
    return out


def optimal_one_to_one(weights: np.ndarray, n_a: int, n_b: int, n_links: int) -> np.ndarray:
    """Exactly n_links disjoint pairs maximizing total weight.

    For n_links < min(n_A, n_B) the problem is reduced to a square
    assignment by adding zero-weight opt-out rows and columns, with the
    dummy-dummy block forbidden so exactly n_links real pairs are chosen.
    """
    w = weights.reshape(n_a, n_b)
    if n_links == min(n_a, n_b):
        rows, cols = linear_sum_assignment(w, maximize=True)
        chosen = np.stack([rows, cols], axis=1)
    else:
        size = n_a + n_b - n_links
        forbid = -(np.abs(w).sum() + 1.0) * (size + 1)
        big = np.zeros((size, size))
        big[:n_a, :n_b] = w
        big[n_a:, n_b:] = forbid
        rows, cols = linear_sum_assignment(big, maximize=True)
        real = (rows < n_a) & (cols < n_b)
        chosen = np.stack([rows[real], cols[real]], axis=1)
        if len(chosen) != n_links:
            raise ValueError("assignment reduction failed to select the requested pair count")
    order = np.lexsort((chosen[:, 1], chosen[:, 0]))
    return chosen[order].astype(np.int64)


def link_one_to_one(scored: ScoredPairs, table_a: RecordTable, table_b: RecordTable,
                    n_links: int, strategy: str = "greedy") -> LinkedDataset:
    """Build the integrated dataset from the n_links best disjoint pairs."""
    if n_links > min(scored.n_a, scored.n_b):
        raise ValueError("n_links exceeds min(n_A, n_B)")
    if n_links < 1:
        raise ValueError("n_links must be at least 1")
    if strategy == "greedy":
        pairs = greedy_one_to_one(scored.weights, scored.n_a, scored.n_b, n_links)
    elif strategy == "optimal":
        pairs = optimal_one_to_one(scored.weights, scored.n_a, scored.n_b, n_links)
    else:
        raise ValueError(f"unknown linking strategy {strategy!r}")
    w = scored.weights.reshape(scored.n_a, scored.n_b)[pairs[:, 0], pairs[:, 1]]
    return LinkedDataset(table_a, table_b, pairs, w)


def link_from_agreement(gamma: AgreementMatrix, model: MatchModel,
                        table_a: RecordTable, table_b: RecordTable,
                        n_links: int, strategy: str = "greedy") -> LinkedDataset:
    scored = ScoredPairs(score_pairs(gamma, model), gamma.n_a, gamma.n_b)
    return link_one_to_one(scored, table_a, table_b, n_links, strategy)
