"""Stopping rule for the iterated bias correction.

At each order k the bias change delta(k) is judged against two noise
sources: the sampling variance of the bias change across data
realizations (v1) and the Monte Carlo variance from finitely many
bootstrap replicates (v2 / B). Both are estimated from a nested
outer x inner run; v2 and v1 then size the first bootstrap level so that
Monte Carlo noise stays below the precision target eta0, and a
studentized percentile interval decides whether the order-k change is
detectable. The first k whose interval contains zero stops the
iteration; the order-(k-1) corrected estimator is reported.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .agreement import AgreementMatrix
from .correction import corrected_estimate, delta_k
from .estimators import EstimatorSpec
from .match_model import MatchModel
from .resampling import (BootstrapConfig, BootstrapLedger, RelinkSampler,
                         correction_coefficients, nested_delta_samples,
                         or_resample, _TAG_LEDGER)
from .tables import LinkedDataset

_TAG_OR = 3
MIN_T_REPLICATES = 40


class DegenerateVariance(ValueError):
    """All bias-change samples coincide; no variance to decompose."""


@dataclass(frozen=True)
class VarianceDecomposition:
    """Split of Var(delta(k)) into sampling and Monte Carlo components.

    total = v1 + v2 / b_used holds exactly; b_used starts at the inner
    replicate count of the nested run and is raised just enough to keep
    v1 positive when the subtraction would go negative.
    """

    total: float
    v2: float
    v1: float
    b_used: int
    eta_sq: float
    degenerate: bool = False


def estimate_variance_components(nested_deltas: np.ndarray) -> VarianceDecomposition:
    """Decompose nested (outer x inner) bias-change samples.

    The variance of the per-outer means estimates the total; the average
    within-outer sample variance estimates the per-replicate Monte Carlo
    variance v2; v1 is the remainder after removing v2 / inner_count.
    Degenerate input (all samples equal) is flagged rather than split.
    """
    deltas = np.asarray(nested_deltas, dtype=np.float64)
    if deltas.ndim != 2 or deltas.shape[0] < 2 or deltas.shape[1] < 2:
        raise ValueError("nested deltas must be (outer >= 2) x (inner >= 2)")
    h, b = deltas.shape
    per_outer = deltas.mean(axis=1)
    total = float(per_outer.var(ddof=1))
    v2 = float(deltas.var(axis=1, ddof=1).mean())
    if total == 0.0 and v2 == 0.0:
        return VarianceDecomposition(0.0, 0.0, 0.0, b, 0.0, degenerate=True)
    b_used = b
    v1 = total - v2 / b_used
    if v1 <= 0.0:
        if total <= 0.0:
            return VarianceDecomposition(total, v2, 0.0, b, 0.0, degenerate=True)
        b_used = math.ceil(v2 / total) + 1
        v1 = total - v2 / b_used
    eta_sq = v2 / (b_used * v1)
    return VarianceDecomposition(total, v2, v1, b_used, eta_sq)


def choose_b(vd: VarianceDecomposition, eta0: float) -> int:
    """First-level replicate count meeting the precision target.

    Returns max(ceil(v2 / (eta0^2 v1)), b0) with b0 = ceil(v2/total) + 1,
    the floor that keeps the variance subtraction positive.
    """
    if not 0.0 < eta0 < 1.0:
        raise ValueError("eta0 must lie in (0, 1)")
    if vd.degenerate:
        raise DegenerateVariance("cannot size replicates from a degenerate decomposition")
    b0 = math.ceil(vd.v2 / vd.total) + 1
    if vd.v2 == 0.0:
        return b0
    return max(math.ceil(vd.v2 / (eta0 ** 2 * vd.v1)), b0)


def percentile(values: np.ndarray, q: float) -> float:
    """Empirical percentile: rank q*n with linear interpolation.

    With n = 2000 the 2.5% and 97.5% ranks land exactly on order
    statistics 50 and 1950.
    """
    v = np.sort(np.asarray(values, dtype=np.float64))
    n = len(v)
    r = q * n
    lo = max(int(math.floor(r)), 1)
    hi = min(int(math.ceil(r)), n)
    if lo == hi:
        return float(v[lo - 1])
    return float(v[lo - 1] + (r - lo) * (v[hi - 1] - v[lo - 1]))


def percentile_interval(values: np.ndarray, level: float = 0.95) -> tuple[float, float]:
    alpha = (1.0 - level) / 2.0
    return percentile(values, alpha), percentile(values, 1.0 - alpha)


@dataclass(frozen=True)
class CITestResult:
    """Outcome of the order-k detectability test for one parameter."""

    k: int
    index: int
    t_statistic: float
    ci: tuple[float, float]
    contains_zero: bool
    b_used: int
    quantiles: tuple[float, float]
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {"k": self.k, "T": self.t_statistic, "ci": list(self.ci),
                "contains_zero": self.contains_zero, "b_used": self.b_used,
                "quantiles": list(self.quantiles), "degenerate": self.degenerate}


def ci_test(delta: float, vd: VarianceDecomposition, t_replicates: np.ndarray,
            k: int = 0, index: int = 0) -> CITestResult:
    """Percentile interval of the studentized bias change; accept if it
    straddles zero.

    `t_replicates` are outer-replicate bias changes already studentized
    by the run-level sqrt(v1). The interval is
    (delta + q_2.5 sqrt(v1), delta + q_97.5 sqrt(v1)).
    """
    if vd.degenerate:
        return CITestResult(k, index, 0.0, (delta, delta), delta == 0.0, vd.b_used,
                            (0.0, 0.0), degenerate=True)
    t_replicates = np.asarray(t_replicates, dtype=np.float64)
    if len(t_replicates) < MIN_T_REPLICATES:
        raise ValueError(f"need at least {MIN_T_REPLICATES} replicates for percentiles, "
                         f"got {len(t_replicates)}")
    if vd.v1 <= 0.0:
        raise ValueError("sampling variance must be positive for the studentized test")
    s1 = math.sqrt(vd.v1)
    q_l, q_u = percentile_interval(t_replicates)
    ci = (delta + q_l * s1, delta + q_u * s1)
    return CITestResult(k, index, delta / s1, ci, ci[0] <= 0.0 <= ci[1], vd.b_used,
                        (q_l, q_u))


# ---------------------------------------------------------------------------
# The per-parameter correction loop
# ---------------------------------------------------------------------------

@dataclass
class ParameterResult:
    """Stopping decision and reported values for one coefficient."""

    name: str
    index: int
    biased: float
    accepted: bool = False
    k: int | None = None
    b_max: int | None = None
    delta: float | None = None
    delta_interval: tuple[float, float] | None = None
    corrected: float | None = None
    corrected_interval: tuple[float, float] | None = None
    trace: list[CITestResult] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "name": self.name, "index": self.index, "biased": self.biased,
            "accepted": self.accepted, "k": self.k, "b_max": self.b_max,
            "delta": self.delta,
            "delta_interval": list(self.delta_interval) if self.delta_interval else None,
            "corrected": self.corrected,
            "corrected_interval": list(self.corrected_interval) if self.corrected_interval else None,
            "trace": [t.to_dict() for t in self.trace],
        }


@dataclass
class CorrectionReport:
    """Full audit of a correction run: per-parameter rows plus run metadata."""

    parameters: list[ParameterResult]
    theta_hat: np.ndarray
    master_seed: int
    config: dict
    total_evaluations: int
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "master_seed": self.master_seed,
            "config": self.config,
            "biased_estimate": self.theta_hat.tolist(),
            "parameters": [p.to_dict() for p in self.parameters],
            "total_evaluations": self.total_evaluations,
            "flags": self.flags,
        }


def _estimator_leaf_terms(ledger: BootstrapLedger, j: int) -> np.ndarray:
    """Per-first-level-replicate terms averaging to corrected(j)."""
    coeffs = correction_coefficients(j) if j >= 1 else np.array([1.0])
    out = np.zeros_like(ledger.level_mean_per_b(1))
    for jj, cj in enumerate(coeffs):
        out += cj * ledger.level_mean_per_b(jj)
    return out


def run_correction_loop(linked: LinkedDataset, gamma: AgreementMatrix,
                        model: MatchModel, estimator: EstimatorSpec,
                        cfg: BootstrapConfig, max_k: int = 3,
                        strategy: str = "greedy",
                        center_t: bool = False) -> CorrectionReport:
    """Iterate bootstrap depths until no parameter shows a detectable
    bias change, reporting the order-(k-1) estimator at each stop.

    Per order k: a nested outer x inner run decomposes Var(delta(k)) and
    sizes the first level; the main nested ledger at depth k supplies
    delta(k) and the reported estimators; the outer-replicate studentized
    changes give the percentile test. Parameters still rejecting at
    `max_k` are flagged and reported at order max_k.
    """
    if not 1 <= max_k <= 4:
        raise ValueError("max_k must be between 1 and 4")
    if not gamma.partitioned:
        raise ValueError("agreement matrix must carry the linked partition")
    sampler = RelinkSampler.for_problem(linked, model, estimator, strategy)
    p = sampler.dim
    names = (estimator.parameter_names if isinstance(estimator, EstimatorSpec)
             else [f"theta_{i}" for i in range(p)])
    results = [ParameterResult(names[i], i, float(sampler.theta_hat[i])) for i in range(p)]
    flags: list[str] = []
    active = list(range(p))

    for k in range(1, max_k + 1):
        deltas = nested_delta_samples(sampler, k, cfg, cfg.seed)   # (H', B', p)
        vds = [estimate_variance_components(deltas[:, :, i]) for i in range(p)]

        sized = [choose_b(vds[i], cfg.eta0) for i in active if not vds[i].degenerate]
        b_k = max([cfg.b, *sized]) if sized else cfg.b
        if b_k > cfg.max_b:
            flags.append(f"k={k}: replicate rule wanted B={b_k}, capped at {cfg.max_b}")
            b_k = cfg.max_b

        dims = (b_k, cfg.c, cfg.d, cfg.d)[:k]
        levels = sampler.sample_tree(dims, cfg.seed, _TAG_LEDGER)
        ledger = BootstrapLedger(sampler.theta_hat, levels, cfg.seed)
        delta_vec = delta_k(ledger, k)

        accepted_now: list[int] = []
        for i in active:
            vd = vds[i]
            if vd.degenerate:
                test = CITestResult(k, i, 0.0, (float(delta_vec[i]), float(delta_vec[i])),
                                    bool(delta_vec[i] == 0.0), vd.b_used, (0.0, 0.0),
                                    degenerate=True)
            else:
                world_changes = deltas[:, :, i].mean(axis=1)
                if center_t:
                    world_changes = world_changes - world_changes.mean()
                t_reps = world_changes / math.sqrt(vd.v1)
                test = ci_test(float(delta_vec[i]), vd, t_reps, k, i)
            results[i].trace.append(test)
            if test.contains_zero:
                accepted_now.append(i)

        for i in accepted_now:
            _finalize_parameter(results[i], ledger, k, accepted=True,
                                b_max=results[i].trace[-1].b_used if vds[i].degenerate
                                else choose_b(vds[i], cfg.eta0),
                                cfg=cfg)
            active.remove(i)
        if not active:
            break

    if active:
        for i in active:
            flags.append(f"parameter {names[i]}: no detectable stop by k={max_k}")
            b_max = None
            if not vds[i].degenerate:
                b_max = choose_b(vds[i], cfg.eta0)
            _finalize_parameter(results[i], ledger, max_k, accepted=False,
                                b_max=b_max or ledger.counts[0], cfg=cfg,
                                report_order=max_k)

    return CorrectionReport(results, sampler.theta_hat, cfg.seed, _config_dict(cfg),
                            sampler.evaluations, flags)


def _finalize_parameter(result: ParameterResult, ledger: BootstrapLedger, k: int,
                        accepted: bool, b_max: int, cfg: BootstrapConfig,
                        report_order: int | None = None) -> None:
    i = result.index
    order = (k - 1) if report_order is None else report_order
    result.accepted = accepted
    result.k = k
    result.b_max = int(b_max)
    result.delta = float(delta_k(ledger, k)[i])
    d_reps = or_resample(ledger.leaf_terms[k][:, i], cfg.h,
                         rng.derive_seed(cfg.seed, _TAG_OR, k, i, 0))
    result.delta_interval = percentile_interval(d_reps)
    result.corrected = float(corrected_estimate(ledger, order).theta_tilde[i])
    c_reps = or_resample(_estimator_leaf_terms(ledger, order)[:, i], cfg.h,
                         rng.derive_seed(cfg.seed, _TAG_OR, k, i, 1))
    result.corrected_interval = percentile_interval(c_reps)


def _config_dict(cfg: BootstrapConfig) -> dict:
    return {k: getattr(cfg, k) for k in
            ("b", "c", "d", "h", "eta0", "seed", "max_b",
             "var_outer", "var_inner", "var_cc", "var_dd")}
