"""Parametric bootstrap of the agreement matrix and nested relinked samples.

The linked/unlinked blocks of a partitioned agreement matrix are treated
as draws from the match and non-match Bernoulli products. A bootstrap
replicate redraws every row from its block's distribution, rescores,
relinks with the original rule and pair count, and re-evaluates the
estimator. Nesting the redraw inside each replicate's own partition gives
double and triple bootstrap samples; the ledger retains every level plus
the per-replicate telescoping terms the bias-change estimators average.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from math import comb
from pathlib import Path

import numpy as np

from . import rng
from ._kernel import ols_pairs_batch, relink_batch, relink_ols_batch
from .agreement import AgreementMatrix
from .estimators import BatchDesign, EstimatorSpec, evaluate, evaluate_batch
from .linkage import ScoredPairs, link_one_to_one, weight_terms
from .match_model import MatchModel, codes_to_bits
from .tables import LinkedDataset

_TAG_LEDGER = 1
_TAG_VARIANCE = 2
_TAG_OR = 3

_CHUNK = 1 << 16
_MAX_FAST_VARS = 16          # fast engine tabulates all 2^L patterns


@dataclass(frozen=True)
class BootstrapConfig:
    """Replicate counts and stream seed for one correction run.

    b, c, d size the first/second/third bootstrap levels, h the
    with-replacement replicates behind reported percentile intervals and
    eta0 the Monte Carlo precision target that drives the adaptive choice
    of the first-level count. var_outer x var_inner size the nested
    variance-decomposition run; var_cc/var_dd are its inner averaging
    depths at orders 2 and 3.
    """

    b: int = 100
    c: int = 100
    d: int = 100
    h: int = 2000
    eta0: float = 0.5
    seed: int = 0
    max_b: int = 450
    var_outer: int = 100
    var_inner: int = 100
    var_cc: int = 4
    var_dd: int = 4

    def __post_init__(self) -> None:
        for name in ("b", "c", "d"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.h < 100:
            raise ValueError("h must be >= 100")
        if not 0.0 < self.eta0 < 1.0:
            raise ValueError("eta0 must lie in (0, 1)")
        if self.var_outer < 2 or self.var_inner < 2:
            raise ValueError("variance run needs at least 2 outer and 2 inner replicates")

    def dims(self, depth: int) -> tuple[int, ...]:
        return (self.b, self.c, self.d)[:depth]


class ReplicateFailure(RuntimeError):
    """An estimator kept failing on redrawn replicates."""


_T53 = 1 << 53


def _rank_tables(cum_probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Integer draw thresholds and a 256-bin guide table for a rank CDF.

    A 53-bit draw t selects the first rank with t <= thresh[rank];
    guide[t >> 45] gives the first candidate rank for t's bin so the
    linear scan almost always stops immediately.
    """
    thresh = np.floor(cum_probs * _T53).astype(np.uint64)
    thresh[-1] = _T53  # draws are < 2^53, so the last rank always catches
    bins = (np.arange(256, dtype=np.uint64) << np.uint64(45))
    guide = np.searchsorted(thresh, bins, side="left").astype(np.int32)
    return thresh, np.minimum(guide, len(thresh) - 1)


def resample_agreement_matrix(gamma: AgreementMatrix, model: MatchModel,
                              seed: int) -> AgreementMatrix:
    """Redraw every row from its block's Bernoulli product.

    Linked-block rows are drawn entrywise Bern(m_l), unlinked rows
    Bern(u_l); the partition labels are copied over. Deterministic in
    `seed`.
    """
    if not gamma.partitioned:
        raise ValueError("agreement matrix must be partitioned before resampling")
    if gamma.n_vars != model.n_vars:
        raise ValueError("model dimension does not match the agreement matrix")
    gen = np.random.default_rng(seed)
    probs = np.where(gamma.linked_mask[:, None], model.m[None, :], model.u[None, :])
    bits = (gen.random(probs.shape) < probs).astype(np.uint8)
    return AgreementMatrix(bits, gamma.n_a, gamma.n_b, gamma.linked_mask.copy())


# ---------------------------------------------------------------------------
# Sampling context shared by every replicate of a run
# ---------------------------------------------------------------------------

@dataclass
class RelinkSampler:
    """Precomputed tables to redraw + relink replicates for one problem."""

    linked: LinkedDataset
    model: MatchModel
    n_a: int
    n_b: int
    n_links: int
    strategy: str = "greedy"
    spec: EstimatorSpec | None = None
    estimator_fn: object | None = None          # callable (LinkedDataset) -> vector
    # fast-path tables (weight ranks, integer thresholds, guide bins)
    rank_weights: np.ndarray = field(init=False)
    n_ranks: int = field(init=False)
    thresh_match: np.ndarray = field(init=False)
    thresh_unmatch: np.ndarray = field(init=False)
    guide_match: np.ndarray = field(init=False)
    guide_unmatch: np.ndarray = field(init=False)
    design: BatchDesign | None = field(init=False, default=None)
    theta_hat: np.ndarray = field(init=False)
    evaluations: int = field(init=False, default=0)
    _ols_cols: tuple | None = field(init=False, default=None)

    def __post_init__(self) -> None:
        if self.model.n_vars > _MAX_FAST_VARS:
            raise ValueError(f"more than {_MAX_FAST_VARS} linking variables is unsupported")
        if (self.spec is None) == (self.estimator_fn is None):
            raise ValueError("provide exactly one of spec or estimator_fn")
        gain, base = weight_terms(self.model)
        bits = codes_to_bits(np.arange(1 << self.model.n_vars), self.model.n_vars)
        code_weights = bits.astype(np.float64) @ gain + base
        # rank 0 = heaviest weight value; equal weights share a rank so the
        # greedy tie-break stays (weight desc, i asc, j asc)
        self.rank_weights = np.unique(code_weights)[::-1]
        self.n_ranks = len(self.rank_weights)
        rank_of_code = np.searchsorted(-self.rank_weights, -code_weights)
        for matched in (True, False):
            probs = self.model.pattern_probabilities(matched)
            rank_probs = np.bincount(rank_of_code, weights=probs, minlength=self.n_ranks)
            thresh, guide = _rank_tables(np.cumsum(rank_probs))
            if matched:
                self.thresh_match, self.guide_match = thresh, guide
            else:
                self.thresh_unmatch, self.guide_unmatch = thresh, guide
        if self.spec is not None:
            self.design = BatchDesign.from_linked(self.linked, self.spec)
            if self.spec.kind == "ols":
                width = max(self.n_a, self.n_b)
                cov = np.zeros((len(self.design.cov_values), width))
                for k, vals in enumerate(self.design.cov_values):
                    cov[k, :len(vals)] = vals
                y = np.zeros(width)
                y[:len(self.design.y_values)] = self.design.y_values
                self._ols_cols = (y, int(self.design.y_side), cov,
                                  self.design.cov_sides.astype(np.int64))
        # evaluate theta_hat through the same code path replicates use, so an
        # error-free relink reproduces it bit for bit
        pairs = self.linked.pairs
        if self.fused:
            theta = ols_pairs_batch(pairs[None, :, 0].astype(np.int32),
                                    pairs[None, :, 1].astype(np.int32),
                                    *self._ols_cols)[0]
        elif self.design is not None:
            theta = evaluate_batch(self.design, pairs[None, :, 0], pairs[None, :, 1])[0]
        else:
            theta = self._evaluate_single(pairs)
        theta = np.asarray(theta, dtype=np.float64).reshape(-1)
        if not np.isfinite(theta).all():
            raise ValueError("estimator is undefined on the original linked dataset")
        self.theta_hat = theta

    @classmethod
    def for_problem(cls, linked: LinkedDataset, model: MatchModel,
                    estimator: EstimatorSpec | object, strategy: str = "greedy") -> "RelinkSampler":
        spec = estimator if isinstance(estimator, EstimatorSpec) else None
        fn = None if spec is not None else estimator
        return cls(linked, model, linked.table_a.n, linked.table_b.n, linked.n,
                   strategy=strategy, spec=spec, estimator_fn=fn)

    @property
    def dim(self) -> int:
        return len(self.theta_hat)

    @property
    def fast(self) -> bool:
        return self.spec is not None and self.strategy == "greedy"

    @property
    def fused(self) -> bool:
        return self.fast and self.spec.kind == "ols"

    def root_mask(self) -> np.ndarray:
        return self.masks_from_pairs(self.linked.pairs[None, :, :])

    def masks_from_pairs(self, pairs: np.ndarray) -> np.ndarray:
        """(P, n_links, 2) index pairs -> (P, n_pairs) linked-block masks."""
        pairs = np.asarray(pairs)
        rows = pairs[..., 0].astype(np.int64) * self.n_b + pairs[..., 1]
        masks = np.zeros((pairs.shape[0], self.n_a * self.n_b), dtype=np.uint8)
        masks[np.arange(pairs.shape[0])[:, None], rows] = 1
        return masks

    # -- single-replicate (reference) path ---------------------------------

    def _ranks_one(self, state: np.uint64, mask: np.ndarray) -> np.ndarray:
        """Same draws as the kernel, via the vectorized stream."""
        t = rng.stream_draws53(state, self.n_a * self.n_b)
        ranks = np.empty(len(t), dtype=np.int64)
        for block, thresh in ((1, self.thresh_match), (0, self.thresh_unmatch)):
            sel = mask == block
            ranks[sel] = np.searchsorted(thresh, t[sel], side="left")
        return ranks

    def _relink_one(self, ranks: np.ndarray) -> np.ndarray:
        scored = ScoredPairs(self.rank_weights[ranks], self.n_a, self.n_b)
        relinked = link_one_to_one(scored, self.linked.table_a, self.linked.table_b,
                                   self.n_links, self.strategy)
        return relinked.pairs

    def _evaluate_single(self, pairs: np.ndarray) -> np.ndarray:
        data = self.linked.replaced(pairs)
        if self.estimator_fn is not None:
            return np.asarray(self.estimator_fn(data), dtype=np.float64).reshape(-1)
        return evaluate(self.spec, data)

    # -- batched path -------------------------------------------------------

    def _relink_chunk(self, states: np.ndarray, parent_idx: np.ndarray,
                      masks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.fast:
            return relink_batch(states, parent_idx, masks,
                                self.thresh_match, self.thresh_unmatch,
                                self.guide_match, self.guide_unmatch, self.n_ranks,
                                self.n_a, self.n_b, self.n_links)
        idx_a = np.empty((len(states), self.n_links), np.int32)
        idx_b = np.empty((len(states), self.n_links), np.int32)
        for r, (s, p) in enumerate(zip(states, parent_idx)):
            pairs = self._relink_one(self._ranks_one(s, masks[p]))
            idx_a[r], idx_b[r] = pairs[:, 0], pairs[:, 1]
        return idx_a, idx_b

    def _estimate_chunk(self, idx_a: np.ndarray, idx_b: np.ndarray) -> np.ndarray:
        if self.design is not None:
            return evaluate_batch(self.design, idx_a.astype(np.int64), idx_b.astype(np.int64))
        out = np.empty((idx_a.shape[0], self.dim))
        for r in range(idx_a.shape[0]):
            pairs = np.stack([idx_a[r], idx_b[r]], axis=1).astype(np.int64)
            try:
                out[r] = self._evaluate_single(pairs)
            except Exception:
                out[r] = np.nan
        return out

    def _run_chunk(self, states: np.ndarray, parent_idx: np.ndarray, masks: np.ndarray,
                   keep_pairs: bool) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if self.fused:
            idx_a, idx_b, vals = relink_ols_batch(
                states, parent_idx, masks,
                self.thresh_match, self.thresh_unmatch,
                self.guide_match, self.guide_unmatch, self.n_ranks,
                self.n_a, self.n_b, self.n_links,
                *self._ols_cols, keep_pairs)
            return idx_a, idx_b, vals
        idx_a, idx_b = self._relink_chunk(states, parent_idx, masks)
        return idx_a, idx_b, self._estimate_chunk(idx_a, idx_b)

    def replicate_level(self, states: np.ndarray, parent_idx: np.ndarray,
                        masks: np.ndarray, keep_pairs: bool
                        ) -> tuple[np.ndarray, np.ndarray | None]:
        """Estimates (R, p) for one level; optionally the relinked pairs.

        Replicates whose estimator fails are redrawn on fresh derived
        streams up to 10 times, then the run aborts.
        """
        n = len(states)
        self.evaluations += n
        est = np.empty((n, self.dim))
        pairs = np.empty((n, self.n_links, 2), dtype=np.int32) if keep_pairs else None
        for lo in range(0, n, _CHUNK):
            hi = min(lo + _CHUNK, n)
            st = states[lo:hi].copy()
            idx_a, idx_b, vals = self._run_chunk(st, parent_idx[lo:hi], masks, keep_pairs)
            bad = np.flatnonzero(~np.isfinite(vals).all(axis=1))
            attempt = 0
            while len(bad):
                attempt += 1
                if attempt > 10:
                    raise ReplicateFailure(
                        f"estimator failed on {len(bad)} replicates after 10 redraws "
                        f"(first at chunk offset {lo + bad[0]})")
                st[bad] = rng.retry_states(st[bad], attempt)
                ra, rb, rv = self._run_chunk(st[bad], parent_idx[lo:hi][bad], masks, keep_pairs)
                vals[bad] = rv
                if keep_pairs:
                    idx_a[bad], idx_b[bad] = ra, rb
                bad = bad[~np.isfinite(vals[bad]).all(axis=1)]
            est[lo:hi] = vals
            if keep_pairs:
                pairs[lo:hi, :, 0] = idx_a
                pairs[lo:hi, :, 1] = idx_b
        return est, pairs

    def sample_tree(self, dims: tuple[int, ...], master_seed: int, tag: int) -> list[np.ndarray]:
        """Nested bootstrap estimates, level l shaped dims[:l] + (p,).

        Level 1 redraws from the original partition; level l > 1 redraws
        each replicate from its level-(l-1) parent's own relinked
        partition. Streams are keyed by (tag, level, path), so results are
        independent of execution order and chunking.
        """
        levels: list[np.ndarray] = []
        masks = self.root_mask()
        parent_count = 1
        for level, width in enumerate(dims, start=1):
            n_rep = parent_count * width
            states = rng.path_states(master_seed, tag, level, dims[:level])
            parent_idx = np.repeat(np.arange(parent_count, dtype=np.int64), width)
            keep = level < len(dims)
            est, pairs = self.replicate_level(states, parent_idx, masks, keep)
            levels.append(est.reshape(dims[:level] + (self.dim,)))
            if keep:
                masks = self.masks_from_pairs(pairs)
                parent_count = n_rep
        return levels


# ---------------------------------------------------------------------------
# Ledger
# ---------------------------------------------------------------------------

def telescoping_coefficients(k: int) -> np.ndarray:
    """Coefficients c_j with sum_j c_j * M_j(b) = per-b term of the order-k
    bias change: c_j = (-1)^j [C(k+1, j+1) - C(k, j+1)], j = 0..k."""
    return np.array([(-1) ** j * (comb(k + 1, j + 1) - comb(k, j + 1))
                     for j in range(k + 1)], dtype=np.float64)


def correction_coefficients(k: int) -> np.ndarray:
    """Alternating binomial coefficients of the order-k corrected estimator:
    (-1)^j C(k+1, j+1) on the level-j mean, j = 0..k."""
    return np.array([(-1) ** j * comb(k + 1, j + 1) for j in range(k + 1)], dtype=np.float64)


@dataclass
class BootstrapLedger:
    """All estimator evaluations of one nested bootstrap run.

    levels[l-1] holds the level-l estimates with shape (b, c, ..., p);
    leaf_terms[k] the per-first-level-replicate terms whose mean is the
    order-k bias change delta(k) = corrected(k) - corrected(k-1).
    """

    theta_hat: np.ndarray
    levels: list[np.ndarray]
    seed: int
    leaf_terms: dict[int, np.ndarray] = field(init=False)

    def __post_init__(self) -> None:
        self.theta_hat = np.asarray(self.theta_hat, dtype=np.float64).reshape(-1)
        for lvl, arr in enumerate(self.levels, start=1):
            if arr.ndim != lvl + 1 or arr.shape[-1] != self.dim:
                raise ValueError(f"level {lvl} array has wrong shape {arr.shape}")
        self.leaf_terms = {k: self.leaf_terms_for(k) for k in range(1, self.depth + 1)}

    @property
    def dim(self) -> int:
        return len(self.theta_hat)

    @property
    def depth(self) -> int:
        return len(self.levels)

    @property
    def counts(self) -> tuple[int, ...]:
        return tuple(self.levels[-1].shape[:-1]) if self.levels else ()

    def level_mean_per_b(self, j: int) -> np.ndarray:
        """M_j(b): the level-j estimates averaged within first-level replicate b."""
        if j == 0:
            b = self.levels[0].shape[0] if self.levels else 1
            return np.broadcast_to(self.theta_hat, (b, self.dim))
        arr = self.levels[j - 1]
        if j == 1:
            return arr
        return arr.mean(axis=tuple(range(1, j)))

    def level_grand_mean(self, j: int) -> np.ndarray:
        if j == 0:
            return self.theta_hat
        return self.levels[j - 1].mean(axis=tuple(range(self.levels[j - 1].ndim - 1)))

    def leaf_terms_for(self, k: int) -> np.ndarray:
        if not 1 <= k <= self.depth:
            raise ValueError(f"order {k} exceeds ledger depth {self.depth}")
        coeffs = telescoping_coefficients(k)
        out = np.zeros_like(self.level_mean_per_b(1))
        for j, cj in enumerate(coeffs):
            out += cj * self.level_mean_per_b(j)
        return out

    def to_json(self, path: str | Path | None = None) -> str:
        doc = {
            "seed": self.seed,
            "counts": list(self.counts),
            "theta_hat": self.theta_hat.tolist(),
            "levels": [lvl.tolist() for lvl in self.levels],
            "leaf_terms": {str(k): v.tolist() for k, v in self.leaf_terms.items()},
        }
        text = json.dumps(doc)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, source: str | Path) -> "BootstrapLedger":
        text = Path(source).read_text() if isinstance(source, Path) else source
        doc = json.loads(text)
        return cls(np.array(doc["theta_hat"]),
                   [np.array(lvl) for lvl in doc["levels"]],
                   doc["seed"])


def generate_ambis(linked: LinkedDataset, gamma: AgreementMatrix, model: MatchModel,
                   depth: int, cfg: BootstrapConfig,
                   estimator: EstimatorSpec | object,
                   strategy: str = "greedy") -> BootstrapLedger:
    """Nested bootstrap integrated samples at depth 1..3 (4 if configured).

    The relink reuses the original rule and pair count; the match model is
    never re-estimated. Identical inputs and cfg.seed give a bit-identical
    ledger at any thread count.
    """
    if not 1 <= depth <= 4:
        raise ValueError("depth must be between 1 and 4")
    if not gamma.partitioned:
        raise ValueError("agreement matrix must carry the linked partition")
    mask = gamma.linked_mask
    expect = np.zeros_like(mask)
    expect[gamma.pair_rows(linked.pairs)] = True
    if not np.array_equal(mask, expect):
        raise ValueError("agreement matrix partition does not match the linked dataset")
    dims = (cfg.b, cfg.c, cfg.d, cfg.d)[:depth]
    sampler = RelinkSampler.for_problem(linked, model, estimator, strategy)
    levels = sampler.sample_tree(dims, cfg.seed, _TAG_LEDGER)
    return BootstrapLedger(sampler.theta_hat, levels, cfg.seed)


def nested_delta_samples(sampler: RelinkSampler, k: int, cfg: BootstrapConfig,
                         master_seed: int) -> np.ndarray:
    """Order-k bias-change terms from a nested outer x inner run.

    Each of the var_outer worlds is itself a first-level bootstrap sample;
    within world h, var_inner replicates each contribute one telescoping
    term (averaging var_cc / var_dd deeper draws at orders >= 2). Returns
    (var_outer, var_inner, p).
    """
    dims = (cfg.var_outer, cfg.var_inner, cfg.var_cc, cfg.var_dd)[:k + 1]
    levels = sampler.sample_tree(dims, master_seed, _TAG_VARIANCE + k)
    coeffs = telescoping_coefficients(k)
    h, b = dims[0], dims[1]
    out = np.zeros((h, b, sampler.dim))
    for j, cj in enumerate(coeffs):
        if j == 0:
            term = levels[0][:, None, :]                     # world-level estimate
        else:
            arr = levels[j]                                  # shape dims[:j+1] + (p,)
            term = arr.mean(axis=tuple(range(2, arr.ndim - 1))) if arr.ndim > 3 else arr
        out += cj * term
    return out


def or_resample(terms: np.ndarray, h: int = 2000, seed: int = 0) -> np.ndarray:
    """H with-replacement mean replicates of the retained terms.

    Each replicate is the mean of M draws from `terms`, M = len(terms).
    Deterministic in `seed`.
    """
    terms = np.asarray(terms, dtype=np.float64)
    if terms.size == 0:
        raise ValueError("terms must be non-empty")
    flat = terms.reshape(len(terms), -1)
    gen = np.random.default_rng(seed)
    idx = gen.integers(0, len(terms), size=(h, len(terms)))
    out = flat[idx].mean(axis=1)
    return out[:, 0] if terms.ndim == 1 else out
