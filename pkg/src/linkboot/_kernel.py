"""Numba kernels for the bootstrap hot path.

A replicate redraws every candidate pair's agreement pattern from the
match/non-match pattern distribution of its parent's partition, then
relinks greedily by weight. Patterns are drawn as integer codes from the
2^L-cell categorical distribution (one uniform per pair) and the greedy
pass runs over precomputed weight buckets, so a replicate costs a few
microseconds instead of a per-bit Bernoulli draw plus a sort.

Work arrays are allocated once per parallel chunk, not per replicate;
results are written into per-replicate slots so thread count and chunk
shape never change the output.

RNG contract: every replicate owns a splitmix64 stream; uniform k is
finalize64(state + k * GAMMA) / 2^53, matching rng.stream_uniforms.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_INV53 = 1.0 / 9007199254740992.0

_PAR_CHUNKS = 256


@njit(cache=True, inline="always")
def _next_t(state):
    """53-bit integer draw; t/2^53 is the stream's uniform."""
    s = state + _GAMMA
    z = s
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    z = z ^ (z >> np.uint64(31))
    return s, z >> np.uint64(11)


@njit(cache=True, inline="always")
def _draw_and_bucket(state, mask, thresh_match, thresh_unmatch,
                     guide_match, guide_unmatch, counts, ranks, bucket):
    """Draw a pattern weight-rank per pair; order pairs by (rank, index).

    thresh_* are cumulative rank probabilities scaled to 2^53 (uint64);
    guide_* index the first candidate rank for each of 256 bins of the
    draw, so the scan below almost never iterates.
    """
    n_pairs = mask.shape[0]
    n_ranks = counts.shape[0] - 1
    for k in range(n_ranks + 1):
        counts[k] = 0
    s = state
    for pair in range(n_pairs):
        s, t = _next_t(s)
        g = t >> np.uint64(45)
        if mask[pair] == 1:
            rk = guide_match[g]
            while t > thresh_match[rk]:
                rk += 1
        else:
            rk = guide_unmatch[g]
            while t > thresh_unmatch[rk]:
                rk += 1
        ranks[pair] = rk
        counts[rk + 1] += 1
    for k in range(1, n_ranks + 1):
        counts[k] += counts[k - 1]
    for pair in range(n_pairs):         # ascending pair order = (i, j) tie-break
        rk = ranks[pair]
        bucket[counts[rk]] = pair
        counts[rk] += 1
    return s


@njit(cache=True, inline="always")
def _solve_small(a, b, out):
    """Gaussian elimination with partial pivoting; returns False if singular."""
    p = b.shape[0]
    for col in range(p):
        piv = col
        best = abs(a[col, col])
        for row in range(col + 1, p):
            v = abs(a[row, col])
            if v > best:
                best = v
                piv = row
        if best < 1e-12:
            return False
        if piv != col:
            for cc in range(p):
                tmp = a[col, cc]
                a[col, cc] = a[piv, cc]
                a[piv, cc] = tmp
            tmpb = b[col]
            b[col] = b[piv]
            b[piv] = tmpb
        inv = 1.0 / a[col, col]
        for row in range(col + 1, p):
            f = a[row, col] * inv
            if f != 0.0:
                for cc in range(col, p):
                    a[row, cc] -= f * a[col, cc]
                b[row] -= f * b[col]
    for col in range(p - 1, -1, -1):
        acc = b[col]
        for cc in range(col + 1, p):
            acc -= a[col, cc] * out[cc]
        out[col] = acc / a[col, col]
    return True


@njit(cache=True, parallel=True)
def relink_batch(states, parent_idx, parent_masks, thresh_match, thresh_unmatch,
                 guide_match, guide_unmatch, n_ranks, n_a, n_b, n_links):
    """Redraw + greedy relink for a batch of replicates.

    states: (R,) uint64 stream state per replicate.
    parent_idx: (R,) row into parent_masks.
    parent_masks: (P, n_pairs) uint8, 1 = pair is in the parent's linked block.
    Returns idx_a, idx_b of shape (R, n_links).
    """
    n_reps = states.shape[0]
    n_pairs = parent_masks.shape[1]
    idx_a = np.empty((n_reps, n_links), np.int32)
    idx_b = np.empty((n_reps, n_links), np.int32)
    n_chunks = min(_PAR_CHUNKS, n_reps) if n_reps > 0 else 0
    for chunk in prange(n_chunks):
        ranks = np.empty(n_pairs, np.int32)
        counts = np.empty(n_ranks + 1, np.int32)
        bucket = np.empty(n_pairs, np.int32)
        used_a = np.empty(n_a, np.uint8)
        used_b = np.empty(n_b, np.uint8)
        lo = chunk * n_reps // n_chunks
        hi = (chunk + 1) * n_reps // n_chunks
        for r in range(lo, hi):
            mask = parent_masks[parent_idx[r]]
            _draw_and_bucket(states[r], mask, thresh_match, thresh_unmatch,
                             guide_match, guide_unmatch, counts, ranks, bucket)
            for k in range(n_a):
                used_a[k] = 0
            for k in range(n_b):
                used_b[k] = 0
            taken = 0
            for t in range(n_pairs):
                pair = bucket[t]
                i = pair // n_b
                j = pair - i * n_b
                if used_a[i] == 0 and used_b[j] == 0:
                    used_a[i] = 1
                    used_b[j] = 1
                    idx_a[r, taken] = i
                    idx_b[r, taken] = j
                    taken += 1
                    if taken == n_links:
                        break
    return idx_a, idx_b


@njit(cache=True, parallel=True)
def relink_ols_batch(states, parent_idx, parent_masks, thresh_match, thresh_unmatch,
                     guide_match, guide_unmatch, n_ranks, n_a, n_b, n_links,
                     y_vals, y_side, cov_vals, cov_sides, want_pairs):
    """Redraw + relink + least-squares fit, fused per replicate.

    y_vals / cov_vals are full source columns; *_side selects whether a
    matched pair (i, j) reads them at i (source A, side 0) or j (side 1).
    Design columns are [1, covariates...]. Singular designs yield NaN
    estimates for the caller's redraw policy. Index arrays are only
    written when want_pairs is set (non-terminal levels need them).
    """
    n_reps = states.shape[0]
    n_pairs = parent_masks.shape[1]
    n_cov = cov_vals.shape[0]
    p = 1 + n_cov
    est = np.empty((n_reps, p))
    n_keep = n_links if want_pairs else 1
    idx_a = np.empty((n_reps if want_pairs else 1, n_keep), np.int32)
    idx_b = np.empty((n_reps if want_pairs else 1, n_keep), np.int32)
    n_chunks = min(_PAR_CHUNKS, n_reps) if n_reps > 0 else 0
    for chunk in prange(n_chunks):
        ranks = np.empty(n_pairs, np.int32)
        counts = np.empty(n_ranks + 1, np.int32)
        bucket = np.empty(n_pairs, np.int32)
        used_a = np.empty(n_a, np.uint8)
        used_b = np.empty(n_b, np.uint8)
        xtx = np.empty((p, p))
        xty = np.empty(p)
        row = np.empty(p)
        beta = np.empty(p)
        lo = chunk * n_reps // n_chunks
        hi = (chunk + 1) * n_reps // n_chunks
        for r in range(lo, hi):
            mask = parent_masks[parent_idx[r]]
            _draw_and_bucket(states[r], mask, thresh_match, thresh_unmatch,
                             guide_match, guide_unmatch, counts, ranks, bucket)
            for k in range(n_a):
                used_a[k] = 0
            for k in range(n_b):
                used_b[k] = 0
            for a_ in range(p):
                xty[a_] = 0.0
                for b_ in range(p):
                    xtx[a_, b_] = 0.0
            taken = 0
            for t in range(n_pairs):
                pair = bucket[t]
                i = pair // n_b
                j = pair - i * n_b
                if used_a[i] == 0 and used_b[j] == 0:
                    used_a[i] = 1
                    used_b[j] = 1
                    if want_pairs:
                        idx_a[r, taken] = i
                        idx_b[r, taken] = j
                    row[0] = 1.0
                    for k in range(n_cov):
                        row[k + 1] = cov_vals[k, i] if cov_sides[k] == 0 else cov_vals[k, j]
                    y = y_vals[i] if y_side == 0 else y_vals[j]
                    for a_ in range(p):
                        va = row[a_]
                        xty[a_] += va * y
                        for b_ in range(a_, p):
                            xtx[a_, b_] += va * row[b_]
                    taken += 1
                    if taken == n_links:
                        break
            for a_ in range(1, p):
                for b_ in range(a_):
                    xtx[a_, b_] = xtx[b_, a_]
            if _solve_small(xtx, xty, beta):
                for k in range(p):
                    est[r, k] = beta[k]
            else:
                for k in range(p):
                    est[r, k] = np.nan
    return idx_a, idx_b, est


@njit(cache=True, parallel=True)
def ols_pairs_batch(idx_a, idx_b, y_vals, y_side, cov_vals, cov_sides):
    """Least-squares fit on given matched pairs, same arithmetic as the
    fused kernel so identical relinks give bit-identical estimates."""
    n_reps, n_links = idx_a.shape
    n_cov = cov_vals.shape[0]
    p = 1 + n_cov
    est = np.empty((n_reps, p))
    for r in prange(n_reps):
        xtx = np.zeros((p, p))
        xty = np.zeros(p)
        row = np.empty(p)
        for t in range(n_links):
            i = idx_a[r, t]
            j = idx_b[r, t]
            row[0] = 1.0
            for k in range(n_cov):
                row[k + 1] = cov_vals[k, i] if cov_sides[k] == 0 else cov_vals[k, j]
            y = y_vals[i] if y_side == 0 else y_vals[j]
            for a_ in range(p):
                va = row[a_]
                xty[a_] += va * y
                for b_ in range(a_, p):
                    xtx[a_, b_] += va * row[b_]
        for a_ in range(1, p):
            for b_ in range(a_):
                xtx[a_, b_] = xtx[b_, a_]
        beta = np.empty(p)
        if _solve_small(xtx, xty, beta):
            for k in range(p):
                est[r, k] = beta[k]
        else:
            for k in range(p):
                est[r, k] = np.nan
    return est


