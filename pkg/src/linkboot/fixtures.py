"""Bundled hormone linking experiment.

27 medical devices measured for worn hours (source B) and remaining
hormone amount (source A), linked on four noisy linking variables. The
true pairing, the mislinked pairing the weights produced, the agreement
matrix realization behind it and the match model are all shipped, so the
whole correction pipeline runs out of the box.
"""

from __future__ import annotations

from importlib import resources

import numpy as np

from .agreement import AgreementMatrix
from .estimators import EstimatorSpec
from .match_model import MatchModel
from .tables import LinkedDataset, RecordTable

HORMONE_M = (0.81, 0.62, 0.75, 0.83)
HORMONE_U = (0.17, 0.19, 0.15, 0.25)
HORMONE_N = 27


def _data_table(name: str) -> RecordTable:
    with resources.as_file(resources.files("linkboot.data").joinpath(name)) as path:
        return RecordTable.from_csv(path, name=name.removesuffix(".csv"))


def hormone_true_table() -> RecordTable:
    """The correctly constituted (hrs, amount) pairs."""
    return _data_table("hormone_true.csv")


def hormone_mislinked_table() -> RecordTable:
    """The mislinked pairs the weight-based 1-1 linker produced."""
    return _data_table("hormone_mislinked.csv")


def hormone_model() -> MatchModel:
    return MatchModel(np.array(HORMONE_M), np.array(HORMONE_U),
                      HORMONE_N / (HORMONE_N * HORMONE_N))


def hormone_spec() -> EstimatorSpec:
    return EstimatorSpec("ols", response="amount", covariates=("hrs",))


def hormone_sources() -> tuple[RecordTable, RecordTable]:
    """Source A carries the response (amount), source B the regressor (hrs)."""
    true = hormone_true_table()
    a = RecordTable({"amount": true.column("amount").copy()}, name="source_a")
    b = RecordTable({"hrs": true.column("hrs").copy()}, name="source_b")
    return a, b


def hormone_mislink_permutation() -> np.ndarray:
    """(a_index, b_index) pairs of the mislinked dataset.

    Record b of source B owns the b-th hrs value; the amount printed next
    to it in the mislinked table identifies the A record it was linked
    to. Duplicated amount values are disambiguated by preferring the
    correctly-linked assignment, then matching remaining candidates in
    ascending index order.
    """
    true = hormone_true_table()
    mis = hormone_mislinked_table()
    hrs = true.column("hrs")
    amount = true.column("amount")

    pairs: dict[int, int] = {}
    unresolved: list[tuple[int, list[int]]] = []
    used: set[int] = set()
    for b in range(HORMONE_N):
        row_hrs = mis.column("hrs")[b]
        row_amt = mis.column("amount")[b]
        (b_idx,) = np.flatnonzero(hrs == row_hrs)
        cands = list(np.flatnonzero(amount == row_amt))
        if len(cands) == 1:
            pairs[int(b_idx)] = int(cands[0])
            used.add(int(cands[0]))
        else:
            unresolved.append((int(b_idx), [int(c) for c in cands]))
    # prefer fixed points, then lowest-index to lowest-index
    for b_idx, cands in sorted(unresolved):
        if b_idx in cands and b_idx not in used:
            pairs[b_idx] = b_idx
            used.add(b_idx)
    for b_idx, cands in sorted(unresolved):
        if b_idx not in pairs:
            pick = min(c for c in cands if c not in used)
            pairs[b_idx] = pick
            used.add(pick)
    out = np.array(sorted((a, b) for b, a in pairs.items()), dtype=np.int64)
    assert len({a for a, _ in out}) == HORMONE_N
    return out


def hormone_agreement() -> AgreementMatrix:
    """The bundled 729 x 4 realization, partitioned at the mislinked pairs."""
    table = _data_table("hormone_agreement.csv")
    bits = np.stack([table.column(f"g{l}") for l in range(1, 5)], axis=1).astype(np.uint8)
    mask = table.column("linked").astype(bool)
    return AgreementMatrix(bits, HORMONE_N, HORMONE_N, mask)


def hormone_linked() -> LinkedDataset:
    """The mislinked integrated dataset with its linkage weights."""
    from .linkage import score_pairs

    gamma = hormone_agreement()
    a, b = hormone_sources()
    pairs = gamma.linked_pairs()
    weights = score_pairs(gamma, hormone_model())[gamma.pair_rows(pairs)]
    return LinkedDataset(a, b, pairs, weights)
