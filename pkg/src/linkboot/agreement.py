"""Agreement matrices over candidate record pairs.

For sources A (n_A records) and B (n_B records) compared on L linking
variables, the agreement matrix holds one binary row per candidate pair
(i, j), bit l set when comparator l declares the values equal. Rows are
ordered i-major: pair (i, j) lives at row i * n_B + j.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tables import LinkedDataset, RecordTable, SchemaError


class MissingLinkingValue(ValueError):
    """A linking variable is empty; missing linking data is unsupported."""


@dataclass(frozen=True)
class Comparator:
    """Declares how one linking field is compared between the sources.

    kind: 'exact' (string equality), 'normalized' (casefold + strip before
    comparing) or 'numeric' (equality of parsed floats).
    """

    field: str
    kind: str = "exact"

    _KINDS = ("exact", "normalized", "numeric")

    def __post_init__(self) -> None:
        if self.kind not in self._KINDS:
            raise ValueError(f"unknown comparator kind {self.kind!r}; expected one of {self._KINDS}")

    def canonical(self, values: np.ndarray, table: str) -> np.ndarray:
        out = []
        for idx, v in enumerate(values):
            if v is None or (isinstance(v, float) and np.isnan(v)) or str(v).strip() == "":
                raise MissingLinkingValue(
                    f"record {idx} of {table} has no value for linking field {self.field!r}")
            if self.kind == "numeric":
                out.append(float(v))
            elif self.kind == "normalized":
                out.append(str(v).strip().casefold())
            else:
                out.append(str(v))
        return np.array(out, dtype=object)


@dataclass
class AgreementMatrix:
    """Binary agreement patterns for all n_A x n_B candidate pairs.

    `linked_mask` partitions rows into the linked block (True) and the
    unlinked block; it stays None until a linked dataset is supplied.
    """

    bits: np.ndarray             # (n_A * n_B, L) uint8
    n_a: int
    n_b: int
    linked_mask: np.ndarray | None = field(default=None)

    def __post_init__(self) -> None:
        self.bits = np.ascontiguousarray(self.bits, dtype=np.uint8)
        if self.bits.ndim != 2 or self.bits.shape[0] != self.n_a * self.n_b:
            raise ValueError("bits must have n_A * n_B rows")
        if self.bits.shape[1] < 1:
            raise ValueError("at least one linking variable is required")
        if not np.isin(self.bits, (0, 1)).all():
            raise ValueError("agreement bits must be 0 or 1")
        if self.linked_mask is not None:
            self.linked_mask = np.asarray(self.linked_mask, dtype=bool).reshape(-1)
            if self.linked_mask.shape[0] != self.bits.shape[0]:
                raise ValueError("partition mask must label every row")

    @property
    def n_pairs(self) -> int:
        return self.bits.shape[0]

    @property
    def n_vars(self) -> int:
        return self.bits.shape[1]

    @property
    def partitioned(self) -> bool:
        return self.linked_mask is not None

    def row(self, i: int, j: int) -> np.ndarray:
        return self.bits[i * self.n_b + j]

    def pair_rows(self, pairs: np.ndarray) -> np.ndarray:
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        return pairs[:, 0] * self.n_b + pairs[:, 1]

    def with_partition(self, linked: LinkedDataset | np.ndarray) -> "AgreementMatrix":
        """Label the rows of `linked`'s pairs as the linked block."""
        pairs = linked.pairs if isinstance(linked, LinkedDataset) else np.asarray(linked)
        rows = self.pair_rows(pairs)
        if len(np.unique(rows)) != len(rows):
            raise ValueError("linked pairs contain duplicates")
        mask = np.zeros(self.n_pairs, dtype=bool)
        mask[rows] = True
        return AgreementMatrix(self.bits, self.n_a, self.n_b, mask)

    def linked_pairs(self) -> np.ndarray:
        if self.linked_mask is None:
            raise ValueError("agreement matrix has no partition")
        rows = np.flatnonzero(self.linked_mask)
        return np.stack([rows // self.n_b, rows % self.n_b], axis=1)


def build_agreement_matrix(source_a: RecordTable, source_b: RecordTable,
                           comparators: list[Comparator]) -> AgreementMatrix:
    """Compare every (i, j) candidate pair on each linking field.

    Partition labels are left unset; call `with_partition` once a linked
    dataset exists. Missing linking values raise, naming the record.
    """
    if source_a.n == 0 or source_b.n == 0:
        raise ValueError("both sources must be non-empty")
    if not comparators:
        raise ValueError("at least one linking field comparator is required")
    for comp in comparators:
        if comp.field not in source_a.columns or comp.field not in source_b.columns:
            raise SchemaError(f"linking field {comp.field!r} must exist in both sources")

    n_a, n_b = source_a.n, source_b.n
    bits = np.empty((n_a * n_b, len(comparators)), dtype=np.uint8)
    for l, comp in enumerate(comparators):
        va = comp.canonical(source_a.column(comp.field), source_a.name)
        vb = comp.canonical(source_b.column(comp.field), source_b.name)
        agree = (va[:, None] == vb[None, :])
        bits[:, l] = agree.reshape(-1)
    return AgreementMatrix(bits, n_a, n_b)
