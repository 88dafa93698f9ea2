"""Estimators evaluated on (re)linked datasets.

Two model families are supported: ordinary least squares and logistic
regression fitted by iteratively reweighted least squares. A spec names
the response and covariate columns; when `weight_field` is set, the log
of that column is appended as the final covariate (the usual guard
against informative survey sampling). Batched variants evaluate one spec
on many bootstrap relinks at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .tables import LinkedDataset

RANK_TOL = 1e-10
SCORE_TOL = 1e-8
MAX_IRLS = 100


class RankDeficientDesign(ValueError):
    pass


class SeparationError(RuntimeError):
    """Logistic likelihood is unbounded; some coefficient diverges."""


class NonBinaryResponse(ValueError):
    pass


@dataclass(frozen=True)
class EstimatorSpec:
    """Which model to fit and which columns feed it.

    kind: 'ols' or 'logistic'. An intercept is always included;
    `covariates` may be empty for an intercept-only model.
    """

    kind: str
    response: str
    covariates: tuple[str, ...] = ()
    weight_field: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("ols", "logistic"):
            raise ValueError(f"unknown estimator kind {self.kind!r}")
        object.__setattr__(self, "covariates", tuple(self.covariates))

    @property
    def dim(self) -> int:
        return 1 + len(self.covariates) + (1 if self.weight_field else 0)

    @property
    def parameter_names(self) -> list[str]:
        names = ["intercept", *self.covariates]
        if self.weight_field:
            names.append(f"log_{self.weight_field}")
        return names

    def design(self, data: LinkedDataset) -> tuple[np.ndarray, np.ndarray]:
        y = data.column(self.response).astype(np.float64)
        cols = [np.ones(data.n)]
        cols += [data.column(c).astype(np.float64) for c in self.covariates]
        if self.weight_field:
            wf = data.column(self.weight_field).astype(np.float64)
            if np.any(wf <= 0):
                raise ValueError(f"weight field {self.weight_field!r} must be positive to take logs")
            cols.append(np.log(wf))
        return np.column_stack(cols), y


def _check_rank(x: np.ndarray, names: list[str]) -> None:
    _, r, piv = scipy.linalg.qr(x, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    scale = np.linalg.norm(x, axis=0).max()
    rank = int((diag > RANK_TOL * scale).sum())
    if rank < x.shape[1]:
        bad = [names[p] for p in piv[rank:]]
        raise RankDeficientDesign(f"design matrix is rank deficient; collinear columns: {bad}")


def ols_fit(data: LinkedDataset, spec: EstimatorSpec) -> np.ndarray:
    """Least-squares coefficients (intercept first)."""
    x, y = spec.design(data)
    if x.shape[0] <= x.shape[1]:
        raise ValueError(f"need more than {x.shape[1]} observations, got {x.shape[0]}")
    _check_rank(x, spec.parameter_names)
    q, r = np.linalg.qr(x)
    return scipy.linalg.solve_triangular(r, q.T @ y)


def _sigmoid(eta: np.ndarray) -> np.ndarray:
    out = np.empty_like(eta)
    pos = eta >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-eta[pos]))
    ez = np.exp(eta[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _logistic_ll(y: np.ndarray, eta: np.ndarray) -> float:
    # log-likelihood written to stay finite for large |eta|
    return float(y @ eta - np.logaddexp(0.0, eta).sum())


def logistic_fit(data: LinkedDataset, spec: EstimatorSpec) -> np.ndarray:
    """Logistic coefficients by IRLS with step-halving.

    Stops when the largest score component drops below 1e-8; diverging
    coefficients with nondecreasing steps raise SeparationError.
    """
    x, y = spec.design(data)
    if not np.isin(y, (0.0, 1.0)).all():
        raise NonBinaryResponse("logistic response must be 0/1")
    if x.shape[0] <= x.shape[1]:
        raise ValueError(f"need more than {x.shape[1]} observations, got {x.shape[0]}")
    _check_rank(x, spec.parameter_names)

    beta = np.zeros(x.shape[1])
    ll = _logistic_ll(y, x @ beta)
    for _ in range(MAX_IRLS):
        eta = x @ beta
        p = _sigmoid(eta)
        score = x.T @ (y - p)
        if np.abs(score).max() < SCORE_TOL:
            return beta
        w = np.clip(p * (1.0 - p), 1e-10, None)
        h = (x * w[:, None]).T @ x
        step = np.linalg.solve(h, score)
        # step-halving keeps the log-likelihood nondecreasing
        scale = 1.0
        for _ in range(30):
            cand = beta + scale * step
            cand_ll = _logistic_ll(y, x @ cand)
            if cand_ll >= ll - 1e-12:
                break
            scale *= 0.5
        beta = beta + scale * step
        ll = cand_ll
        if np.abs(beta).max() > 30.0 and scale == 1.0:
            raise SeparationError("separation detected: coefficient diverging past 30")
    raise SeparationError("IRLS failed to converge in 100 iterations")


def evaluate(spec: EstimatorSpec, data: LinkedDataset) -> np.ndarray:
    """Dispatch to the fit matching `spec.kind`; pure in (spec, data)."""
    if spec.kind == "ols":
        return ols_fit(data, spec)
    return logistic_fit(data, spec)


# ---------------------------------------------------------------------------
# Batched evaluation over many relinks of the same source tables.
# ---------------------------------------------------------------------------

@dataclass
class BatchDesign:
    """Column data prearranged for gathering by (indexA, indexB) pairs."""

    spec: EstimatorSpec
    y_side: int                  # 0 -> gather by indexA, 1 -> by indexB
    y_values: np.ndarray
    cov_sides: np.ndarray        # (k,) int8
    cov_values: list[np.ndarray]
    is_binary_response: bool = field(init=False)

    def __post_init__(self) -> None:
        self.is_binary_response = bool(np.isin(self.y_values, (0.0, 1.0)).all())

    @classmethod
    def from_linked(cls, data: LinkedDataset, spec: EstimatorSpec) -> "BatchDesign":
        def fetch(name: str, log: bool = False) -> tuple[int, np.ndarray]:
            side = 0 if data.source_of(name) == "A" else 1
            table = data.table_a if side == 0 else data.table_b
            vals = table.column(name).astype(np.float64)
            if log:
                if np.any(vals <= 0):
                    raise ValueError(f"weight field {name!r} must be positive to take logs")
                vals = np.log(vals)
            return side, vals

        y_side, y_values = fetch(spec.response)
        sides, values = [], []
        for c in spec.covariates:
            s, v = fetch(c)
            sides.append(s)
            values.append(v)
        if spec.weight_field:
            s, v = fetch(spec.weight_field, log=True)
            sides.append(s)
            values.append(v)
        return cls(spec, y_side, y_values, np.array(sides, dtype=np.int8), values)

    def gather(self, idx_a: np.ndarray, idx_b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Design tensor (R, n, p) and responses (R, n) for R relinks."""
        r, n = idx_a.shape
        p = self.spec.dim
        x = np.empty((r, n, p))
        x[:, :, 0] = 1.0
        for k, (side, vals) in enumerate(zip(self.cov_sides, self.cov_values)):
            x[:, :, k + 1] = vals[idx_a if side == 0 else idx_b]
        y = self.y_values[idx_a if self.y_side == 0 else idx_b]
        return x, y


def batch_ols(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """OLS coefficients per relink via batched normal equations.

    Relinks with a singular design come back as NaN rows so the caller
    can apply its redraw policy.
    """
    xtx = np.einsum("rnp,rnq->rpq", x, x, optimize=True)
    xty = np.einsum("rnp,rn->rp", x, y, optimize=True)
    det = np.linalg.det(xtx)
    scale = np.abs(xtx).max(axis=(1, 2)) ** x.shape[2]
    ok = np.abs(det) > 1e-12 * np.maximum(scale, 1e-300)
    out = np.full(xty.shape, np.nan)
    if ok.any():
        out[ok] = np.linalg.solve(xtx[ok], xty[ok][..., None])[..., 0]
    return out


def batch_logistic(x: np.ndarray, y: np.ndarray, max_iter: int = MAX_IRLS) -> np.ndarray:
    """IRLS across relinks simultaneously; divergent relinks become NaN."""
    r, n, p = x.shape
    beta = np.zeros((r, p))
    active = np.ones(r, dtype=bool)
    for _ in range(max_iter):
        if not active.any():
            break
        xa, ya, ba = x[active], y[active], beta[active]
        eta = np.einsum("rnp,rp->rn", xa, ba)
        prob = _sigmoid(eta)
        score = np.einsum("rnp,rn->rp", xa, ya - prob)
        done = np.abs(score).max(axis=1) < SCORE_TOL
        w = np.clip(prob * (1.0 - prob), 1e-10, None)
        h = np.einsum("rnp,rn,rnq->rpq", xa, w, xa)
        det_ok = np.abs(np.linalg.det(h)) > 1e-300
        step = np.zeros_like(ba)
        if det_ok.any():
            step[det_ok] = np.linalg.solve(h[det_ok], score[det_ok][..., None])[..., 0]
        new_beta = ba + step
        diverged = (~det_ok) | (np.abs(new_beta).max(axis=1) > 40.0)
        new_beta[diverged] = np.nan
        beta[active] = new_beta
        idx = np.flatnonzero(active)
        active[idx[done | diverged]] = False
    still = np.flatnonzero(active)
    beta[still] = np.nan
    return beta


def evaluate_batch(design: BatchDesign, idx_a: np.ndarray, idx_b: np.ndarray) -> np.ndarray:
    """Coefficients (R, p) for R relinks given as index arrays (R, n)."""
    x, y = design.gather(idx_a, idx_b)
    if design.spec.kind == "ols":
        return batch_ols(x, y)
    if not design.is_binary_response:
        raise NonBinaryResponse("logistic response must be 0/1")
    return batch_logistic(x, y)
