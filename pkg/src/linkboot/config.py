"""Run configuration: JSON file describing sources, linking and estimation.

Schema (all paths relative to the config file's directory):

{
  "source_a": "a.csv",
  "source_b": "b.csv",
  "comparators": [{"field": "name", "kind": "normalized"}, ...],
  "model":      {"m": [...], "u": [...], "prevalence": 0.05},   # or
  "em":         {"tol": 1e-6, "max_iter": 1000},
  "link":       {"kind": "one_to_one", "n_links": 27, "strategy": "greedy"}
             |  {"kind": "cutoffs", "mu": 0.01, "lambda": 0.01},
  "estimator":  {"kind": "ols", "response": "y", "covariates": ["x"],
                 "weight_field": null},
  "bootstrap":  {"b": 100, "c": 100, "d": 100, "h": 2000, "eta0": 0.5, ...},
  "agreement_csv": null     # optional prebuilt realization (i, j, g*, linked)
}

Exactly one of "model" / "em" must be present.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agreement import AgreementMatrix, Comparator, build_agreement_matrix
from .estimators import EstimatorSpec
from .match_model import MatchModel, estimate_match_model_em
from .resampling import BootstrapConfig
from .tables import LinkedDataset, RecordTable


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    source_a: Path
    source_b: Path
    comparators: list[Comparator]
    estimator: EstimatorSpec
    bootstrap: BootstrapConfig
    model: MatchModel | None = None
    em: dict | None = None
    link: dict = field(default_factory=dict)
    agreement_csv: Path | None = None

    def __post_init__(self) -> None:
        if (self.model is None) == (self.em is None):
            raise ConfigError("exactly one of 'model' and 'em' must be configured")
        kind = self.link.get("kind", "one_to_one")
        if kind == "one_to_one":
            if "n_links" not in self.link:
                raise ConfigError("one_to_one linking requires 'n_links'")
        elif kind == "cutoffs":
            for key in ("mu", "lambda"):
                if key not in self.link:
                    raise ConfigError(f"cutoff linking requires {key!r}")
        else:
            raise ConfigError(f"unknown link kind {kind!r}")

    def to_dict(self) -> dict:
        doc = {
            "source_a": str(self.source_a),
            "source_b": str(self.source_b),
            "comparators": [{"field": c.field, "kind": c.kind} for c in self.comparators],
            "link": self.link,
            "estimator": {"kind": self.estimator.kind,
                          "response": self.estimator.response,
                          "covariates": list(self.estimator.covariates),
                          "weight_field": self.estimator.weight_field},
            "bootstrap": {k: getattr(self.bootstrap, k) for k in
                          ("b", "c", "d", "h", "eta0", "seed", "max_b",
                           "var_outer", "var_inner", "var_cc", "var_dd")},
        }
        if self.model is not None:
            doc["model"] = {"m": self.model.m.tolist(), "u": self.model.u.tolist(),
                            "prevalence": self.model.prevalence}
        if self.em is not None:
            doc["em"] = self.em
        if self.agreement_csv is not None:
            doc["agreement_csv"] = str(self.agreement_csv)
        return doc


def load_config(path: str | Path, seed_override: int | None = None) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    base = path.parent

    def resolve(p: str | None) -> Path | None:
        return None if p is None else (base / p if not Path(p).is_absolute() else Path(p))

    for key in ("source_a", "source_b", "comparators", "estimator"):
        if key not in doc:
            raise ConfigError(f"{path}: missing required key {key!r}")
    comps = [Comparator(c["field"], c.get("kind", "exact")) for c in doc["comparators"]]
    est = doc["estimator"]
    spec = EstimatorSpec(est["kind"], est["response"],
                         tuple(est.get("covariates", ())), est.get("weight_field"))
    boot_doc = dict(doc.get("bootstrap", {}))
    if seed_override is not None:
        boot_doc["seed"] = seed_override
    model_doc = doc.get("model")
    model = None
    if model_doc is not None:
        model = MatchModel(np.array(model_doc["m"], dtype=float),
                           np.array(model_doc["u"], dtype=float),
                           float(model_doc.get("prevalence", 0.05)))
    return RunConfig(
        source_a=resolve(doc["source_a"]),
        source_b=resolve(doc["source_b"]),
        comparators=comps,
        estimator=spec,
        bootstrap=BootstrapConfig(**boot_doc),
        model=model,
        em=doc.get("em"),
        link=doc.get("link", {"kind": "one_to_one", "n_links": 1}),
        agreement_csv=resolve(doc.get("agreement_csv")),
    )


@dataclass
class PreparedRun:
    """Everything a linking or correction run needs, loaded and validated."""

    table_a: RecordTable
    table_b: RecordTable
    gamma: AgreementMatrix
    model: MatchModel
    config: RunConfig
    em_converged: bool | None = None


def prepare(config: RunConfig) -> PreparedRun:
    """Load sources, build or load the agreement matrix, settle the model."""
    table_a = RecordTable.from_csv(config.source_a, name="source_a")
    table_b = RecordTable.from_csv(config.source_b, name="source_b")
    for comp in config.comparators:
        for table in (table_a, table_b):
            if comp.field not in table.columns:
                raise ConfigError(f"linking field {comp.field!r} missing from {table.name}")
    for name in (config.estimator.response, *config.estimator.covariates):
        if name not in table_a.columns and name not in table_b.columns:
            raise ConfigError(f"estimator column {name!r} not found in either source")

    if config.agreement_csv is not None:
        gamma = load_agreement_csv(config.agreement_csv, table_a.n, table_b.n)
    else:
        gamma = build_agreement_matrix(table_a, table_b, config.comparators)

    em_converged = None
    if config.model is not None:
        model = config.model
    else:
        fit = estimate_match_model_em(gamma, tol=config.em.get("tol", 1e-6),
                                      max_iter=config.em.get("max_iter", 1000))
        model = fit.model
        em_converged = fit.converged
    if model.n_vars != gamma.n_vars:
        raise ConfigError("model dimension does not match the number of linking fields")
    return PreparedRun(table_a, table_b, gamma, model, config, em_converged)


def load_agreement_csv(path: str | Path, n_a: int, n_b: int) -> AgreementMatrix:
    """Read a prebuilt realization: columns i, j, g1..gL and optional linked."""
    table = RecordTable.from_csv(path)
    gcols = sorted((f for f in table.fields if f.startswith("g") and f[1:].isdigit()),
                   key=lambda f: int(f[1:]))
    if not gcols:
        raise ConfigError(f"{path}: no g1..gL agreement columns found")
    order = np.argsort(table.column("i").astype(np.int64) * n_b
                       + table.column("j").astype(np.int64))
    bits = np.stack([table.column(g)[order] for g in gcols], axis=1).astype(np.uint8)
    mask = None
    if "linked" in table.columns:
        mask = table.column("linked")[order].astype(bool)
    return AgreementMatrix(bits, n_a, n_b, mask)
