"""Trial data ingestion, validation, standardization and observed-group classification."""

import logging
import os
import re
from dataclasses import replace
from typing import Dict, List

import numpy as np
import pandas as pd

from core.errors import (
    ConsistencyError,
    DataError,
    DegenerateColumnError,
    MissingnessError,
    ParseError,
)
from core.models import BINARY, CONTINUOUS, CovariateSpec, ObservedGroup, TrialDataset

log = logging.getLogger("sacebart.data")

BASE_COLUMNS = ["id", "treat", "survive", "outcome"]


def _parse_binary(col: pd.Series, name: str) -> np.ndarray:
    for row, raw in enumerate(col, start=1):
        if raw not in ("0", "1"):
            raise ParseError(row, f"{name} doit valoir 0 ou 1 (lu '{raw}')")
    return col.astype(np.int8).to_numpy()


def _parse_float(col: pd.Series, name: str, allow_empty: bool = False) -> np.ndarray:
    # float() is correctly rounded, so written values read back bit-exactly
    values = np.empty(len(col))
    for i, raw in enumerate(col):
        row = i + 1
        if raw == "":
            if not allow_empty:
                raise MissingnessError(f"ligne {row}: valeur manquante pour '{name}'")
            values[i] = np.nan
            continue
        try:
            values[i] = float(raw)
        except ValueError:
            raise ParseError(row, f"valeur non numerique pour '{name}' (lu '{raw}')") from None
        if not np.isfinite(values[i]):
            raise ParseError(row, f"valeur non finie pour '{name}' (lu '{raw}')")
    return values


def load_dataset(path: str, schema: CovariateSpec) -> TrialDataset:
    """Read a trial CSV (`id,treat,survive,outcome,<covariates...>`), row order preserved."""
    if not os.path.exists(path):
        raise DataError(f"fichier introuvable: {path}")
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.ParserError as e:
        m = re.search(r"line (\d+)", str(e))
        # pandas counts the header as line 1
        row = int(m.group(1)) - 1 if m else -1
        raise ParseError(row, f"ligne mal formee: {e}") from e
    except pd.errors.EmptyDataError as e:
        raise DataError(f"fichier vide: {path}") from e

    expected = BASE_COLUMNS + list(schema.names)
    if list(raw.columns) != expected:
        raise DataError(f"en-tete inattendu: {list(raw.columns)} (attendu {expected})")

    raw = raw.apply(lambda c: c.str.strip())
    treat = _parse_binary(raw["treat"], "treat")
    survive = _parse_binary(raw["survive"], "survive")
    outcome = _parse_float(raw["outcome"], "outcome", allow_empty=True)

    for row, (d, y_raw) in enumerate(zip(survive, raw["outcome"]), start=1):
        if d == 1 and y_raw == "":
            raise ConsistencyError(f"ligne {row}: survivant sans outcome")
        if d == 0 and y_raw != "":
            raise ConsistencyError(f"ligne {row}: outcome renseigne alors que survive=0")

    if len(schema.names):
        X = np.column_stack([_parse_float(raw[name], name) for name in schema.names])
    else:
        X = np.empty((len(raw), 0))
    for k, (name, kind) in enumerate(zip(schema.names, schema.kinds)):
        if kind == BINARY and not np.isin(X[:, k], (0.0, 1.0)).all():
            raise DataError(f"covariable binaire '{name}' hors de {{0,1}}")

    dataset = TrialDataset(
        ids=raw["id"].to_numpy(dtype=str),
        treat=treat,
        survive=survive,
        outcome=outcome,
        covariates=X,
        covariate_spec=schema,
    )
    log.info("Jeu de donnees charge: %d unites, %d covariables (%s).",
             dataset.n_units, dataset.n_covariates, path)
    return dataset


def write_dataset(dataset: TrialDataset, path: str) -> None:
    """Write the CSV form read by load_dataset; floats are written with round-trip precision."""
    frame = pd.DataFrame({
        "id": dataset.ids,
        "treat": dataset.treat.astype(int),
        "survive": dataset.survive.astype(int),
        "outcome": dataset.outcome,
    })
    for k, name in enumerate(dataset.covariate_spec.names):
        col = dataset.covariates[:, k]
        frame[name] = col.astype(int) if dataset.covariate_spec.kinds[k] == BINARY else col
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    tmp = f"{path}.tmp"
    frame.to_csv(tmp, index=False, na_rep="", float_format="%.17g", encoding="utf-8")
    os.replace(tmp, path)


def classify_groups(dataset: TrialDataset) -> List[ObservedGroup]:
    out = []
    for t, d in zip(dataset.treat, dataset.survive):
        if t == 1:
            out.append(ObservedGroup.O11 if d == 1 else ObservedGroup.O10)
        else:
            out.append(ObservedGroup.O01 if d == 1 else ObservedGroup.O00)
    return out


def group_counts(dataset: TrialDataset) -> Dict[str, int]:
    counts = {g.value: 0 for g in ObservedGroup}
    for g in classify_groups(dataset):
        counts[g.value] += 1
    return counts


def group_masks(dataset: TrialDataset) -> Dict[ObservedGroup, np.ndarray]:
    t = dataset.treat == 1
    d = dataset.survive == 1
    return {
        ObservedGroup.O11: t & d,
        ObservedGroup.O10: t & ~d,
        ObservedGroup.O01: ~t & d,
        ObservedGroup.O00: ~t & ~d,
    }


def standardize(dataset: TrialDataset) -> "tuple[TrialDataset, CovariateSpec]":
    """Center and scale continuous covariates (sample sd, n-1 denominator)."""
    spec = dataset.covariate_spec
    if dataset.n_covariates < 1:
        raise DataError("standardisation impossible: aucune covariable")
    if spec.standardized:
        raw = unstandardize(dataset)
    else:
        raw = dataset
    X = raw.covariates.copy()
    center, scale = [], []
    for k, (name, kind) in enumerate(zip(spec.names, spec.kinds)):
        if kind == CONTINUOUS:
            mu = float(X[:, k].mean())
            sd = float(X[:, k].std(ddof=1)) if X.shape[0] > 1 else 0.0
            if not sd > 0:
                raise DegenerateColumnError(name)
            X[:, k] = (X[:, k] - mu) / sd
            center.append(mu)
            scale.append(sd)
        else:
            center.append(0.0)
            scale.append(1.0)
    new_spec = replace(spec, center=tuple(center), scale=tuple(scale), standardized=True)
    log.debug("Standardisation: %d covariables continues.", len(spec.continuous_indices))
    return replace(raw, covariates=X, covariate_spec=new_spec), new_spec


def unstandardize(dataset: TrialDataset) -> TrialDataset:
    spec = dataset.covariate_spec
    if not spec.standardized:
        return dataset
    X = dataset.covariates.copy()
    for k in spec.continuous_indices:
        X[:, k] = X[:, k] * spec.scale[k] + spec.center[k]
    raw_spec = replace(spec, center=(), scale=(), standardized=False)
    return replace(dataset, covariates=X, covariate_spec=raw_spec)


def schema_from_mapping(covariates: Dict[str, str]) -> CovariateSpec:
    """CovariateSpec from an ordered {name: kind} mapping (run configuration form)."""
    return CovariateSpec(names=tuple(covariates), kinds=tuple(covariates.values()))


def infer_schema(path: str) -> CovariateSpec:
    """Covariates are the columns after `outcome`; a column holding only 0/1 is binary."""
    if not os.path.exists(path):
        raise DataError(f"fichier introuvable: {path}")
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataError(f"lecture impossible de {path}: {e}") from e
    columns = list(raw.columns)
    if columns[:len(BASE_COLUMNS)] != BASE_COLUMNS:
        raise DataError(f"en-tete inattendu: {columns}")
    names = columns[len(BASE_COLUMNS):]
    kinds = [BINARY if raw[n].str.strip().isin(["0", "1"]).all() else CONTINUOUS for n in names]
    log.debug("Schema deduit: %s", dict(zip(names, kinds)))
    return CovariateSpec(names=tuple(names), kinds=tuple(kinds))
