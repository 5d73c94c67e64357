"""Reading long-format CSV files into a :class:`LongitudinalFunctionalDataset`.

Predictor file columns: ``subject_id, [group_id,] t, s, w`` (one row per grid
point of one curve). Response file columns: ``subject_id, t, y`` followed by
any covariate columns. A response belongs to the curve with the same subject
and the same ``t`` text; the curves share one ``s`` grid.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ldfr.data import LongitudinalFunctionalDataset
from ldfr.errors import InputError, SchemaError

logger = logging.getLogger(__name__)

MAX_MISSING_FRACTION = 0.2
PREDICTOR_COLUMNS = ("subject_id", "t", "s", "w")
RESPONSE_COLUMNS = ("subject_id", "t", "y")
_MISSING = {"", "na", "nan", "null"}


@dataclass
class IngestReport:
    """What was repaired while reading: ``(subject, t, n_imputed)`` per curve."""

    imputed: List[Tuple[str, str, int]] = field(default_factory=list)
    curves_without_response: int = 0

    @property
    def n_imputed(self) -> int:
        return sum(n for *_, n in self.imputed)


def _rows(path) -> Tuple[List[str], List[Dict[str, str]]]:
    try:
        with open(path, newline="") as fh:
            lines = [ln for ln in fh if not ln.startswith("#")]
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    reader = csv.DictReader(lines)
    header = [h.strip() for h in (reader.fieldnames or [])]
    reader.fieldnames = header
    return header, list(reader)


def _number(text, what, line):
    try:
        return float(text)
    except (TypeError, ValueError):
        raise SchemaError(f"{what} {text!r} on data line {line} is not a number") from None


def _require(header, needed, path):
    missing = [c for c in needed if c not in header]
    if missing:
        raise SchemaError(f"{path}: missing columns {missing}")


def read_predictors(path, max_missing: float = MAX_MISSING_FRACTION):
    """Parse a predictor file.

    Returns
    -------
    keys : list of (subject, t_text)
    t : ndarray
    s : ndarray
        Shared grid (union of all ``s`` values).
    w : ndarray, shape (n_curves, len(s))
    group : list or None
        Group label per curve.
    report : IngestReport
    """
    header, rows = _rows(path)
    _require(header, PREDICTOR_COLUMNS, path)
    has_group = "group_id" in header
    curves: Dict[Tuple[str, str], Dict[float, float]] = {}
    groups: Dict[str, str] = {}
    seen = set()
    for line, rec in enumerate(rows, start=1):
        subj, t_text, s_text = rec["subject_id"].strip(), rec["t"].strip(), rec["s"].strip()
        key = (subj, t_text, s_text)
        if key in seen:
            raise SchemaError(f"duplicate row for subject_id={subj}, t={t_text}, s={s_text}")
        seen.add(key)
        s_val = _number(s_text, "s", line)
        _number(t_text, "t", line)
        w_text = (rec["w"] or "").strip()
        w_val = np.nan if w_text.lower() in _MISSING else _number(w_text, "w", line)
        curves.setdefault((subj, t_text), {})[s_val] = w_val
        if has_group:
            g = (rec["group_id"] or "").strip()
            if groups.setdefault(subj, g) != g:
                raise SchemaError(f"subject {subj} appears in groups {groups[subj]} and {g}")
    if not curves:
        raise SchemaError(f"{path}: no predictor rows")
    grid = np.array(sorted({s for c in curves.values() for s in c}))
    report = IngestReport()
    keys = list(curves)
    w = np.empty((len(keys), grid.size))
    for n, key in enumerate(keys):
        vals = curves[key]
        row = np.array([vals.get(s, np.nan) for s in grid])
        miss = np.isnan(row)
        if miss.mean() > max_missing:
            raise SchemaError(
                f"curve subject_id={key[0]}, t={key[1]} misses {miss.sum()} of {grid.size} "
                f"grid points (more than {max_missing:.0%}); grids are inconsistent")
        if miss.any():
            row[miss] = np.interp(grid[miss], grid[~miss], row[~miss])
            report.imputed.append((key[0], key[1], int(miss.sum())))
            logger.info("subject_id=%s t=%s: %d missing grid points interpolated",
                        key[0], key[1], int(miss.sum()))
        w[n] = row
    t = np.array([float(k[1]) for k in keys])
    group = [groups[k[0]] for k in keys] if has_group else None
    return keys, t, grid, w, group, report


def read_responses(path, covariates: Optional[Sequence[str]] = None):
    """Parse a response file into ``{(subject, t_text): (y, covariate texts)}``."""
    header, rows = _rows(path)
    _require(header, RESPONSE_COLUMNS, path)
    extra = [c for c in header if c not in RESPONSE_COLUMNS]
    names = list(extra if covariates is None else covariates)
    unknown = [c for c in names if c not in header]
    if unknown:
        raise SchemaError(f"{path}: covariate columns {unknown} not found")
    out = {}
    for line, rec in enumerate(rows, start=1):
        key = (rec["subject_id"].strip(), rec["t"].strip())
        if key in out:
            raise SchemaError(f"duplicate response for subject_id={key[0]}, t={key[1]}")
        y_text = (rec["y"] or "").strip()
        y = np.nan if y_text.lower() in _MISSING else _number(y_text, "y", line)
        out[key] = (y, [(rec[c] or "").strip() for c in names])
    return names, out


def _encode_covariates(values: List[List[str]], names, factors):
    cols = []
    levels = {}
    for j, name in enumerate(names):
        col = [v[j] for v in values]
        if name in factors:
            lev = sorted(set(col))
            levels[name] = lev
            index = {x: float(i) for i, x in enumerate(lev)}
            cols.append([index[x] for x in col])
        else:
            cols.append([np.nan if x.lower() in _MISSING else _number(x, name, i + 1)
                         for i, x in enumerate(col)])
    return np.array(cols, dtype=float).T, levels


def read_dataset(predictors, responses=None, covariates: Optional[Sequence[str]] = None,
                 factors: Sequence[str] = (), max_missing: float = MAX_MISSING_FRACTION):
    """Build a dataset from the predictor file and (optionally) the response file.

    Curves without a response get ``y = nan`` (they still inform the predictor
    model); a response without a matching curve is a schema error.

    Returns
    -------
    dataset : LongitudinalFunctionalDataset
    report : IngestReport
    info : dict
        Covariate names, factor levels and group labels.
    """
    keys, t, grid, w, group, report = read_predictors(predictors, max_missing)
    y = cov = None
    names: List[str] = []
    levels = {}
    if responses is not None:
        names, resp = read_responses(responses, covariates)
        index = {k: n for n, k in enumerate(keys)}
        orphans = [k for k in resp if k not in index]
        if orphans:
            subj, tt = orphans[0]
            raise SchemaError(f"response for subject_id={subj}, t={tt} has no predictor curve "
                              f"({len(orphans)} such rows)")
        y = np.full(len(keys), np.nan)
        texts = [["nan"] * len(names) for _ in keys]
        for k, (val, cvals) in resp.items():
            y[index[k]] = val
            texts[index[k]] = cvals
        report.curves_without_response = int(np.isnan(y).sum())
        if names:
            cov, levels = _encode_covariates(texts, names, set(factors))
    group_labels = None
    group_codes = None
    if group is not None:
        group_labels, group_codes = np.unique(np.array(group), return_inverse=True)
    subject = np.array([k[0] for k in keys])
    ds = LongitudinalFunctionalDataset.from_arrays(subject, t, grid, w, y=y, group=group_codes,
                                                   covariates=cov)
    info = {"covariates": names, "factor_levels": levels,
            "groups": None if group_labels is None else group_labels.tolist()}
    return ds, report, info


def write_long_csv(path, dataset: LongitudinalFunctionalDataset, header: Optional[str] = None,
                   responses_path=None) -> None:
    """Write a dataset in the long format read by :func:`read_dataset`."""
    labels = dataset.subject_labels
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        wr = csv.writer(fh)
        cols = ["subject_id"] + (["group_id"] if dataset.group is not None else []) + ["t", "s", "w"]
        wr.writerow(cols)
        for n in range(dataset.n_visits):
            lead = [labels[dataset.subject[n]]]
            if dataset.group is not None:
                lead.append(dataset.group[n])
            t_text = repr(float(dataset.t[n]))
            for s_val, w_val in zip(dataset.s, dataset.w[n]):
                wr.writerow(lead + [t_text, repr(float(s_val)), repr(float(w_val))])
    if responses_path is not None and dataset.y is not None:
        with open(responses_path, "w", newline="") as fh:
            if header:
                fh.write(f"# {header}\n")
            wr = csv.writer(fh)
            wr.writerow(["subject_id", "t", "y"])
            for n in range(dataset.n_visits):
                wr.writerow([labels[dataset.subject[n]], repr(float(dataset.t[n])),
                             repr(float(dataset.y[n]))])
