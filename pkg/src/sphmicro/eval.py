"""Evaluation: accuracy, orientational variance and SMT failure rates.

Reports are tables with one row per method and, for every model
parameter ``p``, the columns ``mae_p`` and ``cv_p``; they serialise to
CSV or JSON with six significant digits.
"""

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as tissue
from . import sph

CV_GUARD = 0.05
AT_BOUND_TOL = 1e-3


def mae(predictions, truths):
    """Mean absolute error per parameter (last axis)."""
    predictions = np.asarray(predictions, dtype=float)
    truths = np.asarray(truths, dtype=float)
    if predictions.shape != truths.shape:
        raise ValueError(f"prediction shape {predictions.shape} != truth shape {truths.shape}")
    if predictions.shape[0] == 0:
        raise ValueError("empty prediction set")
    err = np.abs(predictions - truths).reshape(len(predictions), -1)
    return np.array([math.fsum(col) / len(col) for col in err.T])


def failure_rate(fits, tol=AT_BOUND_TOL, bounds=(0.0, 1.0)):
    """Fraction of fits whose fraction ``f`` sits within ``tol`` of a bound.

    ``fits`` is an :class:`~sphmicro.fit.SMTFitResult` or an array of f.
    """
    f = np.asarray(getattr(fits, "f", fits), dtype=float).ravel()
    if f.size == 0:
        return 0.0
    hit = (f <= bounds[0] + tol) | (f >= bounds[1] - tol)
    return float(np.count_nonzero(hit)) / f.size


@dataclass
class CVResult:
    """Orientational variance per parameter.

    ``cv`` averages the per-configuration CV (%) over configurations
    whose mean estimate has ``|mu| >= guard``; ``cv_unguarded`` averages
    over all configurations with a finite CV; ``n_excluded`` counts the
    guarded-out configurations per parameter.
    """

    cv: np.ndarray
    cv_unguarded: np.ndarray
    n_excluded: np.ndarray
    per_config: np.ndarray
    means: np.ndarray
    guard: float = CV_GUARD


def _mean_fsum(values):
    values = values[np.isfinite(values)]
    return math.fsum(values) / len(values) if len(values) else float("nan")


def rotated_signals(configs, scheme, rotations):
    """Noiseless signals of every config under every ODF rotation.

    Returns ``(n_configs, n_rotations, n_volumes)``. Rotations act on the
    ODF; the scheme stays fixed.
    """
    odf = configs.odf
    l_max = sph.lmax_from_ncoeffs(odf.shape[-1])
    mats = sph.sh_rotation_matrix(rotations, l_max)
    n, r = len(configs), len(rotations)
    rot_odf = np.einsum("rij,nj->nri", mats, odf).reshape(n * r, -1)
    params = np.repeat(configs.params(), r, axis=0)
    rep = tissue.config_from_params(configs.model, params, rot_odf)
    return tissue.synth_signal(rep, scheme).reshape(n, r, -1)


def rotational_cv(predictor, configs, scheme, rotations=None, guard=CV_GUARD, chunk=8):
    """Coefficient of variation (%) of ``predictor`` under input rotation.

    ``predictor`` maps per-volume signals ``(M, n_volumes)`` to
    ``(M, n_params)``. Each configuration is re-synthesised for every
    rotation (default: the 729-element SO(3) grid of bandwidth 9) without
    noise, and ``sigma / mu * 100`` is computed per parameter.
    Configurations whose ``|mu|`` falls below ``guard`` are excluded from
    ``cv`` and counted.
    """
    if rotations is None:
        rotations = sph.so3_grid(9)
    rotations = np.asarray(rotations, dtype=float)
    per_config, means = [], []
    for start in range(0, len(configs), chunk):
        idx = np.arange(start, min(start + chunk, len(configs)))
        sub = tissue.config_from_params(configs.model, configs.params()[idx], configs.odf[idx])
        signals = rotated_signals(sub, scheme, rotations)
        pred = np.asarray(predictor(signals.reshape(-1, signals.shape[-1])), dtype=float)
        pred = pred.reshape(len(idx), len(rotations), -1)
        mu = pred.mean(axis=1)
        sd = pred.std(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            per_config.append(np.where(sd == 0, 0.0, sd / np.abs(mu) * 100.0))
        means.append(mu)
    per_config = np.concatenate(per_config)
    means = np.concatenate(means)
    keep = np.abs(means) >= guard
    cv = np.array([_mean_fsum(per_config[keep[:, j], j]) for j in range(per_config.shape[1])])
    cv_all = np.array([_mean_fsum(per_config[:, j]) for j in range(per_config.shape[1])])
    return CVResult(cv=cv, cv_unguarded=cv_all, n_excluded=(~keep).sum(axis=0),
                    per_config=per_config, means=means, guard=guard)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    """Per-method MAE and CV tables plus dataset and runtime descriptors."""

    param_names: tuple = ("d", "f")
    mae: dict = field(default_factory=dict)
    cv: dict = field(default_factory=dict)
    cv_unguarded: dict = field(default_factory=dict)
    cv_excluded: dict = field(default_factory=dict)
    failure: dict = field(default_factory=dict)
    dataset: dict = field(default_factory=dict)
    runtime: dict = field(default_factory=dict)

    def methods(self):
        seen = []
        for table in (self.mae, self.cv, self.failure):
            for name in table:
                if name not in seen:
                    seen.append(name)
        return seen

    def add_mae(self, method, values):
        values = np.asarray(values, dtype=float)
        if np.any(values < 0):
            raise ValueError("MAE must be non-negative")
        self.mae[method] = values

    def add_cv(self, method, result):
        self.cv[method] = np.asarray(result.cv, dtype=float)
        self.cv_unguarded[method] = np.asarray(result.cv_unguarded, dtype=float)
        self.cv_excluded[method] = np.asarray(result.n_excluded, dtype=int)

    def add_failure(self, method, fraction):
        if not 0.0 <= fraction <= 1.0:
            raise ValueError("failure fraction must lie in [0, 1]")
        self.failure[method] = float(fraction)

    def columns(self):
        names = list(self.param_names)
        return (["method"] + [f"mae_{p}" for p in names] + [f"cv_{p}" for p in names])

    def rows(self):
        out = []
        for method in self.methods():
            row = {"method": method}
            for table, prefix in ((self.mae, "mae"), (self.cv, "cv")):
                vals = table.get(method)
                for j, p in enumerate(self.param_names):
                    row[f"{prefix}_{p}"] = None if vals is None else float(vals[j])
            out.append(row)
        return out


def _fmt(value):
    if value is None or (isinstance(value, float) and not math.isfinite(value)):
        return ""
    return f"{value:.6g}"


def _round6(value):
    if value is None:
        return None
    if isinstance(value, float):
        return float(f"{value:.6g}") if math.isfinite(value) else None
    if isinstance(value, (list, tuple, np.ndarray)):
        return [_round6(float(v)) if np.ndim(v) == 0 else _round6(v) for v in value]
    if isinstance(value, (np.floating, np.integer)):
        return _round6(value.item())
    return value


def export_report(report, path, fmt=None):
    """Write ``report`` as CSV (table only) or JSON (table and descriptors)."""
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".") or "csv").lower()
    if fmt not in ("csv", "json"):
        raise ValueError(f"unsupported report format {fmt!r}")
    cols = report.columns()
    try:
        with open(path, "w", newline="") as fh:
            if fmt == "csv":
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(cols)
                for row in report.rows():
                    writer.writerow([row["method"]] + [_fmt(row[c]) for c in cols[1:]])
            else:
                doc = {
                    "columns": cols,
                    "rows": [{k: _round6(v) for k, v in row.items()} for row in report.rows()],
                    "cv_unguarded": {m: _round6(v) for m, v in report.cv_unguarded.items()},
                    "cv_excluded": {m: [int(x) for x in v] for m, v in report.cv_excluded.items()},
                    "failure_rate": {m: _round6(v) for m, v in report.failure.items()},
                    "dataset": {k: _round6(v) for k, v in report.dataset.items()},
                    "runtime_s": {k: _round6(v) for k, v in report.runtime.items()},
                }
                json.dump(doc, fh, indent=2, sort_keys=False)
                fh.write("\n")
    except OSError as exc:
        raise OSError(f"cannot write report {path}: {exc}") from exc
    return path


def read_report_table(path):
    """Rows of an exported CSV or JSON report as dicts of floats (None if empty)."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        return json.loads(path.read_text())["rows"]
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (v if k == "method" else (float(v) if v else None)) for k, v in row.items()}
            for row in rows]
