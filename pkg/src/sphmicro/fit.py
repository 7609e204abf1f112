"""Spherical mean technique baseline and MLP input features.

The two-compartment spherical mean is fitted to powder-averaged signals by
a batched, box-constrained Levenberg-Marquardt solver started from a 5 x 5
grid over the parameter box. All samples and starts are iterated together
as arrays, which keeps test sets of 10^4-10^5 voxels fast.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from . import sph
from .model import normalize_b0, powder_average, shell_sh_coeffs

D_BOUNDS = (0.0, 3.0)
F_BOUNDS = (0.0, 1.0)
AT_BOUND_TOL = 1e-3
_SERIES_X = 1e-6


def _g(x):
    # sqrt(pi / (4x)) erf(sqrt(x)), the mean of exp(-x t^2) over t in [0, 1]
    x = np.asarray(x, dtype=float)
    small = x < _SERIES_X
    xs = np.where(small, 1.0, x)
    exact = np.sqrt(np.pi / (4 * xs)) * erf(np.sqrt(xs))
    series = 1.0 - x / 3.0 + x * x / 10.0
    return np.where(small, series, exact)


def _dg(x):
    x = np.asarray(x, dtype=float)
    small = x < 1e-4
    xs = np.where(small, 1.0, x)
    exact = (np.exp(-xs) - _g(xs)) / (2 * xs)
    series = -1.0 / 3.0 + x / 5.0 - x * x / 14.0
    return np.where(small, series, exact)


def spherical_mean_axisym(b, d_par, d_perp):
    """Powder average of an axially symmetric Gaussian compartment.

    ``exp(-b d_perp) sqrt(pi / (4 b dd)) erf(sqrt(b dd))`` with
    ``dd = d_par - d_perp``; a Taylor branch takes over for ``b dd < 1e-6``.
    """
    b = np.asarray(b, dtype=float)
    return np.exp(-b * d_perp) * _g(b * (np.asarray(d_par) - np.asarray(d_perp)))


def smt_model_2c(b, d, f):
    """Spherical mean of the two-compartment model at b-values ``b``."""
    return f * spherical_mean_axisym(b, d, 0.0) + (1 - f) * spherical_mean_axisym(b, d, (1 - f) * d)


def smt_model_2c_jac(b, d, f):
    """Model values and partial derivatives with respect to d and f.

    ``b`` broadcasts against ``d`` and ``f``; returns ``(S, dS/dd, dS/df)``.
    """
    bd = b * d
    bfd = bd * f
    e = np.exp(-b * (1 - f) * d)
    g1, dg1 = _g(bd), _dg(bd)
    g2, dg2 = _g(bfd), _dg(bfd)
    s = f * g1 + (1 - f) * e * g2
    ds_dd = f * b * dg1 + (1 - f) * e * (-b * (1 - f) * g2 + b * f * dg2)
    ds_df = g1 - e * g2 + (1 - f) * e * (bd * g2 + bd * dg2)
    return s, ds_dd, ds_df


@dataclass
class SMTFitResult:
    """Per-sample fit output (arrays over samples)."""

    d: np.ndarray
    f: np.ndarray
    residual: np.ndarray
    converged: np.ndarray
    at_bound: np.ndarray

    def params(self):
        return np.stack([self.d, self.f], axis=1)


def _start_grid(n=5):
    cells = (np.arange(n) + 0.5) / n
    dd, ff = np.meshgrid(D_BOUNDS[0] + cells * (D_BOUNDS[1] - D_BOUNDS[0]),
                         F_BOUNDS[0] + cells * (F_BOUNDS[1] - F_BOUNDS[0]), indexing="ij")
    return dd.ravel(), ff.ravel()


def _lm_box(y, b, d0, f0, max_iter=200, tol=1e-14):
    """Projected Levenberg-Marquardt on rows of ``y`` (M, n_b).

    Variables pinned to a bound with the gradient pointing outward are
    frozen for that step (a simple active-set rule), free variables take a
    damped Gauss-Newton step, and the trial point is projected into the box.
    """
    lo = np.array([D_BOUNDS[0], F_BOUNDS[0]])
    hi = np.array([D_BOUNDS[1], F_BOUNDS[1]])
    p = np.stack([d0, f0], axis=1).astype(float)
    lam = np.full(len(p), 1e-3)
    done = np.zeros(len(p), dtype=bool)
    converged = np.zeros(len(p), dtype=bool)

    def evaluate(p, rows=slice(None)):
        s, jd, jf = smt_model_2c_jac(b[None, :], p[:, :1], p[:, 1:])
        r = s - y[rows]
        return r, np.stack([jd, jf], axis=2), np.sum(r * r, axis=1)

    r, jac, cost = evaluate(p)
    for _ in range(max_iter):
        act = ~done
        if not act.any():
            break
        ra, ja, pa = r[act], jac[act], p[act]
        grad = np.einsum("mbk,mb->mk", ja, ra)
        jtj = np.einsum("mbk,mbl->mkl", ja, ja)
        frozen = ((pa <= lo + 1e-12) & (grad > 0)) | ((pa >= hi - 1e-12) & (grad < 0))
        proj_grad = np.where(frozen, 0.0, grad)
        tiny = np.max(np.abs(proj_grad), axis=1) < 1e-15
        damp = lam[act][:, None] * (np.diagonal(jtj, axis1=1, axis2=2) + 1e-12)
        a = jtj.copy()
        a[:, 0, 0] += damp[:, 0]
        a[:, 1, 1] += damp[:, 1]
        # decouple frozen variables
        a[:, 0, 1] = np.where(frozen.any(axis=1), 0.0, a[:, 0, 1])
        a[:, 1, 0] = a[:, 0, 1]
        a[:, 0, 0] = np.where(frozen[:, 0], 1.0, a[:, 0, 0])
        a[:, 1, 1] = np.where(frozen[:, 1], 1.0, a[:, 1, 1])
        det = a[:, 0, 0] * a[:, 1, 1] - a[:, 0, 1] * a[:, 1, 0]
        det = np.where(np.abs(det) < 1e-300, 1e-300, det)
        g0, g1 = proj_grad[:, 0], proj_grad[:, 1]
        step = -np.stack([(a[:, 1, 1] * g0 - a[:, 0, 1] * g1) / det,
                          (a[:, 0, 0] * g1 - a[:, 1, 0] * g0) / det], axis=1)
        trial = np.clip(pa + step, lo, hi)
        idx = np.flatnonzero(act)
        rt, jt, ct = evaluate(trial, idx)
        better = ct < cost[act]
        gain = cost[act] - ct
        upd = idx[better]
        p[upd], r[upd], jac[upd] = trial[better], rt[better], jt[better]
        stalled = (~better) | (gain <= tol * np.maximum(cost[act], 1e-30)) | (gain < 1e-30)
        moved = np.max(np.abs(trial - pa), axis=1)
        cost[upd] = ct[better]
        lam[idx] = np.where(better, np.maximum(lam[idx] / 3, 1e-12), lam[idx] * 4)
        finished = tiny | (better & (stalled | (moved < 1e-13))) | (lam[idx] > 1e12)
        converged[idx] = finished & np.isfinite(cost[idx])
        done[idx] = finished
    return p, np.sqrt(cost), converged


def nlls_smt_2c(means, bvals, n_grid=5, max_iter=200):
    """Fit (d, f) to powder-averaged signals.

    ``means`` is ``(n, n_shells)`` (or a single vector) of normalised shell
    means at b-values ``bvals``. Each sample is fitted from every point of
    an ``n_grid x n_grid`` start grid and the lowest residual wins.
    """
    means = np.asarray(means, dtype=float)
    single = means.ndim == 1
    means = np.atleast_2d(means)
    bvals = np.asarray(bvals, dtype=float)
    if not np.all(np.isfinite(means)) or not np.all(np.isfinite(bvals)):
        raise ValueError("non-finite input to NLLS fit")
    if len(np.unique(bvals[bvals > 0])) < 2:
        raise ValueError("need at least two distinct non-zero b-values")
    n = len(means)
    d0, f0 = _start_grid(n_grid)
    n_starts = len(d0)
    y = np.repeat(means, n_starts, axis=0)
    p, res, conv = _lm_box(y, bvals, np.tile(d0, n), np.tile(f0, n), max_iter=max_iter)
    p = p.reshape(n, n_starts, 2)
    res = res.reshape(n, n_starts)
    conv = conv.reshape(n, n_starts)
    # prefer converged starts; fall back to the best diverged one
    score = np.where(conv, res, np.inf)
    best = np.argmin(np.where(np.isfinite(score).any(axis=1, keepdims=True), score, res), axis=1)
    rows = np.arange(n)
    d, f = p[rows, best, 0], p[rows, best, 1]
    out = SMTFitResult(
        d=d, f=f, residual=res[rows, best], converged=conv[rows, best],
        at_bound=(f <= F_BOUNDS[0] + AT_BOUND_TOL) | (f >= F_BOUNDS[1] - AT_BOUND_TOL),
    )
    if single:
        return SMTFitResult(*(np.asarray(v)[0] for v in vars(out).values()))
    return out


def fit_smt_signals(signals, scheme, **kwargs):
    """Normalise, powder-average and fit raw per-volume signals."""
    norm = normalize_b0(signals, scheme)
    means = powder_average(norm, scheme)
    return nlls_smt_2c(means, [s.bval for s in scheme.shells], **kwargs)


# ---------------------------------------------------------------------------
# Features for the MLP baselines
# ---------------------------------------------------------------------------

FEATURE_METHODS = ("reg", "pa", "sh")
SH_FEATURE_LMAX = 16


def feature_size(scheme, method):
    if method == "reg":
        return int((~scheme.b0_mask).sum())
    if method == "pa":
        return len(scheme.shells)
    if method == "sh":
        return len(scheme.shells) * sph.n_coeffs(SH_FEATURE_LMAX)
    raise ValueError(f"unknown feature method {method!r}")


def build_features(signals, scheme, method, normalized=False):
    """Input vectors of the reg-, PA- and SH-MLP baselines.

    ``reg``: b = 0-normalised signals of the weighted volumes in scheme
    order. ``pa``: per-shell powder means. ``sh``: per-shell
    least-squares expansions, each zero-filled to degree 16, concatenated
    shell by shell in the coefficient order of :mod:`sphmicro.sph`.
    """
    if method not in FEATURE_METHODS:
        raise ValueError(f"unknown feature method {method!r}")
    signals = np.asarray(signals, dtype=float)
    norm = signals if normalized else normalize_b0(signals, scheme)
    if method == "reg":
        return norm[..., scheme.weighted_indices]
    if method == "pa":
        return powder_average(norm, scheme)
    coeffs = shell_sh_coeffs(norm, scheme, SH_FEATURE_LMAX)
    return coeffs.reshape(coeffs.shape[:-2] + (-1,))
