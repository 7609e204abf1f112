"""Gaussian compartment models and signal simulation.

Signals are normalised (S0 = 1) and computed in the spherical harmonics
domain: each compartment kernel is a zonal function of the cosine between
the encoding direction and the fibre axis, its zonal coefficients come
from Gauss-Legendre quadrature, and the orientation distribution enters
through the per-degree product of the zonal convolution.

Parameter vectors use a fixed column order: ``(d, f)`` for the
two-compartment model and ``(d_i, d_sph, f_i, f_sph)`` for the
three-compartment model. Diffusivities are in um^2/ms and b-values in
ms/um^2.
"""

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from . import sph

B0_THRESHOLD = 0.05
SHAPES = ("LTE", "PTE")
ODF_LMAX = 8
MAX_SHELL_LMAX = 8

PARAM_NAMES = {"2c": ("d", "f"), "3c": ("d_i", "d_sph", "f_i", "f_sph")}
# targets are scaled so every column lives on [0, 1]
TARGET_SCALE = {"2c": np.array([1 / 3, 1.0]), "3c": np.array([1 / 3, 1 / 3, 1.0, 1.0])}


# ---------------------------------------------------------------------------
# b-tensors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BTensor:
    matrix: np.ndarray
    shape: str
    bval: float
    direction: np.ndarray


def btensor_matrix(shape, bval, dirs):
    """Vectorised b-tensors for ``dirs`` of shape ``(..., 3)``."""
    dirs = np.asarray(dirs, dtype=float)
    outer = dirs[..., :, None] * dirs[..., None, :]
    if shape == "LTE":
        return bval * outer
    if shape == "PTE":
        return 0.5 * bval * (np.eye(3) - outer)
    raise ValueError(f"unsupported b-tensor shape {shape!r}")


def make_btensor(shape, bval, direction):
    if bval < 0:
        raise ValueError(f"b-value must be non-negative, got {bval}")
    direction = np.asarray(direction, dtype=float)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-9:
        raise ValueError("b-tensor direction must be a unit vector")
    return BTensor(btensor_matrix(shape, bval, direction), shape, float(bval), direction)


def axisym_tensor(d_par, d_perp):
    """z-aligned axially symmetric diffusion tensors, shape ``(..., 3, 3)``."""
    d_par, d_perp = np.broadcast_arrays(np.asarray(d_par, float), np.asarray(d_perp, float))
    out = np.zeros(d_par.shape + (3, 3))
    out[..., 0, 0] = d_perp
    out[..., 1, 1] = d_perp
    out[..., 2, 2] = d_par
    return out


def contract(btensors, tensors):
    """Generalised scalar product ``b : D`` summed over both indices."""
    return np.einsum("...ij,...ij->...", btensors, tensors)


def _directions_at_cosine(t):
    t = np.asarray(t, dtype=float)
    return np.stack([np.sqrt(np.clip(1 - t * t, 0, None)), np.zeros_like(t), t], axis=-1)


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------


def _bd(btens, d_par, d_perp):
    # btens (T, 3, 3); d_par, d_perp (...,) -> (..., T)
    d_par = np.asarray(d_par, float)[..., None]
    d_perp = np.asarray(d_perp, float)[..., None]
    diag = np.diagonal(btens, axis1=-2, axis2=-1)
    return (diag[:, 0] + diag[:, 1]) * d_perp + diag[:, 2] * d_par


def extracellular_3c(f_i, f_sph, d_i):
    """Axial and radial extra-cellular diffusivities of the soma model."""
    f_i = np.asarray(f_i, float)
    f_sph = np.asarray(f_sph, float)
    total = f_i + f_sph
    if np.any(total <= 0):
        raise ValueError("f_i + f_sph must be positive (exponents are 0/0 otherwise)")
    base = 1.0 - total
    if np.any(base < -1e-12):
        raise ValueError("f_i + f_sph must not exceed 1")
    base = np.clip(base, 0.0, None)
    axial = d_i * base ** (0.5 * f_sph / total)
    radial = d_i * base ** ((0.5 * f_sph + f_i) / total)
    return axial, radial


def kernel_values_2c(f, d, btens):
    """Two-compartment kernel at b-tensors ``btens`` (T, 3, 3) -> (..., T)."""
    f = np.asarray(f, float)
    d = np.asarray(d, float)
    stick = np.exp(-_bd(btens, d, 0.0 * d))
    extra = np.exp(-_bd(btens, d, (1 - f) * d))
    return f[..., None] * stick + (1 - f[..., None]) * extra


def kernel_values_3c(f_i, f_sph, d_i, d_sph, btens):
    f_i = np.asarray(f_i, float)
    f_sph = np.asarray(f_sph, float)
    d_i = np.asarray(d_i, float)
    d_sph = np.asarray(d_sph, float)
    axial, radial = extracellular_3c(f_i, f_sph, d_i)
    bval = np.trace(btens, axis1=-2, axis2=-1)
    stick = np.exp(-_bd(btens, d_i, 0.0 * d_i))
    sphere = np.exp(-bval * d_sph[..., None])
    extra = np.exp(-_bd(btens, axial, radial))
    f_e = 1 - f_i - f_sph
    return f_i[..., None] * stick + f_sph[..., None] * sphere + f_e[..., None] * extra


def kernel_zonal_2c(f, d, bval, shape):
    """Kernel as a function of the cosine between encoding and fibre axis."""

    def kernel(t):
        t = np.asarray(t, float)
        btens = btensor_matrix(shape, bval, _directions_at_cosine(t.ravel()))
        return kernel_values_2c(f, d, btens).reshape(np.shape(f) + t.shape)

    return kernel


def kernel_zonal_3c(f_i, f_sph, d_i, d_sph, bval, shape):
    extracellular_3c(f_i, f_sph, d_i)  # validate eagerly

    def kernel(t):
        t = np.asarray(t, float)
        btens = btensor_matrix(shape, bval, _directions_at_cosine(t.ravel()))
        vals = kernel_values_3c(f_i, f_sph, d_i, d_sph, btens)
        return vals.reshape(np.shape(f_i) + t.shape)

    return kernel


# ---------------------------------------------------------------------------
# Acquisition schemes
# ---------------------------------------------------------------------------


def shell_lmax(n_dirs, cap=MAX_SHELL_LMAX):
    """Largest even degree whose expansion fits in ``n_dirs`` samples."""
    l_max = 0
    while l_max + 2 <= cap and sph.n_coeffs(l_max + 2) <= n_dirs:
        l_max += 2
    return l_max


@dataclass
class Shell:
    shape: str
    bval: float
    indices: np.ndarray
    dirs: np.ndarray
    l_max: int
    _sft: np.ndarray | None = field(default=None, repr=False)
    _kernel_btens: np.ndarray | None = field(default=None, repr=False)

    @property
    def sft(self):
        """Least-squares analysis matrix for this shell's directions."""
        if self._sft is None:
            self._sft = sph.sft_matrix(self.dirs, self.l_max)
        return self._sft

    def kernel_btensors(self, n_nodes=64):
        if self._kernel_btens is None or self._kernel_btens.shape[0] != n_nodes:
            t = sph.zonal_nodes(n_nodes)
            self._kernel_btens = btensor_matrix(self.shape, self.bval, _directions_at_cosine(t))
        return self._kernel_btens


class AcqScheme:
    """Per-volume b-value, direction and b-tensor shape, grouped into shells.

    Shells are ordered by (shape, b-value) with linear encodings first.
    """

    def __init__(self, bvals, bvecs, shapes, name=None):
        bvals = np.asarray(bvals, dtype=float)
        bvecs = np.asarray(bvecs, dtype=float).reshape(-1, 3)
        shapes = np.asarray(shapes, dtype=str)
        if not (len(bvals) == len(bvecs) == len(shapes)):
            raise ValueError("bvals, bvecs and shapes must have equal length")
        if np.any(bvals < 0):
            raise ValueError("negative b-value in scheme")
        bad = sorted(set(shapes) - set(SHAPES))
        if bad:
            raise ValueError(f"unsupported b-tensor shape(s): {bad}")
        self.bvals = bvals
        self.b0_mask = bvals < B0_THRESHOLD
        vecs = bvecs.copy()
        vecs[~self.b0_mask] = sph.normalize(vecs[~self.b0_mask])
        vecs[self.b0_mask] = 0.0
        self.bvecs = vecs
        self.shapes = shapes
        self.name = name
        keys = sorted(
            {(str(s), round(float(b), 4)) for s, b, z in zip(shapes, bvals, self.b0_mask) if not z},
            key=lambda k: (SHAPES.index(k[0]), k[1]),
        )
        self.shells = []
        for shape, b in keys:
            idx = np.flatnonzero(
                (~self.b0_mask) & (shapes == shape) & (np.abs(bvals - b) < 5e-5)
            )
            dirs = self.bvecs[idx]
            self.shells.append(Shell(shape, b, idx, dirs, shell_lmax(len(idx))))

    def __len__(self):
        return len(self.bvals)

    @property
    def n_b0(self):
        return int(self.b0_mask.sum())

    @property
    def weighted_indices(self):
        return np.flatnonzero(~self.b0_mask)

    def describe(self):
        parts = [f"{s.shape} b={s.bval:g}: {len(s.indices)} dirs (l_max {s.l_max})" for s in self.shells]
        return f"{self.n_b0} b=0; " + "; ".join(parts)

    def rotated(self, rot):
        """Same scheme with every direction rotated by ``rot``."""
        return AcqScheme(self.bvals, self.bvecs @ np.asarray(rot).T, self.shapes, self.name)


def read_scheme(path):
    """Parse a scheme file: ``bval gx gy gz shape`` per row, '#' comments."""
    path = Path(path)
    bvals, bvecs, shapes = [], [], []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            cols = line.split()
            if len(cols) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 columns, found {len(cols)}")
            try:
                vals = [float(c) for c in cols[:4]]
            except ValueError:
                col = next(i for i, c in enumerate(cols[:4]) if not _is_float(c))
                raise ValueError(
                    f"{path}:{lineno}: column {col + 1}: not a number: {cols[col]!r}"
                ) from None
            shape = cols[4].upper()
            if shape not in SHAPES:
                raise ValueError(
                    f"{path}:{lineno}: column 5: unsupported shape {cols[4]!r} (expected LTE or PTE)"
                )
            if vals[0] < 0:
                raise ValueError(f"{path}:{lineno}: column 1: negative b-value")
            if vals[0] >= B0_THRESHOLD and np.linalg.norm(vals[1:]) == 0:
                raise ValueError(f"{path}:{lineno}: columns 2-4: zero direction for b > 0")
            bvals.append(vals[0])
            bvecs.append(vals[1:])
            shapes.append(shape)
    if not bvals:
        raise ValueError(f"{path}: no volumes in scheme")
    return AcqScheme(bvals, bvecs, shapes, name=path.stem)


def _is_float(text):
    try:
        float(text)
    except ValueError:
        return False
    return True


def write_scheme(scheme, path, header=None):
    with open(path, "w") as fh:
        if header:
            for line in header.splitlines():
                fh.write(f"# {line}\n")
        fh.write("# bval_ms_per_um2 gx gy gz shape\n")
        for b, v, s in zip(scheme.bvals, scheme.bvecs, scheme.shapes):
            fh.write(f"{b:.4f} {v[0]: .8f} {v[1]: .8f} {v[2]: .8f} {s}\n")


def load_scheme(name):
    """Bundled schemes: ``hardi`` (two shells) or ``tensor_valued``."""
    ref = resources.files("sphmicro") / "data" / f"{name}.txt"
    if not ref.is_file():
        raise ValueError(f"no bundled scheme named {name!r}")
    with resources.as_file(ref) as p:
        scheme = read_scheme(p)
    scheme.name = name
    return scheme


def half_sphere_directions(n, seed=0, iters=400):
    """Electrostatic-repulsion directions on the half sphere.

    Each direction repels the other directions and their antipodes, so the
    set is uniform as an axis set. Returned with z >= 0.
    """
    rng = np.random.default_rng(seed)
    x0 = sph.normalize(rng.standard_normal((n, 3))).ravel()

    def energy(x):
        p = x.reshape(n, 3)
        norms = np.linalg.norm(p, axis=1, keepdims=True)
        u = p / norms
        diff = u[:, None, :] - u[None, :, :]
        summ = u[:, None, :] + u[None, :, :]
        dm = np.linalg.norm(diff, axis=-1)
        ds = np.linalg.norm(summ, axis=-1)
        np.fill_diagonal(dm, np.inf)
        np.fill_diagonal(ds, np.inf)
        e = 0.5 * (np.sum(1 / dm) + np.sum(1 / ds))
        gu = -(diff / dm[..., None] ** 3).sum(axis=1) - (summ / ds[..., None] ** 3).sum(axis=1)
        # chain rule through the normalisation u = p / |p|
        gp = (gu - np.sum(gu * u, axis=1, keepdims=True) * u) / norms
        return e, gp.ravel()

    res = minimize(energy, x0, jac=True, method="L-BFGS-B", options={"maxiter": iters})
    u = sph.normalize(res.x.reshape(n, 3))
    u[u[:, 2] < 0] *= -1
    return u


# ---------------------------------------------------------------------------
# Orientation distributions
# ---------------------------------------------------------------------------


def _smoothing_taper(l_max):
    # Funk-Hecke eigenvalues of cos^8, normalised to 1 at l = 0; multiplying
    # zonal coefficients by these is convolution with the cos^8 kernel
    h = sph.zonal_project(lambda t: t**8, l_max)
    lam = h * sph.conv_factors(l_max)
    return lam / lam[0]


def watson_zonal(kappa, l_max=ODF_LMAX):
    """Zonal coefficients of unit-mass Watson lobes ``exp(kappa t^2)``."""
    kappa = np.asarray(kappa, dtype=float)
    t = sph.zonal_nodes()
    vals = np.exp(kappa[..., None] * (t * t - 1.0))
    h = sph.zonal_project_values(vals, l_max)
    return h / (h[..., :1] * np.sqrt(4 * np.pi))


def synth_odf(rng, n=None, l_max=ODF_LMAX, kappa_range=(2.0, 64.0), max_lobes=3):
    """Random fibre ODF expansions: mixtures of 1-3 Watson lobes.

    Every lobe is convolved with the nonnegative ``cos^8`` kernel before
    truncation, so the degree-``l_max`` expansion stays nonnegative (a
    bare truncated Watson lobe rings below zero once kappa exceeds ~8).
    Returns shape ``(n, n_coeffs)`` (or a single expansion for
    ``n=None``) with ``c_00 = 1 / sqrt(4 pi)``.
    """
    single = n is None
    n = 1 if single else int(n)
    n_lobes = rng.integers(1, max_lobes + 1, size=n)
    kappa = rng.uniform(*kappa_range, size=(n, max_lobes))
    axes = sph.normalize(rng.standard_normal((n, max_lobes, 3)))
    weights = rng.dirichlet(np.ones(max_lobes), size=n)
    weights[np.arange(max_lobes)[None, :] >= n_lobes[:, None]] = 0.0
    weights /= weights.sum(axis=1, keepdims=True)
    zonal = watson_zonal(kappa, l_max) * _smoothing_taper(l_max)
    lobes = sph.zonal_to_expansion(zonal, axes)  # (n, lobes, K)
    odf = np.einsum("nk,nkc->nc", weights, lobes)
    odf /= odf[:, :1] * np.sqrt(4 * np.pi)
    return odf[0] if single else odf


def write_odf(path, odfs):
    """Plain-text ODF coefficients, one expansion per row, l_max header."""
    odfs = np.atleast_2d(odfs)
    l_max = sph.lmax_from_ncoeffs(odfs.shape[1])
    with open(path, "w") as fh:
        fh.write(f"l_max {l_max}\n")
        fh.write("# coefficient order: l = 0, 2, ...; m = -l..l within each degree\n")
        np.savetxt(fh, odfs, fmt="%.10e")


def read_odf(path):
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 2 or header[0] != "l_max":
            raise ValueError(f"{path}: missing 'l_max <n>' header line")
        l_max = int(header[1])
        data = np.loadtxt(fh, comments="#", ndmin=2)
    if data.shape[1] != sph.n_coeffs(l_max):
        raise ValueError(
            f"{path}: {data.shape[1]} columns, l_max {l_max} needs {sph.n_coeffs(l_max)}"
        )
    return data


# ---------------------------------------------------------------------------
# Tissue configurations
# ---------------------------------------------------------------------------


@dataclass
class TissueConfig2C:
    """Batch of two-compartment configurations (arrays over samples)."""

    f: np.ndarray
    d: np.ndarray
    odf: np.ndarray

    model = "2c"

    def __len__(self):
        return len(self.f)

    def params(self):
        return np.stack([self.d, self.f], axis=1)

    def with_odf(self, odf):
        return TissueConfig2C(self.f, self.d, odf)

    def validate(self):
        if np.any((self.f < 0) | (self.f > 1)) or np.any((self.d < 0) | (self.d > 3)):
            raise ValueError("two-compartment parameters out of range")
        c0 = self.odf[..., 0] * np.sqrt(4 * np.pi)
        if np.any(np.abs(c0 - 1) > 1e-9):
            raise ValueError("ODF must integrate to one")


@dataclass
class TissueConfig3C:
    f_i: np.ndarray
    f_sph: np.ndarray
    d_i: np.ndarray
    d_sph: np.ndarray
    odf: np.ndarray

    model = "3c"

    def __len__(self):
        return len(self.f_i)

    def params(self):
        return np.stack([self.d_i, self.d_sph, self.f_i, self.f_sph], axis=1)

    def with_odf(self, odf):
        return TissueConfig3C(self.f_i, self.f_sph, self.d_i, self.d_sph, odf)

    def validate(self):
        ok = (
            (self.f_i >= 0) & (self.f_i <= 1) & (self.f_sph >= 0) & (self.f_sph <= self.f_i)
            & (self.f_i + self.f_sph <= 1) & (self.d_i >= 0) & (self.d_i <= 3)
            & (self.d_sph >= 0) & (self.d_sph <= np.maximum(self.d_i, 0.5))
        )
        if not np.all(ok):
            raise ValueError("three-compartment parameters out of range")


def config_from_params(model, params, odf):
    params = np.asarray(params, dtype=float)
    if model == "2c":
        return TissueConfig2C(f=params[:, 1], d=params[:, 0], odf=odf)
    if model == "3c":
        return TissueConfig3C(
            f_i=params[:, 2], f_sph=params[:, 3], d_i=params[:, 0], d_sph=params[:, 1], odf=odf
        )
    raise ValueError(f"unknown model {model!r}")


def _odfs(rng, n, odf_pool, rotate):
    if odf_pool is None:
        odf = synth_odf(rng, n)
    else:
        odf = odf_pool[rng.integers(0, len(odf_pool), size=n)]
    if rotate:
        odf = sph.rotate_sh(odf, sph.random_rotations(rng, n))
    return odf


def sample_config_2c(rng, n, rotate=False, odf_pool=None):
    """f ~ U(0, 1), d ~ U(0, 3) with synthetic (or pooled) ODFs.

    ``rotate`` applies a Haar-random rotation to every ODF, the training
    augmentation. It matters when ODFs come from a fixed ``odf_pool``;
    freshly synthesised lobes are already isotropically oriented.
    """
    f = rng.uniform(0.0, 1.0, size=n)
    d = rng.uniform(0.0, 3.0, size=n)
    return TissueConfig2C(f=f, d=d, odf=_odfs(rng, n, odf_pool, rotate))


def sample_config_3c(rng, n, rotate=False, odf_pool=None):
    """f_i ~ U(0, 1), f_sph ~ U(0, f_i), d_i ~ U(0, 3), d_sph ~ U(0, max(d_i, 0.5)).

    Draws with f_i + f_sph > 1 (negative extra-cellular fraction) are
    rejected and redrawn.
    """
    f_i = np.empty(0)
    f_sph = np.empty(0)
    while len(f_i) < n:
        m = 2 * (n - len(f_i)) + 8
        a = rng.uniform(0.0, 1.0, size=m)
        b = rng.uniform(0.0, 1.0, size=m) * a
        keep = (a + b <= 1.0) & (a + b > 0.0)
        f_i = np.concatenate([f_i, a[keep]])
        f_sph = np.concatenate([f_sph, b[keep]])
    f_i, f_sph = f_i[:n], f_sph[:n]
    d_i = rng.uniform(0.0, 3.0, size=n)
    d_sph = rng.uniform(0.0, 1.0, size=n) * np.maximum(d_i, 0.5)
    return TissueConfig3C(f_i, f_sph, d_i, d_sph, _odfs(rng, n, odf_pool, rotate))


def sample_config(model, rng, n, rotate=False, odf_pool=None):
    if model == "2c":
        return sample_config_2c(rng, n, rotate, odf_pool)
    if model == "3c":
        return sample_config_3c(rng, n, rotate, odf_pool)
    raise ValueError(f"unknown model {model!r}")


# ---------------------------------------------------------------------------
# Synthesis and noise
# ---------------------------------------------------------------------------


def kernel_zonal_coeffs(config, shell, l_max=ODF_LMAX):
    """Zonal kernel coefficients ``(n, l_max/2 + 1)`` of one shell."""
    btens = shell.kernel_btensors()
    if config.model == "2c":
        vals = kernel_values_2c(config.f, config.d, btens)
    else:
        vals = kernel_values_3c(config.f_i, config.f_sph, config.d_i, config.d_sph, btens)
    return sph.zonal_project_values(vals, l_max)


def shell_signal_coeffs(config, shell):
    """Noiseless signal expansion of one shell, shape ``(n, n_coeffs)``.

    The ODF is a density over the sphere, so the rotation integral uses
    the measure of total mass 4 pi; this drops the 2 pi of the zonal
    convolution factor and keeps the b = 0 signal at exactly 1.
    """
    l_max = sph.lmax_from_ncoeffs(config.odf.shape[-1])
    h = kernel_zonal_coeffs(config, shell, l_max)
    return sph.zonal_convolve(config.odf, h) / (2 * np.pi)


def synth_signal(config, scheme):
    """Noiseless normalised signals for every volume, shape ``(n, n_vol)``."""
    n = len(config)
    out = np.ones((n, len(scheme)))
    for shell in scheme.shells:
        coeffs = shell_signal_coeffs(config, shell)
        l_max = sph.lmax_from_ncoeffs(coeffs.shape[-1])
        out[:, shell.indices] = coeffs @ sph.eval_basis(l_max, shell.dirs).T
    return out


@dataclass(frozen=True)
class NoiseModel:
    snr: float
    seed: int = 0

    def __post_init__(self):
        if not self.snr > 0:
            raise ValueError("SNR must be positive")


def add_rician(signals, snr, rng):
    """Rician magnitude noise with ``sigma = 1 / snr`` on every sample."""
    if not snr > 0:
        raise ValueError("SNR must be positive")
    if np.isinf(snr):
        return np.array(signals, dtype=float, copy=True)
    signals = np.asarray(signals, dtype=float)
    sigma = 1.0 / snr
    x = rng.normal(0.0, sigma, size=signals.shape)
    y = rng.normal(0.0, sigma, size=signals.shape)
    return np.sqrt((signals + x) ** 2 + y**2)


def normalize_b0(signals, scheme):
    """Divide each row by its mean b = 0 signal (no-op without b = 0 volumes)."""
    signals = np.asarray(signals, dtype=float)
    if scheme.n_b0 == 0:
        return signals
    s0 = signals[..., scheme.b0_mask].mean(axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        return signals / s0


def powder_average(signals, scheme):
    """Mean signal of every shell, ordered like ``scheme.shells``."""
    signals = np.asarray(signals, dtype=float)
    if not scheme.shells:
        raise ValueError("scheme has no diffusion-weighted shells")
    return np.stack([signals[..., s.indices].mean(axis=-1) for s in scheme.shells], axis=-1)


def shell_sh_coeffs(signals, scheme, l_max):
    """Per-shell least-squares expansions zero-filled to a common ``l_max``.

    Returns ``(..., n_shells, n_coeffs(l_max))``.
    """
    signals = np.asarray(signals, dtype=float)
    k = sph.n_coeffs(l_max)
    out = np.zeros(signals.shape[:-1] + (len(scheme.shells), k))
    for i, shell in enumerate(scheme.shells):
        if shell.l_max > l_max:
            raise ValueError(f"shell l_max {shell.l_max} exceeds requested {l_max}")
        c = signals[..., shell.indices] @ shell.sft.T
        out[..., i, : c.shape[-1]] = c
    return out


class Simulator:
    """Batches of (noisy signals, ground-truth parameters) for one scheme.

    Each batch draws from its own generator derived from
    ``(seed, batch_index)``, so batches can be produced in any order or in
    parallel and still reproduce exactly.
    """

    def __init__(self, scheme, model="2c", snr=30.0, seed=0, rotate=False, odf_pool=None):
        if model not in PARAM_NAMES:
            raise ValueError(f"unknown model {model!r}")
        self.scheme = scheme
        self.model = model
        self.snr = snr
        self.seed = seed
        self.rotate = rotate
        self.odf_pool = odf_pool

    def rng(self, batch_index):
        return np.random.default_rng([self.seed, batch_index])

    def configs(self, batch_index, n):
        return sample_config(self.model, self.rng(batch_index), n, self.rotate, self.odf_pool)

    def batch(self, batch_index, n):
        rng = self.rng(batch_index)
        cfg = sample_config(self.model, rng, n, self.rotate, self.odf_pool)
        signals = synth_signal(cfg, self.scheme)
        if np.isfinite(self.snr):
            signals = add_rician(signals, self.snr, rng)
        return signals, cfg.params(), cfg
