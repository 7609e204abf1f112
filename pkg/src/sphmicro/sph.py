"""Real, antipodally symmetric spherical harmonics.

Coefficient arrays carry the expansion along their last axis. Only even
degrees are stored, ordered by degree ascending and, within a degree, by
order from -l to l. An expansion up to ``l_max`` therefore has
``(l_max + 1) * (l_max + 2) / 2`` coefficients and coefficient ``(l, m)``
lives at index ``l * (l - 1) / 2 + l + m``.

The complex harmonics use the Condon-Shortley phase. The real basis is

    S_l^m = sqrt(2) Im(Y_l^|m|)   for m < 0
    S_l^0 = Y_l^0
    S_l^m = sqrt(2) Re(Y_l^m)     for m > 0

Directions are ``(n, 3)`` arrays of unit vectors and rotations are
``(..., 3, 3)`` arrays.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

MAX_BASIS_LMAX = 16


# ---------------------------------------------------------------------------
# Indexing helpers
# ---------------------------------------------------------------------------


def n_coeffs(l_max):
    """Number of coefficients of an even-degree expansion up to ``l_max``."""
    return (l_max + 1) * (l_max + 2) // 2


def lmax_from_ncoeffs(n):
    """Inverse of :func:`n_coeffs`; raises for counts that match no l_max."""
    l_max = int(round((np.sqrt(1 + 8 * n) - 3) / 2))
    if l_max < 0 or l_max % 2 or n_coeffs(l_max) != n:
        raise ValueError(f"{n} is not a valid even-degree coefficient count")
    return l_max


def sh_index(l, m):
    return l * (l - 1) // 2 + l + m


@lru_cache(maxsize=None)
def _lm_arrays(l_max):
    ls, ms = [], []
    for l in range(0, l_max + 1, 2):
        for m in range(-l, l + 1):
            ls.append(l)
            ms.append(m)
    ls = np.array(ls)
    ms = np.array(ms)
    ls.flags.writeable = False
    ms.flags.writeable = False
    return ls, ms


def degrees(l_max):
    """Degree ``l`` of every coefficient slot."""
    return _lm_arrays(l_max)[0]


def orders(l_max):
    """Order ``m`` of every coefficient slot."""
    return _lm_arrays(l_max)[1]


def degree_slices(l_max):
    """Slice of the coefficient axis belonging to each even degree."""
    return [slice(sh_index(l, -l), sh_index(l, l) + 1) for l in range(0, l_max + 1, 2)]


def pad_coeffs(coeffs, l_max):
    """Zero-fill (or reject truncation of) an expansion to ``l_max``."""
    coeffs = np.asarray(coeffs)
    n = coeffs.shape[-1]
    target = n_coeffs(l_max)
    if n > target:
        raise ValueError(f"cannot pad {n} coefficients down to l_max={l_max}")
    if n == target:
        return coeffs
    out = np.zeros(coeffs.shape[:-1] + (target,), dtype=coeffs.dtype)
    out[..., :n] = coeffs
    return out


def _check_lmax(l_max, upper=None):
    if int(l_max) != l_max or l_max < 0 or l_max % 2:
        raise ValueError(f"l_max must be a non-negative even integer, got {l_max}")
    if upper is not None and l_max > upper:
        raise ValueError(f"l_max={l_max} exceeds the supported maximum {upper}")


# ---------------------------------------------------------------------------
# Coordinates
# ---------------------------------------------------------------------------


def cart2sphere(dirs):
    """Return polar angle ``theta`` and azimuth ``phi`` in ``[0, 2 pi)``."""
    dirs = np.asarray(dirs, dtype=float)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    theta = np.arctan2(np.hypot(x, y), z)
    phi = np.mod(np.arctan2(y, x), 2 * np.pi)
    return theta, phi


def sphere2cart(theta, phi):
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


def normalize(dirs):
    dirs = np.asarray(dirs, dtype=float)
    norms = np.linalg.norm(dirs, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero-length direction vector")
    return dirs / norms


# ---------------------------------------------------------------------------
# Basis
# ---------------------------------------------------------------------------


def legendre_normalized(l_max, x):
    """Normalized associated Legendre functions for ``0 <= m <= l <= l_max``.

    Returns ``lam`` with ``lam[l, m] = sqrt((2l+1)/(4 pi) (l-m)!/(l+m)!)
    P_l^m(x)`` including the Condon-Shortley phase, computed with the
    usual ascending recursion (diagonal, first off-diagonal, then the
    three-term recursion in l).
    """
    x = np.asarray(x, dtype=float)
    s = np.sqrt(np.clip(1.0 - x * x, 0.0, None))
    lam = np.zeros((l_max + 1, l_max + 1) + x.shape)
    lam[0, 0] = 1.0 / np.sqrt(4 * np.pi)
    for m in range(1, l_max + 1):
        lam[m, m] = -np.sqrt((2 * m + 1) / (2 * m)) * s * lam[m - 1, m - 1]
    for m in range(0, l_max):
        lam[m + 1, m] = np.sqrt(2 * m + 3) * x * lam[m, m]
    for m in range(0, l_max + 1):
        for l in range(m + 2, l_max + 1):
            a = np.sqrt((4 * l * l - 1) / (l * l - m * m))
            b = np.sqrt(((l - 1) ** 2 - m * m) / (4 * (l - 1) ** 2 - 1))
            lam[l, m] = a * (x * lam[l - 1, m] - b * lam[l - 2, m])
    return lam


def _basis_from_angles(l_max, theta, phi):
    lam = legendre_normalized(l_max, np.cos(theta))
    out = np.empty(np.shape(theta) + (n_coeffs(l_max),))
    rt2 = np.sqrt(2.0)
    for l in range(0, l_max + 1, 2):
        out[..., sh_index(l, 0)] = lam[l, 0]
        for m in range(1, l + 1):
            out[..., sh_index(l, m)] = rt2 * lam[l, m] * np.cos(m * phi)
            out[..., sh_index(l, -m)] = rt2 * lam[l, m] * np.sin(m * phi)
    return out


def eval_basis(l_max, dirs):
    """Real symmetric basis matrix of shape ``(n_dirs, n_coeffs(l_max))``."""
    _check_lmax(l_max, MAX_BASIS_LMAX)
    dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
    if dirs.shape[0] == 0:
        raise ValueError("no directions given")
    theta, phi = cart2sphere(dirs)
    return _basis_from_angles(l_max, theta, phi)


# ---------------------------------------------------------------------------
# Transforms
# ---------------------------------------------------------------------------


class RankDeficientError(ValueError):
    pass


def sft_matrix(dirs, l_max, ridge=0.0, max_cond=1e10):
    """Least-squares analysis matrix ``A`` with ``coeffs = samples @ A.T``.

    The pseudo-inverse is formed from the SVD of the basis matrix so that
    rank deficiency is detected instead of silently amplified.
    """
    _check_lmax(l_max, MAX_BASIS_LMAX)
    dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
    need = n_coeffs(l_max)
    if dirs.shape[0] < need:
        raise ValueError(
            f"l_max={l_max} needs at least {need} directions, got {dirs.shape[0]}"
        )
    basis = eval_basis(l_max, dirs)
    u, s, vt = np.linalg.svd(basis, full_matrices=False)
    cond = s[0] / s[-1] if s[-1] > 0 else np.inf
    if ridge == 0.0 and cond > max_cond:
        raise RankDeficientError(
            f"basis matrix is numerically rank deficient (condition number {cond:.3g})"
        )
    inv_s = s / (s * s + ridge) if ridge else 1.0 / s
    return (vt.T * inv_s) @ u.T


def sft_lstsq(samples, dirs, l_max, ridge=0.0, return_residual=False):
    """Fit even-degree coefficients to samples on arbitrary directions.

    ``samples`` may carry leading batch axes; the last axis runs over
    ``dirs``. With ``return_residual`` the Euclidean residual norm of each
    fit is returned as well.
    """
    samples = np.asarray(samples, dtype=float)
    amat = sft_matrix(dirs, l_max, ridge=ridge)
    coeffs = samples @ amat.T
    if not return_residual:
        return coeffs
    fitted = coeffs @ eval_basis(l_max, dirs).T
    return coeffs, np.linalg.norm(fitted - samples, axis=-1)


def isft(coeffs, dirs):
    """Evaluate expansions at ``dirs``; leading axes of ``coeffs`` broadcast."""
    coeffs = np.asarray(coeffs)
    l_max = lmax_from_ncoeffs(coeffs.shape[-1])
    return coeffs @ eval_basis(l_max, dirs).T


def conv_factors(l_max):
    """Per-degree factor ``2 pi sqrt(4 pi / (2l + 1))`` of the zonal convolution."""
    ls = np.arange(0, l_max + 1, 2)
    return 2 * np.pi * np.sqrt(4 * np.pi / (2 * ls + 1))


def zonal_convolve(f, h_zonal):
    """Convolve expansions with zonal filters given per even degree.

    ``h_zonal[..., k]`` is the ``m = 0`` coefficient of degree ``2k``. The
    filter must cover every degree present in ``f``; extra filter degrees
    are ignored.
    """
    f = np.asarray(f)
    h_zonal = np.asarray(h_zonal)
    l_max = lmax_from_ncoeffs(f.shape[-1])
    n_deg = l_max // 2 + 1
    if h_zonal.shape[-1] < n_deg:
        raise ValueError(
            f"filter covers {h_zonal.shape[-1]} even degrees, expansion needs {n_deg}"
        )
    scale = conv_factors(l_max) * h_zonal[..., :n_deg]
    return f * scale[..., degrees(l_max) // 2]


@lru_cache(maxsize=None)
def _gauss_legendre_zonal(l_max, n_nodes):
    t, w = np.polynomial.legendre.leggauss(n_nodes)
    lam = legendre_normalized(l_max, t)[0::2, 0]  # (n_deg, n_nodes)
    proj = 2 * np.pi * w * lam
    t.flags.writeable = False
    proj.flags.writeable = False
    return t, proj


def zonal_nodes(n_nodes=64):
    """Gauss-Legendre nodes in ``cos(theta)`` used by :func:`zonal_project`."""
    return _gauss_legendre_zonal(0, n_nodes)[0]


def zonal_project(kernel, l_max, n_nodes=64):
    """Zonal coefficients of a function of ``cos(theta)``.

    ``kernel`` is called once with the quadrature nodes (shape
    ``(n_nodes,)``) and may return extra leading batch axes. The result
    has shape ``(..., l_max // 2 + 1)``.
    """
    _check_lmax(l_max)
    if n_nodes < 64:
        raise ValueError("at least 64 quadrature nodes are required")
    t, proj = _gauss_legendre_zonal(l_max, n_nodes)
    values = np.asarray(kernel(t), dtype=float)
    return values @ proj.T


def zonal_project_values(values, l_max):
    """Project kernel values already sampled at :func:`zonal_nodes`."""
    values = np.asarray(values, dtype=float)
    _, proj = _gauss_legendre_zonal(l_max, values.shape[-1])
    return values @ proj.T


def zonal_to_expansion(h_zonal, axes=None):
    """Place zonal coefficients into a full expansion.

    Without ``axes`` the function stays aligned with z. With unit
    ``axes`` of shape ``(..., 3)`` the zonal function is re-centred on
    each axis through the addition theorem
    ``c_lm = sqrt(4 pi / (2l+1)) h_l S_lm(axis)``.
    """
    h_zonal = np.asarray(h_zonal, dtype=float)
    l_max = 2 * (h_zonal.shape[-1] - 1)
    ls = degrees(l_max)
    if axes is None:
        out = np.zeros(h_zonal.shape[:-1] + (n_coeffs(l_max),))
        for l in range(0, l_max + 1, 2):
            out[..., sh_index(l, 0)] = h_zonal[..., l // 2]
        return out
    axes = np.asarray(axes, dtype=float)
    theta, phi = cart2sphere(axes)
    basis = _basis_from_angles(l_max, theta, phi)
    scale = np.sqrt(4 * np.pi / (2 * ls + 1))
    return basis * scale * h_zonal[..., ls // 2]


# ---------------------------------------------------------------------------
# Rotations
# ---------------------------------------------------------------------------


def euler_zyz(alpha, beta, gamma):
    """Rotation matrices ``Rz(alpha) Ry(beta) Rz(gamma)``."""
    alpha, beta, gamma = np.broadcast_arrays(
        np.asarray(alpha, float), np.asarray(beta, float), np.asarray(gamma, float)
    )

    def rz(a):
        c, s = np.cos(a), np.sin(a)
        out = np.zeros(a.shape + (3, 3))
        out[..., 0, 0], out[..., 0, 1] = c, -s
        out[..., 1, 0], out[..., 1, 1] = s, c
        out[..., 2, 2] = 1.0
        return out

    def ry(b):
        c, s = np.cos(b), np.sin(b)
        out = np.zeros(b.shape + (3, 3))
        out[..., 0, 0], out[..., 0, 2] = c, s
        out[..., 2, 0], out[..., 2, 2] = -s, c
        out[..., 1, 1] = 1.0
        return out

    return rz(alpha) @ ry(beta) @ rz(gamma)


def rotation_z(angle):
    return euler_zyz(angle, 0.0, 0.0)


def random_rotations(rng, n):
    """Haar-uniform rotations from normalised Gaussian quaternions."""
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    out = np.empty((n, 3, 3))
    out[:, 0, 0] = 1 - 2 * (y * y + z * z)
    out[:, 0, 1] = 2 * (x * y - z * w)
    out[:, 0, 2] = 2 * (x * z + y * w)
    out[:, 1, 0] = 2 * (x * y + z * w)
    out[:, 1, 1] = 1 - 2 * (x * x + z * z)
    out[:, 1, 2] = 2 * (y * z - x * w)
    out[:, 2, 0] = 2 * (x * z - y * w)
    out[:, 2, 1] = 2 * (y * z + x * w)
    out[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def _ivanic_blocks(rot, l_max):
    """Real-harmonic rotation blocks for every degree up to ``l_max``.

    Ivanic-Ruedenberg recursion in the real basis without the
    Condon-Shortley phase, whose degree-one harmonics are proportional to
    (y, z, x). Block ``l`` maps coefficients of ``f`` to coefficients of
    ``x -> f(R^-1 x)``.
    """
    batch = rot.shape[:-2]
    perm = [1, 2, 0]
    r1 = rot[..., perm, :][..., :, perm]
    blocks = [np.ones(batch + (1, 1)), r1]

    def R1(i, j):
        return r1[..., i + 1, j + 1]

    for l in range(2, l_max + 1):
        prev = blocks[l - 1]

        def Rp(a, b):
            return prev[..., a + l - 1, b + l - 1]

        def P(i, a, b):
            if b == l:
                return R1(i, 1) * Rp(a, l - 1) - R1(i, -1) * Rp(a, -l + 1)
            if b == -l:
                return R1(i, 1) * Rp(a, -l + 1) + R1(i, -1) * Rp(a, l - 1)
            return R1(i, 0) * Rp(a, b)

        cur = np.zeros(batch + (2 * l + 1, 2 * l + 1))
        for m in range(-l, l + 1):
            d0 = 1.0 if m == 0 else 0.0
            am = abs(m)
            for mp in range(-l, l + 1):
                denom = (l + mp) * (l - mp) if abs(mp) < l else (2 * l) * (2 * l - 1)
                u = np.sqrt((l + m) * (l - m) / denom)
                v = 0.5 * np.sqrt((1 + d0) * (l + am - 1) * (l + am) / denom) * (1 - 2 * d0)
                w = -0.5 * np.sqrt(max(l - am - 1, 0) * (l - am) / denom) * (1 - d0)
                val = 0.0
                if u != 0:
                    val = val + u * P(0, m, mp)
                if v != 0:
                    if m == 0:
                        vv = P(1, 1, mp) + P(-1, -1, mp)
                    elif m > 0:
                        dm1 = 1.0 if m == 1 else 0.0
                        vv = P(1, m - 1, mp) * np.sqrt(1 + dm1)
                        if m != 1:
                            vv = vv - P(-1, -m + 1, mp)
                    else:
                        dm1 = 1.0 if m == -1 else 0.0
                        vv = P(-1, -m - 1, mp) * np.sqrt(1 + dm1)
                        if m != -1:
                            vv = vv + P(1, m + 1, mp)
                    val = val + v * vv
                if w != 0:
                    if m > 0:
                        ww = P(1, m + 1, mp) + P(-1, -m - 1, mp)
                    else:
                        ww = P(1, m - 1, mp) - P(-1, -m + 1, mp)
                    val = val + w * ww
                cur[..., m + l, mp + l] = val
        blocks.append(cur)
    return blocks


def sh_rotation_blocks(rot, l_max):
    """Rotation blocks of the even degrees in this module's basis.

    Returns a list with one ``(..., 2l+1, 2l+1)`` array per even degree.
    """
    rot = np.asarray(rot, dtype=float)
    blocks = _ivanic_blocks(rot, l_max)
    out = []
    for l in range(0, l_max + 1, 2):
        sign = (-1.0) ** np.abs(np.arange(-l, l + 1))
        out.append(blocks[l] * sign[:, None] * sign[None, :])
    return out


def sh_rotation_matrix(rot, l_max):
    """Block-diagonal ``(..., K, K)`` matrix ``D`` with ``rotate_sh(c, R) = D @ c``."""
    blocks = sh_rotation_blocks(rot, l_max)
    k = n_coeffs(l_max)
    out = np.zeros(np.shape(rot)[:-2] + (k, k))
    for blk, sl in zip(blocks, degree_slices(l_max)):
        out[..., sl, sl] = blk
    return out


def rotate_sh(coeffs, rot):
    """Coefficients of ``x -> f(R^-1 x)``.

    Leading axes of ``coeffs`` and ``rot[..., :, :]`` broadcast against
    each other, so one expansion can be rotated by many rotations at once.
    """
    coeffs = np.asarray(coeffs, dtype=float)
    l_max = lmax_from_ncoeffs(coeffs.shape[-1])
    blocks = sh_rotation_blocks(rot, l_max)
    parts = []
    for blk, sl in zip(blocks, degree_slices(l_max)):
        parts.append((blk @ coeffs[..., sl, None])[..., 0])
    return np.concatenate(parts, axis=-1)


# ---------------------------------------------------------------------------
# Grids
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SphereGrid:
    """Directions on the sphere with optional quadrature weights.

    Product grids (``equiangular`` and ``gauss``) also record their polar
    angles and azimuth count so that separable transforms can use them.
    """

    dirs: np.ndarray
    weights: np.ndarray | None
    kind: str
    theta: np.ndarray | None = None
    n_phi: int | None = None

    def __len__(self):
        return self.dirs.shape[0]

    @classmethod
    def from_file(cls, path):
        dirs = normalize(np.loadtxt(path, comments="#", ndmin=2)[:, :3])
        return cls(dirs=dirs, weights=None, kind="file")


def _dh_theta_weights(bandwidth):
    n = 2 * bandwidth
    theta = np.pi * (2 * np.arange(n) + 1) / (4 * bandwidth)
    k = np.arange(n)
    # int_0^pi cos(k t) sin(t) dt
    with np.errstate(divide="ignore", invalid="ignore"):
        moments = np.where(k % 2 == 0, 2.0 / (1.0 - k * k), 0.0)
    vander = np.cos(np.outer(k, theta))
    return theta, np.linalg.solve(vander, moments)


def _product_grid(theta, theta_weights, n_phi, kind):
    phi = 2 * np.pi * np.arange(n_phi) / n_phi
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    dirs = sphere2cart(tt.ravel(), pp.ravel())
    weights = np.repeat(theta_weights * (2 * np.pi / n_phi), n_phi)
    return SphereGrid(dirs=dirs, weights=weights, kind=kind, theta=theta, n_phi=n_phi)


def fibonacci_directions(n):
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    phi = np.mod(np.pi * (3.0 - np.sqrt(5.0)) * np.arange(n), 2 * np.pi)
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def sphere_grid(kind, n):
    """Build a sampling grid.

    ``fibonacci``: ``n`` spiral points, no weights.
    ``equiangular``: Driscoll-Healy ``2n x 2n`` grid for bandwidth ``n``
    with weights exact for products of harmonics of degree below ``n``.
    ``gauss``: Gauss-Legendre product grid exact for products of
    harmonics up to degree ``n`` (an even number of polar nodes and an
    even azimuth count, so the grid is closed under antipodes).
    """
    n = int(n)
    if n < 1:
        raise ValueError("grid size must be at least 1")
    if kind == "fibonacci":
        return SphereGrid(dirs=fibonacci_directions(n), weights=None, kind=kind)
    if kind == "equiangular":
        theta, tw = _dh_theta_weights(n)
        return _product_grid(theta, tw, 2 * n, kind)
    if kind == "gauss":
        n_theta = n + 1 + (n + 1) % 2
        x, tw = np.polynomial.legendre.leggauss(n_theta)
        order = np.argsort(-x)  # north pole first
        theta = np.arccos(x[order])
        n_phi = 2 * n + 2
        return _product_grid(theta, tw[order], n_phi, kind)
    raise ValueError(f"unsupported grid kind {kind!r}")


def so3_grid(bandwidth):
    """``bandwidth**3`` rotations on the Euler-angle sampling grid.

    alpha and gamma take ``2 pi k / B``; beta takes the half-sample
    offset values ``pi (2k + 1) / (2B)`` so that no two samples collapse
    onto the same rotation at beta = 0.
    """
    if bandwidth < 1:
        raise ValueError("bandwidth must be at least 1")
    k = np.arange(bandwidth)
    ag = 2 * np.pi * k / bandwidth
    beta = np.pi * (2 * k + 1) / (2 * bandwidth)
    a, b, g = np.meshgrid(ag, beta, ag, indexing="ij")
    return euler_zyz(a.ravel(), b.ravel(), g.ravel())


# ---------------------------------------------------------------------------
# Separable transform on product grids
# ---------------------------------------------------------------------------


class HalfGridTransform:
    """Synthesis/analysis between coefficients and the northern half of a
    product grid.

    Even-degree expansions are antipodally symmetric, so the values on
    the northern rows determine the function and the full-grid quadrature
    is twice the northern sum. Synthesis runs a per-order Legendre step
    followed by a single matrix product over azimuths. Arrays are
    coefficient-major: coefficients ``(n_coeffs, M)`` and grid values
    ``(n_phi, n_rows, M)``.
    """

    def __init__(self, grid, l_max, dtype=np.float64):
        if grid.theta is None:
            raise ValueError("separable transforms need a product grid")
        _check_lmax(l_max)
        theta = np.asarray(grid.theta)
        if len(theta) % 2:
            raise ValueError("product grid must have an even number of polar rows")
        rows = len(theta) // 2
        n_phi = grid.n_phi
        if n_phi % 2:
            raise ValueError("product grid must have an even azimuth count")
        theta_w = grid.weights.reshape(len(theta), n_phi)[:, 0] * n_phi / (2 * np.pi)
        self.l_max = l_max
        self.n_rows = rows
        self.n_phi = n_phi
        self.n_coeffs = n_coeffs(l_max)
        # quadrature weight of every northern sample, doubled for the south
        self.weights = (2 * theta_w[:rows] * 2 * np.pi / n_phi).astype(dtype)

        lam = legendre_normalized(l_max, np.cos(theta[:rows]))
        n_slots = 2 * l_max + 1
        n_ls = l_max // 2 + 1
        legendre = np.zeros((n_slots, rows, n_ls))
        gather = np.zeros((n_slots, n_ls), dtype=np.intp)
        valid = np.zeros((n_slots, n_ls), dtype=bool)
        trig = np.zeros((n_phi, n_slots))
        phi = 2 * np.pi * np.arange(n_phi) / n_phi
        for slot in range(n_slots):
            m = slot - l_max
            am = abs(m)
            scale = 1.0 if m == 0 else np.sqrt(2.0)
            if m > 0:
                trig[:, slot] = np.cos(m * phi)
            elif m < 0:
                trig[:, slot] = np.sin(am * phi)
            else:
                trig[:, slot] = 1.0
            l0 = am + (am % 2)
            for s, l in enumerate(range(l0, l_max + 1, 2)):
                legendre[slot, :, s] = scale * lam[l, am]
                gather[slot, s] = sh_index(l, m)
                valid[slot, s] = True
        self._legendre = legendre.astype(dtype)
        self._legendre_t = np.ascontiguousarray(legendre.transpose(0, 2, 1)).astype(dtype)
        # analysis folds the row quadrature weights into the Legendre step
        self._legendre_tw = (self._legendre_t * self.weights[None, None, :]).astype(dtype)
        self._gather = gather
        flat = np.flatnonzero(valid.ravel())
        coeff_of_flat = gather.ravel()[flat]
        self._scatter = flat[np.argsort(coeff_of_flat)]
        self._trig = trig.astype(dtype)
        self._trig_t = np.ascontiguousarray(trig.T).astype(dtype)
        self.dtype = dtype

    def synthesize(self, coeffs):
        """``(n_coeffs, M)`` coefficients -> ``(n_phi, n_rows, M)`` values."""
        m = coeffs.shape[1]
        padded = coeffs[self._gather]  # (slots, n_ls, M)
        per_order = self._legendre @ padded  # (slots, rows, M)
        values = self._trig @ per_order.reshape(per_order.shape[0], -1)
        return values.reshape(self.n_phi, self.n_rows, m)

    def _project(self, values, legendre_t):
        m = values.shape[2]
        per_order = self._trig_t @ values.reshape(self.n_phi, -1)
        per_order = per_order.reshape(-1, self.n_rows, m)
        padded = legendre_t @ per_order  # (slots, n_ls, M)
        return padded.reshape(-1, m)[self._scatter]

    def adjoint(self, values):
        """Transpose of :meth:`synthesize` (no quadrature weights)."""
        return self._project(values, self._legendre_t)

    def analyze(self, values):
        """Quadrature analysis: coefficients of grid values."""
        return self._project(values, self._legendre_tw)

    def mean(self, values):
        """Sphere average of grid values, shape ``(M,)``."""
        w = self.weights / (4 * np.pi)
        return np.einsum("prm,r->m", values, w)
