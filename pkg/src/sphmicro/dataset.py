"""Simulated dataset files: text manifest plus little-endian float32 blob.

Layout (format version 1)::

    # sphmicro dataset
    format_version = 1
    model = 2c
    params = d,f
    scheme = hardi
    scheme_layout = 14 b=0; LTE b=1: 60 dirs (l_max 8); ...
    snr = 30
    seed = 7
    odf_source = synthetic
    blob = test.ds.bin
    [arrays]
    signals 1000 134
    params 1000 2
    odf 1000 45

Arrays are stored back to back in manifest order, C-contiguous.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as tissue

FORMAT_VERSION = 1


@dataclass
class Dataset:
    signals: np.ndarray
    params: np.ndarray
    odf: np.ndarray
    model: str
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.signals)

    def configs(self):
        return tissue.config_from_params(self.model, self.params.astype(float),
                                         self.odf.astype(float))


def simulate_dataset(scheme, model_kind, n, snr, seed, rotate=False, odf_pool=None,
                     batch_size=10_000):
    """``n`` noisy samples drawn in fixed-size batches of a seeded simulator."""
    sim = tissue.Simulator(scheme, model_kind, snr=snr, seed=seed, rotate=rotate,
                           odf_pool=odf_pool)
    sig, par, odf = [], [], []
    for i, start in enumerate(range(0, n, batch_size)):
        s, p, cfg = sim.batch(i, min(batch_size, n - start))
        sig.append(s)
        par.append(p)
        odf.append(cfg.odf)
    meta = {"scheme": scheme.name or "custom", "scheme_layout": scheme.describe(),
            "snr": snr, "seed": seed, "rotate": int(rotate),
            "odf_source": "pool" if odf_pool is not None else "synthetic"}
    k = tissue.sph.n_coeffs(tissue.ODF_LMAX)
    cat = lambda xs, w: np.concatenate(xs) if xs else np.zeros((0, w))  # noqa: E731
    return Dataset(cat(sig, len(scheme)), cat(par, len(tissue.PARAM_NAMES[model_kind])),
                   cat(odf, k), model_kind, meta)


def save_dataset(path, ds):
    path = Path(path)
    blob = path.with_name(path.name + ".bin")
    lines = ["# sphmicro dataset", f"format_version = {FORMAT_VERSION}",
             f"model = {ds.model}", "params = " + ",".join(tissue.PARAM_NAMES[ds.model])]
    for key in sorted(ds.meta):
        lines.append(f"{key} = {ds.meta[key]}")
    lines += [f"blob = {blob.name}", "[arrays]"]
    chunks = []
    for name in ("signals", "params", "odf"):
        arr = np.ascontiguousarray(getattr(ds, name), dtype="<f4")
        lines.append(" ".join([name, *map(str, arr.shape)]))
        chunks.append(arr.tobytes())
    try:
        blob.write_bytes(b"".join(chunks))
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write dataset {path}: {exc}") from exc
    return path


def load_dataset(path):
    path = Path(path)
    header, shapes, in_arrays = {}, [], False
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line == "[arrays]":
            in_arrays = True
        elif in_arrays:
            name, *dims = line.split()
            shapes.append((name, tuple(int(d) for d in dims)))
        else:
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            header[key.strip()] = value.strip()
    if int(header.get("format_version", -1)) != FORMAT_VERSION:
        raise ValueError(f"{path}: not a version-{FORMAT_VERSION} dataset manifest")
    data = np.fromfile(path.with_name(header.pop("blob")), dtype="<f4")
    arrays, offset = {}, 0
    for name, shape in shapes:
        size = int(np.prod(shape))
        if offset + size > data.size:
            raise ValueError(f"{path}: blob too short for array {name}")
        arrays[name] = data[offset:offset + size].reshape(shape)
        offset += size
    model_kind = header.pop("model")
    header.pop("format_version")
    header.pop("params", None)
    return Dataset(arrays["signals"], arrays["params"], arrays["odf"], model_kind, header)


# ---------------------------------------------------------------------------
# Synthetic phantom
# ---------------------------------------------------------------------------

#: (d, f) of the four phantom regions
PHANTOM_REGIONS_2C = np.array([[0.8, 0.35], [1.4, 0.6], [2.0, 0.75], [1.1, 0.5]])
#: (d_i, d_sph, f_i, f_sph) of the four three-compartment phantom regions
PHANTOM_REGIONS_3C = np.array([[1.0, 0.5, 0.4, 0.2], [2.0, 0.8, 0.6, 0.1],
                               [1.5, 1.0, 0.3, 0.3], [2.5, 0.3, 0.5, 0.25]])
PHANTOM_REGIONS = {"2c": PHANTOM_REGIONS_2C, "3c": PHANTOM_REGIONS_3C}


@dataclass
class Phantom:
    """Synthetic 4D volume with piecewise-constant ground truth.

    ``labels`` is 0 in the background and ``k + 1`` inside region ``k``;
    ``truth[k]`` holds the parameters of region ``k``.
    """

    volume: object
    labels: np.ndarray
    truth: np.ndarray
    model: str


def make_phantom(scheme, regions=None, model="2c", shape=(16, 16, 16),
                 snr=30.0, s0=1000.0, seed=0):
    """Ball-shaped phantom split into azimuthal sectors of known parameters.

    Every tissue voxel gets its own random ODF, so the regions are
    homogeneous in the microstructure parameters but not in orientation.
    The background carries Rician noise around zero signal, as outside
    the head in a magnitude image. Signals are scaled by ``s0``.
    """
    from .nifti import Volume4D

    if regions is None:
        regions = PHANTOM_REGIONS[model]
    regions = np.atleast_2d(np.asarray(regions, dtype=float))
    n_regions = len(regions)
    rng = np.random.default_rng(seed)
    grid = np.stack(np.meshgrid(*[np.arange(n) - (n - 1) / 2 for n in shape], indexing="ij"))
    radius = 0.45 * min(shape)
    inside = (grid**2).sum(axis=0) <= radius**2
    sector = np.floor((np.arctan2(grid[1], grid[0]) + np.pi) / (2 * np.pi) * n_regions)
    labels = np.where(inside, np.minimum(sector, n_regions - 1).astype(int) + 1, 0)

    flat = labels.ravel()
    tissue_idx = np.flatnonzero(flat)
    params = regions[flat[tissue_idx] - 1]
    odf = tissue.synth_odf(rng, len(tissue_idx))
    config = tissue.config_from_params(model, params, odf)
    clean = np.zeros((flat.size, len(scheme)))
    clean[tissue_idx] = tissue.synth_signal(config, scheme)
    noisy = tissue.add_rician(clean, snr, rng) * s0
    data = noisy.reshape(*shape, len(scheme)).astype(np.float32)
    return Phantom(Volume4D(data), labels, regions, model)
