"""Spherical CNN and MLP baselines.

Both network families share one small interface: an ordered set of
named :class:`~sphmicro.nn.autodiff.Parameter` objects, batch-norm
running statistics kept as plain buffers, ``build(graph, x, training)``
to record a differentiable forward pass, and ``predict(x)`` for batched
inference.

sCNN input is ``(N, C, K)``: ``C`` shells, each expanded to ``K =
n_coeffs(in_lmax)`` coefficients (zero-filled above the shell's own
degree). MLP input is ``(N, F)`` feature vectors.
"""

from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from .. import sph
from . import ops
from .autodiff import Graph, Parameter

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


@dataclass(frozen=True)
class SCNNConfig:
    in_channels: int
    n_out: int = 2
    in_lmax: int = 8
    widths: tuple = (16, 32, 64)
    filter_lmax: int = 16
    hidden: int = 128
    grid: str = "gauss"
    grid_size: int = 16

    def __post_init__(self):
        if self.in_channels < 1 or self.n_out < 1:
            raise ValueError("channel and output counts must be positive")
        if self.in_lmax % 2 or self.in_lmax > self.filter_lmax:
            raise ValueError("input l_max must be even and not above the filter l_max")
        if self.filter_lmax % 2 or self.filter_lmax > sph.MAX_BASIS_LMAX:
            raise ValueError(f"filter l_max must be even and at most {sph.MAX_BASIS_LMAX}")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))


@dataclass(frozen=True)
class MLPConfig:
    n_in: int
    n_out: int = 2
    hidden: tuple = (256, 256, 256)
    batchnorm: bool = True

    def __post_init__(self):
        if self.n_in < 1 or self.n_out < 1:
            raise ValueError("input and output sizes must be positive")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


@lru_cache(maxsize=8)
def grid_transform(kind, size, l_max, dtype_name):
    """Shared :class:`~sphmicro.sph.HalfGridTransform` for the sCNN grid."""
    grid = sph.sphere_grid(kind, size)
    return sph.HalfGridTransform(grid, l_max, dtype=np.dtype(dtype_name))


def _he_uniform(rng, fan_in, shape):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Network:
    """Shared parameter handling; subclasses define ``_init`` and ``build``."""

    kind = ""
    #: rows per inference block
    inference_batch = 4096

    def __init__(self, config, seed=0, dtype=np.float32):
        self.config = config
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.params = {}
        self.buffers = {}
        self._init(np.random.default_rng(seed))

    # -- parameter bookkeeping -------------------------------------------

    def _param(self, name, value):
        self.params[name] = Parameter(np.asarray(value, dtype=self.dtype), name=name)

    def _bn(self, name, width):
        self._param(f"{name}.gamma", np.ones(width))
        self._param(f"{name}.beta", np.zeros(width))
        self.buffers[f"{name}.mean"] = np.zeros(width, dtype=self.dtype)
        self.buffers[f"{name}.var"] = np.ones(width, dtype=self.dtype)

    def _bn_state(self, name):
        return _BufferView(self.buffers, name)

    def count_params(self):
        return int(sum(p.value.size for p in self.params.values()))

    def parameters(self):
        return list(self.params.values())

    def state_arrays(self):
        """Parameters then buffers, in a stable order, as plain arrays."""
        out = {name: p.value for name, p in self.params.items()}
        out.update(self.buffers)
        return out

    def load_state_arrays(self, arrays):
        for name, p in self.params.items():
            p.value = np.asarray(arrays[name], dtype=self.dtype).reshape(p.value.shape)
            p.zero_grad()
        for name, b in self.buffers.items():
            self.buffers[name] = np.asarray(arrays[name], dtype=self.dtype).reshape(b.shape)

    def astype(self, dtype):
        """Copy of the network with every array cast to ``dtype``."""
        clone = type(self)(self.config, seed=self.seed, dtype=dtype)
        clone.load_state_arrays(self.state_arrays())
        return clone

    def descriptor(self):
        return {"kind": self.kind, **{k: (list(v) if isinstance(v, tuple) else v)
                                      for k, v in asdict(self.config).items()}}

    # -- forward ------------------------------------------------------------

    @staticmethod
    def _check(node):
        if not np.all(np.isfinite(node.value)):
            raise FloatingPointError(f"non-finite values after layer '{node.name}'")
        return node

    def forward(self, x, training=False):
        """Graph and output node of one forward pass."""
        graph = Graph()
        out = self.build(graph, graph.constant(np.asarray(x, dtype=self.dtype)), training)
        return graph, out

    def predict(self, x, batch_size=None):
        """Inference-mode outputs for a batch of inputs.

        ``batch_size`` defaults to :attr:`inference_batch`.
        """
        x = np.asarray(x)
        batch_size = batch_size or self.inference_batch
        outs = []
        for start in range(0, len(x), batch_size):
            _, out = self.forward(x[start:start + batch_size], training=False)
            outs.append(out.value)
        if not outs:
            return np.zeros((0, self.config.n_out), dtype=self.dtype)
        return np.concatenate(outs, axis=0)

    def _head(self, graph, h, widths, training, bn=True):
        """Hidden dense layers with optional batch norm, then the output layer."""
        for i in range(len(widths)):
            h = self._check(ops.linear(graph, h, self.params[f"fc{i}.w"],
                                       self.params[f"fc{i}.b"], name=f"fc{i}"))
            if bn:
                h = self._check(ops.batchnorm(graph, h, self.params[f"bn{i}.gamma"],
                                              self.params[f"bn{i}.beta"], self._bn_state(f"bn{i}"),
                                              training, BN_MOMENTUM, BN_EPS, name=f"bn{i}"))
            h = ops.relu(graph, h, name=f"relu{i}")
        i = len(widths)
        return self._check(ops.linear(graph, h, self.params[f"fc{i}.w"],
                                      self.params[f"fc{i}.b"], name=f"fc{i}"))

    def _init_head(self, rng, n_in, widths, n_out, bn=True):
        sizes = [n_in, *widths]
        for i, width in enumerate(widths):
            self._param(f"fc{i}.w", _he_uniform(rng, sizes[i], (sizes[i], width)))
            self._param(f"fc{i}.b", np.zeros(width))
            if bn:
                self._bn(f"bn{i}", width)
        i = len(widths)
        self._param(f"fc{i}.w", _he_uniform(rng, sizes[-1], (sizes[-1], n_out)))
        self._param(f"fc{i}.b", np.zeros(n_out))


class _BufferView(dict):
    """Mutable ``{"mean", "var"}`` view onto a network's buffers."""

    def __init__(self, buffers, prefix):
        super().__init__(mean=buffers[f"{prefix}.mean"], var=buffers[f"{prefix}.var"])


class SCNN(Network):
    """Spherical CNN: three zonal convolutions with signal-domain ReLUs,
    global average pooling and a batch-normalised dense head."""

    kind = "scnn"
    # small blocks keep the grid activations cache-resident (~1.5x faster)
    inference_batch = 32

    def _init(self, rng):
        cfg = self.config
        n_deg = cfg.filter_lmax // 2 + 1
        c_in = cfg.in_channels
        for i, c_out in enumerate(cfg.widths):
            bound = 1.0 / np.sqrt(c_in * n_deg)
            self._param(f"conv{i}.w", rng.uniform(-bound, bound, size=(n_deg, c_in, c_out)))
            c_in = c_out
        self._init_head(rng, c_in, (cfg.hidden, cfg.hidden), cfg.n_out)

    @property
    def transform(self):
        cfg = self.config
        return grid_transform(cfg.grid, cfg.grid_size, cfg.filter_lmax, self.dtype.name)

    def build(self, graph, x, training):
        cfg = self.config
        xv = x.value
        k_in = sph.n_coeffs(cfg.in_lmax)
        if xv.ndim != 3 or xv.shape[1] != cfg.in_channels or xv.shape[2] != k_in:
            raise ValueError(
                f"sCNN expects input (N, {cfg.in_channels}, {k_in}), got {xv.shape}"
            )
        h = graph.add(np.ascontiguousarray(xv.transpose(2, 0, 1)), (x,),
                      lambda g: (g.transpose(1, 2, 0),), "to_coeff_major")
        transform = self.transform
        # the first convolution cannot raise the input degree
        first = grid_transform(cfg.grid, cfg.grid_size, cfg.in_lmax, self.dtype.name)
        last = len(cfg.widths) - 1
        for i in range(len(cfg.widths)):
            h = self._check(ops.sconv(graph, h, self.params[f"conv{i}.w"], cfg.filter_lmax,
                                      name=f"conv{i}"))
            if i < last:
                h = self._check(ops.sphere_relu(graph, h, transform, name=f"sphere_relu{i}",
                                                in_transform=first if i == 0 else None))
            else:
                h = self._check(ops.sphere_relu_pool(graph, h, transform, name="relu_pool"))
        return self._head(graph, h, (cfg.hidden, cfg.hidden), training)


class MLP(Network):
    """Dense / batch-norm / ReLU stack with a linear output layer."""

    kind = "mlp"

    def _init(self, rng):
        cfg = self.config
        self._init_head(rng, cfg.n_in, cfg.hidden, cfg.n_out, bn=cfg.batchnorm)

    def build(self, graph, x, training):
        cfg = self.config
        if x.value.ndim != 2 or x.value.shape[1] != cfg.n_in:
            raise ValueError(f"MLP expects input (N, {cfg.n_in}), got {x.value.shape}")
        return self._head(graph, x, cfg.hidden, training, bn=cfg.batchnorm)


def build_network(descriptor, seed=0, dtype=np.float32):
    """Network from a :meth:`Network.descriptor` dictionary."""
    desc = dict(descriptor)
    kind = desc.pop("kind")
    if kind == "scnn":
        return SCNN(SCNNConfig(**desc), seed=seed, dtype=dtype)
    if kind == "mlp":
        return MLP(MLPConfig(**desc), seed=seed, dtype=dtype)
    raise ValueError(f"unknown network kind {kind!r}")


def count_params(network):
    return network.count_params()


# ---------------------------------------------------------------------------
# Functional interface on sample-major arrays
# ---------------------------------------------------------------------------


def _run(fn, *arrays):
    graph = Graph()
    return fn(graph, *(graph.constant(a) for a in arrays)).value


def sconv_layer(inputs, filters):
    """Spherical convolution of ``(..., C_in, K)`` expansions.

    ``filters`` has shape ``(C_in, C_out, 9)`` (zonal coefficients for
    degrees 0, 2, ..., 16). Returns ``(..., C_out, n_coeffs(16))``.
    """
    inputs = np.asarray(inputs, dtype=float)
    filters = np.asarray(filters, dtype=float)
    if filters.ndim != 3 or inputs.shape[-2] != filters.shape[0]:
        raise ValueError(f"filters {filters.shape} do not match inputs {inputs.shape}")
    l_out = 2 * (filters.shape[2] - 1)
    lead = inputs.shape[:-2]
    x = inputs.reshape((-1,) + inputs.shape[-2:]).transpose(2, 0, 1)
    out = _run(lambda g, a, w: ops.sconv(g, a, w, l_out), x, filters.transpose(2, 0, 1))
    return out.transpose(1, 2, 0).reshape(lead + (filters.shape[1], out.shape[0]))


def signal_relu(coeffs, grid="gauss", grid_size=16):
    """Signal-domain ReLU of ``(..., K)`` expansions, re-expanded to the same degree."""
    coeffs = np.asarray(coeffs, dtype=float)
    l_max = sph.lmax_from_ncoeffs(coeffs.shape[-1])
    transform = grid_transform(grid, grid_size, l_max, "float64")
    flat = coeffs.reshape(-1, coeffs.shape[-1]).T[:, :, None]
    out = _run(lambda g, a: ops.sphere_relu(g, a, transform), np.ascontiguousarray(flat))
    return out[:, :, 0].T.reshape(coeffs.shape)


def global_avg_pool(coeffs, grid="gauss", grid_size=16):
    """Sphere mean of every ``(..., K)`` expansion, computed on the grid.

    The weighted grid mean is checked against the closed form
    ``c_00 / sqrt(4 pi)``.
    """
    coeffs = np.asarray(coeffs, dtype=float)
    l_max = sph.lmax_from_ncoeffs(coeffs.shape[-1])
    transform = grid_transform(grid, grid_size, l_max, "float64")
    flat = coeffs.reshape(-1, coeffs.shape[-1]).T
    pooled = transform.mean(transform.synthesize(np.ascontiguousarray(flat)))
    dc = flat[0] / np.sqrt(4 * np.pi)
    scale = max(1.0, float(np.max(np.abs(dc), initial=0.0)))
    if not np.allclose(pooled, dc, rtol=0, atol=1e-10 * scale):
        raise ArithmeticError("grid mean disagrees with the degree-0 coefficient")
    return pooled.reshape(coeffs.shape[:-1])


def scnn_forward(network, inputs):
    """Inference-mode sCNN predictions for ``(N, C, K)`` inputs."""
    if not isinstance(network, SCNN):
        raise TypeError("scnn_forward needs an SCNN")
    return network.predict(inputs)


def mlp_forward(network, features):
    """Inference-mode MLP predictions for ``(N, F)`` features."""
    if not isinstance(network, MLP):
        raise TypeError("mlp_forward needs an MLP")
    return network.predict(features)
