"""Glue between simulated or acquired signals and the networks.

An :class:`Estimator` bundles a network with what is needed to use it:
the architecture name (``scnn``, ``reg-mlp``, ``pa-mlp`` or ``sh-mlp``),
the acquisition scheme, the compartment model and the target scaling.
"""

import numpy as np

from .. import model as tissue
from ..fit import build_features, feature_size
from .networks import MLP, SCNN, MLPConfig, SCNNConfig
from .train import TrainConfig, train
from .weights import load_weights, save_weights

ARCHS = ("scnn", "reg-mlp", "pa-mlp", "sh-mlp")
SCNN_INPUT_LMAX = tissue.MAX_SHELL_LMAX


def _method(arch):
    if arch not in ARCHS:
        raise ValueError(f"unknown architecture {arch!r}; choose from {', '.join(ARCHS)}")
    return arch.split("-")[0]


def make_network(arch, scheme, model_kind, seed=0, dtype=np.float32):
    """Untrained network of ``arch`` sized for ``scheme`` and ``model_kind``."""
    n_out = len(tissue.PARAM_NAMES[model_kind])
    method = _method(arch)
    if method == "scnn":
        cfg = SCNNConfig(in_channels=len(scheme.shells), n_out=n_out, in_lmax=SCNN_INPUT_LMAX)
        return SCNN(cfg, seed=seed, dtype=dtype)
    return MLP(MLPConfig(n_in=feature_size(scheme, method), n_out=n_out), seed=seed, dtype=dtype)


def network_inputs(arch, signals, scheme, normalized=False):
    """Network input array for per-volume ``signals`` ``(N, n_volumes)``.

    Signals are divided by their mean b = 0 value unless ``normalized``.
    """
    method = _method(arch)
    signals = np.asarray(signals, dtype=float)
    norm = signals if normalized else tissue.normalize_b0(signals, scheme)
    if method == "scnn":
        return tissue.shell_sh_coeffs(norm, scheme, SCNN_INPUT_LMAX)
    return build_features(norm, scheme, method, normalized=True)


def batch_source(arch, simulator, batch_size, scale=None, dtype=np.float32):
    """``fn(i) -> (inputs, scaled targets)`` drawing batch ``i`` from ``simulator``."""
    scale = tissue.TARGET_SCALE[simulator.model] if scale is None else np.asarray(scale)

    def fn(i):
        signals, params, _ = simulator.batch(i, batch_size)
        x = network_inputs(arch, signals, simulator.scheme)
        return x.astype(dtype), (params * scale).astype(dtype)

    return fn


class Estimator:
    """A network together with its scheme, model kind and target scaling."""

    def __init__(self, network, arch, scheme, model_kind, scale=None):
        _method(arch)
        self.network = network
        self.arch = arch
        self.scheme = scheme
        self.model_kind = model_kind
        self.scale = np.asarray(tissue.TARGET_SCALE[model_kind] if scale is None else scale,
                                dtype=float)
        self.metadata = {}

    @property
    def param_names(self):
        return tissue.PARAM_NAMES[self.model_kind]

    def predict_inputs(self, inputs, batch_size=None):
        return self.network.predict(inputs, batch_size).astype(float) / self.scale

    def predict(self, signals, normalized=False, batch_size=None):
        """Unscaled parameter estimates ``(N, n_params)`` from per-volume signals."""
        inputs = network_inputs(self.arch, signals, self.scheme, normalized)
        return self.predict_inputs(inputs, batch_size)

    def save(self, path, **metadata):
        meta = {
            "arch": self.arch,
            "model": self.model_kind,
            "scheme": self.scheme.name or "custom",
            "scheme_layout": self.scheme.describe(),
            "scheme_volumes": len(self.scheme),
            "target_scale": [float(s) for s in self.scale],
            **self.metadata,
            **metadata,
        }
        return save_weights(path, self.network, meta)

    @classmethod
    def load(cls, path, scheme=None):
        """Load an estimator; ``scheme`` defaults to the bundled one named in the file.

        A scheme whose shell layout differs from the training scheme is
        rejected with both layouts in the message.
        """
        network, meta = load_weights(path)
        if scheme is None:
            scheme = tissue.load_scheme(meta["scheme"])
        if scheme.describe() != meta["scheme_layout"]:
            raise ValueError(
                f"scheme mismatch: network trained on [{meta['scheme_layout']}], "
                f"got [{scheme.describe()}]"
            )
        scale = [float(s) for s in meta["target_scale"].strip("[]").split(",")]
        est = cls(network, meta["arch"], scheme, meta["model"], scale)
        est.metadata = {k: v for k, v in meta.items()
                        if k not in ("arch", "model", "scheme", "scheme_layout",
                                     "scheme_volumes", "target_scale")}
        return est


def train_estimator(arch, scheme, model_kind, config, seed=None, odf_pool=None, log_every=0):
    """Build, train and wrap a network on freshly simulated batches."""
    seed = config.seed if seed is None else seed
    net = make_network(arch, scheme, model_kind, seed=seed)
    sim = tissue.Simulator(scheme, model_kind, snr=config.snr, seed=seed + 1,
                           rotate=config.rotate, odf_pool=odf_pool)
    scale = tissue.TARGET_SCALE[model_kind]
    result = train(net, batch_source(arch, sim, config.batch_size, scale), config, log_every)
    est = Estimator(result.network, arch, scheme, model_kind, scale)
    est.metadata = {"seed": seed, "batches": config.batches, "batch_size": config.batch_size,
                    "snr": config.snr, "rotate": int(config.rotate), "lr": config.lr}
    return est, result


__all__ = ["ARCHS", "Estimator", "TrainConfig", "batch_source", "make_network",
           "network_inputs", "train_estimator"]
