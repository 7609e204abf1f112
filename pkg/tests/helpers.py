"""Shared oracles for the gradient tests."""

import numpy as np

from sphmicro.nn import Graph, Parameter
from sphmicro.nn import autodiff, ops

EPS = 1e-4
RTOL = 1e-4


def rel_err(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)


def check_gradients(build, leaves, rng, n_check=12, eps=EPS, rtol=RTOL):
    """Reverse-mode gradients of ``build(graph, params) -> scalar node`` against
    central differences on up to ``n_check`` entries of every leaf."""
    params = {k: Parameter(np.array(v, dtype=np.float64), name=k) for k, v in leaves.items()}
    graph = Graph()
    graph.backward(build(graph, params))
    grads = {k: p.grad.copy() for k, p in params.items()}

    def loss_value():
        return float(build(Graph(), params).value)

    for name, p in params.items():
        flat = p.value.reshape(-1)
        picks = rng.choice(flat.size, size=min(n_check, flat.size), replace=False)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_value()
            flat[i] = orig - eps
            down = loss_value()
            flat[i] = orig
            fd = (up - down) / (2 * eps)
            ad = grads[name].reshape(-1)[i]
            assert rel_err(ad, fd) <= rtol, f"{name}[{i}]: autodiff {ad!r} vs fd {fd!r}"


def clear_of_kinks(x, transform, margin=2e-4):
    """Move each column's zero level near its median grid value, then nudge it
    until no grid value lies within ``margin`` of zero, so +-eps perturbations
    never cross the ReLU kink."""
    x = x.copy()
    y00 = 1 / np.sqrt(4 * np.pi)
    for j in range(x.shape[1]):
        for ch in range(x.shape[2]):
            vals = transform.synthesize(x[:, j, ch, None]).ravel()
            spread = vals.max() - vals.min()
            for level in np.median(vals) + spread * np.linspace(0, 0.2, 401):
                if np.abs(vals - level).min() > margin:
                    x[0, j, ch] -= level / y00
                    break
            else:
                raise AssertionError("no kink-free level found")
    return x


def projected(graph, node, weights):
    """Scalar ``sum(node * weights)`` so every output entry gets a distinct gradient."""
    return autodiff.total(graph, autodiff.mul(graph, node, graph.constant(weights)))


def check_network_gradients(net, x, y, rng, n_check, eps=EPS, rtol=RTOL):
    """Full training-loss gradients of ``net`` against central differences on
    ``n_check`` randomly picked trainable values."""
    def loss_value():
        g, out = net.forward(x, training=True)
        return g, ops.mse(g, out, y)

    buffers = {k: v.copy() for k, v in net.buffers.items()}
    g, loss = loss_value()
    g.backward(loss)
    names = list(net.params)
    sizes = np.array([net.params[n].value.size for n in names])
    flat_picks = rng.choice(sizes.sum(), size=n_check, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    for pick in flat_picks:
        j = np.searchsorted(offsets, pick, side="right") - 1
        p = net.params[names[j]]
        i = pick - offsets[j]
        ad = p.grad.reshape(-1)[i]
        flat = p.value.reshape(-1)
        orig = flat[i]
        flat[i] = orig + eps
        up = float(loss_value()[1].value)
        flat[i] = orig - eps
        down = float(loss_value()[1].value)
        flat[i] = orig
        fd = (up - down) / (2 * eps)
        assert rel_err(ad, fd) <= rtol, f"{names[j]}[{i}]: autodiff {ad!r} vs fd {fd!r}"
    net.buffers.update(buffers)
