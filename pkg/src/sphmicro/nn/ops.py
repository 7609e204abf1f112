"""Differentiable layer operations used by the networks.

Dense activations are ``(N, F)`` arrays. Spherical activations are
coefficient-major ``(K, N, C)`` arrays: ``K`` even-degree harmonic
coefficients in the ordering of :mod:`sphmicro.sph`, ``N`` samples and
``C`` channels. Keeping the coefficient axis first lets the spherical
convolution run as one matrix product per degree and lets the grid
transforms treat ``N * C`` as a single batch axis.
"""

import numpy as np

from .. import sph


# ---------------------------------------------------------------------------
# Dense layers
# ---------------------------------------------------------------------------


def linear(graph, x, w, b, name="linear"):
    """``x @ w + b`` with ``w`` of shape ``(in, out)``."""
    xv = x.value

    def backward(g):
        return g @ w.value.T, xv.T @ g, g.sum(axis=0)

    return graph.add(xv @ w.value + b.value, (x, w, b), backward, name)


def relu(graph, x, name="relu"):
    mask = x.value > 0
    return graph.add(np.where(mask, x.value, 0).astype(x.value.dtype), (x,),
                     lambda g: (g * mask,), name)


def batchnorm(graph, x, gamma, beta, state, training, momentum=0.1, eps=1e-5, name="bn"):
    """Batch normalisation over the sample axis of ``(N, F)`` inputs.

    In training mode the batch statistics normalise the input and update
    ``state["mean"]`` / ``state["var"]`` (unbiased variance) in place;
    otherwise the running statistics are used.
    """
    xv = x.value
    if training:
        n = xv.shape[0]
        if n < 2:
            raise ValueError("batch norm in training mode needs at least two samples")
        mu = xv.mean(axis=0)
        var = xv.var(axis=0)
        state["mean"] *= 1 - momentum
        state["mean"] += momentum * mu
        state["var"] *= 1 - momentum
        state["var"] += momentum * var * n / (n - 1)
    else:
        mu, var = state["mean"], state["var"]
    inv = (1.0 / np.sqrt(var + eps)).astype(xv.dtype)
    xhat = (xv - mu) * inv
    out = gamma.value * xhat + beta.value

    def backward(g):
        dgamma = np.sum(g * xhat, axis=0)
        dbeta = g.sum(axis=0)
        dxhat = g * gamma.value
        if training:
            dx = inv * (dxhat - dxhat.mean(axis=0) - xhat * np.mean(dxhat * xhat, axis=0))
        else:
            dx = dxhat * inv
        return dx, dgamma, dbeta

    return graph.add(out.astype(xv.dtype), (x, gamma, beta), backward, name)


def mse(graph, pred, target, name="mse"):
    """Mean squared error over every element; ``target`` is an array."""
    diff = pred.value - target
    scale = 2.0 / diff.size
    return graph.add(np.mean(diff * diff), (pred,),
                     lambda g: ((g * scale * diff).astype(diff.dtype),), name)


# ---------------------------------------------------------------------------
# Spherical layers
# ---------------------------------------------------------------------------


def sconv(graph, x, w, l_out, name="sconv"):
    """Zonal-filter convolution of every input/output channel pair.

    ``x``: ``(n_coeffs(l_in), N, C_in)``; ``w``: ``(l_out/2 + 1, C_in,
    C_out)`` zonal filter coefficients per even degree. Returns
    ``(n_coeffs(l_out), N, C_out)``; degrees above ``l_in`` are zero.
    """
    xv, wv = x.value, w.value
    l_in = sph.lmax_from_ncoeffs(xv.shape[0])
    n_deg = l_out // 2 + 1
    if wv.shape[0] != n_deg or wv.shape[1] != xv.shape[2]:
        raise ValueError(f"filter shape {wv.shape} does not match input {xv.shape} at l_max {l_out}")
    if l_in > l_out:
        raise ValueError(f"input degree {l_in} exceeds layer degree {l_out}")
    cf = (sph.conv_factors(l_out)).astype(wv.dtype)
    n, c_in, c_out = xv.shape[1], wv.shape[1], wv.shape[2]
    slices = sph.degree_slices(l_out)[: l_in // 2 + 1]
    out = np.zeros((sph.n_coeffs(l_out), n, c_out), dtype=xv.dtype)
    for j, sl in enumerate(slices):
        out[sl] = xv[sl] @ (wv[j] * cf[j])

    def backward(g):
        gx = np.empty_like(xv)
        gw = np.zeros_like(wv)
        for j, sl in enumerate(slices):
            gs = g[sl].reshape(-1, c_out)
            gx[sl] = g[sl] @ (wv[j] * cf[j]).T
            gw[j] = cf[j] * (xv[sl].reshape(-1, c_in).T @ gs)
        return gx, gw

    return graph.add(out, (x, w), backward, name)


def sphere_relu(graph, x, transform, name="sphere_relu", in_transform=None):
    """ReLU in the signal domain, re-expanded to the transform's degree.

    Synthesis on the grid, pointwise ``max(0, .)`` and quadrature
    analysis. Odd degrees created by the nonlinearity are dropped (the
    grid only carries the even-degree basis). ``in_transform``, a
    lower-degree transform on the same grid, synthesises only the input
    coefficients up to its degree; the others are treated as zero.
    """
    xv = x.value
    k, n, c = xv.shape
    synth = in_transform or transform
    k_in = synth.n_coeffs
    if synth.n_phi != transform.n_phi or synth.n_rows != transform.n_rows or k_in > k:
        raise ValueError("input transform must share the grid and not exceed the input degree")
    vals = synth.synthesize(xv[:k_in].reshape(k_in, n * c)).astype(xv.dtype, copy=False)
    np.maximum(vals, 0, out=vals)
    out = transform.analyze(vals)

    def backward(g):
        gv = transform.synthesize(g.reshape(-1, n * c))
        gv *= vals > 0
        gx = synth.analyze(gv).reshape(k_in, n, c)
        if k_in == k:
            return (gx,)
        full = np.zeros_like(xv)
        full[:k_in] = gx
        return (full,)

    return graph.add(out.reshape(-1, n, c), (x,), backward, name)


def sphere_relu_pool(graph, x, transform, name="sphere_relu_pool"):
    """Signal-domain ReLU followed by global average pooling -> ``(N, C)``.

    The sphere mean of the rectified grid values equals the degree-0
    coefficient of their re-expansion divided by ``sqrt(4 pi)``, so the
    re-expansion itself is skipped.
    """
    xv = x.value
    k, n, c = xv.shape
    vals = transform.synthesize(xv.reshape(k, n * c)).astype(xv.dtype, copy=False)
    np.maximum(vals, 0, out=vals)
    pooled = transform.mean(vals)
    w = (transform.weights / (4 * np.pi))[None, :, None]

    def backward(g):
        gv = (w * (vals > 0)) * g.reshape(1, 1, n * c)
        return (transform.adjoint(gv.astype(xv.dtype)).reshape(k, n, c),)

    return graph.add(pooled.reshape(n, c), (x,), backward, name)


def dc_pool(graph, x, name="dc_pool"):
    """Global average pooling of spherical activations without a nonlinearity."""
    xv = x.value
    y00 = 1.0 / np.sqrt(4 * np.pi)

    def backward(g):
        gx = np.zeros_like(xv)
        gx[0] = g * y00
        return (gx,)

    return graph.add(xv[0] * y00, (x,), backward, name)
