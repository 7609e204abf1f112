"""ADAM and the step learning-rate schedule."""

import numpy as np

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


def adam_step(params, grads, state, lr, beta1=BETA1, beta2=BETA2, eps=EPS):
    """One bias-corrected ADAM update of the arrays in ``params`` (in place).

    ``state`` is a dict holding the step count ``t`` and the moment lists
    ``m`` and ``v``; an empty dict starts a fresh optimiser.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state:
        state["t"] = 0
        state["m"] = [np.zeros_like(p) for p in params]
        state["v"] = [np.zeros_like(p) for p in params]
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return params, state


class Adam:
    """ADAM over a list of :class:`~sphmicro.nn.autodiff.Parameter`."""

    def __init__(self, parameters, lr=1e-3):
        self.parameters = list(parameters)
        self.lr = lr
        self.state = {}

    def step(self, lr=None):
        adam_step([p.value for p in self.parameters], [p.grad for p in self.parameters],
                  self.state, self.lr if lr is None else lr)


def step_schedule(batch, total, base_lr, milestones=(0.5, 0.75), factor=0.1):
    """Learning rate at ``batch`` (0-based): ``base_lr`` times ``factor``
    for every milestone fraction of ``total`` already reached."""
    passed = sum(batch >= int(round(m * total)) for m in milestones)
    return base_lr * factor**passed
