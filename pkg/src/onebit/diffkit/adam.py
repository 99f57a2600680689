from dataclasses import dataclass, field

import numpy as np

from onebit.errors import InvalidArgument


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """One Adam update with bias correction and decoupled weight decay.

    ``params`` and ``grads`` map names to arrays. Returns a new dict of
    parameter arrays; ``state`` is advanced in place (moments, step counter).
    Weight decay is applied as ``theta <- theta - lr * wd * theta`` ahead of
    the Adam delta.
    """
    state.step += 1
    t = state.step
    lr, b1, b2 = state.learning_rate, state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    updated = {}
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise InvalidArgument(f"gradient for {name!r} has shape {g.shape}, expected {theta.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta, dtype=float)
            v = state.v[name] = np.zeros_like(theta, dtype=float)
        # moments are updated in place; same operation order as the textbook form
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        den = np.sqrt(v / c2)
        den += state.epsilon
        step = m / c1
        step *= lr
        step /= den
        if state.weight_decay:
            new = theta * (1.0 - lr * state.weight_decay)
            new -= step
        else:
            new = theta - step
        updated[name] = new
    return updated
