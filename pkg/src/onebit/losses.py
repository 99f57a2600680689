"""Training losses: plain MSE and the constellation-aware regularised MSE.

Both accept diffkit tensors (for training) or plain arrays and return a scalar
tensor. Targets are raw lattice symbols.
"""

from dataclasses import dataclass

import numpy as np

from onebit.diffkit import tensor as T
from onebit.errors import InvalidArgument
from onebit.mimo import get_constellation


@dataclass(frozen=True)
class LossConfig:
    constellation: str = "QPSK"
    lam: float = 1.0
    beta: float = 10.0

    def __post_init__(self):
        if self.lam < 0:
            raise InvalidArgument(f"lambda must be >= 0, got {self.lam}")
        if not self.beta > 0:
            raise InvalidArgument(f"beta must be > 0, got {self.beta}")
        get_constellation(self.constellation)


def _check_pair(x_out, x_target):
    x_out = T.as_tensor(x_out)
    x_target = np.asarray(x_target, dtype=float)
    if x_out.shape != x_target.shape:
        raise InvalidArgument(f"output shape {x_out.shape} vs target shape {x_target.shape}")
    if x_out.data.ndim == 0 or x_out.shape[0] == 0:
        raise InvalidArgument("empty batch")
    if x_out.data.ndim == 1:
        x_out = T.reshape(x_out, (1, -1))
        x_target = x_target[None]
    return x_out, x_target


def _mean_sq_norm(diff):
    return T.scale(T.sum_all(T.square(diff)), 1.0 / diff.shape[0])


def mse_loss(x_out, x_target):
    """(1 / B) sum_n |x_n - t_n|^2."""
    x_out, x_target = _check_pair(x_out, x_target)
    return _mean_sq_norm(T.sub(x_out, x_target))


def smooth_quantize(x, constellation, beta):
    """tanh-based soft staircase onto the lattice levels.

    QPSK: ``tanh(beta x)``; 16-QAM: ``tanh(beta(x+2)) + tanh(beta x) + tanh(beta(x-2))``.
    Plain arrays in give plain arrays out. Summation order keeps ``Q(-x) == -Q(x)`` exact.
    """
    if not beta > 0:
        raise InvalidArgument(f"beta must be > 0, got {beta}")
    plain = not isinstance(x, T.Tensor)
    x = T.as_tensor(x)
    const = get_constellation(constellation)
    if const.name == "QPSK":
        out = T.tanh(T.scale(x, beta))
    else:
        outer = T.add(T.tanh(T.scale(T.add(x, 2.0), beta)), T.tanh(T.scale(T.sub(x, 2.0), beta)))
        out = T.add(T.tanh(T.scale(x, beta)), outer)
    return out.data if plain else out


def constellation_loss(x_out, x_target, cfg):
    """Mean over the batch of ``|x - t|^2 + lam * |Q_beta(x) - t|^2``."""
    x_out, x_target = _check_pair(x_out, x_target)
    loss = _mean_sq_norm(T.sub(x_out, x_target))
    if cfg.lam == 0:
        return loss
    q = smooth_quantize(x_out, cfg.constellation, cfg.beta)
    return T.add(loss, T.scale(_mean_sq_norm(T.sub(q, x_target)), cfg.lam))
