"""Parameter containers for the layer kinds the detectors use."""

from collections import OrderedDict

import numpy as np

from onebit.diffkit import tensor as T
from onebit.diffkit.tensor import Tensor


def _glorot(rng, shape, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Tree of named parameter tensors plus non-trainable buffers."""

    def __init__(self):
        self._params = OrderedDict()
        self._buffers = OrderedDict()
        self._children = OrderedDict()
        self.training = True

    def add_param(self, name, value):
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def add_buffer(self, name, value):
        self._buffers[name] = np.asarray(value, dtype=np.float64)
        return self._buffers[name]

    def add_child(self, name, module):
        self._children[name] = module
        return module

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self):
        return sum(p.data.size for p in self.parameters())

    def train(self, mode=True):
        self.training = mode
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


class Dense(Module):
    def __init__(self, n_in, n_out, rng):
        super().__init__()
        self.W = self.add_param("W", _glorot(rng, (n_in, n_out), n_in, n_out))
        self.b = self.add_param("b", np.zeros(n_out))

    def __call__(self, x):
        return T.dense(x, self.W, self.b)


class Conv1d(Module):
    def __init__(self, c_in, c_out, width, rng):
        super().__init__()
        self.K = self.add_param("K", _glorot(rng, (c_out, c_in, width), c_in * width, c_out * width))
        self.b = self.add_param("b", np.zeros(c_out))

    def __call__(self, x):
        return T.conv1d_same(x, self.K, self.b)


class BatchNorm(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = self.add_param("gamma", np.ones(channels))
        self.beta = self.add_param("beta", np.zeros(channels))
        self.running_mean = self.add_buffer("running_mean", np.zeros(channels))
        self.running_var = self.add_buffer("running_var", np.ones(channels))

    def __call__(self, x):
        return T.batchnorm(
            x,
            self.gamma,
            self.beta,
            self._buffers["running_mean"],
            self._buffers["running_var"],
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
        )


class GRUCell(Module):
    GATES = ("r", "z", "n")

    def __init__(self, n_in, hidden, rng):
        super().__init__()
        self.hidden = hidden
        bound = np.sqrt(1.0 / hidden)
        for g in self.GATES:
            self.add_param(f"W_x{g}", rng.uniform(-bound, bound, size=(n_in, hidden)))
        for g in self.GATES:
            self.add_param(f"W_h{g}", rng.uniform(-bound, bound, size=(hidden, hidden)))
        for g in self.GATES:
            self.add_param(f"b_x{g}", np.zeros(hidden))
            self.add_param(f"b_h{g}", np.zeros(hidden))

    def __call__(self, x, h_prev):
        return T.gru_cell(x, h_prev, self._params)
