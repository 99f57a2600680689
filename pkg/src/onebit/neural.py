"""Regularised gradient-descent detectors built on the diffkit tape.

Every stage runs the OBMNet step (the "GD-Net") and then adds a learned
correction computed from the stage inputs::

    x_hat  = x - alpha_t * grad,            grad = -G^T sigmoid(-G x)
    x_next = x_hat + h_t(x, grad, x_hat)

:class:`Robnet` gives each stage its own correction network, :class:`Obirim`
shares one recurrent network (two GRU cells) across stages, and
:class:`Obmnet` is the same unrolled loop with no correction at all, trainable
in its step sizes only.
"""

import numpy as np

from onebit import classic
from onebit.diffkit import BatchNorm, Conv1d, Dense, GRUCell, Module, Tensor
from onebit.diffkit import tensor as T
from onebit.errors import DegenerateInput, InvalidArgument
from onebit.mimo import effective_matrix, get_constellation

ROBNET_HIDDEN = (128, 64, 32)
OBIRIM_HIDDEN = (512, 128, 64, 32)
CONV_CHANNELS = 64
KERNEL_WIDTH = 3
GRU_HIDDEN = 1024
DEFAULT_ALPHA = 0.01


def default_eta(constellation, k_users):
    """Output norm: sqrt(2K) for QPSK (learnable), sqrt(10K) for 16-QAM (fixed)."""
    const = get_constellation(constellation)
    return float(np.sqrt(const.avg_energy * k_users))


def eta_learnable(constellation):
    return get_constellation(constellation).name == "QPSK"


def assemble_stage_channels(x_hat, grad, x_prev, k_users):
    """Stack the three stage inputs as 6 channels of length K.

    Channel order: x_hat (Re, Im), grad (Re, Im), x_prev (Re, Im). Unbatched
    ``[2K]`` inputs give ``[6, K]``; batched ``[B, 2K]`` give ``[B, 6, K]``.
    """
    parts = [T.as_tensor(v) for v in (x_hat, grad, x_prev)]
    for p in parts:
        if p.shape[-1] != 2 * k_users:
            raise InvalidArgument(f"stage input has length {p.shape[-1]}, expected {2 * k_users}")
    single = parts[0].data.ndim == 1
    B = 1 if single else parts[0].shape[0]
    out = T.concat([T.reshape(p, (B, 2, k_users)) for p in parts], axis=1)
    return T.reshape(out, (6, k_users)) if single else out


def gd_step(x, G, alpha):
    """One OBMNet iteration; returns ``(x_hat, grad)``."""
    grad = T.neg(T.bmv_t(G, T.sigmoid(T.neg(T.bmv(G, x)))))
    return T.sub(x, T.mul(alpha, grad)), grad


def normalize_output(x, eta):
    """``eta * x / |x|`` row-wise, on the tape."""
    x = T.as_tensor(x)
    n = T.l2_norm(x)
    if np.any(n.data == 0):
        raise DegenerateInput("cannot normalise a zero vector")
    return T.mul(T.div(x, n), eta)


class _FCN(Module):
    """Dense -> ReLU -> bn per hidden layer, then a linear output layer."""

    def __init__(self, n_in, hidden, n_out, rng):
        super().__init__()
        self.hidden = []
        prev = n_in
        for i, h in enumerate(hidden):
            dense = self.add_child(f"fc{i}", Dense(prev, h, rng))
            bn = self.add_child(f"bn{i}", BatchNorm(h))
            self.hidden.append((dense, bn))
            prev = h
        self.out = self.add_child("out", Dense(prev, n_out, rng))

    def __call__(self, x):
        for dense, bn in self.hidden:
            x = bn(T.relu(dense(x)))
        return self.out(x)


class _ConvFront(Module):
    def __init__(self, k_users, rng):
        super().__init__()
        self.k_users = k_users
        self.conv = self.add_child("conv", Conv1d(6, CONV_CHANNELS, KERNEL_WIDTH, rng))
        self.bn = self.add_child("bn", BatchNorm(CONV_CHANNELS))

    def __call__(self, x_hat, grad, x_prev):
        feat = assemble_stage_channels(x_hat, grad, x_prev, self.k_users)
        return T.flatten(self.bn(T.relu(self.conv(feat))))


class RobnetRegNet(Module):
    """Per-stage correction network: conv front end and a 3-layer FCN."""

    def __init__(self, k_users, rng, hidden=ROBNET_HIDDEN):
        super().__init__()
        self.front = self.add_child("front", _ConvFront(k_users, rng))
        self.fcn = self.add_child("fcn", _FCN(CONV_CHANNELS * k_users, hidden, 2 * k_users, rng))

    def __call__(self, x_hat, grad, x_prev):
        return self.fcn(self.front(x_hat, grad, x_prev))


class ObirimRegNet(Module):
    """Shared recurrent correction network: conv, GRU1 -> GRU2, 4-layer FCN."""

    def __init__(self, k_users, rng, gru_hidden=GRU_HIDDEN, hidden=OBIRIM_HIDDEN):
        super().__init__()
        self.gru_hidden = gru_hidden
        self.fcn_hidden = tuple(hidden)
        self.front = self.add_child("front", _ConvFront(k_users, rng))
        self.gru1 = self.add_child("gru1", GRUCell(CONV_CHANNELS * k_users, gru_hidden, rng))
        self.gru2 = self.add_child("gru2", GRUCell(gru_hidden, gru_hidden, rng))
        self.fcn = self.add_child("fcn", _FCN(gru_hidden, hidden, 2 * k_users, rng))

    def __call__(self, x_hat, grad, x_prev, state):
        h1, h2 = state
        feat = self.front(x_hat, grad, x_prev)
        h1 = self.gru1(feat, h1)
        h2 = self.gru2(h1, h2)
        return self.fcn(h2), (h1, h2)


class _Detector(Module):
    """Shared forward plumbing: GD-Net loop, residual correction, output scaling."""

    kind = None

    def __init__(self, T_stages, k_users, n_rx, constellation):
        super().__init__()
        if T_stages < 1:
            raise InvalidArgument("a detector needs at least one stage")
        self.T = T_stages
        self.k_users = k_users
        self.n_rx = n_rx
        self.constellation = get_constellation(constellation)

    def _init_eta(self, learnable):
        eta0 = default_eta(self.constellation, self.k_users)
        if learnable:
            self.add_param("eta", np.array(eta0))
        else:
            self.add_buffer("eta", np.array(eta0))

    @property
    def eta(self):
        if "eta" in self._params:
            return self._params["eta"]
        return Tensor(self._buffers["eta"])

    def architecture(self):
        return {
            "kind": self.kind,
            "T": self.T,
            "K": self.k_users,
            "N": self.n_rx,
            "constellation": self.constellation.name,
            "eta_learnable": "eta" in self._params,
        }

    def _alpha(self, t):
        raise NotImplementedError

    def _correction(self, t, x_hat, grad, x_prev, state):
        return None, state

    def _initial_state(self, batch):
        return None

    def forward(self, y, H, return_trajectory=False):
        """Run all stages; returns the normalised output tensor ``[B, 2K]``.

        With ``return_trajectory`` the unnormalised iterates ``x^(1..T)`` are
        returned as well.
        """
        y = np.asarray(y, dtype=float)
        if y.ndim == 1:
            y = y[None]
        G = effective_matrix(H, y)
        if G.shape[-1] != 2 * self.k_users:
            raise InvalidArgument(f"channel has {G.shape[-1] // 2} users, detector expects {self.k_users}")
        x = Tensor(np.zeros((y.shape[0], 2 * self.k_users)))
        state = self._initial_state(y.shape[0])
        traj = []
        for t in range(self.T):
            x_hat, grad = gd_step(x, G, self._alpha(t))
            h, state = self._correction(t, x_hat, grad, x, state)
            x = x_hat if h is None else T.add(x_hat, h)
            traj.append(x)
        out = normalize_output(x, self.eta)
        return (out, traj) if return_trajectory else out

    def detect(self, y, H):
        """Inference in eval mode; returns a numpy array."""
        was_training = self.training
        self.eval()
        try:
            return self.forward(y, H).data
        finally:
            self.train(was_training)


class Obmnet(_Detector):
    kind = "obmnet"

    def __init__(self, T_stages, k_users, n_rx, constellation, alpha=DEFAULT_ALPHA):
        super().__init__(T_stages, k_users, n_rx, constellation)
        self.alpha = self.add_param("alpha", np.full(T_stages, alpha))
        self._init_eta(False)

    def _alpha(self, t):
        return T.take(self.alpha, t)

    def to_params(self):
        return classic.ObmnetParams(self.alpha.data.copy(), float(self.eta.data))


class Robnet(_Detector):
    kind = "robnet"

    def __init__(self, T_stages, k_users, n_rx, constellation, rng, alpha=DEFAULT_ALPHA,
                 hidden=ROBNET_HIDDEN):
        super().__init__(T_stages, k_users, n_rx, constellation)
        self.hidden = tuple(hidden)
        self.stages = []
        for t in range(T_stages):
            stage = self.add_child(f"stage{t}", Module())
            stage.add_param("alpha", np.array(alpha))
            stage.add_child("regnet", RobnetRegNet(k_users, rng, hidden))
            self.stages.append(stage)
        self._init_eta(eta_learnable(constellation))

    def architecture(self):
        return dict(super().architecture(), hidden=list(self.hidden))

    def _alpha(self, t):
        return self.stages[t]._params["alpha"]

    def _correction(self, t, x_hat, grad, x_prev, state):
        return self.stages[t]._children["regnet"](x_hat, grad, x_prev), state

    def output_layers(self):
        return [s._children["regnet"].fcn.out for s in self.stages]


class Obirim(_Detector):
    kind = "obirim"

    def __init__(self, T_stages, k_users, n_rx, constellation, rng, alpha=DEFAULT_ALPHA,
                 gru_hidden=GRU_HIDDEN, hidden=OBIRIM_HIDDEN):
        super().__init__(T_stages, k_users, n_rx, constellation)
        self.alpha = self.add_param("alpha", np.full(T_stages, alpha))
        self.regnet = self.add_child("regnet", ObirimRegNet(k_users, rng, gru_hidden, hidden))
        self._init_eta(eta_learnable(constellation))
        self.last_state = None

    def architecture(self):
        return dict(super().architecture(), gru_hidden=self.regnet.gru_hidden,
                    hidden=list(self.regnet.fcn_hidden))

    def _alpha(self, t):
        return T.take(self.alpha, t)

    def _initial_state(self, batch):
        h = self.regnet.gru_hidden
        return Tensor(np.zeros((batch, h))), Tensor(np.zeros((batch, h)))

    def _correction(self, t, x_hat, grad, x_prev, state):
        h, state = self.regnet(x_hat, grad, x_prev, state)
        self.last_state = state
        return h, state

    def output_layers(self):
        return [self.regnet.fcn.out]


def zero_output_layers(detector):
    """Silence the correction branch (final dense weights and bias set to 0)."""
    for layer in detector.output_layers():
        layer.W.data[...] = 0.0
        layer.b.data[...] = 0.0


DETECTOR_KINDS = {"obmnet": Obmnet, "robnet": Robnet, "obirim": Obirim}


def build_detector(arch, seed=0):
    """Instantiate a detector from an architecture descriptor (fresh init)."""
    kind = arch.get("kind")
    if kind not in DETECTOR_KINDS:
        raise InvalidArgument(f"unknown detector kind {kind!r}")
    args = (int(arch["T"]), int(arch["K"]), int(arch["N"]), arch["constellation"])
    if kind == "obmnet":
        return Obmnet(*args)
    rng = np.random.default_rng(seed)
    if kind == "robnet":
        det = Robnet(*args, rng, hidden=tuple(arch.get("hidden", ROBNET_HIDDEN)))
    else:
        det = Obirim(*args, rng, gru_hidden=int(arch.get("gru_hidden", GRU_HIDDEN)),
                     hidden=tuple(arch.get("hidden", OBIRIM_HIDDEN)))
    if "eta_learnable" in arch and arch["eta_learnable"] != ("eta" in det._params):
        raise InvalidArgument("eta_learnable flag does not match the constellation default")
    return det
