"""Model-based one-bit detectors: exhaustive ML, n-ML and OBMNet.

All detectors take real-stacked inputs and accept a leading batch axis:
``y: [B, 2N]`` with ``H: [2N, 2K]`` (shared) or ``[B, 2N, 2K]``.
"""

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.special import erfc, erfcx

from onebit import _kernels
from onebit.errors import DegenerateInput, InvalidArgument, NumericalDivergence, TooLarge
from onebit.mimo import effective_matrix, get_constellation

_SQRT2 = np.sqrt(2.0)
_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)
SIGMOID_CDF_SCALE = 1.702
MAX_CANDIDATES = 2 ** 20


def log_gaussian_cdf_stable(t):
    """log Phi(t) for the standard normal cdf, accurate far into the left tail.

    For t < 0 the scaled complementary error function is used,
    ``Phi(t) = erfcx(-t / sqrt 2) exp(-t^2 / 2) / 2``, so nothing underflows.
    """
    t = np.asarray(t, dtype=float)
    neg = t < 0
    tn = np.where(neg, t, 0.0)
    tp = np.where(neg, 0.0, t)
    left = np.log(0.5 * erfcx(-tn / _SQRT2)) - 0.5 * tn * tn
    right = np.log1p(-0.5 * erfc(tp / _SQRT2))
    out = np.where(neg, left, right)
    return out[()] if out.ndim == 0 else out


def mills_ratio(t):
    """phi(t) / Phi(t), evaluated without forming either factor in the tail."""
    t = np.asarray(t, dtype=float)
    neg = t < 0
    tn = np.where(neg, t, 0.0)
    left = np.sqrt(2.0 / np.pi) / erfcx(-tn / _SQRT2)
    right = np.exp(-0.5 * t * t - _LOG_SQRT_2PI - log_gaussian_cdf_stable(np.where(neg, 0.0, t)))
    return np.where(neg, left, right)


def _as_batch(y, H):
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    if single:
        y = y[None]
    H = np.asarray(H, dtype=float)
    if H.ndim == 2:
        H = np.broadcast_to(H, (y.shape[0],) + H.shape)
    if H.shape[0] != y.shape[0]:
        raise InvalidArgument(f"batch of {y.shape[0]} observations but {H.shape[0]} channels")
    return y, H, single


# ----------------------------------------------------------------------------
# exhaustive ML


def candidate_set(constellation, k_users):
    """All real-stacked candidate vectors in lexicographic level order.

    Row ``i`` is candidate ``i``; the last real dimension varies fastest.
    """
    const = get_constellation(constellation)
    n_cand = len(const.levels) ** (2 * k_users)
    if n_cand > MAX_CANDIDATES:
        raise TooLarge(f"{n_cand} candidates exceed the exhaustive-search cap of {MAX_CANDIDATES}")
    return np.array(list(itertools.product(const.levels, repeat=2 * k_users)), dtype=float)


def likelihood_scale(rho, k_users, constellation):
    """Argument scale turning ``y_i h_i^T x`` on the lattice into a unit-variance probit."""
    es = get_constellation(constellation).avg_energy
    return np.sqrt(2.0 * rho / (k_users * es))


def ml_scores(y, H, rho, constellation, likelihood="gaussian_cdf", candidates=None):
    """Log-likelihood of every candidate, shape ``[B, n_candidates]``."""
    y, H, _ = _as_batch(y, H)
    k_users = H.shape[-1] // 2
    if candidates is None:
        candidates = candidate_set(constellation, k_users)
    a = likelihood_scale(rho, k_users, constellation)
    G = effective_matrix(H, y)
    s = np.matmul(G, candidates.T) * a  # [B, 2N, C]
    if likelihood == "gaussian_cdf":
        return log_gaussian_cdf_stable(s).sum(axis=1)
    if likelihood == "sigmoid":
        return -np.logaddexp(0.0, -SIGMOID_CDF_SCALE * s).sum(axis=1)
    raise InvalidArgument(f"unknown likelihood {likelihood!r}")


def ml_exhaustive(y, H, rho, constellation, likelihood="gaussian_cdf", chunk=256):
    """Exact maximiser of the one-bit likelihood over the full lattice.

    Ties go to the lowest candidate index.
    """
    y, H, single = _as_batch(y, H)
    candidates = candidate_set(constellation, H.shape[-1] // 2)
    if np.isinf(rho):
        raise InvalidArgument("exhaustive ML needs a finite SNR")
    per_row = H.shape[1] * len(candidates)
    step = max(1, min(chunk, (1 << 22) // max(per_row, 1)))
    out = np.empty((y.shape[0], candidates.shape[1]))
    for lo in range(0, y.shape[0], step):
        sc = ml_scores(y[lo:lo + step], H[lo:lo + step], rho, constellation, likelihood, candidates)
        out[lo:lo + step] = candidates[np.argmax(sc, axis=1)]
    return out[0] if single else out


# ----------------------------------------------------------------------------
# n-ML


@dataclass(frozen=True)
class NmlConfig:
    T_max: int = 500
    alpha: float = 0.001

    def __post_init__(self):
        if self.T_max < 1 or not self.alpha > 0:
            raise InvalidArgument("n-ML needs T_max >= 1 and alpha > 0")


def nml_detect(y, H, rho, cfg=NmlConfig(), return_flags=False):
    """Gradient ascent on the probit log-likelihood with unit-sphere projection.

    Each iteration is ``x <- x + alpha sqrt(2 rho) G^T m(sqrt(2 rho) G x)`` with
    ``m`` the Mills ratio ``phi / Phi``, followed by ``x <- x / |x|``.
    Rows whose iterate turns non-finite are frozen; with ``return_flags`` they
    are reported in a boolean mask, otherwise :class:`NumericalDivergence` is raised.
    """
    if not rho > 0:
        raise InvalidArgument(f"SNR must be positive, got {rho}")
    y, H, single = _as_batch(y, H)
    G = effective_matrix(H, y)
    c = np.sqrt(2.0 * rho)
    x = np.zeros((y.shape[0], G.shape[-1]))
    flagged = np.zeros(y.shape[0], dtype=bool)
    with np.errstate(all="ignore"):
        for _ in range(cfg.T_max):
            step = cfg.alpha * c * _kernels.bmv_t(G, mills_ratio(c * _kernels.bmv(G, x)))
            nxt = x + step
            nxt = nxt / _kernels.l2norm(nxt)
            bad = ~np.all(np.isfinite(nxt), axis=1)
            flagged |= bad
            x = np.where(flagged[:, None], x, nxt)
    if return_flags:
        return (x[0], flagged[0]) if single else (x, flagged)
    if flagged.any():
        raise NumericalDivergence(f"n-ML diverged on {int(flagged.sum())} of {len(flagged)} instances",
                                  payload=flagged)
    return x[0] if single else x


# ----------------------------------------------------------------------------
# OBMNet


@dataclass
class ObmnetParams:
    step_sizes: np.ndarray
    eta: float

    def __post_init__(self):
        self.step_sizes = np.asarray(self.step_sizes, dtype=float)
        if self.step_sizes.ndim != 1 or len(self.step_sizes) < 1:
            raise InvalidArgument("OBMNet needs at least one step size")
        if not np.all(np.isfinite(self.step_sizes)):
            raise InvalidArgument("OBMNet step sizes must be finite")

    @property
    def T(self):
        return len(self.step_sizes)

    @classmethod
    def default(cls, T, eta, alpha=0.01):
        return cls(np.full(T, alpha), eta)


def sigmoid_ll_gradient(x, G):
    """Gradient ``-G^T sigmoid(-G x)`` of ``sum_i log(1 + exp(-g_i^T x))``."""
    return -_kernels.bmv_t(G, _kernels.sigmoid(-_kernels.bmv(G, x)))


def normalize_output(x, eta):
    """Scale every row of ``x`` to Euclidean norm ``eta``."""
    x = np.asarray(x, dtype=float)
    n = _kernels.l2norm(x)
    if np.any(n == 0):
        raise DegenerateInput("cannot normalise a zero vector")
    return x / n * eta


def obmnet_iterates(y, H, params):
    """Unnormalised OBMNet trajectory ``[x^(1), ..., x^(T)]`` starting from zero."""
    y, H, single = _as_batch(y, H)
    G = effective_matrix(H, y)
    x = np.zeros((y.shape[0], G.shape[-1]))
    traj = []
    for a in params.step_sizes:
        x = x - a * sigmoid_ll_gradient(x, G)
        traj.append(x[0] if single else x)
    return traj


def obmnet_detect(y, H, params):
    return normalize_output(obmnet_iterates(y, H, params)[-1], params.eta)
