"""Uplink system model: channels, lattice symbols, AWGN, one-bit quantisation.

Everything works on numpy arrays. Complex quantities keep the natural
``(..., N, K)`` / ``(..., K)`` layout, real-stacked quantities use
``[Re; Im]`` along the last axis (and the ``[[Re, -Im], [Im, Re]]`` block
form for matrices), so leading batch axes are always allowed.

Symbols live on integer lattices ({+-1} for QPSK, {+-1, +-3} for 16-QAM),
and the SNR is imposed through the noise variance
``sigma^2 = K * avg_energy / rho`` (unit-variance channel taps).
"""

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from onebit.errors import DegenerateInput, InvalidArgument


@dataclass(frozen=True)
class RngStream:
    """Counter-style random stream identified by ``(seed, stream_id)``.

    ``stream_id`` may be an int or a tuple of ints (e.g. ``(snr_index, trial)``),
    so every Monte-Carlo trial gets its own reproducible stream no matter in
    which order or on which worker it is evaluated.
    """

    seed: int
    stream_id: Union[int, tuple] = 0

    def generator(self) -> np.random.Generator:
        key = self.stream_id if isinstance(self.stream_id, tuple) else (self.stream_id,)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=tuple(int(k) for k in key))
        return np.random.Generator(np.random.Philox(ss))

    def child(self, *ids) -> "RngStream":
        key = self.stream_id if isinstance(self.stream_id, tuple) else (self.stream_id,)
        return RngStream(self.seed, key + tuple(int(i) for i in ids))


def as_generator(rng) -> np.random.Generator:
    """Accept an :class:`RngStream`, a ``Generator`` or an int seed."""
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, (int, np.integer)):
        return RngStream(int(rng)).generator()
    raise InvalidArgument(f"cannot build a random generator from {type(rng).__name__}")


@dataclass(frozen=True)
class Constellation:
    """Square QAM lattice, described per real dimension.

    ``gray_bits[i]`` is the bit label of ``levels[i]``.
    """

    name: str
    levels: tuple
    gray_bits: tuple
    _level_arr: np.ndarray = field(init=False, repr=False, compare=False)
    _bits_arr: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_level_arr", np.asarray(self.levels, dtype=float))
        object.__setattr__(self, "_bits_arr", np.asarray(self.gray_bits, dtype=np.int8))

    @property
    def bits_per_dim(self) -> int:
        return self._bits_arr.shape[1]

    @property
    def bits_per_symbol(self) -> int:
        return 2 * self.bits_per_dim

    @property
    def order(self) -> int:
        return len(self.levels) ** 2

    @property
    def avg_energy(self) -> float:
        """Mean of |a + jb|^2 over all lattice pairs (a, b)."""
        a = self._level_arr
        return float(np.mean(a[:, None] ** 2 + a[None, :] ** 2))

    @property
    def level_array(self) -> np.ndarray:
        return self._level_arr.copy()

    def modulate_indices(self, idx):
        return self._level_arr[idx]

    def bits_of_indices(self, idx):
        return self._bits_arr[idx]

    def indices_of_levels(self, values):
        """Map exact lattice values to level indices (no decision logic)."""
        values = np.asarray(values)
        out = np.searchsorted(self._level_arr, values)
        out = np.clip(out, 0, len(self.levels) - 1)
        if not np.all(self._level_arr[out] == values):
            raise InvalidArgument("values are not on the lattice")
        return out


QPSK = Constellation("QPSK", levels=(-1.0, 1.0), gray_bits=((1,), (0,)))
QAM16 = Constellation(
    "QAM16",
    levels=(-3.0, -1.0, 1.0, 3.0),
    gray_bits=((0, 0), (0, 1), (1, 1), (1, 0)),
)

CONSTELLATIONS = {"QPSK": QPSK, "QAM16": QAM16}


def get_constellation(name) -> Constellation:
    if isinstance(name, Constellation):
        return name
    key = str(name).upper().replace("-", "")
    if key in ("16QAM", "QAM16"):
        key = "QAM16"
    try:
        return CONSTELLATIONS[key]
    except KeyError:
        raise InvalidArgument(f"unknown constellation {name!r}") from None


def db_to_linear(snr_db):
    return 10.0 ** (np.asarray(snr_db, dtype=float) / 10.0)


def sample_rayleigh_channel(n_rx: int, k_users: int, rng, size=None) -> np.ndarray:
    """i.i.d. CN(0, 1) channel of shape ``(N, K)`` (or ``size + (N, K)``)."""
    if n_rx < 1 or k_users < 1:
        raise InvalidArgument(f"channel dimensions must be positive, got {n_rx}x{k_users}")
    gen = as_generator(rng)
    shape = (tuple(size) if size is not None else ()) + (n_rx, k_users)
    re = gen.standard_normal(shape)
    im = gen.standard_normal(shape)
    return (re + 1j * im) * np.sqrt(0.5)


def realify_channel(Hc) -> np.ndarray:
    Hc = np.asarray(Hc)
    re, im = Hc.real, Hc.imag
    top = np.concatenate([re, -im], axis=-1)
    bottom = np.concatenate([im, re], axis=-1)
    return np.concatenate([top, bottom], axis=-2)


def realify_vector(v) -> np.ndarray:
    v = np.asarray(v)
    return np.concatenate([v.real, v.imag], axis=-1).astype(float)


def complexify_vector(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape[-1] % 2:
        raise InvalidArgument(f"real-stacked vector must have even length, got {v.shape[-1]}")
    k = v.shape[-1] // 2
    return v[..., :k] + 1j * v[..., k:]


def sample_symbols(constellation, k_users: int, rng, size=None):
    """Draw uniform symbols for ``k_users``.

    Returns ``(bits, x)`` where ``x`` is complex with shape ``size + (K,)`` and
    ``bits`` has shape ``size + (2K, bits_per_dim)``, ordered like the
    real-stacked vector (real axes of all users first, then imaginary axes).
    """
    const = get_constellation(constellation)
    gen = as_generator(rng)
    shape = (tuple(size) if size is not None else ()) + (2 * k_users,)
    idx = gen.integers(0, len(const.levels), size=shape)
    x_real = const.modulate_indices(idx)
    return const.bits_of_indices(idx), complexify_vector(x_real)


def noise_variance(rho, k_users: int, constellation) -> float:
    """Complex noise variance sigma^2 per receive antenna for linear SNR ``rho``."""
    rho = float(rho)
    if not rho > 0:
        raise InvalidArgument(f"SNR must be positive, got {rho}")
    return k_users * get_constellation(constellation).avg_energy / rho


def transmit(H, x, rho, constellation, rng) -> np.ndarray:
    """Unquantised real-stacked receive vector ``r = H x + z``.

    ``rho = inf`` is the noiseless limit and consumes no random draws.
    """
    H = np.asarray(H, dtype=float)
    x = np.asarray(x, dtype=float)
    if H.shape[-1] != x.shape[-1]:
        raise InvalidArgument(f"H has {H.shape[-1]} columns but x has length {x.shape[-1]}")
    k_users = H.shape[-1] // 2
    sigma2 = noise_variance(rho, k_users, constellation)
    clean = np.matmul(H, x[..., None])[..., 0]
    if sigma2 == 0.0:
        return clean
    gen = as_generator(rng)
    return clean + gen.standard_normal(clean.shape) * np.sqrt(sigma2 / 2.0)


def one_bit_quantize(r) -> np.ndarray:
    """Sign quantiser with ``sign(0) = +1``."""
    return np.where(np.asarray(r) >= 0, 1.0, -1.0)


def effective_matrix(H, y) -> np.ndarray:
    """``G = diag(y) H`` (batched over leading axes of ``y``)."""
    H = np.asarray(H, dtype=float)
    y = np.asarray(y, dtype=float)
    if H.shape[-2] != y.shape[-1]:
        raise InvalidArgument(f"H has {H.shape[-2]} rows but y has length {y.shape[-1]}")
    return y[..., :, None] * H


def perturb_csi(Hc, sigma_h_sq: float, rng) -> np.ndarray:
    """Add CN(0, sigma_h_sq) estimation error entrywise."""
    if sigma_h_sq < 0:
        raise InvalidArgument(f"CSI error variance must be non-negative, got {sigma_h_sq}")
    Hc = np.asarray(Hc, dtype=complex)
    if sigma_h_sq == 0:
        return Hc.copy()
    gen = as_generator(rng)
    err = gen.standard_normal(Hc.shape) + 1j * gen.standard_normal(Hc.shape)
    return Hc + err * np.sqrt(sigma_h_sq / 2.0)


def normalize_columns_channel_specific(Hc) -> np.ndarray:
    """Rescale every column to norm sqrt(N) (equal per-user channel power)."""
    Hc = np.asarray(Hc, dtype=complex)
    norms = np.linalg.norm(Hc, axis=-2, keepdims=True)
    if np.any(norms == 0):
        raise DegenerateInput("channel has an all-zero column")
    return Hc / norms * np.sqrt(Hc.shape[-2])


def nearest_symbol(x_hat, constellation):
    """Hard decision per real dimension.

    Returns ``(levels, bits)``; exact midpoints resolve to the level closer
    to zero, and the tie at zero between +-1 resolves to +1.
    """
    const = get_constellation(constellation)
    x_hat = np.asarray(x_hat, dtype=float)
    levels = const._level_arr
    # candidates sorted by |level|, positive first -> argmin prefers inner levels
    order = np.lexsort((-levels, np.abs(levels)))
    cand = levels[order]
    dist = np.abs(x_hat[..., None] - cand)
    idx = order[np.argmin(dist, axis=-1)]
    return levels[idx], const.bits_of_indices(idx)
