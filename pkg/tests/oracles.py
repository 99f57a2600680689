"""Independent reference implementations used by the tests.

Nothing here shares code with the package beyond trivial helpers, so a bug in
the package cannot hide behind the same bug in its oracle.
"""

import itertools

import mpmath
import numpy as np
from scipy.stats import norm

from onebit.diffkit import Tape, Tensor


def mp_log_gaussian_cdf(t, dps=50):
    mpmath.mp.dps = dps
    t = mpmath.mpf(t)
    return float(mpmath.log(mpmath.erfc(-t / mpmath.sqrt(2)) / 2))


def naive_ml(y_real, Hc, rho, levels, energy):
    """Brute-force one-bit ML in the complex domain.

    ``y_real`` is the real-stacked sign vector ``[sign Re r; sign Im r]`` and
    ``Hc`` the complex channel. Candidates are scored with scipy's logcdf of
    the per-component probit ``y * (Hx) / sqrt(sigma^2 / 2)``.
    """
    n, k = Hc.shape
    sigma2 = k * energy / rho
    sd = np.sqrt(sigma2 / 2)
    y_re, y_im = y_real[:n], y_real[n:]
    best, best_x = -np.inf, None
    for combo in itertools.product(levels, repeat=2 * k):
        xc = np.array(combo[:k]) + 1j * np.array(combo[k:])
        r = Hc @ xc
        score = norm.logcdf(y_re * r.real / sd).sum() + norm.logcdf(y_im * r.imag / sd).sum()
        if score > best:
            best, best_x = score, np.array(combo, dtype=float)
    return best_x


def tape_grads(fn, arrays):
    """Analytic gradients of the scalar ``fn(*tensors)`` via the tape."""
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*ts)
    tape.backward(out, ts)
    return [t.grad for t in ts]


def fd_check(fn, arrays, probes, rng, step=1e-6):
    """Worst relative error between tape and central-difference gradients.

    ``probes`` random coordinates are drawn across all inputs. The error of one
    probe is ``|a - n| / max(|a|, |n|, 1e-3)``, i.e. absolute near zero.
    """
    analytic = tape_grads(fn, arrays)
    sizes = np.array([a.size for a in arrays])
    worst = 0.0
    for _ in range(probes):
        which = rng.choice(len(arrays), p=sizes / sizes.sum())
        idx = rng.integers(arrays[which].size)
        base = [a.copy() for a in arrays]

        def f(delta):
            pert = [b.copy() for b in base]
            pert[which].reshape(-1)[idx] += delta
            return float(fn(*[Tensor(p) for p in pert]).data)

        num = (f(step) - f(-step)) / (2 * step)
        ana = analytic[which].reshape(-1)[idx]
        worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-3))
    return worst


def fd_check_module(loss_fn, module, probes, rng, step=1e-6):
    """Like :func:`fd_check`, but perturbs the module's own parameters in place."""
    named = list(module.named_parameters())
    module.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss, [p for _, p in named])
    analytic = [p.grad.copy() for _, p in named]
    sizes = np.array([p.data.size for _, p in named])
    worst = 0.0
    for _ in range(probes):
        # every tensor is equally likely, so scalars such as step sizes get probed too
        which = rng.integers(len(named))
        idx = rng.integers(sizes[which])
        flat = named[which][1].data.reshape(-1)
        orig = flat[idx]
        vals = []
        for d in (step, -step):
            flat[idx] = orig + d
            vals.append(float(loss_fn().data))
        flat[idx] = orig
        num = (vals[0] - vals[1]) / (2 * step)
        ana = analytic[which].reshape(-1)[idx]
        worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-3))
    return worst
