"""Raw numpy kernels shared by the tape-based and the plain-numpy code paths.

The neural detectors must reproduce the OBMNet iterates bit-for-bit when their
regularisation branch is silenced, so both paths route through these exact
functions rather than re-deriving the arithmetic.
"""

import numpy as np
from scipy.special import expit


def bmv(G, x):
    """Batched matrix-vector product ``G @ x`` over leading batch axes."""
    return np.matmul(G, x[..., None])[..., 0]


def bmv_t(G, v):
    """Batched ``G^T @ v``."""
    return np.matmul(np.swapaxes(G, -1, -2), v[..., None])[..., 0]


def sigmoid(x):
    return expit(x)


def l2norm(x):
    """Euclidean norm over the last axis, keepdims."""
    return np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
