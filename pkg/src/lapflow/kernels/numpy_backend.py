"""Pure-NumPy implementations of the hot kernels.

Every function here has a signature-compatible twin in the compiled
``_core`` extension; ``lapflow.kernels`` picks one backend at import time.
All kernels operate on the last axis of 2-D row blocks ``[rows, n]`` so the
callers (autodiff ops) are responsible for flattening leading axes.
"""

import numpy as np


def masked_softmax_fw(x, mask):
    """Row softmax of ``x + mask`` with exact zeros at -inf mask entries.

    x: [rows, n]; mask: [m, n] additive (0 or -inf), row i of x uses mask
    row ``i % m``. Raises if any row is fully masked.
    """
    rows, n = x.shape
    m = mask.shape[0]
    if m == rows:
        z = x + mask
    else:
        z = (x.reshape(-1, m, n) + mask).reshape(rows, n)
    zmax = np.max(z, axis=-1, keepdims=True)
    # fully masked row: max is -inf
    if np.isneginf(zmax).any():
        raise ValueError("softmax row is fully masked")
    e = np.exp(z - zmax)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_bw(p, g):
    """Backward of row softmax: dx = p * (g - sum(g * p))."""
    dot = np.sum(g * p, axis=-1, keepdims=True)
    return p * (g - dot)


def layernorm_fw(x, eps):
    """Affine-free layer norm over the last axis.

    Returns (y, inv_std) where y is the normalized output and inv_std the
    [rows, 1] reciprocal of sqrt(var + eps), saved for the backward pass.
    """
    mu = np.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    return xc * inv_std, inv_std


def layernorm_bw(y, inv_std, g):
    """Backward of layernorm_fw given its outputs and the upstream grad."""
    n = y.shape[-1]
    gm = np.sum(g, axis=-1, keepdims=True) / n
    gym = np.sum(g * y, axis=-1, keepdims=True) / n
    return inv_std * (g - gm - y * gym)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu_fw(x):
    """GELU, tanh approximation (the DiT convention)."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x * x * x)))


def gelu_bw(x, g):
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    sech2 = 1.0 - t * t
    dinner = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
    return g * (0.5 * (1.0 + t) + 0.5 * x * sech2 * dinner)


def silu_fw(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s


def silu_bw(x, g):
    s = 1.0 / (1.0 + np.exp(-x))
    return g * (s * (1.0 + x * (1.0 - s)))


def adamw_update(p, grad, m, v, lr, beta1, beta2, eps, weight_decay, bc1, bc2):
    """Fused AdamW step, in place on p/m/v (all 1-D contiguous views).

    bc1/bc2 are the bias-correction factors 1 - beta^step.
    """
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / bc1
    vhat = v / bc2
    if weight_decay != 0.0:
        p -= lr * weight_decay * p
    p -= lr * mhat / (np.sqrt(vhat) + eps)
