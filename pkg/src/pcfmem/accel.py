"""Hot numeric kernels, numba-compiled when available.

Set ``PCFMEM_NO_NUMBA=1`` to force the pure-numpy path (the same source
runs undecorated). Kernels keep identical operation order on both paths
so results agree to the last bit in practice.
"""

import math
import os

import numpy as np


def _numba_wanted() -> bool:
    flag = os.environ.get("PCFMEM_NO_NUMBA", "").strip().lower()
    return flag not in ("1", "true", "yes", "on")


USING_NUMBA = False
if _numba_wanted():
    try:
        from numba import njit as _njit

        USING_NUMBA = True
    except ImportError:  # numba missing: silently fall back
        USING_NUMBA = False

if not USING_NUMBA:

    def _njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(fn):
            return fn

        return wrap


njit = _njit

# Fused-silica Sellmeier fit (lambda in um)
_B1 = 0.6961663
_B2 = 0.4079426
_B3 = 0.8974794
_C1 = 0.0684043**2
_C2 = 0.1162414**2
_C3 = 9.896161**2

# Cladding correction and confinement-loss shape constants
_FILL_A = 0.08
_FILL_P = 1.5
_LOSS_ALPHA_MAX = 1.0e3
_LOSS_KAPPA = 3.0
_LOSS_S = 4.0

_DISP_PREF = 1.0e4 / 2.99792458


@njit(cache=True)
def sellmeier_n(lam: float) -> float:
    l2 = lam * lam
    s = (
        _B1 * l2 / (l2 - _C1)
        + _B2 * l2 / (l2 - _C2)
        + _B3 * l2 / (l2 - _C3)
    )
    return math.sqrt(1.0 + s)


@njit(cache=True)
def n_eff(pitch: float, dratio: float, lam: float) -> float:
    base = sellmeier_n(lam)
    rel = lam / pitch
    return base - _FILL_A * dratio**_FILL_P * rel * rel


@njit(cache=True)
def confinement_loss(pitch: float, dratio: float, n_rings: float, lam: float) -> float:
    rel = lam / pitch
    return _LOSS_ALPHA_MAX * math.exp(-_LOSS_KAPPA * n_rings * dratio) * rel**_LOSS_S


@njit(cache=True)
def dispersion_fd(pitch: float, dratio: float, lam: float, h: float) -> float:
    # 5-point central second derivative of n_eff wrt wavelength
    f_m2 = n_eff(pitch, dratio, lam - 2.0 * h)
    f_m1 = n_eff(pitch, dratio, lam - h)
    f_0 = n_eff(pitch, dratio, lam)
    f_p1 = n_eff(pitch, dratio, lam + h)
    f_p2 = n_eff(pitch, dratio, lam + 2.0 * h)
    d2 = (-f_m2 + 16.0 * f_m1 - 30.0 * f_0 + 16.0 * f_p1 - f_p2) / (12.0 * h * h)
    return -_DISP_PREF * lam * d2


@njit(cache=True)
def mlp_forward_vec(x, w1, b1, w2, b2, wv, bv: float):
    """Single-vector controller trunk: tanh(tanh(x W1 + b1) W2 + b2).

    Returns (t2, value); the caller normalizes t2 into the match vector.
    """
    t1 = np.tanh(np.dot(x, w1) + b1)
    t2 = np.tanh(np.dot(t1, w2) + b2)
    v = float(np.dot(t2, wv)) + bv
    return t2, v


@njit(cache=True)
def gae_scan(rewards, values, gamma: float, lam: float):
    """Generalized advantage estimation over one episode (terminal V = 0)."""
    t_len = rewards.shape[0]
    adv = np.empty(t_len, dtype=np.float64)
    running = 0.0
    for t in range(t_len - 1, -1, -1):
        next_v = values[t + 1] if t + 1 < t_len else 0.0
        delta = rewards[t] + gamma * next_v - values[t]
        running = delta + gamma * lam * running
        adv[t] = running
    return adv, adv + values


def warmup() -> None:
    """Trigger compilation of every kernel (no-op on the numpy path)."""
    sellmeier_n(1.55)
    n_eff(2.3, 0.5, 1.55)
    confinement_loss(2.3, 0.5, 6.0, 1.55)
    dispersion_fd(2.3, 0.5, 1.55, 1e-3)
    x = np.zeros(8, dtype=np.float64)
    mlp_forward_vec(
        x,
        np.zeros((8, 4)),
        np.zeros(4),
        np.zeros((4, 4)),
        np.zeros(4),
        np.zeros(4),
        0.0,
    )
    gae_scan(np.zeros(3), np.zeros(3), 0.99, 0.95)
