"""Sum rate of the K-user interference channel and non-learned schedulers.

All functions broadcast over leading batch axes: ``gains`` is ``(..., K, K)``
and power vectors are ``(..., K)``.
"""
from __future__ import annotations

import itertools
from functools import lru_cache

import numpy as np

from .channel import GainMatrix

LN2 = np.log(2.0)
MAX_EXHAUSTIVE_K = 20


class RateDomainError(ValueError):
    pass


class CapacityError(ValueError):
    """Exhaustive enumeration requested for too many users."""


def _as_gains(gains) -> np.ndarray:
    if isinstance(gains, GainMatrix):
        return gains.entries
    return np.asarray(gains, dtype=float)


def _check(g: np.ndarray, p: np.ndarray, noise_power: float):
    if g.shape[-1] != g.shape[-2] or p.shape[-1] != g.shape[-1]:
        raise RateDomainError(f"shape mismatch: gains {g.shape}, powers {p.shape}")
    if noise_power <= 0:
        raise RateDomainError("noise_power must be positive")
    if np.any(g < 0):
        raise RateDomainError("negative channel gain")
    if np.any(p < 0):
        raise RateDomainError("negative transmit power")


def sum_rate(gains, powers, noise_power: float = 1.0):
    """Sum over links of ``log2(1 + SINR_k)``, interference treated as noise."""
    g = _as_gains(gains)
    p = np.asarray(powers, dtype=float)
    _check(g, p, noise_power)
    signal, interference = _signal_interference(g, p, noise_power)
    return np.sum(np.log2(1.0 + signal / interference), axis=-1)


def _signal_interference(g, p, noise_power):
    received = g * p[..., None, :]
    signal = np.diagonal(received, axis1=-2, axis2=-1)
    return signal, noise_power + (received.sum(axis=-1) - signal)


def relaxed_sum_rate_with_grad(gains, fractions, p_max: float = 1.0, noise_power: float = 1.0):
    """Sum rate at powers ``fractions * p_max`` and its gradient in the fractions.

    With ``T_k = N + sum_l G_kl p_l`` and ``I_k = T_k - G_kk p_k`` the rate is
    ``sum_k log2(T_k / I_k)``, hence
    ``dR/dp_j = (sum_k G_kj / T_k - sum_{k != j} G_kj / I_k) / ln 2``.
    """
    g = _as_gains(gains)
    f = np.asarray(fractions, dtype=float)
    if np.any(f < 0) or np.any(f > 1):
        raise RateDomainError("fractions must lie in [0, 1]")
    p = f * p_max
    _check(g, p, noise_power)
    signal, interference = _signal_interference(g, p, noise_power)
    total = interference + signal
    rate = np.sum(np.log2(1.0 + signal / interference), axis=-1)
    g_diag = np.diagonal(g, axis1=-2, axis2=-1)
    # sum_k G_kj (1/T_k - 1/I_k) over all k, then add back the k == j term of 1/I_k
    inv_t = 1.0 / total
    inv_i = 1.0 / interference
    dp = np.einsum("...kj,...k->...j", g, inv_t - inv_i) + g_diag * inv_i
    return rate, dp * (p_max / LN2)


@lru_cache(maxsize=None)
def decision_table(k_users: int) -> np.ndarray:
    """All ``2**K`` binary decisions, row ``i`` = binary encoding of ``i`` with TX 1 as MSB."""
    if k_users > MAX_EXHAUSTIVE_K:
        raise CapacityError(f"exhaustive search limited to K <= {MAX_EXHAUSTIVE_K}, got {k_users}")
    table = np.array(list(itertools.product((0.0, 1.0), repeat=k_users)))
    table.flags.writeable = False
    return table


def exhaustive_best(gains, p_max: float = 1.0, noise_power: float = 1.0) -> np.ndarray:
    """Rate-maximizing binary power vector(s) by enumeration.

    Ties go to the lowest row of ``decision_table``. Accepts a single matrix or
    a batch ``(n, K, K)``; returns powers in ``{0, p_max}``.
    """
    g = _as_gains(gains)
    k = g.shape[-1]
    table = decision_table(k) * p_max
    rates = sum_rate(g[..., None, :, :], table, noise_power)
    return table[np.argmax(rates, axis=-1)]


def naive_decision(estimate, tx_index: int, p_max: float = 1.0, noise_power: float = 1.0):
    """Component ``tx_index`` (0-based) of the perfect-CSI decision computed on ``estimate``."""
    g = _as_gains(estimate)
    k = g.shape[-1]
    if not 0 <= tx_index < k:
        raise IndexError(f"tx_index {tx_index} out of range for K={k}")
    return exhaustive_best(g, p_max, noise_power)[..., tx_index]


def tdma_decision(active_tx: int, k_users: int, p_max: float = 1.0) -> np.ndarray:
    """Only ``active_tx`` (0-based) transmits."""
    if not 0 <= active_tx < k_users:
        raise IndexError(f"active_tx {active_tx} out of range for K={k_users}")
    d = np.zeros(k_users)
    d[active_tx] = p_max
    return d


def always_on(k_users: int, p_max: float = 1.0) -> np.ndarray:
    return np.full(k_users, float(p_max))
