"""Downlink rates and network utilities.

Two evaluation paths are kept deliberately separate: a complex-valued numpy
path used by the baselines and for reporting, and a real-valued torch path
(2x2 block embedding of complex products) used as the differentiable
training loss.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass
class Solution:
    """Beamformers ``W`` (M, K) and reflection vector ``v`` (N,)."""

    W: np.ndarray
    v: np.ndarray

    def power(self) -> float:
        return float(np.sum(np.abs(self.W) ** 2))

    def is_feasible(self, P_d: float, tol: float = 1e-9) -> bool:
        return self.power() <= P_d * (1 + tol) and bool(np.all(np.abs(np.abs(self.v) - 1) <= tol))


def effective_channel(h_d, A, v):
    """``h_d + A v``.

    ``A`` may be (M, N), (K, M, N) or (B, K, M, N); a batched ``v`` is (B, N)
    and is shared by all users of its realization.
    """
    h_d, A, v = np.asarray(h_d), np.asarray(A), np.asarray(v)
    if v.ndim == 1:
        return h_d + A @ v
    return h_d + (A @ v[..., None, :, None])[..., 0]


def rate_matrix(h_d, A, v, W):
    """``|g_k^T w_j|^2`` for all (k, j); returns (..., K, K)."""
    g = effective_channel(h_d, A, v)          # (..., K, M)
    return np.abs(g @ W) ** 2                  # (..., K, K)


def user_rates(h_d, A, v, W, noise: float) -> np.ndarray:
    """Rates of all users in bits/s/Hz (interference treated as noise)."""
    S = rate_matrix(h_d, A, v, W)
    signal = np.diagonal(S, axis1=-2, axis2=-1)
    interference = S.sum(axis=-1) - signal
    return np.log2(1.0 + signal / (interference + noise))


def user_rate(channels, sol: Solution, noise: float, k: int) -> float:
    """Rate of user ``k`` under ``sol``."""
    return float(user_rates(channels.h_d, channels.A, sol.v, sol.W, noise)[..., k])


def utility(rates, kind: str = "sum"):
    """Sum or minimum of per-user rates along the last axis."""
    rates = np.asarray(rates)
    if rates.shape[-1] == 0:
        raise ValueError("empty rate vector")
    if kind == "sum":
        return rates.sum(axis=-1)
    if kind == "min":
        return rates.min(axis=-1)
    raise ValueError(f"unknown utility {kind!r}")


# --- real-valued path --------------------------------------------------------

def _as_tensor(x, dtype=torch.float64):
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def user_rates_real(hd_re, hd_im, A_re, A_im, v_re, v_im, W_re, W_im, noise):
    """All users' rates from real and imaginary parts only.

    Shapes: ``hd`` (..., K, M), ``A`` (..., K, M, N), ``v`` (..., N),
    ``W`` (..., M, K).  Returns a tensor (..., K).
    """
    hd_re, hd_im, A_re, A_im, v_re, v_im, W_re, W_im = (
        _as_tensor(x) for x in (hd_re, hd_im, A_re, A_im, v_re, v_im, W_re, W_im))
    hd = torch.cat([hd_re, hd_im], dim=-1)                           # (..., K, 2M)
    A_blk = torch.cat([torch.cat([A_re, -A_im], dim=-1),
                       torch.cat([A_im, A_re], dim=-1)], dim=-2)      # (..., K, 2M, 2N)
    v = torch.cat([v_re, v_im], dim=-1).unsqueeze(-2).unsqueeze(-1)  # (..., 1, 2N, 1)
    g = hd + (A_blk @ v).squeeze(-1)                                 # (..., K, 2M)
    M = hd_re.shape[-1]
    g_re, g_im = g[..., :M], g[..., M:]
    # gamma_{k,i} = [[Re w_i^T, -Im w_i^T], [Im w_i^T, Re w_i^T]] [g_re; g_im]
    gam_re = g_re @ W_re - g_im @ W_im                               # (..., K, K)
    gam_im = g_re @ W_im + g_im @ W_re
    S = gam_re ** 2 + gam_im ** 2
    signal = torch.diagonal(S, dim1=-2, dim2=-1)
    interference = S.sum(dim=-1) - signal
    return torch.log2(1.0 + signal / (interference + noise))


def user_rate_real(hd_re, hd_im, A_re, A_im, v_re, v_im, W_re, W_im, noise, k: int) -> float:
    """Single-user convenience wrapper around :func:`user_rates_real`."""
    r = user_rates_real(hd_re, hd_im, A_re, A_im, v_re, v_im, W_re, W_im, noise)
    return float(r[..., k])


def gamma_vectors(hd_re, hd_im, A_re, A_im, v_re, v_im, w_re, w_im):
    """2-vectors ``gamma_i`` for one user and one beamformer (numpy, for checks)."""
    A_blk = np.block([[A_re, -A_im], [A_im, A_re]])
    g = np.concatenate([hd_re, hd_im]) + A_blk @ np.concatenate([v_re, v_im])
    w_blk = np.vstack([np.concatenate([w_re, -w_im]), np.concatenate([w_im, w_re])])
    return w_blk @ g


def utility_torch(rates: torch.Tensor, kind: str = "sum") -> torch.Tensor:
    if rates.shape[-1] == 0:
        raise ValueError("empty rate vector")
    if kind == "sum":
        return rates.sum(dim=-1)
    if kind == "min":
        # gradient flows to the attaining user only
        return rates.min(dim=-1).values
    raise ValueError(f"unknown utility {kind!r}")
