"""Model-based optimisation with perfect or estimated CSI.

* WMMSE beamforming for fixed effective channels.
* Block coordinate ascent over beamformers and IRS phases (sum rate).
* Random IRS phases with WMMSE beamforming.
* Max-min rate via alternating ascent on a soft-min surrogate.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.optimize import brentq

from .rates import Solution, effective_channel, user_rates, utility

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class BcdConfig:
    stop_threshold: float = 1e-3   # bits/s/Hz between consecutive outer iterations
    max_iterations: int = 100
    phase_scheme: str = "element-grid-golden"
    phase_grid: int = 360
    wmmse_tol: float = 1e-5
    wmmse_max_iter: int = 500

    def __post_init__(self):
        if not self.stop_threshold > 0:
            raise ValueError("stop_threshold must be positive")


@dataclass
class OptimResult:
    solution: Solution
    trace: list[float] = field(default_factory=list)
    converged: bool = True
    iterations: int = 0
    value: float = float("nan")


# --- WMMSE --------------------------------------------------------------------

def matched_filter(g: np.ndarray, P_d: float) -> np.ndarray:
    """Equal-power maximum-ratio beamformers for downlink channels ``g`` (K, M)."""
    K, M = g.shape
    norms = np.linalg.norm(g, axis=1)
    W = np.zeros((M, K), dtype=complex)
    live = norms > 0
    if not live.any():
        return W
    W[:, live] = np.conj(g[live]).T / norms[live]
    return W * np.sqrt(P_d / live.sum())


def _sum_rate(g, W, noise):
    S = np.abs(g @ W) ** 2
    sig = np.diag(S)
    return float(np.sum(np.log2(1 + sig / (S.sum(axis=1) - sig + noise))))


def _power_constrained_solve(Amat: np.ndarray, B: np.ndarray, P: float) -> np.ndarray:
    """``(Amat + mu I)^{-1} B`` with the smallest ``mu >= 0`` meeting ``||.||_F^2 <= P``."""
    lam, U = np.linalg.eigh(Amat)
    lam = np.clip(lam, 0.0, None)
    C = np.conj(U.T) @ B
    c2 = np.sum(np.abs(C) ** 2, axis=1)
    null = lam <= 1e-12 * max(lam.max(), 1e-300)
    # components of B in the null space of Amat vanish up to round-off
    C = np.where(null[:, None], 0.0, C)
    c2 = np.where(null, 0.0, c2)
    safe = np.where(null, 1.0, lam)
    unconstrained = np.where(null, 0.0, 1.0 / safe)
    if np.sum(c2 * unconstrained ** 2) <= P:
        return U @ (unconstrained[:, None] * C)

    def excess(mu):
        return float(np.sum(c2 / np.where(null, 1.0, lam + mu) ** 2)) - P

    hi = np.sqrt(c2.sum() / P)     # excess(hi) <= 0 since lam >= 0
    mu = brentq(excess, 0.0, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
    return U @ (C / np.where(null, 1.0, lam + mu)[:, None])


def wmmse_beamforming(g: np.ndarray, P_d: float, noise: float, W0: np.ndarray | None = None,
                      tol: float = 1e-5, max_iter: int = 500, trace: list | None = None) -> np.ndarray:
    """Sum-rate WMMSE beamformers for downlink channels ``g`` (K, M).

    Rows of ``g`` are the effective channels, received signal ``g_k^T w_j``.
    """
    g = np.asarray(g, dtype=complex)
    K, M = g.shape
    if not np.any(g):
        return np.zeros((M, K), dtype=complex)
    s = 1.0 / np.sqrt(noise)
    gs = g * s                       # unit noise
    h = np.conj(gs)                  # columns of the usual h^H w form
    W = matched_filter(g, P_d) if W0 is None else np.array(W0, dtype=complex)
    power = np.sum(np.abs(W) ** 2)
    if power > P_d:              # warm starts are pulled back onto the power ball
        W *= np.sqrt(P_d / power)
    rate = _sum_rate(gs, W, 1.0)
    if trace is not None:
        trace.append(rate)
    for _ in range(max_iter):
        T = gs @ W                                   # (K, K): g_k^T w_j
        tot = np.sum(np.abs(T) ** 2, axis=1) + 1.0
        sig = np.diag(T)
        u = sig / tot
        e = 1.0 - np.abs(sig) ** 2 / tot
        w = 1.0 / np.maximum(e, 1e-300)
        Amat = (h.T * (w * np.abs(u) ** 2)) @ np.conj(h)   # sum_k w_k |u_k|^2 h_k h_k^H
        Bmat = h.T * (w * u)                                # column k: w_k u_k h_k
        W_new = _power_constrained_solve(Amat, Bmat, P_d)
        new_rate = _sum_rate(gs, W_new, 1.0)
        if new_rate < rate:      # round-off only; keep the better iterate
            break
        W = W_new
        if trace is not None:
            trace.append(new_rate)
        done = abs(new_rate - rate) <= tol * max(abs(rate), 1e-12)
        rate = new_rate
        if done:
            break
    return W


# --- phase updates ------------------------------------------------------------

def _element_objective(a, b, noise, kind, phases):
    """Utility as a function of the phase of one element.

    ``a`` and ``b`` are (K, K): ``g_k^T w_j = a_kj + e^{j phase} b_kj``.
    """
    z = np.exp(1j * np.asarray(phases, dtype=float))
    S = np.abs(a[None] + z[:, None, None] * b[None]) ** 2        # (P, K, K)
    sig = np.diagonal(S, axis1=1, axis2=2)
    rates = np.log2(1 + sig / (S.sum(axis=2) - sig + noise))
    return utility(rates, kind)


def _golden_max(f, lo, hi, tol=1e-9):
    x1 = hi - GOLDEN * (hi - lo)
    x2 = lo + GOLDEN * (hi - lo)
    f1, f2 = f(x1), f(x2)
    while hi - lo > tol:
        if f1 < f2:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + GOLDEN * (hi - lo)
            f2 = f(x2)
        else:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - GOLDEN * (hi - lo)
            f1 = f(x1)
    return (x1, f1) if f1 >= f2 else (x2, f2)


def _best_phase(a, b, noise, kind, current, grid):
    K = a.shape[0]
    cur_val = float(_element_objective(a, b, noise, kind, [current])[0])
    if K == 1 and kind in ("sum", "min"):
        if abs(b[0, 0]) == 0:
            return current, cur_val
        # co-phase the reflected term with the rest of the channel
        best = float(np.angle(a[0, 0]) - np.angle(b[0, 0]))
        val = float(_element_objective(a, b, noise, kind, [best])[0])
        return (best, val) if val >= cur_val else (current, cur_val)
    phases = np.linspace(-np.pi, np.pi, grid, endpoint=False)
    vals = _element_objective(a, b, noise, kind, phases)
    j = int(np.argmax(vals))
    step = 2 * np.pi / grid
    ph, val = _golden_max(lambda p: float(_element_objective(a, b, noise, kind, [p])[0]),
                          phases[j] - step, phases[j] + step)
    if vals[j] > val:
        ph, val = phases[j], float(vals[j])
    return (ph, val) if val > cur_val else (current, cur_val)


def phase_update_element(h_d, A, W, v, i: int, noise: float, kind: str = "sum", grid: int = 360) -> complex:
    """Utility-maximising unit-modulus value of element ``i`` with all else fixed."""
    v = np.asarray(v, dtype=complex)
    T = effective_channel(h_d, A, v) @ W
    b = A[:, :, i] @ W
    a = T - v[i] * b
    ph, _ = _best_phase(a, b, noise, kind, float(np.angle(v[i])), grid)
    return complex(np.exp(1j * ph))


def phase_sweep(h_d, A, W, v, noise, kind="sum", grid=360) -> np.ndarray:
    """One cyclic pass of element-wise phase updates (i = 1..N)."""
    v = np.array(v, dtype=complex)
    BW = np.einsum("kmn,mj->nkj", A, W)          # b for every element: (N, K, K)
    T = effective_channel(h_d, A, v) @ W
    for i in range(v.shape[0]):
        b = BW[i]
        a = T - v[i] * b
        ph, _ = _best_phase(a, b, noise, kind, float(np.angle(v[i])), grid)
        new = np.exp(1j * ph)
        if new != v[i]:
            T = a + new * b
            v[i] = new
    return v


# --- block coordinate ascent ----------------------------------------------------

def bcd_optimize(channels, P_d: float, noise: float, cfg: BcdConfig = BcdConfig(),
                 v0: np.ndarray | None = None) -> OptimResult:
    """Alternate WMMSE beamforming and element-wise phase updates (sum rate).

    ``trace`` holds the sum rate at the start and after every block update.
    """
    h_d, A = np.asarray(channels.h_d), np.asarray(channels.A)
    N = A.shape[-1]
    v = np.ones(N, dtype=complex) if v0 is None else np.array(v0, dtype=complex)
    W = matched_filter(effective_channel(h_d, A, v), P_d)

    def value(W, v):
        return float(user_rates(h_d, A, v, W, noise).sum())

    prev = value(W, v)
    trace = [prev]
    converged = False
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        W_new = wmmse_beamforming(effective_channel(h_d, A, v), P_d, noise, W0=W,
                                  tol=cfg.wmmse_tol, max_iter=cfg.wmmse_max_iter)
        if value(W_new, v) >= trace[-1]:
            W = W_new
        trace.append(value(W, v))
        v_new = phase_sweep(h_d, A, W, v, noise, "sum", cfg.phase_grid)
        if value(W, v_new) >= trace[-1]:
            v = v_new
        cur = value(W, v)
        trace.append(cur)
        if cur - prev < cfg.stop_threshold:
            converged = True
            break
        prev = cur
    return OptimResult(Solution(W, v), trace, converged, it, trace[-1])


def random_phase_baseline(channels, P_d: float, noise: float, rng: np.random.Generator) -> OptimResult:
    h_d, A = np.asarray(channels.h_d), np.asarray(channels.A)
    v = np.exp(1j * rng.uniform(-np.pi, np.pi, A.shape[-1]))
    W = wmmse_beamforming(effective_channel(h_d, A, v), P_d, noise)
    val = float(user_rates(h_d, A, v, W, noise).sum())
    return OptimResult(Solution(W, v), [val], True, 1, val)


# --- max-min via soft-min ascent ----------------------------------------------

def softmin(rates: torch.Tensor, temperature: float) -> torch.Tensor:
    return -torch.logsumexp(-temperature * rates, dim=-1) / temperature


@dataclass(frozen=True)
class MaxMinConfig:
    temperatures: tuple[float, ...] = (2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0)
    stage_iterations: int = 60
    inner_steps: int = 5
    stage_tol: float = 1e-6


def _rates_torch(hd, A, W, v):
    g = hd + A @ v                                  # (K, M)
    S = torch.abs(g @ W) ** 2
    sig = torch.diagonal(S)
    return torch.log2(1 + sig / (S.sum(dim=1) - sig + 1.0))


def maxmin_optimize(channels, P_d: float, noise: float, cfg: MaxMinConfig = MaxMinConfig(),
                    W0: np.ndarray | None = None, v0: np.ndarray | None = None) -> OptimResult:
    """Max-min rate by alternating projected-gradient ascent on a soft-min surrogate.

    Each block step uses backtracking and is accepted only if the surrogate does
    not decrease; temperatures increase between stages, which can only raise the
    surrogate.  ``trace`` records the surrogate after every block step.
    """
    scale = np.sqrt(P_d / noise)          # work with unit power and unit noise
    hd = torch.as_tensor(np.asarray(channels.h_d) * scale, dtype=torch.complex128)
    A = torch.as_tensor(np.asarray(channels.A) * scale, dtype=torch.complex128)
    N = A.shape[-1]
    v_np = np.ones(N, dtype=complex) if v0 is None else np.asarray(v0, dtype=complex)
    if W0 is None:
        g = effective_channel(np.asarray(channels.h_d), np.asarray(channels.A), v_np)
        W0 = wmmse_beamforming(g, P_d, noise)
    W = torch.as_tensor(np.asarray(W0) / np.sqrt(P_d), dtype=torch.complex128)
    phase = torch.as_tensor(np.angle(v_np), dtype=torch.float64)

    def surrogate(W, phase, t):
        return softmin(_rates_torch(hd, A, W, torch.exp(1j * phase)), t)

    def project(W):
        p = torch.sum(torch.abs(W) ** 2)
        return W / torch.sqrt(p) if p > 1 else W

    trace: list[float] = []
    step_w, step_p = 1.0, 1.0
    for t in cfg.temperatures:
        with torch.no_grad():
            cur = float(surrogate(W, phase, t))
        trace.append(cur)
        for _ in range(cfg.stage_iterations):
            start = cur
            for block in ("W", "v"):
                for _ in range(cfg.inner_steps):
                    Wv = W.clone().requires_grad_(block == "W")
                    pv = phase.clone().requires_grad_(block == "v")
                    obj = surrogate(Wv, pv, t)
                    obj.backward()
                    grad = Wv.grad if block == "W" else pv.grad
                    step = step_w if block == "W" else step_p
                    accepted = False
                    for _ in range(30):
                        with torch.no_grad():
                            if block == "W":
                                cand_W, cand_p = project(W + step * grad), phase
                            else:
                                cand_W, cand_p = W, phase + step * grad
                            val = float(surrogate(cand_W, cand_p, t))
                        if val >= cur:
                            accepted = val > cur
                            W, phase, cur = cand_W, cand_p, val
                            break
                        step *= 0.5
                    if block == "W":
                        step_w = min(step * 2.0, 1e3)
                    else:
                        step_p = min(step * 2.0, 1e3)
                    if not accepted:
                        break
                trace.append(cur)
            if cur - start < cfg.stage_tol:
                break
    v_out = np.exp(1j * phase.numpy())
    W_out = W.numpy() * np.sqrt(P_d)
    rates = user_rates(np.asarray(channels.h_d), np.asarray(channels.A), v_out, W_out, noise)
    return OptimResult(Solution(W_out, v_out), trace, True, len(trace), float(rates.min()))


def write_trace_csv(path, trace: list[float]) -> None:
    """Objective trace export for monotonicity audits."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "objective"])
        for i, val in enumerate(trace):
            w.writerow([i, repr(float(val))])
