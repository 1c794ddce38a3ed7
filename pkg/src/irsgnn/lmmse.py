"""Explicit channel estimation baseline (linear MMSE) and a least-squares oracle."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .config import ConfigError
from .pilots import read_complex_container, write_complex_container

RIDGE = 1e-10
_STATS_MAGIC = b"IRSLMM01"


def _gram(X, Y):
    """Sum over rows of ``X^H Y`` for arrays shaped (..., rows, cols)."""
    return np.conj(np.swapaxes(X, -1, -2)) @ Y


@dataclass
class ChannelStatistics:
    """Per-user first and second moments used by the LMMSE estimator.

    Shapes: ``mean_Y`` (K, M, tau), ``cov_Y`` (K, tau, tau), ``cross`` (K, tau, N+1),
    ``mean_F`` (K, M, N+1).  Covariances are summed over the M rows and
    normalised by the sample count.
    """

    mean_Y: np.ndarray
    cov_Y: np.ndarray
    cross: np.ndarray
    mean_F: np.ndarray
    sample_count: int
    config_hash: str = ""
    plan_hash: str = ""
    _gain: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.sample_count < 2:
            raise ValueError("statistics need at least two samples")

    @property
    def num_users(self) -> int:
        return self.mean_Y.shape[0]

    def gain(self) -> np.ndarray:
        """``(C_YY + ridge I)^{-1} C_YF`` per user, shape (K, tau, N+1)."""
        if self._gain is None:
            tau = self.cov_Y.shape[-1]
            trace = np.real(np.trace(self.cov_Y, axis1=-2, axis2=-1))
            reg = self.cov_Y + (RIDGE * trace / tau)[:, None, None] * np.eye(tau)
            self._gain = np.linalg.solve(reg, self.cross)
        return self._gain

    @classmethod
    def from_prior(cls, mean_F, row_cov, Q, noise_var: float, M: int) -> "ChannelStatistics":
        """Population moments when every row of ``F_k`` has mean ``mean_F[k]`` rows
        and covariance ``row_cov[k]`` ((N+1)x(N+1), ``E[(f-mu)^H (f-mu)]``)."""
        mean_F = np.asarray(mean_F, dtype=complex)
        row_cov = np.asarray(row_cov, dtype=complex)
        QH = np.conj(Q.T)
        tau = Q.shape[1]
        cov_Y = M * (QH @ row_cov @ Q + noise_var * np.eye(tau))
        cross = M * (QH @ row_cov)
        return cls(mean_F @ Q, cov_Y, cross, mean_F, sample_count=np.iinfo(np.int64).max)


class _MomentAccumulator:
    """Chan-style merge of centred moments, chunk by chunk."""

    def __init__(self):
        self.n = 0

    def add(self, Y: np.ndarray, F: np.ndarray) -> None:
        # Y: (b, K, M, tau), F: (b, K, M, N+1)
        b = Y.shape[0]
        mY, mF = Y.mean(axis=0), F.mean(axis=0)
        dY, dF = Y - mY, F - mF
        cYY = _gram(dY, dY).sum(axis=0)
        cYF = _gram(dY, dF).sum(axis=0)
        if self.n == 0:
            self.n, self.mY, self.mF, self.cYY, self.cYF = b, mY, mF, cYY, cYF
            return
        n = self.n + b
        deltaY, deltaF = mY - self.mY, mF - self.mF
        w = self.n * b / n
        self.cYY = self.cYY + cYY + w * _gram(deltaY, deltaY)
        self.cYF = self.cYF + cYF + w * _gram(deltaY, deltaF)
        self.mY = self.mY + deltaY * (b / n)
        self.mF = self.mF + deltaF * (b / n)
        self.n = n


SampleSource = Callable[[int, np.random.Generator], tuple[np.ndarray, np.ndarray]]


def fit_statistics(sample_source: SampleSource, n_samples: int, rng: np.random.Generator,
                   chunk: int = 1000, config_hash: str = "", plan_hash: str = "") -> ChannelStatistics:
    """Empirical LMMSE moments from ``n_samples`` draws of ``(Y~, F)``.

    ``sample_source(n, rng)`` must return arrays shaped (n, K, M, tau) and
    (n, K, M, N+1).
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    acc = _MomentAccumulator()
    remaining = n_samples
    while remaining > 0:
        b = min(chunk, remaining)
        Y, F = sample_source(b, rng)
        acc.add(np.asarray(Y), np.asarray(F))
        remaining -= b
    return ChannelStatistics(acc.mY, acc.cYY / acc.n, acc.cYF / acc.n, acc.mF, acc.n,
                             config_hash=config_hash, plan_hash=plan_hash)


def estimate(Y: np.ndarray, stats: ChannelStatistics, plan_hash: str | None = None) -> np.ndarray:
    """LMMSE estimate of every user's ``F_k`` from ``Y`` shaped (..., K, M, tau)."""
    if plan_hash is not None and stats.plan_hash and plan_hash != stats.plan_hash:
        raise ConfigError("LMMSE statistics were fitted under a different pilot plan")
    Y = np.asarray(Y)
    if Y.shape[-3] != stats.num_users:
        raise ValueError(f"expected {stats.num_users} users, got {Y.shape[-3]}")
    return (Y - stats.mean_Y) @ stats.gain() + stats.mean_F


def estimate_user(Y_k: np.ndarray, stats: ChannelStatistics, k: int) -> np.ndarray:
    """LMMSE estimate of one user's ``F_k`` from its (M, tau) observation."""
    return (Y_k - stats.mean_Y[k]) @ stats.gain()[k] + stats.mean_F[k]


def ls_estimate(Y: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Least-squares ``Y Q^H (Q Q^H)^{-1}``; requires ``Q`` of full row rank."""
    n1, tau = Q.shape
    if tau < n1 or np.linalg.matrix_rank(Q) < n1:
        raise np.linalg.LinAlgError("IRS training matrix is not of full row rank")
    QH = np.conj(Q.T)
    # solve (Q Q^H)^T X^T = (Y Q^H)^T without forming the inverse
    gram = Q @ QH
    return np.linalg.solve(gram.T, np.swapaxes(Y @ QH, -1, -2)).swapaxes(-1, -2)


def save_statistics(path, stats: ChannelStatistics) -> None:
    header = {"config_hash": stats.config_hash, "plan_hash": stats.plan_hash,
              "sample_count": int(stats.sample_count), "ridge": RIDGE}
    write_complex_container(path, _STATS_MAGIC, header, {
        "mean_Y": stats.mean_Y, "cov_Y": stats.cov_Y, "cross": stats.cross, "mean_F": stats.mean_F,
    })


def load_statistics(path, config_hash: str | None = None, plan_hash: str | None = None) -> ChannelStatistics:
    header, a = read_complex_container(path, _STATS_MAGIC)
    if config_hash is not None and header["config_hash"] != config_hash:
        raise ConfigError(f"{path}: statistics fitted for config {header['config_hash']}, not {config_hash}")
    if plan_hash is not None and header["plan_hash"] != plan_hash:
        raise ConfigError(f"{path}: statistics fitted for a different pilot plan")
    return ChannelStatistics(a["mean_Y"], a["cov_Y"], a["cross"], a["mean_F"], header["sample_count"],
                             header["config_hash"], header["plan_hash"])
