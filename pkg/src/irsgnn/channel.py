"""Geometry, path loss, steering vectors and random channel synthesis.

Angles follow the usual spherical convention: for a unit direction ``u``,
``u = (cos(el) cos(az), cos(el) sin(az), sin(el))``.  The IRS is a uniform
rectangular array in the y-z plane and the BS a uniform linear array along
the x axis, both with half-wavelength spacing.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import SystemConfig


def pathloss_direct_db(d):
    """BS-user path loss in dB: ``32.6 + 36.7 log10(d)``."""
    d = np.asarray(d, dtype=float)
    if np.any(d <= 0):
        raise ValueError("distance must be positive")
    out = 32.6 + 36.7 * np.log10(d)
    return float(out) if out.ndim == 0 else out


def pathloss_irs_db(d):
    """BS-IRS and IRS-user path loss in dB: ``30 + 22 log10(d)``."""
    d = np.asarray(d, dtype=float)
    if np.any(d <= 0):
        raise ValueError("distance must be positive")
    out = 30.0 + 22.0 * np.log10(d)
    return float(out) if out.ndim == 0 else out


def db_to_amplitude(pl_db):
    """Amplitude factor whose square is the linear power gain ``10^(-PL/10)``."""
    return 10.0 ** (-np.asarray(pl_db, dtype=float) / 20.0)


def angles_between(src, dst) -> tuple[np.ndarray, np.ndarray]:
    """Azimuth and elevation of ``dst`` seen from ``src``.

    Broadcasts over leading dimensions; the last axis holds (x, y, z).
    """
    delta = np.asarray(dst, dtype=float) - np.asarray(src, dtype=float)
    dist = np.linalg.norm(delta, axis=-1)
    if np.any(dist == 0):
        raise ValueError("angles undefined for coincident points")
    az = np.arctan2(delta[..., 1], delta[..., 0])
    # equals asin(dz / d) but keeps full precision near the vertical
    el = np.arctan2(delta[..., 2], np.hypot(delta[..., 0], delta[..., 1]))
    if az.ndim == 0:
        return float(az), float(el)
    return az, el


def direction_from_angles(az, el) -> np.ndarray:
    az, el = np.asarray(az, dtype=float), np.asarray(el, dtype=float)
    return np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1)


def irs_element_indices(rows: int, cols: int) -> tuple[np.ndarray, np.ndarray]:
    """Horizontal and vertical index of each IRS element (row-major)."""
    n = np.arange(rows * cols)
    return n % cols, n // cols


def steering_irs(az, el, rows: int, cols: int) -> np.ndarray:
    """IRS steering vector(s); shape ``az.shape + (rows*cols,)``."""
    i1, i2 = irs_element_indices(rows, cols)
    az = np.asarray(az, dtype=float)[..., None]
    el = np.asarray(el, dtype=float)[..., None]
    phase = np.pi * (i1 * np.sin(az) * np.cos(el) + i2 * np.sin(el))
    return np.exp(1j * phase)


def steering_bs(az, el, M: int) -> np.ndarray:
    """BS (uniform linear array along x) steering vector(s); shape ``az.shape + (M,)``."""
    m = np.arange(M)
    az = np.asarray(az, dtype=float)[..., None]
    el = np.asarray(el, dtype=float)[..., None]
    return np.exp(1j * np.pi * m * np.cos(az) * np.cos(el))


def cascaded_steering(az2, el2, az3, el3, rows: int, cols: int) -> np.ndarray:
    """Element-wise product ``conj(a_IRS(az2, el2)) * a_IRS(az3, el3)``."""
    return np.conj(steering_irs(az2, el2, rows, cols)) * steering_irs(az3, el3, rows, cols)


def array_response_irs(v, az2, el2, az3, el3, rows: int, cols: int, check: bool = True):
    """``|a_IRS(az2, el2)^H diag(v) a_IRS(az3, el3)| = |a~^T v|``.

    This is the reflected gain seen by the downlink model ``g^T w``, so a
    reflection vector ``v = conj(a~)`` attains the maximum ``N``.  Broadcasts
    over the angle arguments.
    """
    v = np.asarray(v, dtype=complex)
    if check and not np.allclose(np.abs(v), 1.0, atol=1e-8):
        raise ValueError("reflection vector must have unit-modulus entries")
    a = cascaded_steering(az2, el2, az3, el3, rows, cols)
    return np.abs(a @ v)


def array_response_bs(w, az1, el1):
    """``|a_BS(az1, el1)^T w|``, the transmit gain toward (az1, el1) under ``g^T w``."""
    w = np.asarray(w, dtype=complex)
    a = steering_bs(az1, el1, w.shape[-1])
    return np.abs(a @ w)


def complex_normal(rng: np.random.Generator, shape) -> np.ndarray:
    """Circularly-symmetric CN(0, 1) samples."""
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def rician_weights(eps: float) -> tuple[float, float]:
    """Line-of-sight and scattered amplitude weights for Rician factor ``eps``."""
    if np.isinf(eps):
        return 1.0, 0.0
    return float(np.sqrt(eps / (1.0 + eps))), float(np.sqrt(1.0 / (1.0 + eps)))


@dataclass
class Placement:
    user_locations: np.ndarray  # (K, 3), meters


def sample_placement(config: SystemConfig, rng: np.random.Generator, batch: int | None = None) -> np.ndarray:
    """Uniform user locations in ``config.user_region``; ``(K, 3)`` or ``(batch, K, 3)``."""
    shape = (config.K, 3) if batch is None else (batch, config.K, 3)
    lo = np.asarray(config.user_region.low)
    hi = np.asarray(config.user_region.high)
    return lo + (hi - lo) * rng.random(shape)


@dataclass
class ChannelSet:
    """One channel realization.

    ``h_d`` is (K, M), ``h_r`` is (K, N), ``G`` is (M, N); ``A`` (K, M, N) and
    ``F`` (K, M, N+1) are derived.  Batched variants carry a leading axis.
    """

    G: np.ndarray | None
    h_d: np.ndarray
    h_r: np.ndarray | None
    A: np.ndarray
    F: np.ndarray

    @classmethod
    def from_links(cls, G, h_d, h_r) -> "ChannelSet":
        G, h_d, h_r = (np.asarray(x, dtype=complex) for x in (G, h_d, h_r))
        A = G[..., None, :, :] * h_r[..., :, None, :]
        F = np.concatenate([h_d[..., None], A], axis=-1)
        return cls(G=G, h_d=h_d, h_r=h_r, A=A, F=F)

    @classmethod
    def from_combined(cls, F) -> "ChannelSet":
        """Channel set known only through ``F_k = [h_d | A_k]`` (e.g. an estimate)."""
        F = np.asarray(F, dtype=complex)
        return cls(G=None, h_d=F[..., 0], h_r=None, A=F[..., 1:], F=F)

    @property
    def batched(self) -> bool:
        return self.F.ndim == 4

    def __len__(self) -> int:
        if not self.batched:
            raise TypeError("unbatched ChannelSet has no length")
        return self.F.shape[0]

    def __getitem__(self, idx) -> "ChannelSet":
        if not self.batched:
            raise TypeError("unbatched ChannelSet is not indexable")
        return ChannelSet(_take(self.G, idx), self.h_d[idx], _take(self.h_r, idx), self.A[idx], self.F[idx])

    def select_users(self, users) -> "ChannelSet":
        users = np.asarray(users)
        h_r = None if self.h_r is None else self.h_r[..., users, :]
        return ChannelSet(self.G, self.h_d[..., users, :], h_r,
                          self.A[..., users, :, :], self.F[..., users, :, :])


def _take(a, idx):
    return None if a is None else a[idx]


@dataclass(frozen=True)
class LinkGeometry:
    """Distances, path-loss amplitudes and LOS steering vectors for a placement."""

    beta_direct: np.ndarray   # (..., K)
    beta_irs_user: np.ndarray  # (..., K)
    beta_bs_irs: float
    a_irs_user: np.ndarray    # (..., K, N)
    g_los: np.ndarray         # (M, N)


def link_geometry(config: SystemConfig, user_locations) -> LinkGeometry:
    loc = np.asarray(user_locations, dtype=float)
    bs = np.asarray(config.bs_location, dtype=float)
    irs = np.asarray(config.irs_location, dtype=float)
    d_bu = np.linalg.norm(loc - bs, axis=-1)
    d_iu = np.linalg.norm(loc - irs, axis=-1)
    d_bi = float(np.linalg.norm(irs - bs))
    az1, el1 = angles_between(bs, irs)
    az2, el2 = angles_between(irs, bs)
    az3, el3 = angles_between(irs, loc)
    g_los = np.outer(steering_bs(az1, el1, config.M),
                     np.conj(steering_irs(az2, el2, config.irs_rows, config.irs_cols)))
    return LinkGeometry(
        beta_direct=db_to_amplitude(pathloss_direct_db(d_bu)),
        beta_irs_user=db_to_amplitude(pathloss_irs_db(d_iu)),
        beta_bs_irs=float(db_to_amplitude(pathloss_irs_db(d_bi))),
        a_irs_user=steering_irs(az3, el3, config.irs_rows, config.irs_cols),
        g_los=g_los,
    )


def sample_channel_batch(config: SystemConfig, user_locations, rng: np.random.Generator) -> ChannelSet:
    """Draw one channel per row of ``user_locations`` (shape (B, K, 3))."""
    loc = np.asarray(user_locations, dtype=float)
    B, K = loc.shape[:2]
    M, N = config.M, config.N
    geo = link_geometry(config, loc)
    w_los, w_nlos = rician_weights(config.rician_factor)
    h_d = geo.beta_direct[..., None] * complex_normal(rng, (B, K, M))
    h_r = geo.beta_irs_user[..., None] * (w_los * geo.a_irs_user + w_nlos * complex_normal(rng, (B, K, N)))
    G = geo.beta_bs_irs * (w_los * geo.g_los + w_nlos * complex_normal(rng, (B, M, N)))
    return ChannelSet.from_links(G, h_d, h_r)


def sample_channels(config: SystemConfig, placement: Placement, rng: np.random.Generator) -> ChannelSet:
    """Draw a single channel realization for a fixed placement."""
    loc = np.asarray(placement.user_locations, dtype=float)[None]
    return sample_channel_batch(config, loc, rng)[0]
