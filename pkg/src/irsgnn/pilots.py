"""Uplink pilot protocol: pilot sequences, IRS training patterns,
received-signal synthesis and per-user decorrelation."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .channel import ChannelSet, complex_normal
from .config import ConfigError, stable_hash


def dft_matrix(d: int) -> np.ndarray:
    idx = np.arange(d)
    return np.exp(-2j * np.pi * np.outer(idx, idx) / d)


def make_pilot_matrix(K: int, uplink_power: float) -> np.ndarray:
    """Orthogonal pilots: rows of the K-point DFT scaled by ``sqrt(P_u)``.

    Row ``k`` holds the symbols user ``k`` sends in one sub-frame, so
    ``X @ X^H = K * P_u * I``.
    """
    return np.sqrt(uplink_power) * dft_matrix(K)


def make_irs_training(N: int, tau: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """IRS training matrix ``Q`` of shape (N+1, tau) with an all-ones first row.

    A truncated DFT is used when ``tau >= N+1``; otherwise the reflection
    phases are i.i.d. uniform on [-pi, pi).
    """
    if tau < 1:
        raise ValueError("tau must be >= 1")
    if tau >= N + 1:
        return dft_matrix(tau)[: N + 1, :]
    if rng is None:
        raise ValueError("random IRS training requires a random generator")
    phases = rng.uniform(-np.pi, np.pi, size=(N, tau))
    return np.vstack([np.ones((1, tau), dtype=complex), np.exp(1j * phases)])


@dataclass(frozen=True)
class PilotPlan:
    """Pilot phase of ``L = tau * K`` symbols.

    ``X`` is (K, L0) and ``Q`` is (N+1, tau); column t of ``Q`` is ``[1; v(t)]``.
    """

    total_length: int
    X: np.ndarray
    Q: np.ndarray
    uplink_power: float

    @property
    def subframe_length(self) -> int:
        return self.X.shape[1]

    @property
    def subframes(self) -> int:
        return self.Q.shape[1]

    @property
    def num_users(self) -> int:
        return self.X.shape[0]

    @property
    def num_irs_elements(self) -> int:
        return self.Q.shape[0] - 1

    def plan_hash(self) -> str:
        return stable_hash({
            "L": self.total_length,
            "X": np.round(np.c_[self.X.real, self.X.imag], 12),
            "Q": np.round(np.c_[self.Q.real, self.Q.imag], 12),
        })

    def with_power(self, uplink_power: float) -> "PilotPlan":
        """Same sequences and training, different pilot power."""
        X = make_pilot_matrix(self.num_users, uplink_power)
        return PilotPlan(self.total_length, X, self.Q, uplink_power)


def make_plan(K: int, N: int, total_length: int, uplink_power: float,
              rng: np.random.Generator | None = None, Q: np.ndarray | None = None) -> PilotPlan:
    """Build a :class:`PilotPlan`; ``total_length`` must be a multiple of ``K``."""
    if total_length < K or total_length % K:
        raise ConfigError(f"pilot length L={total_length} must be a positive multiple of K={K}")
    tau = total_length // K
    if Q is None:
        Q = make_irs_training(N, tau, rng)
    if Q.shape != (N + 1, tau):
        raise ConfigError(f"IRS training matrix has shape {Q.shape}, expected {(N + 1, tau)}")
    return PilotPlan(total_length, make_pilot_matrix(K, uplink_power), np.asarray(Q, dtype=complex), uplink_power)


def simulate_uplink(channels: ChannelSet, plan: PilotPlan, noise_var: float,
                    rng: np.random.Generator | None) -> np.ndarray:
    """Received pilots ``Y`` of shape (..., M, L).

    In sub-frame ``t`` every user ``k`` sends its pilot row while the IRS holds
    ``v(t) = Q[1:, t]``.  ``noise_var`` is the per-entry uplink noise power.
    """
    # effective uplink channels per sub-frame: (..., K, M, tau)
    g = channels.F @ plan.Q
    # (..., M, tau, L0) = sum_k g[..., k, :, t] * X[k, l]
    Y = np.einsum("...kmt,kl->...mtl", g, plan.X)
    shape = Y.shape[:-2] + (plan.total_length,)
    Y = Y.reshape(shape)
    if noise_var > 0:
        if rng is None:
            raise ValueError("noisy simulation requires a random generator")
        Y = Y + np.sqrt(noise_var) * complex_normal(rng, shape)
    return Y


@dataclass
class ReceivedPilots:
    per_user: np.ndarray  # (..., K, M, tau)
    effective_noise_variance: float


def decorrelate(Y: np.ndarray, plan: PilotPlan, noise_var: float = 0.0) -> ReceivedPilots:
    """Match-filter each sub-frame against every user's pilot row.

    Column t of user k's output is ``F_k q(t)`` plus noise of variance
    ``noise_var / (L0 * P_u)``.
    """
    L0, tau = plan.subframe_length, plan.subframes
    if Y.shape[-1] != L0 * tau:
        raise ValueError(f"received block has {Y.shape[-1]} columns, plan expects {L0 * tau}")
    Ybar = Y.reshape(Y.shape[:-1] + (tau, L0))
    scale = 1.0 / (L0 * plan.uplink_power)
    per_user = scale * np.einsum("...mtl,kl->...kmt", Ybar, np.conj(plan.X))
    return ReceivedPilots(per_user, noise_var * scale)


# --- binary container -------------------------------------------------------
# layout: magic (8 bytes) | header length (uint32, little endian) | JSON header
#         | complex128 payload in C order (interleaved float64 real/imag)
_PILOT_MAGIC = b"IRSPLT01"


def write_complex_container(path: str | Path, magic: bytes, header: dict, arrays: dict[str, np.ndarray]) -> None:
    header = dict(header)
    # payload order is recorded explicitly; the JSON header itself is key-sorted
    header["arrays"] = [[name, list(a.shape)] for name, a in arrays.items()]
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<c16").tobytes())
    tmp.replace(path)


def read_complex_container(path: str | Path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.read(len(magic)) != magic:
            raise ValueError(f"{path}: not a {magic!r} container")
        (n,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(n))
        arrays = {}
        for name, shape in header["arrays"]:
            count = int(np.prod(shape))
            arrays[name] = np.frombuffer(fh.read(16 * count), dtype="<c16").reshape(shape).copy()
    return header, arrays


def save_pilots(path, pilots: ReceivedPilots, *, M: int, N: int, K: int, tau: int,
                seed: int, config_hash: str) -> None:
    """Persist a batch of per-user observations, shape (B, K, M, tau)."""
    data = np.asarray(pilots.per_user)
    if data.ndim == 3:
        data = data[None]
    if data.shape[1:] != (K, M, tau):
        raise ValueError(f"pilot batch shape {data.shape} inconsistent with (K, M, tau)=({K}, {M}, {tau})")
    header = {"M": M, "N": N, "K": K, "tau": tau, "seed": seed, "config_hash": config_hash,
              "effective_noise_variance": pilots.effective_noise_variance}
    write_complex_container(path, _PILOT_MAGIC, header, {"per_user": data})


def load_pilots(path) -> tuple[dict, ReceivedPilots]:
    header, arrays = read_complex_container(path, _PILOT_MAGIC)
    return header, ReceivedPilots(arrays["per_user"], header["effective_noise_variance"])
