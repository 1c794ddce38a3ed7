"""Permutation-equivariant graph neural network from received pilots to
beamformers and reflection coefficients.

Node 0 is the IRS, nodes 1..K are users.  All user-node subnetworks are
shared across users, so the parameter count does not depend on K.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .rates import Solution, user_rates_real, utility_torch

SQRT_GUARD = 1e-300   # only guards an exactly-zero output


@dataclass(frozen=True)
class GnnConfig:
    depth: int = 2
    init_hidden: int = 1024   # hidden width of f_w^0 and f_v^0
    width: int = 512          # node representation size and update-MLP hidden width
    use_locations: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def feature_dim(M: int, tau: int, use_locations: bool) -> int:
    return 2 * M * tau + (3 if use_locations else 0)


def build_features(Y: np.ndarray, locations: np.ndarray | None = None) -> np.ndarray:
    """Vectorised real and imaginary parts of each user's (M, tau) observation.

    ``Y`` is (..., K, M, tau); columns are stacked (column-major vec) and the
    user coordinates, if given, are appended.  No scaling is applied here.
    """
    Y = np.asarray(Y)
    vec = np.swapaxes(Y, -1, -2).reshape(Y.shape[:-2] + (-1,))
    parts = [vec.real, vec.imag]
    if locations is not None:
        parts.append(np.asarray(locations, dtype=float))
    return np.concatenate(parts, axis=-1)


def unit_modulus(re: torch.Tensor, im: torch.Tensor):
    """Project each (re, im) pair onto the unit circle."""
    mag = torch.sqrt(torch.clamp(re ** 2 + im ** 2, min=SQRT_GUARD))
    return re / mag, im / mag


def power_normalize(Z: torch.Tensor, power: float) -> torch.Tensor:
    """Scale each matrix in the batch to Frobenius norm ``sqrt(power)``."""
    fro = torch.sqrt((Z ** 2).sum(dim=(-2, -1), keepdim=True))
    return np.sqrt(power) * Z / fro


class MLP(nn.Module):
    """Fully connected net; rectified-linear on hidden layers, linear output."""

    def __init__(self, sizes: list[int]):
        super().__init__()
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(sizes[:-1], sizes[1:]))
        for i, lin in enumerate(self.layers):
            last = i == len(self.layers) - 1
            nn.init.kaiming_normal_(lin.weight, nonlinearity="linear" if last else "relu")
            nn.init.zeros_(lin.bias)

    def forward(self, x):
        for lin in self.layers[:-1]:
            x = torch.relu(lin(x))
        return self.layers[-1](x)


def mean_over_users(h: torch.Tensor) -> torch.Tensor:
    """Element-wise mean over the user axis (-2)."""
    return h.mean(dim=-2)


def max_over_other_users(h: torch.Tensor) -> torch.Tensor:
    """For each user k, element-wise max of ``h_j`` over ``j != k``.

    ``h`` is (..., K, D).  With a single user the result is zero.
    """
    K = h.shape[-2]
    if K == 1:
        return torch.zeros_like(h)
    expanded = h.unsqueeze(-3).expand(*h.shape[:-2], K, K, h.shape[-1])
    self_mask = torch.eye(K, dtype=torch.bool, device=h.device).unsqueeze(-1)
    neg_inf = torch.tensor(float("-inf"), dtype=h.dtype, device=h.device)
    return torch.where(self_mask, neg_inf, expanded).max(dim=-2).values


class UpdateLayer(nn.Module):
    def __init__(self, width: int, with_irs: bool = True):
        super().__init__()
        self.with_irs = with_irs
        self.f3 = MLP([width, width, width])
        if with_irs:
            self.f0 = MLP([width, width, width])
            self.f1 = MLP([width, width, width])
            self.f2 = MLP([2 * width, width, width])
            self.f4 = MLP([3 * width, width, width])
        else:
            self.f4 = MLP([2 * width, width, width])

    def forward(self, z_irs, z_users):
        others = max_over_other_users(self.f3(z_users))
        if not self.with_irs:
            return None, self.f4(torch.cat([z_users, others], dim=-1))
        irs_msg = self.f0(z_irs)
        z_irs_new = self.f2(torch.cat([irs_msg, mean_over_users(self.f1(z_users))], dim=-1))
        irs_b = irs_msg.unsqueeze(-2).expand_as(z_users)
        z_users_new = self.f4(torch.cat([irs_b, z_users, others], dim=-1))
        return z_irs_new, z_users_new


class IrsGnn(nn.Module):
    """Maps per-user features (B, K, F) to ``v`` (B, N) and ``W`` (B, M, K)."""

    def __init__(self, cfg: GnnConfig, M: int, N: int, tau: int, downlink_power: float):
        super().__init__()
        self.cfg, self.M, self.N, self.tau = cfg, M, N, tau
        self.downlink_power = float(downlink_power)
        in_dim = feature_dim(M, tau, cfg.use_locations)
        self.f_w0 = MLP([in_dim, cfg.init_hidden, cfg.width])
        self.f_v0 = MLP([cfg.width, cfg.init_hidden, cfg.width])
        self.layers = nn.ModuleList(UpdateLayer(cfg.width) for _ in range(cfg.depth))
        self.f_v_out = MLP([cfg.width, 2 * N])
        self.f_w_out = MLP([cfg.width, 2 * M])
        self.register_buffer("pilot_scale", torch.tensor(1.0, dtype=torch.float64))
        self.register_buffer("location_scale", torch.tensor(1.0, dtype=torch.float64))

    def scale_inputs(self, x: torch.Tensor) -> torch.Tensor:
        n_pilot = 2 * self.M * self.tau
        pilots = x[..., :n_pilot] / self.pilot_scale.to(x.dtype)
        if not self.cfg.use_locations:
            return pilots
        return torch.cat([pilots, x[..., n_pilot:] / self.location_scale.to(x.dtype)], dim=-1)

    def embed(self, x: torch.Tensor):
        """Representation vectors after the last update layer."""
        z_users = self.f_w0(self.scale_inputs(x))
        z_irs = self.f_v0(mean_over_users(z_users))
        for layer in self.layers:
            z_irs, z_users = layer(z_irs, z_users)
        return z_irs, z_users

    def forward(self, x: torch.Tensor):
        """Returns ``(v_re, v_im, W_re, W_im)`` in float64."""
        z_irs, z_users = self.embed(x)
        zv = self.f_v_out(z_irs).double()
        zw = self.f_w_out(z_users).double()          # (B, K, 2M)
        v_re, v_im = unit_modulus(zv[..., : self.N], zv[..., self.N:])
        Zw = power_normalize(zw.transpose(-1, -2), self.downlink_power)   # (B, 2M, K)
        return v_re, v_im, Zw[..., : self.M, :], Zw[..., self.M:, :]

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def to_tensor(x, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x), dtype=dtype)


@torch.no_grad()
def policy(model: IrsGnn, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched inference: returns ``W`` (B, M, K) and ``v`` (B, N) as complex arrays."""
    dtype = next(model.parameters()).dtype
    x = to_tensor(features, dtype)
    squeeze = x.ndim == 2
    if squeeze:
        x = x.unsqueeze(0)
    v_re, v_im, W_re, W_im = model(x)
    v = v_re.numpy() + 1j * v_im.numpy()
    W = W_re.numpy() + 1j * W_im.numpy()
    if squeeze:
        return W[0], v[0]
    return W, v


def forward_solution(model: IrsGnn, features: np.ndarray) -> Solution:
    """Single-realization forward pass (features shaped (K, F))."""
    W, v = policy(model, features)
    return Solution(W=W, v=v)


def channel_tensors(h_d, A, noise: float):
    """Channel parts as float64 tensors, pre-scaled so the noise power is one."""
    s = 1.0 / np.sqrt(noise)
    h_d = np.asarray(h_d) * s
    A = np.asarray(A) * s
    return tuple(torch.tensor(np.asarray(a, dtype=np.float64)) for a in (h_d.real, h_d.imag, A.real, A.imag))


def rates_from_outputs(outputs, chan) -> torch.Tensor:
    v_re, v_im, W_re, W_im = outputs
    hd_re, hd_im, A_re, A_im = chan
    return user_rates_real(hd_re, hd_im, A_re, A_im, v_re, v_im, W_re, W_im, 1.0)


def loss(model: IrsGnn, features, chan, kind: str = "sum") -> torch.Tensor:
    """Negative mean utility over the batch.

    ``chan`` is the tuple returned by :func:`channel_tensors`.
    """
    dtype = next(model.parameters()).dtype
    x = features if isinstance(features, torch.Tensor) else to_tensor(features, dtype)
    rates = rates_from_outputs(model(x.to(dtype)), chan)
    return -utility_torch(rates, kind).mean()


def gradient(model: IrsGnn, features, chan, kind: str = "sum") -> dict[str, torch.Tensor]:
    """Gradient of :func:`loss` with respect to every named parameter."""
    model.zero_grad(set_to_none=True)
    value = loss(model, features, chan, kind)
    value.backward()
    out = {}
    for name, p in model.named_parameters():
        out[name] = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
    return out


class ChannelEstimatorGnn(nn.Module):
    """Explicit estimation variant: user nodes only, with a linear head of
    size ``2M(N+1)`` producing each user's vectorised ``F_k``."""

    def __init__(self, cfg: GnnConfig, M: int, N: int, tau: int):
        super().__init__()
        self.cfg, self.M, self.N, self.tau = cfg, M, N, tau
        in_dim = feature_dim(M, tau, cfg.use_locations)
        self.f_w0 = MLP([in_dim, cfg.init_hidden, cfg.width])
        self.layers = nn.ModuleList(UpdateLayer(cfg.width, with_irs=False) for _ in range(cfg.depth))
        self.head = MLP([cfg.width, 2 * M * (N + 1)])
        self.register_buffer("pilot_scale", torch.tensor(1.0, dtype=torch.float64))
        self.register_buffer("location_scale", torch.tensor(1.0, dtype=torch.float64))
        self.register_buffer("output_scale", torch.tensor(1.0, dtype=torch.float64))

    scale_inputs = IrsGnn.scale_inputs

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Scaled estimate ``F_hat / output_scale`` as (B, K, 2M(N+1))."""
        z = self.f_w0(self.scale_inputs(x))
        for layer in self.layers:
            _, z = layer(None, z)
        return self.head(z)

    def unpack(self, out: torch.Tensor) -> np.ndarray:
        """Head output to complex (B, K, M, N+1) in channel units."""
        out = out.detach().double().numpy() * float(self.output_scale)
        half = self.M * (self.N + 1)
        vec = out[..., :half] + 1j * out[..., half:]
        # column-major vec -> (M, N+1)
        return np.swapaxes(vec.reshape(vec.shape[:-1] + (self.N + 1, self.M)), -1, -2)


def pack_channels(F: np.ndarray) -> np.ndarray:
    """Inverse of :meth:`ChannelEstimatorGnn.unpack` (without scaling)."""
    vec = np.swapaxes(F, -1, -2).reshape(F.shape[:-2] + (-1,))
    return np.concatenate([vec.real, vec.imag], axis=-1)


def estimation_loss(model: ChannelEstimatorGnn, features, F_packed_scaled) -> torch.Tensor:
    """Per-user mean squared error in scaled units, averaged over users and batch."""
    dtype = next(model.parameters()).dtype
    x = features if isinstance(features, torch.Tensor) else to_tensor(features, dtype)
    target = F_packed_scaled if isinstance(F_packed_scaled, torch.Tensor) else to_tensor(F_packed_scaled, dtype)
    out = model(x.to(dtype))
    return ((out - target.to(dtype)) ** 2).sum(dim=-1).mean()


@torch.no_grad()
def estimate_channels(model: ChannelEstimatorGnn, features: np.ndarray) -> np.ndarray:
    dtype = next(model.parameters()).dtype
    x = to_tensor(features, dtype)
    squeeze = x.ndim == 2
    if squeeze:
        x = x.unsqueeze(0)
    F = model.unpack(model(x))
    return F[0] if squeeze else F
