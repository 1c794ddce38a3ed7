"""Data generation, optimiser loop, early stopping, evaluation and checkpoints."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .channel import ChannelSet, sample_channel_batch, sample_placement
from .config import ConfigError, SystemConfig
from .gnn import (ChannelEstimatorGnn, GnnConfig, IrsGnn, build_features, channel_tensors,
                  estimation_loss, loss, pack_channels, policy, to_tensor)
from .pilots import PilotPlan, decorrelate, simulate_uplink
from .rates import user_rates, utility

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Non-finite loss during training."""


@dataclass(frozen=True)
class TrainingConfig:
    initial_lr: float = 1e-3
    lr_decay_factor: float = 0.98
    lr_decay_every: int = 300
    iterations_per_epoch: int = 100
    batch_size: int = 1024
    early_stop_patience: int = 10
    validation_size: int = 1024
    max_epochs: int = 100
    seed: int = 0
    utility: str = "sum"

    def __post_init__(self):
        for name in ("lr_decay_every", "iterations_per_epoch", "batch_size", "validation_size", "max_epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be >= 1")
        if self.utility not in ("sum", "min"):
            raise ConfigError(f"unknown utility {self.utility!r}")


def learning_rate(cfg: TrainingConfig, iteration: int) -> float:
    """Step-decay schedule; ``iteration`` counts from 1."""
    return cfg.initial_lr * cfg.lr_decay_factor ** ((iteration - 1) // cfg.lr_decay_every)


def seed_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators for every consumer of randomness in one run."""
    names = ("init", "train", "validation", "calibration", "test")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


# --- data ----------------------------------------------------------------------

@dataclass
class Batch:
    features: np.ndarray       # (B, K, F), unscaled
    channels: ChannelSet       # batched
    locations: np.ndarray      # (B, K, 3)
    pilots: np.ndarray         # (B, K, M, tau)

    def __len__(self) -> int:
        return self.features.shape[0]

    def subset(self, idx) -> "Batch":
        return Batch(self.features[idx], self.channels[idx], self.locations[idx], self.pilots[idx])


def generate_batch(system: SystemConfig, plan: PilotPlan, batch_size: int, rng: np.random.Generator,
                   use_locations: bool = False, fixed_locations: np.ndarray | None = None) -> Batch:
    """Fresh i.i.d. samples: placements, channels, uplink noise and features."""
    if plan.num_users != system.K or plan.num_irs_elements != system.N:
        raise ConfigError("pilot plan does not match the system dimensions")
    if fixed_locations is None:
        loc = sample_placement(system, rng, batch_size)
    else:
        loc = np.broadcast_to(np.asarray(fixed_locations, dtype=float), (batch_size, system.K, 3)).copy()
    ch = sample_channel_batch(system, loc, rng)
    Y = simulate_uplink(ch, plan, system.uplink_noise, rng)
    rp = decorrelate(Y, plan, system.uplink_noise)
    feats = build_features(rp.per_user, loc if use_locations else None)
    return Batch(feats, ch, loc, rp.per_user)


def feature_scales(batch: Batch, M: int, tau: int) -> tuple[float, float]:
    """Root-mean-square of the pilot part and of the location part."""
    n = 2 * M * tau
    pilot = float(np.sqrt(np.mean(batch.features[..., :n] ** 2)))
    loc = float(np.sqrt(np.mean(batch.locations ** 2)))
    return pilot, loc


# --- checkpoints ----------------------------------------------------------------

@dataclass
class Checkpoint:
    kind: str                      # "policy" or "estimator"
    params: dict[str, np.ndarray]
    gnn: GnnConfig
    training: TrainingConfig
    system_hash: str
    plan_hash: str
    M: int
    N: int
    tau: int
    downlink_power: float
    pilot_scale: float
    location_scale: float
    output_scale: float = 1.0
    best_validation: float = float("nan")
    epoch: int = 0
    Q: np.ndarray | None = None
    history: list[dict] = field(default_factory=list)

    def meta(self) -> dict:
        return {
            "kind": self.kind, "gnn": self.gnn.to_dict(), "training": asdict(self.training),
            "system_hash": self.system_hash, "plan_hash": self.plan_hash,
            "M": self.M, "N": self.N, "tau": self.tau, "downlink_power": self.downlink_power,
            "pilot_scale": self.pilot_scale, "location_scale": self.location_scale,
            "output_scale": self.output_scale, "best_validation": self.best_validation,
            "epoch": self.epoch, "history": self.history,
        }


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    """Atomic write: temporary file then rename."""
    path = Path(path)
    arrays = {f"param/{k}": v for k, v in ckpt.params.items()}
    if ckpt.Q is not None:
        arrays["plan/Q_re"] = ckpt.Q.real
        arrays["plan/Q_im"] = ckpt.Q.imag
    arrays["meta"] = np.frombuffer(json.dumps(ckpt.meta()).encode(), dtype=np.uint8)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    with np.load(path) as z:
        meta = json.loads(z["meta"].tobytes().decode())
        params = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
        Q = z["plan/Q_re"] + 1j * z["plan/Q_im"] if "plan/Q_re" in z.files else None
    return Checkpoint(
        kind=meta["kind"], params=params, gnn=GnnConfig(**meta["gnn"]),
        training=TrainingConfig(**meta["training"]), system_hash=meta["system_hash"],
        plan_hash=meta["plan_hash"], M=meta["M"], N=meta["N"], tau=meta["tau"],
        downlink_power=meta["downlink_power"], pilot_scale=meta["pilot_scale"],
        location_scale=meta["location_scale"], output_scale=meta["output_scale"],
        best_validation=meta["best_validation"], epoch=meta["epoch"], Q=Q, history=meta["history"],
    )


def build_model(ckpt: Checkpoint, downlink_power: float | None = None, dtype=torch.float32):
    """Instantiate the network stored in ``ckpt``.

    ``downlink_power`` overrides the trained output power (generalisation tests).
    """
    if ckpt.kind == "policy":
        model = IrsGnn(ckpt.gnn, ckpt.M, ckpt.N, ckpt.tau,
                       ckpt.downlink_power if downlink_power is None else downlink_power)
    else:
        model = ChannelEstimatorGnn(ckpt.gnn, ckpt.M, ckpt.N, ckpt.tau)
    state = {k: torch.as_tensor(v) for k, v in ckpt.params.items()}
    model.load_state_dict(state)
    return model.to(dtype).eval()


def _state_arrays(model) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}


# --- training loop -----------------------------------------------------------------

@dataclass
class _Task:
    """What differs between the policy and the channel-estimation networks."""

    model: torch.nn.Module
    batch_loss: Callable[[Batch], torch.Tensor]
    validate: Callable[[Batch], float]   # higher is better
    kind: str


def _policy_task(model: IrsGnn, system: SystemConfig, kind: str) -> _Task:
    noise = system.downlink_noise

    def batch_loss(b: Batch):
        return loss(model, b.features, channel_tensors(b.channels.h_d, b.channels.A, noise), kind)

    def validate(b: Batch):
        return float(np.mean(policy_utilities(model, b, noise, kind)))

    return _Task(model, batch_loss, validate, "policy")


def _estimator_task(model: ChannelEstimatorGnn) -> _Task:
    def batch_loss(b: Batch):
        target = pack_channels(b.channels.F) / float(model.output_scale)
        return estimation_loss(model, b.features, target)

    def validate(b: Batch):
        return -float(np.mean(estimation_mse(model, b)))

    return _Task(model, batch_loss, validate, "estimator")


def policy_utilities(model: IrsGnn, batch: Batch, noise: float, kind: str, chunk: int = 1024) -> np.ndarray:
    """Per-sample utility of the GNN outputs on true channels."""
    out = []
    for s in range(0, len(batch), chunk):
        b = batch.subset(slice(s, s + chunk))
        W, v = policy(model, b.features)
        out.append(utility(user_rates(b.channels.h_d, b.channels.A, v, W, noise), kind))
    return np.concatenate(out)


def estimation_mse(model: ChannelEstimatorGnn, batch: Batch) -> np.ndarray:
    """Per-sample ``(1/K) sum_k ||F_hat_k - F_k||_F^2``."""
    with torch.no_grad():
        F_hat = model.unpack(model(to_tensor(batch.features, next(model.parameters()).dtype)))
    return np.mean(np.sum(np.abs(F_hat - batch.channels.F) ** 2, axis=(-2, -1)), axis=-1)


def train(tcfg: TrainingConfig, gcfg: GnnConfig, system: SystemConfig, plan: PilotPlan, *,
          out_dir: str | Path | None = None, fixed_locations: np.ndarray | None = None,
          estimator: bool = False, progress: Callable[[dict], None] | None = None) -> Checkpoint:
    """Train the policy GNN (or the channel-estimation GNN) and return the best
    validation checkpoint.

    If ``out_dir`` is given, ``last.npz``, ``best.npz`` and ``train_log.csv``
    are written there every epoch.
    """
    torch.use_deterministic_algorithms(True)
    streams = seed_streams(tcfg.seed)
    use_loc = gcfg.use_locations
    M, N, tau = system.M, system.N, plan.subframes

    def draw(n, rng):
        return generate_batch(system, plan, n, rng, use_loc, fixed_locations)

    calib = draw(min(tcfg.batch_size, 1024), streams["calibration"])
    pilot_scale, loc_scale = feature_scales(calib, M, tau)
    torch_seed = int(streams["init"].integers(2 ** 62))
    with torch.random.fork_rng():
        torch.manual_seed(torch_seed)
        if estimator:
            model = ChannelEstimatorGnn(gcfg, M, N, tau)
        else:
            model = IrsGnn(gcfg, M, N, tau, system.downlink_power)
    model.pilot_scale.fill_(pilot_scale)
    model.location_scale.fill_(loc_scale)
    if estimator:
        model.output_scale.fill_(float(np.sqrt(np.mean(np.abs(calib.channels.F) ** 2))))
        task = _estimator_task(model)
    else:
        task = _policy_task(model, system, tcfg.utility)
    validation = draw(tcfg.validation_size, streams["validation"])

    opt = torch.optim.Adam(model.parameters(), lr=tcfg.initial_lr)
    best_val = -math.inf
    best_params = _state_arrays(model)
    best_epoch = 0
    stale = 0
    history: list[dict] = []
    iteration = 0
    t0 = time.perf_counter()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "train_log.csv", "w", newline="")
        writer = csv.writer(log_fh)
        writer.writerow(["epoch", "iteration", "lr", "train_loss", "validation_utility", "wall_time"])

    def checkpoint(params, val, epoch):
        return Checkpoint(
            kind=task.kind, params=params, gnn=gcfg, training=tcfg, system_hash=system.config_hash(),
            plan_hash=plan.plan_hash(), M=M, N=N, tau=tau, downlink_power=system.downlink_power,
            pilot_scale=pilot_scale, location_scale=loc_scale, output_scale=float(model.output_scale)
            if estimator else 1.0, best_validation=val, epoch=epoch, Q=plan.Q, history=list(history))

    try:
        for epoch in range(1, tcfg.max_epochs + 1):
            model.train()
            losses = []
            for _ in range(tcfg.iterations_per_epoch):
                iteration += 1
                lr = learning_rate(tcfg, iteration)
                for group in opt.param_groups:
                    group["lr"] = lr
                b = draw(tcfg.batch_size, streams["train"])
                opt.zero_grad(set_to_none=True)
                value = task.batch_loss(b)
                if not torch.isfinite(value):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, iteration {iteration}")
                value.backward()
                opt.step()
                losses.append(float(value.detach()))
            model.eval()
            val = task.validate(validation)
            row = {"epoch": epoch, "iteration": iteration, "lr": learning_rate(tcfg, iteration),
                   "train_loss": float(np.mean(losses)), "validation_utility": val,
                   "wall_time": time.perf_counter() - t0}
            history.append(row)
            log.info("epoch %d: loss %.4f validation %.4f", epoch, row["train_loss"], val)
            if progress is not None:
                progress(row)
            if out_dir is not None:
                writer.writerow([row[k] for k in ("epoch", "iteration", "lr", "train_loss",
                                                  "validation_utility", "wall_time")])
                log_fh.flush()
            if val > best_val:
                best_val, best_epoch, stale = val, epoch, 0
                best_params = _state_arrays(model)
                if out_dir is not None:
                    save_checkpoint(out_dir / "best.npz", checkpoint(best_params, best_val, best_epoch))
            else:
                stale += 1
            if out_dir is not None:
                save_checkpoint(out_dir / "last.npz", checkpoint(_state_arrays(model), val, epoch))
            if stale >= tcfg.early_stop_patience:
                break
    finally:
        if out_dir is not None:
            log_fh.close()
    return checkpoint(best_params, best_val, best_epoch)


# --- evaluation ----------------------------------------------------------------------

@dataclass
class EvalResult:
    mean: float
    samples: np.ndarray

    @property
    def stderr(self) -> float:
        n = len(self.samples)
        return float(np.std(self.samples, ddof=1) / np.sqrt(n)) if n > 1 else float("nan")


def make_test_set(system: SystemConfig, plan: PilotPlan, n: int, seed: int, use_locations: bool = False,
                  fixed_locations: np.ndarray | None = None) -> Batch:
    """Evaluation realizations drawn from the seed's dedicated test stream."""
    return generate_batch(system, plan, n, seed_streams(seed)["test"], use_locations, fixed_locations)


def check_compatible(ckpt: Checkpoint, system: SystemConfig, plan: PilotPlan, strict: bool = True) -> None:
    if (ckpt.M, ckpt.N, ckpt.tau) != (system.M, system.N, plan.subframes):
        raise ConfigError(f"checkpoint dimensions (M, N, tau)={(ckpt.M, ckpt.N, ckpt.tau)} do not match "
                          f"{(system.M, system.N, plan.subframes)}")
    if strict and ckpt.system_hash != system.config_hash():
        raise ConfigError("checkpoint was trained for a different system configuration")
    if strict and ckpt.plan_hash != plan.plan_hash():
        raise ConfigError("checkpoint was trained with a different pilot plan")


def evaluate(ckpt: Checkpoint, system: SystemConfig, plan: PilotPlan, n_realizations: int = 1000,
             seed: int = 0, kind: str | None = None, strict: bool = True,
             fixed_locations: np.ndarray | None = None) -> EvalResult:
    """Mean and per-sample utility of a policy checkpoint on fresh realizations.

    ``strict=False`` permits evaluating under a different system (generalisation),
    as long as the network dimensions agree.
    """
    check_compatible(ckpt, system, plan, strict)
    kind = kind or ckpt.training.utility
    model = build_model(ckpt, downlink_power=system.downlink_power)
    test = make_test_set(system, plan, n_realizations, seed, ckpt.gnn.use_locations, fixed_locations)
    samples = policy_utilities(model, test, system.downlink_noise, kind)
    return EvalResult(float(samples.mean()), samples)
