"""Experiment specifications and the Monte-Carlo drivers behind the CLI."""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from .baselines import BcdConfig, MaxMinConfig, bcd_optimize, maxmin_optimize, random_phase_baseline
from .channel import (ChannelSet, angles_between, array_response_bs, array_response_irs,
                      sample_channel_batch, sample_placement)
from .config import PROFILES, ConfigError, SystemConfig, dbm_to_mw, stable_hash, system_from_dict
from .gnn import GnnConfig, build_features, estimate_channels, policy
from .lmmse import ChannelStatistics, estimate, fit_statistics
from .pilots import PilotPlan, decorrelate, make_irs_training, make_plan, simulate_uplink
from .rates import user_rates, utility
from .training import (Batch, Checkpoint, TrainingConfig, build_model, check_compatible, make_test_set,
                       policy_utilities)

METHODS = ("gnn", "gnn+locations", "lmmse+bcd", "estgnn+bcd", "perfect-csi-bcd", "random-phase")
AXES = ("L", "P_d", "P_u", "K")
CSV_VERSION = "1"


@dataclass
class ExperimentSpec:
    """Everything needed to reproduce one experiment from a key-value file.

    ``checkpoints`` maps a GNN method name (``gnn``, ``gnn+locations``,
    ``estgnn``) to a checkpoint path; for an ``L`` sweep it may instead map to
    a dictionary keyed by pilot length.
    """

    experiment: str = "desk"
    profile: str = "desk"
    system: SystemConfig = field(default_factory=SystemConfig)
    pilot_length: int = 16
    utility: str = "sum"
    training: TrainingConfig = field(default_factory=TrainingConfig)
    gnn: GnnConfig = field(default_factory=GnnConfig)
    axis: str | None = None
    values: tuple[float, ...] = ()
    methods: tuple[str, ...] = ("gnn", "lmmse+bcd", "perfect-csi-bcd", "random-phase")
    checkpoints: dict[str, Any] = field(default_factory=dict)
    fixed_locations: tuple[tuple[float, float, float], ...] | None = None
    n_realizations: int = 1000
    lmmse_samples: int = 10000
    seed: int = 0
    out: str = "runs"

    def __post_init__(self):
        if self.utility not in ("sum", "min"):
            raise ConfigError(f"unknown utility {self.utility!r}")
        if self.pilot_length < 1 or self.pilot_length % self.system.K:
            raise ConfigError(f"pilot length {self.pilot_length} is not a positive multiple of K={self.system.K}")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ConfigError(f"unknown methods {sorted(unknown)}")
        if self.axis is not None:
            if self.axis not in AXES:
                raise ConfigError(f"unknown sweep axis {self.axis!r}; expected one of {AXES}")
            if not self.values:
                raise ConfigError("sweep axis given without values")
        for x in self.values:
            if self.axis in ("L", "K") and (x <= 0 or int(x) != x):
                raise ConfigError(f"sweep value {x} must be a positive integer")
            if self.axis == "L" and int(x) % self.system.K:
                raise ConfigError(f"pilot length {x} is not a multiple of K={self.system.K}")
        if self.n_realizations < 1 or self.lmmse_samples < 2:
            raise ConfigError("n_realizations and lmmse_samples must be positive")
        if self.fixed_locations is not None:
            locs = np.asarray(self.fixed_locations, dtype=float)
            if locs.shape != (self.system.K, 3):
                raise ConfigError(f"fixed_locations must be {self.system.K} points in 3D")

    @property
    def subframes(self) -> int:
        return self.pilot_length // self.system.K

    @property
    def locations(self) -> np.ndarray | None:
        return None if self.fixed_locations is None else np.asarray(self.fixed_locations, dtype=float)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["system"] = self.system.to_dict()
        d["training"] = asdict(self.training)
        d["gnn"] = self.gnn.to_dict()
        d["values"] = list(self.values)
        d["methods"] = list(self.methods)
        return d

    def spec_hash(self) -> str:
        d = self.to_dict()
        d.pop("out")
        return stable_hash(d)


_SPEC_KEYS = {f.name for f in fields(ExperimentSpec)}


def spec_from_dict(d: dict, profile: str | None = None, seed: int | None = None) -> ExperimentSpec:
    """Build a spec from the documented key-value schema.

    ``profile`` (argument or key) picks the base system; the ``system`` mapping
    overrides individual fields.  A ``seed`` argument overrides both the
    experiment seed and the training seed.
    """
    d = dict(d or {})
    unknown = set(d) - _SPEC_KEYS
    if unknown:
        raise ConfigError(f"unknown spec keys: {sorted(unknown)}")
    prof = profile or d.get("profile", "desk")
    if prof not in PROFILES:
        raise ConfigError(f"unknown profile {prof!r}; expected one of {sorted(PROFILES)}")
    system = system_from_dict(d.get("system", {}), base=PROFILES[prof]())
    try:
        training = TrainingConfig(**{"utility": d.get("utility", "sum"), **d.get("training", {})})
        gnn = GnnConfig(**d.get("gnn", {}))
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    kw = {k: d[k] for k in ("experiment", "pilot_length", "utility", "axis", "n_realizations",
                             "lmmse_samples", "seed", "out") if k in d}
    if "values" in d:
        kw["values"] = tuple(float(x) for x in d["values"])
    if "methods" in d:
        kw["methods"] = tuple(d["methods"])
    if "checkpoints" in d:
        kw["checkpoints"] = dict(d["checkpoints"])
    if d.get("fixed_locations") is not None:
        kw["fixed_locations"] = tuple(tuple(float(c) for c in p) for p in d["fixed_locations"])
    if seed is not None:
        kw["seed"] = seed
        training = TrainingConfig(**{**asdict(training), "seed": seed})
    return ExperimentSpec(profile=prof, system=system, training=training, gnn=gnn, **kw)


def plan_for(spec: ExperimentSpec, system: SystemConfig | None = None, pilot_length: int | None = None,
             Q: np.ndarray | None = None) -> PilotPlan:
    """Pilot plan; the IRS training matrix is derived from the experiment seed
    unless supplied (e.g. taken from a checkpoint)."""
    system = system or spec.system
    L = pilot_length or spec.pilot_length
    if L % system.K:
        raise ConfigError(f"pilot length {L} is not a multiple of K={system.K}")
    if Q is None:
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x51]))
        Q = make_irs_training(system.N, L // system.K, rng)
    return make_plan(system.K, system.N, L, system.uplink_power, Q=Q)


# --- LMMSE statistics ------------------------------------------------------------------

def lmmse_sample_source(system: SystemConfig, plan: PilotPlan, fixed_locations=None):
    """Sample source of (decorrelated pilots, true F) pairs for :func:`fit_statistics`."""
    def source(n: int, rng: np.random.Generator):
        if fixed_locations is None:
            loc = sample_placement(system, rng, n)
        else:
            loc = np.broadcast_to(np.asarray(fixed_locations, dtype=float), (n, system.K, 3))
        ch = sample_channel_batch(system, loc, rng)
        rp = decorrelate(simulate_uplink(ch, plan, system.uplink_noise, rng), plan, system.uplink_noise)
        return rp.per_user, ch.F
    return source


def fit_lmmse(system: SystemConfig, plan: PilotPlan, n_samples: int = 10000, seed: int = 0,
              fixed_locations=None) -> ChannelStatistics:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1D]))
    return fit_statistics(lmmse_sample_source(system, plan, fixed_locations), n_samples, rng,
                          config_hash=system.config_hash(), plan_hash=plan.plan_hash())


# --- per-realization optimizers --------------------------------------------------------

def _optimize_on(F_est: np.ndarray, F_true: np.ndarray, P_d: float, noise: float, kind: str) -> float:
    """Optimize on an estimate, score on the true channel."""
    est = ChannelSet.from_combined(F_est)
    if kind == "sum":
        sol = bcd_optimize(est, P_d, noise, BcdConfig()).solution
    else:
        sol = maxmin_optimize(est, P_d, noise, MaxMinConfig()).solution
    truth = ChannelSet.from_combined(F_true)
    return float(utility(user_rates(truth.h_d, truth.A, sol.v, sol.W, noise), kind))


def _optimize_chunk(args) -> list[float]:
    F_est, F_true, P_d, noise, kind = args
    return [_optimize_on(F_est[i], F_true[i], P_d, noise, kind) for i in range(len(F_est))]


def model_based_utilities(F_est: np.ndarray, truth: ChannelSet, system: SystemConfig, kind: str,
                          workers: int = 1) -> np.ndarray:
    """BCD (sum) or soft-min ascent (min) on each estimated channel; returns
    true-channel utilities in realization order regardless of ``workers``."""
    n = len(truth)
    chunks = np.array_split(np.arange(n), max(1, min(n, 4 * workers)))
    jobs = [(F_est[c], truth.F[c], system.downlink_power, system.downlink_noise, kind) for c in chunks if len(c)]
    if workers <= 1:
        parts = [_optimize_chunk(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_optimize_chunk, jobs))
    return np.array([x for p in parts for x in p])


def random_phase_utilities(truth: ChannelSet, system: SystemConfig, kind: str, seed: int) -> np.ndarray:
    """Random phases with WMMSE beamforming on perfect CSI; one substream per realization."""
    out = []
    for i in range(len(truth)):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xAA, i]))
        sol = random_phase_baseline(truth[i], system.downlink_power, system.downlink_noise, rng).solution
        ch = truth[i]
        out.append(float(utility(user_rates(ch.h_d, ch.A, sol.v, sol.W, system.downlink_noise), kind)))
    return np.array(out)


# --- method dispatch -------------------------------------------------------------

def load_checkpoint_for(spec: ExperimentSpec, name: str, axis_value=None) -> Checkpoint:
    from .training import load_checkpoint
    entry = spec.checkpoints.get(name)
    if isinstance(entry, dict):
        key = axis_value if axis_value is None else _axis_key(entry, axis_value)
        entry = entry.get(key)
    if entry is None:
        raise ConfigError(f"no checkpoint configured for method {name!r}"
                          + ("" if axis_value is None else f" at {spec.axis}={axis_value}"))
    path = Path(entry)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _axis_key(entry: dict, value):
    for k in entry:
        if float(k) == float(value):
            return k
    return None


def evaluate_methods(spec: ExperimentSpec, system: SystemConfig, plan: PilotPlan, methods, *,
                     checkpoints: dict[str, Checkpoint] | None = None, stats: ChannelStatistics | None = None,
                     workers: int = 1, n: int | None = None, strict: bool = True) -> dict[str, np.ndarray]:
    """Per-sample utilities of each method on one shared test set (paired comparison)."""
    n = n or spec.n_realizations
    kind = spec.utility
    checkpoints = checkpoints or {}
    test = make_test_set(system, plan, n, spec.seed, use_locations=True, fixed_locations=spec.locations)
    plain = build_features(test.pilots)
    out: dict[str, np.ndarray] = {}
    for m in methods:
        if m in ("gnn", "gnn+locations"):
            ck = checkpoints.get(m)
            if ck is None:
                raise ConfigError(f"method {m!r} needs a checkpoint")
            check_compatible(ck, system, plan, strict)
            model = build_model(ck, downlink_power=system.downlink_power)
            feats = test.features if ck.gnn.use_locations else plain
            b = Batch(feats, test.channels, test.locations, test.pilots)
            out[m] = policy_utilities(model, b, system.downlink_noise, kind)
        elif m == "lmmse+bcd":
            if stats is None:
                stats = fit_lmmse(system, plan, spec.lmmse_samples, spec.seed, spec.locations)
            F_hat = estimate(test.pilots, stats, plan.plan_hash())
            out[m] = model_based_utilities(F_hat, test.channels, system, kind, workers)
        elif m == "estgnn+bcd":
            ck = checkpoints.get("estgnn")
            if ck is None:
                raise ConfigError("method 'estgnn+bcd' needs an 'estgnn' checkpoint")
            check_compatible(ck, system, plan, strict)
            model = build_model(ck)
            F_hat = estimate_channels(model, test.features if ck.gnn.use_locations else plain)
            out[m] = model_based_utilities(F_hat, test.channels, system, kind, workers)
        elif m == "perfect-csi-bcd":
            out[m] = model_based_utilities(test.channels.F, test.channels, system, kind, workers)
        elif m == "random-phase":
            out[m] = random_phase_utilities(test.channels, system, kind, spec.seed)
        else:
            raise ConfigError(f"unknown method {m!r}")
    return out


def summary_row(axis_value, method: str, samples: np.ndarray) -> dict:
    n = len(samples)
    se = float(np.std(samples, ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
    return {"axis_value": axis_value, "method": method, "mean_utility": float(np.mean(samples)),
            "standard_error": se, "n": n}


def system_at(spec: ExperimentSpec, value) -> tuple[SystemConfig, int]:
    """System and pilot length at one sweep point.  Sweeping K keeps the number
    of sub-frames fixed, so the pilot length scales with K."""
    if spec.axis == "L":
        return spec.system, int(value)
    if spec.axis == "P_d":
        return spec.system.with_(downlink_power=dbm_to_mw(value)), spec.pilot_length
    if spec.axis == "P_u":
        return spec.system.with_(uplink_power=dbm_to_mw(value)), spec.pilot_length
    if spec.axis == "K":
        K = int(value)
        return spec.system.with_(num_users=K), spec.subframes * K
    raise ConfigError("spec has no sweep axis")


def run_sweep(spec: ExperimentSpec, workers: int = 1) -> list[dict]:
    """One row per (axis value, method).

    For an ``L`` sweep each point needs its own checkpoints (a per-length
    mapping); for power and user-count sweeps one checkpoint is reused across
    the axis, so it is evaluated outside the configuration it was trained for.
    """
    if spec.axis is None:
        raise ConfigError("sweep requires 'axis' and 'values'")
    rows = []
    reuse = spec.axis != "L"
    needed = {m if m != "estgnn+bcd" else "estgnn" for m in spec.methods
              if m in ("gnn", "gnn+locations", "estgnn+bcd")}
    shared = {name: load_checkpoint_for(spec, name) for name in needed} if reuse else None
    for value in spec.values:
        system, L = system_at(spec, value)
        cks = shared if reuse else {name: load_checkpoint_for(spec, name, value) for name in needed}
        Q = next(iter(cks.values())).Q if cks else None
        plan = plan_for(spec, system, L, Q=Q)
        results = evaluate_methods(spec, system, plan, spec.methods, checkpoints=cks, workers=workers,
                                   strict=not reuse)
        for m in spec.methods:
            rows.append(summary_row(value, m, results[m]))
    return rows


def empirical_cdf(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.sort(np.asarray(samples, dtype=float))
    return x, np.arange(1, len(x) + 1) / len(x)


# --- array responses --------------------------------------------------------------

@dataclass
class ArrayResponse:
    phi3: np.ndarray           # (P,)
    theta3: np.ndarray         # (T,)
    irs: np.ndarray            # (K or 1, P, T) -- the same v serves all users
    phi1: np.ndarray           # (B,)
    bs: np.ndarray             # (K, B)
    target_irs: list[tuple[float, float]]
    target_bs: float

    def irs_argmax(self) -> tuple[float, float]:
        p, t = np.unravel_index(np.argmax(self.irs[0]), self.irs[0].shape)
        return float(self.phi3[p]), float(self.theta3[t])

    def bs_argmax(self, k: int = 0) -> float:
        return float(self.phi1[np.argmax(self.bs[k])])


def angle_grid(points: int, lo: float = -np.pi / 2, hi: float = np.pi / 2) -> np.ndarray:
    return np.linspace(lo, hi, points)


def array_response(ckpt: Checkpoint, system: SystemConfig, user_locations, seed: int = 0,
                   grid: tuple[int, int] = (181, 91), bs_points: int = 181) -> ArrayResponse:
    """IRS response over a (phi3, theta3) grid with the incident direction fixed
    at the BS, and each BS beam's response over phi1, for one realization."""
    loc = np.asarray(user_locations, dtype=float).reshape(system.K, 3)
    plan = make_plan(system.K, system.N, ckpt.tau * system.K, system.uplink_power, Q=ckpt.Q)
    check_compatible(ckpt, system, plan, strict=False)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA5]))
    ch = sample_channel_batch(system, loc[None], rng)
    rp = decorrelate(simulate_uplink(ch, plan, system.uplink_noise, rng), plan, system.uplink_noise)
    feats = build_features(rp.per_user, loc[None] if ckpt.gnn.use_locations else None)
    model = build_model(ckpt, downlink_power=system.downlink_power)
    W, v = policy(model, feats)
    W, v = W[0], v[0]
    v = v / np.abs(v)
    irs, bs = np.asarray(system.irs_location), np.asarray(system.bs_location)
    az1, el1 = angles_between(bs, irs)
    az2, el2 = angles_between(irs, bs)
    phi3, theta3 = angle_grid(grid[0]), angle_grid(grid[1])
    P, T = np.meshgrid(phi3, theta3, indexing="ij")
    f_irs = array_response_irs(v, az2, el2, P, T, system.irs_rows, system.irs_cols)
    phi1 = np.linspace(0.0, np.pi, bs_points)
    f_bs = np.stack([array_response_bs(W[:, k], phi1, el1) for k in range(system.K)])
    targets = [tuple(float(a) for a in angles_between(irs, p)) for p in loc]
    return ArrayResponse(phi3, theta3, f_irs[None], phi1, f_bs, targets, float(az1))
