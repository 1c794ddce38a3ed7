import numpy as np
import pytest
import torch

from irsgnn.config import ConfigError, desk_system
from irsgnn.gnn import GnnConfig, build_features
from irsgnn.pilots import make_plan
from irsgnn.training import (Checkpoint, TrainingConfig, TrainingDiverged, build_model, check_compatible,
                             estimation_mse, evaluate, generate_batch, learning_rate, load_checkpoint,
                             save_checkpoint, seed_streams, train)

SMALL = GnnConfig(depth=2, init_hidden=32, width=16)


def tiny_setup(K=2, N=4, M=2, L=4):
    system = desk_system(num_bs_antennas=M, num_irs_elements=N, irs_rows=2, irs_cols=N // 2, num_users=K)
    plan = make_plan(K, N, L, system.uplink_power, rng=np.random.default_rng(0))
    return system, plan


def tiny_config(**kw):
    base = dict(iterations_per_epoch=3, batch_size=16, validation_size=32, max_epochs=2, seed=1)
    base.update(kw)
    return TrainingConfig(**base)


def test_schedule_values():
    cfg = TrainingConfig()
    assert learning_rate(cfg, 1) == 1e-3
    assert learning_rate(cfg, 300) == 1e-3
    assert learning_rate(cfg, 301) == pytest.approx(9.8e-4)
    assert learning_rate(cfg, 601) == pytest.approx(9.604e-4, rel=1e-12)
    its = np.arange(1, 3001)
    expected = 1e-3 * 0.98 ** ((its - 1) // 300)
    assert np.array_equal([learning_rate(cfg, int(i)) for i in its], expected)


def test_default_sample_volume():
    cfg = TrainingConfig()
    assert cfg.batch_size == 1024 and cfg.iterations_per_epoch * cfg.batch_size == 102400
    assert cfg.early_stop_patience == 10


@pytest.mark.parametrize("bad", [dict(batch_size=0), dict(early_stop_patience=0), dict(utility="mean"),
                                 dict(lr_decay_every=0)])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        TrainingConfig(**bad)


def test_batch_determinism_and_shape():
    system, plan = tiny_setup()
    a = generate_batch(system, plan, 12, np.random.default_rng(5))
    b = generate_batch(system, plan, 12, np.random.default_rng(5))
    assert np.array_equal(a.features, b.features) and np.array_equal(a.channels.F, b.channels.F)
    assert a.features.shape == (12, 2, 2 * 2 * 2) and len(a) == 12
    assert np.array_equal(a.features, build_features(a.pilots))
    c = generate_batch(system, plan, 12, np.random.default_rng(6))
    assert not np.array_equal(a.features, c.features)


def test_fixed_locations_and_plan_mismatch():
    system, plan = tiny_setup()
    loc = np.array([[10.0, 5.0, -20.0], [30.0, -10.0, -20.0]])
    b = generate_batch(system, plan, 4, np.random.default_rng(0), fixed_locations=loc)
    assert np.array_equal(b.locations[3], loc)
    other, _ = tiny_setup(K=1, L=2)
    with pytest.raises(ConfigError):
        generate_batch(other, plan, 4, np.random.default_rng(0))


def test_seed_streams_disjoint():
    s = seed_streams(3)
    draws = {k: g.random(8) for k, g in s.items()}
    vals = list(draws.values())
    for i in range(len(vals)):
        for j in range(i + 1, len(vals)):
            assert not np.allclose(vals[i], vals[j])
    assert np.array_equal(seed_streams(3)["test"].random(8), draws["test"])


def test_train_writes_artifacts_and_returns_best(tmp_path):
    system, plan = tiny_setup()
    rows = []
    ckpt = train(tiny_config(max_epochs=4, early_stop_patience=10), SMALL, system, plan, out_dir=tmp_path,
                 progress=rows.append)
    assert (tmp_path / "best.npz").exists() and (tmp_path / "last.npz").exists()
    log = (tmp_path / "train_log.csv").read_text().splitlines()
    assert log[0] == "epoch,iteration,lr,train_loss,validation_utility,wall_time" and len(log) == 5
    vals = [r["validation_utility"] for r in rows]
    assert ckpt.best_validation == max(vals)
    assert ckpt.epoch == int(np.argmax(vals)) + 1
    assert load_checkpoint(tmp_path / "best.npz").best_validation == ckpt.best_validation
    assert [r["iteration"] for r in rows] == [3, 6, 9, 12]


def test_early_stopping_patience():
    system, plan = tiny_setup()
    ckpt = train(tiny_config(max_epochs=50, early_stop_patience=1, initial_lr=1e-12), SMALL, system, plan)
    # with a vanishing step size validation cannot keep improving for long
    assert len(ckpt.history) < 50
    assert ckpt.best_validation == max(r["validation_utility"] for r in ckpt.history)


def test_training_is_deterministic():
    system, plan = tiny_setup()
    a = train(tiny_config(), SMALL, system, plan)
    b = train(tiny_config(), SMALL, system, plan)
    assert a.best_validation == b.best_validation
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])


def test_divergence_aborts():
    system, plan = tiny_setup()
    with pytest.raises(TrainingDiverged):
        train(tiny_config(initial_lr=float("inf")), SMALL, system, plan)


def test_checkpoint_round_trip(tmp_path):
    system, plan = tiny_setup()
    ckpt = train(tiny_config(max_epochs=1), SMALL, system, plan)
    save_checkpoint(tmp_path / "c.npz", ckpt)
    back = load_checkpoint(tmp_path / "c.npz")
    assert not (tmp_path / "c.npz.tmp").exists()
    assert isinstance(back, Checkpoint) and back.meta() == ckpt.meta()
    assert np.array_equal(back.Q, plan.Q)
    for k in ckpt.params:
        assert np.array_equal(back.params[k], ckpt.params[k])
    x = generate_batch(system, plan, 3, np.random.default_rng(0)).features
    with torch.no_grad():
        a = build_model(ckpt)(torch.as_tensor(x, dtype=torch.float32))
        b = build_model(back)(torch.as_tensor(x, dtype=torch.float32))
    assert all(torch.equal(u, w) for u, w in zip(a, b))


def test_evaluate_deterministic_and_hash_checked():
    system, plan = tiny_setup()
    ckpt = train(tiny_config(max_epochs=1), SMALL, system, plan)
    r1 = evaluate(ckpt, system, plan, 50, seed=4)
    r2 = evaluate(ckpt, system, plan, 50, seed=4)
    assert np.array_equal(r1.samples, r2.samples) and r1.mean == r2.mean and r1.stderr > 0
    moved = system.with_(rician_factor=3.0)
    with pytest.raises(ConfigError):
        evaluate(ckpt, moved, plan, 10)
    assert np.isfinite(evaluate(ckpt, moved, plan, 10, strict=False).mean)
    other_plan = make_plan(2, 4, 4, system.uplink_power, rng=np.random.default_rng(99))
    with pytest.raises(ConfigError):
        check_compatible(ckpt, system, other_plan)
    bigger, bigger_plan = tiny_setup(N=6)
    with pytest.raises(ConfigError):
        check_compatible(ckpt, bigger, bigger_plan, strict=False)


def test_estimator_beats_zero_predictor():
    system, plan = tiny_setup()
    cfg = tiny_config(iterations_per_epoch=40, batch_size=64, max_epochs=3, initial_lr=3e-3)
    ckpt = train(cfg, GnnConfig(depth=2, init_hidden=64, width=32), system, plan, estimator=True)
    assert ckpt.kind == "estimator"
    val = generate_batch(system, plan, 256, np.random.default_rng(1))
    mse = estimation_mse(build_model(ckpt), val).mean()
    zero = np.mean(np.sum(np.abs(val.channels.F) ** 2, axis=(-2, -1)))
    assert mse < 0.5 * zero


@pytest.mark.slow
def test_desk_validation_improves():
    system = desk_system()
    plan = make_plan(system.K, system.N, 16, system.uplink_power, rng=np.random.default_rng(0))
    cfg = TrainingConfig(batch_size=128, validation_size=512, max_epochs=3, seed=0)
    ckpt = train(cfg, GnnConfig(init_hidden=256, width=128), system, plan)
    vals = [r["validation_utility"] for r in ckpt.history]
    assert vals[0] < vals[1] < vals[2]
