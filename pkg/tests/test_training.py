import logging

import numpy as np
import pytest

from meegnet.data import WindowedDataset
from meegnet.errors import ConfigError, NumericError, ShapeError
from meegnet.losses import CBF_GRID, FL_GRID, LossConfig
from meegnet.model import ModelConfig, build, checkpoint_bytes
from meegnet.training import (AdamState, OptimizerConfig, adam_step, derive_seed,
                              grid_candidates, grid_search_loss, kernel_sweep, make_plans,
                              run_protocol, train)


def toy_windows(n=64, seed=0, amplitude=3.0):
    """Every other window carries a 3 Hz burst on all electrodes; labels follow."""
    rng = np.random.default_rng(seed)
    t = np.arange(500) / 500
    X = rng.standard_normal((n, 16, 500))
    Y = np.zeros((n, 16))
    pos = np.arange(n) % 2 == 0
    X[pos] += amplitude * np.sin(2 * np.pi * 3 * t + rng.uniform(0, 2 * np.pi, (pos.sum(), 1, 1)))
    Y[pos] = 1
    return X[:, None], Y


def toy_dataset(n_cases=3, per_case=12, seed=0):
    X, Y = toy_windows(n_cases * per_case, seed)
    case_ids = np.repeat([f"C{i}" for i in range(n_cases)], per_case).astype(object)
    onsets = np.tile(np.arange(per_case), n_cases)
    ab = {f"C{i}": per_case / 2 for i in range(n_cases)}
    tot = {f"C{i}": float(per_case) for i in range(n_cases)}
    return WindowedDataset(X[:, 0], Y.astype(np.uint8), case_ids, onsets, ab, tot)


QUICK = OptimizerConfig(epochs=1, batch_size=16, learning_rate=3e-3)
SMALL = ModelConfig(temporal_kernel=10)


def test_adam_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    adam_step(p, {"w": np.zeros(2)}, AdamState(), 1, OptimizerConfig())
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


@pytest.mark.parametrize("g", [1e-3, 0.5, 40.0, -7.0])
def test_adam_first_step_is_learning_rate(g):
    cfg = OptimizerConfig(learning_rate=0.01)
    p = {"w": np.array([0.0])}
    adam_step(p, {"w": np.array([g])}, AdamState(), 1, cfg)
    # [DERIVED] m_hat = g, v_hat = g^2 at t = 1
    assert p["w"][0] == pytest.approx(-0.01 * g / (abs(g) + 1e-8), rel=1e-12)


def test_adam_step_scale_invariance():
    a, b = {"w": np.zeros(3)}, {"w": np.zeros(3)}
    g = np.array([0.3, -1.0, 2.0])
    adam_step(a, {"w": g}, AdamState(), 1, OptimizerConfig())
    adam_step(b, {"w": 10 * g}, AdamState(), 1, OptimizerConfig())
    np.testing.assert_allclose(a["w"], b["w"], rtol=1e-6)


def test_adam_second_step_matches_reference():
    cfg = OptimizerConfig(learning_rate=0.1, beta1=0.9, beta2=0.999, adam_eps=1e-8)
    p = {"w": np.array([1.0])}
    state = AdamState()
    g1, g2 = 2.0, -1.0
    adam_step(p, {"w": np.array([g1])}, state, 1, cfg)
    adam_step(p, {"w": np.array([g2])}, state, 2, cfg)
    m = 0.9 * 0.1 * g1 + 0.1 * g2
    v = 0.999 * 0.001 * g1 ** 2 + 0.001 * g2 ** 2
    step2 = 0.1 * (m / (1 - 0.9 ** 2)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    assert p["w"][0] == pytest.approx(1.0 - 0.1 * g1 / (g1 + 1e-8) - step2, rel=1e-12)


def test_adam_errors():
    with pytest.raises(ShapeError):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState(), 1, OptimizerConfig())
    with pytest.raises(ConfigError):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(2)}, AdamState(), 0, OptimizerConfig())


def test_optimizer_config_validation():
    with pytest.raises(ConfigError):
        OptimizerConfig(batch_size=0)
    with pytest.raises(ConfigError):
        OptimizerConfig.from_dict({"lr": 0.1})


def test_derive_seed_stable_and_distinct():
    assert derive_seed(3, "init", 0) == derive_seed(3, "init", 0)
    seeds = {derive_seed(3, "init", 0), derive_seed(3, "init", 1), derive_seed(3, "shuffle", 0),
             derive_seed(4, "init", 0)}
    assert len(seeds) == 4
    assert all(0 <= s < 2 ** 63 for s in seeds)


def test_train_reaches_low_loss_on_separable_toy_set():
    X, Y = toy_windows()
    model = build(ModelConfig(temporal_kernel=50), 0)
    _, hist = train(model, (X, Y), LossConfig(),
                    OptimizerConfig(epochs=20, batch_size=16, learning_rate=3e-3))
    losses = np.array(hist.train_loss)
    assert len(losses) == 20
    assert losses.min() < 0.1
    moving = np.convolve(losses, np.ones(5) / 5, mode="valid")
    assert np.all(np.diff(moving[3:]) < 0)


def test_zero_epochs_returns_initial_model():
    X, Y = toy_windows(8)
    model = build(SMALL, 1)
    before = checkpoint_bytes(model)
    model, hist = train(model, (X, Y), LossConfig(), OptimizerConfig(epochs=0))
    assert checkpoint_bytes(model) == before and len(hist) == 0


def test_training_is_bit_identical_for_identical_seeds():
    X, Y = toy_windows(24)
    out = []
    for _ in range(2):
        model = build(SMALL, 5)
        train(model, (X, Y), LossConfig(), OptimizerConfig(epochs=2, batch_size=8, shuffle_seed=9))
        out.append(checkpoint_bytes(model))
    assert out[0] == out[1]
    model = build(SMALL, 5)
    train(model, (X, Y), LossConfig(), OptimizerConfig(epochs=2, batch_size=8, shuffle_seed=10))
    assert checkpoint_bytes(model) != out[0]


def test_nan_loss_aborts_with_context():
    X, Y = toy_windows(8)
    model = build(SMALL, 0)
    model.layers[12].params["bias"][:] = np.nan
    with pytest.raises(NumericError, match="epoch 0, batch 0"):
        train(model, (X, Y), LossConfig(), QUICK)


def test_empty_training_set():
    with pytest.raises(ConfigError):
        train(build(SMALL), (np.zeros((0, 1, 16, 500)), np.zeros((0, 16))), LossConfig(), QUICK)


def test_validation_and_early_stopping():
    X, Y = toy_windows(16)
    model = build(SMALL, 0)
    _, hist = train(model, (X, Y), LossConfig(),
                    OptimizerConfig(epochs=4, batch_size=8, early_stop_patience=1),
                    validation_windows=(X[:4], Y[:4]))
    assert all(e.val_loss is not None and e.val_f1 is not None for e in hist.epochs)
    assert hist.to_csv().splitlines()[0] == "epoch,train_loss,val_loss,val_f1"


def test_grid_candidate_counts():
    assert len(grid_candidates("fl")) == 35
    assert len(grid_candidates("cbf")) == 28
    assert grid_candidates("fl")[0] == {"alpha": FL_GRID["alpha"][0], "gamma": FL_GRID["gamma"][0]}
    assert {c["beta"] for c in grid_candidates("CBF")} == set(CBF_GRID["beta"])
    with pytest.raises(ConfigError):
        grid_candidates("bce")
    with pytest.raises(ConfigError):
        grid_candidates("fl", {"alpha": (0.25,), "gamma": ()})


def test_single_candidate_grid_still_trains():
    X, Y = toy_windows(24)
    res = grid_search_loss((X, Y), "fl", {"alpha": (0.5,), "gamma": (1.0,)}, QUICK, SMALL)
    assert len(res.candidates) == 1 and len(res.best.fold_f1) == 3
    assert res.best_loss().kind == "fl" and res.best_loss().alpha == 0.5


def test_grid_fold_without_positives_scores_zero(caplog):
    X, _ = toy_windows(12)
    Y = np.zeros((12, 16))
    with caplog.at_level(logging.WARNING):
        res = grid_search_loss((X, Y), "cbf", {"beta": (0.9,), "gamma": (0.0,)}, QUICK, SMALL)
    assert res.best.fold_f1 == [0.0, 0.0, 0.0]
    assert "no positive cells" in caplog.text


def test_run_protocol_shapes(tmp_path):
    ds = toy_dataset()
    res = run_protocol(ds, "kfold", SMALL, LossConfig(), QUICK, seeds=(0, 1), k=3, run_dir=tmp_path)
    assert len(res.sessions) == 6
    assert [s.key for s in res.sessions] == ["fold0", "fold1", "fold2"] * 2
    tested = np.sort(np.concatenate([s.test_index for s in res.sessions[:3]]))
    np.testing.assert_array_equal(tested, np.arange(len(ds)))
    assert (tmp_path / "kfold" / "seed1" / "K10" / "fold2" / "model.ckpt").exists()
    loco = run_protocol(ds, "loco", SMALL, LossConfig(), QUICK, seeds=(0,))
    assert [s.key for s in loco.sessions] == ["C0", "C1", "C2"]
    assert all(len(s.case_reports) == 1 for s in loco.sessions)
    with pytest.raises(ConfigError):
        make_plans(ds, "holdout")


def test_kernel_sweep_is_paired():
    ds = toy_dataset(per_case=8)
    res = kernel_sweep(ds, (10, 50, 125, 250), "kfold", (0,), SMALL, LossConfig(), QUICK, k=2)
    assert list(res) == [10, 50, 125, 250]
    prints = {tuple(r.plan_fingerprints) for r in res.values()}
    assert len(prints) == 1
    assert [r.model_config.temporal_kernel for r in res.values()] == [10, 50, 125, 250]
    for r in res.values():
        assert len(r.sessions) == 2
