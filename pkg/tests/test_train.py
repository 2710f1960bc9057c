import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import mdarsn.train as train_mod
from mdarsn.augment import AugmentConfig
from mdarsn.exceptions import CheckpointError, ConfigurationError, TrainingDivergedError
from mdarsn.network import MDARsn, ModelConfig
from mdarsn.train import (EcgDataset, SearchSpace, TrainConfig, bce_loss, hyperparameter_search,
                          load_checkpoint, lr_at, predict_logits, save_checkpoint, state_equal,
                          train_loop, write_history)

TINY = ModelConfig(n_leads=2, d_model=52, n_resblocks=2, n_mix=1, first_conv_channels=16,
                   window_seconds=0.5, fs=500.0, dropout=0.0)


def tiny_data(n=8, seed=0, length=300):
    r = np.random.default_rng(seed)
    signals = [r.uniform(-1, 1, (2, length)).astype(np.float32) for _ in range(n)]
    labels = r.random((n, 26)) < 0.1
    labels[np.arange(n), r.integers(26, size=n)] = True
    return EcgDataset(signals, np.ones((n, 2), bool), labels, [f"r{i}" for i in range(n)])


# ---------------------------------------------------------------------------
# loss and schedule
# ---------------------------------------------------------------------------

def test_bce_examples():
    y = torch.tensor([[1.0, 0.0, 1.0]])
    assert bce_loss(torch.zeros(1, 3), y).item() == pytest.approx(0.693147, abs=1e-6)
    loss = bce_loss(torch.tensor([[100.0]]), torch.tensor([[1.0]]))
    assert math.isfinite(loss.item()) and loss.item() < 1e-6
    loss = bce_loss(torch.tensor([[1.0, -1.0]], dtype=torch.float64), torch.tensor([[1.0, 0.0]]))
    assert loss.item() == pytest.approx(0.313262, abs=1e-6)
    with pytest.raises(ValueError):
        bce_loss(torch.zeros(2, 3), torch.zeros(2, 4))


def test_lr_examples():
    cfg = TrainConfig(learning_rate=1e-3)
    assert lr_at(0, cfg) == 0.0
    assert lr_at(1000, cfg) == 1e-3
    assert lr_at(5500, cfg) == pytest.approx(5e-4, abs=1e-18)
    assert lr_at(10000, cfg) == 0.0
    assert lr_at(20000, cfg) == 0.0
    assert lr_at(500, cfg) == 5e-4


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-5, 1.0), st.integers(1, 500), st.integers(1, 2000))
def test_lr_continuity_and_monotonic_decay(peak, warm, extra):
    cfg = TrainConfig(learning_rate=peak, warmup_steps=warm, max_steps=warm + extra)
    below = peak * (warm - 1e-9) / warm
    assert abs(lr_at(warm, cfg) - below) < 1e-8 * peak
    steps = np.arange(0, cfg.max_steps + 5)
    lrs = np.array([lr_at(int(s), cfg) for s in steps])
    assert np.all(lrs >= 0)
    after = lrs[warm:]
    assert np.all(np.diff(after) <= 1e-15)


def test_train_config_invariants():
    with pytest.raises(ConfigurationError):
        TrainConfig(warmup_steps=10, max_steps=10)
    with pytest.raises(ConfigurationError):
        TrainConfig(patience_epochs=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ConfigurationError):
        TrainConfig.from_dict({"lr": 1})
    cfg = TrainConfig(seed=3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def test_patience_example(monkeypatch):
    prcs = iter([0.5, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6, 0.9, 0.9])
    snapshots = {}

    def fake_evaluate(model, data, weights, t=0.5):
        return {"macro_ap": next(prcs), "challenge_score": 0.1}

    monkeypatch.setattr(train_mod, "evaluate", fake_evaluate)
    data = tiny_data(4)
    model = MDARsn(TINY)
    cfg = TrainConfig(batch_size=4, warmup_steps=1, max_steps=100, patience_epochs=5)

    def on_epoch(row):
        snapshots[row["epoch"]] = {k: v.clone() for k, v in model.state_dict().items()}

    result = train_loop(model, data, data, cfg, on_epoch=on_epoch)
    assert [r["epoch"] for r in result.history] == [1, 2, 3, 4, 5, 6, 7]
    assert result.stopped_early and result.best_epoch == 2
    assert state_equal(model.state_dict(), snapshots[2])
    assert not state_equal(model.state_dict(), snapshots[7])


def test_same_seed_same_history():
    data = tiny_data()
    cfg = TrainConfig(batch_size=4, warmup_steps=1, max_steps=6, seed=5)
    runs = []
    for _ in range(2):
        runs.append(train_loop(MDARsn(TINY), data, data, cfg).history)
    assert runs[0] == runs[1]


def test_history_is_bitwise_without_stochastic_layers():
    data = tiny_data()
    cfg = TrainConfig(batch_size=4, warmup_steps=1, max_steps=4, dropout=0.0)
    no_aug = AugmentConfig(min_window_fraction=1.0, lead_dropout_prob=0.0)
    losses = [
        [r["train_loss"] for r in train_loop(MDARsn(TINY.replace(n_mix=0)), data, data, cfg,
                                             no_aug).history]
        for _ in range(2)
    ]
    assert losses[0] == losses[1]


def test_best_snapshot_has_highest_prc():
    data = tiny_data(12)
    cfg = TrainConfig(batch_size=4, warmup_steps=1, max_steps=15, patience_epochs=2,
                      learning_rate=1e-2)
    result = train_loop(MDARsn(TINY), data, data, cfg)
    assert result.best_prc == max(r["val_prc"] for r in result.history)


def test_history_file(tmp_path):
    data = tiny_data(4)
    result = train_loop(MDARsn(TINY), data, data,
                        TrainConfig(batch_size=4, warmup_steps=1, max_steps=2))
    write_history(result.history, tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,step,train_loss,val_prc,val_challenge,lr"
    assert len(lines) == 3


def test_nan_loss_aborts_with_diagnostics():
    data = tiny_data(4)
    data.signals[2][:] = np.nan
    cfg = TrainConfig(batch_size=4, warmup_steps=1, max_steps=3)
    with pytest.raises(TrainingDivergedError) as info:
        train_loop(MDARsn(TINY), data, data, cfg)
    err = info.value
    assert err.step == 1 and err.lr == lr_at(1, cfg)
    assert sorted(err.batch_ids) == ["r0", "r1", "r2", "r3"]


def test_empty_data_rejected():
    data = tiny_data(4)
    with pytest.raises(ValueError):
        train_loop(MDARsn(TINY), data.subset([]), data, TrainConfig(warmup_steps=1, max_steps=2))


def _one_step_decreases(seed):
    torch.manual_seed(seed)
    cfg = TINY.replace(seed=seed)
    model = MDARsn(cfg).train()
    for m in model.mixstyle_layers():
        m.fixed_lambda = np.array([0.4, 0.9, 0.1, 0.7])
        m.fixed_perm = np.array([2, 3, 0, 1])
    r = np.random.default_rng(seed)
    x = torch.from_numpy(r.uniform(-1, 1, (4, 2, 250)).astype(np.float32))
    y = torch.from_numpy(r.random((4, 26)) < 0.2)
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    loss = bce_loss(model(x), y)
    opt.zero_grad()
    loss.backward()
    opt.step()
    with torch.no_grad():
        after = bce_loss(model(x), y)
    return after.item() < loss.item()


def test_one_step_decreases_batch_loss():
    assert sum(_one_step_decreases(s) for s in range(20)) >= 18


# ---------------------------------------------------------------------------
# hyperparameter search
# ---------------------------------------------------------------------------

GRID_LR = list(np.geomspace(1e-4, 1e-3, 5))


def test_search_grids():
    names = [n for n, _ in SearchSpace().grids()]
    assert names == ["learning_rate", "dropout", "n_mix", "resb_kernel", "n_resblocks"]
    grids = dict(SearchSpace().grids())
    np.testing.assert_allclose(grids["learning_rate"], GRID_LR)
    np.testing.assert_allclose(grids["dropout"], [0.1, 0.2, 0.3, 0.4, 0.5])


def test_search_separable_objective():
    res = hyperparameter_search(lambda tc, mc: -(tc.learning_rate - 5e-4) ** 2, budget=100)
    best = min(GRID_LR, key=lambda v: abs(v - 5e-4))
    assert res.train_cfg.learning_rate == pytest.approx(best)
    assert not res.warnings


def test_search_budget_one():
    calls = []
    res = hyperparameter_search(lambda tc, mc: calls.append(1) or 1.0, budget=1)
    assert len(calls) == 1 and len(res.trials) == 1
    assert res.train_cfg == TrainConfig() and res.model_cfg == ModelConfig()
    assert res.warnings and "partial" in res.warnings[0]


def test_search_constant_objective_keeps_first_incumbent():
    res = hyperparameter_search(lambda tc, mc: 0.0, budget=100)
    assert res.train_cfg == TrainConfig() and res.model_cfg == ModelConfig()
    again = hyperparameter_search(lambda tc, mc: 0.0, budget=100)
    assert res.trials == again.trials


def test_search_coordinate_order_and_greedy_moves():
    def objective(tc, mc):
        return -abs(tc.dropout - 0.3) - abs(mc.resb_kernel - 11) / 10 - abs(mc.n_resblocks - 6)

    res = hyperparameter_search(objective, budget=100)
    assert res.train_cfg.dropout == pytest.approx(0.3)
    assert res.model_cfg.dropout == pytest.approx(0.3)
    assert res.model_cfg.resb_kernel == 11 and res.model_cfg.n_resblocks == 6
    swept = [next(k for k in t["params"] if t["params"][k] != res.trials[0]["params"][k])
             for t in res.trials[1:5]]
    assert swept == ["learning_rate"] * 4
    json.dumps(res.to_dict())


def test_search_skips_invalid_candidates():
    base = ModelConfig(n_resblocks=2, n_mix=1)
    res = hyperparameter_search(lambda tc, mc: 0.0, budget=100, model_cfg=base)
    assert any("n_mix=3" in w for w in res.warnings)


def test_search_rejects_zero_budget():
    with pytest.raises(ValueError):
        hyperparameter_search(lambda tc, mc: 0.0, budget=0)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@pytest.fixture
def trained(tmp_path):
    data = tiny_data(4)
    model = MDARsn(TINY)
    train_loop(model, data, data, TrainConfig(batch_size=4, warmup_steps=1, max_steps=2))
    path = save_checkpoint(model, tmp_path / "ckpt", classes=[str(i) for i in range(26)])
    return model, path, data


def test_checkpoint_round_trip_bitwise(trained):
    model, path, data = trained
    loaded, classes = load_checkpoint(path)
    assert classes == [str(i) for i in range(26)]
    assert loaded.cfg == model.cfg
    np.testing.assert_array_equal(predict_logits(loaded, data), predict_logits(model, data))


def test_checkpoint_files(trained):
    _, path, _ = trained
    manifest = json.loads((path / "manifest.json").read_text())
    assert manifest["dtype"] == "float32-le"
    total = sum(e["nbytes"] for e in manifest["entries"])
    assert total == (path / "params.bin").stat().st_size
    names = [e["name"] for e in manifest["entries"]]
    assert "head.class_weight" in names
    assert not any(n.endswith("num_batches_tracked") for n in names)


def test_truncated_params_rejected(trained):
    _, path, _ = trained
    blob = (path / "params.bin").read_bytes()
    (path / "params.bin").write_bytes(blob[:-8])
    with pytest.raises(CheckpointError, match="bytes"):
        load_checkpoint(path)


def test_flipped_byte_rejected(trained):
    _, path, _ = trained
    blob = bytearray((path / "params.bin").read_bytes())
    blob[100] ^= 0xFF
    (path / "params.bin").write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)


def test_shape_mismatch_names_parameter(trained):
    _, path, _ = trained
    manifest = json.loads((path / "manifest.json").read_text())
    entry = next(e for e in manifest["entries"] if e["name"] == "head.class_bias")
    entry["shape"] = [13, 2]
    (path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError, match="head.class_bias"):
        load_checkpoint(path)


def test_missing_entry_names_parameter(trained):
    _, path, _ = trained
    manifest = json.loads((path / "manifest.json").read_text())
    manifest["entries"] = [e for e in manifest["entries"] if e["name"] != "backbone.stem.weight"]
    (path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError, match="backbone.stem.weight"):
        load_checkpoint(path)


def test_lead_count_mismatch(trained, tmp_path):
    _, path, _ = trained
    with pytest.raises(CheckpointError, match="2 leads"):
        load_checkpoint(path, expected_n_leads=6)
    with pytest.raises(CheckpointError, match="missing"):
        load_checkpoint(tmp_path / "nowhere")
