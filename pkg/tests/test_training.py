import json

import numpy as np
import pytest

from pingo.checkpoint import load_checkpoint
from pingo.egnn import DirectEgnn, DirectEgnnConfig, EgnnConfig
from pingo.integrator import IntegratorConfig, PingoModel
from pingo.tensor import Tensor
from pingo.training import (
    TrainConfig,
    TrainingDivergedError,
    evaluate_mse,
    load_model,
    make_samples,
    position_loss,
    save_model,
    train,
)


def small_pingo(seed=0):
    return PingoModel.create(EgnnConfig(n_layers=2, hidden_dim=8), IntegratorConfig(4, 1.0), seed=seed)


@pytest.fixture(scope="module")
def samples(small_gravity):
    return make_samples(small_gravity["train"]), make_samples(small_gravity["valid"])


def strip(log):
    return [{k: v for k, v in r.items() if k != "wall_time_s"} for r in log]


def test_make_samples_pairs_frames(small_gravity):
    ts = small_gravity["train"]
    s = make_samples(ts, horizon=0.5, start_frame=1)
    np.testing.assert_array_equal(s.q, ts.positions[:, 1])
    np.testing.assert_array_equal(s.target, ts.positions[:, 3])
    with pytest.raises(ValueError):
        make_samples(ts, horizon=5.0)


def test_position_loss_is_mean_over_coordinates():
    pred = Tensor(np.ones((2, 3)))
    assert position_loss(pred, np.zeros((2, 3))).item() == 1.0
    assert position_loss(pred, np.full((1, 2, 3), 3.0)).item() == 4.0


def test_training_reduces_loss(samples):
    tr, va = samples
    model = small_pingo()
    before = evaluate_mse(model, va)
    res = train(model, tr, va, TrainConfig(batch_size=4, epochs=8, lr=3e-3))
    assert len(res.log) == 8
    assert res.best_valid_mse < before
    assert evaluate_mse(model, va) == pytest.approx(res.best_valid_mse, rel=1e-12)
    assert res.log[-1]["train_mse"] < res.log[0]["train_mse"]


def test_training_is_deterministic(samples):
    tr, va = samples
    cfg = TrainConfig(batch_size=5, epochs=3, lr=1e-3, seed=3)
    a = train(small_pingo(), tr, va, cfg)
    b = train(small_pingo(), tr, va, cfg)
    assert strip(a.log) == strip(b.log)
    for k, v in a.model.state_dict().items():
        np.testing.assert_array_equal(v, b.model.state_dict()[k])


def test_resume_reproduces_uninterrupted_run(samples, tmp_path):
    tr, va = samples
    full = train(small_pingo(), tr, va, TrainConfig(batch_size=5, epochs=4, lr=2e-3), log_path=tmp_path / "full.jsonl")
    train(small_pingo(), tr, va, TrainConfig(batch_size=5, epochs=2, lr=2e-3),
          log_path=tmp_path / "part.jsonl", checkpoint_dir=tmp_path / "ck")
    resumed = train(small_pingo(seed=99), tr, va, TrainConfig(batch_size=5, epochs=4, lr=2e-3),
                    log_path=tmp_path / "part.jsonl", checkpoint_dir=tmp_path / "ck",
                    resume_from=tmp_path / "ck" / "last.ckpt")
    assert strip(resumed.log) == strip(full.log)[2:]
    logged = [json.loads(line) for line in open(tmp_path / "part.jsonl")]
    assert strip(logged) == strip(full.log)
    for k, v in full.model.state_dict().items():
        np.testing.assert_array_equal(v, resumed.model.state_dict()[k])


def test_nan_loss_raises_with_last_good_weights(samples):
    tr, va = samples
    bad = tr.take(slice(None))
    bad.target = bad.target.copy()
    bad.target[3, 0, 0] = np.nan
    model = small_pingo()
    with pytest.raises(TrainingDivergedError) as info:
        train(model, bad, va, TrainConfig(batch_size=100, epochs=2))
    assert info.value.epoch == 0 and info.value.batch == 0
    assert set(info.value.last_good) == set(model.state_dict())


def test_early_stopping(samples):
    tr, va = samples
    res = train(small_pingo(), tr, va, TrainConfig(batch_size=16, epochs=50, lr=0.0, patience=2))
    assert len(res.log) == 3 and res.best_epoch == 0


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=-1)


@pytest.mark.parametrize("kind", ["pingo", "direct"])
def test_model_checkpoint_round_trip(kind, tmp_path, samples):
    _, va = samples
    if kind == "pingo":
        model = PingoModel.create(EgnnConfig(n_layers=2, hidden_dim=8), IntegratorConfig(2, 1.0), "first_order", seed=5)
    else:
        model = DirectEgnn(DirectEgnnConfig(n_layers=3, hidden_dim=8), seed=5)
    path = save_model(tmp_path / "m.ckpt", model, {"note": 1})
    loaded, meta = load_model(path)
    assert loaded.config_dict() == model.config_dict()
    assert evaluate_mse(loaded, va) == evaluate_mse(model, va)
    assert meta["note"] == 1
    _, raw = load_checkpoint(path)
    assert raw["model_config"] == model.config_dict()
