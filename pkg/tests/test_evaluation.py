import csv
import json
from fractions import Fraction

import numpy as np
import pytest

from pingo.egnn import DirectEgnn, DirectEgnnConfig, EgnnConfig
from pingo.evaluation import (
    EvalReport,
    LinearExtrapolation,
    compare_numerical,
    equivariance_audit,
    eval_direct,
    eval_intermediate,
    eval_rollout,
    fit_slope,
    model_hash,
    random_orthogonal,
    rollout_errors,
    tau_scan,
    truncation_scan,
)
from pingo.integrator import ForceFieldBackbone, IntegratorConfig, PingoModel, ZeroBackbone


def oracle(ts, tau=1000):
    return PingoModel(ForceFieldBackbone(ts.system_kind, ts.softening, ts.strength), IntegratorConfig(tau, 1.0))


def test_linear_baseline_matches_hand_computed_mse(small_gravity):
    ts = small_gravity["test"]
    got = eval_direct(LinearExtrapolation(), ts, [1.0, 0.5])
    for horizon, k in ((1.0, 4), (0.5, 2)):
        ref = np.mean((ts.positions[:, 0] + ts.velocities[:, 0] * horizon - ts.positions[:, k]) ** 2)
        assert got[str(horizon)] == pytest.approx(ref, rel=1e-12)


def test_zero_field_pingo_equals_linear_baseline(small_gravity):
    ts = small_gravity["test"]
    zero = PingoModel(ZeroBackbone(), IntegratorConfig(8, 1.0))
    a = eval_direct(zero, ts, [1.0])
    b = eval_direct(LinearExtrapolation(), ts, [1.0])
    assert a["1.0"] == pytest.approx(b["1.0"], rel=1e-12)


def test_true_force_at_generation_step_reproduces_ground_truth(small_gravity):
    ts = small_gravity["test"]
    assert eval_direct(oracle(ts), ts, [1.0])["1.0"] < 1e-8
    curve = eval_rollout(oracle(ts), ts, 2)
    assert all(r["mse"] < 1e-8 and r["n_diverged"] == 0 for r in curve)


def test_missing_ground_truth_horizon_is_an_error(small_gravity):
    ts = small_gravity["test"]
    with pytest.raises(ValueError, match="missing"):
        eval_direct(LinearExtrapolation(), ts, [10.0])
    with pytest.raises(ValueError, match="missing"):
        eval_rollout(LinearExtrapolation(), ts, 20)


def test_intermediate_fraction_one_equals_direct(small_gravity):
    ts = small_gravity["test"]
    model = PingoModel.create(EgnnConfig(n_layers=2, hidden_dim=8), IntegratorConfig(8, 1.0), seed=1)
    inter = eval_intermediate(model, ts)
    assert inter["1"] == pytest.approx(eval_direct(model, ts, [1.0])["1.0"], rel=1e-12)
    assert set(inter) == {"1/4", "1/2", "3/4", "1"}


def test_intermediate_requires_divisible_tau(small_gravity):
    model = PingoModel.create(EgnnConfig(n_layers=2, hidden_dim=8), IntegratorConfig(6, 1.0))
    with pytest.raises(ValueError, match="divisible"):
        eval_intermediate(model, small_gravity["test"], [Fraction(1, 4)])


def test_intermediate_for_direct_baseline_reads_hidden_layers(small_gravity):
    ts = small_gravity["test"]
    model = DirectEgnn(DirectEgnnConfig(n_layers=4, hidden_dim=8), seed=0)
    inter = eval_intermediate(model, ts, [Fraction(1, 2), 1])
    assert inter["1"] == pytest.approx(eval_direct(model, ts, [1.0])["1.0"], rel=1e-12)
    lin = eval_intermediate(LinearExtrapolation(), ts, [Fraction(1, 2)])
    ref = np.mean((ts.positions[:, 0] + 0.5 * ts.velocities[:, 0] - ts.positions[:, 2]) ** 2)
    assert lin["1/2"] == pytest.approx(ref, rel=1e-12)


def test_first_rollout_window_equals_direct(small_gravity):
    ts = small_gravity["test"]
    model = PingoModel.create(EgnnConfig(n_layers=2, hidden_dim=8), IntegratorConfig(4, 1.0), seed=2)
    curve = eval_rollout(model, ts, 2)
    assert curve[0]["mse"] == pytest.approx(eval_direct(model, ts, [1.0])["1.0"], rel=1e-12)


def test_rollout_counts_diverged_systems(small_gravity):
    ts = small_gravity["test"]
    err = rollout_errors(LinearExtrapolation(), ts, 2, cap=1e-9)
    assert np.all(np.isnan(err))
    curve = eval_rollout(LinearExtrapolation(), ts, 2, cap=1e-9)
    assert curve[0]["mse"] is None and curve[0]["n_diverged"] == len(ts)


def test_linear_rollout_closed_form(small_gravity):
    ts = small_gravity["test"]
    err = rollout_errors(LinearExtrapolation(), ts, 2)
    ref = np.mean((ts.positions[:, 0] + 2 * ts.velocities[:, 0] - ts.positions[:, 8]) ** 2, axis=(1, 2))
    np.testing.assert_allclose(err[:, 1], ref, rtol=1e-12)


def test_numerical_baseline(small_gravity):
    ts = small_gravity["test"]
    out = compare_numerical(ts, [0.001, 0.01, 0.05, 0.25], n_windows=2)
    assert max(out["0.001"]) < 1e-20
    curve = [out[k][1] for k in ("0.01", "0.05", "0.25")]
    assert curve == sorted(curve)
    with pytest.raises(ValueError):
        compare_numerical(ts, [0.3])


def test_tau_scan_averages_seeds(small_gravity):
    ts = small_gravity["test"]
    calls = []

    def fit(tau, seed):
        calls.append((tau, seed))
        return PingoModel(ForceFieldBackbone("gravity", ts.softening), IntegratorConfig(tau, 1.0))

    mean, per = tau_scan([1, 4], fit, ts, seeds=[0, 1])
    assert calls == [(1, 0), (1, 1), (4, 0), (4, 1)]
    assert mean["4"] < mean["1"]
    assert per["1"][0] == per["1"][1] == mean["1"]


def test_random_orthogonal():
    rng = np.random.default_rng(0)
    for reflect in (True, False, None):
        r = random_orthogonal(rng, reflect)
        np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-14)
        if reflect is not None:
            assert np.linalg.det(r) == pytest.approx(-1.0 if reflect else 1.0)


@pytest.mark.parametrize(
    "model",
    [
        PingoModel.create(EgnnConfig(n_layers=2, hidden_dim=8), IntegratorConfig(4, 1.0), seed=3),
        DirectEgnn(DirectEgnnConfig(n_layers=3, hidden_dim=8), seed=3),
        LinearExtrapolation(),
    ],
    ids=["pingo", "direct", "linear"],
)
def test_equivariance_audit_passes_equivariant_models(model, small_gravity):
    ts = small_gravity["test"]
    res = equivariance_audit(model, ts.positions[:3, 0], ts.velocities[:3, 0], ts.attributes[:3], 10, seed=4)
    assert res["max_deviation"] < 1e-12 and res["n_transforms"] == 10


class _Broken:
    """Adds a fixed vector to positions, so it is not rotation equivariant."""

    def predict(self, q, v, h, horizon=None, edge_attr=None):
        return q + np.array([1.0, 0.0, 0.0]), v


def test_equivariance_audit_catches_a_broken_model(small_gravity):
    ts = small_gravity["test"]
    res = equivariance_audit(_Broken(), ts.positions[:2, 0], ts.velocities[:2, 0], ts.attributes[:2], 5)
    assert res["max_deviation"] > 1e-3
    again = equivariance_audit(_Broken(), ts.positions[:2, 0], ts.velocities[:2, 0], ts.attributes[:2], 5)
    assert again == res


def test_constant_acceleration_residual_has_slope_two():
    f = np.array([0.3, -1.2, 0.5])
    dts = np.array([0.2, 0.1, 0.05, 0.025])
    # exact motion under constant f minus the one-step symplectic Euler update
    errs = [np.linalg.norm((f * dt * dt / 2) - f * dt * dt) for dt in dts]
    assert fit_slope(dts, errs) == pytest.approx(2.0, abs=1e-12)


def test_truncation_slopes_on_gravity(small_gravity):
    ts = small_gravity["train"]
    res = truncation_scan(ts.positions[:, 0], ts.velocities[:, 0], ts.attributes, "gravity",
                          [0.2, 0.1, 0.05, 0.025], ts.softening)
    assert abs(res["local_slope"] - 2) <= 0.3
    assert abs(res["global_slope"] - 1) <= 0.3
    with pytest.raises(ValueError):
        truncation_scan(ts.positions[:, 0], ts.velocities[:, 0], ts.attributes, "gravity", [0.1, 0.05])


def test_report_round_trip_and_csv(tmp_path):
    rep = EvalReport(
        direct={"1.0": 0.5, "0.5": 0.25},
        intermediate={"1/2": 0.1, "1/4": 0.05},
        rollout=[{"window": 1, "mse": 0.2, "n_diverged": 0}, {"window": 2, "mse": None, "n_diverged": 3}],
        tau_scan={"8": 0.1, "1": 0.3},
        numerical={"0.1": [0.1, 0.2]},
        flags=["rollout window 2: all systems diverged"],
        metadata={"model_hash": "abc"},
    )
    path = rep.to_json(tmp_path / "r.json")
    assert EvalReport.from_json(path) == rep
    files = {p.name for p in rep.write_csv(tmp_path)}
    assert files == {"direct.csv", "intermediate.csv", "rollout.csv", "tau_scan.csv", "numerical.csv"}
    rows = list(csv.reader(open(tmp_path / "intermediate.csv")))
    assert [r[0] for r in rows[1:]] == ["1/4", "1/2"]
    assert json.loads(path.read_text())["rollout"][1]["mse"] is None
    with pytest.raises(ValueError):
        EvalReport(direct={"1": float("nan")}).to_json(tmp_path / "bad.json")


def test_model_hash_tracks_weights():
    a = PingoModel.create(EgnnConfig(n_layers=2, hidden_dim=8), seed=0)
    b = PingoModel.create(EgnnConfig(n_layers=2, hidden_dim=8), seed=0)
    assert model_hash(a) == model_hash(b)
    b.parameters()[0].data[0, 0] += 1e-12
    assert model_hash(a) != model_hash(b)
