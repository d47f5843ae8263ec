"""Evaluation protocols and the :class:`EvalReport` they fill in.

Every function takes a model exposing ``predict(q, v, h, horizon, edge_attr)``
(and ``predict_intermediate`` where needed) plus a
:class:`~pingo.dataset.TrajectorySet`; none of them modify the model.
Systems are evaluated in fixed-size chunks in dataset order, so results
do not depend on anything but the model weights and the data.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import solve_ivp

from .dataset import TrajectorySet
from .graph import GraphBatch
from .integrator import DIVERGENCE_CAP, PingoModel, rollout_arrays
from .physics import integrate, pairwise_accel, symplectic_euler_update
from .tensor import Tensor, no_grad

CHUNK = 100
SLOPE_TOLERANCE = 0.2


class LinearExtrapolation:
    """Constant-velocity baseline ``q + v T``; has no parameters."""

    kind = "linear"
    velocity_source = "model"

    def predict(self, q, v, h=None, horizon: float = 1.0, edge_attr=None):
        q = np.asarray(q, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        return q + v * (1.0 if horizon is None else horizon), v.copy()

    def predict_intermediate(self, q, v, h, fractions, edge_attr=None, horizon: float = 1.0) -> dict:
        return {f: np.asarray(q) + np.asarray(v) * float(f) * horizon for f in fractions}

    def parameters(self) -> list:
        return []

    def state_dict(self) -> dict:
        return {}

    def config_dict(self) -> dict:
        return {"model": self.kind}


# -- hashing ---------------------------------------------------------------------

def model_hash(model) -> str:
    h = hashlib.sha256(json.dumps(model.config_dict(), sort_keys=True).encode())
    for name, a in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


# -- report ----------------------------------------------------------------------

@dataclass
class EvalReport:
    """Collected metrics. Diverged entries are ``None`` and listed in ``flags``."""

    direct: dict = field(default_factory=dict)  # horizon -> mse
    intermediate: dict = field(default_factory=dict)  # fraction -> mse
    rollout: list = field(default_factory=list)  # [{window, mse, n_diverged}]
    tau_scan: dict = field(default_factory=dict)  # tau -> mse
    numerical: dict = field(default_factory=dict)  # dt -> [mse per window]
    equivariance: dict = field(default_factory=dict)
    truncation: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n")
        return path

    @classmethod
    def from_json(cls, path) -> "EvalReport":
        return cls(**json.loads(Path(path).read_text()))

    def write_csv(self, out_dir) -> list[Path]:
        """One CSV per non-empty curve or table."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = []

        def table(name, header, rows):
            p = out / f"{name}.csv"
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(header)
                w.writerows(rows)
            written.append(p)

        if self.direct:
            table("direct", ["horizon", "mse"], sorted(self.direct.items(), key=lambda kv: float(kv[0])))
        if self.intermediate:
            table(
                "intermediate", ["fraction", "mse"],
                sorted(self.intermediate.items(), key=lambda kv: float(Fraction(kv[0]))),
            )
        if self.rollout:
            table("rollout", ["window", "mse", "n_diverged"], [(r["window"], r["mse"], r["n_diverged"]) for r in self.rollout])
        if self.tau_scan:
            table("tau_scan", ["tau", "mse"], sorted(((int(k), v) for k, v in self.tau_scan.items())))
        if self.numerical:
            rows = []
            for dt, curve in sorted(self.numerical.items(), key=lambda kv: float(kv[0])):
                rows += [(dt, k + 1, m) for k, m in enumerate(curve)]
            table("numerical", ["dt", "window", "mse"], rows)
        return written


def _key(x) -> str:
    """Stable string key for a horizon, fraction or dt."""
    if isinstance(x, Fraction):
        return f"{x.numerator}/{x.denominator}" if x.denominator != 1 else str(x.numerator)
    return repr(float(x))


def _mse(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.mean((pred - target) ** 2))


def _chunks(n: int, size: int = CHUNK):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def _check_frame(ts: TrajectorySet, duration: float, start: int = 0) -> int:
    k = start + ts.frames_for(duration)
    if k >= ts.n_frames:
        raise ValueError(
            f"ground truth ends at {(ts.n_frames - 1) * ts.frame_dt:g} time units; "
            f"horizon {duration:g} from frame {start} is missing"
        )
    return k


# -- protocols -------------------------------------------------------------------

def eval_direct(model, ts: TrajectorySet, horizons: Sequence[float]) -> dict[str, float]:
    """MSE of predicted positions at each horizon from frame 0."""
    out = {}
    edge_attr = ts.edge_attr()
    for horizon in horizons:
        k = _check_frame(ts, horizon)
        sq = 0.0
        with no_grad():
            for sl in _chunks(len(ts)):
                q, _ = model.predict(
                    ts.positions[sl, 0], ts.velocities[sl, 0], ts.attributes[sl], horizon, edge_attr[sl]
                )
                sq += float(np.sum((q - ts.positions[sl, k]) ** 2))
        out[_key(horizon)] = sq / ts.positions[:, k].size
    return out


def eval_intermediate(
    model, ts: TrajectorySet, fractions: Sequence = (Fraction(1, 4), Fraction(1, 2), Fraction(3, 4), 1), horizon: float = 1.0
) -> dict[str, float]:
    """MSE at fractions of the training horizon without intermediate supervision.

    PINGO reads its stored integrator snapshots; the direct-mapping
    baseline reads positions from hidden layer round(fraction * depth).
    """
    fracs = [Fraction(f).limit_denominator(10**6) for f in fractions]
    if isinstance(model, PingoModel):
        tau = model.integrator.tau
        for f in fracs:
            if (f * tau).denominator != 1:
                raise ValueError(f"tau={tau} is not divisible into fraction {f}")
    frames = {f: _check_frame(ts, float(f) * horizon) for f in fracs}
    edge_attr = ts.edge_attr()
    sq = {f: 0.0 for f in fracs}
    with no_grad():
        for sl in _chunks(len(ts)):
            pred = model.predict_intermediate(
                ts.positions[sl, 0], ts.velocities[sl, 0], ts.attributes[sl], fracs, edge_attr[sl]
            )
            for f in fracs:
                sq[f] += float(np.sum((pred[f] - ts.positions[sl, frames[f]]) ** 2))
    n = ts.positions[:, 0].size
    return {_key(f): sq[f] / n for f in fracs}


def rollout_errors(model, ts: TrajectorySet, n_windows: int, horizon: float = 1.0, cap: float = DIVERGENCE_CAP) -> np.ndarray:
    """Per-system position MSE at every window boundary, shape (B, n_windows).

    Models without a velocity output get the finite-difference velocity
    of their last window. Entries are NaN from the window in which a
    system diverged onward.
    """
    frames = [_check_frame(ts, horizon * k) for k in range(1, n_windows + 1)]
    edge_attr = ts.edge_attr()
    source = getattr(model, "velocity_source", "model")
    n, d = ts.n_bodies, ts.attributes.shape[-1]

    def predict(q, v, packed):
        # node and edge attributes travel together so the alive subset lines up
        h = packed[:, : n * d].reshape(-1, n, d)
        return model.predict(q, v, h, horizon, packed[:, n * d :])

    out = np.empty((len(ts), n_windows))
    with no_grad():
        for sl in _chunks(len(ts)):
            packed = np.concatenate([ts.attributes[sl].reshape(-1, n * d), edge_attr[sl]], axis=1)
            qs, _, _ = rollout_arrays(
                predict, ts.positions[sl, 0], ts.velocities[sl, 0], packed, n_windows, horizon, source, cap
            )
            for w in range(n_windows):
                out[sl, w] = np.mean((qs[w + 1] - ts.positions[sl, frames[w]]) ** 2, axis=(1, 2))
    return out


def eval_rollout(model, ts: TrajectorySet, n_windows: int, horizon: float = 1.0, cap: float = DIVERGENCE_CAP) -> list[dict]:
    """MSE at every window boundary of a closed-loop rollout.

    A window's MSE averages the systems still alive; ``mse`` is None once
    every system has diverged.
    """
    err = rollout_errors(model, ts, n_windows, horizon, cap)
    curve = []
    for w in range(n_windows):
        alive = np.isfinite(err[:, w])
        mse = float(np.mean(err[alive, w])) if alive.any() else None
        curve.append({"window": w + 1, "mse": mse, "n_diverged": int((~alive).sum())})
    return curve


def compare_numerical(
    ts: TrajectorySet, dt_list: Sequence[float], n_windows: int = 1, horizon: float = 1.0
) -> dict[str, list[float]]:
    """Symplectic Euler with the true force law at each step size.

    Errors are measured against the stored ground truth at every window
    boundary, so passing the generation step reproduces it exactly.
    """
    frames = [_check_frame(ts, horizon * k) for k in range(1, n_windows + 1)]
    out = {}
    for dt in dt_list:
        per = horizon / dt
        if abs(per - round(per)) > 1e-9:
            raise ValueError(f"dt {dt} does not divide the horizon {horizon}")
        per = int(round(per))
        with np.errstate(over="ignore", invalid="ignore"):
            qs, _ = integrate(
                ts.positions[:, 0], ts.velocities[:, 0], ts.attributes, ts.system_kind,
                per * n_windows, dt, ts.softening, ts.strength, per,
            )
        out[_key(dt)] = [_mse(qs[k + 1], ts.positions[:, frames[k]]) for k in range(n_windows)]
    return out


def tau_scan(
    tau_list: Sequence[int],
    fit: Callable[[int, int], object],
    test: TrajectorySet,
    seeds: Sequence[int] = (0,),
    horizon: float = 1.0,
) -> tuple[dict[str, float], dict[str, list[float]]]:
    """Train one model per (tau, seed) with ``fit(tau, seed)`` and test it.

    ``fit`` must give every tau the same budget. Returns the seed-averaged
    MSE per tau and the per-seed values.
    """
    mean, per_seed = {}, {}
    for tau in tau_list:
        vals = [eval_direct(fit(tau, s), test, [horizon])[_key(horizon)] for s in seeds]
        per_seed[str(tau)] = vals
        mean[str(tau)] = float(np.mean(vals))
    return mean, per_seed


# -- equivariance ------------------------------------------------------------------

def random_orthogonal(rng: np.random.Generator, reflect: bool | None = None) -> np.ndarray:
    """Haar-random element of O(3) from the QR decomposition of a Gaussian.

    ``reflect`` forces det = -1 (True) or +1 (False); None leaves it random.
    """
    a = rng.standard_normal((3, 3))
    qm, r = np.linalg.qr(a)
    qm = qm * np.sign(np.diag(r))
    if reflect is not None:
        want = -1.0 if reflect else 1.0
        if np.sign(np.linalg.det(qm)) != want:
            qm[:, 0] = -qm[:, 0]
    return qm


def _model_outputs(model, q, v, h) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """All position-like and velocity-like outputs of one forward pass."""
    with no_grad():
        if isinstance(model, PingoModel):
            path = model.path_arrays(q, v, GraphBatch.build(h))
            return path.positions, path.velocities
        if hasattr(model, "forward") and getattr(model, "kind", None) == "direct":
            shape = np.shape(q)
            x, vel, xs = model.forward(Tensor(q.reshape(-1, 3)), Tensor(v.reshape(-1, 3)), GraphBatch.build(h))
            return [p.data.reshape(shape) for p in xs], [vel.data.reshape(shape)]
        qn, vn = model.predict(q, v, h)
        return [qn], [vn]


def equivariance_audit(
    model, q: np.ndarray, v: np.ndarray, h: np.ndarray, n_transforms: int = 100, seed: int = 0
) -> dict:
    """Max relative deviation between transform-then-predict and predict-then-transform.

    Positions get ``x R^T + t`` and velocities ``v R^T``. Transform ``i``
    uses ``default_rng([seed, i])`` so any failure replays exactly.
    """
    q = np.asarray(q, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    base_q, base_v = _model_outputs(model, q, v, h)
    scale = max(max(np.max(np.abs(x)) for x in base_q + [q]), 1e-300)
    vscale = max(max(np.max(np.abs(x)) for x in base_v + [v]), 1e-300)
    devs = []
    for i in range(n_transforms):
        rng = np.random.default_rng([seed, i])
        rot = random_orthogonal(rng)
        shift = rng.standard_normal(3)
        tq, tv = _model_outputs(model, q @ rot.T + shift, v @ rot.T, h)
        dq = max(np.max(np.abs(a @ rot.T + shift - b)) for a, b in zip(base_q, tq)) / scale
        dv = max(np.max(np.abs(a @ rot.T - b)) for a, b in zip(base_v, tv)) / vscale
        devs.append(float(max(dq, dv)))
    return {
        "max_deviation": max(devs) if devs else 0.0,
        "n_transforms": n_transforms,
        "seed": seed,
        "worst_transform": int(np.argmax(devs)) if devs else None,
    }


# -- truncation order --------------------------------------------------------------

def _reference_states(q, v, h, kind, softening, strength, times) -> np.ndarray:
    """High-accuracy positions at ``times`` from an adaptive 8th-order solver."""
    shape = q.shape

    def rhs(_, y):
        qq = y[: q.size].reshape(shape)
        vv = y[q.size :]
        return np.concatenate([vv, pairwise_accel(qq, h, kind, softening, strength).ravel()])

    sol = solve_ivp(
        rhs, (0.0, float(max(times))), np.concatenate([q.ravel(), v.ravel()]),
        method="DOP853", t_eval=sorted(times), rtol=1e-12, atol=1e-12,
    )
    if not sol.success:
        raise RuntimeError(f"reference integration failed: {sol.message}")
    out = {}
    for t, y in zip(sol.t, sol.y.T):
        out[float(t)] = y[: q.size].reshape(shape)
    return out


def fit_slope(dts: Sequence[float], errors: Sequence[float]) -> float:
    """Least-squares slope of log(error) against log(dt)."""
    return float(np.polyfit(np.log(dts), np.log(errors), 1)[0])


def truncation_scan(
    q: np.ndarray,
    v: np.ndarray,
    h: np.ndarray,
    kind: str,
    dt_list: Sequence[float],
    softening: float = 0.0,
    strength: float = 1.0,
    horizon: float = 1.0,
) -> dict:
    """Empirical local and global error orders of symplectic Euler.

    The local error of one step is
    ``|q(t + dt) - q(t) - v(t) dt - f(q(t)) dt^2|``, the global error is
    ``|q_k - q(horizon)|`` after ``k = horizon / dt`` steps. Both are
    measured against a DOP853 reference solution and summarised by the
    median over the systems in ``q`` (shape (B, N, 3)); the median keeps a
    single close encounter, which is not yet in the asymptotic regime at
    coarse dt, from setting the slope.
    """
    if len(dt_list) < 3:
        raise ValueError("truncation_scan needs at least 3 step sizes to fit a slope")
    q = np.asarray(q, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    ref = _reference_states(q, v, h, kind, softening, strength, list(dt_list) + [horizon])
    a0 = pairwise_accel(q, h, kind, softening, strength)
    local, global_ = [], []
    for dt in dt_list:
        eps = ref[float(dt)] - q - v * dt - a0 * dt * dt
        local.append(float(np.median(np.linalg.norm(eps.reshape(len(q), -1), axis=1))))
        k = horizon / dt
        if abs(k - round(k)) > 1e-9:
            raise ValueError(f"dt {dt} does not divide the horizon {horizon}")
        qq, vv = q.copy(), v.copy()
        for _ in range(int(round(k))):
            qq, vv = symplectic_euler_update(qq, vv, pairwise_accel(qq, h, kind, softening, strength), dt)
        err = qq - ref[float(horizon)]
        global_.append(float(np.median(np.linalg.norm(err.reshape(len(q), -1), axis=1))))
    return {
        "dt": [float(d) for d in dt_list],
        "local_error": local,
        "global_error": global_,
        "local_slope": fit_slope(dt_list, local),
        "global_slope": fit_slope(dt_list, global_),
        "slope_tolerance": SLOPE_TOLERANCE,
    }
