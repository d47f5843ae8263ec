"""PINGO: a learned acceleration field integrated with symplectic Euler.

Given (q, v) at t0, ``tau`` steps of size ``dt = T / tau`` produce

    a_k     = f_theta(q_k)
    v_{k+1} = v_k + a_k dt
    q_{k+1} = q_k + v_{k+1} dt

with the same parameters at every step. The first-order variant instead
uses the network output as the velocity: ``v_{k+1} = g_theta(q_k)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .egnn import EgnnBackbone, EgnnConfig
from .graph import GraphBatch
from .physics import SystemState, pairwise_accel
from .tensor import Tensor

VARIANTS = ("second_order", "first_order")
DIVERGENCE_CAP = 1e6


class IntegrationError(FloatingPointError):
    def __init__(self, message: str, iteration: int):
        super().__init__(message)
        self.iteration = iteration


@dataclass
class IntegratorConfig:
    tau: int = 8
    horizon: float = 1.0

    def __post_init__(self):
        if int(self.tau) != self.tau or self.tau < 1:
            raise ValueError(f"tau must be a positive integer, got {self.tau}")
        if self.horizon <= 0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        self.tau = int(self.tau)

    @property
    def dt(self) -> float:
        return self.horizon / self.tau

    def to_dict(self) -> dict:
        return {"tau": self.tau, "horizon": self.horizon}


class ForceFieldBackbone:
    """Known force law as a (parameter-free) backbone, used as an oracle."""

    def __init__(self, kind: str, softening: float = 0.0, strength: float = 1.0):
        self.kind = kind
        self.softening = softening
        self.strength = strength

    def parameters(self) -> list[Tensor]:
        return []

    def accel(self, q: Tensor, graph: GraphBatch) -> Tensor:
        b, n = graph.n_systems, graph.n_bodies
        a = pairwise_accel(
            q.data.reshape(b, n, 3), graph.h.reshape(b, n, -1), self.kind, self.softening, self.strength
        )
        return Tensor(a.reshape(b * n, 3))

    __call__ = accel


class ZeroBackbone:
    def parameters(self) -> list[Tensor]:
        return []

    def accel(self, q: Tensor, graph: GraphBatch) -> Tensor:
        return Tensor(np.zeros(q.shape))

    __call__ = accel


@dataclass
class PredictedPath:
    """Snapshots (q_k, v_k) at t0 + k dt for k = 0..tau, each (N, 3) or (B, N, 3)."""

    positions: list[np.ndarray]
    velocities: list[np.ndarray]
    dt: float

    @property
    def tau(self) -> int:
        return len(self.positions) - 1

    @property
    def states(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return list(zip(self.positions, self.velocities))

    def __len__(self) -> int:
        return len(self.positions)

    def final(self) -> tuple[np.ndarray, np.ndarray]:
        return self.positions[-1], self.velocities[-1]

    def to_csv(self, path, window: int = 0, mode: str = "w") -> Path:
        return write_path_csv(path, [self], start_window=window, mode=mode)


def write_path_csv(path, paths: list[PredictedPath], start_window: int = 0, mode: str = "w") -> Path:
    """Columns: window, step, particle, qx, qy, qz, vx, vy, vz."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, mode, newline="") as fh:
        w = csv.writer(fh)
        if mode == "w":
            w.writerow(["window", "step", "particle", "qx", "qy", "qz", "vx", "vy", "vz"])
        for wi, p in enumerate(paths, start=start_window):
            for step, (q, v) in enumerate(zip(p.positions, p.velocities)):
                for i in range(q.shape[-2]):
                    w.writerow([wi, step, i, *map(repr, q[i].tolist()), *map(repr, v[i].tolist())])
    return path


class PingoModel:
    """Backbone + integrator settings.

    ``backbone`` is anything with ``accel(q, graph) -> Tensor`` and
    ``parameters()``; normally an :class:`EgnnBackbone`.
    """

    kind = "pingo"
    velocity_source = "model"

    def __init__(self, backbone, integrator: IntegratorConfig | None = None, variant: str = "second_order"):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
        self.backbone = backbone
        self.integrator = integrator or IntegratorConfig()
        self.variant = variant

    @classmethod
    def create(
        cls,
        egnn: EgnnConfig | None = None,
        integrator: IntegratorConfig | None = None,
        variant: str = "second_order",
        seed: int = 0,
    ) -> "PingoModel":
        return cls(EgnnBackbone(egnn or EgnnConfig(), seed), integrator, variant)

    # -- parameters -----------------------------------------------------------
    def parameters(self) -> list[Tensor]:
        return self.backbone.parameters()

    def state_dict(self) -> dict[str, np.ndarray]:
        return self.backbone.state_dict()

    def load_state_dict(self, arrays) -> None:
        self.backbone.load_state_dict(arrays)

    def config_dict(self) -> dict:
        return {
            "model": self.kind,
            "variant": self.variant,
            "integrator": self.integrator.to_dict(),
            "egnn": self.backbone.config.to_dict(),
        }

    # -- integration ----------------------------------------------------------
    def _step_fn(self, graph: GraphBatch):
        persist = isinstance(self.backbone, EgnnBackbone) and self.backbone.config.persist_h
        carry = {"h": None}

        def field_at(q: Tensor) -> Tensor:
            if persist:
                out, carry["h"] = self.backbone.forward(q, graph, carry["h"])
                return out
            return self.backbone.accel(q, graph)

        return field_at

    def integrate(self, q: Tensor, v: Tensor, graph: GraphBatch, tau: int | None = None, dt: float | None = None):
        """Differentiable integration over flattened nodes (B*N, 3).

        Returns the lists of position and velocity tensors at every step.
        """
        tau = self.integrator.tau if tau is None else tau
        dt = self.integrator.dt if dt is None else dt
        field_at = self._step_fn(graph)
        qs, vs = [q], [v]
        for k in range(tau):
            out = field_at(q)
            if self.variant == "second_order":
                v = v + out * dt
            else:
                v = out
            q = q + v * dt
            if not (np.all(np.isfinite(q.data)) and np.all(np.isfinite(v.data))):
                raise IntegrationError(f"non-finite state after integrator iteration {k}", k)
            qs.append(q)
            vs.append(v)
        return qs, vs

    def predict_positions(self, batch) -> Tensor:
        """Positions at t0 + T for a :class:`~pingo.training.SampleBatch`."""
        qs, _ = self.integrate(Tensor(batch.q.reshape(-1, 3)), Tensor(batch.v.reshape(-1, 3)), batch.graph)
        return qs[-1]

    def path_arrays(self, q, v, graph: GraphBatch, tau: int | None = None) -> PredictedPath:
        """Non-differentiable path for batched arrays q, v of shape (B, N, 3)."""
        q = np.asarray(q, dtype=np.float64)
        shape = q.shape
        qs, vs = self.integrate(Tensor(q.reshape(-1, 3)), Tensor(np.asarray(v).reshape(-1, 3)), graph, tau)
        return PredictedPath(
            [x.data.reshape(shape) for x in qs], [x.data.reshape(shape) for x in vs], self.integrator.dt
        )

    def predict(self, q, v, h, horizon: float | None = None, edge_attr=None) -> tuple[np.ndarray, np.ndarray]:
        """Predict (q, v) after ``horizon`` for batched arrays (B, N, 3).

        Horizons other than the training one keep dt fixed and scale the
        number of steps, so ``horizon / dt`` must be an integer.
        """
        tau = self.steps_for(horizon)
        path = self.path_arrays(q, v, GraphBatch.build(h, edge_attr=edge_attr), tau)
        return path.final()

    def steps_for(self, horizon: float | None) -> int:
        if horizon is None:
            return self.integrator.tau
        k = horizon / self.integrator.dt
        if abs(k - round(k)) > 1e-9 or round(k) < 1:
            raise ValueError(
                f"horizon {horizon} is not a positive multiple of the integrator step {self.integrator.dt}"
            )
        return int(round(k))

    def predict_intermediate(self, q, v, h, fractions, edge_attr=None) -> dict:
        path = self.path_arrays(q, v, GraphBatch.build(h, edge_attr=edge_attr))
        return {f: intermediate_at(path, f)[0] for f in fractions}


def pingo_forward(state: SystemState, model: PingoModel) -> PredictedPath:
    """Integrate one state over the model's horizon, keeping every snapshot."""
    graph = GraphBatch.from_states([state])
    qs, vs = model.integrate(Tensor(state.q), Tensor(state.v), graph)
    path = PredictedPath([x.data.copy() for x in qs], [x.data.copy() for x in vs], model.integrator.dt)
    path.positions[0] = state.q.copy()
    path.velocities[0] = state.v.copy()
    return path


def intermediate_at(path: PredictedPath, fraction) -> tuple[np.ndarray, np.ndarray]:
    """Stored snapshot at ``fraction`` of the horizon (no re-integration)."""
    frac = Fraction(fraction).limit_denominator(10**6)
    idx = frac * path.tau
    if idx.denominator != 1 or not 0 <= idx <= path.tau:
        raise ValueError(
            f"fraction {fraction} does not land on a stored step of a tau={path.tau} path; "
            "choose tau divisible by the fraction's denominator"
        )
    k = int(idx)
    return path.positions[k], path.velocities[k]


@dataclass
class RolloutResult:
    """Window-boundary states; ``positions[k]`` is at t0 + k T (k=0 is the input)."""

    positions: list[np.ndarray]
    velocities: list[np.ndarray]
    diverged: bool = False
    diverged_at: int | None = None
    paths: list[PredictedPath] = field(default_factory=list)


def _predict_guarded(predict, q, v, h):
    """Batched prediction; if the batch fails, retry system by system so
    only the offending systems come back as NaN."""
    try:
        return predict(q, v, h)
    except FloatingPointError:
        pass
    qa, va = np.full_like(q, np.nan), np.full_like(v, np.nan)
    for i in range(q.shape[0]):
        try:
            qa[i : i + 1], va[i : i + 1] = predict(q[i : i + 1], v[i : i + 1], h[i : i + 1])
        except FloatingPointError:
            pass
    return qa, va


def rollout_arrays(
    predict,
    q0: np.ndarray,
    v0: np.ndarray,
    h: np.ndarray,
    n_windows: int,
    horizon: float = 1.0,
    velocity_source: str = "model",
    cap: float = DIVERGENCE_CAP,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Roll a batched predictor ``predict(q, v, h) -> (q', v')`` forward.

    ``h`` holds the (B, N, d) node attributes; the predictor only ever
    sees the rows of systems that have not diverged yet.

    With ``velocity_source="finite_difference"`` the next window's velocity
    input is ``(q_k - q_{k-1}) / horizon`` instead of the model's own.
    Returns positions and velocities of shape (n_windows + 1, B, N, 3)
    and, per system, the first window whose state diverged (-1 if none).
    Diverged systems are frozen at NaN from that window on.
    """
    if n_windows < 1:
        raise ValueError("n_windows must be at least 1")
    if velocity_source not in ("model", "finite_difference"):
        raise ValueError(f"unknown velocity source {velocity_source!r}")
    q = np.array(q0, dtype=np.float64)
    v = np.array(v0, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    b = q.shape[0]
    qs, vs = [q.copy()], [v.copy()]
    diverged_at = np.full(b, -1)
    alive = np.ones(b, dtype=bool)
    for k in range(1, n_windows + 1):
        q_new = np.full_like(q, np.nan)
        v_new = np.full_like(v, np.nan)
        if alive.any():
            with np.errstate(all="ignore"):
                qa, va = _predict_guarded(predict, q[alive], v[alive], h[alive])
            q_new[alive], v_new[alive] = qa, va
            if velocity_source == "finite_difference":
                v_new[alive] = (qa - q[alive]) / horizon
        with np.errstate(invalid="ignore"):
            bad = alive & ~(np.all(np.abs(q_new) <= cap, axis=(1, 2)) & np.all(np.isfinite(v_new), axis=(1, 2)))
        diverged_at[bad] = k
        alive &= ~bad
        q_new[~alive] = np.nan
        v_new[~alive] = np.nan
        q, v = q_new, v_new
        qs.append(q.copy())
        vs.append(v.copy())
    return np.stack(qs), np.stack(vs), diverged_at


def rollout(
    state: SystemState,
    model: PingoModel,
    n_windows: int,
    cap: float = DIVERGENCE_CAP,
    keep_paths: bool = False,
) -> RolloutResult:
    """Chain ``n_windows`` PINGO windows, feeding each prediction back in."""
    if n_windows < 1:
        raise ValueError("n_windows must be at least 1")
    result = RolloutResult([state.q.copy()], [state.v.copy()])
    current = state
    for k in range(1, n_windows + 1):
        try:
            path = pingo_forward(current, model)
        except IntegrationError:
            result.diverged, result.diverged_at = True, k
            break
        q, v = path.final()
        if np.max(np.abs(q)) > cap or not np.all(np.isfinite(v)):
            result.diverged, result.diverged_at = True, k
            break
        result.positions.append(q)
        result.velocities.append(v)
        if keep_paths:
            result.paths.append(path)
        current = current.replace(q=q, v=v)
    return result
