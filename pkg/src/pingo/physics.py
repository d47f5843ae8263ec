"""Ground-truth charged and gravitational N-body systems.

Both force laws are pairwise inverse-square with optional Plummer
softening. Integration is symplectic Euler: the velocity is kicked with
the current acceleration first, then the position drifts with the new
velocity.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

SYSTEM_KINDS = ("charged", "gravity")
DEFAULT_SOFTENING = {"charged": 0.01, "gravity": 0.1}


class SingularityError(FloatingPointError):
    """Two particles coincide while the softening length is zero."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


def complete_graph(n: int) -> np.ndarray:
    """Directed edges (i, j), i != j, grouped by receiver i."""
    i, j = np.nonzero(~np.eye(n, dtype=bool))
    return np.stack([i, j], axis=1).astype(np.int64)


def edge_products(h: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """a_ij = h_i * h_j on the first attribute column (charge or mass)."""
    h = np.asarray(h)
    return h[..., edges[:, 0], 0] * h[..., edges[:, 1], 0]


@dataclass
class SystemState:
    """One snapshot: positions, velocities, node attributes and the graph."""

    q: np.ndarray
    v: np.ndarray
    h: np.ndarray
    edges: np.ndarray = None
    edge_attr: np.ndarray = None

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        self.h = np.asarray(self.h, dtype=np.float64)
        if self.h.ndim == 1:
            self.h = self.h[:, None]
        if self.edges is None:
            self.edges = complete_graph(self.n_bodies)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if self.edge_attr is None:
            self.edge_attr = edge_products(self.h, self.edges)
        self.edge_attr = np.asarray(self.edge_attr, dtype=np.float64).reshape(-1)
        self.validate()

    @property
    def n_bodies(self) -> int:
        return self.q.shape[0]

    def validate(self) -> None:
        n = self.q.shape[0]
        if self.q.ndim != 2 or self.q.shape[1] != 3:
            raise ValueError(f"positions must be N x 3, got {self.q.shape}")
        if self.v.shape != self.q.shape:
            raise ValueError(f"velocities {self.v.shape} do not match positions {self.q.shape}")
        if self.h.shape[0] != n:
            raise ValueError(f"attributes {self.h.shape} do not match N={n}")
        if self.edge_attr.shape[0] != self.edges.shape[0]:
            raise ValueError("one edge attribute per edge is required")
        if len(self.edges) and np.any(self.edges[:, 0] == self.edges[:, 1]):
            raise ValueError("edge list contains self-loops")
        if len(self.edges) and (self.edges.min() < 0 or self.edges.max() >= n):
            raise ValueError("edge index out of range")
        for name in ("q", "v", "h", "edge_attr"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite entries in {name}")

    def replace(self, **changes) -> "SystemState":
        return replace(self, **changes)


@dataclass
class Trajectory:
    """Uniformly sampled ground-truth frames of one system.

    ``positions``/``velocities`` have shape (n_frames, N, 3); consecutive
    frames are ``dt * sample_every`` apart in time.
    """

    positions: np.ndarray
    velocities: np.ndarray
    h: np.ndarray
    dt: float = 0.001
    system_kind: str = "gravity"
    sample_every: int = 1
    edges: np.ndarray = None

    def __post_init__(self):
        if self.edges is None:
            self.edges = complete_graph(self.positions.shape[1])
        if self.positions.shape != self.velocities.shape or self.positions.ndim != 3:
            raise ValueError("positions and velocities must both be (frames, N, 3)")
        if len(self.positions) < 2:
            raise ValueError("a trajectory needs at least two frames")

    @property
    def frame_dt(self) -> float:
        return self.dt * self.sample_every

    def __len__(self) -> int:
        return len(self.positions)

    def state(self, k: int) -> SystemState:
        return SystemState(self.positions[k], self.velocities[k], self.h, self.edges)

    @property
    def states(self) -> list[SystemState]:
        return [self.state(k) for k in range(len(self))]

    def __iter__(self) -> Iterator[SystemState]:
        return iter(self.states)


@dataclass
class GenerationConfig:
    system: str = "gravity"
    n_bodies: int = 5
    n_train: int = 100
    n_valid: int = 50
    n_test: int = 50
    total_steps: int = 1000
    seed: int = 0
    softening: float | None = None
    interaction_strength: float = 1.0
    dt: float = 0.001
    sample_every: int = 1
    position_cap: float = 1e3
    max_resamples: int = 1000
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.system not in SYSTEM_KINDS:
            raise ValueError(f"unknown system {self.system!r}; choose from {SYSTEM_KINDS}")
        if self.softening is None:
            self.softening = DEFAULT_SOFTENING[self.system]
        for name in ("n_bodies", "n_train", "n_valid", "n_test", "total_steps", "sample_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.softening < 0:
            raise ValueError(f"softening must be non-negative, got {self.softening}")
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.total_steps % self.sample_every:
            raise ValueError("total_steps must be a multiple of sample_every")


# -- initial conditions -----------------------------------------------------

def _random_directions(rng: np.random.Generator, n: int) -> np.ndarray:
    d = rng.normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def charge_imbalances(n: int) -> list[int]:
    """Achievable |#positive - #negative| values for n charges."""
    return list(range(n % 2, n + 1, 2))


def sample_charges(rng: np.random.Generator, n: int, imbalance: int | None = None) -> np.ndarray:
    if imbalance is None:
        imbalance = int(rng.choice(charge_imbalances(n)))
    if imbalance not in charge_imbalances(n):
        raise ValueError(f"charge imbalance {imbalance} is not achievable with {n} particles")
    n_major = (n + imbalance) // 2
    sign = rng.choice([-1.0, 1.0])
    charges = np.full(n, -sign)
    charges[:n_major] = sign
    return rng.permutation(charges)


def sample_initial_charged(
    config: GenerationConfig, rng: np.random.Generator, imbalance: int | None = None
) -> SystemState:
    n = config.n_bodies
    if n < 2:
        raise ValueError("charged systems need at least two particles")
    q = rng.normal(0.0, 0.5, size=(n, 3))
    v = 0.5 * _random_directions(rng, n)
    charges = sample_charges(rng, n, imbalance)
    return SystemState(q, v, charges[:, None])


def sample_initial_gravity(config: GenerationConfig, rng: np.random.Generator) -> SystemState:
    n = config.n_bodies
    if n < 2:
        raise ValueError("gravity systems need at least two particles")
    q = rng.normal(0.0, 1.0, size=(n, 3))
    v = _random_directions(rng, n)
    return SystemState(q, v, np.ones((n, 1)))


def sample_initial(config: GenerationConfig, rng: np.random.Generator, index: int = 0) -> SystemState:
    if config.system == "charged":
        types = charge_imbalances(config.n_bodies)
        return sample_initial_charged(config, rng, types[index % len(types)])
    return sample_initial_gravity(config, rng)


# -- force law ------------------------------------------------------------------

def pairwise_accel(
    q: np.ndarray,
    h: np.ndarray,
    kind: str,
    softening: float = 0.0,
    strength: float = 1.0,
) -> np.ndarray:
    """Accelerations for positions ``q`` (..., N, 3) and attributes ``h`` (..., N, d).

    Gravity uses h[..., 0] as mass; the charged system uses it as charge
    with unit masses. The sum over partners runs in index order so that a
    batched call is bit-identical to per-system calls.
    """
    if kind not in SYSTEM_KINDS:
        raise ValueError(f"unknown system {kind!r}")
    q = np.asarray(q, dtype=np.float64)
    attr = np.asarray(h, dtype=np.float64)[..., 0]
    n = q.shape[-2]
    diff = q[..., None, :, :] - q[..., :, None, :]  # [i, j] = q_j - q_i
    r2 = np.sum(diff * diff, axis=-1) + softening * softening
    off = ~np.eye(n, dtype=bool)
    if softening == 0.0 and np.any(r2[..., off] == 0.0):
        raise SingularityError("coincident particles with zero softening")
    r2 = np.where(off, r2, 1.0)
    inv_r3 = np.where(off, r2 ** -1.5, 0.0)
    if kind == "gravity":
        coeff = attr[..., None, :] * inv_r3  # m_j / r^3
    else:
        coeff = -(attr[..., :, None] * attr[..., None, :]) * inv_r3  # like charges repel
    terms = coeff[..., None] * diff
    acc = np.zeros_like(q)
    for j in range(n):
        acc = acc + terms[..., :, j, :]
    return strength * acc


def true_accel(state: SystemState, kind: str, softening: float = 0.0, strength: float = 1.0) -> np.ndarray:
    return pairwise_accel(state.q, state.h, kind, softening, strength)


def symplectic_euler_update(q, v, accel, dt):
    """Kick then drift; returns the new (q, v)."""
    v_new = v + accel * dt
    return q + v_new * dt, v_new


def symplectic_euler_step(state: SystemState, accel: np.ndarray, dt: float) -> SystemState:
    if dt < 0:
        raise ValueError(f"dt must be non-negative, got {dt}")
    q, v = symplectic_euler_update(state.q, state.v, np.asarray(accel), dt)
    return state.replace(q=q, v=v)


def integrate(
    q: np.ndarray,
    v: np.ndarray,
    h: np.ndarray,
    kind: str,
    steps: int,
    dt: float,
    softening: float = 0.0,
    strength: float = 1.0,
    sample_every: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """Integrate (possibly batched) systems; returns sampled frames.

    Output arrays have shape (steps // sample_every + 1, ..., N, 3).
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    if steps % sample_every:
        raise ValueError("steps must be a multiple of sample_every")
    q = np.array(q, dtype=np.float64)
    v = np.array(v, dtype=np.float64)
    qs, vs = [q], [v]
    for step in range(steps):
        try:
            a = pairwise_accel(q, h, kind, softening, strength)
        except SingularityError as exc:
            raise SingularityError(f"{exc} at step {step}", step=step) from None
        q, v = symplectic_euler_update(q, v, a, dt)
        if (step + 1) % sample_every == 0:
            qs.append(q)
            vs.append(v)
    return np.stack(qs), np.stack(vs)


def generate_trajectory(
    init: SystemState,
    kind: str,
    steps: int,
    dt: float = 0.001,
    softening: float = 0.0,
    strength: float = 1.0,
    sample_every: int = 1,
) -> Trajectory:
    qs, vs = integrate(init.q, init.v, init.h, kind, steps, dt, softening, strength, sample_every)
    if not (np.all(np.isfinite(qs)) and np.all(np.isfinite(vs))):
        bad = int(np.argmin(np.all(np.isfinite(qs.reshape(len(qs), -1)), axis=1)))
        raise FloatingPointError(f"non-finite state at frame {bad}")
    return Trajectory(qs, vs, init.h, dt, kind, sample_every, init.edges)
