"""On-disk trajectory datasets.

A dataset directory holds ``manifest.json`` plus one ``{split}.bin`` per
split. Each split file is the concatenation, in trajectory order, of::

    positions   float64 [n_frames][N][3]
    velocities  float64 [n_frames][N][3]
    attributes  float64 [N][d]

all little-endian, with ``n_frames = steps // sample_every + 1``.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .physics import (
    GenerationConfig,
    SystemState,
    Trajectory,
    complete_graph,
    edge_products,
    integrate,
    sample_initial,
)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
SPLITS = ("train", "valid", "test")
_SPLIT_STREAM = {"train": 0, "valid": 1, "test": 2}


@dataclass
class TrajectorySet:
    """Stacked trajectories of one split sharing N, d and frame spacing."""

    positions: np.ndarray  # (M, F, N, 3)
    velocities: np.ndarray  # (M, F, N, 3)
    attributes: np.ndarray  # (M, N, d)
    dt: float
    sample_every: int
    system_kind: str
    softening: float = 0.0
    strength: float = 1.0

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def n_frames(self) -> int:
        return self.positions.shape[1]

    @property
    def n_bodies(self) -> int:
        return self.positions.shape[2]

    @property
    def frame_dt(self) -> float:
        return self.dt * self.sample_every

    @property
    def edges(self) -> np.ndarray:
        return complete_graph(self.n_bodies)

    def edge_attr(self) -> np.ndarray:
        return edge_products(self.attributes, self.edges)

    def frames_for(self, duration: float) -> int:
        """Number of stored frames spanning ``duration`` time units."""
        k = duration / self.frame_dt
        if abs(k - round(k)) > 1e-9:
            raise ValueError(
                f"duration {duration} is not a multiple of the stored frame spacing {self.frame_dt}"
            )
        return int(round(k))

    def trajectory(self, m: int) -> Trajectory:
        return Trajectory(
            self.positions[m], self.velocities[m], self.attributes[m], self.dt, self.system_kind, self.sample_every
        )

    def state(self, m: int, frame: int = 0) -> SystemState:
        return SystemState(self.positions[m, frame], self.velocities[m, frame], self.attributes[m])

    def subset(self, idx) -> "TrajectorySet":
        return TrajectorySet(
            self.positions[idx], self.velocities[idx], self.attributes[idx], self.dt, self.sample_every,
            self.system_kind, self.softening, self.strength,
        )

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.positions, self.velocities, self.attributes):
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return h.hexdigest()[:16]


@dataclass
class Dataset:
    manifest: dict
    splits: dict[str, TrajectorySet]

    def __getitem__(self, split: str) -> TrajectorySet:
        return self.splits[split]


def _generate_split(config: GenerationConfig, split: str, count: int) -> tuple[TrajectorySet, int]:
    n = config.n_bodies
    steps = config.total_steps
    inits = []
    rngs = []
    for m in range(count):
        rng = np.random.default_rng([config.seed, _SPLIT_STREAM[split], m])
        rngs.append(rng)
        inits.append(sample_initial(config, rng, m))

    def run(states):
        q = np.stack([s.q for s in states])
        v = np.stack([s.v for s in states])
        h = np.stack([s.h for s in states])
        with np.errstate(over="ignore", invalid="ignore"):
            qs, vs = integrate(
                q, v, h, config.system, steps, config.dt, config.softening,
                config.interaction_strength, config.sample_every,
            )
        return qs.swapaxes(0, 1), vs.swapaxes(0, 1)  # (M, F, N, 3)

    pos, vel = run(inits)
    rejections = 0
    for _ in range(config.max_resamples):
        bad = ~(np.all(np.isfinite(pos), axis=(1, 2, 3)) & np.all(np.isfinite(vel), axis=(1, 2, 3)))
        with np.errstate(invalid="ignore"):
            bad |= np.nanmax(np.abs(pos), axis=(1, 2, 3)) > config.position_cap
        bad_idx = np.flatnonzero(bad)
        if bad_idx.size == 0:
            break
        rejections += bad_idx.size
        redo = [sample_initial(config, rngs[m], m) for m in bad_idx]
        for m, s in zip(bad_idx, redo):
            inits[m] = s
        p2, v2 = run(redo)
        pos[bad_idx] = p2
        vel[bad_idx] = v2
    else:
        raise RuntimeError(f"{split}: could not produce bounded trajectories in {config.max_resamples} resamples")
    if rejections:
        log.info("%s: rejected and resampled %d trajectories exceeding the position cap", split, rejections)
    attrs = np.stack([s.h for s in inits]) if inits else np.zeros((0, n, 1))
    ts = TrajectorySet(
        pos, vel, attrs, config.dt, config.sample_every, config.system,
        config.softening, config.interaction_strength,
    )
    return ts, rejections


def generate_dataset(config: GenerationConfig) -> Dataset:
    """Generate all three splits in memory."""
    splits = {}
    rejections = {}
    for split in SPLITS:
        count = getattr(config, f"n_{split}")
        splits[split], rejections[split] = _generate_split(config, split, count)
    d = splits["train"].attributes.shape[-1]
    manifest = {
        "format_version": FORMAT_VERSION,
        "system": config.system,
        "n_bodies": config.n_bodies,
        "d": int(d),
        "dt": config.dt,
        "steps": config.total_steps,
        "sample_every": config.sample_every,
        "n_frames": config.total_steps // config.sample_every + 1,
        "counts": {s: getattr(config, f"n_{s}") for s in SPLITS},
        "softening": config.softening,
        "strength": config.interaction_strength,
        "seed": config.seed,
        "position_cap": config.position_cap,
        "rejections": rejections,
    }
    return Dataset(manifest, splits)


def write_dataset(dataset: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "manifest.json").write_text(json.dumps(dataset.manifest, indent=2, sort_keys=True) + "\n")
        for split, ts in dataset.splits.items():
            with open(out / f"{split}.bin", "wb") as fh:
                for m in range(len(ts)):
                    for arr in (ts.positions[m], ts.velocities[m], ts.attributes[m]):
                        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    except OSError as exc:
        raise OSError(f"cannot write dataset to {out}: {exc}") from exc
    return out


def build_dataset(config: GenerationConfig, out_dir) -> Path:
    """Generate a dataset and write it to ``out_dir``."""
    return write_dataset(generate_dataset(config), out_dir)


def load_dataset(path) -> Dataset:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except OSError as exc:
        raise OSError(f"cannot read dataset manifest in {path}: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported dataset format {manifest.get('format_version')}")
    n, d, f = manifest["n_bodies"], manifest["d"], manifest["n_frames"]
    per_traj = 2 * f * n * 3 + n * d
    splits = {}
    for split in SPLITS:
        count = manifest["counts"][split]
        file = path / f"{split}.bin"
        try:
            flat = np.fromfile(file, dtype="<f8")
        except OSError as exc:
            raise OSError(f"cannot read {file}: {exc}") from exc
        if flat.size != count * per_traj:
            raise ValueError(f"{file}: expected {count * per_traj} values, found {flat.size}")
        rows = flat.reshape(count, per_traj).astype(np.float64)
        cut = f * n * 3
        pos = rows[:, :cut].reshape(count, f, n, 3)
        vel = rows[:, cut : 2 * cut].reshape(count, f, n, 3)
        attrs = rows[:, 2 * cut :].reshape(count, n, d)
        splits[split] = TrajectorySet(
            pos, vel, attrs, manifest["dt"], manifest["sample_every"], manifest["system"],
            manifest["softening"], manifest["strength"],
        )
    return Dataset(manifest, splits)


def config_to_dict(config: GenerationConfig) -> dict:
    return asdict(config)
