"""Mini-batch training on the position loss with Adam.

Any model exposing ``parameters()``, ``predict_positions(batch)``,
``state_dict()``/``load_state_dict()`` and ``config_dict()`` can be
trained; :class:`~pingo.integrator.PingoModel` and
:class:`~pingo.egnn.DirectEgnn` both do.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import TrajectorySet
from .graph import GraphBatch
from .optim import AdamState, adam_step
from .tensor import ShapeError, Tensor, no_grad

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    """Loss became non-finite; carries where it happened and the last good weights."""

    def __init__(self, epoch: int, batch: int, last_good: dict):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
        self.last_good = last_good


@dataclass
class TrainConfig:
    batch_size: int = 100
    epochs: int = 1000
    lr: float = 5e-4
    weight_decay: float = 1e-10
    seed: int = 0
    patience: int = 50

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SampleBatch:
    q: np.ndarray  # (B, N, 3) at t0
    v: np.ndarray
    h: np.ndarray  # (B, N, d)
    target: np.ndarray  # (B, N, 3) positions at t0 + T
    target_v: np.ndarray | None = None
    edge_attr: np.ndarray | None = None
    _graph: GraphBatch | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return self.q.shape[0]

    @property
    def graph(self) -> GraphBatch:
        if self._graph is None:
            self._graph = GraphBatch.build(self.h, edge_attr=self.edge_attr)
        return self._graph

    def take(self, idx) -> "SampleBatch":
        return SampleBatch(
            self.q[idx],
            self.v[idx],
            self.h[idx],
            self.target[idx],
            None if self.target_v is None else self.target_v[idx],
            None if self.edge_attr is None else self.edge_attr[idx],
        )


def make_samples(ts: TrajectorySet, horizon: float = 1.0, start_frame: int = 0) -> SampleBatch:
    """One (state at t0, positions at t0 + horizon) pair per trajectory."""
    k = ts.frames_for(horizon)
    end = start_frame + k
    if end >= ts.n_frames:
        raise ValueError(
            f"horizon {horizon} from frame {start_frame} needs frame {end}, dataset has {ts.n_frames}"
        )
    return SampleBatch(
        ts.positions[:, start_frame],
        ts.velocities[:, start_frame],
        ts.attributes,
        ts.positions[:, end],
        ts.velocities[:, end],
    )


def position_loss(pred: Tensor, target) -> Tensor:
    """Mean squared position error per particle coordinate."""
    target = np.asarray(target, dtype=np.float64)
    if pred.size != target.size or pred.shape[-1] != target.shape[-1]:
        raise ShapeError(f"position_loss: prediction {pred.shape} vs target {target.shape}")
    diff = pred - target.reshape(pred.shape)
    return (diff * diff).mean()


def evaluate_mse(model, samples: SampleBatch, batch_size: int = 500) -> float:
    total = 0.0
    with no_grad():
        for start in range(0, len(samples), batch_size):
            batch = samples.take(slice(start, start + batch_size))
            pred = model.predict_positions(batch)
            total += float(np.sum((pred.data.reshape(batch.target.shape) - batch.target) ** 2))
    return total / samples.target.size


@dataclass
class TrainResult:
    model: object
    log: list[dict]
    best_epoch: int
    best_valid_mse: float


def _save_state(path, model, adam: AdamState, meta: dict, best_state: dict) -> None:
    arrays = {}
    names = list(model.state_dict().keys())
    for name, a in model.state_dict().items():
        arrays[f"param/{name}"] = a
    for name, a in best_state.items():
        arrays[f"best/{name}"] = a
    if adam.m:
        for name, m, v in zip(names, adam.m, adam.v):
            arrays[f"adam_m/{name}"] = m
            arrays[f"adam_v/{name}"] = v
    meta = dict(meta)
    meta["model_config"] = model.config_dict()
    meta["adam"] = {
        "lr": adam.lr,
        "beta1": adam.beta1,
        "beta2": adam.beta2,
        "eps": adam.eps,
        "weight_decay": adam.weight_decay,
        "step_count": adam.step_count,
    }
    save_checkpoint(path, arrays, meta)


def load_training_state(path) -> tuple[dict, dict]:
    """Split a training checkpoint into named array groups and metadata."""
    arrays, meta = load_checkpoint(path)
    groups: dict[str, dict] = {"param": {}, "best": {}, "adam_m": {}, "adam_v": {}}
    for key, a in arrays.items():
        prefix, _, name = key.partition("/")
        groups.setdefault(prefix, {})[name] = a
    return groups, meta


def train(
    model,
    train_set: SampleBatch,
    valid_set: SampleBatch,
    config: TrainConfig,
    log_path=None,
    checkpoint_dir=None,
    resume_from=None,
) -> TrainResult:
    """Fit ``model`` in place and leave it holding the best-validation weights.

    The shuffle of epoch e depends only on (seed, e), so a run resumed
    from a checkpoint reproduces the uninterrupted run exactly.
    """
    params = model.parameters()
    adam = AdamState(lr=config.lr, weight_decay=config.weight_decay)
    start_epoch = 0
    best_valid = np.inf
    best_epoch = -1
    bad_epochs = 0
    best_state = model.state_dict()

    if resume_from is not None:
        groups, meta = load_training_state(resume_from)
        model.load_state_dict(groups["param"])
        names = list(model.state_dict().keys())
        a = meta["adam"]
        adam = AdamState(a["lr"], a["beta1"], a["beta2"], a["eps"], a["weight_decay"], a["step_count"])
        if groups["adam_m"]:
            adam.m = [groups["adam_m"][n].copy() for n in names]
            adam.v = [groups["adam_v"][n].copy() for n in names]
        adam.lr = config.lr
        adam.weight_decay = config.weight_decay
        start_epoch = meta["next_epoch"]
        best_valid = meta["best_valid_mse"] if meta["best_valid_mse"] is not None else np.inf
        best_epoch = meta["best_epoch"]
        bad_epochs = meta["bad_epochs"]
        best_state = groups["best"] or model.state_dict()

    history: list[dict] = []
    log_file = None
    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_file = open(log_path, "a" if resume_from is not None else "w")

    n = len(train_set)
    try:
        for epoch in range(start_epoch, config.epochs):
            if bad_epochs >= config.patience:
                break
            t0 = time.perf_counter()
            rng = np.random.default_rng([config.seed, epoch])
            perm = rng.permutation(n)
            sq_err = 0.0
            for bi, start in enumerate(range(0, n, config.batch_size)):
                batch = train_set.take(perm[start : start + config.batch_size])
                loss = position_loss(model.predict_positions(batch), batch.target)
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingDivergedError(epoch, bi, best_state)
                loss.backward()
                if params:
                    adam_step(params, adam)
                sq_err += value * len(batch)
            train_mse = sq_err / n
            valid_mse = evaluate_mse(model, valid_set)
            record = {
                "epoch": epoch,
                "train_mse": train_mse,
                "valid_mse": valid_mse,
                "wall_time_s": time.perf_counter() - t0,
            }
            history.append(record)
            if log_file is not None:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
            if valid_mse < best_valid:
                best_valid, best_epoch, bad_epochs = valid_mse, epoch, 0
                best_state = model.state_dict()
            else:
                bad_epochs += 1
            log.debug("epoch %d train %.6g valid %.6g", epoch, train_mse, valid_mse)
            if checkpoint_dir is not None:
                meta = {
                    "next_epoch": epoch + 1,
                    "best_valid_mse": best_valid if np.isfinite(best_valid) else None,
                    "best_epoch": best_epoch,
                    "bad_epochs": bad_epochs,
                    "train_config": config.to_dict(),
                }
                _save_state(Path(checkpoint_dir) / "last.ckpt", model, adam, meta, best_state)
    finally:
        if log_file is not None:
            log_file.close()

    model.load_state_dict(best_state)
    if checkpoint_dir is not None:
        save_model(Path(checkpoint_dir) / "best.ckpt", model, {"best_epoch": best_epoch, "best_valid_mse": best_valid})
    return TrainResult(model, history, best_epoch, float(best_valid))


def save_model(path, model, extra: dict | None = None) -> Path:
    meta = {"model_config": model.config_dict(), **(extra or {})}
    return save_checkpoint(path, {f"param/{k}": v for k, v in model.state_dict().items()}, meta)


def load_model(path):
    """Rebuild a PINGO or direct-mapping model from a checkpoint."""
    from .egnn import DirectEgnn, DirectEgnnConfig, EgnnBackbone, EgnnConfig
    from .integrator import IntegratorConfig, PingoModel

    groups, meta = load_training_state(path)
    cfg = meta["model_config"]
    if cfg["model"] == "pingo":
        model = PingoModel(
            EgnnBackbone(EgnnConfig.from_dict(cfg["egnn"])),
            IntegratorConfig(**cfg["integrator"]),
            cfg["variant"],
        )
    elif cfg["model"] == "direct":
        model = DirectEgnn(DirectEgnnConfig.from_dict(cfg["direct"]))
    else:
        raise ValueError(f"{path}: unknown model kind {cfg['model']!r}")
    model.load_state_dict(groups["param"])
    return model, meta
