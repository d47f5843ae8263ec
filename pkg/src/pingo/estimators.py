"""scikit-learn style estimators around the PINGO model and its baselines.

All estimators share one array layout. ``X`` has shape (B, N, 6 + d) and
holds, per particle, position (3), velocity (3) and d node attributes;
``y`` has shape (B, N, 3) and holds positions one horizon later. Edge
attributes are the products of the first node attribute, as in the
generated datasets.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .dataset import TrajectorySet
from .egnn import DirectEgnn, DirectEgnnConfig, EgnnConfig
from .evaluation import LinearExtrapolation
from .integrator import IntegratorConfig, PingoModel
from .training import SampleBatch, TrainConfig, evaluate_mse, train


# -- input validation ------------------------------------------------------------

def check_system_array(X, name: str = "X") -> np.ndarray:
    """Validate a (B, N, 6 + d) state array and return it as float64.

    A single system of shape (N, 6 + d) is promoted to a batch of one.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ValueError(f"{name} must have shape (B, N, 6 + d), got {X.shape}")
    if X.shape[-1] < 7:
        raise ValueError(f"{name} needs at least 7 features per particle (q, v, one attribute), got {X.shape[-1]}")
    if X.shape[1] < 1 or X.shape[0] < 1:
        raise ValueError(f"{name} is empty: shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains NaN or infinite values")
    return X


def check_targets(y, X: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 2 and X.shape[0] == 1:
        y = y[None]
    if y.shape != X.shape[:2] + (3,):
        raise ValueError(f"y must have shape {X.shape[:2] + (3,)}, got {y.shape}")
    if not np.all(np.isfinite(y)):
        raise ValueError("y contains NaN or infinite values")
    return y


def split_state(X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return X[..., 0:3], X[..., 3:6], X[..., 6:]


def system_arrays(ts: TrajectorySet, horizon: float = 1.0, start_frame: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """(X, y) pairs from a trajectory set: the state at ``start_frame``
    and positions ``horizon`` later."""
    k = start_frame + ts.frames_for(horizon)
    if k >= ts.n_frames:
        raise ValueError(f"horizon {horizon} from frame {start_frame} runs past the stored frames")
    X = np.concatenate([ts.positions[:, start_frame], ts.velocities[:, start_frame], ts.attributes], axis=-1)
    return X, ts.positions[:, k].copy()


def _samples(X: np.ndarray, y: np.ndarray) -> SampleBatch:
    q, v, h = split_state(X)
    return SampleBatch(q.copy(), v.copy(), h.copy(), y)


def _neg_mse(pred: np.ndarray, y: np.ndarray) -> float:
    return -float(np.mean((pred - y) ** 2))


# -- estimators ------------------------------------------------------------------

class _TrainedRegressor(RegressorMixin, BaseEstimator):
    """Shared fit/predict plumbing; subclasses build the model."""

    def _build(self, d_node: int):
        raise NotImplementedError

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            epochs=self.epochs,
            lr=self.lr,
            weight_decay=self.weight_decay,
            seed=self.random_state,
            patience=self.patience,
        )

    def fit(self, X, y, eval_set=None, log_path=None, checkpoint_dir=None):
        """Train on (X, y).

        Parameters
        ----------
        X : array of shape (B, N, 6 + d)
        y : array of shape (B, N, 3)
        eval_set : tuple (X_valid, y_valid), optional
            Used for model selection and early stopping. Without it the
            training data doubles as the validation set.
        log_path, checkpoint_dir : path, optional
            Passed to :func:`pingo.training.train`.

        Returns
        -------
        self
        """
        X = check_system_array(X)
        y = check_targets(y, X)
        if eval_set is not None:
            Xv = check_system_array(eval_set[0], "X_valid")
            yv = check_targets(eval_set[1], Xv)
        else:
            Xv, yv = X, y
        if Xv.shape[1:] != X.shape[1:]:
            raise ValueError(f"validation systems {Xv.shape[1:]} do not match training systems {X.shape[1:]}")
        self.n_bodies_ = X.shape[1]
        self.n_node_features_ = X.shape[2] - 6
        self.model_ = self._build(self.n_node_features_)
        result = train(
            self.model_, _samples(X, y), _samples(Xv, yv), self._train_config(),
            log_path=log_path, checkpoint_dir=checkpoint_dir,
        )
        self.history_ = result.log
        self.best_epoch_ = result.best_epoch
        self.best_valid_mse_ = result.best_valid_mse
        return self

    def _check_X(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_system_array(X)
        if X.shape[2] - 6 != self.n_node_features_:
            raise ValueError(
                f"X has {X.shape[2] - 6} node attributes, the estimator was fitted with {self.n_node_features_}"
            )
        return X

    def predict(self, X) -> np.ndarray:
        """Positions one horizon after each state in ``X``, shape (B, N, 3)."""
        X = self._check_X(X)
        q, v, h = split_state(X)
        return self.model_.predict(q, v, h)[0]

    def score(self, X, y, sample_weight=None) -> float:
        """Negative mean squared position error (higher is better)."""
        X = self._check_X(X)
        y = check_targets(y, X)
        return -evaluate_mse(self.model_, _samples(X, y))


class PingoRegressor(_TrainedRegressor):
    """EGNN acceleration field integrated with ``tau`` symplectic Euler steps.

    Parameters
    ----------
    n_layers, hidden_dim : int
        Depth and width of the EGNN backbone.
    tau : int
        Integrator steps per horizon.
    horizon : float
        Time between input state and target.
    variant : {"second_order", "first_order"}
    normalize_diff : bool
        Use unit edge vectors in the acceleration output.
    accel_range : float or None
        Bound on each edge's acceleration coefficient.
    lr, epochs, batch_size, weight_decay, patience : training settings
    random_state : int
        Seeds weight initialisation and batch shuffling.
    """

    def __init__(
        self,
        n_layers: int = 4,
        hidden_dim: int = 64,
        tau: int = 8,
        horizon: float = 1.0,
        variant: str = "second_order",
        normalize_diff: bool = True,
        accel_range: float | None = 10.0,
        lr: float = 3e-3,
        epochs: int = 300,
        batch_size: int = 100,
        weight_decay: float = 1e-10,
        patience: int = 50,
        random_state: int = 0,
    ):
        self.n_layers = n_layers
        self.hidden_dim = hidden_dim
        self.tau = tau
        self.horizon = horizon
        self.variant = variant
        self.normalize_diff = normalize_diff
        self.accel_range = accel_range
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.patience = patience
        self.random_state = random_state

    def _build(self, d_node: int) -> PingoModel:
        egnn = EgnnConfig(
            n_layers=self.n_layers,
            hidden_dim=self.hidden_dim,
            d_node=d_node,
            normalize_diff=self.normalize_diff,
            accel_range=self.accel_range,
        )
        return PingoModel.create(egnn, IntegratorConfig(self.tau, self.horizon), self.variant, self.random_state)

    def predict_path(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Positions and velocities at every integrator step, each (tau + 1, B, N, 3)."""
        X = self._check_X(X)
        q, v, h = split_state(X)
        from .graph import GraphBatch

        path = self.model_.path_arrays(q, v, GraphBatch.build(h))
        return np.stack(path.positions), np.stack(path.velocities)


class DirectEGNNRegressor(_TrainedRegressor):
    """Direct-mapping EGNN baseline with the same fit/predict interface."""

    def __init__(
        self,
        n_layers: int = 4,
        hidden_dim: int = 64,
        horizon: float = 1.0,
        lr: float = 3e-3,
        epochs: int = 300,
        batch_size: int = 100,
        weight_decay: float = 1e-10,
        patience: int = 50,
        random_state: int = 0,
    ):
        self.n_layers = n_layers
        self.hidden_dim = hidden_dim
        self.horizon = horizon
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.patience = patience
        self.random_state = random_state

    def _build(self, d_node: int) -> DirectEgnn:
        cfg = DirectEgnnConfig(self.n_layers, self.hidden_dim, d_node, self.horizon)
        return DirectEgnn(cfg, self.random_state)


class LinearExtrapolationRegressor(RegressorMixin, BaseEstimator):
    """Constant-velocity prediction ``q + v * horizon``; fitting only validates."""

    def __init__(self, horizon: float = 1.0):
        self.horizon = horizon

    def fit(self, X, y=None):
        X = check_system_array(X)
        if y is not None:
            check_targets(y, X)
        self.n_node_features_ = X.shape[2] - 6
        self.model_ = LinearExtrapolation()
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        q, v, _ = split_state(check_system_array(X))
        return self.model_.predict(q, v, None, self.horizon)[0]

    def score(self, X, y, sample_weight=None) -> float:
        X = check_system_array(X)
        return _neg_mse(self.predict(X), check_targets(y, X))
