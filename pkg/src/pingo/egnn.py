"""Equivariant graph networks.

:class:`EgnnBackbone` maps positions and node attributes to per-particle
accelerations. Messages see only squared distances and invariant node
features, and the output is a scalar-gated sum of coordinate differences,
so the result rotates/reflects with the input and ignores translations.

:class:`DirectEgnn` is the direct-mapping baseline: a stack of EGNN layers
that moves positions and velocities straight from t0 to t0 + T.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import GraphBatch
from .nn import Mlp, MlpSpec, kaiming_uniform
from .tensor import Tensor, concat, tanh

_NORM_EPS = 1e-8


@dataclass
class EgnnConfig:
    n_layers: int = 8
    hidden_dim: int = 64
    d_node: int = 1
    activation: str = "silu"
    # carry node embeddings across integrator steps instead of re-embedding
    persist_h: bool = False
    # use (q_i - q_j) / |q_i - q_j| instead of the raw difference
    normalize_diff: bool = True
    # squash each edge coefficient into (-accel_range, accel_range)
    accel_range: float | None = 10.0
    message_mlp: MlpSpec = None
    accel_mlp: MlpSpec = None
    node_mlp: MlpSpec = None

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError(f"n_layers must be at least 1, got {self.n_layers}")
        if self.accel_range is not None and not self.accel_range > 0:
            raise ValueError(f"accel_range must be positive or None, got {self.accel_range}")
        H = self.hidden_dim
        if self.message_mlp is None:
            self.message_mlp = MlpSpec((2 * H + 2, H, H), self.activation)
        if self.accel_mlp is None:
            self.accel_mlp = MlpSpec((H, H, 1), self.activation)
        if self.node_mlp is None:
            self.node_mlp = MlpSpec((2 * H, H, H), self.activation)
        if self.accel_mlp.layer_widths[-1] != 1:
            raise ValueError("the acceleration MLP must output one scalar per edge")
        if self.node_mlp.layer_widths[-1] != H or self.message_mlp.layer_widths[-1] != self.node_mlp.layer_widths[0] - H:
            raise ValueError("node MLP must map [h, sum m] to a hidden_dim vector")
        if self.message_mlp.layer_widths[0] != 2 * H + 2:
            raise ValueError("message MLP input must be 2*hidden_dim + 2 wide")

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "hidden_dim": self.hidden_dim,
            "d_node": self.d_node,
            "activation": self.activation,
            "persist_h": self.persist_h,
            "normalize_diff": self.normalize_diff,
            "accel_range": self.accel_range,
            "message_mlp": self.message_mlp.to_dict(),
            "accel_mlp": self.accel_mlp.to_dict(),
            "node_mlp": self.node_mlp.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EgnnConfig":
        d = dict(d)
        for key in ("message_mlp", "accel_mlp", "node_mlp"):
            if d.get(key) is not None:
                d[key] = MlpSpec.from_dict(d[key])
        return cls(**d)


@dataclass
class Linear:
    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, rng, n_in: int, n_out: int, name: str) -> "Linear":
        return cls(
            Tensor(kaiming_uniform(rng, n_in, (n_in, n_out)), True, f"{name}.weight"),
            Tensor(kaiming_uniform(rng, n_in, (n_out,)), True, f"{name}.bias"),
        )

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


def _named(params: list[Tensor]) -> dict[str, Tensor]:
    return {p.name: p for p in params}


class _ParamMixin:
    def named_parameters(self) -> dict[str, Tensor]:
        return _named(self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters().items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        named = self.named_parameters()
        missing = set(named) - set(arrays)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in named.items():
            a = np.asarray(arrays[k], dtype=np.float64)
            if a.shape != p.shape:
                raise ValueError(f"parameter {k}: expected shape {p.shape}, got {a.shape}")
            p.data[...] = a


def _edge_geometry(q: Tensor, graph: GraphBatch) -> tuple[Tensor, Tensor]:
    diff = graph.gather_receivers(q) - graph.gather_senders(q)  # q_i - q_j
    return diff, (diff * diff).sum(axis=-1, keepdims=True)


def _messages(phi_e: Mlp, d2: Tensor, h: Tensor, a: Tensor, graph: GraphBatch) -> Tensor:
    """phi_e(|q_i - q_j|^2, h_i, h_j, a_ij) for every edge.

    The first linear layer is applied per node before gathering, which is
    the same map as concatenating the edge inputs but N-1 times cheaper.
    """
    H = h.shape[1]
    w = phi_e.weights[0]
    pre = (
        graph.gather_receivers(h @ w[1 : H + 1])
        + graph.gather_senders(h @ w[H + 1 : 2 * H + 1])
        + d2 @ w[0:1]
        + a @ w[2 * H + 1 :]
        + phi_e.biases[0]
    )
    return phi_e.tail(pre)


class EgnnBackbone(_ParamMixin):
    """Acceleration network f_theta(q, h).

    Each layer computes messages ``m_ij = phi_e(|q_i - q_j|^2, h_i, h_j, a_ij)``
    and updates ``h_i += phi_h(h_i, sum_j m_ij)``. The last layer turns its
    messages into ``(1/(N-1)) sum_j (q_i - q_j) phi_q(m_ij)``.

    With ``normalize_diff`` the difference is replaced by its unit vector,
    and ``accel_range`` passes each coefficient through
    ``c * tanh(phi_q / c)``. Together they bound |a_i| by ``accel_range``,
    which keeps long rollouts from running away once particles leave the
    range of distances seen in training.
    """

    def __init__(self, config: EgnnConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        H = config.hidden_dim
        self.embed = Linear.init(rng, config.d_node, H, "embed")
        self.phi_e = [Mlp.init(config.message_mlp, rng, f"layer{l}.phi_e") for l in range(config.n_layers)]
        n_node = config.n_layers if config.persist_h else config.n_layers - 1
        self.phi_h = [Mlp.init(config.node_mlp, rng, f"layer{l}.phi_h") for l in range(n_node)]
        self.phi_q = Mlp.init(config.accel_mlp, rng, f"layer{config.n_layers - 1}.phi_q")

    def parameters(self) -> list[Tensor]:
        out = self.embed.parameters()
        for l, mlp in enumerate(self.phi_e):
            out += mlp.parameters()
            if l < len(self.phi_h):
                out += self.phi_h[l].parameters()
        return out + self.phi_q.parameters()

    def embed_nodes(self, graph: GraphBatch) -> Tensor:
        if graph.h.shape[1] != self.config.d_node:
            raise ValueError(
                f"node attributes have width {graph.h.shape[1]}, backbone expects {self.config.d_node}"
            )
        return self.embed(Tensor(graph.h))

    def forward(self, q: Tensor, graph: GraphBatch, h: Tensor | None = None) -> tuple[Tensor, Tensor]:
        """Return (acceleration (B*N, 3), node features after the last update)."""
        if h is None:
            h = self.embed_nodes(graph)
        n = graph.n_bodies
        if n < 2 or graph.n_edges == 0:
            return Tensor(np.zeros((graph.n_nodes, 3))), h
        diff, d2 = _edge_geometry(q, graph)
        a = Tensor(graph.edge_attr)
        L = self.config.n_layers
        accel = None
        for l in range(L):
            m = _messages(self.phi_e[l], d2, h, a, graph)
            if l == L - 1:
                accel = graph.aggregate(self._edge_force(diff, d2, m)) * (1.0 / (n - 1))
            if l < len(self.phi_h):
                h = h + self.phi_h[l](concat([h, graph.aggregate(m)], axis=-1))
        return accel, h

    def _edge_force(self, diff: Tensor, d2: Tensor, m: Tensor) -> Tensor:
        coef = self.phi_q(m)
        c = self.config.accel_range
        if c is not None:
            coef = tanh(coef * (1.0 / c)) * c
        if self.config.normalize_diff:
            diff = diff / (d2 + _NORM_EPS).sqrt()
        return diff * coef

    def accel(self, q: Tensor, graph: GraphBatch) -> Tensor:
        return self.forward(q, graph)[0]

    __call__ = accel


def egnn_accel(state, backbone: EgnnBackbone) -> np.ndarray:
    """Acceleration of a single :class:`SystemState` as an (N, 3) array."""
    graph = GraphBatch.from_states([state])
    return backbone.accel(Tensor(state.q), graph).data.copy()


# -- direct-mapping baseline -----------------------------------------------------

@dataclass
class DirectEgnnConfig:
    n_layers: int = 4
    hidden_dim: int = 64
    d_node: int = 1  # raw attribute width; the velocity norm is appended internally
    horizon: float = 1.0
    activation: str = "silu"

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "DirectEgnnConfig":
        return cls(**d)


class DirectEgnn(_ParamMixin):
    """EGNN that maps the state at t0 straight to positions at t0 + horizon.

    Layer l moves every particle by
    ``phi_v(h) * v0 * horizon + (1/(N-1)) sum_j (x_i - x_j) phi_x(m_ij)``
    where ``v0`` is the input velocity. Nothing ties a layer to a point in
    time, so positions read from hidden layers are only a guess at the
    intermediate trajectory. Node inputs are the raw attributes plus the
    speed |v0|. The returned velocity is the finite difference over the window.
    """

    def __init__(self, config: DirectEgnnConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        H = config.hidden_dim
        act = config.activation
        self.embed = Linear.init(rng, config.d_node + 1, H, "embed")
        self.phi_e, self.phi_x, self.phi_v, self.phi_h = [], [], [], []
        for l in range(config.n_layers):
            self.phi_e.append(Mlp.init(MlpSpec((2 * H + 2, H, H), act), rng, f"layer{l}.phi_e"))
            self.phi_x.append(Mlp.init(MlpSpec((H, H, 1), act), rng, f"layer{l}.phi_x"))
            self.phi_v.append(Mlp.init(MlpSpec((H, H, 1), act), rng, f"layer{l}.phi_v"))
            # the last layer's node update would never be read
            if l < config.n_layers - 1:
                self.phi_h.append(Mlp.init(MlpSpec((2 * H, H, H), act), rng, f"layer{l}.phi_h"))

    def parameters(self) -> list[Tensor]:
        out = self.embed.parameters()
        for l in range(self.config.n_layers):
            for mlp in (self.phi_e[l], self.phi_x[l], self.phi_v[l]):
                out += mlp.parameters()
            if l < len(self.phi_h):
                out += self.phi_h[l].parameters()
        return out

    def forward(self, q: Tensor, v: Tensor, graph: GraphBatch) -> tuple[Tensor, Tensor, list[Tensor]]:
        """Return final positions, window velocity and positions after every layer."""
        speed = np.linalg.norm(v.data, axis=-1, keepdims=True)
        h = self.embed(Tensor(np.concatenate([graph.h, speed], axis=-1)))
        n = graph.n_bodies
        scale = 1.0 / max(n - 1, 1)
        T = self.config.horizon
        a = Tensor(graph.edge_attr)
        x = q
        xs = [x]
        for l in range(self.config.n_layers):
            shift = self.phi_v[l](h) * v * T
            if graph.n_edges:
                diff, d2 = _edge_geometry(x, graph)
                m = _messages(self.phi_e[l], d2, h, a, graph)
                shift = shift + graph.aggregate(diff * self.phi_x[l](m)) * scale
                if l < len(self.phi_h):
                    h = h + self.phi_h[l](concat([h, graph.aggregate(m)], axis=-1))
            x = x + shift
            xs.append(x)
        return x, (x - q) * (1.0 / T), xs

    # -- model API shared with PingoModel -------------------------------------
    kind = "direct"
    velocity_source = "finite_difference"

    def config_dict(self) -> dict:
        return {"model": self.kind, "direct": self.config.to_dict()}

    def predict_positions(self, batch) -> Tensor:
        x, _, _ = self.forward(Tensor(batch.q.reshape(-1, 3)), Tensor(batch.v.reshape(-1, 3)), batch.graph)
        return x

    def _check_horizon(self, horizon):
        if horizon is not None and abs(horizon - self.config.horizon) > 1e-12:
            raise ValueError(
                f"a direct-mapping model only predicts at its training horizon {self.config.horizon}, "
                f"not {horizon}"
            )

    def predict(self, q, v, h, horizon=None, edge_attr=None):
        self._check_horizon(horizon)
        q = np.asarray(q, dtype=np.float64)
        graph = GraphBatch.build(h, edge_attr=edge_attr)
        x, vel, _ = self.forward(Tensor(q.reshape(-1, 3)), Tensor(np.asarray(v).reshape(-1, 3)), graph)
        return x.data.reshape(q.shape), vel.data.reshape(q.shape)

    def layer_for(self, fraction) -> int:
        return int(round(float(fraction) * self.config.n_layers))

    def predict_intermediate(self, q, v, h, fractions, edge_attr=None) -> dict:
        """Positions read from hidden layer round(fraction * n_layers)."""
        q = np.asarray(q, dtype=np.float64)
        graph = GraphBatch.build(h, edge_attr=edge_attr)
        _, _, xs = self.forward(Tensor(q.reshape(-1, 3)), Tensor(np.asarray(v).reshape(-1, 3)), graph)
        return {f: xs[self.layer_for(f)].data.reshape(q.shape) for f in fractions}


def direct_egnn_predict(state, model: DirectEgnn, n_passes: int | None = None):
    """Predict (q, v) at t0 + horizon for one state.

    ``n_passes`` truncates the stack, returning the position after that
    many layers (hidden-layer extraction) together with the current velocity.
    """
    graph = GraphBatch.from_states([state])
    _, v, xs = model.forward(Tensor(state.q), Tensor(state.v), graph)
    k = model.config.n_layers if n_passes is None else n_passes
    if not 0 <= k <= model.config.n_layers:
        raise ValueError(f"n_passes must lie in [0, {model.config.n_layers}]")
    return xs[k].data.copy(), v.data.copy()
