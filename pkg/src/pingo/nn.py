"""Multi-layer perceptrons built on :mod:`pingo.tensor`."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, identity, relu, sigmoid, silu, tanh

ACTIVATIONS = {"silu": silu, "relu": relu, "tanh": tanh, "identity": identity}
FINAL_ACTIVATIONS = {"none": identity, "sigmoid": sigmoid}


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths and activations of an MLP.

    ``activation`` is applied between hidden layers; ``final_activation``
    after the last linear map.
    """

    layer_widths: tuple[int, ...]
    activation: str = "silu"
    final_activation: str = "none"

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if len(self.layer_widths) < 2:
            raise ValueError(f"MlpSpec needs at least 2 layer widths, got {self.layer_widths}")
        if any(w < 1 for w in self.layer_widths):
            raise ValueError(f"layer widths must be positive, got {self.layer_widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; choose from {sorted(ACTIVATIONS)}")
        if self.final_activation not in FINAL_ACTIVATIONS:
            raise ValueError(
                f"unknown final activation {self.final_activation!r}; "
                f"choose from {sorted(FINAL_ACTIVATIONS)}"
            )

    def to_dict(self) -> dict:
        return {
            "layer_widths": list(self.layer_widths),
            "activation": self.activation,
            "final_activation": self.final_activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(tuple(d["layer_widths"]), d.get("activation", "silu"), d.get("final_activation", "none"))


def kaiming_uniform(rng: np.random.Generator, fan_in: int, shape: tuple) -> np.ndarray:
    # U(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual default for linear layers
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class Mlp:
    """Dense MLP holding one weight matrix and bias per layer."""

    spec: MlpSpec
    weights: list[Tensor] = field(default_factory=list)
    biases: list[Tensor] = field(default_factory=list)

    @classmethod
    def init(cls, spec: MlpSpec, rng: np.random.Generator, name: str = "mlp") -> "Mlp":
        weights, biases = [], []
        widths = spec.layer_widths
        for k, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
            weights.append(Tensor(kaiming_uniform(rng, n_in, (n_in, n_out)), True, f"{name}.{k}.weight"))
            biases.append(Tensor(kaiming_uniform(rng, n_in, (n_out,)), True, f"{name}.{k}.bias"))
        return cls(spec, weights, biases)

    def __call__(self, x: Tensor) -> Tensor:
        act = ACTIVATIONS[self.spec.activation]
        n = len(self.weights)
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = x @ w + b
            if k < n - 1:
                x = act(x)
        return FINAL_ACTIVATIONS[self.spec.final_activation](x)

    def tail(self, pre: Tensor) -> Tensor:
        """Finish the forward pass given the first layer's pre-activation."""
        act = ACTIVATIONS[self.spec.activation]
        x = pre
        for w, b in zip(self.weights[1:], self.biases[1:]):
            x = act(x) @ w + b
        return FINAL_ACTIVATIONS[self.spec.final_activation](x)

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def zero_output_layer(self) -> None:
        self.weights[-1].data[...] = 0.0
        self.biases[-1].data[...] = 0.0
