"""Baseline MLP models and the repaired-policy wrapper.

Parameters live as leaf tensors on the autodiff tape. Because tensors are
immutable, an optimizer step swaps in fresh leaves via `assign_parameters`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from ._serde import decode_array, encode_array, read_json, write_json, substream
from .autodiff import Tensor
from .errors import ContractError, ShapeError

ACTIVATIONS = {"relu": ad.relu}


@dataclass
class Mlp:
    """Fully-connected network; hidden activations per `activation`, linear head."""

    widths: list[int]
    weights: list[Tensor]
    biases: list[Tensor]
    activation: str = "relu"
    seed: int | None = None

    @property
    def n_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def parameters(self) -> list[Tensor]:
        return [*self.weights, *self.biases]

    def parameter_arrays(self) -> list[np.ndarray]:
        return [p.data for p in self.parameters()]

    def assign_parameters(self, arrays: list[np.ndarray]) -> None:
        """Replace all parameters with fresh leaves holding `arrays`."""
        k = len(self.weights)
        if len(arrays) != k + len(self.biases):
            raise ShapeError(f"expected {k + len(self.biases)} arrays, got {len(arrays)}")
        self.weights = [ad.tensor(a) for a in arrays[:k]]
        self.biases = [ad.tensor(a) for a in arrays[k:]]

    def zero_final_layer(self) -> "Mlp":
        """Zero the head weights/bias so the network outputs 0 everywhere."""
        self.weights[-1] = ad.tensor(np.zeros_like(self.weights[-1].data))
        self.biases[-1] = ad.tensor(np.zeros_like(self.biases[-1].data))
        return self


def init_weights(widths: list[int], seed: int) -> Mlp:
    """Kaiming-uniform weights, zero biases; deterministic under `seed`."""
    if not widths or len(widths) < 2:
        raise ContractError(f"widths must contain at least input and output, got {widths}")
    rng = substream(seed, "init")
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(ad.tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out))))
        biases.append(ad.tensor(np.zeros(fan_out)))
    return Mlp(list(widths), weights, biases, seed=seed)


def forward(model: Mlp, x: Tensor | np.ndarray) -> Tensor:
    """Run the network on one input vector or a batch of row vectors."""
    h = x if isinstance(x, Tensor) else ad.tensor(x)
    in_dim = h.shape[-1] if h.data.ndim else None
    if h.data.ndim not in (1, 2) or in_dim != model.in_dim:
        raise ShapeError(f"forward: expected input dim {model.in_dim}, got shape {h.shape}")
    act = ACTIVATIONS[model.activation]
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = ad.add(ad.matmul(h, w), b)
        if i < last:
            h = act(h)
    return h


def save_checkpoint(model: Mlp, path: str, extra: dict | None = None) -> None:
    """Write the model as JSON with base64 float64 arrays; round-trips bit-exactly."""
    blob = {
        "format": "snarekit-checkpoint-v1",
        "widths": list(model.widths),
        "activation": model.activation,
        "seed": model.seed,
        "weights": [encode_array(w.data) for w in model.weights],
        "biases": [encode_array(b.data) for b in model.biases],
    }
    if extra:
        blob["extra"] = extra
    write_json(path, blob)


def load_checkpoint(path: str) -> tuple[Mlp, dict]:
    blob = read_json(path)
    if blob.get("format") != "snarekit-checkpoint-v1":
        raise ContractError(f"not a checkpoint file: {path}")
    model = Mlp(
        widths=list(blob["widths"]),
        weights=[ad.tensor(decode_array(w)) for w in blob["weights"]],
        biases=[ad.tensor(decode_array(b)) for b in blob["biases"]],
        activation=blob["activation"],
        seed=blob["seed"],
    )
    return model, blob.get("extra", {})


@dataclass
class SnarePolicy:
    """Nominal controller plus learned correction, repaired per-state.

    `nominal` maps a state tensor to a control tensor; `constraint_builder`
    maps state values to the control constraint set for that state; the
    repair settings come from `repair_cfg`. Output dimension equals the
    control dimension.
    """

    nominal: Callable[[Tensor], Tensor]
    correction: Mlp
    constraint_builder: Callable[[np.ndarray], object]
    repair_cfg: object = None
    metadata: dict = field(default_factory=dict)
