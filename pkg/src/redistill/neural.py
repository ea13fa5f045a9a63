"""Minimal feedforward classifier with exact backpropagation.

Teacher and student networks at desk scale are plain MLPs with explicit
float64 weight matrices; capacity differences between the two come from the
hidden sizes, which is all the distillation machinery needs.  No framework,
no autodiff: the backward pass is hand-derived and finite-difference tested.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "MlpSpec",
    "Mlp",
    "SgdConfig",
    "init_mlp",
    "forward",
    "forward_batch",
    "backward",
    "backward_batch",
    "zero_velocity",
    "sgd_step",
    "lr_at_epoch",
]

_ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    num_classes: int
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims)
        if any(d < 1 for d in dims):
            raise ValueError(f"all layer dims must be >= 1, got {dims}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}, got {self.activation!r}")

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.num_classes)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "num_classes": self.num_classes,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(int(d["input_dim"]), tuple(d["hidden_dims"]), int(d["num_classes"]),
                   d.get("activation", "relu"))


@dataclass
class Mlp:
    """Weights live as per-layer ``(fan_in, fan_out)`` matrices plus bias vectors."""

    spec: MlpSpec
    weights: list[np.ndarray] = field(repr=False)
    biases: list[np.ndarray] = field(repr=False)

    def check_shapes(self):
        dims = self.spec.layer_dims
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[i], dims[i + 1]) or b.shape != (dims[i + 1],):
                raise ValueError(f"layer {i} has shape {w.shape}/{b.shape}, "
                                 f"expected {(dims[i], dims[i + 1])}/({dims[i + 1]},)")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i} contains non-finite weights")

    def copy(self) -> "Mlp":
        return Mlp(self.spec, [w.copy() for w in self.weights], [b.copy() for b in self.biases])


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 40
    batch_size: int = 64
    lr_decay_epochs: tuple[int, ...] = ()
    lr_decay_factor: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "lr_decay_epochs", tuple(int(e) for e in self.lr_decay_epochs))
        if not (self.learning_rate > 0):
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not (0 <= self.momentum < 1):
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not (0 < self.lr_decay_factor <= 1):
            raise ValueError(f"lr_decay_factor must be in (0, 1], got {self.lr_decay_factor}")
        e = self.lr_decay_epochs
        if any(b <= a for a, b in zip(e, e[1:])):
            raise ValueError(f"lr_decay_epochs must be strictly increasing, got {e}")
        if e and (e[0] < 1 or e[-1] > max(self.epochs, 1)):
            raise ValueError(f"lr_decay_epochs must lie within [1, epochs], got {e}")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr_decay_epochs": list(self.lr_decay_epochs),
            "lr_decay_factor": self.lr_decay_factor,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SgdConfig":
        return cls(
            learning_rate=float(d["learning_rate"]),
            momentum=float(d.get("momentum", 0.9)),
            weight_decay=float(d.get("weight_decay", 5e-4)),
            epochs=int(d.get("epochs", 40)),
            batch_size=int(d.get("batch_size", 64)),
            lr_decay_epochs=tuple(d.get("lr_decay_epochs", ())),
            lr_decay_factor=float(d.get("lr_decay_factor", 0.1)),
        )


def init_mlp(spec: MlpSpec, seed: int) -> Mlp:
    """Uniform init with per-layer scale sqrt(6 / (fan_in + fan_out)), zero biases."""
    rng = np.random.default_rng(seed)
    dims = spec.layer_dims
    weights, biases = [], []
    for fan_in, fan_out in zip(dims, dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Mlp(spec, weights, biases)


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def forward_batch(model: Mlp, x: np.ndarray, return_cache: bool = False):
    """Logits for a batch of rows; optionally the per-layer activations for backprop."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.spec.input_dim:
        raise ValueError(f"input has shape {x.shape}, expected (n, {model.spec.input_dim})")
    act = model.spec.activation
    h = x
    cache = [x]
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w + b
        h = z if i == last else _activate(z, act)
        if return_cache and i != last:
            cache.append(h)
    return (h, cache) if return_cache else h


def forward(model: Mlp, x) -> np.ndarray:
    """Raw logits (no softmax) for a single feature vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected a 1-d feature vector, got shape {x.shape}")
    return forward_batch(model, x[None, :])[0]


def backward_batch(model: Mlp, cache: list[np.ndarray], logit_grads: np.ndarray):
    """Mean over the batch of the per-sample gradients of ``logit_grad . logits``.

    ``cache`` is the activation list from `forward_batch(..., return_cache=True)`.
    Returns per-layer (weight grad, bias grad) pairs.
    """
    n = cache[0].shape[0]
    act = model.spec.activation
    delta = np.asarray(logit_grads, dtype=np.float64) / n
    grads_w = [None] * len(model.weights)
    grads_b = [None] * len(model.weights)
    for i in range(len(model.weights) - 1, -1, -1):
        h_in = cache[i]
        grads_w[i] = h_in.T @ delta
        grads_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ model.weights[i].T
            if act == "relu":
                delta = delta * (h_in > 0)
            else:
                delta = delta * (1.0 - h_in * h_in)
    return list(zip(grads_w, grads_b))


def backward(model: Mlp, x, logit_grad):
    """Exact parameter gradients of ``logit_grad . forward(model, x)`` for one sample."""
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(logit_grad, dtype=np.float64)
    if g.shape != (model.spec.num_classes,):
        raise ValueError(f"logit_grad has shape {g.shape}, expected ({model.spec.num_classes},)")
    _, cache = forward_batch(model, x[None, :], return_cache=True)
    return backward_batch(model, cache, g[None, :])


def zero_velocity(model: Mlp) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(np.zeros_like(w), np.zeros_like(b))
            for w, b in zip(model.weights, model.biases)]


def sgd_step(model: Mlp, grads, velocity, config: SgdConfig, current_lr: float):
    """Heavy-ball update with coupled weight decay, in place.

    v <- momentum * v + grad + weight_decay * w;  w <- w - lr * v
    """
    mu, wd = config.momentum, config.weight_decay
    for (w, b), (gw, gb), (vw, vb) in zip(zip(model.weights, model.biases), grads, velocity):
        if gw.shape != w.shape or gb.shape != b.shape:
            raise ValueError(f"gradient shape mismatch: {gw.shape} vs {w.shape}")
        vw *= mu
        vw += gw + wd * w
        vb *= mu
        vb += gb + wd * b
        w -= current_lr * vw
        b -= current_lr * vb
    return model, velocity


def lr_at_epoch(config: SgdConfig, epoch: int) -> float:
    """Step schedule: base rate decayed once per milestone already reached."""
    if not (0 <= epoch < max(config.epochs, 1)):
        raise ValueError(f"epoch {epoch} out of range [0, {config.epochs})")
    drops = sum(1 for m in config.lr_decay_epochs if m <= epoch)
    return config.learning_rate * config.lr_decay_factor ** drops
