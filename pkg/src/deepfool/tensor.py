"""Dense float64 arithmetic and reverse-mode gradients for layered networks.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C (row-major)
order. A network is a sequence of :class:`Dense` layers; :func:`forward`
evaluates it and returns a :class:`GradientTape` holding every intermediate
activation, from which input gradients, Jacobians and parameter gradients
are obtained by a single reverse sweep.

Inputs are either one sample of shape ``(n,)`` or a batch of shape
``(m, n)``. Nothing is broadcast implicitly.
"""

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionError

ACTIVATIONS = ("relu", "identity")


def as_tensor(values, name="tensor"):
    """Convert ``values`` to a read-only float64 array, rejecting NaN/Inf."""
    arr = np.array(values, dtype=np.float64, order="C", copy=True)
    if arr.size and not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Dense:
    """Affine map ``x @ weight + bias`` followed by an activation.

    ``weight`` has shape ``(in_features, out_features)`` so that column ``k``
    holds the weights feeding output ``k``.
    """

    weight: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        w = as_tensor(self.weight, "weight")
        b = as_tensor(self.bias, "bias")
        if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
            raise DimensionError(
                f"weight {w.shape} and bias {b.shape} are not compatible"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_features(self):
        return self.weight.shape[0]

    @property
    def out_features(self):
        return self.weight.shape[1]


@dataclass(frozen=True)
class TapeEntry:
    kind: str  # "affine" or "relu"
    layer: int
    inputs: np.ndarray
    outputs: np.ndarray


@dataclass(frozen=True)
class GradientTape:
    """Ordered record of primitive operations with cached activations."""

    layers: tuple
    entries: tuple
    inputs: np.ndarray

    @property
    def outputs(self):
        return self.entries[-1].outputs

    @property
    def n_outputs(self):
        return self.layers[-1].out_features

    @property
    def batched(self):
        return self.inputs.ndim == 2

    def replay(self):
        """Re-run every recorded operation on its cached input."""
        out = []
        for entry in self.entries:
            if entry.kind == "affine":
                layer = self.layers[entry.layer]
                out.append(_affine(entry.inputs, layer))
            else:
                out.append(_relu(entry.inputs))
        return out


def _affine(x, layer):
    return x @ layer.weight + layer.bias


def _relu(x):
    return np.maximum(x, 0.0)


def check_chain(layers: Sequence[Dense]):
    """Raise :class:`DimensionError` unless consecutive layers chain."""
    if not layers:
        raise DimensionError("a model needs at least one layer")
    for i in range(1, len(layers)):
        if layers[i].in_features != layers[i - 1].out_features:
            raise DimensionError(
                f"layer {i} expects {layers[i].in_features} inputs but layer "
                f"{i - 1} produces {layers[i - 1].out_features}"
            )


def forward(layers: Sequence[Dense], x):
    """Evaluate ``layers`` on ``x`` and record a tape.

    Returns ``(logits, tape)``. ``logits`` has shape ``(c,)`` for one sample
    or ``(m, c)`` for a batch.
    """
    layers = tuple(layers)
    check_chain(layers)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != layers[0].in_features:
        raise DimensionError(
            f"layer 0 expects inputs with {layers[0].in_features} features, "
            f"got shape {x.shape}"
        )
    entries = []
    h = x
    for i, layer in enumerate(layers):
        z = _affine(h, layer)
        entries.append(TapeEntry("affine", i, h, z))
        h = z
        if layer.activation == "relu":
            a = _relu(z)
            entries.append(TapeEntry("relu", i, z, a))
            h = a
    return h, GradientTape(layers, tuple(entries), x)


def backward(tape: GradientTape, seed, param_grads=False):
    """Propagate ``seed`` (dL/dlogits) back through ``tape``.

    Returns the gradient with respect to the input, and when ``param_grads``
    is set also a list of ``(dW, db)`` per layer (summed over the batch).
    The ReLU derivative at exactly zero is taken as zero.
    """
    g = np.asarray(seed, dtype=np.float64)
    if g.shape != tape.outputs.shape:
        raise DimensionError(
            f"seed shape {g.shape} does not match outputs {tape.outputs.shape}"
        )
    grads = [None] * len(tape.layers)
    for entry in reversed(tape.entries):
        if entry.kind == "relu":
            g = g * (entry.inputs > 0.0)
            continue
        layer = tape.layers[entry.layer]
        if param_grads:
            if tape.batched:
                dw = entry.inputs.T @ g
                db = g.sum(axis=0)
            else:
                dw = np.outer(entry.inputs, g)
                db = g.copy()
            grads[entry.layer] = (dw, db)
        g = g @ layer.weight.T
    if param_grads:
        return g, grads
    return g


def input_gradient(tape: GradientTape, class_index: int):
    """Gradient of output ``class_index`` with respect to a single input."""
    if tape.batched:
        raise DimensionError("input_gradient needs a single-sample tape")
    c = tape.n_outputs
    if not 0 <= class_index < c:
        raise IndexError(f"class index {class_index} outside [0, {c})")
    seed = np.zeros(c)
    seed[class_index] = 1.0
    return backward(tape, seed)


def input_jacobian(tape: GradientTape):
    """``c x n`` matrix whose row ``k`` is ``input_gradient(tape, k)``."""
    return np.stack([input_gradient(tape, k) for k in range(tape.n_outputs)])
