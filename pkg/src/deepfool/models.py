"""Classifiers, the argmax decision rule and the binary model file format.

Model file layout (all integers little-endian)::

    magic            8 bytes   b"DFMODEL\\0"
    schema version   uint32    currently 1
    header length    uint32    byte length L of the JSON header
    header           L bytes   UTF-8 JSON, keys sorted
    weights          float64   little-endian, per layer: W (row-major), b

The JSON header carries ``kind`` ("affine" or "mlp"), ``n_inputs``,
``n_classes``, ``layers`` (list of ``{"in", "out", "activation"}``),
``class_names`` (or null) and a free-form ``metadata`` object. The file must
end exactly after the last weight block.
"""

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import DimensionError, ModelFormatError
from .tensor import Dense, as_tensor, check_chain, forward

MAGIC = b"DFMODEL\0"
SCHEMA_VERSION = 1
_F64 = np.dtype("<f8")


class Classifier:
    """Layered differentiable map from ``R^n`` to ``R^c`` (raw scores)."""

    kind = "mlp"

    def __init__(self, layers, class_names=None, metadata=None):
        layers = tuple(layers)
        check_chain(layers)
        if layers[-1].activation != "identity":
            raise ValueError("the final layer must output raw scores")
        self.layers = layers
        self.class_names = list(class_names) if class_names is not None else None
        if self.class_names is not None and len(self.class_names) != self.n_classes:
            raise ValueError("class_names length differs from the class count")
        self.metadata = dict(metadata or {})

    @property
    def n_inputs(self):
        return self.layers[0].in_features

    @property
    def n_classes(self):
        return self.layers[-1].out_features

    def forward(self, x):
        return forward(self.layers, x)

    def logits(self, x):
        return forward(self.layers, x)[0]

    def predict(self, x):
        """Labels for a single input or a batch."""
        return np.argmax(self.logits(x), axis=-1)

    def content_hash(self):
        """SHA-256 over architecture and weights, independent of metadata."""
        h = hashlib.sha256()
        h.update(json.dumps(_architecture(self), sort_keys=True).encode())
        for layer in self.layers:
            h.update(layer.weight.astype(_F64).tobytes())
            h.update(layer.bias.astype(_F64).tobytes())
        return h.hexdigest()

    def scaled(self, factor):
        """Copy whose logits are multiplied by ``factor``."""
        last = self.layers[-1]
        layers = self.layers[:-1] + (
            Dense(last.weight * factor, last.bias * factor, last.activation),
        )
        return type(self).from_layers(layers, self.class_names, self.metadata)

    @classmethod
    def from_layers(cls, layers, class_names=None, metadata=None):
        return cls(layers, class_names, metadata)

    def __repr__(self):
        dims = [self.n_inputs] + [layer.out_features for layer in self.layers]
        return f"{type(self).__name__}({'-'.join(map(str, dims))})"


class MlpClassifier(Classifier):
    """Fully connected network; hidden layers use ReLU, the last is linear."""


class AffineClassifier(Classifier):
    """``f(x) = W^T x + b`` with ``W`` of shape ``(n, c)``."""

    kind = "affine"

    def __init__(self, W, b, class_names=None, metadata=None):
        layer = Dense(W, b, "identity")
        if layer.out_features < 2:
            raise ValueError("an affine classifier needs at least two classes")
        super().__init__((layer,), class_names, metadata)

    @property
    def W(self):
        return self.layers[0].weight

    @property
    def b(self):
        return self.layers[0].bias

    @classmethod
    def from_layers(cls, layers, class_names=None, metadata=None):
        (layer,) = layers
        return cls(layer.weight, layer.bias, class_names, metadata)


def argmax_label(scores):
    """Index of the largest score; ties go to the lowest index."""
    return int(np.argmax(scores))


def predict_label(f, x):
    """Predicted label of a single input ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (f.n_inputs,):
        raise DimensionError(f"expected input of shape ({f.n_inputs},), got {x.shape}")
    return argmax_label(f.logits(x))


def _architecture(f):
    return {
        "kind": f.kind,
        "n_inputs": f.n_inputs,
        "n_classes": f.n_classes,
        "layers": [
            {"in": l.in_features, "out": l.out_features, "activation": l.activation}
            for l in f.layers
        ],
    }


def model_to_bytes(f):
    header = _architecture(f)
    header["class_names"] = f.class_names
    header["metadata"] = f.metadata
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", SCHEMA_VERSION, len(blob)), blob]
    for layer in f.layers:
        parts.append(layer.weight.astype(_F64).tobytes(order="C"))
        parts.append(layer.bias.astype(_F64).tobytes())
    return b"".join(parts)


def save_model(f, path):
    """Write ``f`` atomically to ``path``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(model_to_bytes(f))
    tmp.replace(path)


def model_from_bytes(data):
    if len(data) < len(MAGIC) + 8 or data[: len(MAGIC)] != MAGIC:
        raise ModelFormatError("magic: not a model file")
    version, hlen = struct.unpack_from("<II", data, len(MAGIC))
    if version != SCHEMA_VERSION:
        raise ModelFormatError(
            f"schema_version: unsupported version {version} "
            f"(this build reads {SCHEMA_VERSION})"
        )
    start = len(MAGIC) + 8
    if start + hlen > len(data):
        raise ModelFormatError("header: truncated")
    try:
        header = json.loads(data[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"header: invalid JSON ({exc})") from None
    try:
        kind = header["kind"]
        n, c = int(header["n_inputs"]), int(header["n_classes"])
        specs = header["layers"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"header: missing or invalid field {exc}") from None
    if kind not in ("affine", "mlp"):
        raise ModelFormatError(f"kind: unknown model kind {kind!r}")

    offset = start + hlen
    layers = []
    for i, spec in enumerate(specs):
        rows, cols = int(spec["in"]), int(spec["out"])
        count = rows * cols + cols
        end = offset + count * _F64.itemsize
        if end > len(data):
            raise ModelFormatError(f"layers[{i}]: weight block truncated")
        values = np.frombuffer(data, dtype=_F64, count=count, offset=offset)
        if not np.all(np.isfinite(values)):
            raise ModelFormatError(f"layers[{i}]: non-finite weights")
        w = values[: rows * cols].reshape(rows, cols).astype(np.float64)
        b = values[rows * cols :].astype(np.float64)
        try:
            layers.append(Dense(w, b, spec["activation"]))
        except ValueError as exc:
            raise ModelFormatError(f"layers[{i}]: {exc}") from None
        offset = end
    if offset != len(data):
        raise ModelFormatError(f"trailing data: {len(data) - offset} unexpected bytes")
    if not layers:
        raise ModelFormatError("layers: empty")
    if layers[0].in_features != n:
        raise ModelFormatError("n_inputs: does not match the first layer")
    if layers[-1].out_features != c:
        raise ModelFormatError("n_classes: does not match the last layer")

    names, meta = header.get("class_names"), header.get("metadata")
    try:
        if kind == "affine":
            if len(layers) != 1:
                raise ModelFormatError("layers: affine models have one layer")
            return AffineClassifier(layers[0].weight, layers[0].bias, names, meta)
        return MlpClassifier(layers, names, meta)
    except (ValueError, DimensionError) as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"layers: {exc}") from None


def load_model(path):
    return model_from_bytes(Path(path).read_bytes())


def random_mlp(sizes, seed=0, scale=1.0):
    """MLP with ReLU hidden layers and fan-in scaled uniform weights.

    ``sizes`` lists every width including input and output, e.g.
    ``[784, 200, 100, 10]``.
    """
    rng = np.random.default_rng(seed)
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = scale / np.sqrt(fan_in)
        act = "relu" if i < len(sizes) - 2 else "identity"
        layers.append(
            Dense(
                rng.uniform(-bound, bound, (fan_in, fan_out)),
                rng.uniform(-bound, bound, fan_out),
                act,
            )
        )
    return MlpClassifier(layers)


__all__ = [
    "AffineClassifier",
    "Classifier",
    "MlpClassifier",
    "argmax_label",
    "as_tensor",
    "load_model",
    "model_from_bytes",
    "model_to_bytes",
    "predict_label",
    "random_mlp",
    "save_model",
]
