"""Network description: convolution kernels, layers, and the JSON model format.

Kernel taps are stored as ``taps[out][in][j1][j2]`` where index 0 along the
spatial axes corresponds to offset ``-r_minus``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ACTIVATIONS = ("relu", "tanh", "sigmoid")


class ModelError(ValueError):
    """Base class for invalid network descriptions."""


class ModelParseError(ModelError):
    pass


class ModelSchemaError(ModelError):
    def __init__(self, message, layer=None):
        self.layer = layer
        if layer is not None:
            message = f"{layer}: {message}"
        super().__init__(message)


class GeometryError(ModelError):
    pass


def _finite(arr, what, layer=None):
    if not np.all(np.isfinite(arr)):
        raise ModelSchemaError(f"{what} contains non-finite entries", layer)


@dataclass(frozen=True)
class Kernel2D:
    taps: np.ndarray
    r_minus: int
    r_plus: int

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=float)
        if taps.ndim != 4:
            raise ModelSchemaError(f"kernel must be 4-D [out][in][j1][j2], got ndim={taps.ndim}")
        if self.r_minus < 0 or self.r_plus < 0:
            raise ModelSchemaError("r_minus and r_plus must be nonnegative")
        w = self.r_minus + self.r_plus + 1
        if taps.shape[2:] != (w, w):
            raise ModelSchemaError(
                f"kernel window is {taps.shape[2:]}, expected {(w, w)} from r_minus={self.r_minus}, r_plus={self.r_plus}"
            )
        if taps.shape[0] < 1 or taps.shape[1] < 1:
            raise ModelSchemaError("kernel needs at least one input and one output channel")
        _finite(taps, "kernel")
        taps.setflags(write=False)
        object.__setattr__(self, "taps", taps)

    @property
    def c_out(self):
        return self.taps.shape[0]

    @property
    def c_in(self):
        return self.taps.shape[1]

    @property
    def width(self):
        """Support width r_minus + r_plus + 1 along each axis."""
        return self.r_minus + self.r_plus + 1

    def tap(self, j1, j2):
        """Tap matrix K(j1, j2) (c_out x c_in) at offsets in [-r_minus, r_plus]."""
        return self.taps[:, :, j1 + self.r_minus, j2 + self.r_minus]

    def scaled(self, alpha):
        return Kernel2D(alpha * self.taps, self.r_minus, self.r_plus)


@dataclass(frozen=True)
class ConvLayerSpec:
    kernel: Kernel2D
    bias: np.ndarray = None

    def __post_init__(self):
        bias = np.zeros(self.kernel.c_out) if self.bias is None else np.asarray(self.bias, dtype=float)
        if bias.shape != (self.kernel.c_out,):
            raise ModelSchemaError(f"bias has shape {bias.shape}, expected ({self.kernel.c_out},)")
        _finite(bias, "bias")
        bias.setflags(write=False)
        object.__setattr__(self, "bias", bias)

    @property
    def c_in(self):
        return self.kernel.c_in

    @property
    def c_out(self):
        return self.kernel.c_out

    @classmethod
    def from_taps(cls, taps, r_minus=None, r_plus=None, bias=None):
        """Build a layer from a 4-D array; a centred window is assumed if radii are omitted."""
        taps = np.asarray(taps, dtype=float)
        w = taps.shape[-1]
        if r_minus is None and r_plus is None:
            r_minus = (w - 1) // 2
        if r_minus is None:
            r_minus = w - 1 - r_plus
        if r_plus is None:
            r_plus = w - 1 - r_minus
        return cls(Kernel2D(taps, r_minus, r_plus), bias)

    def scaled(self, alpha):
        return ConvLayerSpec(self.kernel.scaled(alpha), self.bias)


@dataclass(frozen=True)
class DenseLayerSpec:
    weight: np.ndarray
    bias: np.ndarray = None

    def __post_init__(self):
        weight = np.asarray(self.weight, dtype=float)
        if weight.ndim != 2:
            raise ModelSchemaError("dense weight must be a matrix")
        bias = np.zeros(weight.shape[0]) if self.bias is None else np.asarray(self.bias, dtype=float)
        if bias.shape != (weight.shape[0],):
            raise ModelSchemaError(f"dense bias has shape {bias.shape}, expected ({weight.shape[0]},)")
        _finite(weight, "dense weight")
        _finite(bias, "dense bias")
        weight.setflags(write=False)
        bias.setflags(write=False)
        object.__setattr__(self, "weight", weight)
        object.__setattr__(self, "bias", bias)

    @property
    def n_in(self):
        return self.weight.shape[1]

    @property
    def n_out(self):
        return self.weight.shape[0]


@dataclass(frozen=True)
class NetworkSpec:
    input_height: int
    input_width: int
    input_channels: int
    conv_layers: tuple
    dense_layers: tuple = field(default_factory=tuple)
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "conv_layers", tuple(self.conv_layers))
        object.__setattr__(self, "dense_layers", tuple(self.dense_layers))
        validate_network(self)

    @property
    def has_dense(self):
        return len(self.dense_layers) > 0


def conv_output_shape(spec):
    """Spatial size and channels after the conv stack under valid cropping."""
    h, w, c = spec.input_height, spec.input_width, spec.input_channels
    for k, layer in enumerate(spec.conv_layers, start=1):
        shrink = layer.kernel.width - 1
        h, w = h - shrink, w - shrink
        if h <= 0 or w <= 0:
            raise GeometryError(
                f"conv layer {k}: {layer.kernel.width}x{layer.kernel.width} support leaves a nonpositive image size ({h}x{w})"
            )
        c = layer.c_out
    return h, w, c


def flatten_dims(spec):
    """Return ``(d_l, c_l)``: side length and channel count fed to the flattening step."""
    h, w, c = conv_output_shape(spec)
    if h != w:
        raise GeometryError(f"flattening needs a square conv output, got {h}x{w}")
    return h, c


def validate_network(spec):
    for name in ("input_height", "input_width", "input_channels"):
        value = getattr(spec, name)
        if not isinstance(value, (int, np.integer)) or value < 1:
            raise ModelSchemaError(f"{name} must be a positive integer, got {value!r}")
    if spec.activation not in ACTIVATIONS:
        raise ModelSchemaError(f"activation must be one of {ACTIVATIONS}, got {spec.activation!r}")
    if not spec.conv_layers:
        raise ModelSchemaError("at least one conv layer is required")
    c = spec.input_channels
    for k, layer in enumerate(spec.conv_layers, start=1):
        if layer.c_in != c:
            raise ModelSchemaError(f"c_in={layer.c_in} does not match previous channel count {c}", f"conv layer {k}")
        c = layer.c_out
    conv_output_shape(spec)
    if spec.dense_layers:
        d_l, c_l = flatten_dims(spec)
        p = d_l * d_l * c_l
        for k, layer in enumerate(spec.dense_layers, start=1):
            if layer.n_in != p:
                raise ModelSchemaError(f"input dimension {layer.n_in} does not match {p}", f"dense layer {k}")
            p = layer.n_out


def _layer_from_json(obj, k):
    where = f"conv layer {k}"
    try:
        r_minus, r_plus = obj["r_minus"], obj["r_plus"]
        taps = np.array(obj["kernel"], dtype=float)
        bias = obj["bias"]
    except KeyError as exc:
        raise ModelSchemaError(f"missing field {exc.args[0]!r}", where) from None
    except (TypeError, ValueError) as exc:
        raise ModelSchemaError(f"kernel is not a rectangular numeric array ({exc})", where) from None
    if not all(isinstance(r, int) and not isinstance(r, bool) for r in (r_minus, r_plus)):
        raise ModelSchemaError("r_minus and r_plus must be integers", where)
    try:
        return ConvLayerSpec(Kernel2D(taps, r_minus, r_plus), np.array(bias, dtype=float))
    except ModelSchemaError as exc:
        raise ModelSchemaError(str(exc), where) from None
    except (TypeError, ValueError) as exc:
        raise ModelSchemaError(str(exc), where) from None


def _dense_from_json(obj, k):
    where = f"dense layer {k}"
    try:
        weight = np.array(obj["weight"], dtype=float)
        bias = np.array(obj["bias"], dtype=float)
    except KeyError as exc:
        raise ModelSchemaError(f"missing field {exc.args[0]!r}", where) from None
    except (TypeError, ValueError) as exc:
        raise ModelSchemaError(f"weight is not a rectangular numeric array ({exc})", where) from None
    try:
        return DenseLayerSpec(weight, bias)
    except ModelSchemaError as exc:
        raise ModelSchemaError(str(exc), where) from None


def network_from_dict(doc):
    try:
        geometry = doc["input"]
        height, width, channels = geometry["height"], geometry["width"], geometry["channels"]
        conv = doc["conv_layers"]
    except KeyError as exc:
        raise ModelSchemaError(f"missing field {exc.args[0]!r}") from None
    except TypeError:
        raise ModelSchemaError("model document must be a JSON object") from None
    conv_layers = [_layer_from_json(obj, k) for k, obj in enumerate(conv, start=1)]
    dense_layers = [_dense_from_json(obj, k) for k, obj in enumerate(doc.get("dense_layers", []), start=1)]
    return NetworkSpec(
        input_height=height,
        input_width=width,
        input_channels=channels,
        conv_layers=conv_layers,
        dense_layers=dense_layers,
        activation=doc.get("activation", "relu"),
    )


def network_to_dict(spec):
    return {
        "input": {"height": int(spec.input_height), "width": int(spec.input_width), "channels": int(spec.input_channels)},
        "activation": spec.activation,
        "conv_layers": [
            {
                "r_minus": int(layer.kernel.r_minus),
                "r_plus": int(layer.kernel.r_plus),
                "kernel": layer.kernel.taps.tolist(),
                "bias": layer.bias.tolist(),
            }
            for layer in spec.conv_layers
        ],
        "dense_layers": [{"weight": layer.weight.tolist(), "bias": layer.bias.tolist()} for layer in spec.dense_layers],
    }


def load_network(path):
    """Read and validate a model file."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelParseError(f"{path}: malformed JSON ({exc})") from None
    return network_from_dict(doc)


def save_network(spec, path):
    # json writes doubles with repr, which round-trips exactly
    Path(path).write_text(json.dumps(network_to_dict(spec)), encoding="utf-8")


def random_network(rng, input_size, conv_shapes, dense_sizes=(), channels_in=1, activation="relu", scale=None, bias_scale=0.1):
    """Random network for tests and benchmarks.

    ``conv_shapes`` is a list of ``(width, c_out)`` pairs with centred windows;
    ``dense_sizes`` lists the output sizes of the dense layers.
    """
    conv_layers = []
    c = channels_in
    for width, c_out in conv_shapes:
        std = scale if scale is not None else 1.0 / np.sqrt(c * width * width)
        taps = std * rng.standard_normal((c_out, c, width, width))
        conv_layers.append(ConvLayerSpec.from_taps(taps, bias=bias_scale * rng.standard_normal(c_out)))
        c = c_out
    dense_layers = []
    if dense_sizes:
        probe = NetworkSpec(input_size, input_size, channels_in, conv_layers, activation=activation)
        d_l, c_l = flatten_dims(probe)
        p = d_l * d_l * c_l
        for n_out in dense_sizes:
            std = scale if scale is not None else 1.0 / np.sqrt(p)
            dense_layers.append(DenseLayerSpec(std * rng.standard_normal((n_out, p)), bias_scale * rng.standard_normal(n_out)))
            p = n_out
    return NetworkSpec(input_size, input_size, channels_in, conv_layers, dense_layers, activation)
