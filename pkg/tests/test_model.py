import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from roesserlip.model import (
    ConvLayerSpec,
    DenseLayerSpec,
    GeometryError,
    Kernel2D,
    ModelParseError,
    ModelSchemaError,
    NetworkSpec,
    flatten_dims,
    load_network,
    network_to_dict,
    random_network,
    save_network,
)


def _conv_doc(c_out, c_in, r_minus, r_plus, fill=0.5):
    w = r_minus + r_plus + 1
    return {
        "r_minus": r_minus,
        "r_plus": r_plus,
        "kernel": np.full((c_out, c_in, w, w), fill).tolist(),
        "bias": [0.0] * c_out,
    }


def _write(tmp_path, doc, name="net.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


def test_minimal_document(tmp_path):
    doc = {"input": {"height": 5, "width": 5, "channels": 1}, "activation": "relu",
           "conv_layers": [{"r_minus": 0, "r_plus": 2, "kernel": np.ones((1, 1, 3, 3)).tolist(), "bias": [0.0]}]}
    spec = load_network(_write(tmp_path, doc))
    assert len(spec.conv_layers) == 1
    assert spec.conv_layers[0].kernel.r_plus == 2
    assert spec.dense_layers == ()


def test_chaining_violation_names_layer(tmp_path):
    doc = {"input": {"height": 10, "width": 10, "channels": 1}, "activation": "relu",
           "conv_layers": [_conv_doc(5, 1, 1, 1), _conv_doc(2, 3, 1, 1)]}
    with pytest.raises(ModelSchemaError, match="conv layer 2"):
        load_network(_write(tmp_path, doc))


def test_mnist_shaped_flatten_dimension(tmp_path):
    doc = {"input": {"height": 28, "width": 28, "channels": 1}, "activation": "relu",
           "conv_layers": [_conv_doc(5, 1, 4, 4, 0.01), _conv_doc(5, 5, 2, 2, 0.01)],
           "dense_layers": [{"weight": np.zeros((50, 1280)).tolist(), "bias": [0.0] * 50},
                            {"weight": np.zeros((10, 50)).tolist(), "bias": [0.0] * 10}]}
    spec = load_network(_write(tmp_path, doc))
    d_l, c_l = flatten_dims(spec)
    assert (d_l, c_l) == (16, 5)
    assert d_l * d_l * c_l == 1280


def test_malformed_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(ModelParseError):
        load_network(path)


def test_missing_field_and_bad_dense_dim(tmp_path):
    doc = {"input": {"height": 5, "width": 5, "channels": 1}, "conv_layers": [{"r_minus": 0, "r_plus": 0, "bias": [0.0]}]}
    with pytest.raises(ModelSchemaError, match="conv layer 1.*kernel"):
        load_network(_write(tmp_path, doc))
    doc = {"input": {"height": 5, "width": 5, "channels": 1}, "activation": "tanh",
           "conv_layers": [_conv_doc(1, 1, 0, 0)],
           "dense_layers": [{"weight": np.zeros((3, 24)).tolist(), "bias": [0.0] * 3}]}
    with pytest.raises(ModelSchemaError, match="dense layer 1"):
        load_network(_write(tmp_path, doc))


def test_nonfinite_and_window_mismatch():
    with pytest.raises(ModelSchemaError):
        Kernel2D(np.full((1, 1, 1, 1), np.nan), 0, 0)
    with pytest.raises(ModelSchemaError):
        Kernel2D(np.ones((1, 1, 3, 3)), 0, 1)
    with pytest.raises(ModelSchemaError):
        ConvLayerSpec(Kernel2D(np.ones((2, 1, 1, 1)), 0, 0), np.zeros(3))
    with pytest.raises(ModelSchemaError):
        NetworkSpec(5, 5, 1, [ConvLayerSpec.from_taps(np.ones((1, 1, 1, 1)))], activation="gelu")


def test_flatten_dims_examples():
    one = ConvLayerSpec.from_taps(np.ones((4, 1, 1, 1)))
    assert flatten_dims(NetworkSpec(5, 5, 1, [one])) == (5, 4)
    with pytest.raises(GeometryError):
        NetworkSpec(4, 4, 1, [ConvLayerSpec.from_taps(np.ones((1, 1, 5, 5)))])


def test_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(3)
    spec = random_network(rng, 9, [(3, 2), (2, 3)], [4, 2], channels_in=2, activation="sigmoid")
    path = tmp_path / "rt.json"
    save_network(spec, path)
    back = load_network(path)
    assert network_to_dict(back) == network_to_dict(spec)
    for a, b in zip(spec.conv_layers, back.conv_layers):
        assert np.array_equal(a.kernel.taps, b.kernel.taps)
        assert np.array_equal(a.bias, b.bias)
    for a, b in zip(spec.dense_layers, back.dense_layers):
        assert np.array_equal(a.weight, b.weight)


@settings(max_examples=30, deadline=None)
@given(st.integers(6, 20), st.lists(st.integers(1, 4), min_size=1, max_size=3), st.integers(0, 2))
def test_flatten_dims_monotone_in_width(size, widths, bump):
    def spec_for(ws):
        layers, c = [], 1
        for w in ws:
            layers.append(ConvLayerSpec.from_taps(np.ones((1, c, w, w))))
            c = 1
        return NetworkSpec(size, size, 1, layers)

    try:
        base = flatten_dims(spec_for(widths))[0]
    except GeometryError:
        return
    wider = list(widths)
    wider[0] += bump
    try:
        assert flatten_dims(spec_for(wider))[0] <= base
    except GeometryError:
        pass


def test_dense_layer_shapes():
    layer = DenseLayerSpec(np.ones((3, 4)))
    assert layer.n_in == 4 and layer.n_out == 3
    assert np.array_equal(layer.bias, np.zeros(3))
