from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from roesserlip.lure import (
    StructureError,
    assemble_lure,
    check_cascade,
    error_system,
    error_trajectory,
    lure_forward,
)
from roesserlip.model import ConvLayerSpec
from roesserlip.signal2d import Signal2D, conv_stack_forward


def _layers(rng, shapes, c_in=1, bias=True):
    layers, c = [], c_in
    for width, c_out in shapes:
        b = rng.standard_normal(c_out) if bias else None
        layers.append(ConvLayerSpec.from_taps(rng.standard_normal((c_out, c, width, width)) / width, bias=b))
        c = c_out
    return layers


def _compare(traj, ref):
    """Compare a Lur'e output with a full-support composition on the common window."""
    y = traj.output_signal()
    assert y.origin == ref.origin
    n1, n2 = ref.data.shape[:2]
    assert y.data.shape[0] >= n1 and y.data.shape[1] >= n2
    return np.max(np.abs(y.data[:n1, :n2] - ref.data))


def _valid_window(layers, u):
    """Absolute index range where every receptive field lies inside the input support."""
    lo = (u.origin[0] + sum(l.kernel.r_plus for l in layers), u.origin[1] + sum(l.kernel.r_plus for l in layers))
    hi = (u.origin[0] + u.shape[0] - 1 - sum(l.kernel.r_minus for l in layers),
          u.origin[1] + u.shape[1] - 1 - sum(l.kernel.r_minus for l in layers))
    return lo, hi


@pytest.mark.parametrize("activation", ["relu", "tanh"])
@pytest.mark.parametrize("shapes", [[(3, 1), (3, 1)], [(3, 2), (2, 3), (3, 1)], [(1, 2), (4, 2)]])
def test_cascade_matches_composition(activation, shapes):
    rng = np.random.default_rng(len(shapes))
    layers = _layers(rng, shapes, c_in=2, bias=False)
    u = Signal2D((1, 2), rng.standard_normal((7, 8, 2)))
    ref = conv_stack_forward(layers, u, activation, include_bias=False)
    assert _compare(lure_forward(assemble_lure(layers), activation, u), ref) <= 1e-10


@pytest.mark.parametrize("activation", ["relu", "tanh", "sigmoid"])
def test_cascade_with_bias_on_valid_window(activation):
    # the composition adds each bias only on its stored window while the Lur'e
    # system adds it (and sigma(0), nonzero for the sigmoid) at every node, so
    # they agree where the receptive field is inside the support
    rng = np.random.default_rng(9)
    layers = _layers(rng, [(3, 2), (2, 2), (3, 1)])
    u = Signal2D((0, 0), rng.standard_normal((9, 9, 1)))
    y = lure_forward(assemble_lure(layers), activation, u).output_signal()
    ref = conv_stack_forward(layers, u, activation)
    lo, hi = _valid_window(layers, u)
    shape = (hi[0] - lo[0] + 1, hi[1] - lo[1] + 1)
    assert shape[0] > 0
    assert np.max(np.abs(y.window(lo, shape) - ref.window(lo, shape))) <= 1e-10


@pytest.mark.parametrize("activation", ["relu", "tanh"])
def test_final_activation_output(activation):
    rng = np.random.default_rng(5)
    layers = _layers(rng, [(3, 2), (3, 2)], bias=False)
    sys = assemble_lure(layers, final_activation=True)
    u = Signal2D((0, 0), rng.standard_normal((4, 4, 1)))
    ref = conv_stack_forward(layers, u, activation, include_bias=False, final_activation=True)
    assert _compare(lure_forward(sys, activation, u), ref) <= 1e-10
    assert sys.nz == 4


def test_scalar_two_layer_blocks():
    a, b = -3.0, 0.5
    layers = [ConvLayerSpec.from_taps(np.full((1, 1, 1, 1), a)), ConvLayerSpec.from_taps(np.full((1, 1, 1, 1), b))]
    sys = assemble_lure(layers)
    assert sys.n1 == 0 and sys.n2 == 0
    assert np.array_equal(sys.mD12, [[a]])
    assert np.array_equal(sys.mD21, [[b]])
    assert np.array_equal(sys.mD11, [[0.0]])
    assert np.array_equal(sys.mD22, [[0.0]])
    u = Signal2D((0, 0), np.array([[[1.0], [-2.0]]]))
    traj = lure_forward(sys, "relu", u)
    assert np.allclose(traj.y[0, :, :2, 0], b * np.maximum(a * u.data[:, :, 0], 0))


def test_cascade_structure_enforced():
    rng = np.random.default_rng(1)
    sys = assemble_lure(_layers(rng, [(3, 1), (3, 2), (1, 1)]))
    check_cascade(sys.mD11, sys.z_blocks)
    assert sys.z_blocks == (1, 2)
    bad = sys.mD11.copy()
    bad[0, 0] = 1.0
    with pytest.raises(StructureError):
        replace(sys, mD11=bad)


def test_delay_and_dimensions():
    rng = np.random.default_rng(2)
    layers = _layers(rng, [(3, 2), (5, 1)])
    sys = assemble_lure(layers)
    assert sys.r == 1 + 2
    assert sys.n1 == 6 * 1 + 20 * 2
    assert sys.nz == 2


def test_error_system_zeroes_affine_terms():
    rng = np.random.default_rng(3)
    sys = assemble_lure(_layers(rng, [(3, 2), (3, 1)]))
    err = error_system(sys)
    assert err.incremental
    assert not np.any(err.g1) and not np.any(err.g2)
    assert np.array_equal(err.mD12, sys.mD12) and np.array_equal(err.mA12, sys.mA12)


@pytest.mark.parametrize("activation", ["relu", "tanh", "sigmoid"])
def test_error_trajectory_is_exact_difference(activation):
    rng = np.random.default_rng(4)
    sys = assemble_lure(_layers(rng, [(3, 2), (3, 2), (2, 1)]))
    u1 = Signal2D((0, 0), rng.standard_normal((5, 5, 1)))
    u2 = Signal2D((0, 0), u1.data + 0.3 * rng.standard_normal((5, 5, 1)))
    err, ref = error_trajectory(sys, activation, u1, u2)
    other = lure_forward(sys, activation, u2, region=ref.y.shape[1:3], start=ref.start)
    assert np.max(np.abs(err.y - (other.y - ref.y))) <= 1e-12
    assert np.max(np.abs(err.z - (other.z - ref.z))) <= 1e-12
    assert np.max(np.abs(err.x1 - (other.x1 - ref.x1))) <= 1e-12


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_error_nonlinearity_is_slope_restricted(seed):
    rng = np.random.default_rng(seed)
    sys = assemble_lure(_layers(rng, [(2, 2), (2, 1)]))
    u1 = Signal2D((0, 0), rng.standard_normal((3, 3, 1)))
    u2 = Signal2D((0, 0), rng.standard_normal((3, 3, 1)))
    err, _ = error_trajectory(sys, "tanh", u1, u2)
    # 0 <= w z and w^2 <= w z for slopes in [0, 1]
    assert np.all(err.w * err.z >= -1e-14)
    assert np.all(err.w**2 <= err.w * err.z + 1e-14)


def test_rejects_channel_mismatch():
    rng = np.random.default_rng(0)
    layers = _layers(rng, [(3, 2)]) + [ConvLayerSpec.from_taps(np.ones((1, 3, 1, 1)))]
    with pytest.raises(ValueError, match="conv layer 2"):
        assemble_lure(layers)
