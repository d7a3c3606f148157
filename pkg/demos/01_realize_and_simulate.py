"""A convolution layer as a 2-D state-space system.

A 3x3 kernel is realized as a Roesser system whose states hold delayed input
samples. Running the state recursion over the plane reproduces the
convolution exactly, and only part of the state space is ever visited.
"""
import numpy as np

from roesserlip.model import ConvLayerSpec
from roesserlip.realization import reachable_subspace, realize_conv, simulate
from roesserlip.signal2d import Signal2D, conv_forward

rng = np.random.default_rng(0)
layer = ConvLayerSpec.from_taps(rng.standard_normal((1, 1, 3, 3)), bias=np.array([0.2]))

sys = realize_conv(layer)
print(f"horizontal states n1 = {sys.n1}, vertical states n2 = {sys.n2}, delay r = {sys.r}")

# the realization is exact on any finite input
u = Signal2D((0, 0), rng.standard_normal((8, 8, 1)))
y_state = simulate(sys, u)
y_conv = conv_forward(layer, u)
print(f"max |state-space - convolution| = {np.max(np.abs(y_state.data - y_conv.data)):.1e}")

# 12 states are carried around, but the reachable ones span only 8 directions;
# the Lipschitz SDP is posed on this smaller subspace
T = reachable_subspace(sys)
print(f"reachable subspace dimension = {T.shape[1]} of {sys.n1 + sys.n2}")
