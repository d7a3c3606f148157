"""Three ways to bound the gain of a single convolution layer.

* the Toeplitz norm at input size d1 is exact for that size and grows with d1;
* the frequency-grid norm approaches the gain on the infinite plane from below;
* the dissipativity SDP gives a certified upper bound.

For single layers the certified bound sits on top of the grid norm.
"""
import numpy as np

from roesserlip.lmi import estimate_lipschitz_layer
from roesserlip.model import ConvLayerSpec
from roesserlip.sdpsolve import validate_certificate
from roesserlip.signal2d import hinf_grid, toeplitz_norm

rng = np.random.default_rng(1)
print(f"{'toeplitz d1=5':>14} {'d1=20':>8} {'d1=50':>8} {'grid':>8} {'SDP':>8}  valid")
for _ in range(5):
    layer = ConvLayerSpec.from_taps(rng.standard_normal((1, 1, 3, 3)))
    cert = estimate_lipschitz_layer(layer)
    ok = validate_certificate(layer, cert, trials=20).passed
    toep = [toeplitz_norm(layer, d) for d in (5, 20, 50)]
    print(f"{toep[0]:14.4f} {toep[1]:8.4f} {toep[2]:8.4f} {hinf_grid(layer):8.4f} {cert.gamma:8.4f}  {ok}")

# the averaging kernel has unit gain at zero frequency, so every method gives 1
avg = ConvLayerSpec.from_taps(np.full((1, 1, 3, 3), 1 / 9))
print(f"averaging kernel: SDP bound {estimate_lipschitz_layer(avg).gamma:.6f}")
