"""Finite-support 2-D signals, direct convolution, and two norm baselines.

Index convention: a signal value u(i1, i2) lives at ``data[i1 - o1, i2 - o2]``
where ``(o1, o2)`` is the origin. Vectorization follows the flattening order
u(1,1), ..., u(d,1), u(1,2), ..., so i1 runs fastest and the channel index is
innermost.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import svds

from .model import GeometryError, ModelSchemaError

TOEPLITZ_ELEMENT_BUDGET = 5 * 10**7
DENSE_SVD_LIMIT = 1500


def relu(x):
    return np.maximum(x, 0.0)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


ACTIVATION_FUNCS = {"relu": relu, "tanh": np.tanh, "sigmoid": sigmoid}


def activation_fn(name):
    try:
        return ACTIVATION_FUNCS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}") from None


@dataclass(frozen=True)
class Signal2D:
    origin: tuple
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3:
            raise ValueError("signal data must be [height][width][channels]")
        if not np.all(np.isfinite(data)):
            raise ValueError("signal contains non-finite entries")
        object.__setattr__(self, "origin", (int(self.origin[0]), int(self.origin[1])))
        object.__setattr__(self, "data", data)

    @property
    def shape(self):
        return self.data.shape

    @property
    def channels(self):
        return self.data.shape[2]

    @property
    def lo(self):
        return self.origin

    @property
    def hi(self):
        """Last stored index along each axis (inclusive)."""
        return (self.origin[0] + self.data.shape[0] - 1, self.origin[1] + self.data.shape[1] - 1)

    def __getitem__(self, idx):
        i1, i2 = idx
        a, b = i1 - self.origin[0], i2 - self.origin[1]
        if 0 <= a < self.data.shape[0] and 0 <= b < self.data.shape[1]:
            return self.data[a, b]
        return np.zeros(self.channels)

    def window(self, lo, shape):
        """Values on the rectangle starting at ``lo`` with spatial ``shape``, zero outside the support."""
        out = np.zeros((shape[0], shape[1], self.channels))
        a0 = max(lo[0], self.origin[0])
        b0 = max(lo[1], self.origin[1])
        a1 = min(lo[0] + shape[0], self.origin[0] + self.data.shape[0])
        b1 = min(lo[1] + shape[1], self.origin[1] + self.data.shape[1])
        if a1 > a0 and b1 > b0:
            out[a0 - lo[0]:a1 - lo[0], b0 - lo[1]:b1 - lo[1]] = self.data[
                a0 - self.origin[0]:a1 - self.origin[0], b0 - self.origin[1]:b1 - self.origin[1]
            ]
        return out

    def energy(self):
        return float(np.sum(self.data**2))

    @staticmethod
    def impulse(at, channels=1, channel=0, height=1.0):
        data = np.zeros((1, 1, channels))
        data[0, 0, channel] = height
        return Signal2D(at, data)


def conv_forward(layer, u, include_bias=True):
    """Direct evaluation of y(i) = b + sum_j K(j) u(i - j) on the full output support.

    For an input stored on [lo, hi] per axis the output is stored on
    [lo - r_minus, hi + r_plus]. The bias, when included, is added on that
    stored window only.
    """
    kernel = layer.kernel
    if u.channels != kernel.c_in:
        raise ModelSchemaError(f"signal has {u.channels} channels, layer expects {kernel.c_in}")
    h, w, _ = u.shape
    width = kernel.width
    out = np.zeros((h + width - 1, w + width - 1, kernel.c_out))
    for t1 in range(width):
        for t2 in range(width):
            k = kernel.taps[:, :, t1, t2]
            if np.any(k):
                out[t1:t1 + h, t2:t2 + w] += u.data @ k.T
    if include_bias:
        out += layer.bias
    return Signal2D((u.origin[0] - kernel.r_minus, u.origin[1] - kernel.r_minus), out)


def valid_crop(signal, lo, hi, layer):
    """Crop a conv output to the indices whose window lies inside the input range [lo, hi]."""
    new_lo = lo + layer.kernel.r_plus
    new_hi = hi - layer.kernel.r_minus
    if new_hi < new_lo:
        raise GeometryError("valid region is empty")
    n = new_hi - new_lo + 1
    return Signal2D((new_lo, new_lo), signal.window((new_lo, new_lo), (n, n))), new_lo, new_hi


def embed_image(image, origin=(1, 1)):
    """S1: place a d1 x d1 x c array at (1, 1) with zeros elsewhere."""
    image = np.asarray(image, dtype=float)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.ndim != 3:
        raise GeometryError("image must be [height][width][channels]")
    return Signal2D(origin, image.copy())


def flatten_signal(signal, d, lo=(1, 1)):
    """S2: enumerate u(1,1)..u(d,1)..u(1,d)..u(d,d) into one vector of length d*d*c."""
    block = signal.window(lo, (d, d))
    return block.transpose(1, 0, 2).reshape(-1)


def unflatten_signal(vec, d, channels, lo=(1, 1)):
    vec = np.asarray(vec, dtype=float)
    if vec.size != d * d * channels:
        raise GeometryError(f"vector of length {vec.size} does not match {d}x{d}x{channels}")
    return Signal2D(lo, vec.reshape(d, d, channels).transpose(1, 0, 2))


def conv_stack_forward(layers, u, activation="relu", include_bias=True, final_activation=False):
    """Full-support composition C_l o sigma o ... o C_1 (no cropping)."""
    act = activation_fn(activation)
    y = u
    for k, layer in enumerate(layers):
        if k > 0:
            y = Signal2D(y.origin, act(y.data))
        y = conv_forward(layer, y, include_bias)
    if final_activation:
        y = Signal2D(y.origin, act(y.data))
    return y


def network_forward(spec, image):
    """Evaluate the network on one image of shape (height, width, channels)."""
    image = np.asarray(image, dtype=float)
    if image.ndim == 2:
        image = image[:, :, None]
    expected = (spec.input_height, spec.input_width, spec.input_channels)
    if image.shape != expected:
        raise GeometryError(f"image shape {image.shape} does not match network input {expected}")
    if spec.input_height != spec.input_width:
        raise GeometryError("square inputs are required")
    act = activation_fn(spec.activation)
    lo, hi = 1, spec.input_height
    y = embed_image(image)
    for k, layer in enumerate(spec.conv_layers):
        if k > 0:
            y = Signal2D(y.origin, act(y.data))
        y = conv_forward(layer, y, include_bias=True)
        y, lo, hi = valid_crop(y, lo, hi, layer)
    d = hi - lo + 1
    v = flatten_signal(y, d, (lo, lo))
    if not spec.dense_layers:
        return v
    v = act(v)
    for k, layer in enumerate(spec.dense_layers):
        if k > 0:
            v = act(v)
        v = layer.weight @ v + layer.bias
    return v


def network_forward_batch(spec, images):
    """Vectorized evaluation over a leading batch axis; equivalent to mapping network_forward."""
    images = np.asarray(images, dtype=float)
    if images.ndim == 3:
        images = images[..., None]
    act = activation_fn(spec.activation)
    x = images
    for k, layer in enumerate(spec.conv_layers):
        if k > 0:
            x = act(x)
        taps = layer.kernel.taps
        width = layer.kernel.width
        n = x.shape[1] - width + 1
        if n <= 0:
            raise GeometryError("valid region is empty")
        out = np.zeros((x.shape[0], n, n, layer.c_out))
        # valid output at local index m uses input m + width - 1 - t
        for t1 in range(width):
            for t2 in range(width):
                s1, s2 = width - 1 - t1, width - 1 - t2
                out += x[:, s1:s1 + n, s2:s2 + n, :] @ taps[:, :, t1, t2].T
        x = out + layer.bias
    v = x.transpose(0, 2, 1, 3).reshape(x.shape[0], -1)
    if not spec.dense_layers:
        return v
    v = act(v)
    for k, layer in enumerate(spec.dense_layers):
        if k > 0:
            v = act(v)
        v = v @ layer.weight.T + layer.bias
    return v


def toeplitz_matrix(layer, d1, sparse=False, budget=None):
    """Matrix of the convolution from a d1 x d1 x c_in input to its full-support output.

    Rows and columns use the flattening order (i1 fastest, channel innermost).
    """
    if d1 < 1:
        raise ValueError("d1 must be positive")
    kernel = layer.kernel
    width = kernel.width
    n_out = d1 + width - 1
    rows_total = n_out * n_out * kernel.c_out
    cols_total = d1 * d1 * kernel.c_in
    budget = TOEPLITZ_ELEMENT_BUDGET if budget is None else budget
    nnz_estimate = width * width * kernel.c_out * cols_total
    if (not sparse and rows_total * cols_total > budget) or nnz_estimate > budget:
        raise MemoryError(f"Toeplitz matrix {rows_total}x{cols_total} exceeds the element budget {budget}")
    p1, p2 = np.meshgrid(np.arange(d1), np.arange(d1), indexing="ij")
    rows, cols, vals = [], [], []
    co = np.arange(kernel.c_out)
    ci = np.arange(kernel.c_in)
    for t1 in range(width):
        for t2 in range(width):
            k = kernel.taps[:, :, t1, t2]
            if not np.any(k):
                continue
            q1, q2 = p1 + t1, p2 + t2
            out_node = (q2 * n_out + q1).reshape(-1)
            in_node = (p2 * d1 + p1).reshape(-1)
            r = (out_node[:, None, None] * kernel.c_out + co[None, :, None]) + 0 * ci[None, None, :]
            c = (in_node[:, None, None] * kernel.c_in + ci[None, None, :]) + 0 * co[None, :, None]
            rows.append(r.reshape(-1))
            cols.append(c.reshape(-1))
            vals.append(np.broadcast_to(k, (in_node.size,) + k.shape).reshape(-1))
    if rows:
        mat = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(rows_total, cols_total)
        )
    else:
        mat = sp.csr_matrix((rows_total, cols_total))
    return mat if sparse else mat.toarray()


def toeplitz_norm(layer, d1, tol=1e-10, restarts=3, seed=0):
    """Spectral norm of the finite convolution matrix, a lower bound on the l2 gain.

    Small matrices use a dense SVD. Larger ones use ARPACK (Lanczos on M^T M)
    from ``restarts`` seeded starting vectors, keeping the largest value.
    """
    shape_cols = d1 * d1 * layer.c_in
    n_out = d1 + layer.kernel.width - 1
    shape_rows = n_out * n_out * layer.c_out
    if min(shape_rows, shape_cols) <= DENSE_SVD_LIMIT:
        mat = toeplitz_matrix(layer, d1)
        return float(np.linalg.norm(mat, 2)) if mat.size else 0.0
    mat = toeplitz_matrix(layer, d1, sparse=True)
    if mat.nnz == 0:
        return 0.0
    rng = np.random.default_rng(seed)
    best = 0.0
    for _ in range(restarts):
        v0 = rng.standard_normal(min(mat.shape))
        s = svds(mat, k=1, tol=tol, v0=v0, return_singular_vectors=False, solver="arpack", maxiter=20000)
        best = max(best, float(s[0]))
    return best


def transfer_grid(layer, grid_n):
    """Kernel DFT on an n x n grid of the torus, shape (n, n, c_out, c_in)."""
    taps = layer.kernel.taps
    width = layer.kernel.width
    folded = np.zeros(taps.shape[:2] + (grid_n, grid_n))
    # folding indices modulo n keeps the DFT exact when the window exceeds the grid
    for t1 in range(width):
        for t2 in range(width):
            folded[:, :, t1 % grid_n, t2 % grid_n] += taps[:, :, t1, t2]
    g = np.fft.fft2(folded, axes=(2, 3))
    return g.transpose(2, 3, 0, 1)


def hinf_grid(layer, grid_n=512):
    """Largest singular value of the transfer matrix over a uniform grid_n x grid_n frequency grid.

    A lower bound on the H-infinity norm that converges from below as the grid refines.
    """
    if grid_n < 2:
        raise ValueError("grid_n must be at least 2")
    g = transfer_grid(layer, grid_n)
    if g.shape[2] == 1 or g.shape[3] == 1:
        return float(np.sqrt(np.max(np.sum(np.abs(g) ** 2, axis=(2, 3)))))
    flat = g.reshape(-1, g.shape[2], g.shape[3])
    best = 0.0
    for start in range(0, flat.shape[0], 65536):
        s = np.linalg.svd(flat[start:start + 65536], compute_uv=False)
        best = max(best, float(s[:, 0].max()))
    return best
