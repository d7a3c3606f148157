"""2-D Lur'e systems: a Roesser system in feedback with a static nonlinearity.

At every node the linear part maps (x1, x2, w, u) to (x1+, x2+, z, y):

    [x1+]   [A11 A12 B11 B12] [x1]   [f1]
    [x2+] = [A21 A22 B21 B22] [x2] + [f2]         w = phi(z)
    [ z ]   [C11 C12 D11 D12] [ w]   [g1]
    [ y ]   [C21 C22 D21 D22] [ u]   [g2]

For a conv stack, z collects the pre-activations of layers 1..l-1 and w the
corresponding activations, which are the inputs of layers 2..l. D11 is
strictly block lower triangular, so the loop is solved by forward substitution.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .model import ModelSchemaError
from .realization import realize_conv
from .signal2d import Signal2D, activation_fn

LINEAR_BLOCKS = (
    "mA11", "mA12", "mB11", "mB12",
    "mA21", "mA22", "mB21", "mB22",
    "mC11", "mC12", "mD11", "mD12",
    "mC21", "mC22", "mD21", "mD22",
)


class StructureError(ValueError):
    pass


@dataclass(frozen=True)
class LureSystem:
    mA11: np.ndarray
    mA12: np.ndarray
    mB11: np.ndarray
    mB12: np.ndarray
    mA21: np.ndarray
    mA22: np.ndarray
    mB21: np.ndarray
    mB22: np.ndarray
    mC11: np.ndarray
    mC12: np.ndarray
    mD11: np.ndarray
    mD12: np.ndarray
    mC21: np.ndarray
    mC22: np.ndarray
    mD21: np.ndarray
    mD22: np.ndarray
    f1: np.ndarray
    f2: np.ndarray
    g1: np.ndarray
    g2: np.ndarray
    r: int
    z_blocks: tuple
    layer_boundaries: dict = field(default_factory=dict, compare=False)
    incremental: bool = False
    widths: tuple = ()

    def __post_init__(self):
        n1, n2 = self.mA11.shape[0], self.mA22.shape[0]
        nz = int(sum(self.z_blocks))
        c_in, c_out = self.mB12.shape[1], self.mC21.shape[0]
        shapes = {
            "mA11": (n1, n1), "mA12": (n1, n2), "mB11": (n1, nz), "mB12": (n1, c_in),
            "mA21": (n2, n1), "mA22": (n2, n2), "mB21": (n2, nz), "mB22": (n2, c_in),
            "mC11": (nz, n1), "mC12": (nz, n2), "mD11": (nz, nz), "mD12": (nz, c_in),
            "mC21": (c_out, n1), "mC22": (c_out, n2), "mD21": (c_out, nz), "mD22": (c_out, c_in),
        }
        for name, shape in shapes.items():
            mat = np.asarray(getattr(self, name), dtype=float)
            if mat.shape != shape:
                raise StructureError(f"{name} has shape {mat.shape}, expected {shape}")
            object.__setattr__(self, name, mat)
        for name, size in (("f1", n1), ("f2", n2), ("g1", nz), ("g2", c_out)):
            vec = np.asarray(getattr(self, name), dtype=float)
            if vec.shape != (size,):
                raise StructureError(f"{name} has length {vec.size}, expected {size}")
            object.__setattr__(self, name, vec)
        check_cascade(self.mD11, self.z_blocks)

    @property
    def n1(self):
        return self.mA11.shape[0]

    @property
    def n2(self):
        return self.mA22.shape[0]

    @property
    def nz(self):
        return self.mD11.shape[0]

    @property
    def c_in(self):
        return self.mB12.shape[1]

    @property
    def c_out(self):
        return self.mC21.shape[0]

    def block_matrix(self):
        """The full (n1+n2+nz+c_out) x (n1+n2+nz+c_in) linear map."""
        return np.block([
            [self.mA11, self.mA12, self.mB11, self.mB12],
            [self.mA21, self.mA22, self.mB21, self.mB22],
            [self.mC11, self.mC12, self.mD11, self.mD12],
            [self.mC21, self.mC22, self.mD21, self.mD22],
        ])

    def z_slices(self):
        edges = np.concatenate([[0], np.cumsum(self.z_blocks)]).astype(int)
        return [slice(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]


def check_cascade(D11, z_blocks):
    """Raise unless D11 is strictly block lower triangular for the given blocking."""
    edges = np.concatenate([[0], np.cumsum(z_blocks)]).astype(int)
    for k in range(len(z_blocks)):
        rows = slice(edges[k], edges[k + 1])
        if np.any(D11[rows, edges[k]:]):
            raise StructureError(f"D11 is not strictly block lower triangular (block row {k})")


def assemble_lure(conv_layers, final_activation=False):
    """Stack per-layer Roesser realizations into one Lur'e system.

    z holds y(1), ..., y(l-1) and w = sigma(z) feeds layers 2..l. With
    ``final_activation`` the last pre-activation y(l) is also routed through the
    nonlinearity and the output is sigma(y(l)), which is what a dense head sees.
    Layer k is evaluated at a node offset by the delays of the layers after it,
    so the total delay is the sum of the per-layer delays.
    """
    layers = list(conv_layers)
    if not layers:
        raise ModelSchemaError("at least one conv layer is required")
    for k in range(1, len(layers)):
        if layers[k].c_in != layers[k - 1].c_out:
            raise ModelSchemaError(
                f"c_in={layers[k].c_in} does not match previous c_out={layers[k - 1].c_out}", f"conv layer {k + 1}"
            )
    reals = [realize_conv(layer) for layer in layers]
    l = len(reals)
    n1s = [s.n1 for s in reals]
    n2s = [s.n2 for s in reals]
    e1 = np.concatenate([[0], np.cumsum(n1s)]).astype(int)
    e2 = np.concatenate([[0], np.cumsum(n2s)]).astype(int)
    n1, n2 = int(e1[-1]), int(e2[-1])
    nblocks = l if final_activation else l - 1
    z_blocks = tuple(reals[k].c_out for k in range(nblocks))
    ez = np.concatenate([[0], np.cumsum(z_blocks)]).astype(int)
    nz = int(ez[-1])
    c_in = reals[0].c_in
    c_out = reals[-1].c_out
    M = {name: None for name in LINEAR_BLOCKS}
    M["mA11"], M["mA12"], M["mA21"], M["mA22"] = (np.zeros(s) for s in ((n1, n1), (n1, n2), (n2, n1), (n2, n2)))
    M["mB11"], M["mB12"] = np.zeros((n1, nz)), np.zeros((n1, c_in))
    M["mB21"], M["mB22"] = np.zeros((n2, nz)), np.zeros((n2, c_in))
    M["mC11"], M["mC12"] = np.zeros((nz, n1)), np.zeros((nz, n2))
    M["mD11"], M["mD12"] = np.zeros((nz, nz)), np.zeros((nz, c_in))
    M["mC21"], M["mC22"] = np.zeros((c_out, n1)), np.zeros((c_out, n2))
    M["mD21"], M["mD22"] = np.zeros((c_out, nz)), np.zeros((c_out, c_in))
    g1 = np.zeros(nz)
    g2 = np.zeros(c_out)
    for k, s in enumerate(reals):
        r1 = slice(e1[k], e1[k + 1])
        r2 = slice(e2[k], e2[k + 1])
        M["mA11"][r1, r1] = s.A11
        M["mA12"][r1, r2] = s.A12
        M["mA21"][r2, r1] = s.A21
        M["mA22"][r2, r2] = s.A22
        if k == 0:
            M["mB12"][r1] = s.B1
            M["mB22"][r2] = s.B2
        else:
            wk = slice(ez[k - 1], ez[k])
            M["mB11"][r1, wk] = s.B1
            M["mB21"][r2, wk] = s.B2
        if k < nblocks:
            zk = slice(ez[k], ez[k + 1])
            M["mC11"][zk, r1] = s.C1
            M["mC12"][zk, r2] = s.C2
            if k == 0:
                M["mD12"][zk] = s.D
            else:
                M["mD11"][zk, ez[k - 1]:ez[k]] = s.D
            g1[zk] = s.g
    last = reals[-1]
    if final_activation:
        M["mD21"][:, ez[l - 1]:ez[l]] = np.eye(c_out)
    else:
        M["mC21"][:, e1[l - 1]:e1[l]] = last.C1
        M["mC22"][:, e2[l - 1]:e2[l]] = last.C2
        if l == 1:
            M["mD22"] = last.D.copy()
        else:
            M["mD21"][:, ez[l - 2]:ez[l - 1]] = last.D
        g2 = last.g.copy()
    boundaries = {
        "x1": [(int(e1[k]), int(e1[k + 1])) for k in range(l)],
        "x2": [(int(e2[k]), int(e2[k + 1])) for k in range(l)],
        "z": [(int(ez[k]), int(ez[k + 1])) for k in range(nblocks)],
        "final_activation": bool(final_activation),
    }
    return LureSystem(
        **M, f1=np.zeros(n1), f2=np.zeros(n2), g1=g1, g2=g2,
        r=int(sum(layer.kernel.r_minus for layer in layers)),
        z_blocks=z_blocks, layer_boundaries=boundaries,
        widths=tuple(layer.kernel.width - 1 for layer in layers),
    )


def error_system(sys):
    """Incremental dynamics: identical linear blocks, zero affine terms.

    The nonlinearity of the error system is the shifted family
    phi~(z~) = phi(z~ + z1) - phi(z1) along a reference trajectory z1, which
    lure_forward applies when given ``z_offset``.
    """
    return replace(
        sys,
        f1=np.zeros_like(sys.f1), f2=np.zeros_like(sys.f2),
        g1=np.zeros_like(sys.g1), g2=np.zeros_like(sys.g2),
        incremental=True,
    )


@dataclass
class LureTrajectory:
    start: tuple
    v: np.ndarray
    x1: np.ndarray
    x2: np.ndarray
    z: np.ndarray
    w: np.ndarray
    y: np.ndarray
    x1_next: np.ndarray = None
    x2_next: np.ndarray = None

    def output_signal(self, k=0):
        return Signal2D(self.start, self.y[k])


def lure_sweep(sys, phi, v, z_offset=None, return_states=True):
    """Solve the Lur'e recursion on a batch of delayed-input grids (batch, N1, N2, c_in).

    ``phi`` acts elementwise. With ``z_offset`` (batch, N1, N2, nz) the nonlinearity
    is phi(z + z_offset) - phi(z_offset), the incremental family of the error system.
    """
    v = np.asarray(v, dtype=float)
    batch, N1, N2, _ = v.shape
    n1, n2, nz = sys.n1, sys.n2, sys.nz
    slices = sys.z_slices()
    y = np.empty((batch, N1, N2, sys.c_out))
    z_all = np.empty((batch, N1, N2, nz))
    w_all = np.empty((batch, N1, N2, nz))
    keep = return_states
    x1_all = np.empty((batch, N1, N2, n1)) if keep else None
    x2_all = np.empty((batch, N1, N2, n2)) if keep else None
    x1n_all = np.empty((batch, N1, N2, n1)) if keep else None
    x2n_all = np.empty((batch, N1, N2, n2)) if keep else None
    At = {k: getattr(sys, k).T for k in LINEAR_BLOCKS}
    x1_next_row = np.zeros((batch, N2, n1))
    for a in range(N1):
        x1_row = x1_next_row
        x2 = np.zeros((batch, n2))
        z_lin_row = sys.g1 + x1_row @ At["mC11"] + v[:, a] @ At["mD12"]
        x1_next_row = np.empty((batch, N2, n1))
        for b in range(N2):
            x1 = x1_row[:, b]
            vb = v[:, a, b]
            zb = z_lin_row[:, b] + x2 @ At["mC12"]
            wb = np.zeros((batch, nz))
            for k, sl in enumerate(slices):
                if k > 0:
                    zb[:, sl] += wb @ At["mD11"][:, sl]
                if z_offset is None:
                    wb[:, sl] = phi(zb[:, sl])
                else:
                    off = z_offset[:, a, b, sl]
                    wb[:, sl] = phi(zb[:, sl] + off) - phi(off)
            z_all[:, a, b] = zb
            w_all[:, a, b] = wb
            y[:, a, b] = sys.g2 + x1 @ At["mC21"] + x2 @ At["mC22"] + wb @ At["mD21"] + vb @ At["mD22"]
            x1n = sys.f1 + x1 @ At["mA11"] + x2 @ At["mA12"] + wb @ At["mB11"] + vb @ At["mB12"]
            x2n = sys.f2 + x1 @ At["mA21"] + x2 @ At["mA22"] + wb @ At["mB21"] + vb @ At["mB22"]
            x1_next_row[:, b] = x1n
            if keep:
                x1_all[:, a, b] = x1
                x2_all[:, a, b] = x2
                x1n_all[:, a, b] = x1n
                x2n_all[:, a, b] = x2n
            x2 = x2n
    return y, z_all, w_all, x1_all, x2_all, x1n_all, x2n_all


def lure_frame(sys, u):
    start = (u.origin[0] - sys.r, u.origin[1] - sys.r)
    extent = sum(sys.widths) if sys.widths else sys.n1 + sys.n2
    return start, (u.shape[0] + extent, u.shape[1] + extent)


def lure_forward(sys, phi, u, region=None, start=None, z_offset=None):
    """Simulate the Lur'e system on a finite-support input with zero boundary states.

    ``phi`` is an activation name or an elementwise callable. Node (i1, i2) of the
    frame is the absolute index start + (i1, i2) and reads u at that index plus r.
    Returns a LureTrajectory (batch axis of length one).
    """
    if isinstance(phi, str):
        phi = activation_fn(phi)
    d_start, d_region = lure_frame(sys, u)
    start = d_start if start is None else start
    region = d_region if region is None else region
    if region[0] <= 0 or region[1] <= 0:
        raise ValueError("simulation region must be positive")
    v = u.window((start[0] + sys.r, start[1] + sys.r), region)[None]
    if z_offset is not None and z_offset.ndim == 3:
        z_offset = z_offset[None]
    y, z, w, x1, x2, x1n, x2n = lure_sweep(sys, phi, v, z_offset)
    return LureTrajectory(start, v, x1, x2, z, w, y, x1n, x2n)


def error_trajectory(sys, phi, u1, u2, region=None, start=None):
    """Run the error system on u2 - u1 with the nonlinearity shifted along the u1 trajectory."""
    if isinstance(phi, str):
        phi = activation_fn(phi)
    d_start, d_region = lure_frame(sys, u1)
    d_start2, d_region2 = lure_frame(sys, u2)
    if start is None:
        start = (min(d_start[0], d_start2[0]), min(d_start[1], d_start2[1]))
    if region is None:
        end = (max(d_start[0] + d_region[0], d_start2[0] + d_region2[0]),
               max(d_start[1] + d_region[1], d_start2[1] + d_region2[1]))
        region = (end[0] - start[0], end[1] - start[1])
    ref = lure_forward(sys, phi, u1, region, start)
    lo = (start[0] + sys.r, start[1] + sys.r)
    du = u2.window(lo, region) - u1.window(lo, region)
    err = error_system(sys)
    y, z, w, x1, x2, x1n, x2n = lure_sweep(err, phi, du[None], ref.z)
    return LureTrajectory(start, du[None], x1, x2, z, w, y, x1n, x2n), ref
