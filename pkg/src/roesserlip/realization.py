"""Roesser realizations of convolutional layers, their simulation, and reachability.

A Roesser system with delay r evolves on the quarter plane as

    x1(i1+1, i2) = f1 + A11 x1 + A12 x2 + B1 u(i1+r, i2+r)
    x2(i1, i2+1) = f2 + A21 x1 + A22 x2 + B2 u(i1+r, i2+r)
    y(i1, i2)    = g  + C1 x1  + C2 x2  + D  u(i1+r, i2+r)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .signal2d import Signal2D

BLOCKS = ("A11", "A12", "A21", "A22", "B1", "B2", "C1", "C2", "D")


@dataclass(frozen=True)
class RoesserRealization:
    A11: np.ndarray
    A12: np.ndarray
    A21: np.ndarray
    A22: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    C1: np.ndarray
    C2: np.ndarray
    D: np.ndarray
    f1: np.ndarray = None
    f2: np.ndarray = None
    g: np.ndarray = None
    r: int = 0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for name in BLOCKS:
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        n1, n2 = self.A11.shape[0], self.A22.shape[0]
        c_out, c_in = self.D.shape
        # np.atleast_2d turns empty blocks into (1, 0); restore the intended shapes
        expected = {
            "A11": (n1, n1), "A12": (n1, n2), "A21": (n2, n1), "A22": (n2, n2),
            "B1": (n1, c_in), "B2": (n2, c_in), "C1": (c_out, n1), "C2": (c_out, n2), "D": (c_out, c_in),
        }
        for name, shape in expected.items():
            mat = getattr(self, name)
            if mat.size == 0:
                object.__setattr__(self, name, np.zeros(shape))
            elif mat.shape != shape:
                raise ValueError(f"{name} has shape {mat.shape}, expected {shape}")
        for name, size in (("f1", n1), ("f2", n2), ("g", c_out)):
            vec = getattr(self, name)
            vec = np.zeros(size) if vec is None else np.asarray(vec, dtype=float).reshape(-1)
            if vec.shape != (size,):
                raise ValueError(f"{name} has length {vec.size}, expected {size}")
            object.__setattr__(self, name, vec)
        for name in BLOCKS + ("f1", "f2", "g"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite entries")

    @property
    def n1(self):
        return self.A11.shape[0]

    @property
    def n2(self):
        return self.A22.shape[0]

    @property
    def c_in(self):
        return self.D.shape[1]

    @property
    def c_out(self):
        return self.D.shape[0]

    def to_dict(self):
        doc = {name: getattr(self, name).tolist() for name in BLOCKS + ("f1", "f2", "g")}
        doc.update(r=int(self.r), n1=self.n1, n2=self.n2, c_in=self.c_in, c_out=self.c_out)
        return doc

    @classmethod
    def from_dict(cls, doc):
        c_in, c_out = doc["c_in"], doc["c_out"]
        n1, n2 = doc["n1"], doc["n2"]
        shapes = {
            "A11": (n1, n1), "A12": (n1, n2), "A21": (n2, n1), "A22": (n2, n2),
            "B1": (n1, c_in), "B2": (n2, c_in), "C1": (c_out, n1), "C2": (c_out, n2), "D": (c_out, c_in),
        }
        mats = {name: np.array(doc[name], dtype=float).reshape(shape) for name, shape in shapes.items()}
        return cls(**mats, f1=doc["f1"], f2=doc["f2"], g=doc["g"], r=doc["r"])

    def to_json(self):
        return json.dumps(self.to_dict())

    def linear_part(self):
        """Same system with the affine terms removed."""
        return RoesserRealization(*(getattr(self, n) for n in BLOCKS), r=self.r, meta=dict(self.meta))


def realize_conv(layer):
    """Redundant Roesser realization of a convolutional layer.

    With w = r_minus + r_plus, x1 stores the delayed inputs u(i1-a, i2-b) for
    a in 1..w, b in 0..w (layout [b][a-1][channel]) and x2 stores a in 0..w,
    b in 1..w (layout [a][b-1][channel]). Inputs are read with delay r = r_minus,
    so the taps become causal. Both state blocks have w(w+1)c_in entries.
    """
    kernel = layer.kernel
    w = kernel.width - 1
    c = kernel.c_in
    c_out = kernel.c_out
    n = w * (w + 1) * c
    eye = np.eye(c)

    def i1(a, b):
        return (b * w + (a - 1)) * c

    def i2(a, b):
        return (a * w + (b - 1)) * c

    A11, A12, A21, A22 = (np.zeros((n, n)) for _ in range(4))
    B1, B2 = np.zeros((n, c)), np.zeros((n, c))
    C1, C2 = np.zeros((c_out, n)), np.zeros((c_out, n))
    for b in range(w + 1):
        for a in range(1, w + 1):
            row = slice(i1(a, b), i1(a, b) + c)
            if a == 1 and b == 0:
                B1[row] = eye
            elif a == 1:
                A12[row, i2(0, b):i2(0, b) + c] = eye
            else:
                A11[row, i1(a - 1, b):i1(a - 1, b) + c] = eye
    for a in range(w + 1):
        for b in range(1, w + 1):
            row = slice(i2(a, b), i2(a, b) + c)
            if b == 1 and a == 0:
                B2[row] = eye
            elif b == 1:
                A21[row, i1(a, 0):i1(a, 0) + c] = eye
            else:
                A22[row, i2(a, b - 1):i2(a, b - 1) + c] = eye
    D = kernel.taps[:, :, 0, 0].copy()
    for m1 in range(w + 1):
        for m2 in range(w + 1):
            tap = kernel.taps[:, :, m1, m2]
            if m1 >= 1:
                C1[:, i1(m1, m2):i1(m1, m2) + c] = tap
            elif m2 >= 1:
                C2[:, i2(0, m2):i2(0, m2) + c] = tap
    return RoesserRealization(
        A11, A12, A21, A22, B1, B2, C1, C2, D,
        g=layer.bias.copy(), r=kernel.r_minus,
        meta={"kind": "conv", "w": w, "c_in": c},
    )


def roesser_sweep(sys, v, return_states=False):
    """Run the recursion on a batch of input grids.

    ``v`` has shape (batch, N1, N2, c_in) and holds the delayed input seen at
    each node. Boundary states are zero. Returns y of shape (batch, N1, N2, c_out),
    and optionally x1, x2 at every node.
    """
    v = np.asarray(v, dtype=float)
    batch, N1, N2, _ = v.shape
    n1, n2 = sys.n1, sys.n2
    y = np.empty((batch, N1, N2, sys.c_out))
    x1_all = np.zeros((batch, N1, N2, n1)) if return_states else None
    x2_all = np.zeros((batch, N1, N2, n2)) if return_states else None
    x1_row = np.zeros((batch, N2, n1))
    x2_prev_row = np.zeros((batch, N2, n2))
    for a in range(N1):
        if a > 0:
            x1_row = (
                sys.f1 + x1_row @ sys.A11.T + x2_prev_row @ sys.A12.T + v[:, a - 1] @ sys.B1.T
            )
        x2_row = np.zeros((batch, N2, n2))
        x2 = np.zeros((batch, n2))
        for b in range(N2):
            x2_row[:, b] = x2
            x2 = sys.f2 + x1_row[:, b] @ sys.A21.T + x2 @ sys.A22.T + v[:, a, b] @ sys.B2.T
        y[:, a] = sys.g + x1_row @ sys.C1.T + x2_row @ sys.C2.T + v[:, a] @ sys.D.T
        if return_states:
            x1_all[:, a] = x1_row
            x2_all[:, a] = x2_row
        x2_prev_row = x2_row
    if return_states:
        return y, x1_all, x2_all
    return y


def default_frame(u, r, extent):
    """Simulation frame covering the input support plus ``extent`` trailing nodes."""
    start = (u.origin[0] - r, u.origin[1] - r)
    region = (u.shape[0] + extent, u.shape[1] + extent)
    return start, region


def simulate(sys, u, region=None, start=None, return_states=False):
    """Simulate a Roesser system driven by a finite-support signal.

    Node (i1, i2) of the frame is the absolute index start + (i1, i2) and reads
    u(start + (i1, i2) + r). By default the frame starts where the delayed input
    support begins, so the states are zero before any input arrives, and it
    extends far enough to flush the states of a realized convolution.
    """
    if start is None or region is None:
        extent = sys.meta.get("w", sys.n1 + sys.n2)
        d_start, d_region = default_frame(u, sys.r, extent)
        start = d_start if start is None else start
        region = d_region if region is None else region
    if region[0] <= 0 or region[1] <= 0:
        raise ValueError("simulation region must be positive")
    v = u.window((start[0] + sys.r, start[1] + sys.r), region)[None]
    out = roesser_sweep(sys, v, return_states)
    if return_states:
        y, x1, x2 = out
        return Signal2D(start, y[0]), x1[0], x2[0]
    return Signal2D(start, out[0])


def lifted_matrices(sys):
    """Lifted transition and input maps on the joint state (x1, x2)."""
    n1, n2 = sys.n1, sys.n2
    A10 = np.zeros((n1 + n2, n1 + n2))
    A01 = np.zeros((n1 + n2, n1 + n2))
    A10[:n1, :n1], A10[:n1, n1:] = sys.A11, sys.A12
    A01[n1:, :n1], A01[n1:, n1:] = sys.A21, sys.A22
    B10 = np.vstack([sys.B1, np.zeros((n2, sys.c_in))])
    B01 = np.vstack([np.zeros((n1, sys.c_in)), sys.B2])
    return A10, A01, B10, B01


def _extend_basis(Q, M, tol):
    """Append to orthonormal Q the directions of M not already spanned."""
    if M.size == 0:
        return Q
    scale = np.max(np.linalg.norm(M, axis=0))
    if scale == 0:
        return Q
    M = M / scale
    if Q.shape[1]:
        M = M - Q @ (Q.T @ M)
        M = M - Q @ (Q.T @ M)
    q, r, _ = sla.qr(M, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    keep = int(np.sum(diag > tol))
    return np.hstack([Q, q[:, :keep]])


def reachable_subspace(sys, tol=1e-10, input_maps=None):
    """Orthonormal basis of the states reachable from zero boundary conditions.

    The joint state obeys x(i) = A10 x(i-e1) + A01 x(i-e2) + B10 u(i-e1) + B01 u(i-e2),
    so every reachable state is a combination of the impulse-response blocks
    X(a, b) = A10 X(a-1, b) + A01 X(a, b-1) with X(1,0) = B10, X(0,1) = B01.
    Their span is accumulated diagonal by diagonal (a + b = k) with rank decided
    by pivoted QR at relative tolerance ``tol``. The sweep ends at full rank, at
    an all-zero diagonal, or after 2(n1+n2)+2 diagonals.

    ``input_maps`` optionally replaces (B10, B01), e.g. to treat extra channels as inputs.
    """
    A10, A01, B10, B01 = lifted_matrices(sys)
    if input_maps is not None:
        B10, B01 = input_maps
    n = A10.shape[0]
    Q = np.zeros((n, 0))
    if n == 0:
        return Q
    diag = [B10, B01]
    for _ in range(2 * n + 2):
        Q = _extend_basis(Q, np.hstack(diag), tol)
        if Q.shape[1] >= n:
            break
        nxt = [A10 @ diag[0]]
        for k in range(1, len(diag)):
            nxt.append(A10 @ diag[k] + A01 @ diag[k - 1])
        nxt.append(A01 @ diag[-1])
        if all(not np.any(X) for X in nxt):
            break
        diag = nxt
    return Q


def orth(M, tol=1e-10):
    """Orthonormal basis of the column space of M (relative tolerance)."""
    if M.size == 0 or not np.any(M):
        return np.zeros((M.shape[0], 0))
    u, s, _ = np.linalg.svd(M, full_matrices=False)
    return u[:, : int(np.sum(s > tol * s[0]))]


def split_reachable_basis(T, n1, n2, tol=1e-10):
    """Orthonormal bases of the x1 and x2 coordinate projections of span(T)."""
    T = np.asarray(T, dtype=float)
    return orth(T[:n1], tol), orth(T[n1:n1 + n2], tol)


def echelon_basis(T, tol=1e-10):
    """Basis of span(T) in reduced column-echelon form, B[pivots] = I.

    For realizations built from selection matrices this basis is sparse with
    unit entries, which keeps projected LMIs sparse.
    """
    T = np.asarray(T, dtype=float)
    k = T.shape[1]
    if k == 0:
        return T.copy(), np.zeros(0, dtype=int)
    _, _, piv = sla.qr(T.T, pivoting=True)
    rows = np.sort(piv[:k])
    B = np.linalg.solve(T[rows].T, T.T).T
    B[np.abs(B) < tol] = 0.0
    near = np.abs(B - np.round(B)) < tol
    B[near] = np.round(B[near])
    return B, rows
