"""Dissipativity LMIs for Roesser and 2-D Lur'e systems, and the dense-chain LMI.

Every constraint is stored as F(x) = F0 + sum_k x_k F_k with sparse symmetric
coefficients, built from outer factors: a supply or storage block X placed
between row maps L, R contributes L^T X R to the matrix inequality.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .realization import RoesserRealization, echelon_basis, orth, reachable_subspace
from .signal2d import hinf_grid

DEFAULT_MARGIN = 1e-9


# ---------------------------------------------------------------- variables


class Var:
    """A structured decision variable.

    kind: 'sym' (n x n symmetric, upper-triangle parameters), 'diag' (n x n
    diagonal) or 'scalar'. sign: 'psd', 'nsd', 'nonneg' or 'free'.
    """

    def __init__(self, name, kind, n=1, sign="free"):
        if kind not in ("sym", "diag", "scalar"):
            raise ValueError(f"unknown variable kind {kind!r}")
        self.name = name
        self.kind = kind
        self.n = 1 if kind == "scalar" else int(n)
        self.sign = sign

    def __repr__(self):
        return f"Var({self.name!r}, {self.kind}, n={self.n}, {self.sign})"

    @property
    def dim(self):
        if self.kind == "sym":
            return self.n * (self.n + 1) // 2
        return self.n

    def basemap(self):
        """Sparse map from the parameter vector to vec(X), column-major."""
        n = self.n
        if self.kind == "sym":
            iu, ju = np.triu_indices(n)
            k = np.arange(iu.size)
            off = iu != ju
            rows = np.concatenate([iu + ju * n, (ju + iu * n)[off]])
            cols = np.concatenate([k, k[off]])
            return sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n * n, self.dim))
        idx = np.arange(n)
        return sp.csr_matrix((np.ones(n), (idx + idx * n, idx)), shape=(n * n, n))

    def matrix(self, params):
        params = np.asarray(params, dtype=float).reshape(-1)
        if self.kind == "sym":
            X = np.zeros((self.n, self.n))
            iu, ju = np.triu_indices(self.n)
            X[iu, ju] = params
            X[ju, iu] = params
            return X
        if self.kind == "diag":
            return np.diag(params)
        return np.array([[params[0]]])

    def params(self, X):
        """Inverse of matrix(): parameters of a (symmetric / diagonal) matrix."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.kind == "sym":
            return X[np.triu_indices(self.n)]
        if self.kind == "diag":
            return np.diag(X).copy()
        return X.reshape(-1)[:1]


class LinearBlock:
    """Matrix block affine in variables: const + sum coef * kron(I_rep, X(var))."""

    def __init__(self, shape, const=None, terms=()):
        self.shape = tuple(shape)
        self.const = np.zeros(self.shape) if const is None else np.asarray(const, dtype=float)
        self.terms = list(terms)

    @classmethod
    def of(cls, var, coef=1.0, rep=1):
        n = var.n * rep
        return cls((n, n), None, [(var, float(coef), rep)])

    @classmethod
    def constant(cls, M):
        M = np.atleast_2d(np.asarray(M, dtype=float))
        return cls(M.shape, M)

    @classmethod
    def zeros(cls, rows, cols):
        return cls((rows, cols))

    def __add__(self, other):
        if not isinstance(other, LinearBlock):
            other = LinearBlock.constant(other)
        if other.shape != self.shape:
            raise ValueError(f"block shapes differ: {self.shape} vs {other.shape}")
        return LinearBlock(self.shape, self.const + other.const, self.terms + other.terms)

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-other if isinstance(other, LinearBlock) else -np.asarray(other))

    def __mul__(self, alpha):
        return LinearBlock(self.shape, alpha * self.const, [(v, alpha * c, r) for v, c, r in self.terms])

    __rmul__ = __mul__

    def value(self, values):
        out = self.const.copy()
        for var, coef, rep in self.terms:
            out += coef * np.kron(np.eye(rep), var.matrix(values[var.name]))
        return out

    def variables(self):
        return [v for v, _, _ in self.terms]


def _vec_sparse(M, m):
    M = sp.coo_matrix(M)
    return sp.csr_matrix((M.data, (M.row + M.col * m, np.zeros(M.nnz, dtype=int))), shape=(m * m, 1))


class AffineMatrix:
    """Symmetric m x m matrix affine in structured variables."""

    def __init__(self, m):
        self.m = int(m)
        self.const = np.zeros((self.m, self.m))
        self.coefs = {}
        self.vars = {}

    def _accumulate(self, var, K):
        K = sp.csr_matrix(K)
        if var.name in self.coefs:
            if self.vars[var.name] is not var:
                raise ValueError(f"two different variables share the name {var.name!r}")
            self.coefs[var.name] = self.coefs[var.name] + K
        else:
            self.coefs[var.name] = K
            self.vars[var.name] = var

    def add_const(self, M):
        self.const = self.const + np.asarray(M, dtype=float)

    def add_term(self, var, L, R=None, coef=1.0, rep=1, sym=False):
        """Add coef * L^T kron(I_rep, X) R (plus its transpose if ``sym``)."""
        m = self.m
        L = sp.csr_matrix(L)
        R = L if R is None else sp.csr_matrix(R)
        if L.shape[1] != m or R.shape[1] != m:
            raise ValueError("row maps must have m columns")
        if var.kind == "scalar":
            K = _vec_sparse(L.T @ R, m)
            if sym:
                K = K + _vec_sparse(R.T @ L, m)
            self._accumulate(var, coef * K)
            return
        n = var.n
        base = var.basemap()
        K = None
        for t in range(rep):
            Lt, Rt = L[t * n:(t + 1) * n], R[t * n:(t + 1) * n]
            part = sp.kron(Rt.T, Lt.T, format="csr")
            if sym:
                part = part + sp.kron(Lt.T, Rt.T, format="csr")
            K = part if K is None else K + part
        self._accumulate(var, coef * (K @ base))

    def add_block(self, block, L, R=None, sym=False):
        """Add L^T B R for a LinearBlock B (plus transpose if ``sym``)."""
        Ld = L.toarray() if sp.issparse(L) else np.asarray(L)
        Rd = Ld if R is None else (R.toarray() if sp.issparse(R) else np.asarray(R))
        if np.any(block.const):
            M = Ld.T @ block.const @ Rd
            self.add_const(M + M.T if sym else M)
        for var, coef, rep in block.terms:
            self.add_term(var, L, R, coef, rep, sym)

    def variables(self):
        return list(self.vars.values())

    def value(self, values):
        out = self.const.copy().reshape(-1, order="F")
        for name, K in self.coefs.items():
            out = out + K @ np.asarray(values[name], dtype=float).reshape(-1)
        return out.reshape(self.m, self.m, order="F")

    def scale(self, alpha):
        self.const = alpha * self.const
        for name in self.coefs:
            self.coefs[name] = alpha * self.coefs[name]

    def max_abs(self):
        vals = [np.abs(self.const).max() if self.const.size else 0.0]
        vals += [abs(K).max() if K.nnz else 0.0 for K in self.coefs.values()]
        return float(max(vals))

    def asymmetry(self):
        """Largest |F_k - F_k^T| over the constant and all coefficient matrices."""
        m = self.m
        worst = float(np.abs(self.const - self.const.T).max()) if m else 0.0
        perm = (np.arange(m * m) % m) * m + np.arange(m * m) // m
        for K in self.coefs.values():
            diff = K - K[perm]
            if diff.nnz:
                worst = max(worst, float(abs(diff).max()))
        return worst


# ---------------------------------------------------------------- supplies


@dataclass
class QuadraticSupply:
    """s(a, b) = a^T R a + 2 a^T S b + b^T Q b on a paired signal (first slot a, second slot b)."""

    R: LinearBlock
    S: LinearBlock
    Q: LinearBlock

    def __post_init__(self):
        p, q = self.R.shape[0], self.Q.shape[0]
        if self.R.shape != (p, p) or self.Q.shape != (q, q) or self.S.shape != (p, q):
            raise ValueError("supply blocks have inconsistent shapes")
        for block in (self.R, self.Q):
            if np.abs(block.const - block.const.T).max(initial=0.0) > 1e-12:
                raise ValueError("R and Q must be symmetric")

    @property
    def dims(self):
        return self.R.shape[0], self.Q.shape[0]

    def matrix(self, values=None):
        values = values or {}
        R, S, Q = self.R.value(values), self.S.value(values), self.Q.value(values)
        return np.block([[R, S], [S.T, Q]])

    def evaluate(self, a, b, values=None):
        """Evaluate the supply; a and b may carry leading batch axes."""
        values = values or {}
        R, S, Q = self.R.value(values), self.S.value(values), self.Q.value(values)
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        return (
            np.einsum("...i,ij,...j->...", a, R, a)
            + 2 * np.einsum("...i,ij,...j->...", a, S, b)
            + np.einsum("...i,ij,...j->...", b, Q, b)
        )

    def variables(self):
        seen = {}
        for block in (self.R, self.S, self.Q):
            for v in block.variables():
                seen[v.name] = v
        return list(seen.values())


def _as_block(x, n):
    if isinstance(x, Var):
        return LinearBlock.of(x, rep=n if x.kind == "scalar" else 1)
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        return LinearBlock.constant(float(x) * np.eye(n))
    if x.ndim == 1:
        return LinearBlock.constant(np.diag(x))
    return LinearBlock.constant(x)


def lipschitz_supply(gamma_sq, c_in, c_out):
    """(R, S, Q) = (gamma^2 I, 0, -I) on (u, y): s = gamma^2 |u|^2 - |y|^2."""
    return QuadraticSupply(
        _as_block(gamma_sq, c_in),
        LinearBlock.zeros(c_in, c_out),
        LinearBlock.constant(-np.eye(c_out)),
    )


def slope_supply(lam, nz):
    """Slope-[0,1] multiplier on (w, z): s^w = 2 w^T L w - 2 w^T L z, nonpositive on increments.

    ``lam`` is a diagonal Var or a nonnegative vector.
    """
    if isinstance(lam, Var):
        if lam.kind != "diag" or lam.n != nz:
            raise ValueError("slope multiplier must be a diagonal variable of size nz")
        return QuadraticSupply(LinearBlock.of(lam, 2.0), LinearBlock.of(lam, -1.0), LinearBlock.zeros(nz, nz))
    lam = np.asarray(lam, dtype=float).reshape(-1)
    if lam.size != nz:
        raise ValueError("multiplier has the wrong size")
    if np.any(lam < 0):
        raise ValueError("slope multipliers must be nonnegative")
    L = np.diag(lam)
    return QuadraticSupply(LinearBlock.constant(2 * L), LinearBlock.constant(-L), LinearBlock.zeros(nz, nz))


def hybrid_supply(gamma_sq, q_c, c_in, c_out):
    """(R, S, Q) = (gamma^2 I, 0, Q_C) on (u, y) for the conv part of a hybrid network."""
    if isinstance(q_c, Var):
        Q = LinearBlock.of(q_c, rep=c_out if q_c.kind == "scalar" else 1)
        if q_c.kind == "scalar":
            Q = Q * -1.0
    else:
        Q = _as_block(q_c, c_out)
    return QuadraticSupply(_as_block(gamma_sq, c_in), LinearBlock.zeros(c_in, c_out), Q)


# ---------------------------------------------------------------- problems


class SdpProblem:
    """Linear objective over structured variables subject to LMIs F(x) >= margin * I."""

    def __init__(self):
        self.vars = {}
        self.lmis = []
        self.objective = []
        self.meta = {}

    def add_var(self, var):
        if var.name in self.vars and self.vars[var.name] is not var:
            raise ValueError(f"duplicate variable name {var.name!r}")
        self.vars[var.name] = var
        return var

    def add_lmi(self, name, amat, margin=0.0):
        for v in amat.variables():
            self.add_var(v)
        self.lmis.append((name, amat, float(margin)))

    def minimize(self, var, coef=1.0):
        self.add_var(var)
        self.objective.append((var, float(coef)))

    def layout(self):
        offsets, pos = {}, 0
        for name, var in self.vars.items():
            offsets[name] = (pos, pos + var.dim)
            pos += var.dim
        return offsets, pos

    def lmi_coefficients(self, amat):
        """Sparse (m^2, 1 + N) matrix [vec F0 | vec F_1 ... vec F_N] in the global layout."""
        offsets, total = self.layout()
        m = amat.m
        blocks = [sp.csr_matrix(amat.const.reshape(-1, order="F")[:, None])]
        cols = sp.lil_matrix((m * m, total)).tocsr()
        parts = []
        for name, K in amat.coefs.items():
            a, b = offsets[name]
            P = sp.csr_matrix((np.ones(b - a), (np.arange(a, b), np.arange(b - a))), shape=(total, b - a))
            parts.append(K @ P.T)
        if parts:
            cols = sum(parts[1:], parts[0])
        blocks.append(sp.csr_matrix(cols))
        return sp.hstack(blocks, format="csr")

    def split(self, x):
        offsets, _ = self.layout()
        return {name: np.asarray(x[a:b]) for name, (a, b) in offsets.items()}

    def objective_value(self, values):
        return float(sum(coef * float(np.sum(values[v.name])) for v, coef in self.objective))

    def check_structure(self, tol=0.0):
        """Assert every LMI is symmetric in all coefficients."""
        for name, amat, _ in self.lmis:
            asym = amat.asymmetry()
            if asym > tol:
                raise AssertionError(f"LMI {name} is not symmetric (max asymmetry {asym:g})")
        return True

    def size_summary(self):
        _, total = self.layout()
        return {"variables": total, "lmi_sizes": [amat.m for _, amat, _ in self.lmis]}

    def to_sdpa(self, path):
        """Write the problem in sparse SDPA format.

        Block order: each LMI, then one block per psd/nsd matrix variable, then a
        diagonal (LP) block for all nonnegative parameters. SDPA convention:
        sum_k x_k F_k - F_0 >= 0, minimize c^T x, with F_0 = -(constant part + margin I).
        """
        offsets, total = self.layout()
        c = np.zeros(total)
        for var, coef in self.objective:
            a, b = offsets[var.name]
            c[a:b] += coef
        blocks = []  # (size, entries) with entries list of (k, i, j, value), k=0 for F0
        for name, amat, margin in self.lmis:
            C = self.lmi_coefficients(amat).tocoo()
            m = amat.m
            i, j = C.row % m, C.row // m
            keep = i <= j
            merged = {}
            for k, a, b, v in zip(C.col[keep], i[keep], j[keep], C.data[keep]):
                key = (int(k), int(a) + 1, int(b) + 1)
                merged[key] = merged.get(key, 0.0) + float(-v if k == 0 else v)
            for t in range(m if margin else 0):
                merged[(0, t + 1, t + 1)] = merged.get((0, t + 1, t + 1), 0.0) + float(margin)
            blocks.append((m, [key + (v,) for key, v in merged.items()]))
        lp = []
        for name, var in self.vars.items():
            a, _ = offsets[name]
            if var.sign in ("psd", "nsd") and var.kind == "sym":
                sgn = 1.0 if var.sign == "psd" else -1.0
                iu, ju = np.triu_indices(var.n)
                entries = [(a + k + 1, int(i0) + 1, int(j0) + 1, sgn) for k, (i0, j0) in enumerate(zip(iu, ju))]
                blocks.append((var.n, entries))
            elif var.sign in ("psd", "nonneg", "nsd"):
                sgn = -1.0 if var.sign == "nsd" else 1.0
                lp.extend((a + k + 1, sgn) for k in range(var.dim))
        if lp:
            blocks.append((-len(lp), [(k, t + 1, t + 1, s) for t, (k, s) in enumerate(lp)]))
        lines = ["* structured LMI problem exported for cross-checking", str(total), str(len(blocks))]
        lines.append(" ".join(str(size) for size, _ in blocks))
        lines.append(" ".join(repr(float(v)) for v in c))
        for bno, (_, entries) in enumerate(blocks, start=1):
            for k, i, j, v in entries:
                if v != 0.0:
                    lines.append(f"{k} {bno} {i} {j} {v!r}")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------- outer factors


@dataclass
class OuterFactor:
    """Row maps of the node signals in terms of the LMI columns (state coords, w, u)."""

    x1_next: sp.csr_matrix
    x2_next: sp.csr_matrix
    x1: sp.csr_matrix
    x2: sp.csr_matrix
    z: sp.csr_matrix
    w: sp.csr_matrix
    y: sp.csr_matrix
    u: sp.csr_matrix
    n_state: int
    basis: np.ndarray = None

    @property
    def m(self):
        return self.u.shape[1]


def _lure_blocks(sys):
    """View a Roesser realization or LureSystem as the 16-block map."""
    if isinstance(sys, RoesserRealization):
        n1, n2, c_in, c_out = sys.n1, sys.n2, sys.c_in, sys.c_out
        return dict(
            mA11=sys.A11, mA12=sys.A12, mB11=np.zeros((n1, 0)), mB12=sys.B1,
            mA21=sys.A21, mA22=sys.A22, mB21=np.zeros((n2, 0)), mB22=sys.B2,
            mC11=np.zeros((0, n1)), mC12=np.zeros((0, n2)), mD11=np.zeros((0, 0)), mD12=np.zeros((0, c_in)),
            mC21=sys.C1, mC22=sys.C2, mD21=np.zeros((c_out, 0)), mD22=sys.D,
        )
    return {k: getattr(sys, k) for k in (
        "mA11", "mA12", "mB11", "mB12", "mA21", "mA22", "mB21", "mB22",
        "mC11", "mC12", "mD11", "mD12", "mC21", "mC22", "mD21", "mD22")}


def lure_reachable_basis(sys, tol=1e-10):
    """Reachable subspace of the linear part, treating w and u both as inputs."""
    M = _lure_blocks(sys)
    lin = RoesserRealization(
        M["mA11"], M["mA12"], M["mA21"], M["mA22"],
        np.hstack([M["mB11"], M["mB12"]]), np.hstack([M["mB21"], M["mB22"]]),
        np.zeros((0, M["mA11"].shape[0])), np.zeros((0, M["mA22"].shape[0])),
        np.zeros((0, M["mB11"].shape[1] + M["mB12"].shape[1])),
    )
    return reachable_subspace(lin, tol)


def outer_factor(sys, basis=None, input_scale=1.0, output_scale=1.0):
    """Row maps for the LMI columns (xi, w, u).

    With a basis B the joint state is x = B xi; otherwise xi = x. The u column is
    divided by ``input_scale`` and the y row by ``output_scale``.
    """
    M = _lure_blocks(sys)
    n1, n2 = M["mA11"].shape[0], M["mA22"].shape[0]
    nz, c_in = M["mD11"].shape[0], M["mB12"].shape[1]
    Bx = np.eye(n1 + n2) if basis is None else np.asarray(basis, dtype=float)
    k = Bx.shape[1]
    su = 1.0 / input_scale
    Bxs = sp.csr_matrix(Bx)

    def row(Ax1, Ax2, Bw, Bu):
        Ax = sp.hstack([sp.csr_matrix(Ax1), sp.csr_matrix(Ax2)], format="csr") @ Bxs
        return sp.hstack([Ax, sp.csr_matrix(Bw), sp.csr_matrix(Bu) * su], format="csr")

    eye_w = sp.hstack([sp.csr_matrix((nz, k)), sp.identity(nz, format="csr"), sp.csr_matrix((nz, c_in))], format="csr")
    eye_u = sp.hstack([sp.csr_matrix((c_in, k + nz)), sp.identity(c_in, format="csr") * su], format="csr")
    x1 = sp.hstack([Bxs[:n1], sp.csr_matrix((n1, nz + c_in))], format="csr")
    x2 = sp.hstack([Bxs[n1:], sp.csr_matrix((n2, nz + c_in))], format="csr")
    return OuterFactor(
        x1_next=row(M["mA11"], M["mA12"], M["mB11"], M["mB12"]),
        x2_next=row(M["mA21"], M["mA22"], M["mB21"], M["mB22"]),
        x1=x1, x2=x2,
        z=row(M["mC11"], M["mC12"], M["mD11"], M["mD12"]),
        w=eye_w,
        y=row(M["mC21"], M["mC22"], M["mD21"], M["mD22"]) / output_scale,
        u=eye_u,
        n_state=k,
        basis=None if basis is None else Bx,
    )


def storage_basis(rows, tol=1e-10):
    """Sparse basis of the column space of the x1 (or x2) rows of a reachable basis."""
    dense = rows.toarray() if sp.issparse(rows) else np.asarray(rows)
    n = dense.shape[0]
    Q = orth(dense, tol)
    if Q.shape[1] == n:
        return None
    B, _ = echelon_basis(Q, tol)
    return B


def _storage_term(amat, var, T, rows, coef):
    L = rows if T is None else sp.csr_matrix(T.T) @ rows
    amat.add_term(var, L, coef=coef)


def dissipation_lmi(sys, supply, nl_supply=None, basis=None, storage_bases=(None, None),
                    input_scale=1.0, output_scale=1.0, p_names=("P1", "P2"), storage="full"):
    """Assemble -V(x+) + V(x) + s(u, y) + s^w(w, z) as an AffineMatrix in (xi, w, u).

    Storage is V_i(x_i) = x_i^T T_i P~_i T_i^T x_i with P~_i free psd variables
    (T_i = I when no storage basis is given); ``storage='diag'`` restricts P~_i to
    nonnegative diagonals. Returns (AffineMatrix, P1 var, P2 var, factor).
    """
    if storage not in ("full", "diag"):
        raise ValueError(f"unknown storage structure {storage!r}")
    kind, sign = ("sym", "psd") if storage == "full" else ("diag", "nonneg")
    F = outer_factor(sys, basis, input_scale, output_scale)
    T1, T2 = storage_bases
    n1, n2 = F.x1.shape[0], F.x2.shape[0]
    P1 = Var(p_names[0], kind, n1 if T1 is None else T1.shape[1], sign)
    P2 = Var(p_names[1], kind, n2 if T2 is None else T2.shape[1], sign)
    amat = AffineMatrix(F.m)
    if P1.n:
        _storage_term(amat, P1, T1, F.x1_next, -1.0)
        _storage_term(amat, P1, T1, F.x1, 1.0)
    if P2.n:
        _storage_term(amat, P2, T2, F.x2_next, -1.0)
        _storage_term(amat, P2, T2, F.x2, 1.0)
    _add_supply(amat, supply, F.u, F.y)
    if nl_supply is not None and F.z.shape[0]:
        _add_supply(amat, nl_supply, F.w, F.z)
    return amat, P1, P2, F


def _add_supply(amat, supply, first_rows, second_rows):
    amat.add_block(supply.R, first_rows)
    if np.any(supply.S.const) or supply.S.terms:
        amat.add_block(supply.S, first_rows, second_rows, sym=True)
    amat.add_block(supply.Q, second_rows)


def _normalize(amat):
    scale = amat.max_abs()
    if scale > 0:
        amat.scale(1.0 / scale)
    return scale if scale > 0 else 1.0


def projection_for(sys, project=True, tol=1e-10):
    """Joint reachable basis (sparse echelon form) and storage bases, or Nones."""
    M = _lure_blocks(sys)
    n1, n2 = M["mA11"].shape[0], M["mA22"].shape[0]
    if not project or n1 + n2 == 0:
        return None, (None, None)
    T = lure_reachable_basis(sys, tol)
    if T.shape[1] == n1 + n2:
        return None, (None, None)
    B, _ = echelon_basis(T, tol)
    return B, (storage_basis(B[:n1], tol), storage_basis(B[n1:], tol))


def build_layer_lmi(sys, supply, projection=None, margin=DEFAULT_MARGIN, input_scale=1.0, output_scale=1.0):
    """Dissipativity LMI of a Roesser system with quadratic storage.

    ``projection`` is either a joint reachable basis T (n1+n2 x k) or a pair
    (T1, T2) of blockwise bases; the state columns of the outer factor are
    replaced by T (or blkdiag(T1, T2)).
    """
    basis, sbases = _projection_arg(sys, projection)
    amat, P1, P2, F = dissipation_lmi(sys, supply, None, basis, sbases, input_scale, output_scale)
    prob = SdpProblem()
    prob.meta.update(kind="layer", lmi_scale=_normalize(amat), basis=basis, storage_bases=sbases,
                     input_scale=input_scale, output_scale=output_scale)
    prob.add_var(P1)
    prob.add_var(P2)
    prob.add_lmi("dissipation", amat, margin)
    for v in supply.variables():
        prob.add_var(v)
    return prob


def _projection_arg(sys, projection):
    if projection is None:
        return None, (None, None)
    M = _lure_blocks(sys)
    n1, n2 = M["mA11"].shape[0], M["mA22"].shape[0]
    if isinstance(projection, tuple):
        T1, T2 = projection
        T1 = np.eye(n1) if T1 is None else np.asarray(T1)
        T2 = np.eye(n2) if T2 is None else np.asarray(T2)
        basis = np.block([[T1, np.zeros((n1, T2.shape[1]))], [np.zeros((n2, T1.shape[1])), T2]])
        return basis, (storage_basis(T1) if T1.shape[1] < n1 else None,
                       storage_basis(T2) if T2.shape[1] < n2 else None)
    T = np.asarray(projection, dtype=float)
    B, _ = echelon_basis(T)
    return B, (storage_basis(B[:n1]), storage_basis(B[n1:]))


def build_lure_lmi(sys, outer_supply, nl_supply, projection=None, margin=DEFAULT_MARGIN,
                   input_scale=1.0, output_scale=1.0):
    """Robust dissipativity LMI of a 2-D Lur'e system in error form."""
    if any(np.any(getattr(sys, k, 0)) for k in ("f1", "f2", "g1", "g2")):
        raise ValueError("build_lure_lmi expects the error system (zero affine terms)")
    basis, sbases = _projection_arg(sys, projection)
    amat, P1, P2, F = dissipation_lmi(sys, outer_supply, nl_supply, basis, sbases, input_scale, output_scale)
    prob = SdpProblem()
    prob.meta.update(kind="lure", lmi_scale=_normalize(amat), basis=basis, storage_bases=sbases,
                     input_scale=input_scale, output_scale=output_scale)
    prob.add_var(P1)
    prob.add_var(P2)
    prob.add_lmi("robust_dissipation", amat, margin)
    for supply in (outer_supply, nl_supply):
        for v in supply.variables():
            prob.add_var(v)
    return prob


def build_dense_chain_lmi(weights, r_l, lambdas, l_sq=None, input_basis=None):
    """Dense-chain LMI certifying u^T R_L u - |y|^2 >= 0 for increments of the dense stack.

    Block (0,0) is R_L, block (k,k) is 2 Lambda_k, block (k,k-1) is -Lambda_k W_k,
    the last block column is -W_m^T with identity (or ``l_sq`` * I) in the corner.
    ``r_l`` is a LinearBlock. ``input_basis`` U restricts the first block to range(U)
    (exact when R_L is a multiple of the identity and U spans the rows of W_1).
    """
    weights = [np.asarray(W, dtype=float) for W in weights]
    m_layers = len(weights)
    if len(lambdas) != m_layers - 1:
        raise ValueError("need one multiplier per hidden dense layer")
    for k in range(1, m_layers):
        if weights[k].shape[1] != weights[k - 1].shape[0]:
            raise ValueError(f"dense layer {k + 1} input does not match layer {k} output")
    W1 = weights[0]
    R_block = r_l
    if input_basis is not None:
        U = np.asarray(input_basis)
        W1 = W1 @ U
        R_block = None
    sizes = [W1.shape[1]] + [W.shape[0] for W in weights]
    edges = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    M = int(edges[-1])
    amat = AffineMatrix(M)

    def sel(k):
        return sp.csr_matrix((np.ones(sizes[k]), (np.arange(sizes[k]), np.arange(edges[k], edges[k + 1]))),
                             shape=(sizes[k], M))

    if R_block is None:
        # R_L = q I restricted to range(U) with orthonormal U stays q I
        (var, coef, rep), = r_l.terms
        amat.add_term(var, sel(0), coef=coef, rep=sizes[0])
    else:
        amat.add_block(R_block, sel(0))
    Ws = [W1] + weights[1:]
    for k in range(1, m_layers):
        lam = lambdas[k - 1]
        amat.add_term(lam, sel(k), coef=2.0)
        amat.add_term(lam, sel(k), sp.csr_matrix(Ws[k - 1]) @ sel(k - 1), coef=-1.0, sym=True)
    last = sel(m_layers)
    cross = sel(m_layers - 1).T @ sp.csr_matrix(Ws[-1].T) @ last
    amat.add_const(-(cross + cross.T).toarray())
    corner = 1.0 if l_sq is None else float(l_sq)
    amat.add_const(corner * (last.T @ last).toarray())
    return amat


# ---------------------------------------------------------------- certificates


@dataclass
class LipschitzCertificate:
    gamma: float
    gamma_sq: float
    P1: np.ndarray
    P2: np.ndarray
    lambda_c: np.ndarray
    kind: str = "lure"
    Q_C: np.ndarray = None
    lambdas_dense: list = field(default_factory=list)
    basis: np.ndarray = None
    input_scale: float = 1.0
    output_scale: float = 1.0
    lmi_scales: dict = field(default_factory=dict)
    qc_structure: str = "full"
    storage: str = "full"
    dense_basis: np.ndarray = None
    final_activation: bool = False
    margin: float = 0.0
    solver_status: str = ""
    solver: str = ""
    solve_time: float = 0.0
    residuals: dict = field(default_factory=dict)

    def to_dict(self):
        def arr(x):
            return None if x is None else np.asarray(x).tolist()

        return {
            "schema": "roesserlip.certificate/1",
            "gamma": self.gamma, "gamma_sq": self.gamma_sq, "kind": self.kind,
            "P1": arr(self.P1), "P2": arr(self.P2), "lambda_c": arr(self.lambda_c),
            "Q_C": arr(self.Q_C), "lambdas_dense": [arr(x) for x in self.lambdas_dense],
            "basis": arr(self.basis), "input_scale": self.input_scale, "output_scale": self.output_scale,
            "lmi_scales": self.lmi_scales, "qc_structure": self.qc_structure,
            "storage": self.storage,
            "dense_basis": arr(self.dense_basis), "final_activation": self.final_activation,
            "margin": self.margin, "solver_status": self.solver_status, "solver": self.solver,
            "solve_time": self.solve_time, "residuals": self.residuals,
        }

    def to_json(self, path=None):
        text = json.dumps(self.to_dict())
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_dict(cls, doc):
        def arr(x, ndmin=2):
            if x is None:
                return None
            a = np.array(x, dtype=float, ndmin=ndmin)
            # an empty list is a 0 x 0 matrix (storage of a state-free system)
            return a.reshape(0, 0) if a.size == 0 and a.ndim == 2 and a.shape[0] <= 1 else a

        return cls(
            gamma=float(doc["gamma"]), gamma_sq=float(doc["gamma_sq"]),
            P1=arr(doc["P1"]), P2=arr(doc["P2"]), lambda_c=np.array(doc["lambda_c"], dtype=float),
            kind=doc.get("kind", "lure"), Q_C=arr(doc.get("Q_C")),
            lambdas_dense=[np.array(x, dtype=float) for x in doc.get("lambdas_dense", [])],
            basis=arr(doc.get("basis")), input_scale=float(doc.get("input_scale", 1.0)),
            output_scale=float(doc.get("output_scale", 1.0)), lmi_scales=doc.get("lmi_scales", {}),
            qc_structure=doc.get("qc_structure", "full"), storage=doc.get("storage", "full"),
            dense_basis=arr(doc.get("dense_basis")),
            final_activation=bool(doc.get("final_activation", False)), margin=float(doc.get("margin", 0.0)),
            solver_status=doc.get("solver_status", ""), solver=doc.get("solver", ""),
            solve_time=float(doc.get("solve_time", 0.0)), residuals=doc.get("residuals", {}),
        )

    @classmethod
    def from_json(cls, text_or_path):
        text = text_or_path
        if not text.lstrip().startswith("{"):
            with open(text_or_path, encoding="utf-8") as fh:
                text = fh.read()
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------- estimation


@dataclass
class EstimateOptions:
    project: bool = True
    solver: str = "auto"
    tol: float = 1e-9
    margin: float = None
    scale: bool = True
    qc_structure: str = "auto"
    qc_full_limit: int = 120
    l_sq: float = None
    verbose: bool = False
    storage: str = "auto"
    storage_full_limit: int = 6000


def _storage_structure(options, basis, sbases, n1, n2):
    """'full' unless the dense storage matrices would have too many parameters."""
    if options.storage != "auto":
        return options.storage
    k1 = n1 if sbases[0] is None else sbases[0].shape[1]
    k2 = n2 if sbases[1] is None else sbases[1].shape[1]
    params = k1 * (k1 + 1) // 2 + k2 * (k2 + 1) // 2
    return "full" if params <= options.storage_full_limit else "diag"


def layer_gain_estimate(layer, grid_n=64):
    """Cheap gain estimate of a conv layer used only for numerical scaling."""
    return max(hinf_grid(layer, grid_n), 1e-12)


def _conv_layers(obj):
    from .model import ConvLayerSpec, NetworkSpec

    if isinstance(obj, ConvLayerSpec):
        return [obj]
    if isinstance(obj, NetworkSpec):
        return list(obj.conv_layers)
    return list(obj)


def _require_optimal(report):
    from .sdpsolve import SolverError

    if report.status != "optimal":
        raise SolverError(f"solver {report.solver} returned status {report.status} ({report.raw_status})", report)


def polish_scalar(amat, values, name, margin=0.0):
    """Smallest value of scalar variable ``name`` with amat >= margin I, all others fixed.

    The variable must enter through a positive semidefinite coefficient (as gamma^2
    does on the u block). With the complementary block A strictly above the margin,
    the answer is the top generalized eigenvalue of the Schur complement. Returns
    None when A is not strictly feasible.
    """
    at = dict(values)
    at[name] = np.zeros(1)
    M0 = amat.value(at)
    at[name] = np.ones(1)
    G = amat.value(at) - M0
    J = np.abs(G).sum(axis=1) > 0
    if not np.any(J):
        return None
    eye = np.eye(amat.m)
    A = (M0 - margin * eye)[np.ix_(~J, ~J)]
    B = M0[np.ix_(J, ~J)]
    C = (M0 - margin * eye)[np.ix_(J, J)]
    if A.size:
        evals, evecs = np.linalg.eigh(0.5 * (A + A.T))
        if evals[0] <= 0:
            return None
        BV = B @ evecs
        S = (BV / evals) @ BV.T - C
    else:
        S = -C
    top = sla.eigh(0.5 * (S + S.T), 0.5 * (G[np.ix_(J, J)] + G[np.ix_(J, J)].T), eigvals_only=True)[-1]
    return max(float(top), 0.0)


def _polish_gamma(problem, amat, values, report):
    """Replace the solver's gamma^2 by the exact minimum for the returned multipliers."""
    from .sdpsolve import min_eigenvalues

    best = polish_scalar(amat, values, "gamma_sq", 0.5 * report.margin)
    if best is None:
        return values
    trial = dict(values)
    trial["gamma_sq"] = np.array([best])
    eigs = min_eigenvalues(problem, trial)
    if eigs["robust_dissipation"] < 0:
        return values
    report.min_eigs = eigs
    report.objective = best
    return trial


def _expand_storage(values, var, T):
    Pt = var.matrix(values[var.name]) if var.n else np.zeros((0, 0))
    if T is None:
        return Pt
    return T @ Pt @ T.T


def estimate_lipschitz_cnn(layers, options=None):
    """Lipschitz bound of a conv stack (pure CNN) via the robust dissipativity LMI."""
    from .lure import assemble_lure, error_system
    from .sdpsolve import solve

    options = options or EstimateOptions()
    layers = _conv_layers(layers)
    sys = error_system(assemble_lure(layers))
    # the square root of the gain product balances the y row against the storage
    # terms; dividing by the full product makes the strictness margin costly
    scale = float(np.sqrt(np.prod([layer_gain_estimate(l) for l in layers]))) if options.scale else 1.0
    g2 = Var("gamma_sq", "scalar", sign="nonneg")
    lam = Var("Lambda_C", "diag", sys.nz, "nonneg")
    supply = lipschitz_supply(g2, sys.c_in, sys.c_out)
    nl = slope_supply(lam, sys.nz) if sys.nz else None
    basis, sbases = projection_for(sys, options.project)
    storage = _storage_structure(options, basis, sbases, sys.n1, sys.n2)
    amat, P1, P2, F = dissipation_lmi(sys, supply, nl, basis, sbases, output_scale=scale, storage=storage)
    prob = SdpProblem()
    for v in (P1, P2, g2, lam):
        if v.dim:
            prob.add_var(v)
    lmi_scale = _normalize(amat)
    margin = options.margin
    prob.add_lmi("robust_dissipation", amat, 0.0 if margin is None else margin)
    prob.minimize(g2)
    values, report = solve(prob, solver=options.solver, tol=options.tol, margin=margin, verbose=options.verbose)
    _require_optimal(report)
    values = _polish_gamma(prob, amat, values, report)
    s2 = scale**2
    P1m = _expand_storage(values, P1, sbases[0]) * s2
    P2m = _expand_storage(values, P2, sbases[1]) * s2
    gamma_sq = float(values["gamma_sq"][0]) * s2
    return LipschitzCertificate(
        gamma=float(np.sqrt(max(gamma_sq, 0.0))), gamma_sq=gamma_sq, P1=P1m, P2=P2m,
        lambda_c=(values["Lambda_C"] * s2) if sys.nz else np.zeros(0),
        kind="lure", basis=basis, output_scale=scale, storage=storage,
        lmi_scales={"robust_dissipation": lmi_scale}, margin=report.margin,
        solver_status=report.status, solver=report.solver, solve_time=report.wall_time,
        residuals={"min_eig": report.min_eigs},
    )


def estimate_lipschitz_layer(layer, options=None):
    """Single conv layer bound through its redundant realization (projected by default)."""
    return estimate_lipschitz_cnn([layer], options)


def estimate_lipschitz_hybrid(spec, options=None):
    """Lipschitz bound of a conv + dense network (or a pure CNN if there are no dense layers).

    Conv part: robust dissipativity with supply (Q_C, 0, gamma^2 I); dense part:
    the chain LMI with R_L = blkdiag(-Q_C, ..., -Q_C). The activation between the
    last conv layer and the flattening step is kept inside the Lur'e system.
    """
    from .lure import assemble_lure, error_system
    from .model import flatten_dims
    from .sdpsolve import solve

    options = options or EstimateOptions()
    if not spec.dense_layers:
        return estimate_lipschitz_cnn(spec.conv_layers, options)
    layers = list(spec.conv_layers)
    sys = error_system(assemble_lure(layers, final_activation=True))
    d_l, c_l = flatten_dims(spec)
    weights = [layer.weight for layer in spec.dense_layers]
    scale = 1.0
    if options.scale:
        scale = float(np.prod([layer_gain_estimate(l) for l in layers]))
        scale *= float(np.prod([max(np.linalg.norm(W, 2), 1e-12) for W in weights]))
    qc_structure = options.qc_structure
    if qc_structure == "auto":
        qc_structure = "full" if d_l * d_l * c_l <= options.qc_full_limit else "scalar"
    g2 = Var("gamma_sq", "scalar", sign="nonneg")
    lam = Var("Lambda_C", "diag", sys.nz, "nonneg")
    if qc_structure == "full":
        qc = Var("Q_C", "sym", c_l, "nsd")
        r_l = LinearBlock.of(qc, -1.0, rep=d_l * d_l)
        dense_basis = None
    elif qc_structure == "scalar":
        qc = Var("q_C", "scalar", sign="nonneg")
        r_l = LinearBlock.of(qc, 1.0, rep=d_l * d_l * c_l)
        dense_basis = orth(weights[0].T)
    else:
        raise ValueError(f"unknown qc_structure {qc_structure!r}")
    supply = hybrid_supply(g2, qc, sys.c_in, sys.c_out)
    nl = slope_supply(lam, sys.nz)
    basis, sbases = projection_for(sys, options.project)
    storage = _storage_structure(options, basis, sbases, sys.n1, sys.n2)
    amat, P1, P2, F = dissipation_lmi(sys, supply, nl, basis, sbases, input_scale=scale, storage=storage)
    lams = [Var(f"Lambda_{k}", "diag", W.shape[0], "nonneg") for k, W in enumerate(weights[:-1], start=1)]
    dense = build_dense_chain_lmi(weights, r_l, lams, options.l_sq, dense_basis)
    prob = SdpProblem()
    for v in [P1, P2, g2, lam, qc] + lams:
        if v.dim:
            prob.add_var(v)
    scales = {"robust_dissipation": _normalize(amat), "dense_chain": _normalize(dense)}
    margin = options.margin
    prob.add_lmi("robust_dissipation", amat, 0.0 if margin is None else margin)
    prob.add_lmi("dense_chain", dense, 0.0 if margin is None else margin)
    prob.minimize(g2)
    values, report = solve(prob, solver=options.solver, tol=options.tol, margin=margin, verbose=options.verbose)
    _require_optimal(report)
    values = _polish_gamma(prob, amat, values, report)
    # the input scaling is a congruence on the u column, so gamma is already in original units
    gamma_sq = float(values["gamma_sq"][0])
    if qc_structure == "full":
        Q_C = qc.matrix(values["Q_C"])
    else:
        Q_C = -float(values["q_C"][0]) * np.eye(c_l)
    return LipschitzCertificate(
        gamma=float(np.sqrt(max(gamma_sq, 0.0))), gamma_sq=gamma_sq,
        P1=_expand_storage(values, P1, sbases[0]), P2=_expand_storage(values, P2, sbases[1]),
        lambda_c=values["Lambda_C"], kind="hybrid", Q_C=Q_C,
        lambdas_dense=[values[v.name] for v in lams], basis=basis, input_scale=scale,
        lmi_scales=scales, qc_structure=qc_structure, dense_basis=dense_basis, final_activation=True, storage=storage,
        margin=report.margin, solver_status=report.status, solver=report.solver,
        solve_time=report.wall_time, residuals={"min_eig": report.min_eigs},
    )
