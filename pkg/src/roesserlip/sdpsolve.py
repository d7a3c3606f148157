"""SDP backend (through cvxpy) and independent validation of Lipschitz certificates."""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np

from .lmi import LipschitzCertificate
from .lure import assemble_lure, error_system, lure_sweep
from .signal2d import activation_fn

SMALL_PROBLEM_LMI = 90
MEDIUM_PROBLEM_VARS = 3000
DEFAULT_TOL = 1e-9
EIG_TOL = 1e-7
DISS_TOL = 1e-6


class SolverError(RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


def env_float(name, default):
    value = os.environ.get(name)
    return float(value) if value not in (None, "") else default


@dataclass
class SolverReport:
    status: str
    objective: float = float("nan")
    min_eigs: dict = field(default_factory=dict)
    iterations: int = 0
    wall_time: float = 0.0
    solver: str = ""
    margin: float = 0.0
    raw_status: str = ""

    def to_dict(self):
        return dict(self.__dict__)


def _choose_solver(problem, solver):
    if solver != "auto":
        return solver.upper()
    sizes = [amat.m for _, amat, _ in problem.lmis]
    sizes += [v.n for v in problem.vars.values() if v.kind == "sym" and v.sign in ("psd", "nsd")]
    if max(sizes, default=0) <= SMALL_PROBLEM_LMI:
        return "CLARABEL"
    # large LMIs make Clarabel's dense cone blocks too big; CVXOPT's cost grows with the variable count
    return "CVXOPT" if problem.layout()[1] <= MEDIUM_PROBLEM_VARS else "SCS"


def default_margin(solver):
    return {"CLARABEL": 1e-8}.get(solver, 1e-5)


def _cvx_problem(problem, margin, feasibility=False):
    offsets, total = problem.layout()
    x = cp.Variable(max(total, 1))
    cons = []
    for name, amat, lmi_margin in problem.lmis:
        C = problem.lmi_coefficients(amat)
        m = amat.m
        expr = cp.reshape(C[:, 1:] @ x[:total] + C[:, 0].toarray().ravel(), (m, m), order="F") if total else \
            cp.Constant(C[:, 0].toarray().reshape(m, m, order="F"))
        eps = lmi_margin if margin is None else margin
        cons.append(expr >> eps * np.eye(m))
    for name, var in problem.vars.items():
        a, b = offsets[name]
        if var.kind == "sym" and var.sign in ("psd", "nsd"):
            X = cp.reshape(var.basemap() @ x[a:b], (var.n, var.n), order="F")
            cons.append(X >> 0 if var.sign == "psd" else X << 0)
        elif var.sign in ("nonneg", "psd"):
            cons.append(x[a:b] >= 0)
        elif var.sign == "nsd":
            cons.append(x[a:b] <= 0)
    obj = 0
    for var, coef in problem.objective:
        a, b = offsets[var.name]
        obj = obj + coef * cp.sum(x[a:b])
    objective = cp.Minimize(0 if feasibility else obj)
    return cp.Problem(objective, cons), x


def _solver_kwargs(solver, tol, verbose):
    if solver == "CLARABEL":
        return dict(tol_gap_abs=tol, tol_gap_rel=tol, tol_feas=tol, max_iter=400, verbose=verbose)
    if solver == "SCS":
        eps = max(tol, 1e-7)
        return dict(eps_abs=eps, eps_rel=eps, max_iters=200000, verbose=verbose, acceleration_lookback=10)
    if solver == "CVXOPT":
        eps = max(tol, 1e-8)
        return dict(abstol=eps, reltol=eps, feastol=eps, max_iters=200, verbose=verbose)
    return dict(verbose=verbose)


def min_eigenvalues(problem, values):
    out = {}
    for name, amat, _ in problem.lmis:
        M = amat.value(values)
        out[name] = float(np.linalg.eigvalsh(0.5 * (M + M.T))[0]) if amat.m else 0.0
    for name, var in problem.vars.items():
        if var.kind == "sym" and var.sign in ("psd", "nsd") and var.n:
            X = var.matrix(values[name])
            sgn = 1.0 if var.sign == "psd" else -1.0
            out[name] = float(np.linalg.eigvalsh(sgn * X)[0] / max(1.0, np.abs(X).max()))
    return out


def solve(problem, solver="auto", tol=None, margin=None, verbose=False, retries=2):
    """Solve an SdpProblem. Returns (values or None, SolverReport).

    Status is 'optimal', 'infeasible' or 'numerical_trouble'. If the returned
    point violates an LMI by more than the eigenvalue tolerance, the problem is
    re-solved with a larger strictness margin.
    """
    tol = env_float("ROESSERLIP_SOLVER_TOL", DEFAULT_TOL if tol is None else tol)
    eig_tol = env_float("ROESSERLIP_EIG_TOL", EIG_TOL)
    name = _choose_solver(problem, solver)
    if name not in cp.installed_solvers():
        raise SolverError(f"solver backend {name} is not available")
    eps = default_margin(name) if margin is None else margin
    t0 = time.perf_counter()
    if problem.layout()[1] == 0:
        return _solve_constant(problem, name, eps, eig_tol, t0)
    values, report = None, None
    for attempt in range(retries + 1):
        prob, x = _cvx_problem(problem, eps)
        try:
            prob.solve(solver=name, **_solver_kwargs(name, tol, verbose))
        except cp.error.SolverError as exc:
            report = SolverReport("numerical_trouble", solver=name, margin=eps, raw_status=str(exc))
            # interior-point methods can stall near the optimum; accept a looser stopping rule
            tol = tol * 100
            continue
        raw = prob.status
        stats = prob.solver_stats
        iters = int(getattr(stats, "num_iters", 0) or 0)
        if raw in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
            report = SolverReport("infeasible", iterations=iters, solver=name, margin=eps, raw_status=raw)
            values = None
            break
        if x.value is None:
            report = SolverReport("numerical_trouble", iterations=iters, solver=name, margin=eps, raw_status=raw)
            break
        values = problem.split(np.asarray(x.value).reshape(-1))
        eigs = min_eigenvalues(problem, values)
        ok = raw in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE) and min(eigs.values(), default=0.0) >= -eig_tol
        report = SolverReport(
            "optimal" if ok else "numerical_trouble", objective=problem.objective_value(values),
            min_eigs=eigs, iterations=iters, solver=name, margin=eps, raw_status=raw,
        )
        if ok or raw not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
            break
        eps = max(eps * 10, 1e-7)
    report.wall_time = time.perf_counter() - t0
    return values, report


def _solve_constant(problem, name, eps, eig_tol, t0):
    """A problem without free parameters is feasible iff every constant LMI is."""
    eigs = min_eigenvalues(problem, {})
    ok = all(eigs[n] >= min(lmi_margin if eps is None else eps, 0.0) - eig_tol for n, _, lmi_margin in problem.lmis)
    report = SolverReport("optimal" if ok else "infeasible", objective=0.0, min_eigs=eigs, solver=name,
                          margin=eps, raw_status="constant")
    report.wall_time = time.perf_counter() - t0
    return ({} if ok else None), report


def solve_bisection(problem, var, lo, hi, solver="auto", rel_tol=1e-6, max_steps=60):
    """Minimize a scalar variable by bisection on feasibility problems (var fixed to a value)."""
    from .lmi import AffineMatrix

    best = None
    for _ in range(max_steps):
        if hi - lo <= rel_tol * max(hi, 1e-12):
            break
        mid = 0.5 * (lo + hi)
        fixed = _fix_scalar(problem, var, mid, AffineMatrix)
        fixed.objective = []
        values, report = solve(fixed, solver=solver)
        if report.status == "optimal":
            hi, best = mid, values
            best[var.name] = np.array([mid])
        else:
            lo = mid
    return hi, best


def _fix_scalar(problem, var, value, AffineMatrix):
    from .lmi import SdpProblem

    out = SdpProblem()
    for name, v in problem.vars.items():
        if name != var.name:
            out.add_var(v)
    for name, amat, margin in problem.lmis:
        new = AffineMatrix(amat.m)
        new.const = amat.const.copy()
        for vname, K in amat.coefs.items():
            if vname == var.name:
                new.const = new.const + (K @ np.array([value])).reshape(amat.m, amat.m, order="F")
            else:
                new.coefs[vname] = K
                new.vars[vname] = amat.vars[vname]
        out.add_lmi(name, new, margin)
    return out


# ---------------------------------------------------------------- validation


@dataclass
class ValidationReport:
    passed: bool
    checks: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)

    def to_dict(self):
        return {"passed": self.passed, "checks": self.checks, "failures": self.failures}


def _targets(target):
    from .model import ConvLayerSpec, NetworkSpec

    if isinstance(target, NetworkSpec):
        return target, list(target.conv_layers)
    if isinstance(target, ConvLayerSpec):
        return None, [target]
    return None, list(target)


def numeric_lure_lmi(sys, cert):
    """Re-evaluate the robust dissipation LMI from the certificate with dense numpy algebra.

    Uses the solver's coordinates (input/output scaling and normalization) so the
    eigenvalue test sees the matrix the solver constrained.
    """
    n1, n2, nz, c_in = sys.n1, sys.n2, sys.nz, sys.c_in
    B = np.eye(n1 + n2) if cert.basis is None else np.asarray(cert.basis)
    k = B.shape[1]
    su = 1.0 / cert.input_scale
    so = cert.output_scale
    Bx1, Bx2 = B[:n1], B[n1:]

    def row(A1, A2, Bw, Bu):
        return np.hstack([np.hstack([A1, A2]) @ B, Bw, Bu * su])

    X1n = row(sys.mA11, sys.mA12, sys.mB11, sys.mB12)
    X2n = row(sys.mA21, sys.mA22, sys.mB21, sys.mB22)
    X1 = np.hstack([Bx1, np.zeros((n1, nz + c_in))])
    X2 = np.hstack([Bx2, np.zeros((n2, nz + c_in))])
    Z = row(sys.mC11, sys.mC12, sys.mD11, sys.mD12)
    W = np.hstack([np.zeros((nz, k)), np.eye(nz), np.zeros((nz, c_in))])
    Y = row(sys.mC21, sys.mC22, sys.mD21, sys.mD22) / so
    U = np.hstack([np.zeros((c_in, k + nz)), su * np.eye(c_in)])
    s2 = so**2
    P1, P2 = cert.P1 / s2, cert.P2 / s2
    lam = np.diag(np.asarray(cert.lambda_c, dtype=float).reshape(-1) / s2) if nz else np.zeros((0, 0))
    g2 = cert.gamma_sq / so**2
    M = -X1n.T @ P1 @ X1n - X2n.T @ P2 @ X2n + X1.T @ P1 @ X1 + X2.T @ P2 @ X2
    M += g2 * U.T @ U
    if cert.kind == "hybrid":
        M += Y.T @ cert.Q_C @ Y
    else:
        M -= Y.T @ Y
    if nz:
        M += 2 * W.T @ lam @ W - W.T @ lam @ Z - Z.T @ lam @ W
    scale = cert.lmi_scales.get("robust_dissipation", 1.0)
    return 0.5 * (M + M.T) / scale


def numeric_dense_lmi(weights, cert, d_l):
    """Dense-chain LMI re-evaluated from the certificate (normalized as in the solver)."""
    weights = [np.asarray(W) for W in weights]
    W1 = weights[0]
    Q_C = np.asarray(cert.Q_C)
    if cert.dense_basis is not None:
        U = np.asarray(cert.dense_basis)
        W1 = W1 @ U
        q = -float(Q_C[0, 0])
        R_L = q * np.eye(U.shape[1])
    else:
        R_L = np.kron(np.eye(d_l * d_l), -Q_C)
    Ws = [W1] + weights[1:]
    sizes = [W1.shape[1]] + [W.shape[0] for W in weights]
    edges = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    M = np.zeros((edges[-1], edges[-1]))
    M[:edges[1], :edges[1]] = R_L
    for k in range(1, len(weights)):
        lam = np.diag(cert.lambdas_dense[k - 1])
        rk, rp = slice(edges[k], edges[k + 1]), slice(edges[k - 1], edges[k])
        M[rk, rk] = 2 * lam
        M[rk, rp] = -lam @ Ws[k - 1]
        M[rp, rk] = M[rk, rp].T
    m = len(weights)
    rl, rp = slice(edges[m], edges[m + 1]), slice(edges[m - 1], edges[m])
    M[rl, rp] = -Ws[-1]
    M[rp, rl] = -Ws[-1].T
    M[rl, rl] = np.eye(sizes[-1])
    scale = cert.lmi_scales.get("dense_chain", 1.0)
    return M / scale


def _psd_check(M, tol):
    if M is None or M.size == 0:
        return 0.0
    M = np.asarray(M)
    return float(np.linalg.eigvalsh(0.5 * (M + M.T))[0] / max(1.0, np.abs(M).max())) if M.size else 0.0


def _random_pairs(rng, trials, shape):
    u1 = rng.standard_normal((trials,) + shape)
    u2 = u1 + rng.standard_normal((trials,) + shape) * rng.choice([1.0, 0.1, 0.01], size=(trials, 1, 1, 1))
    return u1, u2


def validate_certificate(target, cert, trials=100, seed=0, input_size=None, eig_tol=None, diss_tol=None,
                         batch=10):
    """Independent re-check of a certificate.

    (a) eigenvalues of every LMI and sign constraint recomputed from the
    certificate; (b) the pointwise robust dissipation inequality
    V(x+) <= V(x) + s + s^w at every node of ``trials`` random error trajectories
    (zero boundary states); (c) the summed inequality over the rectangle. For
    hybrid networks the dense part and the end-to-end gain are checked too.
    """
    from .model import flatten_dims
    from .signal2d import network_forward_batch

    eig_tol = env_float("ROESSERLIP_EIG_TOL", EIG_TOL if eig_tol is None else eig_tol)
    diss_tol = env_float("ROESSERLIP_DISS_TOL", DISS_TOL if diss_tol is None else diss_tol)
    spec, layers = _targets(target)
    sys = error_system(assemble_lure(layers, final_activation=cert.final_activation))
    failures = []
    checks = {}

    # (a) eigenvalue re-checks
    lmi = numeric_lure_lmi(sys, cert)
    checks["lmi_min_eig"] = float(np.linalg.eigvalsh(lmi)[0]) if lmi.size else 0.0
    checks["P1_min_eig"] = _psd_check(cert.P1, eig_tol)
    checks["P2_min_eig"] = _psd_check(cert.P2, eig_tol)
    lam_c = np.asarray(cert.lambda_c).reshape(-1)
    checks["lambda_min"] = float(lam_c.min()) if lam_c.size else 0.0
    for key in ("lmi_min_eig", "P1_min_eig", "P2_min_eig"):
        if checks[key] < -eig_tol:
            failures.append(f"{key} = {checks[key]:.3e} < -{eig_tol:g}")
    if checks["lambda_min"] < -eig_tol * max(1.0, np.abs(lam_c).max(initial=0.0)):
        failures.append(f"negative slope multiplier {checks['lambda_min']:.3e}")
    if cert.gamma_sq < 0 or not np.isfinite(cert.gamma_sq):
        failures.append("gamma_sq is negative or not finite")
    hybrid = cert.kind == "hybrid"
    if hybrid:
        if spec is None:
            raise ValueError("hybrid certificates are validated against a NetworkSpec")
        d_l, c_l = flatten_dims(spec)
        dense = numeric_dense_lmi([l.weight for l in spec.dense_layers], cert, d_l)
        checks["dense_lmi_min_eig"] = float(np.linalg.eigvalsh(dense)[0])
        checks["Q_C_max_eig"] = float(np.linalg.eigvalsh(cert.Q_C)[-1] / max(1.0, np.abs(cert.Q_C).max()))
        for k, lam in enumerate(cert.lambdas_dense, start=1):
            if np.min(lam) < -eig_tol * max(1.0, np.abs(lam).max()):
                failures.append(f"negative dense multiplier in layer {k}")
        if checks["dense_lmi_min_eig"] < -eig_tol:
            failures.append(f"dense_lmi_min_eig = {checks['dense_lmi_min_eig']:.3e} < -{eig_tol:g}")
        if checks["Q_C_max_eig"] > eig_tol:
            failures.append(f"Q_C is not negative semidefinite (max eig {checks['Q_C_max_eig']:.3e})")

    # (b), (c) trajectory checks on the error system
    rng = np.random.default_rng(seed)
    if spec is not None:
        shape = (spec.input_height, spec.input_width, spec.input_channels)
    else:
        d = input_size or 8
        shape = (d, d, layers[0].c_in)
    activation = spec.activation if spec is not None else "relu"
    phi = activation_fn(activation)
    lin = assemble_lure(layers, final_activation=cert.final_activation)
    extent = sum(lin.widths)
    region = (shape[0] + extent, shape[1] + extent)
    u1_all, u2_all = _random_pairs(rng, trials, shape)
    P1, P2 = cert.P1, cert.P2
    lam = lam_c
    worst = np.inf
    worst_where = None
    worst_sum = np.inf
    worst_ratio = 0.0
    dense_worst = np.inf
    for start in range(0, trials, batch):
        u1 = u1_all[start:start + batch]
        u2 = u2_all[start:start + batch]
        nb = u1.shape[0]
        v1 = np.zeros((nb,) + region + (shape[2],))
        v2 = np.zeros_like(v1)
        v1[:, :shape[0], :shape[1]] = u1
        v2[:, :shape[0], :shape[1]] = u2
        _, z_ref, *_ = lure_sweep(lin, phi, v1, return_states=False)
        dv = v2 - v1
        y, z, w, x1, x2, x1n, x2n = lure_sweep(sys, phi, dv, z_offset=z_ref)
        V = np.einsum("...i,ij,...j->...", x1, P1, x1) + np.einsum("...i,ij,...j->...", x2, P2, x2)
        Vn = np.einsum("...i,ij,...j->...", x1n, P1, x1n) + np.einsum("...i,ij,...j->...", x2n, P2, x2n)
        su = cert.gamma_sq * np.sum(dv**2, axis=-1)
        if hybrid:
            sy = np.einsum("...i,ij,...j->...", y, cert.Q_C, y)
        else:
            sy = -np.sum(y**2, axis=-1)
        s = su + sy
        sw = 2 * np.sum(w * lam * w, axis=-1) - 2 * np.sum(w * lam * z, axis=-1) if lam.size else 0.0 * s
        resid = V + s + sw - Vn
        mag = 1.0 + np.abs(V) + np.abs(Vn) + np.abs(su) + np.abs(sy) + np.abs(sw)
        rel = resid / mag
        idx = np.unravel_index(np.argmin(rel), rel.shape)
        if rel[idx] < worst:
            worst = float(rel[idx])
            worst_where = tuple(int(i) for i in idx)
        exit_v = (np.einsum("...i,ij,...j->...", x1n[:, -1], P1, x1n[:, -1]).sum(axis=-1)
                  + np.einsum("...i,ij,...j->...", x2n[:, :, -1], P2, x2n[:, :, -1]).sum(axis=-1))
        total = (s + sw).sum(axis=(1, 2)) - exit_v
        total_mag = 1.0 + np.abs(s).sum(axis=(1, 2)) + np.abs(sw).sum(axis=(1, 2)) + exit_v
        worst_sum = min(worst_sum, float(np.min(total / total_mag)))
        du_norm = np.sqrt(np.sum(dv**2, axis=(1, 2, 3)))
        if hybrid:
            feats1 = _dense_features(spec, u1)
            feats2 = _dense_features(spec, u2)
            out1 = network_forward_batch(spec, u1)
            out2 = network_forward_batch(spec, u2)
            dy = out2 - out1
            du_dense = feats2 - feats1
            if cert.dense_basis is not None:
                q = -float(cert.Q_C[0, 0])
                rl_val = q * np.sum(du_dense**2, axis=1)
            else:
                blocks = du_dense.reshape(nb, -1, cert.Q_C.shape[0])
                rl_val = -np.einsum("nbi,ij,nbj->n", blocks, cert.Q_C, blocks)
            dense_res = (rl_val - np.sum(dy**2, axis=1)) / (1.0 + np.abs(rl_val) + np.sum(dy**2, axis=1))
            dense_worst = min(dense_worst, float(dense_res.min()))
            dy_norm = np.linalg.norm(dy, axis=1)
        else:
            dy_norm = np.sqrt(np.sum(y**2, axis=(1, 2, 3)))
        ok = du_norm > 0
        if np.any(ok):
            worst_ratio = max(worst_ratio, float(np.max(dy_norm[ok] / du_norm[ok])))
    checks["pointwise_min_rel_residual"] = worst
    checks["pointwise_worst_node"] = worst_where
    checks["summed_min_rel_residual"] = worst_sum
    checks["empirical_gain"] = worst_ratio
    if worst < -diss_tol:
        failures.append(f"pointwise dissipation violated at (trial, i1, i2) = {worst_where}: relative residual {worst:.3e}")
    if worst_sum < -diss_tol:
        failures.append(f"summed dissipation violated: relative residual {worst_sum:.3e}")
    if hybrid:
        checks["dense_min_rel_residual"] = dense_worst
        if dense_worst < -diss_tol:
            failures.append(f"dense supply violated: relative residual {dense_worst:.3e}")
    if worst_ratio > cert.gamma * (1 + 1e-4) + 1e-12:
        failures.append(f"empirical gain {worst_ratio:.6g} exceeds gamma {cert.gamma:.6g}")
    return ValidationReport(not failures, checks, failures)


def _dense_features(spec, images):
    """sigma of the cropped conv output, flattened: the input of the first dense layer."""
    from .model import NetworkSpec
    from .signal2d import network_forward_batch

    conv_only = NetworkSpec(spec.input_height, spec.input_width, spec.input_channels, spec.conv_layers,
                            (), spec.activation)
    return activation_fn(spec.activation)(network_forward_batch(conv_only, images))


def certificate_from_json(path):
    return LipschitzCertificate.from_json(path)
