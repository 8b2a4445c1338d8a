"""Nonlinear solvers for the discrete elliptic grid equations on a fixed space.

Every solver takes a map ``x0`` whose boundary coefficients hold the
Dirichlet data, only ever changes interior coefficients, and returns the
final map together with a :class:`SolveReport`.
"""
from __future__ import annotations

import time
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import (BijectivityError, EPS_DEFAULT, TAUS, gateaux_exact, gateaux_fd, jacobian_F,
                       mass_matrix, pack, picard_system, residual_F, unpack, winslow_hessian,
                       winslow_value_and_gradient)
from .quality import bijectivity_scan
from .thb import GeometryMap

__all__ = [
    "METHODS",
    "SolverConfig",
    "SolveReport",
    "newton_solve",
    "newton_krylov_solve",
    "ptc_solve",
    "picard_solve",
    "direct_winslow",
    "solve",
    "next_time_step",
]

METHODS = ("newton", "newton-krylov", "ptc", "picard", "direct-winslow")
DT_CAP = 1e12
MAX_HALVINGS = 30


@dataclass(frozen=True)
class SolverConfig:
    """Settings shared by all solution strategies.

    Parameters
    ----------
    method : str
        One of :data:`METHODS`.
    tau : str
        Test-function weighting ``Id``, ``div`` or ``ls``.
    mu : float
        Artificial diffusion; enters the weightings and the Picard operator.
    tol_residual : float
        Relative residual tolerance: stop once ``|F| <= tol_residual (1 + |F0|)``.
    tol_increment : float
        Absolute tolerance on the coefficient increment (max norm).
    """

    method: str = "newton"
    tau: str = "Id"
    mu: float = 0.0
    tol_residual: float = 1e-8
    tol_increment: float = 1e-10
    max_iters: int = 50
    eps_fd: float = 1e-7
    dt0: float = 1.0
    linesearch: str = "backtracking"
    eps: float = EPS_DEFAULT
    directional: str = "fd"
    krylov_rtol: float = 1e-3
    fallback: bool = False
    fallback_mu: float = 1e-2

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError("method must be one of %s" % (METHODS,))
        if self.tau not in TAUS:
            raise ValueError("tau must be one of %s" % (TAUS,))
        if self.tol_residual <= 0 or self.tol_increment <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.mu < 0:
            raise ValueError("mu must be nonnegative")
        if self.linesearch not in ("none", "backtracking"):
            raise ValueError("linesearch must be 'none' or 'backtracking'")
        if self.directional not in ("fd", "exact"):
            raise ValueError("directional must be 'fd' or 'exact'")


@dataclass
class SolveReport:
    """Per-iteration audit trail of a solve."""

    method: str
    tau: str
    mu: float
    ndof: int
    iterations: list = field(default_factory=list)
    converged: bool = False
    message: str = ""
    final_residual: float = np.nan
    min_det: float = np.nan
    n_negative: int = 0
    winslow: float | None = None
    warnings: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    wall_time: float = 0.0

    @property
    def residuals(self):
        return [it["residual"] for it in self.iterations]

    @property
    def n_iterations(self) -> int:
        return max(len(self.iterations) - 1, 0)

    def log(self, **entry):
        entry.setdefault("iter", len(self.iterations))
        self.iterations.append({k: (float(v) if isinstance(v, (np.floating, float)) else v)
                                for k, v in entry.items()})

    def to_dict(self, include_time: bool = False) -> dict:
        d = asdict(self)
        if not include_time:
            d.pop("wall_time")
        return d

    def residual_csv(self) -> str:
        keys = ["iter", "residual", "increment", "step", "linear_iters"]
        lines = [",".join(keys)]
        for it in self.iterations:
            lines.append(",".join("" if it.get(k) is None else repr(it.get(k)) for k in keys))
        return "\n".join(lines) + "\n"


def next_time_step(dt_prev: float, res_prev: float, res: float) -> float:
    """Residual-ratio time-step update ``dt_prev |F_prev| / |F|``, capped."""
    if res <= 0:
        return DT_CAP
    return min(dt_prev * res_prev / res, DT_CAP)


def _finish(report, x, cfg, s, t0):
    F = residual_F(x, cfg.tau, cfg.mu, s, cfg.eps)
    report.final_residual = float(np.linalg.norm(F))
    mn, neg = bijectivity_scan(x)
    report.min_det = mn
    report.n_negative = int(len(neg))
    report.wall_time = time.perf_counter() - t0
    return x, report


def _new_report(x0, cfg):
    rep = SolveReport(cfg.method, cfg.tau, cfg.mu, x0.space.ndof)
    if cfg.method == "picard" and cfg.mu == 0:
        rep.warnings.append("mu = 0: the Picard linearization may be ill-posed")
    return rep


def _residual(x, cfg, s):
    return residual_F(x, cfg.tau, cfg.mu, s, cfg.eps)


def _line_search(x, u, du, F_norm, cfg, s):
    """Halve the step until the residual norm decreases; returns (u, F, kappa) or None."""
    space = x.space
    kappa = 1.0
    for _ in range(MAX_HALVINGS if cfg.linesearch == "backtracking" else 1):
        xn = x.with_coeffs(unpack(space, u + kappa * du, x.coeffs))
        Fn = _residual(xn, cfg, s)
        if cfg.linesearch == "none" or np.linalg.norm(Fn) < F_norm:
            return xn, Fn, kappa
        kappa *= 0.5
    return None


def _newton_like(x0, cfg, s, linear_solve, report):
    t0 = time.perf_counter()
    x = x0.copy()
    space = x.space
    F = _residual(x, cfg, s)
    r0 = float(np.linalg.norm(F))
    tol = cfg.tol_residual * (1.0 + r0)
    report.log(residual=r0, increment=None, step=None, linear_iters=None)
    if r0 <= tol:
        report.converged = True
        report.message = "initial residual below tolerance"
        return _finish(report, x, cfg, s, t0)
    for _ in range(cfg.max_iters):
        try:
            du, lin_its, note = linear_solve(x, F)
        except (RuntimeError, np.linalg.LinAlgError) as err:
            report.message = "singular Jacobian: %s" % err
            return _finish(report, x, cfg, s, t0)
        if note:
            report.warnings.append("iteration %d: %s" % (len(report.iterations), note))
        u = pack(space, x.coeffs)
        res = _line_search(x, u, du, float(np.linalg.norm(F)), cfg, s)
        if res is None:
            report.message = "line search failed to reduce the residual"
            return _finish(report, x, cfg, s, t0)
        x, F, kappa = res
        inc = kappa * float(np.abs(du).max(initial=0.0))
        rn = float(np.linalg.norm(F))
        report.log(residual=rn, increment=inc, step=kappa, linear_iters=lin_its)
        if rn <= tol:
            report.converged = True
            report.message = "residual below tolerance"
            return _finish(report, x, cfg, s, t0)
    report.message = "maximum number of iterations reached"
    return _finish(report, x, cfg, s, t0)


def _direct_solve(A, b):
    lu = spla.splu(sp.csc_matrix(A))
    x = lu.solve(b)
    if not np.all(np.isfinite(x)):
        raise np.linalg.LinAlgError("non-finite solution")
    return x


def newton_solve(x0: GeometryMap, cfg: SolverConfig = SolverConfig(), s=None):
    """Newton's method with halving line search on the residual norm."""
    cfg = replace(cfg, method="newton")
    report = _new_report(x0, cfg)

    def linear_solve(x, F):
        J = jacobian_F(x, cfg.tau, cfg.mu, s, cfg.eps)
        return _direct_solve(J, -F), None, None

    x, report = _newton_like(x0, cfg, s, linear_solve, report)
    return _maybe_fallback(x0, x, report, cfg, s)


def newton_krylov_solve(x0: GeometryMap, cfg: SolverConfig = SolverConfig(method="newton-krylov"), s=None):
    """Inexact Newton; GMRES sees the Jacobian only through directional derivatives."""
    cfg = replace(cfg, method="newton-krylov")
    report = _new_report(x0, cfg)

    def linear_solve(x, F):
        n = len(F)

        def matvec(v):
            v = np.asarray(v).ravel()
            if cfg.directional == "exact":
                return gateaux_exact(x, cfg.tau, cfg.mu, s, v, cfg.eps)
            scale = cfg.eps_fd * (1.0 + np.abs(x.coeffs).max()) / max(np.abs(v).max(), 1e-300)
            return gateaux_fd(x, cfg.tau, cfg.mu, s, v * scale, eps_fd=1.0, eps=cfg.eps) / scale

        op = spla.LinearOperator((n, n), matvec=matvec, dtype=float)
        count = [0]

        def cb(_):
            count[0] += 1

        du, info = spla.gmres(op, -F, rtol=cfg.krylov_rtol, atol=0.0, restart=min(n, 200),
                              maxiter=max(1, 2 * n // min(n, 200) + 2), callback=cb,
                              callback_type="pr_norm")
        if info != 0 or not np.all(np.isfinite(du)):
            J = jacobian_F(x, cfg.tau, cfg.mu, s, cfg.eps)
            return _direct_solve(J, -F), count[0], "Krylov stagnation; assembled Newton step used"
        return du, count[0], None

    x, report = _newton_like(x0, cfg, s, linear_solve, report)
    return _maybe_fallback(x0, x, report, cfg, s)


def _maybe_fallback(x0, x, report, cfg, s):
    if report.converged or not cfg.fallback:
        return x, report
    pcfg = replace(cfg, method="picard", mu=cfg.fallback_mu, fallback=False)
    xp, prep = picard_solve(x0, pcfg, s)
    prep.warnings.insert(0, "%s failed (%s); fell back to picard with mu=%g"
                         % (cfg.method, report.message, cfg.fallback_mu))
    return xp, prep


def ptc_solve(x0: GeometryMap, cfg: SolverConfig = SolverConfig(method="ptc"), s=None):
    """Pseudo-transient continuation with residual-ratio time steps (tau forced to Id)."""
    t0 = time.perf_counter()
    if cfg.tau != "Id":
        warnings.warn("ptc uses tau=Id; requested tau=%s ignored" % cfg.tau)
    cfg = replace(cfg, method="ptc", tau="Id")
    report = _new_report(x0, cfg)
    x = x0.copy()
    space = x.space
    I = space.interior_dofs
    M = mass_matrix(space)[I][:, I]
    M2 = sp.block_diag([M, M], format="csr")
    F = _residual(x, cfg, s)
    res_prev = res = float(np.linalg.norm(F))
    dt = cfg.dt0
    report.log(residual=res, increment=None, step=dt, linear_iters=None)
    for _ in range(cfg.max_iters):
        J = jacobian_F(x, cfg.tau, cfg.mu, s, cfg.eps)
        try:
            du = _direct_solve(M2 / dt + J, -F)
        except (RuntimeError, np.linalg.LinAlgError) as err:
            report.message = "singular time-step system: %s" % err
            return _finish(report, x, cfg, s, t0)
        x = x.with_coeffs(unpack(space, pack(space, x.coeffs) + du, x.coeffs))
        F = _residual(x, cfg, s)
        res_prev, res = res, float(np.linalg.norm(F))
        if not np.isfinite(res):
            report.message = "diverged"
            return _finish(report, x, cfg, s, t0)
        inc = float(np.abs(du).max(initial=0.0))
        dt = next_time_step(dt, res_prev, res)
        report.log(residual=res, increment=inc, step=dt, linear_iters=None)
        if inc <= cfg.tol_increment:
            report.converged = True
            report.message = "increment below tolerance"
            return _finish(report, x, cfg, s, t0)
    report.message = "maximum number of iterations reached"
    return _finish(report, x, cfg, s, t0)


def picard_solve(x0: GeometryMap, cfg: SolverConfig = SolverConfig(method="picard", mu=1e-2), s=None):
    """Fixed-point iteration on the linearized, diffusion-stabilized equations."""
    t0 = time.perf_counter()
    cfg = replace(cfg, method="picard")
    report = _new_report(x0, cfg)
    x = x0.copy()
    space = x.space
    report.log(residual=float(np.linalg.norm(_residual(x, cfg, s))), increment=None, step=None,
               linear_iters=None)
    for _ in range(cfg.max_iters):
        K, b = picard_system(x, cfg.tau, cfg.mu, s, cfg.eps)
        try:
            u = _direct_solve(K, b)
        except (RuntimeError, np.linalg.LinAlgError) as err:
            hint = " (try mu > 0)" if cfg.mu == 0 else ""
            report.message = "linear solve failed: %s%s" % (err, hint)
            return _finish(report, x, cfg, s, t0)
        inc = float(np.abs(u - pack(space, x.coeffs)).max(initial=0.0))
        x = x.with_coeffs(unpack(space, u, x.coeffs))
        report.log(residual=float(np.linalg.norm(_residual(x, cfg, s))), increment=inc, step=None,
                   linear_iters=None)
        if inc <= cfg.tol_increment:
            report.converged = True
            report.message = "increment below tolerance"
            return _finish(report, x, cfg, s, t0)
    report.message = "maximum number of iterations reached"
    return _finish(report, x, cfg, s, t0)


def direct_winslow(x0: GeometryMap, cfg: SolverConfig = SolverConfig(method="direct-winslow")):
    """Newton minimization of the Winslow functional from a bijective start.

    Steps are halved until every quadrature point keeps ``det J > 0`` and the
    functional does not increase.
    """
    t0 = time.perf_counter()
    cfg = replace(cfg, method="direct-winslow")
    report = _new_report(x0, cfg)
    x = x0.copy()
    space = x.space
    try:
        val, g = winslow_value_and_gradient(x)
    except BijectivityError as err:
        raise BijectivityError("direct Winslow needs a bijective initial map: %s" % err) from None
    g0 = float(np.linalg.norm(g))
    tol = cfg.tol_residual * (1.0 + g0)
    report.log(residual=g0, increment=None, step=None, linear_iters=None, winslow=val)
    if g0 <= tol:
        report.converged = True
        report.message = "initial gradient below tolerance"
    for _ in range(0 if report.converged else cfg.max_iters):
        H = winslow_hessian(x)
        try:
            du = _direct_solve(H, -g)
        except (RuntimeError, np.linalg.LinAlgError) as err:
            report.message = "singular Hessian (%s); retry with a refined initial map" % err
            break
        if du @ g >= 0:
            du = -g
        u = pack(space, x.coeffs)
        kappa, accepted = 1.0, None
        for _ in range(MAX_HALVINGS):
            xn = x.with_coeffs(unpack(space, u + kappa * du, x.coeffs))
            try:
                vn, gn = winslow_value_and_gradient(xn)
            except BijectivityError:
                kappa *= 0.5
                continue
            if vn <= val + 1e-14 * abs(val):
                accepted = (xn, vn, gn)
                break
            kappa *= 0.5
        if accepted is None:
            report.message = "line search failed; retry with a refined initial map"
            break
        x, val, g = accepted
        gn = float(np.linalg.norm(g))
        inc = kappa * float(np.abs(du).max(initial=0.0))
        report.log(residual=gn, increment=inc, step=kappa, linear_iters=None, winslow=val)
        if gn <= tol or inc <= cfg.tol_increment:
            report.converged = True
            report.message = "gradient below tolerance" if gn <= tol else "increment below tolerance"
            break
    else:
        if not report.converged:
            report.message = "maximum number of iterations reached"
    report.winslow = val
    mn, neg = bijectivity_scan(x)
    report.min_det, report.n_negative = mn, int(len(neg))
    report.final_residual = float(np.linalg.norm(g))
    report.wall_time = time.perf_counter() - t0
    return x, report


def solve(x0: GeometryMap, cfg: SolverConfig, s=None):
    """Dispatch on ``cfg.method``."""
    if cfg.method == "newton":
        return newton_solve(x0, cfg, s)
    if cfg.method == "newton-krylov":
        return newton_krylov_solve(x0, cfg, s)
    if cfg.method == "ptc":
        return ptc_solve(x0, cfg, s)
    if cfg.method == "picard":
        return picard_solve(x0, cfg, s)
    if s is not None:
        raise ValueError("direct-winslow does not take a control map")
    return direct_winslow(x0, cfg)
