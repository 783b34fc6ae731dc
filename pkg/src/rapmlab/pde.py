"""RAPM operator, residual verification and an independent FD solver.

The operator evaluated everywhere in this package is

    N[u] = u_t + (sigma^2/2) S^2 u_SS (1 - mu cbrt(S u_SS)) - r u + r S u_S,

with cbrt the signed real cube root (odd: cbrt(-x) = -cbrt(x)), which
makes the operator total and odd-symmetric in the curvature argument.

``residual_norm`` is the verification harness used by every solution
family; ``fd_solve`` is a backward-marching weighted-implicit scheme
with a frozen-coefficient (Picard) treatment of the nonlinear factor,
used as an independent cross-check of the closed forms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.linalg import solve_banded
from scipy.special import ndtr

from .errors import (
    NumericalError,
    ParabolicityLost,
    PicardStalled,
    SupportError,
    ValidationError,
)
from .model import ModelParams
from .quartic import signed_cbrt

__all__ = [
    "Rect",
    "SurfaceFn",
    "GridSpec",
    "ResidualReport",
    "rapm_operator",
    "residual_norm",
    "fd_solve",
    "bs_closed_form",
    "convergence_order",
    "ConvergenceReport",
]


@dataclass(frozen=True)
class Rect:
    """Axis-aligned support rectangle in the (S, t) plane."""

    S_min: float
    S_max: float
    t_min: float
    t_max: float

    def __post_init__(self):
        if not (self.S_max > self.S_min and self.t_max >= self.t_min):
            raise ValidationError(f"degenerate support rectangle {self}")

    def contains(self, S, t, margin: float = 0.0) -> bool:
        return bool(
            np.all(S >= self.S_min - margin)
            and np.all(S <= self.S_max + margin)
            and np.all(t >= self.t_min - margin)
            and np.all(t <= self.t_max + margin)
        )


@dataclass
class SurfaceFn:
    """An evaluatable price surface u(S, t) with optional derivatives.

    ``u`` (and the derivative callables, when given) must accept numpy
    arrays and broadcast.  Analytic derivatives, when present, are
    expected to agree with finite differences to second order.
    """

    u: Callable
    support: Rect
    u_t: Callable | None = None
    u_S: Callable | None = None
    u_SS: Callable | None = None
    meta: dict = field(default_factory=dict)

    def __call__(self, S, t):
        return self.u(S, t)

    @property
    def has_derivatives(self) -> bool:
        return self.u_t is not None and self.u_S is not None and self.u_SS is not None

    def delta(self, S, t, rel_step: float = 1e-5):
        """u_S, analytic when available, else centered differences."""
        if self.u_S is not None:
            return self.u_S(S, t)
        h = np.maximum(np.asarray(S) * rel_step, 1e-9)
        return (self.u(S + h, t) - self.u(S - h, t)) / (2.0 * h)


@dataclass(frozen=True)
class GridSpec:
    """Evaluation/solver grid: S range (positive), t range, node counts."""

    S_min: float
    S_max: float
    t_min: float
    t_max: float
    n_S: int
    n_t: int
    spacing: str = "uniform"  # or "log" (uniform in ln S)

    def __post_init__(self):
        if self.S_min <= 0.0 or self.S_max <= self.S_min:
            raise ValidationError(f"need 0 < S_min < S_max, got [{self.S_min}, {self.S_max}]")
        if self.t_max <= self.t_min:
            raise ValidationError(f"need t_min < t_max, got [{self.t_min}, {self.t_max}]")
        if self.n_S < 3 or self.n_t < 3:
            raise ValidationError("n_S and n_t must be at least 3")
        if self.spacing not in ("uniform", "log"):
            raise ValidationError(f"unknown spacing {self.spacing!r}")

    def S_nodes(self) -> np.ndarray:
        if self.spacing == "log":
            return np.exp(np.linspace(math.log(self.S_min), math.log(self.S_max), self.n_S))
        return np.linspace(self.S_min, self.S_max, self.n_S)

    def t_nodes(self) -> np.ndarray:
        return np.linspace(self.t_min, self.t_max, self.n_t)

    def rect(self) -> Rect:
        return Rect(self.S_min, self.S_max, self.t_min, self.t_max)


def rapm_operator(p: ModelParams, u, u_t, u_S, u_SS, S):
    """Pointwise residual of the pricing operator (vectorized).

    Total in all arguments; S must be positive.
    """
    S = np.asarray(S, dtype=float)
    curv = S * np.asarray(u_SS, dtype=float)
    nonlinear = 0.5 * p.sigma ** 2 * S * curv * (1.0 - p.mu * signed_cbrt(curv))
    return np.asarray(u_t) + nonlinear - p.r * np.asarray(u) + p.r * S * np.asarray(u_S)


# ---------------------------------------------------------------------------
# residual verification
# ---------------------------------------------------------------------------

# centered 4th-order first/second derivative weights on +/-2h stencils
_C1 = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0
_C2 = np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / 12.0
# one-sided 2nd-order weights (forward; mirror for backward)
_F1 = np.array([-3.0, 4.0, -1.0]) / 2.0
_F2 = np.array([2.0, -5.0, 4.0, -1.0])


def _fd_1d(fn_line: Callable[[np.ndarray], np.ndarray], x0: float, h: float,
           lo: float, hi: float, second: bool):
    """Derivative(s) of a 1-d slice at x0 with support-aware stencils."""
    if x0 - 2 * h >= lo and x0 + 2 * h <= hi:
        xs = x0 + h * np.arange(-2.0, 3.0)
        vals = fn_line(xs)
        d1 = float(_C1 @ vals) / h
        d2 = float(_C2 @ vals) / (h * h) if second else None
        return d1, d2
    if x0 + 3 * h <= hi:
        sgn = 1.0
    elif x0 - 3 * h >= lo:
        sgn = -1.0
    else:
        raise SupportError("support too small for stencil")
    xs = x0 + sgn * h * np.arange(0.0, 4.0)
    vals = fn_line(xs)
    d1 = sgn * float(_F1 @ vals[:3]) / h
    d2 = float(_F2 @ vals) / (h * h) if second else None
    return d1, d2


@dataclass
class ResidualReport:
    """Residuals of a surface on a grid, plus parabolicity bookkeeping."""

    S: np.ndarray
    t: np.ndarray
    u: np.ndarray                  # (n_S, n_t)
    residual: np.ndarray           # (n_S, n_t)
    parabolicity_violations: int
    derivative_mode: str

    @property
    def max_abs(self) -> float:
        return float(np.max(np.abs(self.residual)))

    @property
    def max_scaled(self) -> float:
        """max |residual| / (1 + |u|) over the grid."""
        return float(np.max(np.abs(self.residual) / (1.0 + np.abs(self.u))))


def residual_norm(
    u_fn: SurfaceFn,
    p: ModelParams,
    g: GridSpec,
    derivatives: str = "auto",
) -> ResidualReport:
    """Evaluate the operator residual of ``u_fn`` on every node of ``g``.

    Analytic derivatives are used when the surface carries them (mode
    "auto") or when forced with "analytic"; mode "fd" always uses
    finite differences (4th-order centered where the support allows,
    2nd-order one-sided near the support edge).  Also counts nodes where
    the strict parabolicity condition S u_SS < (3/(4 mu))^3 fails.
    """
    if derivatives not in ("auto", "analytic", "fd"):
        raise ValidationError(f"unknown derivative mode {derivatives!r}")
    S = g.S_nodes()
    t = g.t_nodes()
    sup = u_fn.support
    if not sup.contains(S[0], t[0]) or not sup.contains(S[-1], t[-1]):
        raise SupportError("grid extends outside the surface support")

    SS, TT = np.meshgrid(S, t, indexing="ij")
    u = np.asarray(u_fn(SS, TT), dtype=float)

    use_analytic = derivatives == "analytic" or (
        derivatives == "auto" and u_fn.has_derivatives
    )
    if derivatives == "analytic" and not u_fn.has_derivatives:
        raise ValidationError("surface has no analytic derivatives")

    if use_analytic:
        ut = np.asarray(u_fn.u_t(SS, TT), dtype=float)
        uS = np.asarray(u_fn.u_S(SS, TT), dtype=float)
        uSS = np.asarray(u_fn.u_SS(SS, TT), dtype=float)
        mode = "analytic"
    else:
        hS_loc = np.minimum.reduce([
            np.diff(S, prepend=2 * S[0] - S[1]),
            np.diff(S, append=2 * S[-1] - S[-2]),
        ])
        ht = t[1] - t[0]
        ut = np.empty_like(u)
        uS = np.empty_like(u)
        uSS = np.empty_like(u)
        for i, Si in enumerate(S):
            for j, tj in enumerate(t):
                d1, d2 = _fd_1d(lambda x: u_fn.u(x, tj), Si, hS_loc[i],
                                sup.S_min, sup.S_max, second=True)
                uS[i, j], uSS[i, j] = d1, d2
                dt1, _ = _fd_1d(lambda x: u_fn.u(Si, x), tj, ht,
                                sup.t_min, sup.t_max, second=False)
                ut[i, j] = dt1
        mode = "fd"

    res = rapm_operator(p, u, ut, uS, uSS, SS)
    if p.mu > 0.0:
        bound = (3.0 / (4.0 * p.mu)) ** 3
        violations = int(np.count_nonzero(SS * uSS >= bound))
    else:
        violations = 0
    return ResidualReport(S=S, t=t, u=u, residual=res,
                          parabolicity_violations=violations,
                          derivative_mode=mode)


# ---------------------------------------------------------------------------
# finite-difference solver
# ---------------------------------------------------------------------------

_SCHEMES = {"explicit": 0.0, "implicit": 1.0, "cn": 0.5, "crank-nicolson": 0.5}


def _implicitness(scheme) -> float:
    if isinstance(scheme, str):
        try:
            return _SCHEMES[scheme.lower()]
        except KeyError:
            raise ValidationError(f"unknown scheme {scheme!r}") from None
    w = float(scheme)
    if not 0.0 <= w <= 1.0:
        raise ValidationError(f"scheme weight must lie in [0, 1], got {w}")
    return w


def _check_parabolicity(p: ModelParams, S, curv, t: float) -> None:
    if p.mu <= 0.0:
        return
    bound = (3.0 / (4.0 * p.mu)) ** 3
    bad = np.flatnonzero(curv >= bound)
    if bad.size:
        i = bad[np.argmax(curv[bad])]
        raise ParabolicityLost(
            f"parabolicity lost at S={S[i]:.6g}, t={t:.6g}: "
            f"S*u_SS={curv[i]:.6g} >= {bound:.6g}",
            S=float(S[i]), t=float(t), value=float(curv[i]),
        )


def fd_solve(
    p: ModelParams,
    terminal: Callable[[np.ndarray], np.ndarray],
    boundary: tuple[Callable[[float], float], Callable[[float], float]],
    g: GridSpec,
    scheme="cn",
    picard: tuple[int, float] = (30, 1e-10),
    rannacher_steps: int = 0,
) -> SurfaceFn:
    """March the pricing PDE backward from t_max to t_min on grid ``g``.

    ``terminal`` gives u(S, t_max); ``boundary`` the Dirichlet values at
    (S_min, t) and (S_max, t).  The nonlinear factor is frozen from the
    previous Picard iterate each time level and iterated to tolerance;
    the strict parabolicity condition is checked on every level
    (terminal data included) and the solver halts rather than marching
    through an ill-posed regime.

    ``scheme`` is "explicit", "implicit", "cn" or an implicitness
    weight in [0, 1].  ``rannacher_steps`` optionally replaces that many
    initial steps with fully implicit ones (useful for kinked payoffs).
    Returns a bilinear-interpolating surface over the grid.
    """
    w = _implicitness(scheme)
    max_iters, tol = int(picard[0]), float(picard[1])
    if max_iters < 1 or tol <= 0.0:
        raise ValidationError("picard settings must be (iters >= 1, tol > 0)")

    S = g.S_nodes()
    t = g.t_nodes()
    n = len(S)
    dt = t[1] - t[0]
    b_lo, b_hi = boundary

    u_term = np.asarray(terminal(S), dtype=float)
    scale = 1.0 + float(np.max(np.abs(u_term)))
    for Sb, bfun in ((S[0], b_lo), (S[-1], b_hi)):
        diff = abs(float(bfun(t[-1])) - float(terminal(np.array([Sb]))[0]))
        if diff > 1e-8 * scale:
            raise ValidationError(
                f"terminal/boundary mismatch at corner S={Sb}: |diff|={diff:.3g}"
            )

    # interior first/second derivative stencils (three-point)
    if g.spacing == "log":
        x = np.log(S)
        h = x[1] - x[0]

        def derivs(u):
            ux = np.empty_like(u)
            uxx = np.empty_like(u)
            ux[1:-1] = (u[2:] - u[:-2]) / (2 * h)
            uxx[1:-1] = (u[2:] - 2 * u[1:-1] + u[:-2]) / (h * h)
            ux[0] = (u[1] - u[0]) / h
            ux[-1] = (u[-1] - u[-2]) / h
            uxx[0] = uxx[1]
            uxx[-1] = uxx[-2]
            return ux / S, (uxx - ux) / S ** 2
    else:
        h = S[1] - S[0]

        def derivs(u):
            uS = np.empty_like(u)
            uSS = np.empty_like(u)
            uS[1:-1] = (u[2:] - u[:-2]) / (2 * h)
            uSS[1:-1] = (u[2:] - 2 * u[1:-1] + u[:-2]) / (h * h)
            uS[0] = (u[1] - u[0]) / h
            uS[-1] = (u[-1] - u[-2]) / h
            uSS[0] = uSS[1]
            uSS[-1] = uSS[-2]
            return uS, uSS

    def tridiag_rows(phi):
        """Coefficients of L(u)_i = a u_{i-1} + b u_i + c u_{i+1} (interior)."""
        Si = S[1:-1]
        ph = phi[1:-1]
        if g.spacing == "log":
            diff = 0.5 * p.sigma ** 2 * ph / (h * h)
            adv = (p.r - 0.5 * p.sigma ** 2 * ph) / (2 * h)
            a = diff - adv
            b = -2.0 * diff - p.r
            c = diff + adv
        else:
            diff = 0.5 * p.sigma ** 2 * Si ** 2 * ph / (h * h)
            adv = p.r * Si / (2 * h)
            a = diff - adv
            b = -2.0 * diff - p.r
            c = diff + adv
        return a, b, c

    def apply_L(u, phi):
        a, b, c = tridiag_rows(phi)
        out = np.zeros_like(u)
        out[1:-1] = a * u[:-2] + b * u[1:-1] + c * u[2:]
        return out

    def phi_of(u):
        _, uSS = derivs(u)
        return 1.0 - p.mu * signed_cbrt(S * uSS), S * uSS

    grid_u = np.empty((n, len(t)))
    grid_u[:, -1] = u_term

    phi_term, curv = phi_of(u_term)
    _check_parabolicity(p, S, curv, float(t[-1]))

    picard_counts = []
    u_next = u_term
    for j in range(len(t) - 2, -1, -1):
        t_cur = float(t[j])
        w_step = 1.0 if (len(t) - 2 - j) < rannacher_steps else w
        phi_next, _ = phi_of(u_next)
        rhs = u_next + dt * (1.0 - w_step) * apply_L(u_next, phi_next)
        rhs[0] = float(b_lo(t_cur))
        rhs[-1] = float(b_hi(t_cur))

        if w_step == 0.0:
            u_cur = rhs.copy()
            iters = 0
        else:
            u_cur = u_next.copy()
            u_cur[0], u_cur[-1] = rhs[0], rhs[-1]
            iters = None
            for k in range(max_iters):
                phi_cur, _ = phi_of(u_cur)
                a, b, c = tridiag_rows(phi_cur)
                # banded layout for solve_banded: rows (upper, diag, lower)
                ab = np.zeros((3, n))
                ab[1, 0] = 1.0
                ab[1, -1] = 1.0
                ab[1, 1:-1] = 1.0 - dt * w_step * b
                ab[0, 2:] = -dt * w_step * c
                ab[2, :-2] = -dt * w_step * a
                u_new = solve_banded((1, 1), ab, rhs)
                delta = float(np.max(np.abs(u_new - u_cur)))
                u_cur = u_new
                if delta <= tol * (1.0 + float(np.max(np.abs(u_cur)))):
                    iters = k + 1
                    break
            if iters is None:
                raise PicardStalled(
                    f"Picard iteration stalled at t={t_cur:.6g} "
                    f"({max_iters} iterations, last update {delta:.3g})"
                )
        _, curv = phi_of(u_cur)
        _check_parabolicity(p, S, curv, t_cur)
        picard_counts.append(iters)
        grid_u[:, j] = u_cur
        u_next = u_cur

    interp = RegularGridInterpolator((S, t), grid_u, method="linear",
                                     bounds_error=False, fill_value=None)

    def eval_u(Sq, tq):
        Sq = np.asarray(Sq, dtype=float)
        tq = np.asarray(tq, dtype=float)
        pts = np.stack(np.broadcast_arrays(Sq, tq), axis=-1)
        out = interp(pts)
        return out if out.shape else float(out)

    return SurfaceFn(
        u=eval_u,
        support=g.rect(),
        meta={
            "S": S,
            "t": t,
            "values": grid_u,
            "scheme_weight": w,
            "picard_iterations": picard_counts,
        },
    )


# ---------------------------------------------------------------------------
# classical closed form (mu = 0 oracle) and convergence measurement
# ---------------------------------------------------------------------------

def bs_closed_form(sigma: float, r: float, E: float, T_minus_t: float, S,
                   kind: str = "call"):
    """Black-Scholes European option value (the mu = 0 oracle).

    Vectorized in S.  ``kind`` is "call" or "put" (put via parity).
    """
    if sigma <= 0.0 or E <= 0.0 or T_minus_t <= 0.0:
        raise ValidationError("sigma, E and T_minus_t must be positive")
    S = np.asarray(S, dtype=float)
    if np.any(S <= 0.0):
        raise ValidationError("S must be positive")
    vol = sigma * math.sqrt(T_minus_t)
    d1 = (np.log(S / E) + (r + 0.5 * sigma ** 2) * T_minus_t) / vol
    d2 = d1 - vol
    call = S * ndtr(d1) - E * math.exp(-r * T_minus_t) * ndtr(d2)
    if kind == "call":
        out = call
    elif kind == "put":
        out = call - S + E * math.exp(-r * T_minus_t)
    else:
        raise ValidationError(f"unknown option kind {kind!r}")
    return out if out.shape else float(out)


@dataclass(frozen=True)
class ConvergenceReport:
    errors: tuple
    ratios: tuple
    order: float
    exact: bool


def convergence_order(errors: Sequence[float],
                      rounding_floor: float = 1e-12) -> ConvergenceReport:
    """Observed order from errors on nested grids (h, h/2, h/4, ...).

    order = mean of log2(e_k / e_{k+1}).  When all errors sit at rounding
    level the order is reported as exact (order = inf).  Raises when
    refinement fails to reduce the error.
    """
    e = [float(x) for x in errors]
    if len(e) < 2:
        raise ValidationError("need at least two errors")
    if all(x <= rounding_floor for x in e):
        return ConvergenceReport(errors=tuple(e), ratios=(), order=math.inf, exact=True)
    for a, b in zip(e, e[1:]):
        if b >= a:
            raise NumericalError(f"non-monotone errors under refinement: {e}")
    ratios = tuple(a / b for a, b in zip(e, e[1:]))
    order = float(np.mean([math.log2(r) for r in ratios]))
    return ConvergenceReport(errors=tuple(e), ratios=ratios, order=order, exact=False)
