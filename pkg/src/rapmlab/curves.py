"""Sampled parametric curves and the shared quadrature machinery.

Several solution families are delivered as curves (theta, z(theta),
w(theta)) that reconstruct a price profile w(z).  This module owns:

* the curve container with monotone-z segment splitting and piecewise
  cubic interpolation (Hermite when dw/dz is known along the curve),
* the log-derivative curve integrator  z = z0 exp(int 1/D), w = int th/D
  shared by the scaling-type reductions (with denominator-singularity
  location and truncation),
* the nested double primitive  F'' = f  carried as an ODE system, used
  by the curvature-quadrature families,
* nonuniform finite-difference derivatives along curves, used by the
  residual oracles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import quad, solve_ivp
from scipy.interpolate import CubicHermiteSpline, PchipInterpolator
from scipy.optimize import brentq

from .errors import DenominatorSingularity, SupportError, ValidationError
from .quartic import RapmQuartic, RootBranch, distinct_real_roots, track_root

__all__ = [
    "ParametricCurve",
    "build_scaling_curve",
    "branch_evaluator",
    "double_primitive",
    "fd_first_second",
]

#: default quadrature tolerances (absolute, relative) per interval
QUAD_ATOL = 1e-12
QUAD_RTOL = 1e-10

#: relative margin kept between a curve end and a located singularity
SINGULARITY_MARGIN = 1e-6


@dataclass
class ParametricCurve:
    """Sampled curve (theta, z, w); theta strictly monotone, z positive.

    ``wz`` optionally carries dw/dz along the curve, enabling Hermite
    interpolation of w(z) that is exact at the nodes and fourth-order
    accurate between them.
    """

    theta: np.ndarray
    z: np.ndarray
    w: np.ndarray
    wz: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        self.z = np.asarray(self.z, dtype=float)
        self.w = np.asarray(self.w, dtype=float)
        if self.wz is not None:
            self.wz = np.asarray(self.wz, dtype=float)
        n = len(self.theta)
        if n < 2 or len(self.z) != n or len(self.w) != n:
            raise ValidationError("curve arrays must be equal length >= 2")
        d = np.diff(self.theta)
        if not (np.all(d > 0) or np.all(d < 0)):
            raise ValidationError("theta samples must be strictly monotone")
        if np.any(self.z <= 0.0):
            raise ValidationError("curve z values must be strictly positive")

    # -- segments -------------------------------------------------------
    def monotone_segments(self) -> list[slice]:
        """Maximal index ranges on which z is strictly monotone."""
        dz = np.diff(self.z)
        if np.any(dz == 0.0):
            raise ValidationError("degenerate curve: repeated z values")
        signs = np.sign(dz)
        breaks = np.flatnonzero(signs[1:] != signs[:-1]) + 1
        starts = [0, *breaks.tolist()]
        stops = [*(breaks + 1).tolist(), len(self.z)]
        return [slice(a, b) for a, b in zip(starts, stops) if b - a >= 2]

    def _segment_for(self, z_val: float, segment: int | None) -> slice:
        segs = self.monotone_segments()
        if segment is not None:
            if not 0 <= segment < len(segs):
                raise ValidationError(f"segment {segment} out of range (curve has {len(segs)})")
            return segs[segment]
        hits = [s for s in segs
                if min(self.z[s][0], self.z[s][-1]) <= z_val <= max(self.z[s][0], self.z[s][-1])]
        if not hits:
            raise SupportError(f"z={z_val:.6g} outside curve support")
        if len(hits) > 1:
            raise ValidationError(
                f"z={z_val:.6g} is covered by {len(hits)} monotone segments; pass segment="
            )
        return hits[0]

    def _interp(self, s: slice, values: np.ndarray, derivs: np.ndarray | None):
        z = self.z[s]
        v = values[s]
        if z[0] > z[-1]:
            z, v = z[::-1], v[::-1]
            derivs = None if derivs is None else derivs[s][::-1]
        else:
            derivs = None if derivs is None else derivs[s]
        if derivs is not None:
            return CubicHermiteSpline(z, v, derivs)
        return PchipInterpolator(z, v)

    def w_of_z(self, z_val, segment: int | None = None):
        """w at the given z (scalar or array within one monotone segment)."""
        arr = np.asarray(z_val, dtype=float)
        probe = float(arr.flat[0])
        s = self._segment_for(probe, segment)
        lo = min(self.z[s][0], self.z[s][-1])
        hi = max(self.z[s][0], self.z[s][-1])
        if np.any(arr < lo - 1e-12 * hi) or np.any(arr > hi + 1e-12 * hi):
            raise SupportError("z outside curve support")
        out = self._interp(s, self.w, self.wz)(arr)
        return out if out.shape else float(out)

    def theta_of_z(self, z_val, segment: int | None = None):
        """Parameter value theta at the given z (same segment rules)."""
        arr = np.asarray(z_val, dtype=float)
        probe = float(arr.flat[0])
        s = self._segment_for(probe, segment)
        lo = min(self.z[s][0], self.z[s][-1])
        hi = max(self.z[s][0], self.z[s][-1])
        if np.any(arr < lo - 1e-12 * hi) or np.any(arr > hi + 1e-12 * hi):
            raise SupportError("z outside curve support")
        out = self._interp(s, self.theta, None)(arr)
        return out if out.shape else float(out)

    def z_range(self, segment: int | None = None) -> tuple[float, float]:
        if segment is None:
            return float(np.min(self.z)), float(np.max(self.z))
        s = self.monotone_segments()[segment]
        zs = self.z[s]
        return float(min(zs[0], zs[-1])), float(max(zs[0], zs[-1]))

    # -- serialization ----------------------------------------------------
    def to_dict(self) -> dict:
        d = {"theta": self.theta.tolist(), "z": self.z.tolist(), "w": self.w.tolist()}
        if self.wz is not None:
            d["wz"] = self.wz.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ParametricCurve":
        return cls(
            theta=np.asarray(d["theta"], dtype=float),
            z=np.asarray(d["z"], dtype=float),
            w=np.asarray(d["w"], dtype=float),
            wz=None if d.get("wz") is None else np.asarray(d["wz"], dtype=float),
        )

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("theta,z,w\n")
            for th, z, w in zip(self.theta, self.z, self.w):
                fh.write(f"{th:.17g},{z:.17g},{w:.17g}\n")


def branch_evaluator(
    family: Callable[[float], RapmQuartic], branch: RootBranch
) -> Callable[[float], float]:
    """Continuous root evaluator: branch interpolation plus Newton polish."""

    def k_of(s: float) -> float:
        q = family(float(s))
        x = float(branch(s))
        for _ in range(4):
            fp = q.deriv(x)
            if fp == 0.0:
                break
            step = q(x) / fp
            x -= step
            if abs(step) <= 1e-15 * max(1.0, abs(x)):
                break
        return x

    return k_of


def _locate_denominator_zero(D: Callable[[float], float], a: float, b: float) -> float:
    return float(brentq(D, a, b, xtol=1e-13, rtol=8.9e-16))


def build_scaling_curve(
    family: Callable[[float], RapmQuartic],
    zeta: float,
    theta_range: tuple[float, float],
    z0: float,
    branch: int,
    n_samples: int = 401,
) -> ParametricCurve:
    """Curve z = z0 exp(int dth/D), w = int th dth/D with D = k^3 - th - zeta.

    ``branch`` indexes the sorted distinct real roots at the range start
    (the anchor).  When D crosses zero inside the range the curve is
    truncated just before the singularity (margin 1e-6 relative) and its
    location is recorded in ``meta["truncated_at"]``; a root branch that
    dies inside the range raises BranchTerminated.
    """
    th0, th1 = float(theta_range[0]), float(theta_range[1])
    if not th1 > th0:
        raise ValidationError(f"empty theta range [{th0}, {th1}]")
    if z0 <= 0.0:
        raise ValidationError(f"anchor z0 must be positive, got {z0}")
    roots = distinct_real_roots(family(th0))
    if not 0 <= branch < len(roots):
        raise ValidationError(
            f"no real root for branch index {branch} at theta={th0} "
            f"({len(roots)} branch(es) available)"
        )

    def build(lo: float, hi: float):
        rb = track_root(family, (lo, hi), roots[branch], n_samples=n_samples,
                        branch_id=branch)
        k_of = branch_evaluator(family, rb)
        return rb, k_of

    rb, k_of = build(th0, th1)

    def D(th: float) -> float:
        return k_of(th) ** 3 - th - zeta

    d_vals = np.array([D(th) for th in rb.s])
    truncated_at = None
    if d_vals[0] == 0.0:
        raise DenominatorSingularity(
            f"denominator singularity at the anchor theta={th0}", where=th0
        )
    crossings = np.flatnonzero(np.sign(d_vals[1:]) != np.sign(d_vals[0]))
    if crossings.size:
        i = int(crossings[0]) + 1
        theta_star = _locate_denominator_zero(D, float(rb.s[i - 1]), float(rb.s[i]))
        truncated_at = theta_star
        new_hi = theta_star - SINGULARITY_MARGIN * max(1.0, abs(theta_star))
        if new_hi <= th0:
            raise DenominatorSingularity(
                f"denominator singularity at theta={theta_star:.9g} leaves no usable range",
                where=theta_star,
            )
        rb, k_of = build(th0, new_hi)

    thetas = rb.s
    ln_z = np.zeros_like(thetas)
    w = np.zeros_like(thetas)
    for i in range(1, len(thetas)):
        a, b = thetas[i - 1], thetas[i]
        inc_lnz, _ = quad(lambda th: 1.0 / D(th), a, b,
                          epsabs=QUAD_ATOL, epsrel=QUAD_RTOL, limit=200)
        inc_w, _ = quad(lambda th: th / D(th), a, b,
                        epsabs=QUAD_ATOL, epsrel=QUAD_RTOL, limit=200)
        ln_z[i] = ln_z[i - 1] + inc_lnz
        w[i] = w[i - 1] + inc_w
    z = z0 * np.exp(ln_z)

    curve = ParametricCurve(
        theta=thetas, z=z, w=w, wz=thetas / z,
        meta={
            "zeta": zeta,
            "branch": branch,
            "truncated_at": truncated_at,
            "root": rb.root.copy(),
        },
    )
    curve.meta["w_error_estimate"] = _interp_error_estimate(curve, D)
    return curve


def _interp_error_estimate(curve: ParametricCurve, D: Callable[[float], float]) -> float:
    """Empirical w(z) interpolation error, probed at interval midpoints."""
    n = len(curve.theta)
    idx = np.unique(np.linspace(0, n - 2, min(9, n - 1)).astype(int))
    spline = curve._interp(slice(0, n), curve.w, curve.wz)
    worst = 0.0
    for i in idx:
        a, b = curve.theta[i], curve.theta[i + 1]
        mid = 0.5 * (a + b)
        w_mid = curve.w[i] + quad(lambda th: th / D(th), a, mid,
                                  epsabs=QUAD_ATOL, epsrel=QUAD_RTOL, limit=200)[0]
        lnz_mid = quad(lambda th: 1.0 / D(th), a, mid,
                       epsabs=QUAD_ATOL, epsrel=QUAD_RTOL, limit=200)[0]
        z_mid = curve.z[i] * math.exp(lnz_mid)
        worst = max(worst, abs(float(spline(z_mid)) - w_mid))
    return 4.0 * worst + 1e-14


@dataclass(frozen=True)
class DoublePrimitive:
    """F with F'' = f on [z_lo, z_hi], F(z_lo) = F'(z_lo) = 0."""

    z_lo: float
    z_hi: float
    _sol: object

    def F(self, z):
        return self._eval(z, 1)

    def G(self, z):  # first primitive F'
        return self._eval(z, 0)

    def _eval(self, z, row: int):
        arr = np.asarray(z, dtype=float)
        if np.any(arr < self.z_lo - 1e-12 * abs(self.z_lo)) or \
           np.any(arr > self.z_hi + 1e-12 * abs(self.z_hi)):
            raise SupportError("z outside quadrature range")
        flat = np.clip(arr, self.z_lo, self.z_hi).ravel()
        out = self._sol.sol(flat)[row].reshape(arr.shape)
        return out if np.ndim(z) else float(out)


def double_primitive(
    f: Callable[[float], float],
    z_range: tuple[float, float],
    rtol: float = 1e-9,
    atol: float = 1e-10,
) -> DoublePrimitive:
    """Solve (G, F)' = (f, G) from the start of ``z_range`` as an ODE.

    Carrying the inner integral as state keeps the nested integral cost
    linear in the number of evaluation points.
    """
    z_lo, z_hi = float(z_range[0]), float(z_range[1])
    if not z_hi > z_lo:
        raise ValidationError(f"empty quadrature range [{z_lo}, {z_hi}]")

    def rhs(z, y):
        return [f(float(z)), y[0]]

    sol = solve_ivp(rhs, (z_lo, z_hi), [0.0, 0.0], method="DOP853",
                    rtol=rtol, atol=atol, dense_output=True)
    if not sol.success:
        raise ValidationError(f"double primitive integration failed: {sol.message}")
    return DoublePrimitive(z_lo=z_lo, z_hi=z_hi, _sol=sol)


def fornberg_weights(x_nodes: np.ndarray, x0: float, max_order: int) -> np.ndarray:
    """Finite-difference weights on arbitrary nodes (Fornberg's recursion).

    Returns an array W of shape (max_order + 1, len(x_nodes)) such that
    the m-th derivative at x0 is W[m] @ f(x_nodes).
    """
    x = np.asarray(x_nodes, dtype=float)
    n = len(x)
    W = np.zeros((max_order + 1, n))
    c1, c4 = 1.0, x[0] - x0
    W[0, 0] = 1.0
    for i in range(1, n):
        mn = min(i, max_order)
        c2, c5, c4 = 1.0, c4, x[i] - x0
        for j in range(i):
            c3 = x[i] - x[j]
            c2 *= c3
            for m in range(mn, 0, -1):
                W[m, i] = c1 * (m * W[m - 1, i - 1] - c5 * W[m, i - 1]) / c2
            W[0, i] = -c1 * c5 * W[0, i - 1] / c2
            for m in range(mn, 0, -1):
                W[m, j] = ((x[i] - x0) * W[m, j] - m * W[m - 1, j]) / c3
            W[0, j] = (x[i] - x0) * W[0, j] / c3
        c1 = c2
    return W


def fd_first_second(x: np.ndarray, y: np.ndarray,
                    stencil: int = 5) -> tuple[np.ndarray, np.ndarray, slice]:
    """Nonuniform first/second derivatives at interior nodes.

    Uses centered ``stencil``-point Fornberg weights (default 5, giving
    fourth/third-order accuracy on smooth meshes).  Returns
    (dy, d2y, interior) where the arrays cover x[interior].
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if stencil % 2 != 1 or stencil < 3:
        raise ValidationError("stencil must be odd and >= 3")
    if len(x) < stencil:
        raise ValidationError(f"need at least {stencil} samples for derivatives")
    half = stencil // 2
    n_out = len(x) - 2 * half
    dy = np.empty(n_out)
    d2y = np.empty(n_out)
    for i in range(n_out):
        sl = slice(i, i + stencil)
        W = fornberg_weights(x[sl], x[i + half], 2)
        dy[i] = W[1] @ y[sl]
        d2y[i] = W[2] @ y[sl]
    return dy, d2y, slice(half, -half)
