"""Invariant solution families of the pricing PDE for nonzero rate.

Four families are delivered:

* ``h2``     -- closed form  u = (k^3/r) S ln S - (k^3 - tau) t S + c1 S + c2 e^(rt)
* ``h3``     -- parametric curve in z = S e^(-(r+gamma) t), u = S w(z) + zeta S ln S
* ``h4``     -- curvature quadrature in z = S e^(-rt) (nested integrals of k(z)^3/z)
* ``special``-- closed-form parametric curve in z = S e^(-(r-1) t)

Every family evaluates u(S, t) and exposes a SurfaceFn with analytic
derivatives so the operator residual can be verified independently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import quad

from .curves import (
    ParametricCurve,
    branch_evaluator,
    build_scaling_curve,
    double_primitive,
    fd_first_second,
)
from .errors import SupportError, ValidationError
from .model import ModelParams
from .pde import Rect, SurfaceFn
from .quartic import RapmQuartic, distinct_real_roots, signed_cbrt, track_root

__all__ = [
    "H2Family",
    "H3Family",
    "H4Family",
    "SpecialFamily",
    "h2_build",
    "h2_eval",
    "h3_build",
    "h3_eval",
    "h4_build",
    "h4_eval",
    "special_build",
    "special_eval",
    "special_surface",
    "special_g_closed_form",
    "h3_ode_residual",
    "special_ode_residuals",
    "special_v_consistency",
]

#: default (S, t) box for closed-form families, which are global in S > 0
_OPEN_RECT = Rect(1e-8, 1e12, -50.0, 50.0)


def _check_phi(phi: float) -> float:
    if not 0.0 <= phi <= math.pi:
        raise ValidationError(f"phi must lie in [0, pi], got {phi}")
    if abs(phi - 0.5 * math.pi) < 1e-12:
        raise ValidationError("phi at removable singularity pi/2")
    return math.tan(phi)


def _exp_map_rect(z_lo: float, z_hi: float, lam: float,
                  t_range: tuple[float, float]) -> Rect:
    """Largest S-interval such that z = S e^(lam t) stays in [z_lo, z_hi]."""
    t0, t1 = float(t_range[0]), float(t_range[1])
    e0, e1 = math.exp(-lam * t0), math.exp(-lam * t1)
    S_min = z_lo * max(e0, e1)
    S_max = z_hi * min(e0, e1)
    if not S_max > S_min:
        raise ValidationError(
            f"curve z-range [{z_lo:.6g}, {z_hi:.6g}] supports no S-interval "
            f"across t in [{t0}, {t1}]"
        )
    return Rect(S_min, S_max, t0, t1)


# ---------------------------------------------------------------------------
# H2: two-parameter closed forms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class H2Family:
    """Closed-form family u = (k^3/r) S ln S - (k^3 - tau) t S + c1 S + c2 e^(rt)."""

    p: ModelParams
    phi: float
    tau: float
    k: float
    branch_id: int
    c1: float
    c2: float

    def __post_init__(self):
        if self.p.r == 0.0:
            raise ValidationError("this family needs r != 0 (see the r = 0 variant)")
        mu_eff = self.p.mu / float(signed_cbrt(self.p.r))
        resid = RapmQuartic(mu_eff, 2.0 * self.p.r * self.tau / self.p.sigma ** 2)(self.k)
        if abs(resid) > 1e-10 * max(1.0, abs(self.k) ** 4):
            raise ValidationError(f"stored root violates its quartic: residual {resid:.3g}")

    def u(self, S, t):
        S = np.asarray(S, dtype=float)
        t = np.asarray(t, dtype=float)
        k3, r = self.k ** 3, self.p.r
        return (k3 / r) * S * np.log(S) - (k3 - self.tau) * t * S \
            + self.c1 * S + self.c2 * np.exp(r * t)

    def u_t(self, S, t):
        S = np.asarray(S, dtype=float)
        t = np.asarray(t, dtype=float)
        return -(self.k ** 3 - self.tau) * S + self.c2 * self.p.r * np.exp(self.p.r * t)

    def u_S(self, S, t):
        S = np.asarray(S, dtype=float)
        t = np.asarray(t, dtype=float)
        k3, r = self.k ** 3, self.p.r
        return (k3 / r) * (np.log(S) + 1.0) - (k3 - self.tau) * t + self.c1

    def u_SS(self, S, t):
        S = np.asarray(S, dtype=float)
        return self.k ** 3 / (self.p.r * S) + 0.0 * np.asarray(t, dtype=float)

    def surface(self, rect: Rect = _OPEN_RECT) -> SurfaceFn:
        return SurfaceFn(u=self.u, support=rect, u_t=self.u_t, u_S=self.u_S,
                         u_SS=self.u_SS, meta={"family": "h2"})

    def to_dict(self) -> dict:
        return {"case": "h2", "model": self.p.to_dict(), "phi": self.phi,
                "branch": self.branch_id, "k": self.k,
                "c1": self.c1, "c2": self.c2}

    @classmethod
    def from_dict(cls, d: dict) -> "H2Family":
        p = ModelParams.from_dict(d["model"])
        return h2_build(p, float(d["phi"]), int(d["branch"]),
                        float(d["c1"]), float(d["c2"]))


def h2_build(p: ModelParams, phi: float, branch: int, c1: float, c2: float) -> H2Family:
    """Select the branch-th real root of the reduction quartic and freeze it."""
    if p.r == 0.0:
        raise ValidationError("this family needs r != 0 (see the r = 0 variant)")
    tau = _check_phi(phi)
    mu_eff = p.mu / float(signed_cbrt(p.r))
    q = RapmQuartic(mu_eff, 2.0 * p.r * tau / p.sigma ** 2)
    roots = distinct_real_roots(q)
    if not 0 <= branch < len(roots):
        raise ValidationError(
            f"no real root for this branch index: {branch} (found {len(roots)})"
        )
    return H2Family(p=p, phi=phi, tau=tau, k=roots[branch], branch_id=branch,
                    c1=c1, c2=c2)


def h2_eval(f: H2Family, S, t):
    """Price value of the closed-form family at (S, t)."""
    return f.u(S, t)


# ---------------------------------------------------------------------------
# H3: parametric curve family
# ---------------------------------------------------------------------------

@dataclass
class H3Family:
    """u = S w(z) + zeta S ln S with z = S e^(-(r+gamma) t), w from a curve."""

    p: ModelParams
    a: float
    phi: float
    gamma: float
    zeta: float
    branch_id: int
    curve: ParametricCurve

    def __post_init__(self):
        gamma, zeta = _h3_constants(self.p, self.a, self.phi)
        if abs(gamma - self.gamma) > 1e-12 * max(1.0, abs(gamma)) or \
           abs(zeta - self.zeta) > 1e-12 * max(1.0, abs(zeta)):
            raise ValidationError("stored gamma/zeta disagree with (a, phi, r)")

    @property
    def _lam(self) -> float:
        return -(self.p.r + self.gamma)

    def _z(self, S, t):
        return np.asarray(S, dtype=float) * np.exp(self._lam * np.asarray(t, dtype=float))

    def _k_of_theta(self, theta):
        fam = _h3_quartic_family(self.p, self.gamma, self.zeta)
        th = np.atleast_1d(np.asarray(theta, dtype=float))
        flat = th.ravel()
        root = np.interp(flat, self.curve.theta, self.curve.meta["root"])
        out = np.empty_like(flat)
        for i, (t_i, x0) in enumerate(zip(flat, root)):
            q = fam(float(t_i))
            x = float(x0)
            for _ in range(4):
                fp = q.deriv(x)
                if fp == 0.0:
                    break
                x -= q(x) / fp
            out[i] = x
        out = out.reshape(th.shape)
        return out if np.ndim(theta) else float(out[0])

    def u(self, S, t):
        S = np.asarray(S, dtype=float)
        z = self._z(S, t)
        w = self.curve.w_of_z(z)
        return S * w + self.zeta * S * np.log(S)

    def u_t(self, S, t):
        S = np.asarray(S, dtype=float)
        z = self._z(S, t)
        theta = self.curve.theta_of_z(z)
        return self._lam * S * theta

    def u_S(self, S, t):
        S = np.asarray(S, dtype=float)
        z = self._z(S, t)
        w = self.curve.w_of_z(z)
        theta = self.curve.theta_of_z(z)
        return w + theta + self.zeta * (np.log(S) + 1.0)

    def u_SS(self, S, t):
        S = np.asarray(S, dtype=float)
        z = self._z(S, t)
        theta = self.curve.theta_of_z(z)
        k = self._k_of_theta(theta)
        return np.asarray(k, dtype=float) ** 3 / S

    def surface(self, t_range: tuple[float, float]) -> SurfaceFn:
        z_lo, z_hi = self.curve.z_range()
        rect = _exp_map_rect(z_lo, z_hi, self._lam, t_range)
        return SurfaceFn(u=self.u, support=rect, u_t=self.u_t, u_S=self.u_S,
                         u_SS=self.u_SS, meta={"family": "h3"})

    def to_dict(self) -> dict:
        d = {"case": "h3", "model": self.p.to_dict(), "a": self.a, "phi": self.phi,
             "gamma": self.gamma, "zeta": self.zeta, "branch": self.branch_id,
             "curve": self.curve.to_dict()}
        d["curve"]["root"] = self.curve.meta["root"].tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "H3Family":
        p = ModelParams.from_dict(d["model"])
        curve = ParametricCurve.from_dict(d["curve"])
        curve.meta["root"] = np.asarray(d["curve"]["root"], dtype=float)
        return cls(p=p, a=float(d["a"]), phi=float(d["phi"]), gamma=float(d["gamma"]),
                   zeta=float(d["zeta"]), branch_id=int(d["branch"]), curve=curve)


def _h3_constants(p: ModelParams, a: float, phi: float) -> tuple[float, float]:
    denom_g = 1.0 + a * math.cos(phi)
    if abs(denom_g) < 1e-12:
        raise ValidationError("1 + a cos(phi) = 0: scaling weight gamma is singular")
    denom_z = p.r * denom_g - 1.0
    if abs(denom_z) < 1e-12:
        raise ValidationError("r (1 + a cos(phi)) = 1: log coefficient zeta is singular")
    gamma = 1.0 / denom_g
    zeta = a * math.sin(phi) / denom_z
    return gamma, zeta


def _h3_quartic_family(p: ModelParams, gamma: float, zeta: float) -> Callable[[float], RapmQuartic]:
    s2 = p.sigma ** 2

    def fam(theta: float) -> RapmQuartic:
        return RapmQuartic(p.mu, 2.0 * (p.r * zeta - gamma * theta) / s2)

    return fam


def h3_build(
    p: ModelParams,
    a: float,
    phi: float,
    branch: int,
    theta_range: tuple[float, float],
    z_anchor: tuple[float, float],
    n_samples: int = 401,
) -> H3Family:
    """Track the root branch over theta and integrate the curve.

    ``z_anchor = (theta0, z0)`` fixes the curve scale; theta0 must be
    the start of ``theta_range`` (the quadrature lower limit), and the
    value of w there is 0 by construction.
    """
    if p.r == 0.0:
        raise ValidationError("this family needs r != 0 (see the r = 0 variant)")
    if not 0.0 <= phi <= math.pi:
        raise ValidationError(f"phi must lie in [0, pi], got {phi}")
    theta0, z0 = float(z_anchor[0]), float(z_anchor[1])
    if theta0 != float(theta_range[0]):
        raise ValidationError("anchor theta0 must equal the start of theta_range")
    gamma, zeta = _h3_constants(p, a, phi)
    curve = build_scaling_curve(
        _h3_quartic_family(p, gamma, zeta), zeta, theta_range, z0, branch,
        n_samples=n_samples,
    )
    return H3Family(p=p, a=a, phi=phi, gamma=gamma, zeta=zeta,
                    branch_id=branch, curve=curve)


def h3_eval(f: H3Family, S, t):
    """Evaluate u = S w(z) + zeta S ln S; raises when z leaves the curve."""
    return f.u(S, t)


def h3_ode_residual(f: H3Family) -> np.ndarray:
    """Reduced-ODE residual along the reconstructed w(z), by finite differences.

    Independent of the construction path: uses only the sampled (z, w)
    pairs.  Returns the residual at the interior curve nodes.
    """
    z, w = f.curve.z, f.curve.w
    wz, wzz, interior = fd_first_second(z, w)
    zi = z[interior]
    K = zi * (2.0 * wz + zi * wzz) + f.zeta
    theta_fd = zi * wz
    return (0.5 * f.p.sigma ** 2 * K * (1.0 - f.p.mu * signed_cbrt(K))
            + f.p.r * f.zeta - f.gamma * theta_fd)


# ---------------------------------------------------------------------------
# H4: nested curvature quadrature
# ---------------------------------------------------------------------------

@dataclass
class H4Family:
    """u = e^(rt) F(z) + S (tau t + c1) + e^(rt) (eps t / cos(phi) + c2).

    F is the double primitive of k(z)^3 / z over the quadrature range,
    k(z) the tracked root of the z-dependent reduction quartic.
    """

    p: ModelParams
    phi: float
    eps: int
    branch_id: int
    c1: float
    c2: float
    z_range: tuple[float, float]
    _k_of: Callable[[float], float] = field(repr=False)
    _prim: object = field(repr=False)
    _samples: dict = field(repr=False)

    @property
    def tau(self) -> float:
        return math.tan(self.phi)

    def _z(self, S, t):
        return np.asarray(S, dtype=float) * np.exp(-self.p.r * np.asarray(t, dtype=float))

    def _k(self, z):
        arr = np.atleast_1d(np.asarray(z, dtype=float))
        out = np.array([self._k_of(float(x)) for x in arr.ravel()]).reshape(arr.shape)
        return out if np.ndim(z) else float(out.flat[0])

    def u(self, S, t):
        S = np.asarray(S, dtype=float)
        t = np.asarray(t, dtype=float)
        z = self._z(S, t)
        ert = np.exp(self.p.r * t)
        return (ert * self._prim.F(z) + S * (self.tau * t + self.c1)
                + ert * (self.eps * t / math.cos(self.phi) + self.c2))

    def u_t(self, S, t):
        S = np.asarray(S, dtype=float)
        t = np.asarray(t, dtype=float)
        z = self._z(S, t)
        r = self.p.r
        ert = np.exp(r * t)
        sec = self.eps / math.cos(self.phi)
        return (r * ert * self._prim.F(z) - r * z * ert * self._prim.G(z)
                + self.tau * S + r * ert * (sec * t + self.c2) + ert * sec)

    def u_S(self, S, t):
        t = np.asarray(t, dtype=float)
        z = self._z(S, t)
        return self._prim.G(z) + self.tau * t + self.c1

    def u_SS(self, S, t):
        t = np.asarray(t, dtype=float)
        z = self._z(S, t)
        k = self._k(z)
        return np.exp(-self.p.r * t) * np.asarray(k, dtype=float) ** 3 / z

    def surface(self, t_range: tuple[float, float]) -> SurfaceFn:
        rect = _exp_map_rect(self.z_range[0], self.z_range[1], -self.p.r, t_range)
        return SurfaceFn(u=self.u, support=rect, u_t=self.u_t, u_S=self.u_S,
                         u_SS=self.u_SS, meta={"family": "h4"})

    # -- alternative reconstruction straight from the reduction ODE --------
    def invariant_form_u(self, S, t):
        """u rebuilt from the reduction ODE's w and the invariant map.

        The family's primary formula applies e^(rt) to the double
        curvature integral; this variant instead solves
        z (z w)'' = k^3 - tau/r - eps/(r z cos phi) for w and maps
        u = S w(z) + (tau/r + eps/(r z cos phi)) S ln S.  Both are kept
        so their operator residuals can be compared; see the reports in
        the test suite.
        """
        r, tau = self.p.r, self.tau
        beta = self.eps / (r * math.cos(self.phi))

        def q_rhs(z):
            return (self._k_of(float(z)) ** 3 - tau / r - beta / z) / z

        prim = double_primitive(q_rhs, self.z_range)
        S = np.asarray(S, dtype=float)
        t = np.asarray(t, dtype=float)
        z = self._z(S, t)
        w = prim.F(z) / z
        A = tau / r + beta / z
        return S * w + A * S * np.log(S)

    def to_dict(self) -> dict:
        return {"case": "h4", "model": self.p.to_dict(), "phi": self.phi,
                "eps": self.eps, "branch": self.branch_id, "c1": self.c1,
                "c2": self.c2, "z_range": list(self.z_range),
                "samples": {k: v.tolist() for k, v in self._samples.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "H4Family":
        p = ModelParams.from_dict(d["model"])
        return h4_build(p, float(d["phi"]), int(d["eps"]), int(d["branch"]),
                        float(d["c1"]), float(d["c2"]),
                        tuple(float(x) for x in d["z_range"]))


def _h4_quartic_family(p: ModelParams, tau: float, eps: int, phi: float):
    s2 = p.sigma ** 2
    cos_phi = math.cos(phi)

    def fam(z: float) -> RapmQuartic:
        return RapmQuartic(p.mu, 2.0 * tau / s2 + 2.0 * eps / (z * s2 * cos_phi))

    return fam


def h4_build(
    p: ModelParams,
    phi: float,
    eps: int,
    branch: int,
    c1: float,
    c2: float,
    z_range: tuple[float, float],
    n_samples: int = 801,
) -> H4Family:
    """Track k(z) over the quadrature range and precompute the primitives."""
    if p.r == 0.0:
        raise ValidationError("this family needs r != 0 (see the r = 0 variant)")
    tau = _check_phi(phi)
    if eps not in (-1, 1):
        raise ValidationError(f"eps must be +1 or -1, got {eps}")
    z_lo, z_hi = float(z_range[0]), float(z_range[1])
    if z_lo <= 0.0:
        raise ValidationError("quadrature range must exclude 0 (z > 0)")
    if not z_hi > z_lo:
        raise ValidationError(f"empty quadrature range [{z_lo}, {z_hi}]")

    fam = _h4_quartic_family(p, tau, eps, phi)
    roots = distinct_real_roots(fam(z_lo))
    if not 0 <= branch < len(roots):
        raise ValidationError(
            f"no real root for branch index {branch} at z={z_lo} ({len(roots)} found)"
        )
    rb = track_root(fam, (z_lo, z_hi), roots[branch], n_samples=n_samples,
                    branch_id=branch)
    k_of = branch_evaluator(fam, rb)
    prim = double_primitive(lambda z: k_of(z) ** 3 / z, (z_lo, z_hi))
    samples = {
        "z": rb.s,
        "k": rb.root,
        "G": np.asarray(prim.G(rb.s)),
        "F": np.asarray(prim.F(rb.s)),
    }
    return H4Family(p=p, phi=phi, eps=eps, branch_id=branch, c1=c1, c2=c2,
                    z_range=(z_lo, z_hi), _k_of=k_of, _prim=prim,
                    _samples=samples)


def h4_eval(
    p: ModelParams,
    phi: float,
    eps: int,
    branch: int,
    c1: float,
    c2: float,
    S: float,
    t: float,
    z_quadrature_range: tuple[float, float],
) -> float:
    """One-shot evaluation of the quadrature family at a single (S, t)."""
    z = float(S) * math.exp(-p.r * float(t))
    if not z_quadrature_range[0] <= z <= z_quadrature_range[1]:
        raise SupportError(f"z={z:.6g} outside quadrature range {z_quadrature_range}")
    f = h4_build(p, phi, eps, branch, c1, c2, z_quadrature_range)
    return float(f.u(S, t))


# ---------------------------------------------------------------------------
# special case: closed-form parametric curve
# ---------------------------------------------------------------------------

def special_g_closed_form(sigma: float, mu: float, theta):
    """Explicit weight g with w = z (c2 + g) along the special curve.

    With s = sigma^2/2 and B = 1 + s (1 - mu theta^(1/3)):

      g = -s mu th^(4/3) + (3s-4)/3 th - (4+s)/(2 s mu) th^(2/3)
          - (1+s)(4+s)/(s^2 mu^2) th^(1/3)
          - (1+s)^2 (4+s)/(s^3 mu^3) ln B

    The individual terms are huge for small s*mu and cancel almost
    completely, so this closed form loses precision in floating point;
    the curve builder integrates dg/dtheta instead (identical function
    up to an additive constant absorbed by c2).  Kept as a reference.
    """
    s = 0.5 * sigma ** 2
    x = np.cbrt(np.asarray(theta, dtype=float))
    B = 1.0 + s * (1.0 - mu * x)
    return (-s * mu * x ** 4
            + (3.0 * s - 4.0) / 3.0 * x ** 3
            - (4.0 + s) / (2.0 * s * mu) * x * x
            - (1.0 + s) * (4.0 + s) / (s ** 2 * mu ** 2) * x
            - (1.0 + s) ** 2 * (4.0 + s) / (s ** 3 * mu ** 3) * np.log(B))


def _special_g_deriv(sigma: float, mu: float):
    """dg/dtheta: small, cancellation-free rational in theta^(1/3)."""
    s = 0.5 * sigma ** 2

    def g_theta(theta: float) -> float:
        x = float(np.cbrt(theta))
        return s * s * (3.0 - 7.0 * mu * x + 4.0 * mu * mu * x * x) \
            / (3.0 * (1.0 + s * (1.0 - mu * x)))

    return g_theta


def _special_zv(sigma: float, mu: float, c1: float, theta: np.ndarray):
    """Closed-form z(theta) and v(theta) (numerically benign pieces)."""
    s = 0.5 * sigma ** 2
    x = np.cbrt(theta)
    B = 1.0 + s * (1.0 - mu * x)
    gam = 1.0 / (1.0 + s)
    z = c1 * B ** (-(1.0 + 3.0 * gam)) * theta ** (-s * gam)
    v = -s * z * (theta - mu * theta * x)
    return B, z, v


def special_build(
    p: ModelParams,
    c1: float,
    theta_range: tuple[float, float],
    c2: float | None = None,
    n_samples: int = 801,
) -> ParametricCurve:
    """Closed-form parametric solution curve of the scaling-gauge reduction.

    Requires mu > 0 (the curve is built around the nonlinear term),
    theta > 0 over the range, positivity of the bracket entering the
    logarithm, and sigma^2 != 2.

    The weight g enters only through c2 + g with c2 a free constant
    (adding a multiple of z is a gauge of the reduction), so it is
    evaluated relative to the range midpoint by integrating dg/dtheta,
    which avoids the catastrophic cancellation of the closed form's
    large terms.  c2 is then the value of w/z at the midpoint
    (default 0); the value used is recorded in ``meta["c2"]``.
    """
    if p.mu <= 0.0:
        raise ValidationError("special family needs mu > 0 (C > 0)")
    if abs(p.sigma ** 2 - 2.0) < 1e-12:
        raise ValidationError("gamma singular (sigma^2 = 2)")
    if c1 <= 0.0:
        raise ValidationError("c1 must be positive (z must stay positive)")
    th_lo, th_hi = float(theta_range[0]), float(theta_range[1])
    if not (th_lo > 0.0 and th_hi > th_lo):
        raise ValidationError(f"need 0 < theta_lo < theta_hi, got [{th_lo}, {th_hi}]")

    # geometric sampling: z is a near power law in theta, so this keeps
    # the z-spacing (and with it the reconstruction error) near uniform
    theta = np.exp(np.linspace(math.log(th_lo), math.log(th_hi), int(n_samples)))
    B, z, v = _special_zv(p.sigma, p.mu, c1, theta)
    if np.any(B <= 0.0):
        raise ValidationError("logarithm domain violated: bracket 1 + s(1 - mu theta^(1/3)) <= 0")
    if c2 is None:
        c2 = 0.0

    # g relative to the midpoint, by cumulative quadrature of dg/dtheta
    g_th = _special_g_deriv(p.sigma, p.mu)
    mid = int(n_samples) // 2
    g_rel = np.zeros_like(theta)
    for i in range(mid + 1, len(theta)):
        inc, _ = quad(g_th, theta[i - 1], theta[i], epsabs=1e-14, epsrel=1e-12)
        g_rel[i] = g_rel[i - 1] + inc
    for i in range(mid - 1, -1, -1):
        inc, _ = quad(g_th, theta[i], theta[i + 1], epsabs=1e-14, epsrel=1e-12)
        g_rel[i] = g_rel[i + 1] - inc

    w = z * (c2 + g_rel)
    wz = (v + w) / z
    return ParametricCurve(theta=theta, z=z, w=w, wz=wz,
                           meta={"v": v, "sigma": p.sigma, "mu": p.mu,
                                 "c1": c1, "c2": float(c2)})


def special_eval(curve: ParametricCurve, alpha: float, r: float, S, t,
                 segment: int | None = None):
    """u = (w(z) + alpha e^t) e^((r-1) t) with z = S e^(-(r-1) t).

    The reduction excludes r = 1 (the invariant map degenerates) and
    r = 0 has its own family; both are rejected.
    """
    if r == 1.0:
        raise ValidationError("r equals 1: invariant map degenerates")
    if r == 0.0:
        raise ValidationError("r equals 0: use the r = 0 families")
    S = np.asarray(S, dtype=float)
    t = np.asarray(t, dtype=float)
    z = S * np.exp(-(r - 1.0) * t)
    w = curve.w_of_z(z, segment=segment)
    return (w + alpha * np.exp(t)) * np.exp((r - 1.0) * t)


def special_surface(
    curve: ParametricCurve,
    alpha: float,
    r: float,
    t_range: tuple[float, float],
    segment: int | None = None,
) -> SurfaceFn:
    """SurfaceFn wrapper around ``special_eval`` with analytic derivatives."""
    if r in (0.0, 1.0):
        raise ValidationError("r must differ from 0 and 1")
    if segment is None and len(curve.monotone_segments()) > 1:
        raise ValidationError("curve has several monotone segments; pass segment=")
    seg = segment if segment is not None else 0
    z_lo, z_hi = curve.z_range(segment=seg)
    lam = -(r - 1.0)
    rect = _exp_map_rect(z_lo, z_hi, lam, t_range)

    def z_of(S, t):
        return np.asarray(S, dtype=float) * np.exp(lam * np.asarray(t, dtype=float))

    def u(S, t):
        return special_eval(curve, alpha, r, S, t, segment=seg)

    def u_S(S, t):
        z = z_of(S, t)
        # w_z along the curve: (v + w)/z, interpolated through wz samples
        s_slice = curve.monotone_segments()[seg]
        interp = curve._interp(s_slice, curve.wz, None)
        return interp(z)

    def u_SS(S, t):
        z = z_of(S, t)
        theta = curve.theta_of_z(z, segment=seg)
        return np.exp(lam * np.asarray(t, dtype=float)) * theta / z

    def u_t(S, t):
        S = np.asarray(S, dtype=float)
        t = np.asarray(t, dtype=float)
        z = z_of(S, t)
        w = curve.w_of_z(z, segment=seg)
        wz = u_S(S, t)
        egt = np.exp((r - 1.0) * t)
        return egt * (-(r - 1.0) * z * wz + alpha * np.exp(t)) \
            + (r - 1.0) * egt * (w + alpha * np.exp(t))

    return SurfaceFn(u=u, support=rect, u_t=u_t, u_S=u_S, u_SS=u_SS,
                     meta={"family": "special", "alpha": alpha, "r": r})


@dataclass
class SpecialFamily:
    """Serialization wrapper for the special-case curve and its map."""

    alpha: float
    c1: float
    c2: float
    r: float
    sigma2: float
    curve: ParametricCurve

    def __post_init__(self):
        if self.r in (0.0, 1.0):
            raise ValidationError("r must differ from 0 and 1")
        if abs(self.sigma2 - 2.0) < 1e-12:
            raise ValidationError("gamma singular (sigma^2 = 2)")

    def surface(self, t_range: tuple[float, float], segment: int | None = None) -> SurfaceFn:
        return special_surface(self.curve, self.alpha, self.r, t_range, segment=segment)

    def to_dict(self) -> dict:
        return {"case": "special", "alpha": self.alpha, "c1": self.c1, "c2": self.c2,
                "r": self.r, "sigma2": self.sigma2, "curve": self.curve.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "SpecialFamily":
        return cls(alpha=float(d["alpha"]), c1=float(d["c1"]), c2=float(d["c2"]),
                   r=float(d["r"]), sigma2=float(d["sigma2"]),
                   curve=ParametricCurve.from_dict(d["curve"]))


def special_ode_residuals(curve: ParametricCurve, sigma: float, mu: float
                          ) -> tuple[np.ndarray, np.ndarray]:
    """First- and second-order reduction residuals along the curve.

    Both are finite-difference checks using only the sampled (z, w):

      first order:   v_z - mu v_z^(4/3) + 2 v / (sigma^2 z),  v = z w_z - w
      second order:  -w + z w_z + (sigma^2/2) z^2 w_zz (1 - mu cbrt(z w_zz))

    (v_z = z w_zz along the curve, so one derivative pass suffices.)
    """
    z, w = curve.z, curve.w
    order = np.argsort(z)
    z, w = z[order], w[order]
    wz, wzz, interior = fd_first_second(z, w)
    zi, wi = z[interior], w[interior]
    v = zi * wz - wi
    vz = zi * wzz
    res1 = vz - mu * vz * signed_cbrt(vz) + 2.0 * v / (sigma ** 2 * zi)
    res2 = (-wi + zi * wz
            + 0.5 * sigma ** 2 * zi ** 2 * wzz * (1.0 - mu * signed_cbrt(zi * wzz)))
    return res1, res2


def special_v_consistency(curve: ParametricCurve) -> float:
    """Max relative gap between stored v(theta) and FD-reconstructed z w_z - w."""
    z, w = curve.z, curve.w
    v_stored = curve.meta["v"]
    order = np.argsort(z)
    wz, _, interior = fd_first_second(z[order], w[order])
    v_fd = z[order][interior] * wz - w[order][interior]
    v_ref = v_stored[order][interior]
    return float(np.max(np.abs(v_fd - v_ref) / (1.0 + np.abs(v_ref))))
