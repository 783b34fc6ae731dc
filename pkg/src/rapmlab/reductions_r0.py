"""Invariant solution families for the zero-rate pricing PDE.

Mirrors of the nonzero-rate cases with simpler invariant maps:

* ``h2_0`` -- closed form u = k^3 S (ln S - 1) + tau t S + c1 S + c2
* ``h3_0`` -- parametric curve in z = S e^(delta t), u = S w(z) + zeta S ln S
* ``h4_0`` -- curvature quadrature directly in S

The curve and quadrature engines are shared with the nonzero-rate
module; only the root equations and invariant maps differ.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

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
    "H20Family",
    "H30Family",
    "H40Family",
    "h2_0_build",
    "h2_0_eval",
    "h3_0_build",
    "h3_0_eval",
    "h4_0_build",
    "h4_0_eval",
    "h3_0_ode_residual",
]

_OPEN_RECT = Rect(1e-8, 1e12, -50.0, 50.0)


def _check_phi(phi: float) -> float:
    if not 0.0 <= phi <= math.pi:
        raise ValidationError(f"phi must lie in [0, pi], got {phi}")
    if abs(phi - 0.5 * math.pi) < 1e-12:
        raise ValidationError("phi at removable singularity pi/2")
    return math.tan(phi)


def _require_r0(p: ModelParams) -> None:
    if p.r != 0.0:
        raise ValidationError("r must be zero for this family")


# ---------------------------------------------------------------------------
# H2 (r = 0): closed forms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class H20Family:
    """u = k^3 S (ln S - 1) + tau t S + c1 S + c2 for the zero-rate model."""

    p: ModelParams
    phi: float
    tau: float
    k: float
    branch_id: int
    c1: float
    c2: float

    def __post_init__(self):
        _require_r0(self.p)
        resid = RapmQuartic(self.p.mu, 2.0 * self.tau / self.p.sigma ** 2)(self.k)
        if abs(resid) > 1e-10 * max(1.0, abs(self.k) ** 4):
            raise ValidationError(f"stored root violates its quartic: residual {resid:.3g}")

    def u(self, S, t):
        S = np.asarray(S, dtype=float)
        t = np.asarray(t, dtype=float)
        return self.k ** 3 * S * (np.log(S) - 1.0) + self.tau * t * S \
            + self.c1 * S + self.c2

    def u_t(self, S, t):
        S = np.asarray(S, dtype=float)
        return self.tau * S + 0.0 * np.asarray(t, dtype=float)

    def u_S(self, S, t):
        S = np.asarray(S, dtype=float)
        return self.k ** 3 * np.log(S) + self.tau * np.asarray(t, dtype=float) + self.c1

    def u_SS(self, S, t):
        S = np.asarray(S, dtype=float)
        return self.k ** 3 / S + 0.0 * np.asarray(t, dtype=float)

    def surface(self, rect: Rect = _OPEN_RECT) -> SurfaceFn:
        return SurfaceFn(u=self.u, support=rect, u_t=self.u_t, u_S=self.u_S,
                         u_SS=self.u_SS, meta={"family": "h2_0"})

    def to_dict(self) -> dict:
        return {"case": "h2_0", "model": self.p.to_dict(), "phi": self.phi,
                "branch": self.branch_id, "k": self.k, "c1": self.c1, "c2": self.c2}

    @classmethod
    def from_dict(cls, d: dict) -> "H20Family":
        p = ModelParams.from_dict(d["model"])
        return h2_0_build(p, float(d["phi"]), int(d["branch"]),
                          float(d["c1"]), float(d["c2"]))


def h2_0_build(p: ModelParams, phi: float, branch: int, c1: float, c2: float) -> H20Family:
    _require_r0(p)
    tau = _check_phi(phi)
    q = RapmQuartic(p.mu, 2.0 * tau / p.sigma ** 2)
    roots = distinct_real_roots(q)
    if not 0 <= branch < len(roots):
        raise ValidationError(f"no real root for branch {branch} ({len(roots)} found)")
    return H20Family(p=p, phi=phi, tau=tau, k=roots[branch], branch_id=branch,
                     c1=c1, c2=c2)


def h2_0_eval(f: H20Family, S, t):
    return f.u(S, t)


# ---------------------------------------------------------------------------
# H3 (r = 0): parametric curves
# ---------------------------------------------------------------------------

@dataclass
class H30Family:
    """u = S w(z) + zeta S ln S with z = S e^(delta t), zero-rate model."""

    p: ModelParams
    a: float
    phi: float
    delta: float
    zeta: float
    branch_id: int
    curve: ParametricCurve

    def __post_init__(self):
        _require_r0(self.p)
        delta, zeta = _h3_0_constants(self.a, self.phi)
        if abs(delta - self.delta) > 1e-12 * max(1.0, abs(delta)) or \
           abs(zeta - self.zeta) > 1e-12 * max(1.0, abs(zeta)):
            raise ValidationError("stored delta/zeta disagree with (a, phi)")

    def _z(self, S, t):
        return np.asarray(S, dtype=float) * np.exp(self.delta * np.asarray(t, dtype=float))

    def u(self, S, t):
        S = np.asarray(S, dtype=float)
        z = self._z(S, t)
        return S * self.curve.w_of_z(z) + self.zeta * S * np.log(S)

    def u_t(self, S, t):
        S = np.asarray(S, dtype=float)
        z = self._z(S, t)
        return self.delta * S * self.curve.theta_of_z(z)

    def u_S(self, S, t):
        S = np.asarray(S, dtype=float)
        z = self._z(S, t)
        return self.curve.w_of_z(z) + self.curve.theta_of_z(z) \
            + self.zeta * (np.log(S) + 1.0)

    def u_SS(self, S, t):
        S = np.asarray(S, dtype=float)
        z = self._z(S, t)
        theta = np.atleast_1d(np.asarray(self.curve.theta_of_z(z), dtype=float))
        flat = theta.ravel()
        fam = _h3_0_quartic_family(self.p, self.delta)
        root = np.interp(flat, self.curve.theta, self.curve.meta["root"])
        k = np.empty_like(flat)
        for i, (th_i, x0) in enumerate(zip(flat, root)):
            q = fam(float(th_i))
            x = float(x0)
            for _ in range(4):
                fp = q.deriv(x)
                if fp == 0.0:
                    break
                x -= q(x) / fp
            k[i] = x
        k = k.reshape(theta.shape)
        if not np.ndim(z):
            return float(k[0]) ** 3 / float(S)
        return k.reshape(np.shape(z)) ** 3 / S

    def surface(self, t_range: tuple[float, float]) -> SurfaceFn:
        from .reductions_rnz import _exp_map_rect

        z_lo, z_hi = self.curve.z_range()
        rect = _exp_map_rect(z_lo, z_hi, self.delta, t_range)
        return SurfaceFn(u=self.u, support=rect, u_t=self.u_t, u_S=self.u_S,
                         u_SS=self.u_SS, meta={"family": "h3_0"})

    def to_dict(self) -> dict:
        d = {"case": "h3_0", "model": self.p.to_dict(), "a": self.a, "phi": self.phi,
             "delta": self.delta, "zeta": self.zeta, "branch": self.branch_id,
             "curve": self.curve.to_dict()}
        d["curve"]["root"] = self.curve.meta["root"].tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "H30Family":
        p = ModelParams.from_dict(d["model"])
        curve = ParametricCurve.from_dict(d["curve"])
        curve.meta["root"] = np.asarray(d["curve"]["root"], dtype=float)
        return cls(p=p, a=float(d["a"]), phi=float(d["phi"]), delta=float(d["delta"]),
                   zeta=float(d["zeta"]), branch_id=int(d["branch"]), curve=curve)


def _h3_0_constants(a: float, phi: float) -> tuple[float, float]:
    if a == 0.0:
        raise ValidationError("a must be nonzero for this family")
    cos_phi = math.cos(phi)
    if abs(cos_phi) < 1e-12:
        raise ValidationError("phi at removable singularity pi/2")
    return 1.0 / (a * cos_phi), a * math.sin(phi)


def _h3_0_quartic_family(p: ModelParams, delta: float) -> Callable[[float], RapmQuartic]:
    s2 = p.sigma ** 2

    def fam(theta: float) -> RapmQuartic:
        return RapmQuartic(p.mu, 2.0 * delta * theta / s2)

    return fam


def h3_0_build(
    p: ModelParams,
    a: float,
    phi: float,
    branch: int,
    v_range: tuple[float, float],
    anchor: tuple[float, float],
    n_samples: int = 401,
) -> H30Family:
    """Same curve machinery as the r != 0 case, zero-rate root equation."""
    _require_r0(p)
    if not 0.0 <= phi <= math.pi:
        raise ValidationError(f"phi must lie in [0, pi], got {phi}")
    delta, zeta = _h3_0_constants(a, phi)
    theta0, z0 = float(anchor[0]), float(anchor[1])
    if theta0 != float(v_range[0]):
        raise ValidationError("anchor parameter must equal the start of the range")
    curve = build_scaling_curve(
        _h3_0_quartic_family(p, delta), zeta, v_range, z0, branch,
        n_samples=n_samples,
    )
    return H30Family(p=p, a=a, phi=phi, delta=delta, zeta=zeta,
                     branch_id=branch, curve=curve)


def h3_0_eval(f: H30Family, S, t):
    return f.u(S, t)


def h3_0_ode_residual(f: H30Family) -> np.ndarray:
    """Finite-difference residual of the reduced ODE along the curve."""
    z, w = f.curve.z, f.curve.w
    wz, wzz, interior = fd_first_second(z, w)
    zi = z[interior]
    K = zi * (2.0 * wz + zi * wzz) + f.zeta
    return (0.5 * f.p.sigma ** 2 * K * (1.0 - f.p.mu * signed_cbrt(K))
            + f.delta * zi * wz)


# ---------------------------------------------------------------------------
# H4 (r = 0): curvature quadrature directly in S
# ---------------------------------------------------------------------------

@dataclass
class H40Family:
    """u = F(S) + tau t S + eps t / cos(phi) + c1 S + c2, F'' = k(S)^3 / S.

    Built from the invariant w = u - tau t S - eps t / cos(phi); the
    value of w is recovered by double quadrature of the tracked root.
    A variant with a time-independent eps/cos(phi) offset is also
    evaluatable for comparison (``printed_variant_u``); its operator
    residual is the constant -eps/cos(phi), which is why the invariant
    construction is the primary one.
    """

    p: ModelParams
    phi: float
    eps: int
    branch_id: int
    c1: float
    c2: float
    S_range: tuple[float, float]
    _k_of: Callable[[float], float] = field(repr=False)
    _prim: object = field(repr=False)
    _samples: dict = field(repr=False)

    @property
    def tau(self) -> float:
        return math.tan(self.phi)

    def _k(self, S):
        arr = np.atleast_1d(np.asarray(S, dtype=float))
        out = np.array([self._k_of(float(x)) for x in arr.ravel()]).reshape(arr.shape)
        return out if np.ndim(S) else float(out.flat[0])

    def u(self, S, t):
        S = np.asarray(S, dtype=float)
        t = np.asarray(t, dtype=float)
        sec = self.eps / math.cos(self.phi)
        return (self._prim.F(S) + self.tau * t * S + sec * t
                + self.c1 * S + self.c2)

    def printed_variant_u(self, S, t):
        """Variant with a constant (not t-proportional) eps/cos(phi) term."""
        S = np.asarray(S, dtype=float)
        t = np.asarray(t, dtype=float)
        sec = self.eps / math.cos(self.phi)
        return (self._prim.F(S) + self.tau * t * S + sec
                + self.c1 * S + self.c2)

    def u_t(self, S, t):
        S = np.asarray(S, dtype=float)
        sec = self.eps / math.cos(self.phi)
        return self.tau * S + sec + 0.0 * np.asarray(t, dtype=float)

    def u_S(self, S, t):
        S = np.asarray(S, dtype=float)
        return self._prim.G(S) + self.tau * np.asarray(t, dtype=float) + self.c1

    def u_SS(self, S, t):
        S = np.asarray(S, dtype=float)
        k = self._k(S)
        return np.asarray(k, dtype=float) ** 3 / S + 0.0 * np.asarray(t, dtype=float)

    def surface(self, t_range: tuple[float, float] = (-50.0, 50.0)) -> SurfaceFn:
        rect = Rect(self.S_range[0], self.S_range[1], t_range[0], t_range[1])
        return SurfaceFn(u=self.u, support=rect, u_t=self.u_t, u_S=self.u_S,
                         u_SS=self.u_SS, meta={"family": "h4_0"})

    def to_dict(self) -> dict:
        return {"case": "h4_0", "model": self.p.to_dict(), "phi": self.phi,
                "eps": self.eps, "branch": self.branch_id, "c1": self.c1,
                "c2": self.c2, "S_range": list(self.S_range),
                "samples": {k: v.tolist() for k, v in self._samples.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "H40Family":
        p = ModelParams.from_dict(d["model"])
        return h4_0_build(p, float(d["phi"]), int(d["eps"]), int(d["branch"]),
                          float(d["c1"]), float(d["c2"]),
                          tuple(float(x) for x in d["S_range"]))


def _h4_0_quartic_family(p: ModelParams, tau: float, eps: int, phi: float):
    s2 = p.sigma ** 2
    cos_phi = math.cos(phi)

    def fam(S: float) -> RapmQuartic:
        return RapmQuartic(p.mu, 2.0 * tau / s2 + 2.0 * eps / (S * s2 * cos_phi))

    return fam


def h4_0_build(
    p: ModelParams,
    phi: float,
    eps: int,
    branch: int,
    c1: float,
    c2: float,
    S_range: tuple[float, float],
    n_samples: int = 801,
) -> H40Family:
    _require_r0(p)
    tau = _check_phi(phi)
    if eps not in (-1, 1):
        raise ValidationError(f"eps must be +1 or -1, got {eps}")
    S_lo, S_hi = float(S_range[0]), float(S_range[1])
    if S_lo <= 0.0:
        raise ValidationError("quadrature range must exclude 0 (S > 0)")
    if not S_hi > S_lo:
        raise ValidationError(f"empty quadrature range [{S_lo}, {S_hi}]")
    fam = _h4_0_quartic_family(p, tau, eps, phi)
    roots = distinct_real_roots(fam(S_lo))
    if not 0 <= branch < len(roots):
        raise ValidationError(
            f"no real root for branch index {branch} at S={S_lo} ({len(roots)} found)"
        )
    rb = track_root(fam, (S_lo, S_hi), roots[branch], n_samples=n_samples,
                    branch_id=branch)
    k_of = branch_evaluator(fam, rb)
    prim = double_primitive(lambda S: k_of(S) ** 3 / S, (S_lo, S_hi))
    samples = {"S": rb.s, "k": rb.root,
               "G": np.asarray(prim.G(rb.s)), "F": np.asarray(prim.F(rb.s))}
    return H40Family(p=p, phi=phi, eps=eps, branch_id=branch, c1=c1, c2=c2,
                     S_range=(S_lo, S_hi), _k_of=k_of, _prim=prim, _samples=samples)


def h4_0_eval(
    p: ModelParams,
    phi: float,
    eps: int,
    branch: int,
    c1: float,
    c2: float,
    S: float,
    t: float,
    S_quadrature_range: tuple[float, float],
) -> float:
    """One-shot evaluation of the zero-rate quadrature family."""
    if not S_quadrature_range[0] <= float(S) <= S_quadrature_range[1]:
        raise SupportError(f"S={S} outside quadrature range {S_quadrature_range}")
    f = h4_0_build(p, phi, eps, branch, c1, c2, S_quadrature_range)
    return float(f.u(S, t))
