"""Real roots and branch tracking for the reduction quartics.

Every symmetry reduction of the pricing PDE funnels into one algebraic
equation of the form

    p^3 (1 - mu_eff p) + d = 0,   i.e.   -mu_eff p^4 + p^3 + d = 0,

where mu_eff and d encode the case-specific constants (d may depend on
the reduction parameter, giving parameter-dependent root branches).

The solver is deliberately eigenvalue-free: the derivative of the
canonical quartic factors as p^2 (3 - 4 mu_eff p), so the real line
splits into at most three monotone pieces with known endpoints and a
bracketed root finder on each piece finds every real root.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import brentq

from .errors import BranchTerminated, ValidationError

__all__ = [
    "RapmQuartic",
    "RootBranch",
    "signed_cbrt",
    "real_roots",
    "distinct_real_roots",
    "track_root",
]

#: roots closer than this are merged and reported with multiplicity
MERGE_TOL = 1e-7


def signed_cbrt(x):
    """Real (odd) cube root: sign(x) * |x|^(1/3).  Works on arrays."""
    return np.cbrt(x)


@dataclass(frozen=True)
class RapmQuartic:
    """The canonical quartic -mu_eff p^4 + p^3 + d."""

    mu_eff: float
    d: float

    def __post_init__(self):
        if not (math.isfinite(self.mu_eff) and math.isfinite(self.d)):
            raise ValidationError(
                f"quartic coefficients must be finite, got mu_eff={self.mu_eff}, d={self.d}"
            )

    def __call__(self, p):
        # Horner form of p^3 - mu_eff p^4 + d
        return ((-self.mu_eff * p + 1.0) * p * p * p) + self.d

    def deriv(self, p):
        return (3.0 - 4.0 * self.mu_eff * p) * p * p

    def root_bound(self) -> float:
        """Radius B such that all real roots lie in [-B, B] (Cauchy bound)."""
        if self.mu_eff == 0.0:
            return 1.0 + abs(self.d) ** (1.0 / 3.0)
        am = abs(self.mu_eff)
        return 1.0 + max(1.0 / am, abs(self.d) / am)


def _polish(q: RapmQuartic, x: float, iters: int = 3) -> float:
    """A few Newton steps; keeps the root at machine precision."""
    for _ in range(iters):
        fp = q.deriv(x)
        if fp == 0.0:
            break
        step = q(x) / fp
        if not math.isfinite(step):
            break
        x -= step
    return x


def real_roots(q: RapmQuartic, merge_tol: float = MERGE_TOL) -> list[tuple[float, int]]:
    """All real roots of the canonical quartic, sorted, with multiplicity.

    The list may be empty: for mu_eff > 0 the polynomial has the single
    maximum 27/(256 mu_eff^3) + d, which is negative for sufficiently
    negative d, so no real root exists there.

    Returns a list of ``(root, multiplicity)`` pairs sorted by root.
    """
    mu, d = q.mu_eff, q.d

    if mu == 0.0:
        # cubic p^3 = -d
        root = float(signed_cbrt(-d))
        return [(root, 3 if d == 0.0 else 1)]

    if d == 0.0:
        # exact factorization p^3 (1 - mu p)
        return sorted([(0.0, 3), (1.0 / mu, 1)])

    crit = 3.0 / (4.0 * mu)  # the only stationary point with sign change of q'
    B = q.root_bound()
    breaks = sorted({-B, 0.0, crit, B})

    roots: list[float] = []
    vals = [q(b) for b in breaks]
    for (a, fa), (b, fb) in zip(zip(breaks, vals), zip(breaks[1:], vals[1:])):
        if fa == 0.0:
            roots.append(a)
        if fa * fb < 0.0:
            roots.append(_polish(q, brentq(q, a, b, xtol=1e-15, rtol=8.9e-16)))
    if vals[-1] == 0.0:
        roots.append(breaks[-1])

    # A double root sits exactly at the stationary point when the extremum
    # value vanishes; bracketing cannot see it because there is no sign change.
    f_crit = q(crit)
    scale = max(1.0, abs(crit) ** 4)
    if abs(f_crit) <= 1e-14 * scale and not any(abs(r - crit) <= merge_tol for r in roots):
        roots.extend([crit, crit])

    roots.sort()
    merged: list[tuple[float, int]] = []
    for r in roots:
        if merged and abs(r - merged[-1][0]) <= merge_tol:
            merged[-1] = (merged[-1][0], merged[-1][1] + 1)
        else:
            merged.append((r, 1))
    return merged


def distinct_real_roots(q: RapmQuartic) -> list[float]:
    """Sorted distinct real roots (multiplicities dropped)."""
    return [r for r, _ in real_roots(q)]


@dataclass(frozen=True)
class RootBranch:
    """A continuously tracked real root over a parameter range."""

    s: np.ndarray
    root: np.ndarray
    branch_id: int

    def __post_init__(self):
        if len(self.s) != len(self.root) or len(self.s) < 1:
            raise ValidationError("branch sample arrays must be nonempty and equal length")

    def __call__(self, s):
        """Root value at parameter s (cubic interpolation of the samples)."""
        if len(self.s) < 4:
            return np.interp(s, self.s, self.root)
        from scipy.interpolate import CubicSpline

        return CubicSpline(self.s, self.root)(s)

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("s,root\n")
            for s, r in zip(self.s, self.root):
                fh.write(f"{s:.17g},{r:.17g}\n")


def _nearest_root(q: RapmQuartic, target: float) -> tuple[float, float]:
    """(nearest distinct real root, distance); (nan, inf) when none exist."""
    roots = distinct_real_roots(q)
    if not roots:
        return math.nan, math.inf
    best = min(roots, key=lambda r: abs(r - target))
    return best, abs(best - target)


def track_root(
    family: Callable[[float], RapmQuartic],
    s_range: tuple[float, float],
    seed_root: float,
    n_samples: int = 201,
    jump_factor: float = 50.0,
    jump_cap: float | None = None,
    branch_id: int = 0,
) -> RootBranch:
    """Follow one real root of ``family(s)`` continuously over ``s_range``.

    The seed must be a root of the quartic at the start of the range.
    Tracking matches the nearest real root at each sample and refuses to
    bridge branch collisions: when the matched root moves further than
    ``jump_factor * |ds| * slope`` (capped by ``jump_cap``) or the real
    root disappears, the step is bisected to locate the failure and
    ``BranchTerminated`` is raised with that parameter value.
    """
    s_lo, s_hi = float(s_range[0]), float(s_range[1])
    if not s_hi > s_lo:
        raise ValidationError(f"empty parameter range [{s_lo}, {s_hi}]")
    if n_samples < 2:
        raise ValidationError("need at least 2 samples")

    q0 = family(s_lo)
    scale0 = max(1.0, abs(seed_root) ** 4)
    if abs(q0(seed_root)) > 1e-8 * scale0:
        raise ValidationError(
            f"seed {seed_root} is not a root at s={s_lo} (residual {q0(seed_root)!r})"
        )
    current = _polish(q0, seed_root)

    grid = np.linspace(s_lo, s_hi, n_samples)
    ds = grid[1] - grid[0]
    if jump_cap is None:
        jump_cap = max(1.0, 10.0 * abs(current))

    s_out = [s_lo]
    r_out = [current]
    slope = 1.0  # refreshed from actual increments as soon as available

    def allowed(step: float) -> float:
        return min(jump_cap, max(jump_factor * step * max(slope, 1e-3), 1e-9))

    def locate_failure(s_ok: float, r_ok: float, s_bad: float) -> float:
        """Bisect to the parameter where the branch stops continuing."""
        lo, hi, r_prev = s_ok, s_bad, r_ok
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if hi - lo <= 1e-13 * max(1.0, abs(hi)):
                break
            root, dist = _nearest_root(family(mid), r_prev)
            if math.isfinite(root) and dist <= allowed(mid - lo):
                lo, r_prev = mid, root
            else:
                hi = mid
        return hi

    for s in grid[1:]:
        root, dist = _nearest_root(family(s), current)
        if not math.isfinite(root) or dist > allowed(ds):
            where = locate_failure(s_out[-1], current, s)
            raise BranchTerminated(
                f"root branch terminated near s={where:.12g} "
                f"(started from seed {seed_root} at s={s_lo})",
                where=where,
            )
        if dist > 0.0:
            slope = max(dist / ds, 1e-3)
        current = root
        s_out.append(float(s))
        r_out.append(current)

    return RootBranch(s=np.asarray(s_out), root=np.asarray(r_out), branch_id=branch_id)
