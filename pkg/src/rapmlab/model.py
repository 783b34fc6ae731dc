"""Model constants and well-posedness checks for the RAPM pricing PDE.

The nonlinear Black-Scholes variant priced here is

    u_t + (sigma^2/2) S^2 u_SS (1 - mu (S u_SS)^(1/3)) - r u + r S u_S = 0,

with mu = 3 (C^2 R / (2 pi))^(1/3) built from the round-trip transaction
cost C and the risk premium coefficient R.  Units: time in years, rates
annualized, C per unit dollar of transaction.

This module owns the constants, the optimal revision lag, the switching
time t* and the admissibility / parabolicity checks.  Everything is
immutable after construction and safe to share between workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import ValidationError

__all__ = [
    "ModelParams",
    "Admissibility",
    "derive_mu",
    "optimal_time_lag",
    "switching_time",
    "admissible",
    "parabolicity_margin",
]

_TWO_PI = 2.0 * math.pi


def derive_mu(C: float, R: float) -> float:
    """Nonlinearity strength mu = 3 (C^2 R / (2 pi))^(1/3).

    C >= 0 is the round-trip cost per unit dollar, R > 0 the risk
    premium coefficient.  mu = 0 exactly when C = 0.
    """
    if R <= 0.0:
        raise ValidationError(f"risk premium coefficient must be positive, got R={R}")
    if C < 0.0:
        raise ValidationError(f"transaction cost must be nonnegative, got C={C}")
    return 3.0 * (C * C * R / _TWO_PI) ** (1.0 / 3.0)


@dataclass(frozen=True)
class ModelParams:
    """Market and model constants with the derived nonlinearity mu.

    mu is stored denormalized (computed at construction) so it can never
    drift away from C and R.  Passing mu explicitly is allowed only as a
    consistency check: a value disagreeing with the derived one by more
    than 1e-12 relative is rejected.
    """

    sigma: float
    r: float
    C: float
    R: float
    mu: float = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.sigma <= 0.0:
            raise ValidationError(f"sigma must be positive, got {self.sigma}")
        if self.r < 0.0:
            raise ValidationError(f"rate must be nonnegative, got {self.r}")
        mu = derive_mu(self.C, self.R)
        if self.mu is not None:
            scale = max(abs(mu), 1e-300)
            if abs(self.mu - mu) > 1e-12 * scale:
                raise ValidationError(
                    f"supplied mu={self.mu} disagrees with derived value {mu}"
                )
        object.__setattr__(self, "mu", mu)

    def to_dict(self) -> dict:
        """JSON-ready form; mu is recomputed on load, not stored."""
        return {"sigma": self.sigma, "r": self.r, "C": self.C, "R": self.R}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        unknown = set(d) - {"sigma", "r", "C", "R"}
        if unknown:
            raise ValidationError(f"unknown model keys: {sorted(unknown)}")
        missing = {"sigma", "r", "C", "R"} - set(d)
        if missing:
            raise ValidationError(f"missing model keys: {sorted(missing)}")
        return cls(sigma=float(d["sigma"]), r=float(d["r"]),
                   C=float(d["C"]), R=float(d["R"]))


@dataclass(frozen=True)
class Admissibility:
    """Report of the two admissibility inequalities and the switching time.

    c_over_r_ok   <=>  C/R < sigma^2 T      (strict)
    cr_product_ok <=>  C*R < pi/8           (strict)
    t_star is present only when positive.
    """

    c_over_r_ok: bool
    cr_product_ok: bool
    t_star: float | None = None

    @property
    def ok(self) -> bool:
        return self.c_over_r_ok and self.cr_product_ok

    def to_dict(self) -> dict:
        return {
            "c_over_r_ok": self.c_over_r_ok,
            "cr_product_ok": self.cr_product_ok,
            "t_star": self.t_star,
            "ok": self.ok,
        }


def optimal_time_lag(p: ModelParams, S: float, gamma: float) -> float:
    """Revision interval minimizing the total risk premium.

    dt_opt = C^(2/3) / (sigma^2 (R sqrt(2 pi) |S gamma|)^(2/3)),
    gamma being the price convexity u_SS at the evaluation point.
    gamma = 0 means no rehedging pressure and an undefined (infinite)
    lag; C = 0 gives lag 0.  Both are rejected.
    """
    if S <= 0.0:
        raise ValidationError(f"S must be positive, got {S}")
    if gamma == 0.0:
        raise ValidationError("gamma=0: no-rehedge regime, optimal lag undefined")
    if p.C <= 0.0:
        raise ValidationError("C must be positive for a finite optimal lag")
    return p.C ** (2.0 / 3.0) / (
        p.sigma ** 2 * (p.R * math.sqrt(_TWO_PI) * abs(S * gamma)) ** (2.0 / 3.0)
    )


def switching_time(p: ModelParams, T: float) -> float:
    """Last-revision time t* = T - C / (R sigma^2).

    Valid for European call/put payoffs; signals an error when the
    formula gives a nonpositive t*.
    """
    if T <= 0.0:
        raise ValidationError(f"maturity must be positive, got {T}")
    t_star = T - p.C / (p.R * p.sigma ** 2)
    if t_star <= 0.0:
        raise ValidationError(
            f"no valid switching time: T - C/(R sigma^2) = {t_star} <= 0"
        )
    return t_star


def admissible(p: ModelParams, T: float) -> Admissibility:
    """Evaluate both admissibility inequalities (strict) and t*.

    This is a report, not a gate: it never raises on a failing
    inequality.  t_star is included only when it is positive.
    """
    if T <= 0.0:
        raise ValidationError(f"maturity must be positive, got {T}")
    c_over_r_ok = p.C / p.R < p.sigma ** 2 * T
    cr_product_ok = p.C * p.R < math.pi / 8.0
    t_star = T - p.C / (p.R * p.sigma ** 2)
    return Admissibility(
        c_over_r_ok=c_over_r_ok,
        cr_product_ok=cr_product_ok,
        t_star=t_star if t_star > 0.0 else None,
    )


def parabolicity_margin(mu: float, S: float, gamma: float) -> float:
    """(3/(4 mu))^3 - S*gamma; the PDE is well-posed at (S, gamma) iff > 0.

    The inequality is strict: a zero margin counts as ill-posed.
    mu <= 0 is rejected; for mu = 0 the equation is linear and the
    condition is vacuous (caller handles that case).
    """
    if mu <= 0.0:
        raise ValidationError("parabolicity margin needs mu > 0 (mu=0 is the linear case)")
    if S <= 0.0:
        raise ValidationError(f"S must be positive, got {S}")
    return (3.0 / (4.0 * mu)) ** 3 - S * gamma
