"""Power-law learning-rate schedules and their admissibility check.

The family is alpha_t = c (1 + t)^(-q) with c > 0.  An admissible schedule
must satisfy, simultaneously:

  * integral of alpha diverges            (forces q <= 1)
  * integral of alpha^2 converges         (forces q > 1/2)
  * integral of |alpha'| converges        (automatic: alpha is monotone with
                                           finite initial value)
  * there is p > 0 with alpha_t^2 t^(1/2 + 2p) -> 0
                                          (holds for any p < q - 1/4)

so the family is admissible exactly when q lies in (1/2, 1].  The emitted
witness is p = (2q - 1/2)/4, half the critical value, so the limit condition
holds with strict room.
"""

from __future__ import annotations

import dataclasses

import numpy as np

__all__ = ["Schedule", "ScheduleReport", "validate_schedule"]


@dataclasses.dataclass(frozen=True)
class Schedule:
    """alpha_t = c (1 + t)^(-q)."""

    c: float
    q: float

    def alpha(self, t):
        return self.c * (1.0 + np.asarray(t, dtype=float)) ** (-self.q)

    def alpha_prime(self, t):
        return -self.c * self.q * (1.0 + np.asarray(t, dtype=float)) ** (-self.q - 1.0)

    def alpha_integral(self, t0: float, t1: float) -> float:
        """Closed-form integral of alpha over [t0, t1]."""
        if self.q == 1.0:
            return self.c * float(np.log1p(t1) - np.log1p(t0))
        p = 1.0 - self.q
        return self.c * float(((1.0 + t1) ** p - (1.0 + t0) ** p) / p)

    def alpha_integral_inverse(self, t0: float, budget: float) -> float:
        """Smallest t1 >= t0 with integral of alpha over [t0, t1] equal to budget."""
        if budget <= 0:
            return float(t0)
        if self.q == 1.0:
            return float((1.0 + t0) * np.exp(budget / self.c) - 1.0)
        p = 1.0 - self.q
        base = (1.0 + t0) ** p + budget * p / self.c
        if base <= 0:  # budget unreachable: total remaining mass is finite
            return float("inf")
        return float(base ** (1.0 / p) - 1.0)


@dataclasses.dataclass(frozen=True)
class ScheduleReport:
    """Validation outcome; p_witness is set only for valid schedules."""

    valid: bool
    reason: str | None
    p_witness: float | None
    conditions: dict


def validate_schedule(schedule: Schedule) -> ScheduleReport:
    """Decide admissibility of a power-law schedule.

    Returns a report whose ``conditions`` maps each requirement to a bool and
    whose ``reason`` names the first violated requirement.  Valid exactly when
    c > 0 and 1/2 < q <= 1; then ``p_witness = (2q - 1/2)/4``.
    """
    c, q = float(schedule.c), float(schedule.q)
    conditions = {
        "c_positive": c > 0,
        "alpha_decreasing": q > 0,
        "alpha_integral_diverges": 0 < q <= 1.0,
        "alpha_sq_integral_converges": q > 0.5,
        "abs_alpha_prime_integral_converges": q > 0 and np.isfinite(c),
        "p_witness_exists": q > 0.25,
    }
    reason = None
    if not conditions["c_positive"]:
        reason = f"c must be positive (got c={c})"
    elif not conditions["alpha_decreasing"]:
        reason = f"alpha must be positive and decreasing (requires q > 0, got q={q})"
    elif not conditions["alpha_integral_diverges"]:
        reason = f"integral of alpha converges (requires q <= 1, got q={q})"
    elif not conditions["alpha_sq_integral_converges"]:
        reason = f"integral of alpha^2 diverges (requires q > 1/2, got q={q})"
    valid = reason is None
    p_witness = (2.0 * q - 0.5) / 4.0 if valid else None
    return ScheduleReport(valid=valid, reason=reason, p_witness=p_witness,
                          conditions=conditions)
