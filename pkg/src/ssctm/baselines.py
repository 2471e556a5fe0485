"""Classical feedback ramp metering: ALINEA and METALINE recurrences."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

ALINEA = "alinea"
METALINE = "metaline"


@dataclass(frozen=True)
class BaselineSpec:
    """Gains of a feedback metering law.

    ALINEA uses ``K_R`` (one gain per ramp, veh/hr per veh/km).  METALINE uses
    ``K_P`` and ``K_I``, both (K-1) x K.  ``n_crit`` holds the set-point
    densities of all K cells.  ``update_period_s = None`` means every
    simulation step.
    """

    variant: str
    n_crit: np.ndarray
    K_R: np.ndarray | None = None
    K_P: np.ndarray | None = None
    K_I: np.ndarray | None = None
    update_period_s: float | None = None

    def __post_init__(self):
        nc = np.asarray(self.n_crit, dtype=float)
        object.__setattr__(self, "n_crit", nc)
        K = len(nc)
        if not np.all(np.isfinite(nc)):
            raise ValidationError("baseline.n_crit", "must be finite")
        if self.variant == ALINEA:
            if self.K_R is None:
                raise ValidationError("baseline.K_R", "ALINEA needs one gain per ramp")
            kr = np.broadcast_to(np.asarray(self.K_R, dtype=float), (K - 1,)).copy()
            if not np.all(np.isfinite(kr)):
                raise ValidationError("baseline.K_R", "gains must be finite")
            object.__setattr__(self, "K_R", kr)
        elif self.variant == METALINE:
            for name in ("K_P", "K_I"):
                g = getattr(self, name)
                if g is None:
                    raise ValidationError(f"baseline.{name}", "METALINE needs both gain matrices")
                g = np.asarray(g, dtype=float)
                if g.shape != (K - 1, K):
                    raise ValidationError(f"baseline.{name}", f"expected shape {(K - 1, K)}, got {g.shape}")
                if not np.all(np.isfinite(g)):
                    raise ValidationError(f"baseline.{name}", "gains must be finite")
                object.__setattr__(self, name, g)
        else:
            raise ValidationError("baseline.variant", f"unknown variant {self.variant!r}")
        if self.update_period_s is not None and not self.update_period_s > 0:
            raise ValidationError("baseline.update_period_s", "must be positive")

    @property
    def K(self) -> int:
        return len(self.n_crit)

    @classmethod
    def alinea(cls, n_crit, K_R=40.0, update_period_s=None) -> "BaselineSpec":
        return cls(ALINEA, n_crit, K_R=K_R, update_period_s=update_period_s)

    @classmethod
    def metaline(cls, n_crit, K_P, K_I, update_period_s=None) -> "BaselineSpec":
        return cls(METALINE, n_crit, K_P=K_P, K_I=K_I, update_period_s=update_period_s)

    def gain_matrices(self) -> tuple[np.ndarray, np.ndarray]:
        """(K_P, K_I) with ALINEA written as a diagonal integral law."""
        K = self.K
        if self.variant == METALINE:
            return self.K_P, self.K_I
        kp = np.zeros((K - 1, K))
        ki = np.zeros((K - 1, K))
        ki[np.arange(K - 1), np.arange(1, K)] = self.K_R
        return kp, ki

    def update_steps(self, dt_hr: float) -> int:
        if self.update_period_s is None:
            return 1
        return max(1, int(round(self.update_period_s / 3600.0 / dt_hr)))


def baseline_control_step(spec: BaselineSpec, mu_prev, n_t, n_prev, U=None) -> np.ndarray:
    """One update of the metering rates of ramps 1..K-1.

    ``U`` (length K, or K-1 for the ramps only) caps the result; without it
    only the lower clamp at 0 applies.
    """
    mu_prev = np.asarray(mu_prev, dtype=float)
    n_t = np.asarray(n_t, dtype=float)
    n_prev = np.asarray(n_prev, dtype=float)
    if spec.variant == ALINEA:
        mu = mu_prev - spec.K_R * (n_t[1:] - spec.n_crit[1:])
    else:
        mu = mu_prev - spec.K_P @ (n_t - n_prev) - spec.K_I @ (n_t - spec.n_crit)
    hi = np.inf
    if U is not None:
        U = np.asarray(U, dtype=float)
        hi = U[1:] if len(U) == spec.K else U
    return np.clip(mu, 0.0, hi)
