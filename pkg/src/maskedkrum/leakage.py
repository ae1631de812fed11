"""Mutual-information leakage bound for one worker's view of one client.

For a Gaussian mask of per-coordinate scale sigma the leakage about a
gradient is at most  sum_k 0.5 * ln(1 + Var_k / sigma^2)  nats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import GradientVector, ValidationError

SIGMA_MIN = 1e-6
GAUSSIAN_CAVEAT = (
    "gaussian-approximation: bound assumes i.i.d. Gaussian masks; "
    "fixed-norm codebook rows match this only as d grows"
)


@dataclass(frozen=True)
class LeakageReport:
    per_client_bound: float
    per_coordinate_terms: tuple
    sigma: float
    variance_source: str = "declared"
    caveat: str = GAUSSIAN_CAVEAT

    @property
    def bits(self) -> float:
        return self.per_client_bound / math.log(2)

    def as_dict(self) -> dict:
        return {
            "per_client_bound_nats": self.per_client_bound,
            "per_client_bound_bits": self.bits,
            "per_coordinate_terms": list(self.per_coordinate_terms),
            "sigma": self.sigma,
            "variance_source": self.variance_source,
            "caveat": self.caveat,
        }


def _check_variances(variances) -> np.ndarray:
    v = np.asarray(variances, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValidationError("need at least one variance")
    if not np.all(np.isfinite(v)):
        raise ValidationError("variances must be finite")
    if np.any(v < 0):
        raise ValidationError("variances must be non-negative")
    return v


def mi_bound(variances, sigma: float, variance_source: str = "declared") -> LeakageReport:
    v = _check_variances(variances)
    if not sigma > 0:
        raise ValidationError(f"sigma must be positive, got {sigma}")
    terms = 0.5 * np.log1p(v / (sigma * sigma))
    return LeakageReport(math.fsum(terms), tuple(float(t) for t in terms), float(sigma), variance_source)


def estimate_variances(samples: Sequence) -> np.ndarray:
    """Unbiased per-coordinate sample variance (divisor m - 1)."""
    if len(samples) < 2:
        raise ValidationError(f"need at least 2 samples, got {len(samples)}")
    rows = [s.values if isinstance(s, GradientVector) else np.asarray(s, dtype=np.float64) for s in samples]
    if len({r.shape for r in rows}) != 1:
        raise ValidationError("samples differ in dimension")
    return np.var(np.stack(rows), axis=0, ddof=1)


@dataclass(frozen=True)
class SigmaCalibration:
    sigma: float
    unconstrained: bool = False  # all variances zero: any sigma meets the budget


def calibrate_sigma(variances, budget_nats: float, rel_tol: float = 1e-9) -> SigmaCalibration:
    """Smallest sigma whose leakage bound stays within ``budget_nats``."""
    v = _check_variances(variances)
    if not (budget_nats > 0 and math.isfinite(budget_nats)):
        raise ValidationError(f"budget must be positive, got {budget_nats}")
    if not np.any(v > 0):
        return SigmaCalibration(SIGMA_MIN, unconstrained=True)

    def bound(s: float) -> float:
        return mi_bound(v, s).per_client_bound

    d = v.size
    vmax = float(v.max())
    # Every coordinate at vmax meets the budget exactly, so this is feasible.
    hi = math.sqrt(vmax / math.expm1(2 * budget_nats / d))
    while bound(hi) > budget_nats:
        hi *= 1 + 1e-12
    if np.all(v == vmax):
        # uniform variances: the closed form is already the answer
        lo = hi
        while True:
            cand = np.nextafter(lo, 0.0)
            if bound(cand) > budget_nats:
                return SigmaCalibration(float(lo))
            lo = cand

    lo = hi / 2
    while bound(lo) <= budget_nats:
        hi, lo = lo, lo / 2
    while (hi - lo) > rel_tol * hi:
        mid = 0.5 * (lo + hi)
        if bound(mid) <= budget_nats:
            hi = mid
        else:
            lo = mid
    return SigmaCalibration(hi)
