"""Zero-forcing beamforming, power allocation, and sum-rate evaluation.

Channel rows are the users' 1 x M channel vectors, so a scheduled subset of k
users gives a k x M matrix ``H_sub``.  The zero-forcing precoder is the
right pseudo-inverse ``W = H_sub^H (H_sub H_sub^H)^-1``, which nulls all
inter-user interference (``H_sub W = I``).  Noise power is 1 everywhere, so
rates are ``log2(1 + SINR)`` in bps/Hz and the per-user consumed power is
``|w_i|^2 P_i``.

Two power policies over a total budget ``P``:

* ``equal``: every scheduled user consumes the same share, ``|w_i|^2 P_i = P/k``.
* ``waterfill``: maximize ``sum log2(1 + P_i)`` subject to
  ``sum |w_i|^2 P_i <= P``, solved by bisection on the water level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .channel import ChannelSet

__all__ = [
    "BeamformingMatrix",
    "PowerAllocation",
    "SingularChannelError",
    "zfbf_weights",
    "waterfill",
    "sum_rate",
    "zfbf_capacity",
]

_RANK_TOL = 1e-10
_WATERFILL_ITERS = 200


class SingularChannelError(RuntimeError):
    """A user subset whose channel matrix cannot be zero-forced."""

    def __init__(self, subset: Sequence[int], detail: str = "rank-deficient channel matrix"):
        self.subset = tuple(subset)
        super().__init__(f"subset {self.subset}: {detail}")


@dataclass(frozen=True)
class BeamformingMatrix:
    """M x k precoder; column i serves user ``subset[i]``."""

    weights: np.ndarray
    subset: tuple[int, ...]

    @property
    def norms_squared(self) -> np.ndarray:
        """Per-beam consumed power per unit allocated power, ``|w_i|^2``."""
        return np.sum(np.abs(self.weights) ** 2, axis=0)


@dataclass(frozen=True)
class PowerAllocation:
    """Per-user transmit powers against a total consumed-power budget."""

    per_user: np.ndarray
    budget: float

    def __post_init__(self) -> None:
        p = np.asarray(self.per_user, dtype=float)
        if np.any(p < 0):
            raise ValueError("powers must be non-negative")
        if self.budget <= 0:
            raise ValueError("budget must be positive")
        object.__setattr__(self, "per_user", p)


def zfbf_weights(H_sub: np.ndarray, subset: Sequence[int] | None = None) -> BeamformingMatrix:
    """Zero-forcing precoder for the k x M channel matrix ``H_sub``.

    Raises :class:`SingularChannelError` when ``H_sub`` is not full row rank
    (including k > M), naming the offending subset.
    """
    H_sub = np.atleast_2d(np.asarray(H_sub, dtype=complex))
    k, M = H_sub.shape
    if subset is None:
        subset = tuple(range(k))
    subset = tuple(int(i) for i in subset)
    if k > M:
        raise SingularChannelError(subset, f"cannot zero-force {k} users with {M} antennas")
    svals = np.linalg.svd(H_sub, compute_uv=False)
    if svals[-1] <= _RANK_TOL * svals[0]:
        raise SingularChannelError(subset)
    gram = H_sub @ H_sub.conj().T
    weights = np.linalg.solve(gram, H_sub).conj().T
    return BeamformingMatrix(weights=weights, subset=subset)


def waterfill(effective_budget: float, norms_squared: Sequence[float]) -> PowerAllocation:
    """Maximize ``sum log2(1 + P_i)`` s.t. ``sum c_i P_i <= budget``, ``P_i >= 0``.

    With consumed power ``Q_i = c_i P_i`` the optimum is the classic water
    level: ``Q_i = max(0, mu - c_i)``.  ``mu`` is found by bisection, which
    pins the budget to machine precision in 200 halvings.
    """
    c = np.asarray(norms_squared, dtype=float)
    if effective_budget <= 0:
        raise ValueError("effective_budget must be positive")
    if c.ndim != 1 or c.size == 0 or np.any(c <= 0):
        raise ValueError("norms_squared must be a non-empty sequence of positive reals")
    lo = float(np.min(c))
    hi = lo + effective_budget
    for _ in range(_WATERFILL_ITERS):
        mid = 0.5 * (lo + hi)
        if np.sum(np.maximum(0.0, mid - c)) > effective_budget:
            hi = mid
        else:
            lo = mid
    consumed = np.maximum(0.0, 0.5 * (lo + hi) - c)
    return PowerAllocation(per_user=consumed / c, budget=effective_budget)


def sum_rate(H_sub: np.ndarray, W: np.ndarray, alloc: PowerAllocation) -> float:
    """Sum rate ``sum_i log2(1 + P_i |h_i w_i|^2 / (1 + sum_{j != i} P_j |h_i w_j|^2))``.

    Evaluates the general SINR expression, so it is valid for any precoder;
    with a zero-forcing ``W`` it reduces to ``sum log2(1 + P_i)``.
    """
    H_sub = np.atleast_2d(np.asarray(H_sub, dtype=complex))
    gains = np.abs(H_sub @ W) ** 2
    p = alloc.per_user
    signal = p * np.diag(gains)
    interference = gains @ p - signal
    return float(np.sum(np.log2(1.0 + signal / (1.0 + interference))))


def zfbf_capacity(
    channels: ChannelSet,
    subset: Sequence[int],
    power_mode: str = "equal",
    budget: float | None = None,
    on_singular: str = "zero",
) -> float:
    """Zero-forcing sum rate of a user subset under the chosen power policy.

    ``budget`` defaults to the channel set's total power.  A subset that
    cannot be zero-forced is worth nothing, not fatal: with
    ``on_singular="zero"`` the capacity is 0; ``"raise"`` propagates the
    :class:`SingularChannelError` for callers that need the diagnostic.
    """
    subset = tuple(int(i) for i in subset)
    if len(set(subset)) != len(subset):
        raise ValueError(f"subset indices must be distinct, got {subset}")
    if power_mode not in ("equal", "waterfill"):
        raise ValueError(f"unknown power_mode {power_mode!r}")
    if on_singular not in ("zero", "raise"):
        raise ValueError(f"unknown on_singular {on_singular!r}")
    total = channels.total_power if budget is None else float(budget)
    H_sub = channels.realizations[:, subset].T
    try:
        beam = zfbf_weights(H_sub, subset)
    except SingularChannelError:
        if on_singular == "raise":
            raise
        return 0.0
    norms = beam.norms_squared
    if power_mode == "equal":
        alloc = PowerAllocation(per_user=(total / len(subset)) / norms, budget=total)
    else:
        alloc = waterfill(total, norms)
    return sum_rate(H_sub, beam.weights, alloc)
