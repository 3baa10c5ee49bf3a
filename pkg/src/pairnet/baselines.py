"""Comparison schedulers: subspace k-means, greedy semi-orthogonal selection,
and the brute-force optimum.

All three return a :class:`PairingResult` whose ``sum_rate`` is the
equal-power zero-forcing rate of the selected users, so methods are compared
on identical footing.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .channel import ChannelSet, EigenBasis
from .precoding import zfbf_capacity

__all__ = [
    "PairingResult",
    "METHODS",
    "chordal_distance",
    "kmeans_pair",
    "sus_pair",
    "exhaustive_pair",
]

METHODS = ("kclique", "kmeans", "sus", "exhaustive")

EXHAUSTIVE_SUBSET_LIMIT = 1_000_000
DEFAULT_SUS_ALPHA = 0.3
DEFAULT_KMEANS_ITERS = 50


@dataclass(frozen=True)
class PairingResult:
    """Outcome of one scheduling decision plus resource accounting.

    ``flops`` is an analytic count filled in by the benchmark harness;
    scheduling functions leave it at 0.
    """

    subset: tuple[int, ...]
    sum_rate: float
    method: str
    flops: int = 0
    wall_time: float = 0.0
    flags: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        subset = tuple(int(i) for i in self.subset)
        if len(set(subset)) != len(subset):
            raise ValueError(f"subset has repeated users: {subset}")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.sum_rate < 0:
            raise ValueError("sum_rate must be non-negative")
        object.__setattr__(self, "subset", subset)


def chordal_distance(a: EigenBasis, b: EigenBasis) -> float:
    """Squared Frobenius distance between the users' eigenspace projectors,
    ``||U_a U_a^H - U_b U_b^H||_F^2 = r_a + r_b - 2 ||U_a^H U_b||_F^2``."""
    if a.num_antennas != b.num_antennas:
        raise ValueError("eigenbases live in different antenna spaces")
    cross = a.vectors.conj().T @ b.vectors
    value = a.rank + b.rank - 2.0 * float(np.sum(np.abs(cross) ** 2))
    return max(value, 0.0)


def _chordal_matrix(channels: ChannelSet) -> np.ndarray:
    K = channels.num_users
    D = np.zeros((K, K))
    for i in range(K):
        for j in range(i + 1, K):
            D[i, j] = D[j, i] = chordal_distance(channels.users[i].basis, channels.users[j].basis)
    return D


def _seed_centers(D: np.ndarray, k: int, rng: np.random.Generator) -> list[int]:
    """k-means++-style seeding: the next center is drawn proportionally to
    the distance from the already chosen ones."""
    K = D.shape[0]
    centers = [int(rng.integers(K))]
    while len(centers) < k:
        dist = np.min(D[:, centers], axis=1)
        dist[centers] = 0.0
        total = float(np.sum(dist))
        if total <= 0.0:
            remaining = [i for i in range(K) if i not in centers]
            centers.append(int(rng.choice(remaining)))
        else:
            centers.append(int(rng.choice(K, p=dist / total)))
    return centers


def kmeans_pair(
    channels: ChannelSet,
    k: int,
    max_iters: int = DEFAULT_KMEANS_ITERS,
    seed: int = 0,
) -> PairingResult:
    """Cluster the users' eigenspaces into k groups under chordal distance
    and schedule the cluster medoids.

    Centers are medoids (the member minimizing the summed in-cluster
    distance), since eigenspaces have no meaningful Euclidean mean.  An
    emptied cluster is re-seeded at the point farthest from all centers.
    """
    start = time.perf_counter()
    K = channels.num_users
    if K < k:
        raise ValueError(f"cannot pick {k} users out of {K}")
    rng = np.random.default_rng(seed)
    D = _chordal_matrix(channels)
    centers = _seed_centers(D, k, rng)
    for _ in range(max_iters):
        assign = np.argmin(D[:, centers], axis=1)
        new_centers = []
        for c in range(k):
            members = np.flatnonzero(assign == c)
            if members.size == 0:
                farthest = int(np.argmax(np.min(D[:, centers], axis=1)))
                new_centers.append(farthest)
                continue
            costs = D[np.ix_(members, members)].sum(axis=1)
            new_centers.append(int(members[int(np.argmin(costs))]))
        if new_centers == centers:
            break
        centers = new_centers
    subset = tuple(sorted(centers))
    rate = zfbf_capacity(channels, subset, power_mode="equal")
    return PairingResult(
        subset=subset,
        sum_rate=rate,
        method="kmeans",
        wall_time=time.perf_counter() - start,
    )


def sus_pair(channels: ChannelSet, k: int, alpha: float = DEFAULT_SUS_ALPHA) -> PairingResult:
    """Greedy semi-orthogonal selection.

    The first pick is the strongest channel.  Each round keeps only
    candidates whose correlation with every selected semi-orthogonal basis
    stays below ``alpha`` and picks the one with the largest component
    orthogonal to the span of the selected bases.  Stops at k users or when
    no candidate survives (flagged "incomplete").
    """
    start = time.perf_counter()
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    K = channels.num_users
    if K < k:
        raise ValueError(f"cannot pick {k} users out of {K}")
    H = channels.realizations.T  # rows are user channel vectors
    norms = np.linalg.norm(H, axis=1)
    candidates = list(range(K))
    selected: list[int] = []
    bases: list[np.ndarray] = []

    first = int(np.argmax(norms))
    selected.append(first)
    bases.append(H[first])
    candidates.remove(first)

    while len(selected) < k and candidates:
        g_new = bases[-1]
        g_norm = np.linalg.norm(g_new)
        kept = []
        for i in candidates:
            corr = abs(np.vdot(g_new, H[i])) / (norms[i] * g_norm)
            if corr < alpha:
                kept.append(i)
        candidates = kept
        if not candidates:
            break
        best, best_norm = -1, -1.0
        for i in candidates:
            comp = H[i].copy()
            for g in bases:
                comp -= (np.vdot(g, H[i]) / np.vdot(g, g)) * g
            comp_norm = float(np.linalg.norm(comp))
            if comp_norm > best_norm:
                best, best_norm = i, comp_norm
        selected.append(best)
        proj = H[best].copy()
        for g in bases:
            proj -= (np.vdot(g, H[best]) / np.vdot(g, g)) * g
        bases.append(proj)
        candidates.remove(best)

    subset = tuple(selected)
    flags = () if len(subset) == k else ("incomplete",)
    rate = zfbf_capacity(channels, subset, power_mode="equal")
    return PairingResult(
        subset=subset,
        sum_rate=rate,
        method="sus",
        wall_time=time.perf_counter() - start,
        flags=flags,
    )


def exhaustive_pair(channels: ChannelSet, k: int, power_mode: str = "equal") -> PairingResult:
    """Brute-force optimum over all C(K, k) subsets; ties resolve to the
    lexicographically smallest subset.  Refuses more than
    ``EXHAUSTIVE_SUBSET_LIMIT`` candidates."""
    start = time.perf_counter()
    K = channels.num_users
    if K < k:
        raise ValueError(f"cannot pick {k} users out of {K}")
    count = math.comb(K, k)
    if count > EXHAUSTIVE_SUBSET_LIMIT:
        raise ValueError(
            f"exhaustive search over {count} subsets exceeds the "
            f"{EXHAUSTIVE_SUBSET_LIMIT} guard rail"
        )
    best_subset: tuple[int, ...] | None = None
    best_rate = -1.0
    for subset in itertools.combinations(range(K), k):
        rate = zfbf_capacity(channels, subset, power_mode=power_mode)
        if rate > best_rate:
            best_subset, best_rate = subset, rate
    assert best_subset is not None
    return PairingResult(
        subset=best_subset,
        sum_rate=best_rate,
        method="exhaustive",
        wall_time=time.perf_counter() - start,
    )
