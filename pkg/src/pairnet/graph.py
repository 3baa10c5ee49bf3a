"""Weighted user graph for scheduling: pairwise-rate edge weights.

Users are nodes.  The weight of edge (i, j) is the zero-forcing sum rate the
two users achieve when scheduled together under a reduced power budget
``P * delta``, where ``delta = (k - 1) / C(k, 2) = 2 / k`` conserves the
total base-station power once every user ends up in ``k - 1`` pairs of a
scheduled k-group.  Heavy edges therefore mark strong, mutually compatible
users, and the total edge weight of a k-clique divided by ``k - 1`` scores
the group's equal-power zero-forcing capacity.

The graph keeps the complete set of raw weights (so any subset can be scored
after the fact) plus a surviving-edge mask: sparsification drops edges whose
max-normalized weight is at or below ``beta * mean(normalized weights)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .channel import ChannelSet
from .precoding import SingularChannelError, zfbf_capacity

__all__ = [
    "PairPowerScale",
    "UserGraph",
    "pair_power_scale",
    "sum_rate_distance",
    "build_wcg",
    "sparsify",
    "clique_capacity",
    "save_edge_list",
    "load_edge_list",
]

DEFAULT_FEATURE_DIM = 16


@dataclass(frozen=True)
class PairPowerScale:
    """Per-pair power budget fraction for a target group size ``k``."""

    delta: float
    k: int


def pair_power_scale(k: int) -> PairPowerScale:
    """Power fraction ``(k - 1) / C(k, 2)`` (= 2/k) so that summing the
    per-pair budgets of a k-clique recovers ``(k - 1) P``."""
    if k < 2:
        raise ValueError(f"group size must be >= 2, got {k}")
    return PairPowerScale(delta=(k - 1) / math.comb(k, 2), k=k)


def _pair_rate(channels: ChannelSet, i: int, j: int, k: int) -> tuple[float, bool]:
    """Pairwise zero-forcing rate and a schedulability flag."""
    delta = pair_power_scale(k).delta
    try:
        rate = zfbf_capacity(
            channels,
            (i, j),
            power_mode="equal",
            budget=channels.total_power * delta,
            on_singular="raise",
        )
    except SingularChannelError:
        return 0.0, False
    return rate, True


def sum_rate_distance(channels: ChannelSet, i: int, j: int, k: int) -> float:
    """Edge weight between users ``i`` and ``j`` for target group size ``k``.

    The pair is zero-forced on its own 2 x M channel matrix and each user
    consumes ``P * delta / 2``; collinear pairs, which cannot be co-scheduled,
    weigh 0.  Symmetric in (i, j).
    """
    if i == j:
        raise ValueError("sum_rate_distance needs two distinct users")
    rate, _ = _pair_rate(channels, i, j, k)
    return rate


@dataclass
class UserGraph:
    """Complete weighted graph over users plus a surviving-edge mask.

    ``raw`` holds pairwise rates in bps/Hz for every pair (kept even for
    edges removed by sparsification, so subsets can always be scored);
    ``norm`` is ``raw`` divided by its maximum, ``mean_weight`` the mean
    normalized weight over all pairs.  ``beta`` records the applied
    sparsification coefficient (None while the graph is still complete).
    Instances are treated as immutable after construction.
    """

    k_target: int
    raw: np.ndarray
    norm: np.ndarray
    mean_weight: float
    edge_mask: np.ndarray
    node_features: np.ndarray
    beta: float | None = None
    unschedulable: frozenset = frozenset()

    @property
    def num_nodes(self) -> int:
        return self.raw.shape[0]

    @property
    def edges(self) -> tuple[tuple[int, int], ...]:
        """Surviving edges as (i, j) pairs with i < j, lexicographic."""
        iu, ju = np.triu_indices(self.num_nodes, k=1)
        keep = self.edge_mask[iu, ju]
        return tuple((int(a), int(b)) for a, b in zip(iu[keep], ju[keep]))

    @property
    def aggregation_matrix(self) -> np.ndarray:
        """Normalized weights restricted to surviving edges (zero diagonal)."""
        return np.where(self.edge_mask, self.norm, 0.0)

    def has_edge(self, i: int, j: int) -> bool:
        return i != j and bool(self.edge_mask[i, j])

    def neighbors(self, v: int) -> np.ndarray:
        return np.flatnonzero(self.edge_mask[v])

    @classmethod
    def from_weights(
        cls,
        raw: np.ndarray,
        k_target: int,
        feature_dim: int = DEFAULT_FEATURE_DIM,
    ) -> "UserGraph":
        """Complete graph from an arbitrary symmetric non-negative weight matrix."""
        raw = np.asarray(raw, dtype=float).copy()
        if raw.ndim != 2 or raw.shape[0] != raw.shape[1]:
            raise ValueError("weight matrix must be square")
        if np.max(np.abs(raw - raw.T)) > 0:
            raise ValueError("weight matrix must be symmetric")
        if np.any(raw < 0):
            raise ValueError("weights must be non-negative")
        np.fill_diagonal(raw, 0.0)
        K = raw.shape[0]
        peak = float(np.max(raw))
        norm = raw / peak if peak > 0 else np.zeros_like(raw)
        iu, ju = np.triu_indices(K, k=1)
        mean_weight = float(np.mean(norm[iu, ju])) if iu.size else 0.0
        mask = ~np.eye(K, dtype=bool)
        return cls(
            k_target=k_target,
            raw=raw,
            norm=norm,
            mean_weight=mean_weight,
            edge_mask=mask,
            node_features=np.ones((K, feature_dim)),
        )


def build_wcg(channels: ChannelSet, k: int, feature_dim: int = DEFAULT_FEATURE_DIM) -> UserGraph:
    """Complete user graph: every pairwise rate computed, weights normalized
    to a maximum of 1, node features initialized to all ones."""
    K = channels.num_users
    if K < 2:
        raise ValueError("need at least 2 users")
    if k < 2:
        raise ValueError("target group size must be >= 2")
    raw = np.zeros((K, K))
    bad_pairs = set()
    for i in range(K):
        for j in range(i + 1, K):
            rate, ok = _pair_rate(channels, i, j, k)
            raw[i, j] = raw[j, i] = rate
            if not ok:
                bad_pairs.add((i, j))
    graph = UserGraph.from_weights(raw, k_target=k, feature_dim=feature_dim)
    graph.unschedulable = frozenset(bad_pairs)
    return graph


def sparsify(g: UserGraph, beta_sparsify: float) -> UserGraph:
    """Keep only edges with normalized weight strictly above
    ``beta_sparsify * mean_weight``; raw weights of removed edges are
    retained for subset scoring."""
    if beta_sparsify < 0:
        raise ValueError("beta_sparsify must be >= 0")
    if g.mean_weight > 0 and beta_sparsify >= 1.0 / g.mean_weight:
        raise ValueError(
            f"beta_sparsify must be < 1/mean_weight = {1.0 / g.mean_weight:.6g}, got {beta_sparsify}"
        )
    mask = g.norm > beta_sparsify * g.mean_weight
    np.fill_diagonal(mask, False)
    return UserGraph(
        k_target=g.k_target,
        raw=g.raw,
        norm=g.norm,
        mean_weight=g.mean_weight,
        edge_mask=mask,
        node_features=np.ones_like(g.node_features),
        beta=beta_sparsify,
        unschedulable=g.unschedulable,
    )


def clique_capacity(g: UserGraph, subset: Sequence[int]) -> float:
    """Capacity score of a scheduled clique: total raw edge weight divided by
    ``k - 1``.  The subset must form a clique of the surviving edge set and
    match the graph's target group size."""
    subset = tuple(int(v) for v in subset)
    if len(set(subset)) != len(subset):
        raise ValueError(f"subset has repeated nodes: {subset}")
    if len(subset) != g.k_target:
        raise ValueError(f"subset size {len(subset)} != target group size {g.k_target}")
    ordered = sorted(subset)
    total = 0.0
    for a_idx, a in enumerate(ordered):
        for b in ordered[a_idx + 1 :]:
            if not g.edge_mask[a, b]:
                raise ValueError(f"subset is not a clique: missing edge ({a}, {b})")
            total += g.raw[a, b]
    return total / (g.k_target - 1)


# ---------------------------------------------------------------------------
# Edge-list text format
#
#   line 1:  "K k beta"  (beta = -1 while the graph is still complete)
#   then one line per pair, i < j in lexicographic order:
#   "i j raw_weight norm_weight"
#
# All pairs are written (including removed edges); the surviving edge set is
# reconstructed from beta on load.  Floats use repr-exact %.17g so that a
# save/load/save round trip is byte-identical.
# ---------------------------------------------------------------------------


def save_edge_list(g: UserGraph, path: str | Path) -> None:
    beta = -1.0 if g.beta is None else g.beta
    lines = [f"{g.num_nodes} {g.k_target} {beta:.17g}"]
    for i in range(g.num_nodes):
        for j in range(i + 1, g.num_nodes):
            lines.append(f"{i} {j} {g.raw[i, j]:.17g} {g.norm[i, j]:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_edge_list(path: str | Path, feature_dim: int = DEFAULT_FEATURE_DIM) -> UserGraph:
    text = Path(path).read_text().strip().splitlines()
    header = text[0].split()
    K, k_target, beta = int(header[0]), int(header[1]), float(header[2])
    raw = np.zeros((K, K))
    for line in text[1:]:
        si, sj, sraw, _snorm = line.split()
        i, j = int(si), int(sj)
        raw[i, j] = raw[j, i] = float(sraw)
    graph = UserGraph.from_weights(raw, k_target=k_target, feature_dim=feature_dim)
    if beta >= 0:
        graph = sparsify(graph, beta)
    return graph
