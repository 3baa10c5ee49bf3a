"""Unsupervised graph network that scores users for clique scheduling.

The network stacks B fundamental convolution blocks.  Each block aggregates
a node with its weighted 1-hop neighborhood,

    m_v = (1 + eps) h_v + sum_{u in N(v)} w_vu h_u,

normalizes by the node count K for optimization stability, and applies a
two-layer ReLU perceptron.  A final two-layer head maps each node embedding
to a scalar, and a graph-wide min-max normalization turns the scalars into
selection probabilities in [0, 1] (all 0.5 when the scores are constant).

Training is unsupervised: minimizing

    L = gamma - (beta + 1) * sum_{(i,j) in E} w_ij p_i p_j
              + (beta / 2) * sum_{i != j} p_i p_j

rewards probability mass on heavy, mutually adjacent nodes and taxes mass
anywhere else, so the probability landscape concentrates on dense heavy
subgraphs.  A greedy pass in decreasing probability order then rounds the
probabilities into a clique, optionally capped at k nodes.

Gradients are exact reverse-mode derivatives written out by hand (the
min-max normalization uses the first argmin/argmax as subgradient carriers
and is treated as constant in the degenerate all-equal case), optimized with
Adam.  Everything is plain float64 numpy, deterministic for a fixed seed.
"""

from __future__ import annotations

import math
import struct
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .baselines import PairingResult
from .channel import ChannelSet
from .graph import UserGraph, build_wcg, sparsify
from .precoding import SingularChannelError, zfbf_capacity

__all__ = [
    "FcbBlock",
    "GnnParams",
    "LossCoefficients",
    "TrainConfig",
    "TrainResult",
    "TrainingDivergedError",
    "Selection",
    "fcb_forward",
    "forward",
    "erdos_loss",
    "loss_gradient",
    "train",
    "decode_max_clique",
    "decode_k_clique",
    "pair_users",
    "save_params",
    "load_params",
]

DEFAULT_BLOCKS = 8
DEFAULT_WIDTH = 16

_ADAM_BETA1 = 0.9
_ADAM_BETA2 = 0.999
_ADAM_EPS = 1e-8


class TrainingDivergedError(RuntimeError):
    """Non-finite loss or activations; carries the epoch when known."""

    def __init__(self, message: str, epoch: int | None = None):
        self.epoch = epoch
        super().__init__(message if epoch is None else f"epoch {epoch}: {message}")


class FcbBlock(NamedTuple):
    """One convolution block: GIN self-weight plus a two-layer perceptron."""

    eps: float
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass(frozen=True)
class GnnParams:
    """All trainable parameters in one flat float64 vector.

    Canonical layout (also the order tensors appear in persisted files):
    for each block b = 0..B-1: eps (1), w1 (d*d row-major), b1 (d),
    w2 (d*d), b2 (d); then head_w1 (d*d), head_b1 (d), head_w2 (d),
    head_b2 (1).
    """

    vector: np.ndarray
    blocks: int
    width: int

    def __post_init__(self) -> None:
        vec = np.asarray(self.vector, dtype=float)
        if vec.shape != (self.size(self.blocks, self.width),):
            raise ValueError(
                f"parameter vector has length {vec.shape}, expected "
                f"({self.size(self.blocks, self.width)},) for B={self.blocks}, d={self.width}"
            )
        object.__setattr__(self, "vector", vec)

    @staticmethod
    def block_size(width: int) -> int:
        return 1 + 2 * width * width + 2 * width

    @staticmethod
    def size(blocks: int, width: int) -> int:
        return blocks * GnnParams.block_size(width) + width * width + 2 * width + 1

    @classmethod
    def init_random(
        cls,
        blocks: int = DEFAULT_BLOCKS,
        width: int = DEFAULT_WIDTH,
        rng: np.random.Generator | int = 0,
    ) -> "GnnParams":
        """Uniform(-a, a) initialization with a = 1/sqrt(d), in canonical order."""
        if isinstance(rng, (int, np.integer)):
            rng = np.random.default_rng(int(rng))
        a = 1.0 / math.sqrt(width)
        return cls(vector=rng.uniform(-a, a, size=cls.size(blocks, width)), blocks=blocks, width=width)

    @classmethod
    def zeros(cls, blocks: int, width: int) -> "GnnParams":
        return cls(vector=np.zeros(cls.size(blocks, width)), blocks=blocks, width=width)

    def block(self, b: int) -> FcbBlock:
        d = self.width
        base = b * self.block_size(d)
        v = self.vector
        o = base + 1
        w1 = v[o : o + d * d].reshape(d, d)
        o += d * d
        b1 = v[o : o + d]
        o += d
        w2 = v[o : o + d * d].reshape(d, d)
        o += d * d
        b2 = v[o : o + d]
        return FcbBlock(eps=float(v[base]), w1=w1, b1=b1, w2=w2, b2=b2)

    def head(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
        d = self.width
        o = self.blocks * self.block_size(d)
        v = self.vector
        hw1 = v[o : o + d * d].reshape(d, d)
        o += d * d
        hb1 = v[o : o + d]
        o += d
        hw2 = v[o : o + d]
        o += d
        return hw1, hb1, hw2, float(v[o])

    def copy(self) -> "GnnParams":
        return GnnParams(vector=self.vector.copy(), blocks=self.blocks, width=self.width)


@dataclass(frozen=True)
class LossCoefficients:
    """Penalty weights: constant offset gamma and pair-penalty beta_loss.

    Validity requires ``max-clique total weight <= gamma <= beta_loss`` with
    normalized edge weights at most 1; ``C(K, 2)`` dominates any clique's
    weight, so the default is safe for every graph on K nodes.
    """

    gamma: float
    beta_loss: float

    def __post_init__(self) -> None:
        if self.gamma > self.beta_loss:
            raise ValueError("gamma must not exceed beta_loss")

    @classmethod
    def default_for(cls, num_nodes: int) -> "LossCoefficients":
        bound = num_nodes * (num_nodes - 1) / 2.0
        return cls(gamma=bound, beta_loss=bound)


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def fcb_forward(g: UserGraph, h_in: np.ndarray, block: FcbBlock) -> np.ndarray:
    """One convolution block: weighted 1-hop aggregation, graph-size
    normalization, then the block's two-layer perceptron.  Output row v
    depends only on node v and its surviving neighbors."""
    agg = ((1.0 + block.eps) * h_in + g.aggregation_matrix @ h_in) / g.num_nodes
    return _relu(agg @ block.w1 + block.b1) @ block.w2 + block.b2


def _forward_trace(g: UserGraph, params: GnnParams) -> dict:
    if g.node_features.shape[1] != params.width:
        raise ValueError(
            f"graph feature width {g.node_features.shape[1]} != parameter width {params.width}"
        )
    K = g.num_nodes
    Aw = g.aggregation_matrix
    h = g.node_features.astype(float)
    block_cache = []
    for b in range(params.blocks):
        blk = params.block(b)
        agg = ((1.0 + blk.eps) * h + Aw @ h) / K
        z1 = agg @ blk.w1 + blk.b1
        a1 = _relu(z1)
        out = a1 @ blk.w2 + blk.b2
        block_cache.append((h, agg, z1, a1))
        h = out
    hw1, hb1, hw2, hb2 = params.head()
    z1h = h @ hw1 + hb1
    a1h = _relu(z1h)
    scores = a1h @ hw2 + hb2
    if not np.all(np.isfinite(scores)):
        raise TrainingDivergedError("non-finite activations in forward pass")
    smin = float(np.min(scores))
    smax = float(np.max(scores))
    degenerate = smax == smin
    if degenerate:
        p = np.full(K, 0.5)
    else:
        p = (scores - smin) / (smax - smin)
    return {
        "blocks": block_cache,
        "h_final": h,
        "z1h": z1h,
        "a1h": a1h,
        "scores": scores,
        "degenerate": degenerate,
        "p": p,
        "Aw": Aw,
    }


def forward(g: UserGraph, params: GnnParams) -> np.ndarray:
    """Per-node selection probabilities in [0, 1] (graph-wide min-max
    normalized head scores; all 0.5 when the scores are constant)."""
    return _forward_trace(g, params)["p"]


def erdos_loss(p: np.ndarray, g: UserGraph, c: LossCoefficients) -> float:
    """Probabilistic penalty: expected selected edge weight is rewarded,
    every co-selected pair is taxed."""
    p = np.asarray(p, dtype=float)
    Aw = g.aggregation_matrix
    edge_term = 0.5 * float(p @ (Aw @ p))
    total = float(np.sum(p))
    pair_term = 0.5 * c.beta_loss * (total * total - float(p @ p))
    return c.gamma - (c.beta_loss + 1.0) * edge_term + pair_term


def loss_gradient(
    g: UserGraph, c: LossCoefficients, params: GnnParams
) -> tuple[float, np.ndarray, GnnParams]:
    """Loss, probabilities, and the exact gradient of loss(forward(g)) with
    respect to every parameter, packed in canonical order."""
    trace = _forward_trace(g, params)
    p = trace["p"]
    Aw = trace["Aw"]
    loss = erdos_loss(p, g, c)

    K = g.num_nodes
    d = params.width
    dp = -(c.beta_loss + 1.0) * (Aw @ p) + c.beta_loss * (np.sum(p) - p)

    scores = trace["scores"]
    if trace["degenerate"]:
        g_s = np.zeros(K)
    else:
        a = int(np.argmin(scores))
        b = int(np.argmax(scores))
        span = scores[b] - scores[a]
        g_s = dp / span
        g_s[a] += float(dp @ (scores - scores[b])) / span**2
        g_s[b] -= float(dp @ (scores - scores[a])) / span**2

    grad = np.zeros_like(params.vector)
    hw1, hb1, hw2, hb2 = params.head()
    head_off = params.blocks * params.block_size(d)

    a1h = trace["a1h"]
    z1h = trace["z1h"]
    h_final = trace["h_final"]
    g_a1h = np.outer(g_s, hw2)
    g_z1h = g_a1h * (z1h > 0)
    grad[head_off : head_off + d * d] = (h_final.T @ g_z1h).ravel()
    grad[head_off + d * d : head_off + d * d + d] = g_z1h.sum(axis=0)
    grad[head_off + d * d + d : head_off + d * d + 2 * d] = a1h.T @ g_s
    grad[head_off + d * d + 2 * d] = float(np.sum(g_s))
    g_h = g_z1h @ hw1.T

    for b in range(params.blocks - 1, -1, -1):
        blk = params.block(b)
        h_in, agg, z1, a1 = trace["blocks"][b]
        g_out = g_h
        g_w2 = a1.T @ g_out
        g_b2 = g_out.sum(axis=0)
        g_a1 = g_out @ blk.w2.T
        g_z1 = g_a1 * (z1 > 0)
        g_w1 = agg.T @ g_z1
        g_b1 = g_z1.sum(axis=0)
        g_agg = g_z1 @ blk.w1.T
        g_eps = float(np.sum(g_agg * h_in)) / K
        g_h = ((1.0 + blk.eps) * g_agg + Aw @ g_agg) / K

        base = b * params.block_size(d)
        grad[base] = g_eps
        o = base + 1
        grad[o : o + d * d] = g_w1.ravel()
        o += d * d
        grad[o : o + d] = g_b1
        o += d
        grad[o : o + d * d] = g_w2.ravel()
        o += d * d
        grad[o : o + d] = g_b2

    return loss, p, GnnParams(vector=grad, blocks=params.blocks, width=params.width)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-3
    epochs: int = 200
    seed: int = 0
    blocks: int = DEFAULT_BLOCKS
    width: int = DEFAULT_WIDTH
    coefficients: LossCoefficients | None = None


@dataclass(frozen=True)
class TrainResult:
    params: GnnParams
    loss_trace: tuple[float, ...]


def train(instances: Sequence[UserGraph], config: TrainConfig) -> TrainResult:
    """Adam descent of the penalty loss over a fixed stream of graphs.

    One update per graph per epoch; the loss trace records the mean loss of
    each epoch (evaluated at the parameters before each update).  Fully
    deterministic for a fixed seed and instance list.
    """
    instances = list(instances)
    if not instances:
        raise ValueError("need at least one training instance")
    params = GnnParams.init_random(config.blocks, config.width, rng=config.seed)
    vec = params.vector.copy()
    m = np.zeros_like(vec)
    v = np.zeros_like(vec)
    t = 0
    trace = []
    for epoch in range(config.epochs):
        epoch_losses = []
        for g in instances:
            coeffs = config.coefficients or LossCoefficients.default_for(g.num_nodes)
            current = GnnParams(vector=vec, blocks=config.blocks, width=config.width)
            try:
                loss, _, grads = loss_gradient(g, coeffs, current)
            except TrainingDivergedError as exc:
                raise TrainingDivergedError(str(exc), epoch=epoch) from exc
            if not math.isfinite(loss):
                raise TrainingDivergedError("loss is not finite", epoch=epoch)
            epoch_losses.append(loss)
            t += 1
            grad_vec = grads.vector
            m = _ADAM_BETA1 * m + (1.0 - _ADAM_BETA1) * grad_vec
            v = _ADAM_BETA2 * v + (1.0 - _ADAM_BETA2) * grad_vec**2
            m_hat = m / (1.0 - _ADAM_BETA1**t)
            v_hat = v / (1.0 - _ADAM_BETA2**t)
            vec = vec - config.learning_rate * m_hat / (np.sqrt(v_hat) + _ADAM_EPS)
        trace.append(float(np.mean(epoch_losses)))
    return TrainResult(
        params=GnnParams(vector=vec, blocks=config.blocks, width=config.width),
        loss_trace=tuple(trace),
    )


@dataclass(frozen=True)
class Selection:
    """Greedy decoding outcome: the clique and whether it reached size k."""

    nodes: tuple[int, ...]
    complete: bool


def _greedy_clique(p: np.ndarray, g: UserGraph, limit: int | None) -> tuple[int, ...]:
    p = np.asarray(p, dtype=float)
    K = g.num_nodes
    order = np.lexsort((np.arange(K), -p))
    selected: list[int] = []
    for v in order:
        if limit is not None and len(selected) >= limit:
            break
        if all(g.edge_mask[v, u] for u in selected):
            selected.append(int(v))
    return tuple(selected)


def decode_max_clique(p: np.ndarray, g: UserGraph) -> tuple[int, ...]:
    """Greedy rounding in decreasing probability order (ties by node index):
    a node joins if it is adjacent to everything selected so far."""
    return _greedy_clique(p, g, limit=None)


def decode_k_clique(p: np.ndarray, g: UserGraph, k: int) -> Selection:
    """Same greedy pass but stops once k nodes are selected; the result is a
    clique of size <= k, smaller only if no eligible node remains."""
    if k < 1:
        raise ValueError("k must be >= 1")
    nodes = _greedy_clique(p, g, limit=k)
    return Selection(nodes=nodes, complete=len(nodes) == k)


def pair_users(
    channels: ChannelSet,
    k: int,
    beta_sparsify: float,
    params: GnnParams,
) -> PairingResult:
    """Full scheduling pass: weighted graph, sparsification, network scores,
    k-limited greedy decoding, then the equal-power zero-forcing rate of the
    selected users."""
    start = time.perf_counter()
    g = sparsify(build_wcg(channels, k, feature_dim=params.width), beta_sparsify)
    p = forward(g, params)
    sel = decode_k_clique(p, g, k)
    flags: list[str] = []
    if not sel.complete:
        flags.append("incomplete")
    try:
        rate = zfbf_capacity(channels, sel.nodes, power_mode="equal", on_singular="raise")
    except SingularChannelError:
        rate = 0.0
        flags.append("unschedulable")
    return PairingResult(
        subset=sel.nodes,
        sum_rate=rate,
        method="kclique",
        wall_time=time.perf_counter() - start,
        flags=tuple(flags),
    )


# ---------------------------------------------------------------------------
# Binary persistence ("PNNW" format)
#
# Layout, all little-endian:
#   magic    4 bytes  b"PNNW"
#   version  u8       1
#   B        u32      block count
#   d        u32      embedding width
#   tensors  float64, in the canonical order documented on GnnParams
# ---------------------------------------------------------------------------

_PNNW_MAGIC = b"PNNW"
_PNNW_VERSION = 1


def save_params(params: GnnParams, path: str | Path) -> None:
    out = bytearray()
    out += _PNNW_MAGIC
    out += struct.pack("<B", _PNNW_VERSION)
    out += struct.pack("<II", params.blocks, params.width)
    out += params.vector.astype("<f8").tobytes()
    Path(path).write_bytes(bytes(out))


def load_params(
    path: str | Path,
    expect_blocks: int | None = None,
    expect_width: int | None = None,
) -> GnnParams:
    """Load a persisted model, validating shape against the stored header and
    the caller's expectations when given."""
    buf = Path(path).read_bytes()
    if buf[:4] != _PNNW_MAGIC:
        raise ValueError(f"{path}: not a PNNW file")
    (version,) = struct.unpack_from("<B", buf, 4)
    if version != _PNNW_VERSION:
        raise ValueError(f"{path}: unsupported PNNW version {version}")
    blocks, width = struct.unpack_from("<II", buf, 5)
    if expect_blocks is not None and blocks != expect_blocks:
        raise ValueError(f"{path}: file has B={blocks}, expected {expect_blocks}")
    if expect_width is not None and width != expect_width:
        raise ValueError(f"{path}: file has d={width}, expected {expect_width}")
    expected = GnnParams.size(blocks, width)
    vector = np.frombuffer(buf, dtype="<f8", offset=13)
    if vector.shape[0] != expected:
        raise ValueError(f"{path}: {vector.shape[0]} parameters, expected {expected}")
    return GnnParams(vector=vector.astype(float), blocks=blocks, width=width)
