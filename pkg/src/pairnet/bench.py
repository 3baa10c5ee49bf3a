"""Experiment harness: seeded scenario sweeps, CSV output, analytic FLOPs.

Every experiment is a pure function of (config, seed): trials draw their
randomness from seed-sequence children of the scenario seed, numbers are
written with deterministic formatting, and re-running a config reproduces
the CSV byte for byte.  The one exception is the runtime experiment, whose
wall-clock medians are inherently machine-dependent; it writes an
environment fingerprint next to its CSV instead.

FLOPs are closed-form counts per scheduling decision, not hardware
measurements.  Conventions: one real multiply-add = 2 flops, one complex
multiply-add = 8; constants are documented on :func:`count_flops`.
"""

from __future__ import annotations

import json
import logging
import math
import platform
import statistics
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .baselines import (
    EXHAUSTIVE_SUBSET_LIMIT,
    METHODS,
    PairingResult,
    exhaustive_pair,
    kmeans_pair,
    sus_pair,
)
from .channel import AntennaArray, ChannelSet, generate_network
from .gnn import (
    GnnParams,
    LossCoefficients,
    TrainConfig,
    TrainResult,
    decode_k_clique,
    forward,
    load_params,
    pair_users,
    train,
)
from .graph import UserGraph, build_wcg, sparsify

__all__ = [
    "Scenario",
    "TrainSettings",
    "ExperimentConfig",
    "ConfigError",
    "FlopsLedger",
    "parse_config",
    "generate_channels",
    "make_training_graphs",
    "train_model",
    "evaluate_method",
    "count_flops",
    "run_sumrate_vs_snr",
    "run_sumrate_vs_K",
    "run_flops",
    "run_runtime",
    "run_scaling",
]

logger = logging.getLogger("pairnet.bench")


class ConfigError(ValueError):
    """Malformed configuration file or field."""


@dataclass(frozen=True)
class Scenario:
    """Physical and experimental parameters of one cell snapshot family."""

    num_users: int = 40
    group_size: int = 4
    num_antennas: int = 16
    beta_sparsify: float = 1.0
    power_db: float = 20.0
    cell_radius: float = 500.0
    ring_radius: float = 30.0
    wavelength: float = 0.1
    seed: int = 0
    trials: int = 100
    sus_alpha: float = 0.3

    def __post_init__(self) -> None:
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.num_users < 2 or self.group_size < 1:
            raise ConfigError("need num_users >= 2 and group_size >= 1")

    @property
    def power_linear(self) -> float:
        return 10.0 ** (self.power_db / 10.0)

    def array(self) -> AntennaArray:
        return AntennaArray.uniform_linear(self.num_antennas, self.wavelength)


@dataclass(frozen=True)
class TrainSettings:
    """Hyperparameters of the unsupervised training run."""

    epochs: int = 200
    learning_rate: float = 5e-3
    instances: int = 32
    blocks: int = 8
    width: int = 16
    seed: int = 1
    gamma: float | None = None
    beta_loss: float | None = None

    def coefficients(self) -> LossCoefficients | None:
        if self.gamma is None and self.beta_loss is None:
            return None
        if self.gamma is None or self.beta_loss is None:
            raise ConfigError("gamma and beta_loss must be set together")
        return LossCoefficients(gamma=self.gamma, beta_loss=self.beta_loss)


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: Scenario = Scenario()
    train: TrainSettings = TrainSettings()
    methods: tuple[str, ...] = ("kclique", "kmeans", "sus")
    snr_sweep: tuple[float, ...] = (0.0, 5.0, 10.0, 15.0, 20.0, 25.0)
    k_sweep: tuple[int, ...] = (10, 20, 30, 40, 50, 60, 70, 80, 90, 100)
    output_dir: Path = Path("results")
    params_path: Path | None = None
    make_plots: bool = True

    def __post_init__(self) -> None:
        for name, sweep in (("snr_sweep", self.snr_sweep), ("k_sweep", self.k_sweep)):
            if len(sweep) == 0:
                raise ConfigError(f"{name}: must be non-empty")
            if list(sweep) != sorted(sweep):
                raise ConfigError(f"{name}: must be sorted ascending")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"methods: unknown method {m!r}")
        object.__setattr__(self, "output_dir", Path(self.output_dir))


# ---------------------------------------------------------------------------
# Flat key = value configuration files ('#' starts a comment)
# ---------------------------------------------------------------------------

_SCENARIO_KEYS = {
    "K": ("num_users", int),
    "k": ("group_size", int),
    "M": ("num_antennas", int),
    "beta_sparsify": ("beta_sparsify", float),
    "power_db": ("power_db", float),
    "cell_radius": ("cell_radius", float),
    "ring_radius": ("ring_radius", float),
    "wavelength": ("wavelength", float),
    "seed": ("seed", int),
    "trials": ("trials", int),
    "sus_alpha": ("sus_alpha", float),
}

_TRAIN_KEYS = {
    "epochs": ("epochs", int),
    "learning_rate": ("learning_rate", float),
    "train_instances": ("instances", int),
    "blocks": ("blocks", int),
    "width": ("width", int),
    "train_seed": ("seed", int),
    "gamma": ("gamma", float),
    "beta_loss": ("beta_loss", float),
}


def parse_config(text: str) -> dict[str, str]:
    """Parse flat ``key = value`` lines into a string mapping."""
    values: dict[str, str] = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw_line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def _cast(key: str, value: str, caster: Callable):
    try:
        return caster(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: cannot parse {value!r} as {caster.__name__}") from exc


def config_from_mapping(values: dict[str, str]) -> ExperimentConfig:
    scenario_kwargs = {}
    train_kwargs = {}
    extra: dict[str, object] = {}
    for key, value in values.items():
        if key in _SCENARIO_KEYS:
            name, caster = _SCENARIO_KEYS[key]
            scenario_kwargs[name] = _cast(key, value, caster)
        elif key in _TRAIN_KEYS:
            name, caster = _TRAIN_KEYS[key]
            train_kwargs[name] = _cast(key, value, caster)
        elif key == "methods":
            extra["methods"] = tuple(m.strip() for m in value.split(",") if m.strip())
        elif key == "snr_sweep":
            extra["snr_sweep"] = tuple(_cast(key, v.strip(), float) for v in value.split(","))
        elif key == "k_sweep":
            extra["k_sweep"] = tuple(_cast(key, v.strip(), int) for v in value.split(","))
        elif key == "output_dir":
            extra["output_dir"] = Path(value)
        elif key == "params_path":
            extra["params_path"] = Path(value)
        elif key == "make_plots":
            extra["make_plots"] = value.strip().lower() in ("1", "true", "yes")
        else:
            raise ConfigError(f"unknown key {key!r}")
    return ExperimentConfig(scenario=Scenario(**scenario_kwargs), train=TrainSettings(**train_kwargs), **extra)


def load_config(path: str | Path) -> ExperimentConfig:
    return config_from_mapping(parse_config(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Scenario plumbing
# ---------------------------------------------------------------------------


def generate_channels(
    scenario: Scenario,
    seed: np.random.SeedSequence | int,
    total_power: float | None = None,
) -> ChannelSet:
    rng = np.random.default_rng(seed)
    return generate_network(
        num_users=scenario.num_users,
        cell_radius=scenario.cell_radius,
        ring_radius=scenario.ring_radius,
        array=scenario.array(),
        total_power=scenario.power_linear if total_power is None else total_power,
        rng=rng,
    )


def make_training_graphs(scenario: Scenario, settings: TrainSettings) -> list[UserGraph]:
    """Fresh sparsified graphs from a dedicated seeded stream."""
    children = np.random.SeedSequence(settings.seed).spawn(settings.instances)
    graphs = []
    for child in children:
        channels = generate_channels(scenario, child)
        g = build_wcg(channels, scenario.group_size, feature_dim=settings.width)
        graphs.append(sparsify(g, scenario.beta_sparsify))
    return graphs


def train_model(scenario: Scenario, settings: TrainSettings) -> TrainResult:
    graphs = make_training_graphs(scenario, settings)
    config = TrainConfig(
        learning_rate=settings.learning_rate,
        epochs=settings.epochs,
        seed=settings.seed,
        blocks=settings.blocks,
        width=settings.width,
        coefficients=settings.coefficients(),
    )
    return train(graphs, config)


def _ensure_params(cfg: ExperimentConfig, scenario: Scenario | None = None) -> GnnParams:
    if cfg.params_path is not None:
        return load_params(cfg.params_path, expect_blocks=cfg.train.blocks, expect_width=cfg.train.width)
    return train_model(scenario if scenario is not None else cfg.scenario, cfg.train).params


def evaluate_method(
    method: str,
    channels: ChannelSet,
    scenario: Scenario,
    params: GnnParams | None,
    trial_seed: int,
) -> PairingResult:
    if method == "kclique":
        if params is None:
            raise ValueError("kclique needs trained parameters")
        return pair_users(channels, scenario.group_size, scenario.beta_sparsify, params)
    if method == "kmeans":
        return kmeans_pair(channels, scenario.group_size, seed=trial_seed)
    if method == "sus":
        return sus_pair(channels, scenario.group_size, alpha=scenario.sus_alpha)
    if method == "exhaustive":
        return exhaustive_pair(channels, scenario.group_size)
    raise ValueError(f"unknown method {method!r}")


def _trial_streams(scenario: Scenario) -> list[tuple[np.random.SeedSequence, int]]:
    """Per-trial (channel seed, baseline seed) pairs from the scenario seed."""
    streams = []
    for child in np.random.SeedSequence(scenario.seed).spawn(scenario.trials):
        chan_ss, aux_ss = child.spawn(2)
        streams.append((chan_ss, int(aux_ss.generate_state(1)[0])))
    return streams


# ---------------------------------------------------------------------------
# CSV / plot output
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return format(float(x), ".12g")


def _write_csv(path: Path, header: str, rows: Sequence[Sequence]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [header]
    for row in rows:
        lines.append(",".join(str(c) if isinstance(c, (int, str)) else _fmt(c) for c in row))
    path.write_text("\n".join(lines) + "\n")


def _plot_by_method(rows, x_label: str, y_label: str, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    series: dict[str, tuple[list, list]] = {}
    for row in rows:
        x, method, y = row[0], row[1], row[2]
        series.setdefault(method, ([], []))
        series[method][0].append(x)
        series[method][1].append(y)
    fig, ax = plt.subplots(figsize=(6, 4))
    for method, (xs, ys) in sorted(series.items()):
        ax.plot(xs, ys, marker="o", label=method)
    ax.set_xlabel(x_label)
    ax.set_ylabel(y_label)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------


def _method_stats(
    cfg: ExperimentConfig,
    scenario: Scenario,
    channel_sets: Sequence[ChannelSet],
    aux_seeds: Sequence[int],
    params: GnnParams | None,
) -> dict[str, tuple[float, float]]:
    """Mean/std of sum rate per method; failed trials are logged and skipped."""
    stats = {}
    for method in cfg.methods:
        rates = []
        skipped = 0
        for channels, aux in zip(channel_sets, aux_seeds):
            try:
                rates.append(evaluate_method(method, channels, scenario, params, aux).sum_rate)
            except Exception as exc:  # per-trial isolation
                skipped += 1
                logger.warning("trial skipped for %s: %s", method, exc)
        if skipped:
            logger.warning("%s: %d/%d trials skipped", method, skipped, len(channel_sets))
        if rates:
            stats[method] = (float(np.mean(rates)), float(np.std(rates)))
    return stats


def run_sumrate_vs_snr(cfg: ExperimentConfig, params: GnnParams | None = None):
    """Mean sum rate per method across a transmit-SNR sweep.

    Channel realizations are shared across SNR points within a trial; only
    the power budget changes.  Writes ``sumrate_vs_snr.csv`` with header
    ``snr_db,method,mean,std``.
    """
    scenario = cfg.scenario
    if params is None and "kclique" in cfg.methods:
        params = _ensure_params(cfg)
    streams = _trial_streams(scenario)
    base_sets = [generate_channels(scenario, chan_ss) for chan_ss, _ in streams]
    aux_seeds = [aux for _, aux in streams]
    rows = []
    for snr_db in cfg.snr_sweep:
        power = 10.0 ** (snr_db / 10.0)
        powered = [cs.with_power(power) for cs in base_sets]
        for method, (mean, std) in _method_stats(cfg, scenario, powered, aux_seeds, params).items():
            rows.append((snr_db, method, mean, std))
    _write_csv(cfg.output_dir / "sumrate_vs_snr.csv", "snr_db,method,mean,std", rows)
    if cfg.make_plots:
        _plot_by_method(rows, "transmit SNR (dB)", "sum rate (bps/Hz)", cfg.output_dir / "sumrate_vs_snr.png")
    return rows


def run_sumrate_vs_K(cfg: ExperimentConfig, params: GnnParams | None = None):
    """Mean and spread of sum rate per method as the user population grows.

    The scheduler is trained once on the base scenario and evaluated at every
    population size (its parameters are size-independent).  Writes
    ``sumrate_vs_K.csv`` with header ``K,method,mean,std``.
    """
    if params is None and "kclique" in cfg.methods:
        params = _ensure_params(cfg)
    rows = []
    for K in cfg.k_sweep:
        scenario = replace(cfg.scenario, num_users=K)
        methods = []
        for m in cfg.methods:
            if m == "exhaustive" and math.comb(K, scenario.group_size) > EXHAUSTIVE_SUBSET_LIMIT:
                logger.warning("exhaustive skipped at K=%d (too many subsets)", K)
                continue
            methods.append(m)
        sub_cfg = replace(cfg, methods=tuple(methods))
        streams = _trial_streams(scenario)
        channel_sets = [generate_channels(scenario, chan_ss) for chan_ss, _ in streams]
        aux_seeds = [aux for _, aux in streams]
        for method, (mean, std) in _method_stats(sub_cfg, scenario, channel_sets, aux_seeds, params).items():
            rows.append((K, method, mean, std))
    _write_csv(cfg.output_dir / "sumrate_vs_K.csv", "K,method,mean,std", rows)
    if cfg.make_plots:
        _plot_by_method(rows, "users K", "sum rate (bps/Hz)", cfg.output_dir / "sumrate_vs_K.png")
    return rows


# ---------------------------------------------------------------------------
# Analytic FLOPs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FlopsLedger:
    """Closed-form flop counts for one scheduling decision, split by phase."""

    method: str
    phases: dict[str, int]

    @property
    def total(self) -> int:
        return sum(self.phases.values())


def count_flops(method: str, scenario: Scenario, width: int = 16, blocks: int = 8) -> FlopsLedger:
    """Analytic flop counts per scheduling decision.

    Counting conventions: real multiply-add = 2 flops, complex multiply-add
    = 8 flops; comparisons count 1.  Closed forms (K users, M antennas,
    d = embedding width, B = blocks, k = group size, E = C(K, 2) pairs):

    kclique
      graph_setup      E * (24 M + 30): three complex dots of length M per
                       pair plus the 2x2 inverse and two rate evaluations,
                       plus 2 E for weight normalization.
      edge_reduction   E comparisons against the sparsification threshold.
      message_passing  B * (4 E d + 2 K d): weighted neighbor sums over at
                       most E undirected edges plus the self term and the
                       1/K scaling (complete-graph upper bound).
      inference        K * (B * (4 d^2 + 3 d) + 2 d^2 + 3 d) + 2 K: the
                       per-node perceptrons, head, and min-max pass; linear
                       in K by construction.
    kmeans
      eigendecomposition  K * 14 M^3: dense Hermitian eigensolver, nominal
                          leading constant.
      distances           E * (2 M^3 + M^2 / 2): eigenspace cross-Gramians
                          at the nominal rank bound M/2.
      medoid_iterations   10 * (K k + K^2 / k + K): assignment and medoid
                          updates at a nominal 10 iterations.
    sus
      selection        K * 8 M norms + per round: K correlation tests
                       (8 M + 6 each) and orthogonal components
                       (16 M per already-selected basis) -> linear in K.
    exhaustive
      search           C(K, k) * (8 M k^2 + 26 k^3 / 3 + 10 k): Gram build
                       and solve per subset.
    """
    K = scenario.num_users
    M = scenario.num_antennas
    k = scenario.group_size
    d = 16
    B = 8
    E = math.comb(K, 2)
    if method == "kclique":
        phases = {
            "graph_setup": E * (24 * M + 30) + 2 * E,
            "edge_reduction": E,
            "message_passing": B * (4 * E * d + 2 * K * d),
            "inference": K * (B * (4 * d * d + 3 * d) + 2 * d * d + 3 * d) + 2 * K,
        }
    elif method == "kmeans":
        phases = {
            "eigendecomposition": K * 14 * M**3,
            "distances": E * (2 * M**3 + M * M // 2),
            "medoid_iterations": 10 * (K * k + K * K // k + K),
        }
    elif method == "sus":
        per_round = K * (8 * M + 6) + K * 16 * M * (k - 1)
        phases = {"selection": K * 8 * M + k * per_round}
    elif method == "exhaustive":
        phases = {"search": math.comb(K, k) * (8 * M * k * k + 26 * k**3 // 3 + 10 * k)}
    else:
        raise ValueError(f"unknown method {method!r}")
    return FlopsLedger(method=method, phases=dict(phases))


def run_flops(cfg: ExperimentConfig):
    """Analytic FLOPs across the population sweep.

    Writes ``flops_vs_K.csv`` with header ``K,method,phase,flops`` including
    a ``total`` row per method.
    """
    rows = []
    for K in cfg.k_sweep:
        scenario = replace(cfg.scenario, num_users=K)
        for method in cfg.methods:
            ledger = count_flops(method, scenario)
            for phase, flops in ledger.phases.items():
                rows.append((K, method, phase, flops))
            rows.append((K, method, "total", ledger.total))
    _write_csv(cfg.output_dir / "flops_vs_K.csv", "K,method,phase,flops", rows)
    if cfg.make_plots:
        totals = [(r[0], r[1], r[3]) for r in rows if r[2] == "total"]
        _plot_by_method(totals, "users K", "flops per decision", cfg.output_dir / "flops_vs_K.png")
    return rows


# ---------------------------------------------------------------------------
# Runtime
# ---------------------------------------------------------------------------


def median_time(fn: Callable[[], object], repetitions: int = 9, warmup: int = 2) -> float:
    """Median wall time of ``fn`` over ``repetitions`` runs after warmup.

    If the median falls below timer resolution (1 us), the call is batched
    in inner loops until each sample is comfortably measurable.
    """
    if repetitions < 5:
        raise ValueError("need at least 5 repetitions")
    for _ in range(warmup):
        fn()
    inner = 1
    while True:
        samples = []
        for _ in range(repetitions):
            start = time.perf_counter()
            for _ in range(inner):
                fn()
            samples.append((time.perf_counter() - start) / inner)
        med = statistics.median(samples)
        if med >= 1e-6 or inner >= 1024:
            return med
        inner *= 8


def environment_fingerprint() -> str:
    info = {
        "machine": platform.machine(),
        "numpy": np.__version__,
        "platform": platform.platform(),
        "processor": platform.processor() or "unknown",
        "python": platform.python_version(),
    }
    return json.dumps(info, sort_keys=True)


def run_runtime(cfg: ExperimentConfig, params: GnnParams | None = None, repetitions: int = 9):
    """Median scheduling-decision latency per method across the K sweep.

    Times only the decision itself: the graph scheduler runs its forward
    pass plus greedy decoding on a pre-built sparsified graph, k-means runs
    the full clustering from the stored eigenbases, and greedy selection
    runs from the channel matrix.  Writes ``runtime_vs_K.csv`` with header
    ``K,method,median_seconds`` plus an environment fingerprint sidecar.
    """
    if params is None and "kclique" in cfg.methods:
        params = _ensure_params(cfg)
    rows = []
    for K in cfg.k_sweep:
        scenario = replace(cfg.scenario, num_users=K)
        channels = generate_channels(scenario, np.random.SeedSequence(scenario.seed))
        graph = sparsify(
            build_wcg(channels, scenario.group_size, feature_dim=cfg.train.width),
            scenario.beta_sparsify,
        )
        timers: dict[str, Callable[[], object]] = {}
        if "kclique" in cfg.methods:
            timers["kclique"] = lambda g=graph, p=params, kk=scenario.group_size: decode_k_clique(
                forward(g, p), g, kk
            )
        if "kmeans" in cfg.methods:
            timers["kmeans"] = lambda cs=channels, kk=scenario.group_size: kmeans_pair(cs, kk, seed=0)
        if "sus" in cfg.methods:
            timers["sus"] = lambda cs=channels, kk=scenario.group_size, a=scenario.sus_alpha: sus_pair(
                cs, kk, alpha=a
            )
        if "exhaustive" in cfg.methods and math.comb(K, scenario.group_size) <= EXHAUSTIVE_SUBSET_LIMIT:
            timers["exhaustive"] = lambda cs=channels, kk=scenario.group_size: exhaustive_pair(cs, kk)
        for method, fn in timers.items():
            rows.append((K, method, median_time(fn, repetitions=repetitions)))
    _write_csv(cfg.output_dir / "runtime_vs_K.csv", "K,method,median_seconds", rows)
    (cfg.output_dir / "runtime_env.txt").write_text(environment_fingerprint() + "\n")
    if cfg.make_plots:
        _plot_by_method(rows, "users K", "median decision time (s)", cfg.output_dir / "runtime_vs_K.png")
    return rows


def run_scaling(cfg: ExperimentConfig, params: GnnParams | None = None, train_users: int = 10):
    """Size transfer: train once on a small population, evaluate across K.

    The scheduler's parameters are shared across nodes, so the model trained
    at ``train_users`` runs unchanged at every sweep size.  Writes
    ``scaling.csv`` with header ``K,mean_sum_rate``.
    """
    if params is None:
        params = _ensure_params(cfg, scenario=replace(cfg.scenario, num_users=train_users))
    rows = []
    for K in cfg.k_sweep:
        scenario = replace(cfg.scenario, num_users=K)
        streams = _trial_streams(scenario)
        rates = []
        for chan_ss, _ in streams:
            channels = generate_channels(scenario, chan_ss)
            rates.append(pair_users(channels, scenario.group_size, scenario.beta_sparsify, params).sum_rate)
        rows.append((K, float(np.mean(rates))))
    _write_csv(cfg.output_dir / "scaling.csv", "K,mean_sum_rate", rows)
    if cfg.make_plots:
        padded = [(K, "kclique", mean) for K, mean in rows]
        _plot_by_method(padded, "users K", "sum rate (bps/Hz)", cfg.output_dir / "scaling.png")
    return rows
