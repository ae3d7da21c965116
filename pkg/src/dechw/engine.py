"""Synchronous round-based simulation of decentralized federated learning.

One round, on every node in parallel: aggregate the bundles staged by the
node's neighbourhood (and itself) at the end of the previous round, train
locally, refresh the Hessian estimate if it will still be exchanged, and stage
the outgoing bundle.  All nodes read only previous-round bundles, so the
per-node work is order independent.
"""
from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import aggregation, data, hessian, nncore, topology
from .config import ExperimentConfig, validate
from .errors import DimensionError

log = logging.getLogger(__name__)

METRICS_COLUMNS = ("round", "mean_acc", "std_acc", "mean_train_loss", "mean_hess_norm",
                   "scalars_sent_cum", "fallback_frac")

_TRAIN_STREAM = 0
_HESSIAN_STREAM = 1


def node_seed(master_seed: int, node_id: int) -> int:
    """Per-node seed derived from the master seed; also seeds weight initialisation."""
    return int(np.random.SeedSequence([master_seed, node_id]).generate_state(1)[0])


def node_rng(seed: int, round_idx: int, stream: int) -> np.random.Generator:
    """Independent generator per (node seed, round, purpose); execution order never matters."""
    return np.random.default_rng(np.random.SeedSequence([seed, round_idx, stream]))


@dataclass
class NodeState:
    node_id: int
    params: np.ndarray
    optimizer: nncore.OptimizerState
    hessian: Optional[hessian.HessianState]
    partition: data.DataPartition
    features: np.ndarray
    labels: np.ndarray
    rng_seed: int
    last_loss: float = math.nan
    last_hess_norm: float = math.nan
    fallback_count: int = 0

    @property
    def size(self) -> int:
        return len(self.labels)


@dataclass
class RoundMetrics:
    round: int
    mean_acc: float
    std_acc: float
    mean_train_loss: float
    mean_hess_norm: float
    scalars_sent_cum: int
    fallback_frac: float
    scalars_per_sender_cum: int = 0
    node_acc: tuple = ()

    def csv_row(self) -> list:
        return [self.round, f"{self.mean_acc:.6f}", f"{self.std_acc:.6f}", f"{self.mean_train_loss:.6f}",
                f"{self.mean_hess_norm:.6f}", self.scalars_sent_cum, f"{self.fallback_frac:.6f}"]


@dataclass
class Simulation:
    config: ExperimentConfig
    spec: nncore.ModelSpec
    topology: topology.Topology
    train: data.Dataset
    test: data.Dataset
    test_x: np.ndarray
    nodes: List[NodeState]
    bundles: List[aggregation.NeighborBundle] = field(default_factory=list)
    round: int = 0
    scalars_sent: int = 0
    scalars_per_sender: int = 0
    hessian_norms: List[list] = field(default_factory=list)  # one row of per-node norms per round (nan if none)
    trace_node: Optional[int] = None
    trace_indices: Optional[np.ndarray] = None
    weight_trace: List[np.ndarray] = field(default_factory=list)  # (participants, len(trace_indices)) per round

    @property
    def m(self) -> int:
        return self.spec.num_params


# --------------------------------------------------------------------------
# setup


def model_spec(cfg: ExperimentConfig, sample_shape: tuple, num_classes: int) -> nncore.ModelSpec:
    arch = cfg.model.arch
    if arch == "mlp":
        return nncore.mlp(int(np.prod(sample_shape)), cfg.model.hidden, num_classes, cfg.model.activation)
    return nncore.make_spec(arch, num_classes=num_classes)


def as_model_input(features: np.ndarray, spec: nncore.ModelSpec) -> np.ndarray:
    n = len(features)
    if int(np.prod(features.shape[1:])) != int(np.prod(spec.input_shape)):
        raise DimensionError(f"samples of shape {features.shape[1:]} cannot feed input {spec.input_shape}")
    return features.reshape(n, *spec.input_shape)


def load_datasets(cfg: ExperimentConfig) -> tuple:
    d = cfg.data
    seed = cfg.data_seed
    if d.source == "synthetic":
        full = data.gen_synthetic(d.num_classes, d.samples_per_class + d.test_per_class, d.input_dim,
                                  d.class_separation, seed)
        return data.stratified_split(full, d.test_per_class, seed)
    train = data.load_idx(d.train_images, d.train_labels)
    test = data.load_idx(d.test_images, d.test_labels)
    num_classes = max(train.num_classes, test.num_classes)
    train = data.Dataset(train.features, train.labels, num_classes)
    test = data.Dataset(test.features, test.labels, num_classes)
    return data.take_subset(train, d.train_subset, seed), data.take_subset(test, d.test_subset, seed + 1)


def build_topology(cfg: ExperimentConfig) -> topology.Topology:
    t = cfg.topology
    if t.model == "edge-list":
        return topology.read_edge_list(t.edge_list, t.n_nodes)
    return topology.gen_erdos_renyi(t.n_nodes, t.p, cfg.topology_seed)


def local_train(node: NodeState, spec: nncore.ModelSpec, epochs: int, batch_size: int,
                rng: np.random.Generator) -> NodeState:
    """Run ``epochs`` passes of mini-batch SGD over the node's own data."""
    if epochs == 0:
        return node
    opt = node.optimizer.copy()
    params, loss = nncore.train_epochs(node.params, spec, opt, node.features, node.labels,
                                       epochs, batch_size, rng)
    return replace(node, params=params, optimizer=opt, last_loss=loss)


def _refresh_hessian(sim: Simulation, node: NodeState, t: int) -> NodeState:
    agg = sim.config.aggregation
    raw = hessian.estimate_gn_diag(node.params, sim.spec, node.features, node.labels,
                                   agg.sample_budget, node_rng(node.rng_seed, t, _HESSIAN_STREAM))
    return replace(node, hessian=hessian.accumulate(node.hessian, raw), last_hess_norm=raw.norm)


def _exchanges_hessian(cfg: ExperimentConfig, t: int) -> bool:
    """Whether aggregation in round ``t`` is Hessian weighted."""
    return cfg.aggregation.strategy == "dechw" and t <= cfg.theta


def _stage(node: NodeState, with_hessian: bool) -> aggregation.NeighborBundle:
    h = node.hessian.accumulated if with_hessian else None
    return aggregation.NeighborBundle(node.node_id, node.params, node.size, h)


def _pool_map(workers: int, fn: Callable, items: Sequence) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def initialize(cfg: ExperimentConfig, trace_node: Optional[int] = None, trace_indices=None) -> Simulation:
    """Build every node and run round 0: local training plus the first Hessian estimate.

    ``trace_node`` records the aggregation weights that node applies each
    round at ``trace_indices`` (an index array, or a count of seeded picks).
    """
    sim = build_simulation(cfg, trace_node, trace_indices)
    advance_round_zero(sim)
    return sim


def build_simulation(cfg: ExperimentConfig, trace_node: Optional[int] = None, trace_indices=None) -> Simulation:
    """Freshly initialised nodes, before any training."""
    validate(cfg)
    topo = build_topology(cfg)
    topology.warn_if_disconnected(topo)
    train, test = load_datasets(cfg)
    spec = model_spec(cfg, train.sample_shape, train.num_classes)
    parts = data.dirichlet_partition(train, topo.n_nodes,
                                     data.PartitionSpec(cfg.partition.alpha, cfg.partition_seed,
                                                        cfg.partition.min_samples_per_node))
    train_x = as_model_input(train.features, spec)
    seed = cfg.run.seed
    tr = cfg.training
    nodes = []
    for part in parts:
        i = part.owner
        params = nncore.build_model(spec, node_seed(seed, 0 if cfg.run.homogeneous_init else i))
        h = None
        if cfg.aggregation.strategy == "dechw":
            h = hessian.HessianState.zeros(spec.num_params, cfg.aggregation.beta, cfg.aggregation.no_accumulation)
        nodes.append(NodeState(i, params, nncore.OptimizerState.zeros(spec.num_params, tr.lr, tr.momentum), h,
                               part, train_x[part.indices], train.labels[part.indices], node_seed(seed, i)))
    if isinstance(trace_indices, (int, np.integer)):
        trace_indices = np.sort(np.random.default_rng(seed).choice(spec.num_params, int(trace_indices),
                                                                   replace=False))
    sim = Simulation(cfg, spec, topo, train, test, as_model_input(test.features, spec), nodes,
                     trace_node=trace_node,
                     trace_indices=None if trace_indices is None else np.asarray(trace_indices))
    return sim


def advance_round_zero(sim: Simulation) -> None:
    """Round 0: every node trains once and stages its first bundle."""
    cfg, spec, tr = sim.config, sim.spec, sim.config.training

    send_h = _exchanges_hessian(cfg, 1)

    def round_zero(node):
        node = local_train(node, spec, tr.epochs, tr.batch_size, node_rng(node.rng_seed, 0, _TRAIN_STREAM))
        if send_h:
            node = _refresh_hessian(sim, node, 0)
        return node

    sim.nodes = _pool_map(cfg.run.workers, round_zero, sim.nodes)
    sim.bundles = [_stage(n, send_h) for n in sim.nodes]
    sim.hessian_norms.append([n.last_hess_norm for n in sim.nodes])


# --------------------------------------------------------------------------
# rounds


def evaluate(nodes: Sequence[NodeState], spec: nncore.ModelSpec, test_x: np.ndarray, test_y: np.ndarray):
    """Accuracy of every node on the shared test set; returns (mean, std, per-node)."""
    accs = np.array([nncore.accuracy(n.params, spec, test_x, test_y) for n in nodes])
    return float(accs.mean()), float(accs.std()), accs


def run_round(sim: Simulation, t: int) -> RoundMetrics:
    """Advance the simulation by one communication round (mutates ``sim``)."""
    cfg = sim.config
    if t != sim.round + 1:
        raise ValueError(f"expected round {sim.round + 1}, got {t}")
    use_h = _exchanges_hessian(cfg, t)
    strategy = "dechw" if use_h else "dechetero"
    send_h = _exchanges_hessian(cfg, t + 1)
    tr = cfg.training
    previous = sim.bundles
    m = sim.m

    def step(node: NodeState):
        i = node.node_id
        group = [previous[i]] + [previous[j] for j in sim.topology.sorted_neighbors(i)]
        keep = sim.trace_node == i
        outcome = aggregation.aggregate(strategy, group, keep_weights=keep)
        node = replace(node, params=outcome.params, fallback_count=outcome.fallback_count,
                       last_hess_norm=math.nan)
        node = local_train(node, sim.spec, tr.epochs, tr.batch_size, node_rng(node.rng_seed, t, _TRAIN_STREAM))
        if send_h:
            node = _refresh_hessian(sim, node, t)
        traced = outcome.weights[:, sim.trace_indices] if keep and sim.trace_indices is not None else None
        return node, traced

    results = _pool_map(cfg.run.workers, step, sim.nodes)
    sim.nodes = [node for node, _ in results]
    for node, traced in results:
        if traced is not None:
            sim.weight_trace.append(traced)
    sim.bundles = [_stage(n, send_h) for n in sim.nodes]
    sim.round = t

    per_message = m * (2 if use_h else 1)
    directed = 2 * sim.topology.num_edges
    sim.scalars_sent += directed * per_message
    sim.scalars_per_sender += per_message

    norms = [n.last_hess_norm for n in sim.nodes]
    sim.hessian_norms.append(norms)
    losses = [n.last_loss for n in sim.nodes if not math.isnan(n.last_loss)]
    finite_norms = [x for x in norms if not math.isnan(x)]
    evaluate_now = t % cfg.run.eval_every == 0 or t == cfg.run.rounds
    if evaluate_now:
        mean_acc, std_acc, accs = evaluate(sim.nodes, sim.spec, sim.test_x, sim.test.labels)
    else:
        mean_acc, std_acc, accs = math.nan, math.nan, np.array([])
    return RoundMetrics(
        round=t,
        mean_acc=mean_acc,
        std_acc=std_acc,
        mean_train_loss=float(np.mean(losses)) if losses else math.nan,
        mean_hess_norm=float(np.mean(finite_norms)) if finite_norms else math.nan,
        scalars_sent_cum=sim.scalars_sent,
        fallback_frac=float(np.mean([n.fallback_count for n in sim.nodes])) / m,
        scalars_per_sender_cum=sim.scalars_per_sender,
        node_acc=tuple(float(a) for a in accs),
    )


def run_experiment(cfg: ExperimentConfig, metrics_path=None, sim: Optional[Simulation] = None,
                   on_round: Optional[Callable] = None) -> List[RoundMetrics]:
    """Initialise and run all rounds; evaluated rounds are returned and, if a path is given, streamed to CSV."""
    sim = sim if sim is not None else initialize(cfg)
    rows = []
    fh = writer = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)
    try:
        for t in range(1, cfg.run.rounds + 1):
            metrics = run_round(sim, t)
            if on_round is not None:
                on_round(sim, metrics)
            if math.isnan(metrics.mean_acc):
                continue
            rows.append(metrics)
            if writer is not None:
                writer.writerow(metrics.csv_row())
                fh.flush()
    finally:
        if fh is not None:
            fh.close()
    return rows


def read_metrics_csv(path) -> List[dict]:
    """Strict reader for the metrics CSV; raises ValueError on any schema drift."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != METRICS_COLUMNS:
            raise ValueError(f"{path}: unexpected header {header}")
        rows = []
        for line in reader:
            if len(line) != len(METRICS_COLUMNS):
                raise ValueError(f"{path}: row has {len(line)} fields")
            row = {}
            for key, text in zip(METRICS_COLUMNS, line):
                row[key] = int(text) if key in ("round", "scalars_sent_cum") else float(text)
            rows.append(row)
    return rows


# --------------------------------------------------------------------------
# analysis


NEVER = None


def rounds_to_threshold(series, thresholds, reference: Optional[float] = None) -> list:
    """First round whose mean accuracy reaches each threshold (``None`` if never).

    ``series`` is a list of :class:`RoundMetrics` (their ``round`` field is
    reported) or of plain accuracies (reported 1-based).  With ``reference``
    the thresholds are fractions of it.
    """
    points = []
    for k, item in enumerate(series):
        if isinstance(item, RoundMetrics):
            points.append((item.round, item.mean_acc))
        else:
            points.append((k + 1, float(item)))
    out = []
    for th in thresholds:
        target = th * reference if reference is not None else th
        out.append(next((r for r, acc in points if acc >= target), NEVER))
    return out


def last_k_accuracy(series: Sequence[RoundMetrics], k: int = 10) -> tuple:
    """Mean and std of mean accuracy over the last ``k`` evaluated rounds."""
    tail = np.array([m.mean_acc for m in series[-k:]])
    return float(tail.mean()), float(tail.std())


def communication_totals(strategy: str, rounds: int, theta: float, m: int, directed_edges: int = 1) -> dict:
    """Closed-form scalars exchanged over ``rounds`` rounds.

    ``per_sender`` counts one outgoing message per round (the
    ``T x modelSize`` normalisation); ``network`` multiplies by the number of
    directed edges, which is what the engine's ``scalars_sent_cum`` counts.
    """
    hess_rounds = min(theta, rounds) if strategy == "dechw" else 0
    per_sender = int(rounds * m + hess_rounds * m)
    return {"per_sender": per_sender, "network": per_sender * directed_edges}


def worker_count(default: int = 1) -> int:
    """Worker count from ``DECHW_WORKERS`` if set."""
    value = os.environ.get("DECHW_WORKERS")
    return int(value) if value else default
