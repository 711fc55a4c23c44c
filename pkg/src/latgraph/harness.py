"""Slotted reconstruction loop, static GCN tasks, sweeps and comparisons.

Per slot the policy picks probe vertices, only those vertices' samples and
labels are revealed, the GCN is trained on them (a fifth held out for early
stopping) and predicts every vertex, the reward is scored against the
world's latent classes on the unprobed vertices, and the DQN learns from the
transition. Features of unprobed vertices are the most recent samples seen
for them: the initialisation campaign or their last probe.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import dqn as dq
from . import gcn
from .errors import ConfigError
from .graph import DEFAULT_ETA, UNOBSERVED, LatencyGraph, build_features, build_graph, norm_constant, renormalize
from .stats import build_empirical_pdf, classify_service_level
from .tracegen import SimWorld, WorldConfig, generate_world

REPORT_COLUMNS = ["slot", "seed", "policy", "accuracy", "gcn_epochs", "val_loss", "wallclock_ms"]
POLICIES = ("dqn", "random")


@dataclass
class GraphConfig:
    eta: float = DEFAULT_ETA
    bin_lo: float = 0.0
    bin_hi: float = 500.0
    n_bins: int = 64
    f_dim: int = 30

    @property
    def bin_edges(self) -> np.ndarray:
        return np.linspace(self.bin_lo, self.bin_hi, self.n_bins + 1)


def slot_gcn_config(**overrides) -> gcn.GcnConfig:
    """GCN defaults for experiments: unlabeled vertices enter the NGD factors (lambda = 1).

    With only a handful of probed labels per slot, lambda = 0 leaves the
    preconditioner rank-deficient and training drifts between slots.
    """
    return gcn.GcnConfig(**{"ngd_lambda": 1.0, **overrides})


@dataclass
class ExperimentConfig:
    world: WorldConfig
    graph: GraphConfig = field(default_factory=GraphConfig)
    gcn: gcn.GcnConfig = field(default_factory=slot_gcn_config)
    selector: dq.DqnConfig = field(default_factory=dq.DqnConfig)
    n_slots: int = 200
    seeds: list[int] = field(default_factory=lambda: [0])
    policies: list[str] = field(default_factory=lambda: ["dqn"])
    samples_per_vertex: int = 30
    init_samples: int = 100
    history_slots: int = 500
    val_fraction: float = 0.2
    warm_start: bool = True
    rebuild_graph: bool = True       # refresh probed PDFs and re-prune edges every slot
    label_memory: bool = False       # train on every vertex's latest revealed label, not just this slot's probes
    label_source: str = "latent"     # probe labels: "latent" | "empirical"
    truth_source: str = "latent"     # reward truth: "latent" | "empirical"
    record_wallclock: bool = False
    train_fraction: float = 0.2      # static tasks
    static_val_fraction: float = 0.1

    def validate(self) -> None:
        self.world.validate()
        self.gcn.validate()
        self.selector.validate()
        n = self.world.n_vertices
        m = self.selector.resolve_m(n)
        if self.n_slots < 0:
            raise ConfigError("n_slots must be >= 0")
        if m < 2 and self.n_slots > 0:
            raise ConfigError("m_select must be >= 2 so a probed vertex can be held out for validation")
        if m >= n:
            raise ConfigError("m_select must be smaller than N")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        bad = [p for p in self.policies if p not in POLICIES]
        if bad or not self.policies:
            raise ConfigError(f"policies must be drawn from {POLICIES}, got {self.policies}")
        if self.graph.f_dim > self.samples_per_vertex or self.graph.f_dim > self.init_samples:
            raise ConfigError("f_dim cannot exceed samples_per_vertex or init_samples")
        if self.history_slots < 2:
            raise ConfigError("history_slots must be >= 2")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in (0, 1)")
        if self.label_source not in ("latent", "empirical") or self.truth_source not in ("latent", "empirical"):
            raise ConfigError("label_source/truth_source must be 'latent' or 'empirical'")
        if self.train_fraction <= 0 or self.static_val_fraction <= 0 \
                or self.train_fraction + self.static_val_fraction >= 1:
            raise ConfigError("static train/val fractions must be positive and leave a test set")
        if self.graph.eta < 0:
            raise ConfigError("eta must be non-negative")

    def to_dict(self) -> dict:
        sel = dataclasses.asdict(self.selector)
        sel["hidden"] = list(sel["hidden"])
        return {
            "world": self.world.to_dict(),
            "graph": dataclasses.asdict(self.graph),
            "gcn": dataclasses.asdict(self.gcn),
            "selector": sel,
            **{f.name: getattr(self, f.name) for f in dataclasses.fields(self)
               if f.name not in ("world", "graph", "gcn", "selector")},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if "world" not in d:
            raise ConfigError("experiment config needs a 'world' section")
        top = {f.name for f in dataclasses.fields(cls)} - {"world", "graph", "gcn", "selector"}
        unknown = set(d) - top - {"world", "graph", "gcn", "selector"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            sel = dict(d.get("selector", {}))
            if "hidden" in sel:
                sel["hidden"] = tuple(sel["hidden"])
            cfg = cls(
                world=WorldConfig.from_dict(d["world"]),
                graph=GraphConfig(**d.get("graph", {})),
                gcn=slot_gcn_config(**d.get("gcn", {})),
                selector=dq.DqnConfig(**sel),
                **{k: v for k, v in d.items() if k in top},
            )
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        cfg.seeds = [int(s) for s in cfg.seeds]
        cfg.policies = list(cfg.policies)
        return cfg


@dataclass
class SlotReport:
    slot: int
    seed: int
    policy: str
    action: tuple[int, ...]
    reconstruction_accuracy: float
    gcn_epochs_run: int
    val_loss: float
    wallclock_ms: int

    def row(self) -> list:
        return [self.slot, self.seed, self.policy, repr(self.reconstruction_accuracy),
                self.gcn_epochs_run, repr(self.val_loss), self.wallclock_ms]


def world_for_seed(config: ExperimentConfig, seed: int) -> SimWorld:
    return generate_world(dataclasses.replace(config.world, seed=config.world.seed + seed))


class Prober:
    """The only path from the world to the learners: reveals probed vertices only.

    Every call is logged so tests can audit what was revealed.
    """

    def __init__(self, world: SimWorld, samples_per_vertex: int, label_source: str, bin_edges):
        self._world = world
        self._spv = samples_per_vertex
        self._label_source = label_source
        self._edges = bin_edges
        self.log: list[tuple[int, tuple[int, ...]]] = []

    def probe(self, slot: int, vertices: Sequence[int]):
        vertices = tuple(int(v) for v in vertices)
        self.log.append((slot, vertices))
        samples = self._world.sample_matrix(slot, self._spv)[list(vertices)]
        if self._label_source == "latent":
            labels = self._world.classes_at(slot)[list(vertices)]
        else:
            labels = [classify_service_level(build_empirical_pdf(s, self._edges)).class_index for s in samples]
        return samples, {v: int(c) for v, c in zip(vertices, labels)}


class SlotLoop:
    """Mutable state of one (seed, policy) run of the reconstruction loop."""

    def __init__(self, config: ExperimentConfig, seed: int, policy: str):
        self.config, self.seed, self.policy = config, seed, policy
        world = world_for_seed(config, seed)
        self._world = world
        self.n, self.k = world.n_vertices, world.k_classes
        self.m = config.selector.resolve_m(self.n)
        h = config.history_slots
        self.slot_offset = h

        # Historical campaign: full label history and a dense sample set
        # collected before the first reconstruction slot.
        history = world.class_trajectory(h)
        self.transitions = dq.estimate_transition_model(history.T, self.k)
        init = world.sample_matrix(h - 1, config.init_samples)
        edges = config.graph.bin_edges
        self.norm = norm_constant(list(init))
        self.memory = init[:, : config.samples_per_vertex].copy()
        self.pdfs = [build_empirical_pdf(s, edges) for s in init]
        if config.label_source == "latent":
            self.known_labels = history[-1].astype(int).copy()
        else:
            self.known_labels = np.array([classify_service_level(build_empirical_pdf(s, edges)).class_index
                                          for s in self.memory])
        f_dim = config.graph.f_dim
        feats = build_features(list(self.memory), f_dim, self.norm)
        self.base_graph = build_graph(self.pdfs, world.adjacency, config.graph.eta, feats, norm_constant=self.norm)
        self.prop = renormalize(self.base_graph.adjacency)
        self.state = dq.initial_state(self.transitions, history[-1])

        self.prober = Prober(world, config.samples_per_vertex, config.label_source, edges)
        self.model: gcn.GcnModel | None = None
        self.rng = np.random.default_rng([seed, 20])
        self.agent = None
        if policy == "dqn":
            self.agent = dq.DqnAgent(self.n, self.k, dataclasses.replace(config.selector, seed=seed))

    def ground_truth(self, world_slot: int) -> np.ndarray:
        if self.config.truth_source == "latent":
            return self._world.classes_at(world_slot)
        samples = self._world.sample_matrix(world_slot, self.config.samples_per_vertex)
        edges = self.config.graph.bin_edges
        return np.array([classify_service_level(build_empirical_pdf(s, edges)).class_index for s in samples])

    def choose(self) -> tuple[int, ...]:
        if self.agent is not None:
            return dq.select_action(self.agent, self.state, self.agent.epsilon)
        return tuple(sorted(int(v) for v in self.rng.choice(self.n, size=self.m, replace=False)))

    def split_probed(self, action: Sequence[int]):
        """Validation is a fraction of this slot's probes; training is the rest of the known labels."""
        action = np.asarray(action)
        n_val = max(1, int(round(self.config.val_fraction * action.size)))
        val = self.rng.choice(action, size=n_val, replace=False)
        masks = {"train": np.zeros(self.n, dtype=bool), "val": np.zeros(self.n, dtype=bool)}
        masks["val"][val] = True
        if self.config.label_memory:
            masks["train"][:] = True
        else:
            masks["train"][action] = True
        masks["train"][val] = False
        return masks


def run_slot(loop: SlotLoop, slot: int) -> SlotReport:
    t0 = time.perf_counter()
    cfg = loop.config
    world_slot = loop.slot_offset + slot
    state = loop.state
    action = loop.choose()

    samples, observed = loop.prober.probe(world_slot, action)
    loop.memory[list(action)] = samples
    if cfg.rebuild_graph:
        for v, s in zip(action, samples):
            loop.pdfs[v] = build_empirical_pdf(s, cfg.graph.bin_edges)
        loop.base_graph = build_graph(loop.pdfs, loop._world.adjacency, cfg.graph.eta,
                                      loop.base_graph.features, norm_constant=loop.norm)
        loop.prop = renormalize(loop.base_graph.adjacency)
    for v, c in observed.items():
        loop.known_labels[v] = c
    if cfg.label_memory:
        labels = loop.known_labels.copy()
    else:
        labels = np.full(loop.n, UNOBSERVED)
        labels[list(action)] = loop.known_labels[list(action)]
    graph_t = loop.base_graph.with_labels(
        labels, loop.split_probed(action), build_features(list(loop.memory), cfg.graph.f_dim, loop.norm)
    )
    gcfg = dataclasses.replace(cfg.gcn, seed=loop.seed * 100_003 + slot)
    init = loop.model if cfg.warm_start else None
    result = gcn.train(graph_t, loop.prop, gcfg, loop.k, init=init)
    loop.model = result.model
    predicted = gcn.predict(result.model, loop.prop, graph_t.features).argmax(axis=1)

    acc = dq.reward(predicted, loop.ground_truth(world_slot), action)
    next_state = dq.transition(state, action, observed, loop.transitions)
    if loop.agent is not None:
        loop.agent.observe(dq.Experience(state, action, acc, next_state))
        loop.agent.learn()
    loop.state = next_state
    wall = int(round((time.perf_counter() - t0) * 1000)) if cfg.record_wallclock else 0
    return SlotReport(slot, loop.seed, loop.policy, action, acc, result.epochs_run, result.best_val_loss, wall)


def summarize(reports: Sequence[SlotReport], window: int = 50) -> dict:
    """Per-policy, per-slot mean/std/min/max across seeds plus a tail comparison."""
    out: dict = {"policies": {}, "window": window}
    by_policy: dict[str, dict[int, list[float]]] = {}
    for r in reports:
        by_policy.setdefault(r.policy, {}).setdefault(r.slot, []).append(r.reconstruction_accuracy)
    for policy, slots in by_policy.items():
        rows = []
        for slot in sorted(slots):
            v = np.asarray(slots[slot])
            rows.append({"slot": slot, "mean": float(v.mean()), "std": float(v.std()),
                         "min": float(v.min()), "max": float(v.max()), "n": int(v.size)})
        tail = [row["mean"] for row in rows[-window:]]
        out["policies"][policy] = {"per_slot": rows, "tail_mean": float(np.mean(tail)) if tail else None}
    if "dqn" in by_policy and "random" in by_policy:
        d, r = out["policies"]["dqn"]["tail_mean"], out["policies"]["random"]["tail_mean"]
        out["dqn_minus_random"] = None if d is None or r is None else d - r
    return out


def run_experiment(config: ExperimentConfig, window: int = 50) -> tuple[list[SlotReport], dict]:
    config.validate()
    reports: list[SlotReport] = []
    for seed in config.seeds:
        for policy in config.policies:
            if config.n_slots == 0:
                continue
            loop = SlotLoop(config, seed, policy)
            reports.extend(run_slot(loop, t) for t in range(config.n_slots))
    return reports, summarize(reports, window)


def write_reports_csv(path: str | Path, reports: Sequence[SlotReport]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in reports:
            w.writerow(r.row())


def write_json(path: str | Path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")


# -- static single-slot tasks ------------------------------------------------

@dataclass
class StaticTask:
    graph: LatencyGraph
    truth: np.ndarray
    prop: np.ndarray


def static_task(config: ExperimentConfig, seed: int, f_dim: int | None = None) -> StaticTask:
    """One fully sampled slot with a random train/val/test split of vertices."""
    world = world_for_seed(config, seed)
    n = world.n_vertices
    samples = world.sample_matrix(0, config.samples_per_vertex)
    f_dim = config.graph.f_dim if f_dim is None else f_dim
    if f_dim > config.samples_per_vertex:
        raise ConfigError(f"f_dim={f_dim} exceeds samples_per_vertex={config.samples_per_vertex}")
    pdfs = [build_empirical_pdf(s, config.graph.bin_edges) for s in samples]
    norm = norm_constant(list(samples))
    feats = build_features(list(samples), f_dim, norm)
    truth = world.classes_at(0)

    perm = np.random.default_rng([seed, 30]).permutation(n)
    n_train = max(1, int(round(config.train_fraction * n)))
    n_val = max(1, int(round(config.static_val_fraction * n)))
    masks = {name: np.zeros(n, dtype=bool) for name in ("train", "val", "test")}
    masks["train"][perm[:n_train]] = True
    masks["val"][perm[n_train:n_train + n_val]] = True
    masks["test"][perm[n_train + n_val:]] = True
    labels = np.where(masks["train"] | masks["val"], truth, UNOBSERVED)
    graph = build_graph(pdfs, world.adjacency, config.graph.eta, feats, labels, masks, norm)
    return StaticTask(graph, truth, renormalize(graph.adjacency))


def train_static(task: StaticTask, gcfg: gcn.GcnConfig, k: int) -> tuple[gcn.TrainResult, float]:
    result = gcn.train(task.graph, task.prop, gcfg, k)
    probs = gcn.predict(result.model, task.prop, task.graph.features)
    return result, gcn.accuracy(probs, task.truth, task.graph.masks["test"])


def majority_baseline(task: StaticTask) -> float:
    test = task.truth[task.graph.masks["test"]]
    return float(np.bincount(test).max() / test.size)


def run_feature_sweep(config: ExperimentConfig, f_dims: Sequence[int]) -> dict[int, dict]:
    config.validate()
    f_dims = [int(f) for f in f_dims]
    if not f_dims:
        raise ConfigError("f_dims must not be empty")
    if len(set(f_dims)) != len(f_dims):
        raise ConfigError(f"duplicate f_dims: {f_dims}")
    for f in f_dims:
        if not 1 <= f <= config.samples_per_vertex:
            raise ConfigError(f"f_dim={f} infeasible with samples_per_vertex={config.samples_per_vertex}")
    table = {}
    for f in f_dims:
        accs = []
        for seed in config.seeds:
            task = static_task(config, seed, f)
            _, acc = train_static(task, dataclasses.replace(config.gcn, seed=seed), config.world.k_classes)
            accs.append(acc)
        table[f] = {"mean_accuracy": float(np.mean(accs)), "per_seed": accs}
    return table


def first_epoch_below(history: Sequence[gcn.EpochRecord], threshold: float) -> int | None:
    return next((r.epoch for r in history if r.val_loss < threshold), None)


def run_optimizer_comparison(config: ExperimentConfig, seeds: Sequence[int],
                             optimizers: Sequence[str] = ("adam", "ngd")) -> dict:
    """Train both optimizers from identical initialisations on each seed's static task.

    Curves are aligned to the longest run by carrying each run's last value
    forward past its early stop.
    """
    config.validate()
    if len(seeds) < 2:
        raise ConfigError("optimizer comparison needs at least 2 seeds")
    runs: dict[str, list[dict]] = {o: [] for o in optimizers}
    for seed in seeds:
        task = static_task(config, seed)
        for opt in optimizers:
            gcfg = dataclasses.replace(config.gcn, optimizer=opt, seed=seed)
            result, acc = train_static(task, gcfg, config.world.k_classes)
            runs[opt].append({
                "seed": int(seed),
                "initial_val_loss": result.initial_val_loss,
                "history": result.history,
                "test_accuracy": acc,
                "epochs_to_90pct": first_epoch_below(result.history, 0.9 * result.initial_val_loss),
            })
    length = max((len(r["history"]) for rs in runs.values() for r in rs), default=0)
    curves = {}
    for opt, rs in runs.items():
        mat = np.full((len(rs), length), np.nan)
        for i, r in enumerate(rs):
            vals = [h.val_loss for h in r["history"]]
            if vals:
                mat[i, : len(vals)] = vals
                mat[i, len(vals):] = vals[-1]
        curves[opt] = {
            "epoch": list(range(1, length + 1)),
            "mean": np.nanmean(mat, axis=0).tolist() if length else [],
            "min": np.nanmin(mat, axis=0).tolist() if length else [],
            "max": np.nanmax(mat, axis=0).tolist() if length else [],
        }
    summary = {
        opt: {
            "test_accuracy": {r["seed"]: r["test_accuracy"] for r in rs},
            "epochs_to_90pct": {r["seed"]: r["epochs_to_90pct"] for r in rs},
        }
        for opt, rs in runs.items()
    }
    return {"runs": runs, "curves": curves, "summary": summary}
