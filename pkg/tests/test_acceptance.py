"""Acceptance suite: one test per criterion, each at its stated tolerance and time budget."""

import dataclasses
import json
import math
import sys
import time

import numpy as np
import pytest
from scipy.spatial.distance import jensenshannon
from scipy.stats import entropy, spearmanr

from latgraph import dqn, gcn, harness
from latgraph.cli import EXIT_OK, main
from latgraph.dqn import DqnConfig
from latgraph.graph import UNOBSERVED, renormalize
from latgraph.harness import ExperimentConfig, SlotLoop, run_slot
from latgraph.stats import EmpiricalPdf, js_divergence, kl_divergence
from latgraph.tracegen import WorldConfig

from oracles import finite_difference_grads, max_relative_error, random_gcn_instance


def static_world_config(**kw):
    """150-vertex world at spatial correlation 0.8 with 20% of vertices labelled."""
    return ExperimentConfig(world=WorldConfig(10, 15, spatial_correlation=0.8), gcn=gcn.GcnConfig(), **kw)


# -- 1. divergences ----------------------------------------------------------------

@pytest.mark.criterion(1)
def test_divergence_suite(detail):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    edges = np.arange(65, dtype=float)
    sym = top = self_js = 0.0
    lo = math.inf
    for _ in range(1000):
        # sparse-ish histograms so zero bins and disjoint supports both occur
        a = rng.dirichlet(np.full(64, 0.3)) * (rng.random(64) < 0.7)
        b = rng.dirichlet(np.full(64, 0.3)) * (rng.random(64) < 0.7)
        a[rng.integers(64)] += 1e-3
        b[rng.integers(64)] += 1e-3
        p, q = EmpiricalPdf(edges, a / a.sum()), EmpiricalPdf(edges, b / b.sum())
        js = js_divergence(p, q)
        sym = max(sym, abs(js - js_divergence(q, p)))
        top, lo = max(top, js), min(lo, js)
        self_js = max(self_js, js_divergence(p, p))
    assert sym < 1e-12
    assert lo >= 0.0 and top <= math.log(2.0) + 1e-12
    assert self_js < 1e-12

    two = np.array([0.0, 1.0, 2.0])
    pdf = lambda x: EmpiricalPdf(two, np.array(x, dtype=float))  # noqa: E731
    # independent oracle: scipy's JS distance squared (natural log) and scipy's relative entropy
    cases = [
        (js_divergence(pdf([0.5, 0.5]), pdf([0.5, 0.5])), 0.0),
        (js_divergence(pdf([1.0, 0.0]), pdf([0.0, 1.0])), float(jensenshannon([1, 0], [0, 1])) ** 2),
        (js_divergence(pdf([0.5, 0.5]), pdf([0.25, 0.75])), float(jensenshannon([0.5, 0.5], [0.25, 0.75])) ** 2),
        (kl_divergence(pdf([1.0, 0.0]), pdf([0.5, 0.5])), float(entropy([1.0, 0.0], [0.5, 0.5]))),
    ]
    worst = max(abs(got - want) for got, want in cases)
    assert worst <= 1e-9
    assert cases[1][0] == pytest.approx(math.log(2.0), abs=1e-9)
    assert abs(cases[2][0] - 0.0338) < 5e-5
    assert kl_divergence(pdf([0.5, 0.5]), pdf([1.0, 0.0])) == math.inf
    elapsed = time.perf_counter() - t0
    detail(f"symmetry err {sym:.1e}, max JS {top:.4f}, oracle err {worst:.1e}, {elapsed:.2f}s")
    assert elapsed < 5.0


# -- 2. gradients ------------------------------------------------------------------

@pytest.mark.criterion(2)
def test_gradient_correctness(detail):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        model, prop, x, labels, mask = random_gcn_instance(np.random.default_rng(1000 + seed), n=6, f=4, h=5, k=3)
        analytic = gcn.backward(gcn.forward(model, prop, x), labels, mask, prop, model)
        numeric = finite_difference_grads(model, prop, x, labels, mask, step=1e-4)
        worst = max(worst, max_relative_error(analytic, numeric))
    elapsed = time.perf_counter() - t0
    detail(f"max relative error {worst:.2e} over 20 instances, {elapsed:.2f}s")
    assert worst < 1e-4
    assert elapsed < 30.0


# -- 3. renormalisation ------------------------------------------------------------

@pytest.mark.criterion(3)
def test_renormalization_oracle(detail):
    errs = [
        np.abs(renormalize(np.zeros((1, 1))) - np.array([[1.0]])).max(),
        np.abs(renormalize(np.array([[0, 1], [1, 0]])) - np.full((2, 2), 0.5)).max(),
    ]
    cycle = np.array([[0, 1, 0, 1], [1, 0, 1, 0], [0, 1, 0, 1], [1, 0, 1, 0]])
    errs.append(np.abs(renormalize(cycle) - (cycle + np.eye(4)) / 3.0).max())
    row_err = 0.0
    for n in (3, 6, 10):
        ring = np.zeros((n, n))
        for i in range(n):
            ring[i, (i + 1) % n] = ring[(i + 1) % n, i] = 1
        row_err = max(row_err, np.abs(renormalize(ring).sum(axis=1) - 1).max())
    complete = np.ones((5, 5)) - np.eye(5)
    row_err = max(row_err, np.abs(renormalize(complete).sum(axis=1) - 1).max())
    detail(f"hand-value err {max(errs):.1e}, regular row-sum err {row_err:.1e}")
    assert max(errs) <= 1e-12
    assert row_err <= 1e-12


# -- 4. semi-supervised reconstruction ---------------------------------------------------

@pytest.mark.criterion(4)
def test_semi_supervised_reconstruction(detail):
    t0 = time.perf_counter()
    cfg = static_world_config()
    rows = []
    for seed in range(3):
        task = harness.static_task(cfg, seed)
        assert task.graph.masks["train"].sum() == 30
        _, acc = harness.train_static(task, dataclasses.replace(cfg.gcn, seed=seed), cfg.world.k_classes)
        rows.append((acc, harness.majority_baseline(task)))
    elapsed = time.perf_counter() - t0
    detail(", ".join(f"acc {a:.3f} vs majority {m:.3f}" for a, m in rows) + f", {elapsed:.1f}s")
    assert all(a >= m + 0.20 and a >= 0.70 for a, m in rows)
    assert elapsed < 120.0


# -- 5. NGD against the adaptive baseline -------------------------------------------------

@pytest.mark.criterion(5)
def test_ngd_validation_loss_drops_faster(detail):
    t0 = time.perf_counter()
    cfg = static_world_config()
    out = harness.run_optimizer_comparison(cfg, list(range(10)))
    ngd = out["summary"]["ngd"]["epochs_to_90pct"]
    adam = out["summary"]["adam"]["epochs_to_90pct"]
    inf = math.inf
    wins = sum((ngd[s] if ngd[s] is not None else inf) < (adam[s] if adam[s] is not None else inf)
               for s in range(10))
    elapsed = time.perf_counter() - t0
    detail(f"NGD first in {wins}/10 runs; epochs ngd={list(ngd.values())} adam={list(adam.values())}, "
           f"{elapsed:.1f}s")
    assert wins >= 7
    assert elapsed < 600.0


# -- 6. feature-dimension trend -------------------------------------------------------

@pytest.mark.criterion(6)
def test_feature_dimension_trend(detail):
    cfg = static_world_config(seeds=[0, 1, 2])
    dims = [5, 10, 20, 30]
    table = harness.run_feature_sweep(cfg, dims)
    means = [table[f]["mean_accuracy"] for f in dims]
    rho = spearmanr(dims, means)[0]
    detail(f"mean accuracy {[round(m, 3) for m in means]}, Spearman {rho:.2f}")
    assert rho >= 0.8


# -- 7. DQN against random selection ------------------------------------------------------

@pytest.mark.slow
@pytest.mark.criterion(7)
def test_dqn_beats_random_selection(detail):
    t0 = time.perf_counter()
    cfg = ExperimentConfig(world=WorldConfig(8, 8), selector=DqnConfig(m_select=6), n_slots=300,
                           seeds=[0, 1, 2], policies=["dqn", "random"])
    reports, _ = harness.run_experiment(cfg)
    diffs = []
    for seed in cfg.seeds:
        tail = {p: np.mean([r.reconstruction_accuracy for r in reports
                            if r.seed == seed and r.policy == p and r.slot >= 250]) for p in cfg.policies}
        diffs.append(tail["dqn"] - tail["random"])
    elapsed = time.perf_counter() - t0
    detail(f"final-50 mean reward dqn - random per seed {[round(float(d), 3) for d in diffs]}, {elapsed:.0f}s")
    assert elapsed < 900.0
    assert all(d > 0 for d in diffs)


# -- 8. MDP invariants under fuzzing ----------------------------------------------------

@pytest.mark.criterion(8)
def test_mdp_invariants_fuzz(detail):
    rng = np.random.default_rng(8)
    n, k = 12, 4
    model = dqn.TransitionModel(rng.dirichlet(np.full(k, 0.5), size=(n, k)))
    state = dqn.SlotState(rng.dirichlet(np.ones(k), size=n).T)
    agent = dqn.DqnAgent(n, k, DqnConfig(m_select=3, replay_capacity=64, batch_size=8, hidden=(16, 8)))
    col_err = 0.0
    peak_buffer = 0
    for t in range(10_000):
        m = int(rng.integers(1, n))
        action = tuple(sorted(int(v) for v in rng.choice(n, size=m, replace=False)))
        observed = {v: int(rng.integers(k)) for v in action}
        nxt = dqn.transition(state, action, observed, model)
        col_err = max(col_err, float(np.abs(nxt.probs.sum(axis=0) - 1).max()))
        assert (nxt.probs >= 0).all()

        truth = rng.integers(k, size=n)
        predicted = rng.integers(k, size=n)
        r = dqn.reward(predicted, truth, action)
        assert 0.0 <= r <= 1.0
        scrambled = predicted.copy()
        scrambled[list(action)] = rng.integers(k, size=m)
        assert dqn.reward(scrambled, truth, action) == r

        if m == agent.m:
            agent.observe(dqn.Experience(state, action, r, nxt))
            if t % 50 == 0:
                agent.learn()
        peak_buffer = max(peak_buffer, len(agent.replay))
        assert len(agent.replay) <= agent.replay.capacity
        state = nxt
    detail(f"max column-sum error {col_err:.1e}, peak replay {peak_buffer}/{agent.replay.capacity}")
    assert col_err <= 1e-6


# -- 9. determinism of simulate ------------------------------------------------------

@pytest.mark.criterion(9)
def test_simulate_is_byte_identical_across_runs(tmp_path, detail):
    exp = {"world": {"grid": {"rows": 5, "cols": 5}, "seed": 3}, "selector": {"m_select": 4},
           "n_slots": 40, "history_slots": 100, "seeds": [0, 1], "policies": ["dqn", "random"]}
    cfg_path = tmp_path / "exp.json"
    cfg_path.write_text(json.dumps(exp))
    assert main(["simulate", "-c", str(cfg_path), "-o", str(tmp_path / "first")]) == EXIT_OK
    manifest = tmp_path / "first" / "manifest.json"
    runs = []
    for name in ("a", "b"):
        assert main(["simulate", "-c", str(manifest), "-o", str(tmp_path / name)]) == EXIT_OK
        runs.append((tmp_path / name / "reports.csv").read_bytes())
    first = (tmp_path / "first" / "reports.csv").read_bytes()
    n_rows = len(first.splitlines()) - 1
    detail(f"{n_rows} report rows, identical={runs[0] == runs[1] == first}")
    assert runs[0] == runs[1] == first


# -- 10. information hygiene ---------------------------------------------------------

class AuditedWorld:
    """Forwards to a world and records which function asked for labels or samples."""

    def __init__(self, world):
        self._world = world
        self.reads: list[tuple[str, str]] = []

    def __getattr__(self, name):
        return getattr(self._world, name)

    def _caller(self):
        frame = sys._getframe(2)
        owner = frame.f_locals.get("self")
        return f"{type(owner).__name__}.{frame.f_code.co_name}" if owner is not None else frame.f_code.co_name

    def classes_at(self, slot):
        self.reads.append(("classes_at", self._caller()))
        return self._world.classes_at(slot)

    def sample_matrix(self, slot, samples_per_vertex):
        self.reads.append(("sample_matrix", self._caller()))
        return self._world.sample_matrix(slot, samples_per_vertex)

    def class_trajectory(self, n_slots):
        self.reads.append(("class_trajectory", self._caller()))
        return self._world.class_trajectory(n_slots)


@pytest.mark.criterion(10)
def test_no_unprobed_label_reaches_learners(monkeypatch, detail):
    cfg = ExperimentConfig(world=WorldConfig(5, 5, seed=1), selector=DqnConfig(m_select=4, batch_size=4),
                           n_slots=30, history_slots=50, policies=["dqn"])
    loop = SlotLoop(cfg, 0, "dqn")
    audited = AuditedWorld(loop._world)
    loop._world = audited
    loop.prober._world = audited

    seen = {"train": [], "transition": [], "observe": [], "truth": [], "reward": []}
    real_train, real_transition, real_reward = gcn.train, dqn.transition, dqn.reward
    real_truth, real_observe = loop.ground_truth, loop.agent.observe

    def spy_train(graph, prop, config, n_classes, init=None):
        seen["train"].append((graph.labels.copy(), graph.masks["train"] | graph.masks["val"]))
        return real_train(graph, prop, config, n_classes, init)

    def spy_transition(state, action, observed, model):
        seen["transition"].append((tuple(action), dict(observed)))
        return real_transition(state, action, observed, model)

    def spy_truth(world_slot):
        truth = real_truth(world_slot)
        seen["truth"].append(truth)
        return truth

    def spy_reward(predicted, truth, action):
        seen["reward"].append(truth)
        return real_reward(predicted, truth, action)

    def spy_observe(exp):
        seen["observe"].append(exp)
        return real_observe(exp)

    monkeypatch.setattr(harness.gcn, "train", spy_train)
    monkeypatch.setattr(harness.dq, "transition", spy_transition)
    monkeypatch.setattr(harness.dq, "reward", spy_reward)
    loop.ground_truth = spy_truth
    loop.agent.observe = spy_observe

    violations = []
    for t in range(cfg.n_slots):
        audited.reads.clear()
        rep = run_slot(loop, t)
        probed = np.zeros(loop.n, dtype=bool)
        probed[list(rep.action)] = True
        # every world read during the slot is the prober's reveal or the scorer's truth lookup
        for what, who in audited.reads:
            if who not in ("Prober.probe", "SlotLoop.ground_truth"):
                violations.append(f"slot {t}: {what} read by {who}")
        labels, labelled = seen["train"][-1]
        if not np.array_equal(labelled, probed) or not (labels[~probed] == UNOBSERVED).all():
            violations.append(f"slot {t}: GCN saw labels outside the probe set")
        action, observed = seen["transition"][-1]
        if set(observed) != set(rep.action) or action != rep.action:
            violations.append(f"slot {t}: selector state updated with unprobed observations")
        if seen["reward"][-1] is not seen["truth"][-1]:
            violations.append(f"slot {t}: truth consumed outside the reward")
        exp = seen["observe"][-1]
        if set(vars(exp)) != {"state", "action", "reward", "next_state"} or exp.reward != rep.reconstruction_accuracy:
            violations.append(f"slot {t}: experience carries more than the scalar reward")
        if len(loop.prober.log[-1][1]) != probed.sum():
            violations.append(f"slot {t}: prober revealed more than the probe set")

    # counterfactual: with random probing, garbage truth must not change anything the learners produce
    def predictions(truth_fn):
        lp = SlotLoop(cfg, 0, "random")
        if truth_fn is not None:
            lp.ground_truth = truth_fn
        out = []
        for t in range(10):
            run_slot(lp, t)
            out.append((lp.state.probs.copy(), [p.copy() for p in lp.model.params]))
        return out

    garbage = np.random.default_rng(99)
    clean = predictions(None)
    poisoned = predictions(lambda world_slot: garbage.integers(0, 4, size=25))
    same = all(np.array_equal(a[0], b[0]) and all(np.array_equal(x, y) for x, y in zip(a[1], b[1]))
               for a, b in zip(clean, poisoned))
    if not same:
        violations.append("learner outputs depend on ground truth")
    detail(f"{cfg.n_slots} audited slots, {len(violations)} violations")
    assert not violations, violations[:5]
