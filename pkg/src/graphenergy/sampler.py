"""Chain orchestration: noise/data initialization, the greedy transport
phase, the energy-triggered switch, and Metropolis mixing, with per-chain
RNG streams and trace recording.

Two drivers share the same per-chain transition math: ``run_chain`` (and its
thread-parallel wrapper ``run_batch``) evaluates the energy one state at a
time, which makes results bitwise independent of the parallelism degree;
``run_chains_lockstep`` advances many chains in rounds with batched energy
evaluations and is the throughput path used by training.
"""

from __future__ import annotations

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .energy import EnergyGradient
from .graphs import Graph, GraphSpec, apply_edits, embed, random_graph
from .proposals import (
    MIXING,
    TRANSPORT,
    ProposalConfig,
    StageTables,
    anneal_beta,
    greedy_edits,
    mh_accept,
    mixing_logits,
    regime_switch,
    sample_proposal,
)


@dataclass
class SamplerConfig:
    proposal: ProposalConfig = field(default_factory=ProposalConfig.fixed_defaults)
    v_threshold: float = -np.inf  # transport -> mixing switch level
    transport_cap: int = 2000  # hard bound on transport jumps
    cache_states: bool = False  # memoize (V, grad, tables) per visited state
    track_states: bool = False  # count visited states during mixing


@dataclass
class ChainState:
    graph: Graph
    v: float
    grad: EnergyGradient | None
    regime: str
    step: int
    rng: np.random.Generator
    switch_step: int | None = None
    stuck: bool = False


@dataclass
class ChainResult:
    final: ChainState
    init_energy: float
    steps: list[int]
    regimes: list[str]
    energies: list[float]
    accepted: list[bool]
    alphas: list[float]
    switch_step: int | None
    state_counts: dict[bytes, int] | None = None

    @property
    def transport_energies(self) -> list[float]:
        return [e for e, r in zip(self.energies, self.regimes) if r == TRANSPORT]

    @property
    def mixing_acceptance(self) -> float:
        acc = [a for a, r in zip(self.accepted, self.regimes) if r == MIXING]
        return float(np.mean(acc)) if acc else float("nan")


@dataclass
class SamplerReport:
    chains: list[ChainResult]
    wall_time: float

    @property
    def final_graphs(self) -> list[Graph]:
        return [c.final.graph for c in self.chains]

    @property
    def chains_per_sec(self) -> float:
        return len(self.chains) / self.wall_time if self.wall_time > 0 else float("inf")

    @property
    def mean_mixing_acceptance(self) -> float:
        vals = [c.mixing_acceptance for c in self.chains]
        vals = [v for v in vals if not np.isnan(v)]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def switch_steps(self) -> list[int | None]:
        return [c.switch_step for c in self.chains]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["chain", "step", "regime", "energy", "accepted", "alpha"])
            for ci, c in enumerate(self.chains):
                for row in zip(c.steps, c.regimes, c.energies, c.accepted, c.alphas):
                    w.writerow([ci, row[0], row[1], repr(row[2]), int(row[3]), repr(row[4])])


def chain_rngs(seed: int, count: int) -> list[np.random.Generator]:
    """Independent per-chain streams spawned from one seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(count)]


def init_noise(spec: GraphSpec, node_count_histogram: dict[int, float], rng: np.random.Generator) -> Graph:
    """Node count from the empirical histogram, labels uniform over classes."""
    if not node_count_histogram:
        raise ValueError("empty node-count histogram")
    ns = sorted(node_count_histogram)
    weights = np.array([node_count_histogram[k] for k in ns], dtype=np.float64)
    if weights.sum() <= 0:
        raise ValueError("histogram weights must have positive mass")
    n = int(rng.choice(ns, p=weights / weights.sum()))
    return random_graph(spec, n, rng)


def init_data(dataset, rng: np.random.Generator) -> Graph:
    """Uniform draw from a stored graph collection."""
    graphs = dataset.graphs if hasattr(dataset, "graphs") else dataset
    if len(graphs) == 0:
        raise ValueError("empty dataset")
    return graphs[int(rng.integers(0, len(graphs)))]


def make_chain_state(graph: Graph, model, regime: str, rng: np.random.Generator) -> ChainState:
    g = model.grad_input(embed(graph), graph.n)
    return ChainState(graph, g.value, g, regime, 0, rng)


class _StateCache:
    """Optional per-run memo of (V, grad) and proposal tables by state."""

    def __init__(self, model, cfg: SamplerConfig):
        self.model = model
        self.enabled = cfg.cache_states
        self.cfg = cfg
        self.evals: dict[bytes, EnergyGradient] = {}
        self.tables: dict[bytes, StageTables] = {}
        self.intern: dict | None = {} if cfg.cache_states else None

    def eval(self, g: Graph) -> EnergyGradient:
        if not self.enabled:
            return self.model.grad_input(embed(g), g.n)
        key = g.key()
        hit = self.evals.get(key)
        if hit is None:
            hit = self.model.grad_input(embed(g), g.n)
            self.evals[key] = hit
        return hit

    def stage_tables(self, g: Graph, grad: EnergyGradient) -> StageTables:
        if not self.enabled:
            return StageTables(mixing_logits(g, grad, self.cfg.proposal), self.cfg.proposal)
        key = g.key()
        hit = self.tables.get(key)
        if hit is None:
            hit = StageTables(mixing_logits(g, grad, self.cfg.proposal), self.cfg.proposal)
            self.tables[key] = hit
        return hit


def _transport_phase(model, state: ChainState, cfg: SamplerConfig, res: ChainResult) -> None:
    """Greedy descent on the exact energy until the switch condition fires.
    Each applied edit set must strictly lower the re-evaluated energy; a
    non-improving edit marks the chain stuck."""
    jumps = 0
    while state.regime == TRANSPORT:
        if regime_switch(state.v, cfg.v_threshold, state.stuck) == MIXING or jumps >= cfg.transport_cap:
            state.regime = MIXING
            state.switch_step = state.step
            res.switch_step = state.step
            return
        p = cfg.proposal
        edits = greedy_edits(state.graph, state.grad, p.lam_node, p.lam_edge, p.n_edits)
        if edits is None:
            state.stuck = True
            continue
        y = apply_edits(state.graph, edits)
        gy = model.grad_input(embed(y), y.n)
        if gy.value < state.v:
            state.graph, state.v, state.grad = y, gy.value, gy
            state.step += 1
            jumps += 1
            res.steps.append(state.step)
            res.regimes.append(TRANSPORT)
            res.energies.append(state.v)
            res.accepted.append(True)
            res.alphas.append(1.0)
        else:
            state.stuck = True


def _mixing_step(
    model, state: ChainState, cfg: SamplerConfig, cache: _StateCache, s: int
) -> tuple[bool, float]:
    """One proposal + MH decision; updates state in place."""
    p = cfg.proposal
    beta_mh = anneal_beta(s, p)
    tables = cache.stage_tables(state.graph, state.grad)
    out = sample_proposal(state.graph, tables, p, state.rng, intern=cache.intern)
    if out.stayed:
        state.step += 1
        return True, 1.0
    gy = cache.eval(out.graph)
    tables_y = cache.stage_tables(out.graph, gy)
    logq_rev = tables_y.outcome_log_prob_key(tables.cur_classes, tables.cur_key)
    ok, alpha = mh_accept(
        state.graph, out.graph, state.v, gy.value, out.log_q_forward, logq_rev,
        beta_mh, state.rng,
    )
    if ok:
        state.graph, state.v, state.grad = out.graph, gy.value, gy
    state.step += 1
    return ok, alpha


def run_chain(model, init: ChainState, cfg: SamplerConfig, steps: int) -> SamplerReport:
    """Transport (if the chain starts in that regime) followed by ``steps``
    mixing transitions.  The model is treated as frozen."""
    t0 = time.perf_counter()
    state = init
    res = ChainResult(
        final=state,
        init_energy=state.v,
        steps=[],
        regimes=[],
        energies=[],
        accepted=[],
        alphas=[],
        switch_step=state.switch_step,
        state_counts={} if cfg.track_states else None,
    )
    cache = _StateCache(model, cfg)
    if state.regime == TRANSPORT:
        _transport_phase(model, state, cfg, res)
    for s in range(steps):
        ok, alpha = _mixing_step(model, state, cfg, cache, s)
        res.steps.append(state.step)
        res.regimes.append(MIXING)
        res.energies.append(state.v)
        res.accepted.append(ok)
        res.alphas.append(alpha)
        if res.state_counts is not None:
            key = state.graph.key()
            res.state_counts[key] = res.state_counts.get(key, 0) + 1
    res.final = state
    return SamplerReport([res], time.perf_counter() - t0)


def run_batch(
    model, inits: list[ChainState], cfg: SamplerConfig, steps: int, parallelism: int = 1
) -> SamplerReport:
    """Independent chains; results are bitwise identical for any parallelism
    because every chain owns its RNG stream and evaluates states one at a
    time."""
    t0 = time.perf_counter()
    if parallelism <= 1:
        parts = [run_chain(model, st, cfg, steps) for st in inits]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            parts = list(pool.map(lambda st: run_chain(model, st, cfg, steps), inits))
    chains = [p.chains[0] for p in parts]
    return SamplerReport(chains, time.perf_counter() - t0)


# ---- lockstep driver (batched energy evaluations) --------------------------


def _batched_eval(model, graphs: list[Graph]) -> list[EnergyGradient]:
    embs = np.stack([embed(g) for g in graphs])
    ns = np.array([g.n for g in graphs], dtype=np.int64)
    vs, grads = model.batch_value_grad(embs, ns)
    spec = graphs[0].spec
    return [EnergyGradient(float(v), gr, spec) for v, gr in zip(vs, grads)]


def run_chains_lockstep(
    model, inits: list[ChainState], cfg: SamplerConfig, steps: int
) -> SamplerReport:
    """Advance all chains in rounds, batching the energy evaluations.  Same
    per-chain math as run_chain; the only difference is evaluation batching,
    so traces are deterministic given seeds but may differ from the
    one-state-at-a-time driver in the last float ulp."""
    t0 = time.perf_counter()
    states = inits
    results = [
        ChainResult(
            final=st,
            init_energy=st.v,
            steps=[],
            regimes=[],
            energies=[],
            accepted=[],
            alphas=[],
            switch_step=st.switch_step,
            state_counts={} if cfg.track_states else None,
        )
        for st in states
    ]
    p = cfg.proposal

    # transport until every chain has switched
    active = [i for i, st in enumerate(states) if st.regime == TRANSPORT]
    jumps = {i: 0 for i in active}
    while active:
        switched = []
        for i in active:
            st = states[i]
            if (
                regime_switch(st.v, cfg.v_threshold, st.stuck) == MIXING
                or jumps[i] >= cfg.transport_cap
            ):
                st.regime = MIXING
                st.switch_step = st.step
                results[i].switch_step = st.step
                switched.append(i)
        active = [i for i in active if i not in switched]
        if not active:
            break
        candidates: dict[int, Graph] = {}
        for i in active:
            st = states[i]
            edits = greedy_edits(st.graph, st.grad, p.lam_node, p.lam_edge, p.n_edits)
            if edits is None:
                st.stuck = True
            else:
                candidates[i] = apply_edits(st.graph, edits)
        if candidates:
            idx = sorted(candidates)
            evals = _batched_eval(model, [candidates[i] for i in idx])
            for i, gy in zip(idx, evals):
                st = states[i]
                if gy.value < st.v:
                    st.graph, st.v, st.grad = candidates[i], gy.value, gy
                    st.step += 1
                    jumps[i] += 1
                    results[i].steps.append(st.step)
                    results[i].regimes.append(TRANSPORT)
                    results[i].energies.append(st.v)
                    results[i].accepted.append(True)
                    results[i].alphas.append(1.0)
                else:
                    st.stuck = True

    # mixing in unison
    for s in range(steps):
        beta_mh = anneal_beta(s, p)
        tables = [
            StageTables(mixing_logits(st.graph, st.grad, p), p) for st in states
        ]
        outs = [
            sample_proposal(st.graph, tb, p, st.rng)
            for st, tb in zip(states, tables)
        ]
        moved = [i for i, o in enumerate(outs) if not o.stayed]
        evals: dict[int, EnergyGradient] = {}
        if moved:
            got = _batched_eval(model, [outs[i].graph for i in moved])
            evals = dict(zip(moved, got))
        for i, st in enumerate(states):
            if outs[i].stayed:
                ok, alpha = True, 1.0
            else:
                gy = evals[i]
                tables_y = StageTables(mixing_logits(outs[i].graph, gy, p), p)
                logq_rev = tables_y.outcome_log_prob_key(
                    tables[i].cur_classes, tables[i].cur_key
                )
                ok, alpha = mh_accept(
                    st.graph, outs[i].graph, st.v, gy.value,
                    outs[i].log_q_forward, logq_rev, beta_mh, st.rng,
                )
                if ok:
                    st.graph, st.v, st.grad = outs[i].graph, gy.value, gy
            st.step += 1
            results[i].steps.append(st.step)
            results[i].regimes.append(MIXING)
            results[i].energies.append(st.v)
            results[i].accepted.append(ok)
            results[i].alphas.append(alpha)
            if results[i].state_counts is not None:
                key = st.graph.key()
                results[i].state_counts[key] = results[i].state_counts.get(key, 0) + 1
    for st, res in zip(states, results):
        res.final = st
    return SamplerReport(results, time.perf_counter() - t0)
