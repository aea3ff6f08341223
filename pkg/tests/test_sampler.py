import numpy as np
import pytest

from graphenergy import (
    GraphSpec,
    ProposalConfig,
    SamplerConfig,
    chain_rngs,
    init_data,
    init_model,
    init_noise,
    make_chain_state,
    make_graph,
    random_graph,
    run_batch,
    run_chain,
    run_chains_lockstep,
)
from graphenergy.proposals import MIXING, TRANSPORT
from graphenergy.data import exact_gibbs, total_variation


@pytest.fixture(scope="module")
def tiny():
    return GraphSpec(n_max=3, l_node=2, l_edge=2)


@pytest.fixture(scope="module")
def model(tiny):
    return init_model(tiny, n_layers=2, hidden=12, seed=21)


def mixing_cfg(**kw):
    pc = ProposalConfig(beta_proposal=1.0, lam_node=0.3, lam_edge=0.3).with_beta_mh(1.0)
    return SamplerConfig(proposal=pc, **kw)


def test_init_noise_degenerate_histogram(tiny):
    rng = np.random.default_rng(0)
    for _ in range(20):
        g = init_noise(tiny, {3: 1.0}, rng)
        assert g.n == 3


def test_init_noise_uniform_labels(tiny):
    rng = np.random.default_rng(1)
    draws = 10**5
    counts = np.zeros(tiny.l_node)
    for _ in range(draws // 100):
        g = init_noise(tiny, {2: 0.5, 3: 0.5}, rng)
        for i in range(g.n):
            counts[g.node_labels[i]] += 1
    total = counts.sum()
    p = 1.0 / tiny.l_node
    sigma = np.sqrt(total * p * (1 - p))
    assert abs(counts[0] - total * p) <= 3 * sigma


def test_init_noise_empty_histogram(tiny):
    with pytest.raises(ValueError):
        init_noise(tiny, {}, np.random.default_rng(0))


def test_init_data_basics(tiny):
    rng = np.random.default_rng(2)
    gs = [random_graph(tiny, 3, rng) for _ in range(3)]
    assert init_data([gs[0]], rng) == gs[0]
    counts = {i: 0 for i in range(3)}
    for _ in range(3000):
        g = init_data(gs, rng)
        counts[gs.index(g)] += 1
    for v in counts.values():
        assert abs(v - 1000) < 3 * np.sqrt(3000 * (1 / 3) * (2 / 3))
    with pytest.raises(ValueError):
        init_data([], rng)


def test_zero_steps_returns_init(model, tiny):
    rng = np.random.default_rng(3)
    g = random_graph(tiny, 3, rng)
    st = make_chain_state(g, model, MIXING, rng)
    rep = run_chain(model, st, mixing_cfg(), 0)
    assert rep.final_graphs[0] == g
    assert rep.chains[0].energies == []


def test_transport_trace_strictly_decreasing(model, tiny):
    rng = np.random.default_rng(4)
    hist = {3: 1.0}
    # an untrained model's gradients are tiny: use matching edit penalties
    pc = ProposalConfig(beta_proposal=1.0, lam_node=1e-4, lam_edge=1e-4).with_beta_mh(1.0)
    found_moves = 0
    for k in range(10):
        g = init_noise(tiny, hist, rng)
        st = make_chain_state(g, model, TRANSPORT, rng)
        cfg = SamplerConfig(proposal=pc, v_threshold=-np.inf)
        rep = run_chain(model, st, cfg, 0)
        c = rep.chains[0]
        es = [c.init_energy] + c.transport_energies
        assert all(b < a for a, b in zip(es, es[1:]))
        found_moves += len(c.transport_energies)
        assert c.switch_step is not None  # stuck eventually fires the switch
        assert rep.chains[0].final.regime == MIXING
    assert found_moves > 0


def test_switch_on_energy_threshold(model, tiny):
    rng = np.random.default_rng(5)
    g = random_graph(tiny, 3, rng)
    st = make_chain_state(g, model, TRANSPORT, rng)
    cfg = mixing_cfg(v_threshold=np.inf)  # already below target
    rep = run_chain(model, st, cfg, 2)
    assert rep.chains[0].switch_step == 0
    assert all(r == MIXING for r in rep.chains[0].regimes)


def test_chain_energy_cache_consistent(model, tiny):
    rng = np.random.default_rng(6)
    g = random_graph(tiny, 3, rng)
    st = make_chain_state(g, model, MIXING, rng)
    rep = run_chain(model, st, mixing_cfg(), 50)
    final = rep.chains[0].final
    assert final.v == pytest.approx(model.energy_of(final.graph), abs=1e-12)
    assert rep.chains[0].energies[-1] == final.v


def test_cached_and_uncached_identical(model, tiny):
    g0 = random_graph(tiny, 3, np.random.default_rng(7))
    outs = []
    for cache in (False, True):
        rng = np.random.default_rng(42)
        st = make_chain_state(g0, model, MIXING, rng)
        rep = run_chain(model, st, mixing_cfg(cache_states=cache), 300)
        outs.append(rep.chains[0])
    a, b = outs
    assert a.energies == b.energies
    assert a.accepted == b.accepted
    assert a.final.graph == b.final.graph


def test_run_batch_parallelism_bitwise(model, tiny):
    def batch(par):
        rngs = chain_rngs(99, 6)
        inits = [
            make_chain_state(random_graph(tiny, 3, r), model, MIXING, r) for r in rngs
        ]
        return run_batch(model, inits, mixing_cfg(), 60, parallelism=par)

    r1, r8 = batch(1), batch(8)
    for c1, c8 in zip(r1.chains, r8.chains):
        assert c1.energies == c8.energies
        assert c1.alphas == c8.alphas
        assert c1.final.graph == c8.final.graph
    assert r8.chains_per_sec > 0  # throughput recorded


def test_run_batch_single_equals_run_chain(model, tiny):
    rngs = chain_rngs(5, 1)
    g = random_graph(tiny, 3, np.random.default_rng(8))
    st1 = make_chain_state(g, model, MIXING, rngs[0])
    rep1 = run_chain(model, st1, mixing_cfg(), 40)
    rngs = chain_rngs(5, 1)
    st2 = make_chain_state(g, model, MIXING, rngs[0])
    rep2 = run_batch(model, [st2], mixing_cfg(), 40)
    assert rep1.chains[0].energies == rep2.chains[0].energies


def test_lockstep_deterministic_and_valid(model, tiny):
    def go():
        rngs = chain_rngs(123, 5)
        inits = [
            make_chain_state(init_noise(tiny, {3: 1.0}, r), model, TRANSPORT, r)
            for r in rngs
        ]
        cfg = mixing_cfg(v_threshold=-np.inf)
        return run_chains_lockstep(model, inits, cfg, 30)

    a, b = go(), go()
    for ca, cb in zip(a.chains, b.chains):
        assert ca.energies == cb.energies
        assert ca.final.graph == cb.final.graph
        assert ca.switch_step is not None
    # transport segment still strictly decreasing per chain
    for c in a.chains:
        es = [c.init_energy] + c.transport_energies
        assert all(x2 < x1 for x1, x2 in zip(es, es[1:]))


def test_gibbs_stationarity_short(model, tiny):
    # shorter version of the stationarity oracle: 2e5 steps, loose bound
    rng = np.random.default_rng(9)
    g = random_graph(tiny, 3, rng)
    st = make_chain_state(g, model, MIXING, rng)
    cfg = mixing_cfg(cache_states=True, track_states=True)
    rep = run_chain(model, st, cfg, 200_000)
    table = exact_gibbs(model, tiny, 1.0, n=3)
    emp = np.zeros(len(table.graphs))
    for k, v in rep.chains[0].state_counts.items():
        emp[table.index[k]] = v
    emp /= emp.sum()
    assert total_variation(emp, table.probs) < 0.05


def test_trace_csv(tmp_path, model, tiny):
    rng = np.random.default_rng(10)
    st = make_chain_state(random_graph(tiny, 3, rng), model, MIXING, rng)
    rep = run_chain(model, st, mixing_cfg(), 5)
    path = tmp_path / "trace.csv"
    rep.to_csv(path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "chain,step,regime,energy,accepted,alpha"
    assert len(lines) == 6
    first = lines[1].split(",")
    assert first[0] == "0" and first[2] == MIXING
    assert float(first[3]) == rep.chains[0].energies[0]
