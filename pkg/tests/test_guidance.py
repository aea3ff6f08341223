import math

import numpy as np
import pytest
import torch

from graphenergy import (
    CompositeEnergy,
    GraphSpec,
    GuidanceConfig,
    ProposalConfig,
    PropertyRegressor,
    RegressorConfig,
    ValenceRules,
    conditional_energy,
    edge_count_property,
    embed,
    generate_toy_dataset,
    init_model,
    proposal_log_prob,
    random_graph,
    time_proxy,
    train_regressor,
)
from graphenergy.guidance import regressor_mae
from graphenergy.proposals import mixing_logits, sample_proposal


@pytest.fixture(scope="module")
def spec():
    return GraphSpec(n_max=4, l_node=2, l_edge=2)


@pytest.fixture(scope="module")
def model(spec):
    return init_model(spec, 1, 12, seed=31)


@pytest.fixture(scope="module")
def regressor(spec):
    return PropertyRegressor(spec, time_conditioned=False, n_layers=1, hidden=8, seed=3)


def test_zero_weight_is_bitwise_base_energy(model, regressor, spec):
    rng = np.random.default_rng(0)
    comp = CompositeEnergy(model, regressor, target=0.5, weight=0.0)
    for _ in range(10):
        g = random_graph(spec, 3, rng)
        e = embed(g)
        a = model.grad_input(e, 3)
        b = comp.grad_input(e, 3)
        assert a.value == b.value
        assert np.array_equal(a.grad, b.grad)


def test_exact_target_reduces_to_base(model, spec):
    class ConstRegressor:
        time_conditioned = False

        def __call__(self, emb, ns):
            return torch.full((emb.shape[0],), 0.37, dtype=torch.float64)

    rng = np.random.default_rng(1)
    g = random_graph(spec, 3, rng)
    comp = CompositeEnergy(model, ConstRegressor(), target=0.37, weight=5.0)
    v, grad = conditional_energy(model, ConstRegressor(), 0.37, 5.0, embed(g), 3)
    assert v == pytest.approx(model.energy_of(g), abs=1e-14)
    assert np.allclose(grad, model.grad_of(g).grad, atol=1e-14)


def test_composite_gradient_matches_finite_differences(model, regressor, spec):
    rng = np.random.default_rng(2)
    comp = CompositeEnergy(model, regressor, target=0.3, weight=2.0)
    g = random_graph(spec, 3, rng)
    e = embed(g) + 0.05 * rng.normal(size=spec.dim)
    val, grad = conditional_energy(model, regressor, 0.3, 2.0, e, 3)
    h = 1e-4
    fd = np.zeros(spec.dim)
    for k in range(spec.dim):
        ep, em = e.copy(), e.copy()
        ep[k] += h
        em[k] -= h
        fd[k] = (comp.batch_values(ep[None], np.array([3]))[0]
                 - comp.batch_values(em[None], np.array([3]))[0]) / (2 * h)
    assert np.linalg.norm(grad - fd) <= 1e-4 * max(np.linalg.norm(fd), 1e-12)


def test_time_proxy_examples():
    assert time_proxy(5.0, 5.0, 1.0) == 0.0
    assert time_proxy(1.0, 5.0, 1.0) == 1.0
    assert time_proxy(-3.0, 5.0, 1.0) == 1.0  # clamped below the data band
    assert time_proxy(3.0, 5.0, 1.0) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        time_proxy(1.0, 2.0, 2.0)


def test_time_proxy_monotone():
    vals = [time_proxy(v, 4.0, 0.0) for v in np.linspace(6, -2, 30)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    assert all(0.0 <= v <= 1.0 for v in vals)


def test_time_conditioned_composite_needs_bands(model, spec):
    reg = PropertyRegressor(spec, time_conditioned=True, n_layers=1, hidden=8, seed=4)
    with pytest.raises(ValueError):
        CompositeEnergy(model, reg, 0.3, 1.0)
    comp = CompositeEnergy(model, reg, 0.3, 1.0, bands=(4.0, 0.0))
    rng = np.random.default_rng(3)
    g = random_graph(spec, 3, rng)
    v, grad = comp.grad_input(embed(g), 3).value, comp.grad_input(embed(g), 3).grad
    assert np.isfinite(v) and np.isfinite(grad).all()


def test_composite_detailed_balance(model, regressor, spec):
    # acceptance with composite energies keeps the composite target invariant
    comp = CompositeEnergy(model, regressor, target=0.4, weight=3.0)
    cfg = ProposalConfig(beta_proposal=1.0, lam_node=0.4, lam_edge=0.6)
    beta_mh = 0.9
    rng = np.random.default_rng(4)
    for _ in range(100):
        x = random_graph(spec, 3, rng)
        gx = comp.grad_input(embed(x), 3)
        y = sample_proposal(x, mixing_logits(x, gx, cfg), cfg, rng).graph
        gy = comp.grad_input(embed(y), 3)
        lq_xy = proposal_log_prob(x, y, gx, cfg)
        lq_yx = proposal_log_prob(y, x, gy, cfg)
        delta = -beta_mh * (gy.value - gx.value) + lq_yx - lq_xy
        lhs = math.exp(-beta_mh * gx.value) * math.exp(lq_xy) * min(1.0, math.exp(delta))
        rhs = math.exp(-beta_mh * gy.value) * math.exp(lq_yx) * min(1.0, math.exp(-delta))
        assert abs(lhs - rhs) <= 1e-9 * max(abs(lhs), abs(rhs))


def test_guidance_config_constraints():
    cfg = GuidanceConfig(target=0.2, weight=1.0, constraint="<=")
    assert cfg.satisfied(0.1) and not cfg.satisfied(0.3)
    cfg = GuidanceConfig(target=0.2, weight=1.0, constraint=">=", threshold=0.5)
    assert cfg.satisfied(0.6) and not cfg.satisfied(0.2)
    with pytest.raises(ValueError):
        GuidanceConfig(target=0.0, weight=-1.0)


def test_edge_count_property(spec):
    from graphenergy import make_graph

    g = make_graph(spec, 3, [0, 0, 0], [(0, 1, 1), (1, 2, 1)])
    assert edge_count_property(g) == pytest.approx(2 / spec.n_pairs)


def test_train_regressor_constant_property(spec):
    rules = ValenceRules((3, 2), connectivity_required=True)
    ds = generate_toy_dataset(spec, rules, 200, np.random.default_rng(5), n_range=(3, 4))
    ds.properties = [0.7] * len(ds)
    reg = train_regressor(ds, RegressorConfig(steps=700, hidden=8, n_layers=1, seed=6))
    preds = reg.predict(ds.graphs[:50])
    assert float(np.abs(preds - 0.7).mean()) < 0.02


def test_train_regressor_deterministic(spec):
    rules = ValenceRules((3, 2), connectivity_required=True)
    ds = generate_toy_dataset(spec, rules, 100, np.random.default_rng(7), n_range=(3, 4))
    ds.properties = [edge_count_property(g) for g in ds.graphs]
    cfg = RegressorConfig(steps=50, hidden=8, n_layers=1, seed=8)
    r1, r2 = train_regressor(ds, cfg), train_regressor(ds, cfg)
    for a, b in zip(r1.parameters(), r2.parameters()):
        assert torch.equal(a, b)


def test_regressor_mae_protocol(spec):
    rules = ValenceRules((3, 2), connectivity_required=True)
    ds = generate_toy_dataset(spec, rules, 100, np.random.default_rng(9), n_range=(3, 4))
    ds.properties = [edge_count_property(g) for g in ds.graphs]
    reg = PropertyRegressor(spec, time_conditioned=True, n_layers=1, hidden=8, seed=10)
    err = regressor_mae(reg, ds, 0.5, np.random.default_rng(10), count=64)
    assert np.isfinite(err) and err >= 0
