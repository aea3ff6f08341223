import numpy as np
import pytest
import torch

from graphenergy import (
    EnergyModel,
    GraphSpec,
    embed,
    init_model,
    load_checkpoint,
    loss_gradients,
    make_graph,
    permute,
    random_graph,
    save_checkpoint,
)
from graphenergy.energy import EnergyNumericsError, backbone_param_count
from graphenergy.training import flow_loss


@pytest.fixture(scope="module")
def spec():
    return GraphSpec(n_max=4, l_node=2, l_edge=3)


@pytest.fixture(scope="module")
def model(spec):
    return init_model(spec, n_layers=2, hidden=16, seed=42)


def test_init_deterministic(spec):
    a = init_model(spec, 2, 16, seed=7)
    b = init_model(spec, 2, 16, seed=7)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
    c = init_model(spec, 2, 16, seed=8)
    assert any(
        not torch.equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters())
    )


def test_param_count_closed_form(spec):
    for L, h in [(1, 8), (2, 16), (3, 24)]:
        m = init_model(spec, L, h)
        assert m.param_count() == backbone_param_count(spec, L, h)


def test_permutation_invariance(model, spec):
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, spec.n_max + 1))
        g = random_graph(spec, n, rng)
        sigma = rng.permutation(n)
        va = model.energy_of(g)
        vb = model.energy_of(permute(g, sigma))
        assert abs(va - vb) <= 1e-6 * (1.0 + abs(va))


def test_nonisomorphic_graphs_separate(model, spec):
    a = make_graph(spec, 3, [0, 0, 0], [(0, 1, 1)])
    b = make_graph(spec, 3, [0, 0, 0], [(0, 1, 1), (1, 2, 1)])
    assert model.energy_of(a) != model.energy_of(b)


def test_padding_mask_correctness(model, spec):
    # garbage written into padded embedding blocks must not change anything
    rng = np.random.default_rng(1)
    g = random_graph(spec, 2, rng)
    e = embed(g)
    corrupted = e.copy()
    corrupted[2 * spec.l_node : spec.node_block_end] = rng.normal(size=2 * spec.l_node)
    act = spec.active_pair_indices(2)
    for p in range(spec.n_pairs):
        if p not in act:
            sl = slice(
                spec.node_block_end + p * spec.l_edge,
                spec.node_block_end + (p + 1) * spec.l_edge,
            )
            corrupted[sl] = rng.normal(size=spec.l_edge)
    assert model.energy_of_embedding(corrupted, 2) == model.energy_of_embedding(e, 2)


def test_grad_matches_finite_differences(spec):
    rng = np.random.default_rng(2)
    for case in range(12):
        m = init_model(spec, 2, 12, seed=case)
        n = int(rng.integers(1, spec.n_max + 1))
        e = embed(random_graph(spec, n, rng)) + 0.1 * rng.normal(size=spec.dim)
        g = m.grad_input(e, n)
        h = 1e-4
        fd = np.zeros(spec.dim)
        for k in range(spec.dim):
            ep, em = e.copy(), e.copy()
            ep[k] += h
            em[k] -= h
            fd[k] = (m.energy_of_embedding(ep, n) - m.energy_of_embedding(em, n)) / (2 * h)
        active = np.abs(fd) > 0
        denom = np.linalg.norm(fd)
        assert np.linalg.norm(g.grad - fd) <= 1e-4 * max(denom, 1e-12)
        assert active.any()


def test_padded_gradient_exactly_zero(model, spec):
    rng = np.random.default_rng(3)
    g = random_graph(spec, 2, rng)
    grad = model.grad_of(g)
    assert np.all(grad.node_grad[2:] == 0.0)
    assert np.all(grad.pair_grad[spec.padded_pair_mask(2)] == 0.0)


def test_directional_derivative(model, spec):
    rng = np.random.default_rng(4)
    for _ in range(10):
        x = random_graph(spec, 3, rng)
        y = random_graph(spec, 3, rng)
        ex, ey = embed(x), embed(y)
        d = ey - ex
        g = model.grad_input(ex, 3)
        eps = 1e-5
        num = (
            model.energy_of_embedding(ex + eps * d, 3)
            - model.energy_of_embedding(ex - eps * d, 3)
        ) / (2 * eps)
        assert num == pytest.approx(float(g.grad @ d), rel=1e-5, abs=1e-8)


def test_batch_matches_single(model, spec):
    rng = np.random.default_rng(5)
    graphs = [random_graph(spec, int(rng.integers(1, 5)), rng) for _ in range(8)]
    batch = model.batch_energies(graphs)
    singles = np.array([model.energy_of(g) for g in graphs])
    assert np.allclose(batch, singles, rtol=1e-10, atol=1e-12)


def test_batch_value_grad_no_leakage(model, spec):
    rng = np.random.default_rng(6)
    graphs = [random_graph(spec, 3, rng) for _ in range(4)]
    embs = np.stack([embed(g) for g in graphs])
    ns = np.full(4, 3, dtype=np.int64)
    vs, gs = model.batch_value_grad(embs, ns)
    for i, g in enumerate(graphs):
        single = model.grad_of(g)
        assert vs[i] == pytest.approx(single.value, rel=1e-12)
        assert np.allclose(gs[i], single.grad, rtol=1e-9, atol=1e-12)


def test_loss_gradients_zero_loss(model):
    loss = torch.zeros((), dtype=torch.float64)
    for p in model.parameters():
        loss = loss + 0.0 * p.sum()
    grads = loss_gradients(model, loss)
    assert all(torch.all(g == 0) for g in grads.values())


def test_flow_loss_param_grads_match_fd(spec):
    # nested reverse pass: d/dtheta of |grad_x V + v|^2 on a parameter slice
    m = init_model(spec, 1, 6, seed=9)
    rng = np.random.default_rng(7)
    g = random_graph(spec, 3, rng)
    e = embed(g)[None]
    v = rng.normal(size=(1, spec.dim))
    v[0, embed(g) == 0] *= 0.5
    ns = np.array([3])

    loss = flow_loss(m, e, v, ns)
    grads = loss_gradients(m, loss)

    name, par = next(iter(m.named_parameters()))
    flat = par.detach().reshape(-1)
    idxs = np.linspace(0, flat.numel() - 1, 10, dtype=int)
    h = 1e-5
    for k in idxs:
        orig = float(flat[k])
        with torch.no_grad():
            flat[k] = orig + h
        lp = float(flow_loss(m, e, v, ns).detach())
        with torch.no_grad():
            flat[k] = orig - h
        lm = float(flow_loss(m, e, v, ns).detach())
        with torch.no_grad():
            flat[k] = orig
        fd = (lp - lm) / (2 * h)
        ad = float(grads[name].reshape(-1)[k])
        assert ad == pytest.approx(fd, rel=1e-3, abs=1e-7)


def test_cl_gradient_equals_expectation_difference(model, spec):
    # the contrastive gradient must equal mean-data minus mean-model
    # per-sample parameter gradients, term by term
    from graphenergy.training import contrastive_loss

    rng = np.random.default_rng(8)
    pos = [random_graph(spec, 3, rng) for _ in range(3)]
    neg = [random_graph(spec, 3, rng) for _ in range(3)]
    loss = contrastive_loss(model, pos, neg)
    grads = loss_gradients(model, loss)

    def per_sample_grads(graphs):
        outs = []
        for g in graphs:
            e = torch.from_numpy(embed(g))[None]
            v = model(e, torch.tensor([g.n]))[0]
            outs.append(
                torch.autograd.grad(v, list(model.parameters()), allow_unused=True)
            )
        return outs

    gp = per_sample_grads(pos)
    gn = per_sample_grads(neg)
    for j, (name, p) in enumerate(model.named_parameters()):
        terms_p = [t[j] if t[j] is not None else torch.zeros_like(p) for t in gp]
        terms_n = [t[j] if t[j] is not None else torch.zeros_like(p) for t in gn]
        want = torch.stack(terms_p).mean(0) - torch.stack(terms_n).mean(0)
        assert torch.allclose(grads[name], want, rtol=1e-10, atol=1e-12)


def test_numeric_error_carries_layer(spec):
    m = init_model(spec, 2, 8, seed=0)
    with torch.no_grad():
        m.net.glob_upd[1].weight.fill_(float("inf"))
    rng = np.random.default_rng(9)
    g = random_graph(spec, 3, rng)
    with pytest.raises(EnergyNumericsError) as err:
        m.energy_of(g)
    assert err.value.layer == 1


def test_checkpoint_roundtrip(tmp_path, model, spec):
    path = tmp_path / "model.json"
    save_checkpoint(model, path, extra={"note": 1})
    loaded, extra = load_checkpoint(path)
    assert extra == {"note": 1}
    for pa, pb in zip(model.parameters(), loaded.parameters()):
        assert torch.equal(pa, pb)
    rng = np.random.default_rng(10)
    g = random_graph(spec, 3, rng)
    assert loaded.energy_of(g) == model.energy_of(g)
    # writing twice yields identical bytes
    path2 = tmp_path / "model2.json"
    save_checkpoint(model, path2, extra={"note": 1})
    assert path.read_bytes() == path2.read_bytes()
