import numpy as np
import pytest
import torch

from graphenergy import (
    GeodesicConfig,
    GraphSpec,
    ValenceRules,
    embed,
    init_model,
    make_graph,
    optimize_geodesic,
    optimize_geodesics,
    path_length,
    path_validity,
    random_graph,
    sample_along_path,
    spline_eval,
)
from graphenergy.geodesics import (
    arc_uniform_positions,
    bspline_basis,
    linear_path,
    path_mean_energy,
)


@pytest.fixture(scope="module")
def spec():
    return GraphSpec(n_max=4, l_node=2, l_edge=2)


@pytest.fixture(scope="module")
def model(spec):
    return init_model(spec, 1, 10, seed=41)


def cfg(**kw):
    base = dict(iterations=0, n_segments=12)
    base.update(kw)
    return GeodesicConfig(**base)


def endpoints(spec, seed=0, n=4):
    rng = np.random.default_rng(seed)
    return random_graph(spec, n, rng), random_graph(spec, n, rng)


def test_basis_partition_of_unity():
    ts = np.linspace(0, 1, 33)
    basis = bspline_basis(10, 3, ts)
    assert np.allclose(basis.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(basis >= -1e-15)
    assert np.allclose(basis[0], np.eye(10)[0])
    assert np.allclose(basis[-1], np.eye(10)[9])


def test_spline_endpoints_exact(model, spec):
    a, b = endpoints(spec, 1)
    path = linear_path(a, b, cfg())
    assert np.array_equal(spline_eval(path, 0.0), embed(a))
    assert np.array_equal(spline_eval(path, 1.0), embed(b))
    with pytest.raises(ValueError):
        spline_eval(path, 1.5)
    with pytest.raises(ValueError):
        spline_eval(path, -0.1)


def test_spline_constant_interior_plateau(spec):
    # with every interior control point at the same simplex point p, the
    # curve equals p wherever the endpoint basis functions vanish
    a, b = endpoints(spec, 2)
    c = cfg()
    path = linear_path(a, b, c)
    with torch.no_grad():
        path.node_logits.fill_(0.0)
        path.pair_logits.fill_(0.0)
    spec_ = path.spec
    p = spline_eval(path, 0.5)
    node_blocks = p[: spec_.node_block_end].reshape(spec_.n_max, spec_.l_node)
    for i in range(path.n):
        assert np.allclose(node_blocks[i], 1.0 / spec_.l_node, atol=1e-12)


def test_spline_points_in_simplex(model, spec):
    a, b = endpoints(spec, 3)
    path = linear_path(a, b, cfg())
    for t in np.linspace(0, 1, 17):
        e = spline_eval(path, float(t))
        blocks = e[: spec.node_block_end].reshape(spec.n_max, spec.l_node)
        for i in range(path.n):
            assert blocks[i].min() >= -1e-12
            assert blocks[i].sum() == pytest.approx(1.0, abs=1e-9)
        act = spec.active_pair_indices(path.n)
        pair_blocks = e[spec.node_block_end :].reshape(spec.n_pairs, spec.l_edge)
        for pi in act:
            assert pair_blocks[pi].sum() == pytest.approx(1.0, abs=1e-9)
        # padded blocks stay zero
        assert np.all(blocks[path.n :] == 0.0)


def test_path_length_chord_at_zero_beta(model, spec):
    a, b = endpoints(spec, 4)
    c = cfg(beta=0.0, lam_node=1.0, lam_edge=1.0, n_segments=64)
    path = linear_path(a, b, c)
    ea, eb = embed(a), embed(b)
    nb = spec.node_block_end
    chord = np.sqrt(((ea - eb)[:nb] ** 2).sum() + ((ea - eb)[nb:] ** 2).sum())
    # init spline traces the chord, so its loc-length matches the chord
    assert path_length(model, path, c) == pytest.approx(chord, rel=1e-3)


def test_path_length_constant_path_zero(model, spec):
    # interior points are softmax-projected, so "constant" holds up to the
    # simplex projection epsilon
    a, _ = endpoints(spec, 5)
    path = linear_path(a, a, cfg())
    assert path_length(model, path, cfg()) == pytest.approx(0.0, abs=1e-4)


def test_path_length_refinement_converges(model, spec):
    a, b = endpoints(spec, 6)
    path = linear_path(a, b, cfg())
    c = cfg()
    l1 = path_length(model, path, c, k=32)
    l2 = path_length(model, path, c, k=64)
    assert abs(l2 - l1) < 0.01 * max(l1, 1e-9)


def test_optimize_identical_endpoints(model, spec):
    a, _ = endpoints(spec, 7)
    c = cfg(iterations=5, lam_energy=0.0)
    path = optimize_geodesic(a, a, model, c)
    assert path_length(model, path, c) == pytest.approx(0.0, abs=1e-4)


def test_optimize_zero_iterations_returns_linear(model, spec):
    a, b = endpoints(spec, 8)
    c = cfg(iterations=0)
    path = optimize_geodesic(a, b, model, c)
    ref = linear_path(a, b, c)
    # endpoints aligned, control logits untouched
    assert np.allclose(path.node_logits.detach().numpy().shape, ref.node_logits.shape)
    assert np.array_equal(spline_eval(path, 0.0), embed(a))


def test_optimize_reduces_mean_energy(model, spec):
    a, b = endpoints(spec, 9)
    c = cfg(iterations=120, lam_energy=1.0, lam_length=0.1, lr=5e-2, n_segments=8)
    lin = linear_path(a, b, c)
    lin_me = path_mean_energy(model, lin, c)
    opt = optimize_geodesic(a, b, model, c)
    opt_me = path_mean_energy(model, opt, c)
    assert opt_me <= lin_me + 1e-9
    assert np.array_equal(spline_eval(opt, 0.0), spline_eval(lin, 0.0))


def test_optimize_batched_matches_single_contract(model, spec):
    pairs = [endpoints(spec, s) for s in (10, 11, 12)]
    c = cfg(iterations=20, lr=1e-2, n_segments=8)
    paths = optimize_geodesics(pairs, model, c)
    assert len(paths) == 3
    for (a, _), p in zip(pairs, paths):
        assert np.array_equal(spline_eval(p, 0.0), embed(a))


def test_sample_along_path_endpoint_deterministic(model, spec):
    a, b = endpoints(spec, 13)
    path = linear_path(a, b, cfg())
    rng = np.random.default_rng(0)
    grid = sample_along_path(path, np.array([0.0]), 5, rng)
    assert all(g == a for g in grid[0])


def test_sample_along_path_frequencies(spec, model):
    a, b = endpoints(spec, 14)
    path = linear_path(a, b, cfg())
    t = 0.37
    e = spline_eval(path, t)
    p_template = e[: spec.l_node]  # node 0 block probabilities
    rng = np.random.default_rng(1)
    draws = 10**4
    grid = sample_along_path(path, np.array([t]), draws, rng)
    counts = np.zeros(spec.l_node)
    for g in grid[0]:
        counts[g.node_labels[0]] += 1
    for c in range(spec.l_node):
        p = p_template[c]
        sigma = np.sqrt(draws * p * (1 - p))
        assert abs(counts[c] - draws * p) <= 3 * sigma + 1e-9


def test_arc_uniform_positions(model, spec):
    a, b = endpoints(spec, 15)
    path = linear_path(a, b, cfg())
    ts = arc_uniform_positions(path, 9)
    assert ts[0] == 0.0 and ts[-1] == pytest.approx(1.0)
    assert np.all(np.diff(ts) >= -1e-12)


def test_path_validity_fractions(spec):
    rules = ValenceRules((3, 2), connectivity_required=True)
    ok = make_graph(spec, 3, [0, 0, 0], [(0, 1, 1), (1, 2, 1)])
    bad = make_graph(spec, 3, [0, 0, 0])
    assert path_validity([[ok, ok], [ok, ok]], rules) == 1.0
    assert path_validity([[bad, bad]], rules) == 0.0
    assert path_validity([[ok, bad], [ok, bad]], rules) == 0.5
