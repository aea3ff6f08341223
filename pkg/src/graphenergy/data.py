"""Toy dataset generation, validity rules, isomorphism-aware hashing,
sample-quality metrics, the exact Gibbs oracle for enumerable state spaces,
and JSON-lines persistence."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from hashlib import blake2b
from pathlib import Path

import numpy as np

from .graphs import Graph, GraphSpec, make_graph
from .matching import estimate_alpha


@dataclass(frozen=True)
class ValenceRules:
    """Per-node-class cap on the weighted degree (edge class k != 0 adds
    weight k), plus an optional connectivity requirement."""

    max_degree: tuple[int, ...]  # one cap per node class
    connectivity_required: bool = True

    def __post_init__(self):
        if any(c < 0 for c in self.max_degree):
            raise ValueError("degree caps must be nonnegative")

    def cap(self, node_class: int) -> int:
        return self.max_degree[node_class]

    def to_dict(self) -> dict:
        return {
            "max_degree": list(self.max_degree),
            "connectivity_required": self.connectivity_required,
        }

    @staticmethod
    def from_dict(d: dict) -> "ValenceRules":
        return ValenceRules(tuple(d["max_degree"]), bool(d["connectivity_required"]))


def _connected(g: Graph) -> bool:
    """Single component over active nodes; an edgeless node never counts as
    connected (so a lone active node fails the requirement)."""
    if g.n == 1:
        return g.edge_count() > 0  # impossible: lone nodes are never connected
    seen = {0}
    frontier = [0]
    while frontier:
        i = frontier.pop()
        for j, _ in g.neighbors(i):
            if j not in seen:
                seen.add(j)
                frontier.append(j)
    return len(seen) == g.n


def validity(g: Graph, rules: ValenceRules) -> bool:
    if len(rules.max_degree) != g.spec.l_node:
        raise ValueError("rules do not match the spec's node classes")
    deg = g.degree_weights()
    for i in range(g.n):
        if deg[i] > rules.cap(int(g.node_labels[i])):
            return False
    if rules.connectivity_required and not _connected(g):
        return False
    return True


@dataclass
class Dataset:
    spec: GraphSpec
    graphs: list[Graph]
    properties: list[float] | None = None  # optional per-graph labels
    signature_alpha: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __len__(self) -> int:
        return len(self.graphs)

    @property
    def node_count_histogram(self) -> dict[int, float]:
        hist: dict[int, float] = {}
        for g in self.graphs:
            hist[g.n] = hist.get(g.n, 0.0) + 1.0
        total = sum(hist.values())
        return {k: v / total for k, v in hist.items()} if total else {}

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for idx, g in enumerate(self.graphs):
                edges = []
                for (i, j) in g.spec.active_pairs(g.n):
                    c = int(g.edge_labels[g.spec.pair_index(i, j)])
                    if c != 0:
                        edges.append([i, j, c])
                row = {
                    "n": g.n,
                    "node_labels": [int(v) for v in g.node_labels[: g.n]],
                    "edges": sorted(edges),
                }
                if self.properties is not None:
                    row["property"] = self.properties[idx]
                fh.write(json.dumps(row, sort_keys=True) + "\n")

    @staticmethod
    def load(path: str | Path, spec: GraphSpec) -> "Dataset":
        graphs: list[Graph] = []
        props: list[float] = []
        saw_props = False
        with open(path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                row = json.loads(line)
                graphs.append(
                    make_graph(
                        spec,
                        int(row["n"]),
                        row["node_labels"],
                        [tuple(e) for e in row["edges"]],
                    )
                )
                if "property" in row:
                    saw_props = True
                    props.append(float(row["property"]))
        ds = Dataset(spec, graphs, props if saw_props else None)
        ds.signature_alpha = estimate_alpha(graphs) if graphs else (1.0, 1.0, 1.0)
        return ds


def generate_toy_dataset(
    spec: GraphSpec,
    rules: ValenceRules,
    size: int,
    rng: np.random.Generator,
    n_range: tuple[int, int] | None = None,
    extra_edge_prob: float = 0.3,
    max_attempts_per_graph: int = 200,
) -> Dataset:
    """Constructive sampler of valid graphs: random labels, a random
    spanning tree respecting the degree caps, then optional extra edges
    wherever capacity remains.  Deterministic given the generator."""
    lo, hi = n_range if n_range else (min(2, spec.n_max), spec.n_max)
    if not (1 <= lo <= hi <= spec.n_max):
        raise ValueError(f"bad n_range ({lo}, {hi})")
    graphs: list[Graph] = []
    while len(graphs) < size:
        g = None
        for _ in range(max_attempts_per_graph):
            g = _try_build(spec, rules, int(rng.integers(lo, hi + 1)), rng, extra_edge_prob)
            if g is not None:
                break
        if g is None:
            raise ValueError("rules appear unsatisfiable for this spec")
        graphs.append(g)
    ds = Dataset(spec, graphs)
    ds.signature_alpha = estimate_alpha(graphs) if graphs else (1.0, 1.0, 1.0)
    return ds


def _try_build(spec, rules, n, rng, extra_edge_prob) -> Graph | None:
    labels = rng.integers(0, spec.l_node, size=n)
    caps = np.array([rules.cap(int(c)) for c in labels], dtype=np.int64)
    used = np.zeros(n, dtype=np.int64)
    edges: list[tuple[int, int, int]] = []
    if n > 1:
        if rules.connectivity_required or rng.random() < 0.9:
            order = rng.permutation(n)
            for k in range(1, n):
                i = int(order[k])
                # attach to an earlier node with spare capacity
                prev = [int(order[t]) for t in range(k)]
                rng.shuffle(prev)
                attached = False
                for j in prev:
                    room = min(caps[i] - used[i], caps[j] - used[j])
                    if room >= 1:
                        c = int(rng.integers(1, min(room, spec.l_edge - 1) + 1))
                        edges.append((min(i, j), max(i, j), c))
                        used[i] += c
                        used[j] += c
                        attached = True
                        break
                if not attached:
                    return None
        for (i, j) in spec.active_pairs(n):
            if any(e[0] == i and e[1] == j for e in edges):
                continue
            room = min(caps[i] - used[i], caps[j] - used[j])
            if room >= 1 and rng.random() < extra_edge_prob:
                c = int(rng.integers(1, min(room, spec.l_edge - 1) + 1))
                edges.append((i, j, c))
                used[i] += c
                used[j] += c
    g = make_graph(spec, n, labels, edges)
    return g if validity(g, rules) else None


# ---- isomorphism-aware hashing ---------------------------------------------

WL_ROUNDS = 3


def canonical_hash(g: Graph, rounds: int = WL_ROUNDS) -> int:
    """64-bit hash equal across node relabelings, via iterative refinement
    over the complete pair-class structure.  Refinement-indistinguishable
    graphs collide (inherent to this family of tests)."""

    def h(s: str) -> str:
        return blake2b(s.encode(), digest_size=8).hexdigest()

    labels = [h(f"n{int(g.node_labels[i])}") for i in range(g.n)]
    for _ in range(rounds):
        new = []
        for i in range(g.n):
            neigh = sorted(
                f"{g.edge_label(i, j)}:{labels[j]}" for j in range(g.n) if j != i
            )
            new.append(h(labels[i] + "|" + ";".join(neigh)))
        labels = new
    edge_tokens = sorted(
        f"{g.edge_label(i, j)}~{min(labels[i], labels[j])}~{max(labels[i], labels[j])}"
        for (i, j) in g.spec.active_pairs(g.n)
    )
    final = h(f"{g.n}#" + ",".join(sorted(labels)) + "#" + ",".join(edge_tokens))
    return int(final, 16)


def vun_metrics(
    samples: list[Graph], train: Dataset | list[Graph], rules: ValenceRules
) -> tuple[float, float, float, float]:
    """(valid, unique-among-valid, novel-among-unique, all three) fractions.
    Uniqueness and novelty use the refinement hash; duplicates keep their
    first occurrence."""
    if not samples:
        raise ValueError("no samples")
    train_graphs = train.graphs if isinstance(train, Dataset) else train
    train_hashes = {canonical_hash(g) for g in train_graphs}
    n_valid = n_unique = n_vun = 0
    seen: set[int] = set()
    for g in samples:
        if not validity(g, rules):
            continue
        n_valid += 1
        hsh = canonical_hash(g)
        if hsh in seen:
            continue
        seen.add(hsh)
        n_unique += 1
        if hsh not in train_hashes:
            n_vun += 1
    total = len(samples)
    v = n_valid / total
    u = n_unique / n_valid if n_valid else 0.0
    nov = n_vun / n_unique if n_unique else 0.0
    return v, u, nov, n_vun / total


# ---- exact Gibbs oracle -----------------------------------------------------

MAX_ENUMERABLE_STATES = 10**6


@dataclass
class GibbsTable:
    graphs: list[Graph]
    probs: np.ndarray
    energies: np.ndarray
    index: dict[bytes, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.index:
            self.index = {g.key(): i for i, g in enumerate(self.graphs)}

    def prob_of(self, g: Graph) -> float:
        return float(self.probs[self.index[g.key()]])


def enumerate_states(spec: GraphSpec, n: int) -> list[Graph]:
    count = spec.l_node**n * spec.l_edge ** (n * (n - 1) // 2)
    if count > MAX_ENUMERABLE_STATES:
        raise ValueError(f"state space too large to enumerate ({count})")
    act = spec.active_pair_indices(n)
    out = []
    for nodes in itertools.product(range(spec.l_node), repeat=n):
        for pairs in itertools.product(range(spec.l_edge), repeat=len(act)):
            node_arr = np.zeros(spec.n_max, dtype=np.int64)
            node_arr[:n] = nodes
            pair_arr = np.zeros(spec.n_pairs, dtype=np.int64)
            pair_arr[act] = pairs
            out.append(Graph(spec, n, node_arr, pair_arr))
    return out


def exact_gibbs(model, spec: GraphSpec, beta_mh: float, n: int | None = None) -> GibbsTable:
    """Normalized target distribution exp(-beta * V) over every labelled
    graph with the given active size (defaults to n_max)."""
    n = spec.n_max if n is None else n
    states = enumerate_states(spec, n)
    energies = []
    for start in range(0, len(states), 4096):
        chunk = states[start : start + 4096]
        energies.append(model.batch_energies(chunk))
    e = np.concatenate(energies)
    logw = -beta_mh * e
    logw -= logw.max()
    w = np.exp(logw)
    return GibbsTable(states, w / w.sum(), e)


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(p - q).sum())


# ---- distributional statistics ----------------------------------------------


def graph_features(g: Graph) -> np.ndarray:
    """Fixed feature map: degree histogram (plain edge counts per node),
    node-class histogram, pair-class histogram, each normalized."""
    spec = g.spec
    degs = np.zeros(g.n, dtype=np.int64)
    for (i, j) in spec.active_pairs(g.n):
        if g.edge_labels[spec.pair_index(i, j)] != 0:
            degs[i] += 1
            degs[j] += 1
    deg_hist = np.bincount(degs, minlength=spec.n_max).astype(np.float64)[: spec.n_max]
    deg_hist /= g.n
    node_hist = np.bincount(g.node_labels[: g.n], minlength=spec.l_node).astype(np.float64) / g.n
    act = spec.active_pair_indices(g.n)
    if act.size:
        edge_hist = np.bincount(g.edge_labels[act], minlength=spec.l_edge).astype(np.float64) / act.size
    else:
        edge_hist = np.zeros(spec.l_edge)
    return np.concatenate([deg_hist, node_hist, edge_hist])


def stat_distance(samples: list[Graph], reference: list[Graph]) -> float:
    """MMD with a linear kernel on the fixed feature map: the distance
    between the two feature means; zero for identical empirical laws."""
    if not samples or not reference:
        raise ValueError("empty sample sets")
    fx = np.stack([graph_features(g) for g in samples])
    fy = np.stack([graph_features(g) for g in reference])
    return float(np.linalg.norm(fx.mean(axis=0) - fy.mean(axis=0)))
