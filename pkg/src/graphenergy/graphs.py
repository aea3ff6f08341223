"""Core graph data model: labelled undirected graphs with padding, one-hot
embeddings, permutation action, local costs and single-site edits.

A graph over ``n`` active nodes (padded to ``n_max``) stores a categorical
class per node and a categorical class per unordered node pair; pair class 0
means "no edge".  The flat embedding concatenates one-hot blocks for the
nodes (index order) followed by the pairs (lexicographic ``(i, j)``, ``i<j``)
and is the differentiation domain for every gradient in the package.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator, Sequence

import numpy as np

PAD_LABEL = 0  # label stored outside the active region; excluded everywhere


@dataclass(frozen=True)
class GraphSpec:
    """Dimensions of a graph family: node capacity and class counts."""

    n_max: int
    l_node: int
    l_edge: int  # includes class 0 = "no edge"

    def __post_init__(self):
        if self.n_max < 1:
            raise ValueError(f"n_max must be >= 1, got {self.n_max}")
        if self.l_node < 1:
            raise ValueError(f"l_node must be >= 1, got {self.l_node}")
        if self.l_edge < 2:
            raise ValueError(f"l_edge must be >= 2, got {self.l_edge}")

    @property
    def n_pairs(self) -> int:
        return self.n_max * (self.n_max - 1) // 2

    @property
    def dim(self) -> int:
        """Length of the flat embedding vector."""
        return self.n_max * self.l_node + self.n_pairs * self.l_edge

    @property
    def node_block_end(self) -> int:
        return self.n_max * self.l_node

    def pair_index(self, i: int, j: int) -> int:
        """Position of unordered pair (i, j), i < j, in the pair ordering."""
        if not 0 <= i < j < self.n_max:
            raise ValueError(f"bad pair ({i}, {j}) for n_max={self.n_max}")
        return i * self.n_max - i * (i + 1) // 2 + (j - i - 1)

    def pairs(self) -> Iterator[tuple[int, int]]:
        for i in range(self.n_max):
            for j in range(i + 1, self.n_max):
                yield (i, j)

    @lru_cache(maxsize=None)
    def active_pairs(self, n: int) -> tuple[tuple[int, int], ...]:
        return tuple((i, j) for i in range(n) for j in range(i + 1, n))

    @lru_cache(maxsize=None)
    def active_pair_indices(self, n: int) -> np.ndarray:
        idx = np.array(
            [self.pair_index(i, j) for (i, j) in self.active_pairs(n)], dtype=np.int64
        )
        idx.setflags(write=False)
        return idx

    @lru_cache(maxsize=None)
    def padded_pair_mask(self, n: int) -> np.ndarray:
        mask = np.ones(self.n_pairs, dtype=bool)
        mask[self.active_pair_indices(n)] = False
        mask.setflags(write=False)
        return mask

    def to_dict(self) -> dict:
        return {"n_max": self.n_max, "l_node": self.l_node, "l_edge": self.l_edge}

    @staticmethod
    def from_dict(d: dict) -> "GraphSpec":
        return GraphSpec(int(d["n_max"]), int(d["l_node"]), int(d["l_edge"]))


@dataclass(frozen=True)
class Graph:
    """Immutable labelled graph. Arrays always have padded length; labels
    outside the active region are PAD_LABEL and take part in nothing."""

    spec: GraphSpec
    n: int
    node_labels: np.ndarray  # (n_max,) int64
    edge_labels: np.ndarray  # (n_pairs,) int64, lexicographic (i<j)

    def __post_init__(self):
        spec = self.spec
        if not 1 <= self.n <= spec.n_max:
            raise ValueError(f"n={self.n} outside [1, {spec.n_max}]")
        nodes = np.asarray(self.node_labels, dtype=np.int64).copy()
        edges = np.asarray(self.edge_labels, dtype=np.int64).copy()
        if nodes.shape != (spec.n_max,):
            raise ValueError(f"node_labels shape {nodes.shape} != ({spec.n_max},)")
        if edges.shape != (spec.n_pairs,):
            raise ValueError(f"edge_labels shape {edges.shape} != ({spec.n_pairs},)")
        if (nodes[: self.n] < 0).any() or (nodes[: self.n] >= spec.l_node).any():
            raise ValueError("node label out of range")
        act = spec.active_pair_indices(self.n)
        if act.size and ((edges[act] < 0).any() or (edges[act] >= spec.l_edge).any()):
            raise ValueError("edge label out of range")
        # normalize the padding so equality is a plain array compare
        nodes[self.n :] = PAD_LABEL
        edges[spec.padded_pair_mask(self.n)] = PAD_LABEL
        nodes.setflags(write=False)
        edges.setflags(write=False)
        object.__setattr__(self, "node_labels", nodes)
        object.__setattr__(self, "edge_labels", edges)

    def key(self) -> bytes:
        """Byte key identifying the labelled state (not isomorphism class)."""
        cached = self.__dict__.get("_key")
        if cached is None:
            cached = (
                self.n.to_bytes(2, "little")
                + self.node_labels.tobytes()
                + self.edge_labels.tobytes()
            )
            object.__setattr__(self, "_key", cached)
        return cached

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Graph)
            and self.spec == other.spec
            and self.n == other.n
            and np.array_equal(self.node_labels, other.node_labels)
            and np.array_equal(self.edge_labels, other.edge_labels)
        )

    def __hash__(self) -> int:
        return hash((self.spec, self.key()))

    def edge_label(self, i: int, j: int) -> int:
        if i == j:
            raise ValueError("no self pairs")
        if i > j:
            i, j = j, i
        return int(self.edge_labels[self.spec.pair_index(i, j)])

    def neighbors(self, i: int) -> list[tuple[int, int]]:
        """(j, edge class) for non-absent edges incident to active node i."""
        out = []
        for j in range(self.n):
            if j == i:
                continue
            c = self.edge_label(i, j)
            if c != 0:
                out.append((j, c))
        return out

    def degree_weights(self) -> np.ndarray:
        """Weighted degree per active node: edge class k != 0 adds weight k."""
        deg = np.zeros(self.n, dtype=np.int64)
        for (i, j) in self.spec.active_pairs(self.n):
            c = self.edge_labels[self.spec.pair_index(i, j)]
            if c != 0:
                deg[i] += c
                deg[j] += c
        return deg

    def edge_count(self) -> int:
        """Number of non-absent edges among active pairs."""
        act = self.spec.active_pair_indices(self.n)
        if act.size == 0:
            return 0
        return int((self.edge_labels[act] != 0).sum())


def make_graph(
    spec: GraphSpec,
    n: int,
    node_labels: Sequence[int],
    edges: Sequence[tuple[int, int, int]] = (),
) -> Graph:
    """Build a graph from active-node labels and a sparse (i, j, class) list;
    unlisted pairs get class 0."""
    nodes = np.full(spec.n_max, PAD_LABEL, dtype=np.int64)
    nodes[:n] = np.asarray(list(node_labels), dtype=np.int64)
    pair_labels = np.zeros(spec.n_pairs, dtype=np.int64)
    for (i, j, c) in edges:
        if i > j:
            i, j = j, i
        if j >= n:
            raise ValueError(f"edge ({i},{j}) outside active region n={n}")
        pair_labels[spec.pair_index(i, j)] = c
    return Graph(spec, n, nodes, pair_labels)


@dataclass(frozen=True)
class Edit:
    """Change one site (node i, or pair i<j) to a different class."""

    kind: str  # "node" | "pair"
    i: int
    j: int | None
    new_class: int

    def __post_init__(self):
        if self.kind not in ("node", "pair"):
            raise ValueError(f"bad edit kind {self.kind!r}")
        if self.kind == "pair" and (self.j is None or not self.i < self.j):
            raise ValueError("pair edits need i < j")
        if self.kind == "node" and self.j is not None:
            raise ValueError("node edits take no j")


def embed(g: Graph, spec: GraphSpec | None = None) -> np.ndarray:
    """Flat one-hot embedding; padded blocks are all-zero."""
    spec = spec or g.spec
    if spec != g.spec:
        raise ValueError("graph/spec mismatch")
    e = np.zeros(spec.dim, dtype=np.float64)
    for i in range(g.n):
        e[i * spec.l_node + int(g.node_labels[i])] = 1.0
    base = spec.node_block_end
    for p in spec.active_pair_indices(g.n):
        e[base + p * spec.l_edge + int(g.edge_labels[p])] = 1.0
    return e


def decode(e: np.ndarray, spec: GraphSpec, n: int) -> Graph:
    """Inverse of embed: argmax per active block, ties to the lowest class."""
    e = np.asarray(e, dtype=np.float64)
    if e.shape != (spec.dim,):
        raise ValueError(f"embedding shape {e.shape} != ({spec.dim},)")
    nodes = np.full(spec.n_max, PAD_LABEL, dtype=np.int64)
    for i in range(n):
        block = e[i * spec.l_node : (i + 1) * spec.l_node]
        nodes[i] = int(np.argmax(block))  # argmax returns the first maximum
    pair_labels = np.zeros(spec.n_pairs, dtype=np.int64)
    base = spec.node_block_end
    for p in spec.active_pair_indices(n):
        block = e[base + p * spec.l_edge : base + (p + 1) * spec.l_edge]
        pair_labels[p] = int(np.argmax(block))
    return Graph(spec, n, nodes, pair_labels)


def permute(g: Graph, sigma: Sequence[int]) -> Graph:
    """Relabel active nodes: result node i takes g's node sigma(i), and result
    pair (i, j) takes g's pair (sigma(i), sigma(j))."""
    sigma = list(int(s) for s in sigma)
    if sorted(sigma) != list(range(g.n)):
        raise ValueError(f"sigma is not a bijection on 0..{g.n - 1}")
    spec = g.spec
    nodes = np.full(spec.n_max, PAD_LABEL, dtype=np.int64)
    for i in range(g.n):
        nodes[i] = g.node_labels[sigma[i]]
    pair_labels = np.zeros(spec.n_pairs, dtype=np.int64)
    for (i, j) in spec.active_pairs(g.n):
        a, b = sigma[i], sigma[j]
        if a > b:
            a, b = b, a
        pair_labels[spec.pair_index(i, j)] = g.edge_labels[spec.pair_index(a, b)]
    return Graph(spec, g.n, nodes, pair_labels)


def local_cost(x: Graph, y: Graph, lam_node: float, lam_edge: float) -> float:
    """Squared embedding distance with separate node/edge weights.

    Equals lam_node*|x_V - y_V|^2 + lam_edge*|x_E - y_E|^2; for hard graphs
    each differing site contributes exactly 2.
    """
    if x.spec != y.spec or x.n != y.n:
        raise ValueError("local_cost needs graphs of the same spec and size")
    node_diff = int((x.node_labels[: x.n] != y.node_labels[: y.n]).sum())
    act = x.spec.active_pair_indices(x.n)
    edge_diff = int((x.edge_labels[act] != y.edge_labels[act]).sum()) if act.size else 0
    return 2.0 * lam_node * node_diff + 2.0 * lam_edge * edge_diff


def enumerate_edits(g: Graph) -> list[Edit]:
    """All single-site edits: nodes by index then class, pairs lexicographic
    then class; exactly n*(l_node-1) + C(n,2)*(l_edge-1) of them."""
    spec = g.spec
    out: list[Edit] = []
    for i in range(g.n):
        cur = int(g.node_labels[i])
        for c in range(spec.l_node):
            if c != cur:
                out.append(Edit("node", i, None, c))
    for (i, j) in spec.active_pairs(g.n):
        cur = int(g.edge_labels[spec.pair_index(i, j)])
        for c in range(spec.l_edge):
            if c != cur:
                out.append(Edit("pair", i, j, c))
    return out


def apply_edit(g: Graph, e: Edit) -> Graph:
    """Return a copy of g with one site changed; g itself is untouched."""
    spec = g.spec
    nodes = g.node_labels.copy()
    pair_labels = g.edge_labels.copy()
    if e.kind == "node":
        if not 0 <= e.i < g.n:
            raise ValueError(f"node {e.i} outside active region")
        if not 0 <= e.new_class < spec.l_node:
            raise ValueError("node class out of range")
        nodes[e.i] = e.new_class
    else:
        if not (0 <= e.i < e.j < g.n):
            raise ValueError(f"pair ({e.i},{e.j}) outside active region")
        if not 0 <= e.new_class < spec.l_edge:
            raise ValueError("edge class out of range")
        pair_labels[spec.pair_index(e.i, e.j)] = e.new_class
    return Graph(spec, g.n, nodes, pair_labels)


def apply_edits(g: Graph, edits: Sequence[Edit]) -> Graph:
    for e in edits:
        g = apply_edit(g, e)
    return g


def random_graph(spec: GraphSpec, n: int, rng: np.random.Generator) -> Graph:
    """Uniform labels over all classes (noise graph)."""
    nodes = np.full(spec.n_max, PAD_LABEL, dtype=np.int64)
    nodes[:n] = rng.integers(0, spec.l_node, size=n)
    pair_labels = np.zeros(spec.n_pairs, dtype=np.int64)
    act = spec.active_pair_indices(n)
    if act.size:
        pair_labels[act] = rng.integers(0, spec.l_edge, size=act.size)
    return Graph(spec, n, nodes, pair_labels)
