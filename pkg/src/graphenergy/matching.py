"""Permutation-invariant graph pairing: histogram signatures, linear
assignment with a deterministic tie-break, node-label alignment, and the
minibatch coupling used to pair noise and data samples."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .graphs import Graph, local_cost, permute

DEFAULT_ALPHA = (1.0, 1.0, 1.0)


@dataclass(frozen=True)
class Signature:
    """Weighted concatenation of three permutation-invariant histograms:
    node classes, pair classes, and (unordered node-class pair, pair class)."""

    node_hist: np.ndarray
    edge_hist: np.ndarray
    node_edge_hist: np.ndarray
    alpha: tuple[float, float, float]

    @property
    def vector(self) -> np.ndarray:
        a1, a2, a3 = self.alpha
        return np.concatenate(
            [a1 * self.node_hist, a2 * self.edge_hist, a3 * self.node_edge_hist]
        )


def histogram_signature(g: Graph, alpha=DEFAULT_ALPHA) -> Signature:
    """Histograms are integer counts over the active region divided by their
    totals, so permuting node labels reproduces them bit for bit."""
    spec = g.spec
    node_counts = np.bincount(g.node_labels[: g.n], minlength=spec.l_node)
    h_node = node_counts.astype(np.float64) / g.n

    pairs = spec.active_pairs(g.n)
    edge_counts = np.zeros(spec.l_edge, dtype=np.int64)
    # unordered node-class pair (a <= b) x edge class
    n_cls_pairs = spec.l_node * (spec.l_node + 1) // 2
    ne_counts = np.zeros(n_cls_pairs * spec.l_edge, dtype=np.int64)
    for (i, j) in pairs:
        c = int(g.edge_labels[spec.pair_index(i, j)])
        edge_counts[c] += 1
        a, b = sorted((int(g.node_labels[i]), int(g.node_labels[j])))
        cls_pair = a * spec.l_node - a * (a - 1) // 2 + (b - a)
        ne_counts[cls_pair * spec.l_edge + c] += 1
    m = len(pairs)
    h_edge = edge_counts.astype(np.float64) / m if m else edge_counts.astype(np.float64)
    h_ne = ne_counts.astype(np.float64) / m if m else ne_counts.astype(np.float64)
    return Signature(h_node, h_edge, h_ne, tuple(float(a) for a in alpha))


def estimate_alpha(graphs) -> tuple[float, float, float]:
    """Weights that equalize the mean Euclidean magnitude of the three
    histogram blocks over a reference set."""
    graphs = list(graphs)
    norms = np.zeros(3)
    for g in graphs:
        s = histogram_signature(g, (1.0, 1.0, 1.0))
        norms += [
            np.linalg.norm(s.node_hist),
            np.linalg.norm(s.edge_hist),
            np.linalg.norm(s.node_edge_hist),
        ]
    norms /= max(len(graphs), 1)
    norms = np.where(norms > 0, norms, 1.0)
    return tuple(float(1.0 / v) for v in norms)


def _recover_duals(cost: np.ndarray, perm: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Optimal LP duals (u, v) for an optimal assignment perm.

    Bellman-Ford on column potentials: relax d[b] <= d[a] + cost[r, b] -
    cost[r, a] where r is the row matched to column a.  Converges within n
    passes when perm is optimal (no negative cycles).
    """
    n = cost.shape[0]
    rows_of_col = np.empty(n, dtype=np.int64)
    rows_of_col[perm] = np.arange(n)
    # w[a, b] = cost[row(a), b] - cost[row(a), a]
    w = cost[rows_of_col] - cost[rows_of_col, np.arange(n)][:, None]
    d = np.zeros(n)
    for _ in range(n):
        new_d = np.minimum(d, (d[:, None] + w).min(axis=0))
        if np.allclose(new_d, d, rtol=0.0, atol=0.0):
            break
        d = new_d
    v = d
    u = cost[np.arange(n), perm] - v[perm]
    return u, v


def _lexicographic_matching(admissible: np.ndarray) -> np.ndarray | None:
    """Lexicographically smallest perfect matching on a boolean bipartite
    adjacency (rows -> columns), or None if no perfect matching exists.

    Rows are fixed in order; each row takes its smallest admissible column
    for which the remaining rows can still be perfectly matched, tested by
    rerouting the displaced row through an augmenting path.
    """
    n = admissible.shape[0]
    cols_of = [np.flatnonzero(admissible[r]) for r in range(n)]
    match_row = np.full(n, -1, dtype=np.int64)
    match_col = np.full(n, -1, dtype=np.int64)
    fixed = np.zeros(n, dtype=bool)

    def augment(r: int, seen: np.ndarray) -> bool:
        for c in cols_of[r]:
            if seen[c]:
                continue
            seen[c] = True
            r2 = match_col[c]
            if r2 < 0 or (not fixed[r2] and augment(r2, seen)):
                match_col[c] = r
                match_row[r] = c
                return True
        return False

    for r in range(n):
        if not augment(r, np.zeros(n, dtype=bool)):
            return None

    for r in range(n):
        for c in cols_of[r]:
            if match_row[r] == c:
                fixed[r] = True
                break
            displaced = match_col[c]
            if displaced >= 0 and fixed[displaced]:
                continue  # column owned by an already-fixed row
            old_c = match_row[r]
            match_col[old_c] = -1
            match_row[r] = c
            match_col[c] = r
            fixed[r] = True
            if displaced < 0:
                break
            match_row[displaced] = -1
            if augment(displaced, np.zeros(n, dtype=bool)):
                break
            # rollback and try the next column
            fixed[r] = False
            match_row[displaced] = c
            match_col[c] = displaced
            match_row[r] = old_c
            match_col[old_c] = r
        if not fixed[r]:
            return None  # unreachable for a graph with a perfect matching
    return match_row


def linear_assignment(cost: np.ndarray) -> tuple[np.ndarray, float]:
    """Minimize sum_i cost[i, perm[i]] over permutations.

    Among cost-optimal permutations, returns the lexicographically smallest
    one (certified through the optimal LP duals), so results are stable
    across solver versions.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"cost must be square, got {cost.shape}")
    if not np.isfinite(cost).all():
        raise ValueError("cost entries must be finite")
    n = cost.shape[0]
    rows, cols = linear_sum_assignment(cost)
    perm = cols[np.argsort(rows)]
    total = float(cost[np.arange(n), perm].sum())
    if n > 1:
        u, v = _recover_duals(cost, perm)
        scale = max(1.0, float(np.abs(cost).max()))
        reduced = cost - u[:, None] - v[None, :]
        admissible = reduced <= 1e-9 * scale
        lex = _lexicographic_matching(admissible)
        if lex is not None:  # always a perfect matching; guard float edge cases
            perm = lex
            total = float(cost[np.arange(n), perm].sum())
    return perm, total


def node_matching_align(x: Graph, y: Graph) -> np.ndarray:
    """Permutation sigma minimizing node-label disagreement of (x, sigma*y),
    via assignment on one-hot node distances."""
    if x.spec != y.spec or x.n != y.n:
        raise ValueError("alignment needs graphs of the same spec and size")
    xl = x.node_labels[: x.n]
    yl = y.node_labels[: y.n]
    cost = 2.0 * (xl[:, None] != yl[None, :])
    perm, _ = linear_assignment(cost)
    return perm


def fgw_cost_approx(
    x: Graph, y: Graph, mode: str, lam_node: float, lam_edge: float
) -> tuple[float, np.ndarray]:
    """Upper bound on the relabeling-minimized local cost.

    node_matching aligns node labels first; histogram mode skips per-node
    alignment (identity), which suffices when only pairing-level similarity
    matters.  Both return the aligned local cost and the permutation used.
    """
    if x.spec != y.spec or x.n != y.n:
        raise ValueError("cost needs graphs of the same spec and size")
    if mode == "node_matching":
        sigma = node_matching_align(x, y)
    elif mode == "histogram":
        sigma = np.arange(x.n, dtype=np.int64)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    cost = local_cost(x, permute(y, sigma), lam_node, lam_edge)
    return cost, sigma


def fgw_cost_exact(x: Graph, y: Graph, lam_node: float, lam_edge: float) -> float:
    """Brute force over all n! relabelings; only for tiny graphs."""
    import itertools

    best = np.inf
    for sigma in itertools.permutations(range(x.n)):
        best = min(best, local_cost(x, permute(y, sigma), lam_node, lam_edge))
    return float(best)


@dataclass(frozen=True)
class Coupling:
    """Bijection between two equal-size batches, stratified by node count."""

    pairs: list[tuple[int, int]]  # (source index, target index)
    costs: list[float]

    @property
    def total_cost(self) -> float:
        return float(sum(self.costs))


def minibatch_coupling(
    source: list[Graph], data: list[Graph], alpha=DEFAULT_ALPHA
) -> Coupling:
    """Pair each source graph with a data graph of the same node count,
    minimizing the summed L1 signature distance within each size group."""
    if len(source) != len(data):
        raise ValueError("batches must have equal size")
    by_n_src: dict[int, list[int]] = {}
    by_n_tgt: dict[int, list[int]] = {}
    for idx, g in enumerate(source):
        by_n_src.setdefault(g.n, []).append(idx)
    for idx, g in enumerate(data):
        by_n_tgt.setdefault(g.n, []).append(idx)
    if sorted(by_n_src) != sorted(by_n_tgt) or any(
        len(by_n_src[n]) != len(by_n_tgt[n]) for n in by_n_src
    ):
        raise ValueError(
            "size groups differ between batches; resample the noise batch"
        )
    pairs: list[tuple[int, int]] = []
    costs: list[float] = []
    sig_src = {i: histogram_signature(source[i], alpha).vector for i in range(len(source))}
    sig_tgt = {i: histogram_signature(data[i], alpha).vector for i in range(len(data))}
    for n in sorted(by_n_src):
        src_idx = by_n_src[n]
        tgt_idx = by_n_tgt[n]
        cost = np.array(
            [
                [np.abs(sig_src[i] - sig_tgt[j]).sum() for j in tgt_idx]
                for i in src_idx
            ]
        )
        perm, _ = linear_assignment(cost)
        for row, col in enumerate(perm):
            pairs.append((src_idx[row], tgt_idx[col]))
            costs.append(float(cost[row, col]))
    order = np.argsort([p[0] for p in pairs])
    return Coupling([pairs[k] for k in order], [costs[k] for k in order])
