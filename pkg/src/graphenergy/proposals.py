"""Discrete proposal kernels over graph states.

Two kernels share the same gradient information: a deterministic greedy
kernel that applies the locally best edits while they strictly improve a
linearized objective (descent toward the data region), and a stochastic
factorized kernel whose per-site logits trade off gradient alignment against
an edit penalty, wrapped in Metropolis-Hastings acceptance.  When the
factorized kernel draws "stay everywhere" it retries with softened logits a
bounded number of times; transition probabilities account for that cascade
exactly, which keeps the acceptance ratio well defined.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .graphs import Edit, Graph, apply_edits
from .energy import EnergyGradient

TRANSPORT = "transport"
MIXING = "mixing"


@dataclass(frozen=True)
class ProposalConfig:
    beta_proposal: float = 9.55  # gradient weight in the proposal logits
    lam_node: float = 0.23  # node edit penalty
    lam_edge: float = 1.88  # pair edit penalty
    beta_mh_init: float = 9.55  # acceptance inverse temperature (start)
    beta_mh_final: float = 9.55  # acceptance inverse temperature (end)
    anneal_steps: int = 0  # 0 = fixed temperature
    soften: float = 0.5  # logit scale factor per stay-retry
    max_retries: int = 3
    n_edits: int = 1  # greedy edits applied per transport jump

    def __post_init__(self):
        if self.beta_proposal <= 0 or self.lam_node <= 0 or self.lam_edge <= 0:
            raise ValueError("beta_proposal and edit penalties must be positive")
        if not 0.0 < self.soften < 1.0:
            raise ValueError("soften must be in (0, 1)")
        if self.max_retries < 0 or self.n_edits < 1:
            raise ValueError("bad retry bound or edit count")

    @staticmethod
    def fixed_defaults() -> "ProposalConfig":
        return ProposalConfig()

    @staticmethod
    def annealed_defaults() -> "ProposalConfig":
        return ProposalConfig(
            beta_proposal=8.12,
            lam_node=0.07,
            lam_edge=2.23,
            beta_mh_init=0.18,
            beta_mh_final=13.56,
            anneal_steps=200,
        )

    def with_beta_mh(self, beta: float) -> "ProposalConfig":
        return replace(self, beta_mh_init=beta, beta_mh_final=beta, anneal_steps=0)


@dataclass
class ProposalOutcome:
    graph: Graph
    log_q_forward: float  # log-prob of this outcome under the full cascade
    retries_used: int
    stayed: bool


def anneal_beta(s: int, cfg: ProposalConfig) -> float:
    """Linear ramp of the acceptance temperature over the first
    anneal_steps mixing steps, constant afterwards."""
    if s < 0:
        raise ValueError("step must be >= 0")
    steps = cfg.anneal_steps
    if steps <= 0 or s >= steps:
        return cfg.beta_mh_final
    span = cfg.beta_mh_final - cfg.beta_mh_init
    return cfg.beta_mh_init + span * (s / max(steps - 1, 1))


def regime_switch(v_x: float, v_threshold: float, stuck: bool) -> str:
    """Mixing once the chain reaches the target energy or cannot improve."""
    return MIXING if stuck or v_x <= v_threshold else TRANSPORT


# ---- site-table view of a state -------------------------------------------


def _site_arrays(x: Graph) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    spec = x.spec
    act = spec.active_pair_indices(x.n)
    node_cur = x.node_labels[: x.n].astype(np.int64)
    pair_cur = x.edge_labels[act].astype(np.int64)
    return node_cur, pair_cur, act


def _grad_tables(x: Graph, g: EnergyGradient) -> tuple[np.ndarray, np.ndarray]:
    act = x.spec.active_pair_indices(x.n)
    return g.node_grad[: x.n], g.pair_grad[act]


def _graph_with_classes(
    x: Graph, node_classes: np.ndarray, pair_classes: np.ndarray
) -> Graph:
    spec = x.spec
    nodes = x.node_labels.copy()
    nodes[: x.n] = node_classes
    edges = x.edge_labels.copy()
    act = spec.active_pair_indices(x.n)
    if act.size:
        edges[act] = pair_classes
    return Graph(spec, x.n, nodes, edges)


@dataclass
class ProposalLogits:
    """Per-site categorical logits at softening stage 0; the stay logit is
    exactly zero at every site."""

    node: np.ndarray  # (n, l_node)
    pair: np.ndarray  # (m, l_edge)
    node_cur: np.ndarray
    pair_cur: np.ndarray


def mixing_logits(x: Graph, g: EnergyGradient, cfg: ProposalConfig) -> ProposalLogits:
    node_cur, pair_cur, _ = _site_arrays(x)
    gn, gp = _grad_tables(x, g)
    beta = cfg.beta_proposal
    n = x.n
    node = beta * (gn[np.arange(n), node_cur][:, None] - gn) - cfg.lam_node
    node[np.arange(n), node_cur] = 0.0
    m = pair_cur.shape[0]
    pair = beta * (gp[np.arange(m), pair_cur][:, None] - gp) - cfg.lam_edge
    if m:
        pair[np.arange(m), pair_cur] = 0.0
    return ProposalLogits(node, pair, node_cur, pair_cur)


class StageTables:
    """Per-stage categorical tables for the softened retry cascade.

    Stage s uses logits scaled by soften**s; probabilities, their logs, row
    cumsums and the all-stay log-probability are precomputed once per state.
    Node and pair sites live in one concatenated (stage, site, class) block
    padded to the wider class count, which keeps the hot sampling loop to a
    handful of vectorized operations; realized-outcome log-probabilities are
    memoized by outcome key.
    """

    def __init__(self, logits: ProposalLogits, cfg: ProposalConfig):
        self.cfg = cfg
        self.node_cur = logits.node_cur
        self.pair_cur = logits.pair_cur
        self.n_nodes = logits.node_cur.shape[0]
        self.n_sites = self.n_nodes + logits.pair_cur.shape[0]
        stages = cfg.max_retries + 1
        scale = cfg.soften ** np.arange(stages)
        node_logp = _log_softmax(scale[:, None, None] * logits.node[None])
        pair_logp = _log_softmax(scale[:, None, None] * logits.pair[None])
        l_max = max(node_logp.shape[2], pair_logp.shape[2] if pair_logp.size else 0)

        def padded(block, fill):
            out = np.full((stages, block.shape[1], l_max), fill)
            out[:, :, : block.shape[2]] = block
            return out

        # padding: log-prob -inf (never drawn / indexed), cumsum 1 (never < u)
        self.logp = np.concatenate(
            [padded(node_logp, -np.inf), padded(pair_logp, -np.inf)], axis=1
        )
        self.cum = np.concatenate(
            [
                padded(np.cumsum(np.exp(node_logp), axis=2), 1.0),
                padded(np.cumsum(np.exp(pair_logp), axis=2), 1.0),
            ],
            axis=1,
        )
        self.max_class = np.concatenate(
            [
                np.full(self.n_nodes, node_logp.shape[2] - 1),
                np.full(self.n_sites - self.n_nodes, max(pair_logp.shape[2] - 1, 0)),
            ]
        )
        self.cur_classes = np.concatenate([logits.node_cur, logits.pair_cur])
        self.cur_key = self.cur_classes.tobytes()
        self._site_idx = np.arange(self.n_sites)
        stay = self.logp[:, self._site_idx, self.cur_classes].sum(axis=1)
        self.stay_log = stay  # (stages,)
        self.prefix_stay = np.concatenate([[0.0], np.cumsum(stay)[:-1]])
        self._stay_total = float(self.prefix_stay[-1] + self.stay_log[-1])
        self._memo: dict[bytes, float] = {}

    def outcome_log_prob_key(self, classes: np.ndarray, key: bytes) -> float:
        if key == self.cur_key:
            return self._stay_total
        hit = self._memo.get(key)
        if hit is None:
            per_stage = self.logp[:, self._site_idx, classes].sum(axis=1)
            hit = _logsumexp(self.prefix_stay + per_stage)
            self._memo[key] = hit
        return hit

    def outcome_log_prob(self, node_classes: np.ndarray, pair_classes: np.ndarray) -> float:
        """Marginal log-probability that the cascade realizes this outcome."""
        classes = np.concatenate([node_classes, pair_classes]).astype(np.int64)
        return self.outcome_log_prob_key(classes, classes.tobytes())

    def draw_stage(self, s: int, rng: np.random.Generator) -> np.ndarray:
        u = rng.random(self.n_sites)
        return np.minimum((self.cum[s] < u[:, None]).sum(axis=1), self.max_class)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    if logits.shape[-2] == 0:
        return logits
    m = logits.max(axis=-1, keepdims=True)
    z = np.log(np.exp(logits - m).sum(axis=-1, keepdims=True)) + m
    return logits - z


def _logsumexp(v: np.ndarray) -> float:
    m = v.max()
    return float(m + math.log(np.exp(v - m).sum()))


def sample_proposal(
    x: Graph,
    logits: ProposalLogits | StageTables,
    cfg: ProposalConfig,
    rng: np.random.Generator,
    intern: dict | None = None,
) -> ProposalOutcome:
    """Draw every site independently; on an all-stay draw soften the logits
    and retry, up to max_retries; report the exact outcome log-probability.

    ``intern`` optionally memoizes Graph objects by their class arrays so
    long runs on small state spaces avoid rebuilding states.
    """
    tables = logits if isinstance(logits, StageTables) else StageTables(logits, cfg)
    nn = tables.n_nodes
    for s in range(cfg.max_retries + 1):
        classes = tables.draw_stage(s, rng)
        key = classes.tobytes()
        if key != tables.cur_key:
            if intern is None:
                y = _graph_with_classes(x, classes[:nn], classes[nn:])
            else:
                y = intern.get(key)
                if y is None:
                    y = _graph_with_classes(x, classes[:nn], classes[nn:])
                    intern[key] = y
            logq = tables.outcome_log_prob_key(classes, key)
            return ProposalOutcome(y, logq, retries_used=s, stayed=False)
    return ProposalOutcome(
        x, tables._stay_total, retries_used=cfg.max_retries, stayed=True
    )


def proposal_log_prob(
    x_from: Graph, x_to: Graph, g_at_from: EnergyGradient, cfg: ProposalConfig
) -> float:
    """Exact log-probability that the cascade at x_from realizes x_to."""
    if x_from.spec != x_to.spec or x_from.n != x_to.n:
        raise ValueError("states must share spec and size")
    tables = StageTables(mixing_logits(x_from, g_at_from, cfg), cfg)
    node_to, pair_to, _ = _site_arrays(x_to)
    return tables.outcome_log_prob(node_to, pair_to)


def mh_accept(
    x: Graph,
    y: Graph,
    v_x: float,
    v_y: float,
    logq_fwd: float,
    logq_rev: float,
    beta_mh: float,
    rng: np.random.Generator,
) -> tuple[bool, float]:
    """Accept y with probability min(1, exp(delta)); delta combines the
    energy difference at acceptance temperature with the proposal asymmetry."""
    delta = -beta_mh * (v_y - v_x) + logq_rev - logq_fwd
    alpha = 1.0 if delta >= 0 else math.exp(delta)
    return bool(rng.random() < alpha), alpha


# ---- greedy transport kernel ----------------------------------------------


def greedy_edits(
    x: Graph,
    g: EnergyGradient,
    lam_node: float,
    lam_edge: float,
    n_edits: int = 1,
) -> list[Edit] | None:
    """Best single edit per site under the linearized score
    (gradient difference plus edit cost), then the n_edits most negative
    distinct sites.  None when fewer than n_edits sites strictly improve.

    Ties resolve to the enumeration order: nodes by index then class, pairs
    lexicographic then class.
    """
    node_cur, pair_cur, _ = _site_arrays(x)
    gn, gp = _grad_tables(x, g)
    n = x.n
    node_scores = gn - gn[np.arange(n), node_cur][:, None] + 2.0 * lam_node
    node_scores[np.arange(n), node_cur] = np.inf
    m = pair_cur.shape[0]
    pair_scores = gp - gp[np.arange(m), pair_cur][:, None] + 2.0 * lam_edge
    if m:
        pair_scores[np.arange(m), pair_cur] = np.inf

    best: list[tuple[float, int, Edit]] = []  # (score, enumeration order, edit)
    order = 0
    pairs = x.spec.active_pairs(x.n)
    for i in range(n):
        c = int(np.argmin(node_scores[i]))
        best.append((float(node_scores[i, c]), order, Edit("node", i, None, c)))
        order += 1
    for p, (i, j) in enumerate(pairs):
        c = int(np.argmin(pair_scores[p]))
        best.append((float(pair_scores[p, c]), order, Edit("pair", i, j, c)))
        order += 1

    improving = sorted(e for e in best if e[0] < 0.0)
    if len(improving) < n_edits:
        return None
    return [e[2] for e in improving[:n_edits]]


def greedy_step(
    x: Graph,
    g: EnergyGradient,
    lam_node: float,
    lam_edge: float,
    n_edits: int = 1,
) -> Graph | None:
    """Apply the greedy edit set, or None when the kernel is stuck."""
    edits = greedy_edits(x, g, lam_node, lam_edge, n_edits)
    if edits is None:
        return None
    return apply_edits(x, edits)
