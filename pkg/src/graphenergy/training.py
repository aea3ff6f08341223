"""Training loop: transport-aligned gradient matching on coupled
noise/data interpolants, plus a contrastive term whose negatives come from
the model's own sampler, with a warmup phase and post-warmup calibration of
the sampler hyperparameters."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .data import Dataset
from .energy import EnergyModel, save_checkpoint
from .graphs import Graph, GraphSpec, embed, random_graph
from .matching import minibatch_coupling
from .proposals import MIXING, TRANSPORT, ProposalConfig
from .sampler import (
    SamplerConfig,
    chain_rngs,
    init_noise,
    make_chain_state,
    run_chains_lockstep,
)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, checkpoint_path: str | None):
        msg = f"loss became non-finite at step {step}"
        if checkpoint_path:
            msg += f"; last good checkpoint at {checkpoint_path}"
        super().__init__(msg)
        self.step = step
        self.checkpoint_path = checkpoint_path


@dataclass
class TrainConfig:
    lambda_cl: float = 0.1  # weight of the contrastive term
    n_warmup: int = 20000  # gradient-matching-only steps
    n_joint: int = 100  # steps with the contrastive term added
    chain_len: int = 500  # mixing steps per negative chain
    batch_size: int = 32
    lr_warmup: float = 1e-4
    lr_joint: float = 1e-5
    neg_data_fraction: float = 0.5  # portion of negative chains started at data
    v_th_decay: float = 0.99  # EMA decay for the switch threshold
    proposal: ProposalConfig = field(default_factory=ProposalConfig.fixed_defaults)
    persistent_negatives: bool = False  # reuse chain ends across steps
    checkpoint_every: int = 0  # 0 disables periodic checkpoints
    log_every: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.lambda_cl < 0 or self.batch_size < 1 or self.chain_len < 0:
            raise ValueError("bad training config")
        if self.neg_data_fraction not in (0.5, 1.0) and not 0 <= self.neg_data_fraction <= 1:
            raise ValueError("neg_data_fraction must lie in [0, 1]")


@dataclass
class InterpolantSample:
    x0: Graph
    xdata: Graph
    t: float
    xt: Graph
    v: np.ndarray  # embed(xdata) - embed(x0)


def sample_interpolant(
    x0: Graph, xdata: Graph, t: float, rng: np.random.Generator
) -> InterpolantSample:
    """Each site takes the first endpoint's label w.p. (1-t) and the second
    endpoint's w.p. t, independently."""
    if x0.spec != xdata.spec or x0.n != xdata.n:
        raise ValueError("interpolant endpoints must share spec and size")
    spec = x0.spec
    take_data = rng.random(spec.n_max) < t
    nodes = np.where(take_data, xdata.node_labels, x0.node_labels)
    take_data_e = rng.random(spec.n_pairs) < t
    edges = np.where(take_data_e, xdata.edge_labels, x0.edge_labels)
    xt = Graph(spec, x0.n, nodes, edges)
    v = embed(xdata) - embed(x0)
    return InterpolantSample(x0, xdata, float(t), xt, v)


def flow_loss(
    model: EnergyModel, xt_embs: np.ndarray, v: np.ndarray, ns: np.ndarray
) -> torch.Tensor:
    """Mean squared mismatch between the input gradient at the interpolant
    and the negative displacement toward the data endpoint; keeps the graph
    so parameter gradients (one nested reverse pass) are exact."""
    t = torch.from_numpy(np.ascontiguousarray(xt_embs, dtype=np.float64))
    t.requires_grad_(True)
    vals = model(t, torch.from_numpy(np.ascontiguousarray(ns, dtype=np.int64)))
    (g,) = torch.autograd.grad(vals.sum(), t, create_graph=True)
    vt = torch.from_numpy(np.ascontiguousarray(v, dtype=np.float64))
    return ((g + vt) ** 2).sum(dim=1).mean()


def flow_loss_of(model: EnergyModel, samples: list[InterpolantSample]) -> torch.Tensor:
    embs = np.stack([embed(s.xt) for s in samples])
    vs = np.stack([s.v for s in samples])
    ns = np.array([s.xt.n for s in samples], dtype=np.int64)
    return flow_loss(model, embs, vs, ns)


def contrastive_loss(
    model: EnergyModel, positives: list[Graph], negatives: list[Graph]
) -> torch.Tensor:
    """Mean energy of data samples minus mean energy of model samples; the
    negatives are plain graphs, so no gradient reaches their sampler."""
    if not positives or not negatives:
        raise ValueError("contrastive loss needs nonempty batches")

    def batch_v(graphs: list[Graph]) -> torch.Tensor:
        embs = torch.from_numpy(np.stack([embed(g) for g in graphs]))
        ns = torch.from_numpy(np.array([g.n for g in graphs], dtype=np.int64))
        return model(embs, ns)

    return batch_v(positives).mean() - batch_v(negatives).mean()


def _noise_batch_like(
    data_batch: list[Graph], spec: GraphSpec, rng: np.random.Generator
) -> list[Graph]:
    """Uniform-label noise graphs whose node counts mirror the data batch,
    so size-stratified coupling never needs a resample."""
    return [random_graph(spec, g.n, rng) for g in data_batch]


def sample_negatives(
    model: EnergyModel,
    dataset: Dataset,
    cfg: TrainConfig,
    v_threshold: float,
    rng: np.random.Generator,
    count: int | None = None,
    starts: list[Graph] | None = None,
) -> list[Graph]:
    """Model samples for the contrastive term: chains started from data
    (mixing immediately) and from noise (transport first), run in lockstep
    with the model frozen."""
    count = count or cfg.batch_size
    n_data = int(round(count * cfg.neg_data_fraction))
    rngs = chain_rngs(int(rng.integers(2**63)), count)
    hist = dataset.node_count_histogram
    states = []
    for i in range(count):
        if starts is not None:
            g0 = starts[i]
            regime = MIXING
        elif i < n_data:
            g0 = dataset.graphs[int(rng.integers(len(dataset.graphs)))]
            regime = MIXING
        else:
            g0 = init_noise(dataset.spec, hist, rngs[i])
            regime = TRANSPORT
        states.append(make_chain_state(g0, model, regime, rngs[i]))
    scfg = SamplerConfig(proposal=cfg.proposal, v_threshold=v_threshold)
    report = run_chains_lockstep(model, states, scfg, cfg.chain_len)
    return report.final_graphs


@dataclass
class TrainResult:
    model: EnergyModel
    history: list[dict]
    v_threshold: float
    data_mean: float
    data_std: float
    noise_mean: float
    proposal: ProposalConfig
    wall_time: float

    def write_history(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "flow_loss", "cl_loss", "v_th", "mean_neg_energy"])
            for row in self.history:
                w.writerow(
                    [
                        row["step"],
                        repr(row["flow_loss"]),
                        repr(row["cl_loss"]),
                        repr(row["v_th"]),
                        repr(row["mean_neg_energy"]),
                    ]
                )


def energy_band(model: EnergyModel, graphs: list[Graph]) -> tuple[float, float]:
    vs = model.batch_energies(graphs)
    return float(vs.mean()), float(vs.std())


def train(
    dataset: Dataset,
    cfg: TrainConfig,
    model: EnergyModel | None = None,
    out_dir: str | Path | None = None,
    calibration_space: list[ProposalConfig] | None = None,
) -> TrainResult:
    """Warmup on the gradient-matching loss alone, optional sampler
    calibration on the frozen warm model, then joint training with
    sampler-generated negatives."""
    t0 = time.perf_counter()
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    spec = dataset.spec
    model = model or EnergyModel(spec, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr_warmup)
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    v_th = float(energy_band(model, dataset.graphs[: min(256, len(dataset))])[0])
    history: list[dict] = []
    last_ckpt: str | None = None
    persistent: list[Graph] | None = None
    cfg_live = cfg

    total = cfg.n_warmup + cfg.n_joint
    for step in range(total):
        joint = step >= cfg.n_warmup
        if step == cfg.n_warmup:
            if calibration_space:
                best, _ = calibrate_sampler(
                    model,
                    dataset,
                    calibration_space,
                    v_threshold=v_th,
                    seed=cfg.seed + 1,
                )
                cfg_live = replace(cfg, proposal=best)
            for group in opt.param_groups:
                group["lr"] = cfg.lr_joint

        idx = rng.integers(0, len(dataset.graphs), size=cfg.batch_size)
        data_batch = [dataset.graphs[int(i)] for i in idx]
        noise_batch = _noise_batch_like(data_batch, spec, rng)
        coupling = minibatch_coupling(noise_batch, data_batch, dataset.signature_alpha)
        samples = []
        for (si, ti) in coupling.pairs:
            t = float(rng.random())
            samples.append(sample_interpolant(noise_batch[si], data_batch[ti], t, rng))
        loss_flow = flow_loss_of(model, samples)

        mean_neg = float("nan")
        loss_cl = torch.zeros((), dtype=torch.float64)
        if joint and cfg.lambda_cl > 0:
            negatives = sample_negatives(
                model, dataset, cfg_live, v_th, rng, starts=persistent
            )
            if cfg.persistent_negatives:
                persistent = negatives
            loss_cl = contrastive_loss(model, data_batch, negatives)
            mean_neg = float(model.batch_energies(negatives).mean())

        loss = loss_flow + cfg.lambda_cl * loss_cl
        if not torch.isfinite(loss):
            raise TrainingDiverged(step, last_ckpt)
        opt.zero_grad()
        loss.backward()
        opt.step()

        with torch.no_grad():
            data_v = model.batch_energies(data_batch).mean()
        v_th = cfg.v_th_decay * v_th + (1.0 - cfg.v_th_decay) * float(data_v)

        if step % cfg.log_every == 0 or step == total - 1 or joint:
            history.append(
                {
                    "step": step,
                    "flow_loss": float(loss_flow.detach()),
                    "cl_loss": float(loss_cl.detach()),
                    "v_th": v_th,
                    "mean_neg_energy": mean_neg,
                }
            )
        if out_dir and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            last_ckpt = str(out_dir / f"checkpoint_{step:07d}.json")
            save_checkpoint(model, last_ckpt, extra={"step": step, "v_th": v_th})

    data_mean, data_std = energy_band(model, dataset.graphs[: min(2048, len(dataset))])
    hist = dataset.node_count_histogram
    noise_rng = np.random.default_rng(cfg.seed + 7)
    noise_ref = [init_noise(spec, hist, noise_rng) for _ in range(512)]
    noise_mean, _ = energy_band(model, noise_ref)
    result = TrainResult(
        model=model,
        history=history,
        v_threshold=v_th,
        data_mean=data_mean,
        data_std=data_std,
        noise_mean=noise_mean,
        proposal=cfg_live.proposal,
        wall_time=time.perf_counter() - t0,
    )
    if out_dir:
        save_checkpoint(
            model,
            out_dir / "model.json",
            extra={
                "v_th": v_th,
                "data_mean": data_mean,
                "data_std": data_std,
                "noise_mean": noise_mean,
            },
        )
        result.write_history(out_dir / "history.csv")
    return result


def gradient_scale(model: EnergyModel, dataset: Dataset, rng: np.random.Generator, count: int = 64) -> float:
    """Median per-site spread of the input gradient over noise states; the
    natural unit for proposal temperatures and edit penalties."""
    hist = dataset.node_count_histogram
    spreads = []
    for _ in range(count):
        g = init_noise(dataset.spec, hist, rng)
        grad = model.grad_input(embed(g), g.n)
        gn = grad.node_grad[: g.n]
        spreads.append(np.ptp(gn, axis=1).tolist())
        act = dataset.spec.active_pair_indices(g.n)
        if act.size:
            spreads.append(np.ptp(grad.pair_grad[act], axis=1).tolist())
    flat = np.concatenate([np.atleast_1d(s) for s in spreads])
    return float(max(np.median(flat), 1e-9))


def default_calibration_grid(
    model: EnergyModel, dataset: Dataset, rng: np.random.Generator
) -> list[ProposalConfig]:
    """Candidate proposal settings with the default geometry (edit-penalty
    to temperature ratios) rescaled to the model's gradient magnitude."""
    base = ProposalConfig.fixed_defaults()
    ratio_node = base.lam_node / base.beta_proposal
    ratio_edge = base.lam_edge / base.beta_proposal
    scale = gradient_scale(model, dataset, rng)
    grid = []
    for c in (0.5, 1.0, 2.0, 4.0):
        beta = c / scale
        grid.append(
            ProposalConfig(
                beta_proposal=beta,
                lam_node=max(ratio_node * beta, 1e-6),
                lam_edge=max(ratio_edge * beta, 1e-6),
            ).with_beta_mh(beta)
        )
    return grid


def calibrate_sampler(
    model: EnergyModel,
    dataset: Dataset,
    search_space: list[ProposalConfig],
    v_threshold: float,
    chains: int = 16,
    steps: int = 100,
    seed: int = 0,
) -> tuple[ProposalConfig, list[dict]]:
    """Pick the proposal settings whose noise-initialized chains end at the
    lowest mean energy under the frozen model; ties keep the earliest entry."""
    if not search_space:
        raise ValueError("empty search space")
    hist = dataset.node_count_histogram
    table: list[dict] = []
    best_cfg, best_score = None, np.inf
    for k, pc in enumerate(search_space):
        rngs = chain_rngs(seed + 1000 * k, chains)
        states = [
            make_chain_state(init_noise(dataset.spec, hist, r), model, TRANSPORT, r)
            for r in rngs
        ]
        scfg = SamplerConfig(proposal=pc, v_threshold=v_threshold)
        report = run_chains_lockstep(model, states, scfg, steps)
        score = float(model.batch_energies(report.final_graphs).mean())
        table.append({"config": pc, "mean_energy": score})
        if score < best_score:
            best_cfg, best_score = pc, score
    return best_cfg, table
