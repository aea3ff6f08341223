"""Conditional generation: a differentiable property predictor, the
composite target it induces, and an energy-based stand-in for diffusion
time when the predictor is noise-conditioned."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .data import Dataset
from .energy import EnergyGradient, EnergyModel, GraphBackbone
from .graphs import Graph, GraphSpec, embed, random_graph
from .training import sample_interpolant


def edge_count_property(g: Graph) -> float:
    """Toy target: non-absent edge count normalized by the pair capacity."""
    return g.edge_count() / g.spec.n_pairs


class PropertyRegressor(nn.Module):
    """Graph-to-scalar predictor; optionally takes a time scalar describing
    how corrupted the input is (1 = clean)."""

    def __init__(
        self,
        spec: GraphSpec,
        time_conditioned: bool = False,
        n_layers: int = 2,
        hidden: int = 32,
        seed: int = 0,
    ):
        super().__init__()
        self.spec = spec
        self.time_conditioned = time_conditioned
        self.net = GraphBackbone(
            spec, n_layers, hidden, seed, extra_globals=1 if time_conditioned else 0
        )

    def forward(self, emb: torch.Tensor, n: torch.Tensor, t: torch.Tensor | None = None):
        if self.time_conditioned:
            if t is None:
                raise ValueError("time-conditioned regressor needs t")
            return self.net(emb, n, extra=t.reshape(-1, 1))
        return self.net(emb, n)

    def predict(self, graphs: list[Graph], t: float | np.ndarray | None = None) -> np.ndarray:
        embs = torch.from_numpy(np.stack([embed(g) for g in graphs]))
        ns = torch.from_numpy(np.array([g.n for g in graphs], dtype=np.int64))
        with torch.no_grad():
            if self.time_conditioned:
                tv = torch.full((len(graphs),), float(t), dtype=torch.float64) if np.isscalar(t) else torch.from_numpy(np.asarray(t, dtype=np.float64))
                return self.forward(embs, ns, tv).numpy()
            return self.forward(embs, ns).numpy()


def time_proxy(v_x: float, noise_mean: float, data_mean: float) -> float:
    """Linear position of the current energy between the noise band (t=0)
    and the data band (t=1), clamped to [0, 1]."""
    if not noise_mean > data_mean:
        raise ValueError("degenerate energy bands: noise mean must exceed data mean")
    t = (noise_mean - v_x) / (noise_mean - data_mean)
    return float(min(1.0, max(0.0, t)))


@dataclass
class GuidanceConfig:
    target: float  # desired property value
    weight: float  # penalty strength
    constraint: str = "<="  # evaluation direction
    threshold: float | None = None  # constraint level (defaults to target)

    def __post_init__(self):
        if self.weight < 0:
            raise ValueError("guidance weight must be >= 0")
        if self.constraint not in ("<=", ">="):
            raise ValueError("constraint must be '<=' or '>='")

    def satisfied(self, value: float) -> bool:
        th = self.target if self.threshold is None else self.threshold
        return value <= th if self.constraint == "<=" else value >= th


class CompositeEnergy:
    """Base potential plus a quadratic pull of the predicted property toward
    a target; exposes the same evaluation interface as the model so every
    sampler runs on it unchanged (acceptance then targets the composite).

    With a time-conditioned predictor the time input comes from the energy
    position between the stored noise/data bands and is differentiated
    through, so input gradients match the evaluated composite exactly.
    """

    def __init__(
        self,
        model: EnergyModel,
        regressor: PropertyRegressor | None,
        target: float,
        weight: float,
        bands: tuple[float, float] | None = None,  # (noise_mean, data_mean)
        fixed_time: float | None = None,
    ):
        self.model = model
        self.regressor = regressor
        self.target = float(target)
        self.weight = float(weight)
        self.bands = bands
        self.fixed_time = fixed_time
        self.spec = model.spec
        if weight > 0 and regressor is None:
            raise ValueError("guidance weight > 0 needs a regressor")
        if (
            regressor is not None
            and regressor.time_conditioned
            and bands is None
            and fixed_time is None
        ):
            raise ValueError("time-conditioned regressor needs bands or fixed_time")

    def torch_values(self, emb: torch.Tensor, ns: torch.Tensor) -> torch.Tensor:
        v = self.model(emb, ns)
        if self.weight == 0.0:
            return v
        if self.regressor.time_conditioned:
            if self.fixed_time is not None:
                t = torch.full_like(v, float(self.fixed_time))
            else:
                noise_mean, data_mean = self.bands
                t = ((noise_mean - v) / (noise_mean - data_mean)).clamp(0.0, 1.0)
            f = self.regressor(emb, ns, t)
        else:
            f = self.regressor(emb, ns)
        return v + self.weight * (f - self.target) ** 2

    # sampler-facing protocol -------------------------------------------------

    def grad_input(self, emb: np.ndarray, n: int) -> EnergyGradient:
        t = torch.from_numpy(np.ascontiguousarray(emb, dtype=np.float64))
        t.requires_grad_(True)
        val = self.torch_values(t[None], torch.tensor([n]))[0]
        (grad,) = torch.autograd.grad(val, t)
        return EnergyGradient(float(val.detach()), grad.numpy(), self.spec)

    def batch_value_grad(self, embs: np.ndarray, ns: np.ndarray):
        t = torch.from_numpy(np.ascontiguousarray(embs, dtype=np.float64))
        t.requires_grad_(True)
        vals = self.torch_values(t, torch.from_numpy(np.ascontiguousarray(ns, dtype=np.int64)))
        (grad,) = torch.autograd.grad(vals.sum(), t)
        return vals.detach().numpy(), grad.numpy()

    def batch_values(self, embs: np.ndarray, ns: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            t = torch.from_numpy(np.ascontiguousarray(embs, dtype=np.float64))
            return self.torch_values(
                t, torch.from_numpy(np.ascontiguousarray(ns, dtype=np.int64))
            ).numpy()

    def batch_energies(self, graphs: list[Graph]) -> np.ndarray:
        embs = np.stack([embed(g) for g in graphs])
        ns = np.array([g.n for g in graphs], dtype=np.int64)
        return self.batch_values(embs, ns)


def conditional_energy(
    model: EnergyModel,
    regressor: PropertyRegressor | None,
    target: float,
    weight: float,
    emb: np.ndarray,
    n: int,
    bands: tuple[float, float] | None = None,
    fixed_time: float | None = None,
) -> tuple[float, np.ndarray]:
    """Value and input gradient of the composite target at one embedding."""
    comp = CompositeEnergy(model, regressor, target, weight, bands, fixed_time)
    g = comp.grad_input(emb, n)
    return g.value, g.grad


@dataclass
class RegressorConfig:
    time_conditioned: bool = False
    n_layers: int = 2
    hidden: int = 32
    steps: int = 2000
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0


def train_regressor(dataset: Dataset, cfg: RegressorConfig) -> PropertyRegressor:
    """Fit the predictor to the dataset's property labels; the
    noise-conditioned variant trains on endpoint-mixture corruptions of the
    data with the corruption level fed as the time input."""
    if dataset.properties is None:
        raise ValueError("dataset has no property labels")
    reg = PropertyRegressor(
        dataset.spec, cfg.time_conditioned, cfg.n_layers, cfg.hidden, cfg.seed
    )
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(reg.parameters(), lr=cfg.lr)
    graphs = dataset.graphs
    props = np.asarray(dataset.properties, dtype=np.float64)
    for _ in range(cfg.steps):
        idx = rng.integers(0, len(graphs), size=cfg.batch_size)
        batch = [graphs[int(i)] for i in idx]
        target = torch.from_numpy(props[idx])
        if cfg.time_conditioned:
            ts = rng.random(cfg.batch_size)
            noised = []
            for g, t in zip(batch, ts):
                noise = random_graph(dataset.spec, g.n, rng)
                noised.append(sample_interpolant(noise, g, float(t), rng).xt)
            embs = torch.from_numpy(np.stack([embed(g) for g in noised]))
            ns = torch.from_numpy(np.array([g.n for g in noised], dtype=np.int64))
            pred = reg(embs, ns, torch.from_numpy(ts))
        else:
            embs = torch.from_numpy(np.stack([embed(g) for g in batch]))
            ns = torch.from_numpy(np.array([g.n for g in batch], dtype=np.int64))
            pred = reg(embs, ns)
        loss = ((pred - target) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    return reg


def regressor_mae(
    reg: PropertyRegressor,
    dataset: Dataset,
    t: float,
    rng: np.random.Generator,
    count: int = 512,
) -> float:
    """Mean absolute error on corruption level t: inputs are endpoint
    mixtures of noise and data, targets are the clean properties."""
    if dataset.properties is None:
        raise ValueError("dataset has no property labels")
    idx = rng.integers(0, len(dataset.graphs), size=count)
    graphs, targets = [], []
    for i in idx:
        g = dataset.graphs[int(i)]
        noise = random_graph(dataset.spec, g.n, rng)
        graphs.append(sample_interpolant(noise, g, t, rng).xt)
        targets.append(dataset.properties[int(i)])
    pred = reg.predict(graphs, t=t if reg.time_conditioned else None)
    return float(np.abs(pred - np.asarray(targets)).mean())
