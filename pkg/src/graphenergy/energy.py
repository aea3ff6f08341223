"""Permutation-invariant scalar potential over graph embeddings.

The network runs a few rounds of node/pair message passing (weights shared
across sites within a round, so every round is permutation-equivariant),
then pools nodes and pairs by summation and applies a final MLP, which makes
the scalar output invariant under node relabeling.  All arithmetic is
float64 on CPU; gradients w.r.t. the flat embedding drive the samplers and
gradients w.r.t. parameters drive training, including one nested reverse
pass for losses that differentiate through the input gradient.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .graphs import Graph, GraphSpec, embed


class EnergyNumericsError(RuntimeError):
    """Non-finite intermediate value; carries the offending round index."""

    def __init__(self, layer: int, what: str = "activation"):
        super().__init__(f"non-finite {what} in round {layer}")
        self.layer = layer


@dataclass
class EnergyGradient:
    """Energy value plus its exact input gradient in embedding layout."""

    value: float
    grad: np.ndarray  # (spec.dim,)
    spec: GraphSpec

    @property
    def node_grad(self) -> np.ndarray:
        return self.grad[: self.spec.node_block_end].reshape(
            self.spec.n_max, self.spec.l_node
        )

    @property
    def pair_grad(self) -> np.ndarray:
        return self.grad[self.spec.node_block_end :].reshape(
            self.spec.n_pairs, self.spec.l_edge
        )


def _seeded_linear(inp: int, out: int, gen: torch.Generator) -> nn.Linear:
    lin = nn.Linear(inp, out, dtype=torch.float64)
    bound = 1.0 / np.sqrt(inp)
    with torch.no_grad():
        lin.weight.uniform_(-bound, bound, generator=gen)
        lin.bias.uniform_(-bound, bound, generator=gen)
    return lin


class GraphBackbone(nn.Module):
    """Equivariant message-passing trunk shared by the potential and the
    property regressor.  ``extra_globals`` appends scalars (e.g. a time
    input) to the initial global feature."""

    def __init__(
        self,
        spec: GraphSpec,
        n_layers: int = 3,
        hidden: int = 64,
        seed: int = 0,
        extra_globals: int = 0,
    ):
        super().__init__()
        if n_layers < 1 or hidden < 1:
            raise ValueError("n_layers and hidden must be >= 1")
        self.spec = spec
        self.n_layers = n_layers
        self.hidden = hidden
        self.seed = seed
        self.extra_globals = extra_globals
        gen = torch.Generator().manual_seed(seed)
        h = hidden
        self.node_in = _seeded_linear(spec.l_node, h, gen)
        self.pair_in = _seeded_linear(spec.l_edge, h, gen)
        self.glob_in = _seeded_linear(2 + extra_globals, h, gen)
        self.pair_upd = nn.ModuleList()
        self.msg_lin = nn.ModuleList()
        self.msg_gate = nn.ModuleList()
        self.node_upd = nn.ModuleList()
        self.glob_upd = nn.ModuleList()
        for _ in range(n_layers):
            self.pair_upd.append(_seeded_linear(3 * h, h, gen))
            self.msg_lin.append(_seeded_linear(h, h, gen))
            self.msg_gate.append(_seeded_linear(h, h, gen))
            self.node_upd.append(_seeded_linear(3 * h, h, gen))
            self.glob_upd.append(_seeded_linear(3 * h, h, gen))
        self.out1 = _seeded_linear(3 * h, h, gen)
        self.out2 = _seeded_linear(h, 1, gen)

        iu, ju = [], []
        for (i, j) in spec.pairs():
            iu.append(i)
            ju.append(j)
        self.register_buffer("iu", torch.tensor(iu, dtype=torch.long), persistent=False)
        self.register_buffer("ju", torch.tensor(ju, dtype=torch.long), persistent=False)
        self.register_buffer(
            "class_weight",
            torch.arange(spec.l_edge, dtype=torch.float64),
            persistent=False,
        )

    def forward(
        self, emb: torch.Tensor, n: torch.Tensor, extra: torch.Tensor | None = None
    ) -> torch.Tensor:
        """emb: (B, dim) float64; n: (B,) long; returns (B,) scalars."""
        spec = self.spec
        B = emb.shape[0]
        Xin = emb[:, : spec.node_block_end].reshape(B, spec.n_max, spec.l_node)
        Pin = emb[:, spec.node_block_end :].reshape(B, spec.n_pairs, spec.l_edge)
        nf = n.to(torch.float64)
        node_mask = (
            torch.arange(spec.n_max)[None, :] < n[:, None]
        ).to(torch.float64)[..., None]
        pair_mask = (self.ju[None, :] < n[:, None]).to(torch.float64)[..., None]

        size_feat = nf / spec.n_max
        deg_feat = 2.0 * (Pin * pair_mask * self.class_weight).sum(dim=(1, 2)) / nf
        f0 = torch.stack([size_feat, deg_feat], dim=1)
        if self.extra_globals:
            if extra is None or extra.shape != (B, self.extra_globals):
                raise ValueError("backbone expects extra global features")
            f0 = torch.cat([f0, extra], dim=1)

        X = F.silu(self.node_in(Xin)) * node_mask
        P = F.silu(self.pair_in(Pin)) * pair_mask
        f = F.silu(self.glob_in(f0))
        n_pair_active = (nf * (nf - 1.0) / 2.0).clamp(min=1.0)

        for l in range(self.n_layers):
            fi = f[:, None, :]
            P = F.silu(
                self.pair_upd[l](
                    torch.cat(
                        [P, X[:, self.iu] + X[:, self.ju], fi.expand(-1, spec.n_pairs, -1)],
                        dim=2,
                    )
                )
            ) * pair_mask
            carry = self.msg_lin[l](P)
            gate = F.silu(self.msg_gate[l](X))
            msg = torch.zeros_like(X)
            msg = msg.index_add(1, self.iu, carry * gate[:, self.ju])
            msg = msg.index_add(1, self.ju, carry * gate[:, self.iu])
            X = F.silu(
                self.node_upd[l](
                    torch.cat([X, msg, fi.expand(-1, spec.n_max, -1)], dim=2)
                )
            ) * node_mask
            f = F.silu(
                self.glob_upd[l](
                    torch.cat(
                        [
                            f,
                            X.sum(dim=1) / nf[:, None],
                            P.sum(dim=1) / n_pair_active[:, None],
                        ],
                        dim=1,
                    )
                )
            )
            if not torch.isfinite(f).all() or not torch.isfinite(X).all():
                raise EnergyNumericsError(l)

        pooled = torch.cat([X.sum(dim=1), P.sum(dim=1), f], dim=1)
        out = self.out2(F.silu(self.out1(pooled))).squeeze(-1)
        if not torch.isfinite(out).all():
            raise EnergyNumericsError(self.n_layers, "readout")
        return out


def backbone_param_count(
    spec: GraphSpec, n_layers: int, hidden: int, extra_globals: int = 0
) -> int:
    """Closed-form parameter count matching GraphBackbone's construction."""
    h = hidden
    total = (spec.l_node + 1) * h + (spec.l_edge + 1) * h + (3 + extra_globals) * h
    total += n_layers * ((3 * h + 1) * h * 3 + (h + 1) * h * 2)
    total += (3 * h + 1) * h + (h + 1)
    return total


class EnergyModel(nn.Module):
    """Scalar potential V over embeddings, with the evaluation interface the
    samplers consume: value plus input gradient, single state or batched."""

    def __init__(self, spec: GraphSpec, n_layers: int = 3, hidden: int = 64, seed: int = 0):
        super().__init__()
        self.spec = spec
        self.n_layers = n_layers
        self.hidden = hidden
        self.seed = seed
        self.net = GraphBackbone(spec, n_layers, hidden, seed)

    def forward(self, emb: torch.Tensor, n: torch.Tensor) -> torch.Tensor:
        return self.net(emb, n)

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    # ---- numpy-facing evaluation used by proposals / samplers -------------

    def energy_of_embedding(self, emb: np.ndarray, n: int) -> float:
        with torch.no_grad():
            t = torch.from_numpy(np.ascontiguousarray(emb, dtype=np.float64))
            return float(self.forward(t[None], torch.tensor([n]))[0])

    def energy_of(self, g: Graph) -> float:
        return self.energy_of_embedding(embed(g), g.n)

    def grad_input(self, emb: np.ndarray, n: int) -> EnergyGradient:
        t = torch.from_numpy(np.ascontiguousarray(emb, dtype=np.float64))
        t.requires_grad_(True)
        v = self.forward(t[None], torch.tensor([n]))[0]
        (grad,) = torch.autograd.grad(v, t)
        return EnergyGradient(float(v.detach()), grad.numpy(), self.spec)

    def grad_of(self, g: Graph) -> EnergyGradient:
        return self.grad_input(embed(g), g.n)

    def batch_value_grad(self, embs: np.ndarray, ns: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Energies and input gradients for a batch; rows are independent."""
        t = torch.from_numpy(np.ascontiguousarray(embs, dtype=np.float64))
        t.requires_grad_(True)
        v = self.forward(t, torch.from_numpy(np.ascontiguousarray(ns, dtype=np.int64)))
        (grad,) = torch.autograd.grad(v.sum(), t)
        return v.detach().numpy(), grad.numpy()

    def batch_values(self, embs: np.ndarray, ns: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            t = torch.from_numpy(np.ascontiguousarray(embs, dtype=np.float64))
            return self.forward(
                t, torch.from_numpy(np.ascontiguousarray(ns, dtype=np.int64))
            ).numpy()

    def batch_energies(self, graphs: list[Graph]) -> np.ndarray:
        embs = np.stack([embed(g) for g in graphs])
        ns = np.array([g.n for g in graphs], dtype=np.int64)
        return self.batch_values(embs, ns)


def init_model(spec: GraphSpec, n_layers: int = 3, hidden: int = 64, seed: int = 0) -> EnergyModel:
    return EnergyModel(spec, n_layers, hidden, seed)


def loss_gradients(model: nn.Module, loss: torch.Tensor) -> dict[str, torch.Tensor]:
    """Exact parameter gradients of a scalar loss built from model outputs."""
    if not torch.isfinite(loss):
        raise EnergyNumericsError(-1, "loss")
    params = dict(model.named_parameters())
    grads = torch.autograd.grad(
        loss, list(params.values()), allow_unused=True, create_graph=False
    )
    return {
        name: (g if g is not None else torch.zeros_like(p))
        for (name, p), g in zip(params.items(), grads)
    }


# ---- checkpoints ----------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(model: EnergyModel, path: str | Path, extra: dict | None = None) -> None:
    """Versioned JSON tensor dump; float64 values round-trip exactly."""
    doc = {
        "version": CHECKPOINT_VERSION,
        "kind": "energy",
        "spec": model.spec.to_dict(),
        "n_layers": model.n_layers,
        "hidden": model.hidden,
        "seed": model.seed,
        "extra": extra or {},
        "params": {
            name: p.detach().numpy().tolist() for name, p in model.named_parameters()
        },
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_checkpoint(path: str | Path) -> tuple[EnergyModel, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != CHECKPOINT_VERSION or doc.get("kind") != "energy":
        raise ValueError(f"unsupported checkpoint {path}")
    model = EnergyModel(
        GraphSpec.from_dict(doc["spec"]), doc["n_layers"], doc["hidden"], doc["seed"]
    )
    state = {
        name: torch.tensor(vals, dtype=torch.float64)
        for name, vals in doc["params"].items()
    }
    model.load_state_dict(state)
    return model, doc.get("extra", {})
