"""Command-line entry points: dataset generation, training, calibration,
sampling, guided sampling, geodesic reports, evaluation, and the
small-space stationarity check.

Every command reads one JSON config (sections mirror the module configs;
all defaults overridable) and writes its outputs under --out.  Exit codes:
0 success, 1 usage/config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .data import (
    Dataset,
    ValenceRules,
    exact_gibbs,
    generate_toy_dataset,
    stat_distance,
    total_variation,
    validity,
    vun_metrics,
)
from .energy import EnergyModel, init_model, load_checkpoint, save_checkpoint
from .geodesics import (
    GeodesicConfig,
    arc_uniform_positions,
    optimize_geodesics,
    path_mean_energy,
    path_validity,
    sample_along_path,
)
from .graphs import GraphSpec, random_graph
from .guidance import (
    CompositeEnergy,
    GuidanceConfig,
    RegressorConfig,
    edge_count_property,
    train_regressor,
)
from .matching import fgw_cost_approx
from .proposals import MIXING, TRANSPORT, ProposalConfig
from .sampler import (
    SamplerConfig,
    chain_rngs,
    init_data,
    init_noise,
    make_chain_state,
    run_batch,
    run_chain,
    run_chains_lockstep,
)
from .training import (
    TrainConfig,
    calibrate_sampler,
    default_calibration_grid,
    train,
)


class UsageError(ValueError):
    pass


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {path}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as err:
        raise UsageError(f"malformed config: {err}") from err


def _spec(cfg: dict) -> GraphSpec:
    s = cfg.get("spec", {})
    return GraphSpec(
        int(s.get("n_max", 8)), int(s.get("l_node", 2)), int(s.get("l_edge", 2))
    )


def _rules(cfg: dict, spec: GraphSpec) -> ValenceRules:
    r = cfg.get("rules", {})
    caps = tuple(r.get("max_degree", [3] * spec.l_node))
    if len(caps) != spec.l_node:
        raise UsageError("rules.max_degree length must equal spec.l_node")
    return ValenceRules(caps, bool(r.get("connectivity_required", True)))


def _proposal(cfg: dict, key: str = "proposal") -> ProposalConfig:
    p = cfg.get(key)
    if p is None:
        return ProposalConfig.fixed_defaults()
    base = asdict(ProposalConfig.fixed_defaults())
    base.update(p)
    return ProposalConfig(**base)


def _dataset_path(cfg: dict, out: Path) -> Path:
    d = cfg.get("dataset", {})
    return Path(d["path"]) if "path" in d else out / "data.jsonl"


def _load_dataset(cfg: dict, out: Path) -> Dataset:
    path = _dataset_path(cfg, out)
    if not path.exists():
        raise UsageError(f"dataset not found at {path}; run gen-data first")
    return Dataset.load(path, _spec(cfg))


def _load_model(cfg: dict, out: Path) -> tuple[EnergyModel, dict]:
    path = Path(cfg.get("model", {}).get("path", out / "model.json"))
    if not path.exists():
        raise UsageError(f"model checkpoint not found at {path}; run train first")
    return load_checkpoint(path)


def cmd_gen_data(cfg: dict, out: Path, args) -> int:
    spec = _spec(cfg)
    rules = _rules(cfg, spec)
    d = cfg.get("dataset", {})
    rng = np.random.default_rng(int(cfg.get("seed", 0)))
    ds = generate_toy_dataset(
        spec,
        rules,
        int(d.get("size", 5000)),
        rng,
        n_range=tuple(d.get("n_range", (max(2, spec.n_max // 2), spec.n_max))),
        extra_edge_prob=float(d.get("extra_edge_prob", 0.3)),
    )
    ds.properties = [edge_count_property(g) for g in ds.graphs]
    path = _dataset_path(cfg, out)
    ds.save(path)
    print(f"wrote {len(ds)} graphs to {path}")
    print(f"node-count histogram: {ds.node_count_histogram}")
    return 0


def cmd_train(cfg: dict, out: Path, args) -> int:
    ds = _load_dataset(cfg, out)
    t = dict(cfg.get("training", {}))
    calibrate = t.pop("calibrate", True)
    mcfg = cfg.get("model", {})
    model = init_model(
        ds.spec,
        int(mcfg.get("n_layers", 3)),
        int(mcfg.get("hidden", 64)),
        int(mcfg.get("seed", cfg.get("seed", 0))),
    )
    tc_kwargs = {k: v for k, v in t.items() if k != "proposal"}
    tcfg = TrainConfig(proposal=_proposal(cfg), **tc_kwargs)
    space = None
    if calibrate:
        space = default_calibration_grid(
            model, ds, np.random.default_rng(int(cfg.get("seed", 0)) + 3)
        )
    res = train(ds, tcfg, model=model, out_dir=out, calibration_space=space)
    save_checkpoint(
        res.model,
        out / "model.json",
        extra={
            "v_th": res.v_threshold,
            "data_mean": res.data_mean,
            "data_std": res.data_std,
            "noise_mean": res.noise_mean,
            "proposal": asdict(res.proposal),
        },
    )
    print(f"trained in {res.wall_time:.1f}s; v_th={res.v_threshold:.4f}")
    print(f"data band {res.data_mean:.4f} +- {res.data_std:.4f}; noise {res.noise_mean:.4f}")
    return 0


def cmd_calibrate(cfg: dict, out: Path, args) -> int:
    ds = _load_dataset(cfg, out)
    model, extra = _load_model(cfg, out)
    rng = np.random.default_rng(int(cfg.get("seed", 0)) + 3)
    space = default_calibration_grid(model, ds, rng)
    best, table = calibrate_sampler(
        model, ds, space, v_threshold=float(extra.get("v_th", 0.0)),
        seed=int(cfg.get("seed", 0)),
    )
    rows = [
        {"config": asdict(r["config"]), "mean_energy": r["mean_energy"]} for r in table
    ]
    (out / "calibration.json").write_text(
        json.dumps({"best": asdict(best), "table": rows}, indent=2, sort_keys=True)
    )
    for r in table:
        print(f"beta={r['config'].beta_proposal:.3f} -> mean energy {r['mean_energy']:.4f}")
    print(f"best: beta={best.beta_proposal:.3f}")
    return 0


def _stored_proposal(extra: dict, cfg: dict) -> ProposalConfig:
    if "proposal" in cfg:
        return _proposal(cfg)
    if "proposal" in extra:
        return ProposalConfig(**extra["proposal"])
    return ProposalConfig.fixed_defaults()


def _write_samples(path: Path, graphs) -> None:
    with open(path, "w") as fh:
        for g in graphs:
            edges = []
            for (i, j) in g.spec.active_pairs(g.n):
                c = int(g.edge_labels[g.spec.pair_index(i, j)])
                if c != 0:
                    edges.append([i, j, c])
            fh.write(
                json.dumps(
                    {
                        "n": g.n,
                        "node_labels": [int(v) for v in g.node_labels[: g.n]],
                        "edges": sorted(edges),
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def cmd_sample(cfg: dict, out: Path, args) -> int:
    ds = _load_dataset(cfg, out)
    model, extra = _load_model(cfg, out)
    s = cfg.get("sampling", {})
    chains = int(args.chains or s.get("chains", 128))
    steps = int(args.steps or s.get("steps", 500))
    init_kind = args.init or s.get("init", "noise")
    rngs = chain_rngs(int(cfg.get("seed", 0)) + 17, chains)
    pc = _stored_proposal(extra, cfg)
    if init_kind == "data" and "annealed_proposal" in cfg:
        pc = _proposal(cfg, "annealed_proposal")
    scfg = SamplerConfig(proposal=pc, v_threshold=float(extra.get("v_th", 0.0)))
    inits = []
    for r in rngs:
        if init_kind == "noise":
            g0 = init_noise(ds.spec, ds.node_count_histogram, r)
            inits.append(make_chain_state(g0, model, TRANSPORT, r))
        elif init_kind == "data":
            inits.append(make_chain_state(init_data(ds, r), model, MIXING, r))
        else:
            raise UsageError(f"unknown init {init_kind!r} (use noise|data)")
    if bool(s.get("lockstep", True)):
        rep = run_chains_lockstep(model, inits, scfg, steps)
    else:
        rep = run_batch(model, inits, scfg, steps, parallelism=int(s.get("parallelism", 1)))
    rep.to_csv(out / "trace.csv")
    _write_samples(out / "samples.jsonl", rep.final_graphs)
    rules = _rules(cfg, ds.spec)
    v, u, nov, vun = vun_metrics(rep.final_graphs, ds, rules)
    print(
        f"{chains} chains x {steps} steps in {rep.wall_time:.1f}s; "
        f"acceptance {rep.mean_mixing_acceptance:.3f}"
    )
    print(f"validity {v:.3f} uniqueness {u:.3f} novelty {nov:.3f} VUN {vun:.3f}")
    return 0


def cmd_guide(cfg: dict, out: Path, args) -> int:
    ds = _load_dataset(cfg, out)
    if ds.properties is None:
        raise UsageError("dataset has no property labels; regenerate with gen-data")
    model, extra = _load_model(cfg, out)
    g = cfg.get("guidance", {})
    rcfg_dict = dict(g.get("regressor", {}))
    rcfg = RegressorConfig(**{**{"time_conditioned": True}, **rcfg_dict})
    reg = train_regressor(ds, rcfg)
    bands = (float(extra["noise_mean"]), float(extra["data_mean"]))
    target = float(g.get("target", float(np.quantile(ds.properties, 0.2))))
    constraint = g.get("constraint", "<=")
    threshold = float(g.get("threshold", target))
    weights = list(g.get("weight_grid", [0.01, 0.1, 1.0, 10.0, 100.0]))
    s = cfg.get("sampling", {})
    chains = int(args.chains or g.get("chains", s.get("chains", 128)))
    steps = int(args.steps or g.get("steps", s.get("steps", 300)))
    pc = _stored_proposal(extra, cfg)
    rules = _rules(cfg, ds.spec)
    rows = []
    for w in weights:
        comp = CompositeEnergy(model, reg, target, float(w), bands=bands)
        rngs = chain_rngs(int(cfg.get("seed", 0)) + 31, chains)
        inits = [
            make_chain_state(init_noise(ds.spec, ds.node_count_histogram, r), comp, TRANSPORT, r)
            for r in rngs
        ]
        scfg = SamplerConfig(proposal=pc, v_threshold=float(extra.get("v_th", 0.0)))
        rep = run_chains_lockstep(comp, inits, scfg, steps)
        finals = rep.final_graphs
        gc = GuidanceConfig(target, float(w), constraint, threshold)
        sat = float(np.mean([gc.satisfied(edge_count_property(x)) for x in finals]))
        v, u, nov, vun = vun_metrics(finals, ds, rules)
        rows.append(
            {
                "weight": float(w),
                "satisfied": sat,
                "validity": v,
                "uniqueness": u,
                "novelty": nov,
                "vun": vun,
            }
        )
        print(f"weight={w}: satisfied={sat:.3f} V={v:.3f} U={u:.3f} N={nov:.3f}")
    with open(out / "guided_report.csv", "w", newline="") as fh:
        w = csv.DictWriter(
            fh, fieldnames=["weight", "satisfied", "validity", "uniqueness", "novelty", "vun"]
        )
        w.writeheader()
        w.writerows(rows)
    return 0


def cmd_geodesic(cfg: dict, out: Path, args) -> int:
    ds = _load_dataset(cfg, out)
    model, extra = _load_model(cfg, out)
    gcfg_dict = dict(cfg.get("geodesic", {}))
    pairs_per_bin = int(gcfg_dict.pop("pairs_per_bin", 16))
    bins = [tuple(b) for b in gcfg_dict.pop("bins", [(2.0, 6.0), (6.0, 12.0)])]
    gcfg = GeodesicConfig(**gcfg_dict)
    rules = _rules(cfg, ds.spec)
    rng = np.random.default_rng(int(cfg.get("seed", 0)) + 41)

    binned: dict[int, list] = {k: [] for k in range(len(bins))}
    attempts = 0
    while any(len(v) < pairs_per_bin for v in binned.values()) and attempts < 200000:
        attempts += 1
        a = ds.graphs[int(rng.integers(len(ds.graphs)))]
        b = ds.graphs[int(rng.integers(len(ds.graphs)))]
        if a.n != b.n:
            continue
        dist, _ = fgw_cost_approx(a, b, "node_matching", gcfg.lam_node, gcfg.lam_edge)
        for k, (lo, hi) in enumerate(bins):
            if lo <= dist < hi and len(binned[k]) < pairs_per_bin:
                binned[k].append((a, b, dist))
                break
    rows = []
    for k, (lo, hi) in enumerate(bins):
        pairs = [(a, b) for a, b, _ in binned[k]]
        if not pairs:
            continue
        for variant, vcfg in (
            ("energy", gcfg),
            ("cost_only", GeodesicConfig(**{**gcfg_dict, "beta": 0.0, "lam_energy": 0.0})),
        ):
            paths = optimize_geodesics(pairs, model, vcfg)
            for (a, b, dist), path in zip(binned[k], paths):
                ts = arc_uniform_positions(path, gcfg.n_segments)
                grid = sample_along_path(path, ts, gcfg.samples_per_position, rng)
                rows.append(
                    {
                        "bin": f"[{lo},{hi})",
                        "variant": variant,
                        "distance": dist,
                        "avg_validity": path_validity(grid, rules),
                        "avg_energy": path_mean_energy(model, path, gcfg),
                    }
                )
        got = [r for r in rows if r["bin"] == f"[{lo},{hi})"]
        for variant in ("energy", "cost_only"):
            vals = [r["avg_validity"] for r in got if r["variant"] == variant]
            if vals:
                print(f"bin [{lo},{hi}) {variant}: avg validity {np.mean(vals):.3f}")
    with open(out / "geodesic_report.csv", "w", newline="") as fh:
        w = csv.DictWriter(
            fh, fieldnames=["bin", "variant", "distance", "avg_validity", "avg_energy"]
        )
        w.writeheader()
        w.writerows(rows)
    return 0


def cmd_evaluate(cfg: dict, out: Path, args) -> int:
    ds = _load_dataset(cfg, out)
    samples_path = Path(args.samples or out / "samples.jsonl")
    if not samples_path.exists():
        raise UsageError(f"samples not found at {samples_path}")
    samples = Dataset.load(samples_path, ds.spec).graphs
    rules = _rules(cfg, ds.spec)
    v, u, nov, vun = vun_metrics(samples, ds, rules)
    dist = stat_distance(samples, ds.graphs)
    print(f"validity {v:.4f} uniqueness {u:.4f} novelty {nov:.4f} VUN {vun:.4f}")
    print(f"feature-mean distance to training set: {dist:.6f}")
    return 0


def cmd_oracle_check(cfg: dict, out: Path, args) -> int:
    spec = GraphSpec(3, 2, 2) if args.tiny else _spec(cfg)
    model = init_model(spec, n_layers=2, hidden=16, seed=int(cfg.get("seed", 0)))
    beta = 1.0
    steps = int(args.steps or 10**6)
    pc = ProposalConfig(beta_proposal=1.0, lam_node=0.3, lam_edge=0.3).with_beta_mh(beta)
    rng = np.random.default_rng(int(cfg.get("seed", 0)) + 5)
    g0 = random_graph(spec, spec.n_max, rng)
    state = make_chain_state(g0, model, MIXING, rng)
    scfg = SamplerConfig(proposal=pc, cache_states=True, track_states=True)
    rep = run_chain(model, state, scfg, steps)
    table = exact_gibbs(model, spec, beta, n=spec.n_max)
    emp = np.zeros(len(table.graphs))
    for key, count in rep.chains[0].state_counts.items():
        emp[table.index[key]] = count
    emp /= emp.sum()
    tv = total_variation(emp, table.probs)
    print(f"{steps} mixing steps over {len(table.graphs)} states in {rep.wall_time:.1f}s")
    print(f"TV(empirical, exact Gibbs) = {tv:.5f}")
    return 0 if tv < 0.02 else 2


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "sample": cmd_sample,
    "guide": cmd_guide,
    "geodesic": cmd_geodesic,
    "evaluate": cmd_evaluate,
    "oracle-check": cmd_oracle_check,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="graphenergy")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="JSON config file")
    ap.add_argument("--out", default="runs", help="output directory")
    ap.add_argument("--steps", type=int, help="override step count")
    ap.add_argument("--chains", type=int, help="override chain count")
    ap.add_argument("--init", choices=["noise", "data"], help="chain initialization")
    ap.add_argument("--samples", help="samples file for evaluate")
    ap.add_argument("--tiny", action="store_true", help="oracle-check on the 64-state space")
    return ap


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as err:
        return 1 if err.code not in (0, None) else 0
    try:
        cfg = load_config(args.config)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, out, args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # runtime failure
        print(f"runtime error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
