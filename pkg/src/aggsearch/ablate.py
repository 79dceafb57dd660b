"""Ablation matrix: {block search on/off} x {aggregation search on/off}
plus the pruning-threshold sweep, each over several seeds.

Off-cases substitute the fixed operators (3x3 convs, max pooling) and the
fixed U-Net style wiring with gates hard-wired to 1; both off is the plain
U-Net baseline, which trains directly without a search phase. The full
model is searched once per seed and pruned at every requested threshold.
Reported metric: mean foreground Dice on the held-out validation split;
rows carry per-seed values, median, and mean +/- std.
"""

from __future__ import annotations

import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import RunConfig, ablation_preset, save_config
from .data import load_dataset
from .errors import ConfigError
from .grid import PruneConfig
from .network import Supernet
from .train import SearchRun, retrain_derived, save_checkpoint, save_model

ABLATION_SCHEMA = "agg_ablation_v1"


def _cell_net(cfg: RunConfig, sbb: bool, mssa: bool, seed: int) -> Supernet:
    return Supernet(rank=cfg.task.rank, levels=cfg.grid.levels,
                    base_channels=cfg.grid.base_channels, in_channels=1,
                    num_classes=cfg.task.num_classes, sbb=sbb, mssa=mssa,
                    decoder_mode=cfg.grid.decoder_mode, seed=seed)


def unet_template_graph(cfg: RunConfig, seed: int = 0):
    """The fixed U-Net baseline graph (no search involved)."""
    return _cell_net(cfg, sbb=False, mssa=False, seed=seed).derive(
        cfg.prune, config_hash=cfg.hash())


def matches_unet_template(graph, cfg: RunConfig) -> bool:
    net = _cell_net(cfg, sbb=False, mssa=False, seed=0)
    template_edges = set(net.geometry.unet_template_edges())
    if set(graph.edge_keys()) != template_edges:
        return False
    fixed = net.chosen_ops()
    return dict(graph.nodes) == {n: fixed.get(n, []) for n in graph.nodes}


def run_ablation(data_dir, out_dir, seeds: list[int], taus: list[float],
                 base_cfg: RunConfig | None = None, quiet: bool = True) -> str:
    if not seeds:
        raise ConfigError("ablate: need at least one seed")
    if not taus:
        raise ConfigError("ablate: need at least one tau")
    cfg = base_cfg if base_cfg is not None else ablation_preset()
    task, samples = load_dataset(data_dir)
    cfg = replace(cfg, task=task).with_paths(data=str(data_dir), out=str(out_dir))
    n_val = min(max(int(round(len(samples) * cfg.val_fraction)), 1), len(samples) - 1)
    train, val = samples[:len(samples) - n_val], samples[len(samples) - n_val:]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def log(msg: str) -> None:
        if not quiet:
            print(msg, flush=True)

    def search_cell(seed: int, sbb: bool, mssa: bool, cell: str) -> Supernet:
        run_cfg = replace(cfg, seed=seed, sbb=sbb, mssa=mssa)
        net = _cell_net(run_cfg, sbb, mssa, seed)
        run = SearchRun(net, run_cfg.search, seed)
        t0 = time.time()
        run.run(train)
        cell_dir = out / f"seed{seed}" / cell
        cell_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(cell_dir / "checkpoint", run, run_cfg.to_doc())
        log(f"  search {cell} seed={seed}: {run.step} steps in "
            f"{time.time() - t0:.0f}s, mean gate {net.mean_gate():.3f}")
        return net

    def retrain_cell(seed: int, cell: str, graph, tag: str) -> float:
        run_cfg = replace(cfg, seed=seed)
        t0 = time.time()
        net, _rows, report = retrain_derived(graph, train, val, run_cfg.retrain, seed)
        cell_dir = out / f"seed{seed}" / cell / tag
        cell_dir.mkdir(parents=True, exist_ok=True)
        save_model(cell_dir, net, run_cfg.to_doc(), report)
        (cell_dir / "graph.dot").write_text(graph.to_dot())
        log(f"  retrain {cell}/{tag} seed={seed}: dice "
            f"{report['mean_foreground']:.4f} in {time.time() - t0:.0f}s")
        return report["mean_foreground"]

    cells: dict[tuple, dict[int, float]] = {}
    template_ok = True
    for seed in seeds:
        log(f"seed {seed}:")
        # plain U-Net: both searches off, no search phase
        graph = unet_template_graph(replace(cfg, seed=seed), seed)
        template_ok = template_ok and matches_unet_template(graph, cfg)
        cells.setdefault(("unet", None), {})[seed] = retrain_cell(
            seed, "unet", graph, "model")
        # block search only, fixed wiring
        net = search_cell(seed, True, False, "sbb_only")
        graph = net.derive(cfg.prune, config_hash=cfg.hash())
        cells.setdefault(("sbb_only", None), {})[seed] = retrain_cell(
            seed, "sbb_only", graph, "model")
        # aggregation search only, fixed operators
        net = search_cell(seed, False, True, "mssa_only")
        graph = net.derive(cfg.prune, config_hash=cfg.hash())
        cells.setdefault(("mssa_only", cfg.prune.tau), {})[seed] = retrain_cell(
            seed, "mssa_only", graph, "model")
        # full model, pruned at every tau
        net = search_cell(seed, True, True, "full")
        for tau in taus:
            pcfg = PruneConfig(tau=tau,
                               fallback_connectivity=cfg.prune.fallback_connectivity)
            graph = net.derive(pcfg, config_hash=cfg.hash())
            cells.setdefault(("full", tau), {})[seed] = retrain_cell(
                seed, "full", graph, f"tau{tau:.2f}")

    rows = []
    for (name, tau), by_seed in cells.items():
        vals = [by_seed[s] for s in seeds]
        rows.append({
            "name": name,
            "sbb": name in ("sbb_only", "full"),
            "mssa": name in ("mssa_only", "full"),
            "tau": tau,
            "dice_by_seed": {str(s): v for s, v in by_seed.items()},
            "median": float(np.median(vals)),
            "mean": float(np.mean(vals)),
            "std": float(np.std(vals)),
        })

    doc = {
        "schema": ABLATION_SCHEMA,
        "config_hash": cfg.hash(),
        "seeds": seeds,
        "taus": taus,
        "metric": "mean foreground dice (validation split)",
        "unet_template_match": template_ok,
        "rows": rows,
    }
    (out / "ablate.json").write_text(json.dumps(doc, indent=2) + "\n")
    save_config(out / "resolved_config.json", cfg)

    csv_lines = ["name,sbb,mssa,tau," +
                 ",".join(f"seed{s}" for s in seeds) + ",median,mean,std"]
    for r in rows:
        tau = "" if r["tau"] is None else f"{r['tau']:.2f}"
        per_seed = ",".join(f"{r['dice_by_seed'][str(s)]:.6f}" for s in seeds)
        csv_lines.append(f"{r['name']},{int(r['sbb'])},{int(r['mssa'])},{tau},"
                         f"{per_seed},{r['median']:.6f},{r['mean']:.6f},{r['std']:.6f}")
    (out / "ablate.csv").write_text("\n".join(csv_lines) + "\n")

    width = max(len(r["name"]) for r in rows)
    lines = [f"{'config':<{width}}  sbb  mssa   tau   median    mean+/-std   "
             f"(n={len(seeds)} seeds)"]
    order = {"unet": 0, "sbb_only": 1, "mssa_only": 2, "full": 3}
    for r in sorted(rows, key=lambda r: (order[r["name"]], r["tau"] or 0)):
        tau = "  -  " if r["tau"] is None else f"{r['tau']:.2f} "
        lines.append(f"{r['name']:<{width}}  {'yes' if r['sbb'] else ' no'}  "
                     f"{'yes' if r['mssa'] else ' no'}  {tau} "
                     f"{r['median']:.4f}  {r['mean']:.4f}+/-{r['std']:.4f}")
    table = "\n".join(lines)
    (out / "table.txt").write_text(table + "\n")
    return table
