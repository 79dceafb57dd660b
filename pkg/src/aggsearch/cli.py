"""Command line pipeline: gen-data, search, prune, retrain, eval,
export-dot, ablate.

Every command accepts ``--config FILE`` plus per-field overrides (dotted
flags mirroring the config document, e.g. ``--task.extent 48``), writes its
resolved config next to its outputs, and stamps artifacts with the config
hash. Exit codes: 0 success, 2 config error, 3 numeric failure, 4 I/O or
format error.

``AGGSEARCH_THREADS`` caps BLAS thread counts; no other environment
variable is consulted.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path


def _thread_env() -> None:
    n = os.environ.get("AGGSEARCH_THREADS")
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, n)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    from .config import leaf_fields

    p.add_argument("--config", type=Path, default=None,
                   help="run-config JSON; overrides apply on top")
    p.add_argument("--set", action="append", default=[], metavar="FIELD=VALUE",
                   dest="overrides", help="override one config field")
    for leaf in leaf_fields():
        p.add_argument(f"--{leaf}", dest=f"cfg:{leaf}", default=None,
                       metavar="V", help=argparse.SUPPRESS)


def _resolve_config(args):
    from .config import RunConfig, apply_override, load_config

    cfg = load_config(args.config) if args.config else RunConfig()
    doc = cfg.to_doc()
    for item in args.overrides:
        if "=" not in item:
            raise_config(f"--set expects FIELD=VALUE, got {item!r}")
        key, val = item.split("=", 1)
        apply_override(doc, key.strip(), val.strip())
    for key, val in vars(args).items():
        if key.startswith("cfg:") and val is not None:
            apply_override(doc, key[4:], val)
    return RunConfig.from_doc(doc)


def raise_config(msg: str):
    from .errors import ConfigError

    raise ConfigError(msg)


def _write_metrics_csv(path: Path):
    from .train import METRIC_FIELDS

    fh = open(path, "w")
    fh.write(",".join(METRIC_FIELDS) + "\n")

    def on_row(row: dict) -> None:
        import math

        cells = []
        for k in METRIC_FIELDS:
            v = row[k]
            if isinstance(v, float) and math.isnan(v):
                cells.append("")
            elif isinstance(v, float):
                cells.append(f"{v:.10g}")
            else:
                cells.append(str(v))
        fh.write(",".join(cells) + "\n")
        fh.flush()

    return fh, on_row


def _train_val_split(samples, val_fraction):
    n = len(samples)
    n_val = min(max(int(round(n * val_fraction)), 1), n - 1) if n > 1 else 0
    return samples[:n - n_val], samples[n - n_val:]


# -- commands -------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .config import save_config
    from .data import generate, save_dataset

    cfg = _resolve_config(args).with_paths(out=str(args.out))
    samples = generate(cfg.task)
    save_dataset(args.out, cfg.task, samples)
    save_config(Path(args.out) / "resolved_config.json", cfg)
    print(f"gen-data: {len(samples)} samples ({cfg.task.rank}-d, "
          f"extent {cfg.task.extent}) -> {args.out} [hash {cfg.hash()}]")
    return 0


def _load_data_or_fail(data_dir):
    from .data import load_dataset
    from .errors import ConfigError

    d = Path(data_dir)
    if not (d / "manifest.json").exists():
        raise ConfigError(f"dataset {d} does not exist (run gen-data first)")
    return load_dataset(d)


def cmd_search(args) -> int:
    from dataclasses import replace

    from .config import save_config
    from .network import Supernet
    from .train import SearchRun, save_checkpoint

    cfg = _resolve_config(args)
    task, samples = _load_data_or_fail(args.data)
    cfg = replace(cfg, task=task).with_paths(data=str(args.data), out=str(args.out))
    train, _ = _train_val_split(samples, cfg.val_fraction)
    net = Supernet(rank=task.rank, levels=cfg.grid.levels,
                   base_channels=cfg.grid.base_channels, in_channels=1,
                   num_classes=task.num_classes, sbb=cfg.sbb, mssa=cfg.mssa,
                   decoder_mode=cfg.grid.decoder_mode, seed=cfg.seed)
    run = SearchRun(net, cfg.search, cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fh, on_row = _write_metrics_csv(out / "metrics.csv")
    try:
        run.run(train, on_row)
    finally:
        fh.close()
    save_checkpoint(out, run, cfg.to_doc())
    save_config(out / "resolved_config.json", cfg)
    last = run.history[-1]
    print(f"search: {run.step} steps, loss_w {last['loss_w']:.4f}, "
          f"mean gate {last['mean_gate']:.3f}, alpha entropy "
          f"{last['alpha_entropy']:.3f} -> {out} [hash {cfg.hash()}]")
    return 0


def cmd_prune(args) -> int:
    from .config import RunConfig
    from .grid import PruneConfig
    from .train import load_checkpoint

    net, _run, config_doc = load_checkpoint(args.checkpoint)
    cfg = RunConfig.from_doc(config_doc)
    pcfg = cfg.prune
    if args.tau is not None:
        pcfg = PruneConfig(tau=args.tau, fallback_connectivity=pcfg.fallback_connectivity)
    graph = net.derive(pcfg, config_hash=cfg.hash())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "graph.json").write_text(graph.to_json())
    (out / "graph.dot").write_text(graph.to_dot())
    gates = net.gate_values()
    report = {
        "tau": pcfg.tau,
        "fallback_connectivity": pcfg.fallback_connectivity,
        "config_hash": cfg.hash(),
        "kept": [{"src": list(e["src"]), "dst": list(e["dst"]),
                  "gate": e["gate"], "origin": e["origin"]} for e in graph.edges],
        "dropped": [{"src": list(e[0]), "dst": list(e[1]), "gate": gates[e]}
                    for e in net.edges
                    if e not in set(graph.edge_keys())],
    }
    (out / "prune_report.json").write_text(json.dumps(report, indent=2) + "\n")
    print(f"prune: tau={pcfg.tau}: kept {len(report['kept'])} connections "
          f"({sum(1 for e in graph.edges if e['origin'] == 'fallback')} fallback), "
          f"dropped {len(report['dropped'])} -> {out}")
    return 0


def cmd_retrain(args) -> int:
    from dataclasses import replace

    from .config import save_config
    from .grid import DerivedGraph
    from .train import retrain_derived, save_model

    cfg = _resolve_config(args)
    task, samples = _load_data_or_fail(args.data)
    cfg = replace(cfg, task=task).with_paths(
        data=str(args.data), out=str(args.out), graph=str(args.graph))
    graph_path = Path(args.graph)
    if not graph_path.exists():
        raise_config(f"graph file {graph_path} does not exist")
    graph = DerivedGraph.from_json(graph_path.read_text())
    train, val = _train_val_split(samples, cfg.val_fraction)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fh, on_row = _write_metrics_csv(out / "metrics.csv")
    try:
        net, _rows, report = retrain_derived(graph, train, val, cfg.retrain,
                                             cfg.seed, on_row)
    finally:
        fh.close()
    save_model(out, net, cfg.to_doc(), report)
    save_config(out / "resolved_config.json", cfg)
    per_class = ", ".join(f"{d:.4f}" for d in report["per_class"])
    print(f"retrain: dice per class [{per_class}], mean foreground "
          f"{report['mean_foreground']:.4f} -> {out}")
    return 0


def cmd_eval(args) -> int:
    from .train import evaluate_dice, load_model

    net, _manifest = load_model(args.model)
    _task, samples = _load_data_or_fail(args.data)
    cfg = _resolve_config(args)
    train, val = _train_val_split(samples, cfg.val_fraction)
    subset = {"val": val, "train": train, "all": samples}[args.split]
    report = evaluate_dice(net, subset)
    doc = {"split": args.split, "count": len(subset), **report}
    print(json.dumps(doc, indent=2))
    if args.out:
        Path(args.out).write_text(json.dumps(doc, indent=2) + "\n")
    return 0


def cmd_export_dot(args) -> int:
    from .grid import DerivedGraph

    graph = DerivedGraph.from_json(Path(args.graph).read_text())
    Path(args.out).write_text(graph.to_dot())
    print(f"export-dot: {args.graph} -> {args.out}")
    return 0


def cmd_ablate(args) -> int:
    from .ablate import run_ablation

    cfg = _resolve_config(args) if (args.config or args.overrides) else None
    seeds = [int(s) for s in args.seeds.split(",")]
    taus = [float(t) for t in args.taus.split(",")]
    table = run_ablation(args.data, args.out, seeds=seeds, taus=taus,
                         base_cfg=cfg, quiet=False)
    print(table)
    return 0


def main(argv: list[str] | None = None) -> int:
    _thread_env()
    parser = argparse.ArgumentParser(
        prog="aggsearch",
        description="Differentiable block-operator and aggregation search "
                    "for encoder-decoder segmentation, at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", type=Path, required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("search", help="run the bi-level architecture search")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("prune", help="derive the discrete graph from a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--tau", type=float, default=None)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("retrain", help="retrain a derived graph from scratch")
    p.add_argument("--graph", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_retrain)

    p = sub.add_parser("eval", help="evaluate a retrained model")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", choices=["val", "train", "all"], default="val")
    p.add_argument("--out", type=Path, default=None)
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-dot", help="write DOT for a derived graph")
    p.add_argument("--graph", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_export_dot)

    p = sub.add_parser("ablate", help="run the component and tau ablation matrix")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--taus", default="0.60,0.75,0.90")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    args = parser.parse_args(argv)

    from .errors import ConfigError, FormatError, NumericsError

    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except NumericsError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except (FormatError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
