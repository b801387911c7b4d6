"""Command-line entry point.

Subcommands:
  run              execute the (strategy, kappa, alpha, seed) grid of a config
  validate         lint a config file
  curves           convert result CSVs to gnuplot-ready .dat / .svg line data
  partition-stats  print skew statistics for a Dirichlet/IID partition

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
The FEDPAI_OUTPUT_DIR environment variable overrides the output root.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from .config import Cell, ExperimentConfig, build_dataset, build_spec, expand_cells, parse_config
from .data import make_synthetic, partition_dirichlet, partition_iid
from .errors import ConfigError, FedPaiError
from .federation import StrategyConfig, run_experiment
from .metrics import accuracy_vs_round, accuracy_vs_sparsity, csv_rows, read_csv, write_csv, write_dat, write_jsonl, write_svg

ENV_OUTPUT_DIR = "FEDPAI_OUTPUT_DIR"


def _strategy_config(config: ExperimentConfig, cell: Cell) -> StrategyConfig:
    return StrategyConfig(
        strategy=cell.strategy,
        kappa=cell.kappa,
        local_epochs=config.local_epochs,
        batch_size=config.batch_size,
        lr=config.lr,
        lr_decay_round=config.lr_decay_round,
        lr_decay_factor=config.lr_decay_factor,
        clients_per_round=config.clients_per_round,
        grasp_batch_size=config.grasp_batch_size,
        ebt_window=config.ebt_window,
        ebt_epsilon=config.ebt_epsilon,
        iterative_prune_rounds=config.iterative_prune_rounds,
        aggregate_by_support=config.aggregate_by_support,
    )


def run_cell(config: ExperimentConfig, cell: Cell, outdir: str) -> dict:
    """Run one grid cell and write its result files; returns a manifest entry."""
    from .structured import ChannelMask

    capture: dict = {}
    try:
        dataset = build_dataset(config, cell.seed)
        spec = build_spec(config)
        reports = run_experiment(
            spec,
            dataset,
            _strategy_config(config, cell),
            num_clients=config.num_clients,
            rounds=config.rounds,
            alpha=cell.alpha,
            seed=cell.seed,
            capture=capture,
        )
    except Exception as exc:  # recorded per cell; other cells continue
        return {"cell": cell.name, "status": "failed", "error": f"{type(exc).__name__}: {exc}"}
    jsonl = str(Path(outdir) / f"{cell.name}.jsonl")
    csv_path = str(Path(outdir) / f"{cell.name}.csv")
    write_jsonl(reports, jsonl)
    write_csv(csv_path, csv_rows(reports, cell.strategy, cell.kappa, cell.alpha, cell.seed))
    files = {"jsonl": jsonl, "csv": csv_path}
    mask = capture["server"].global_mask
    if isinstance(mask, ChannelMask):  # per-layer bitmaps of the frozen channel mask
        mask_path = str(Path(outdir) / f"{cell.name}.mask.json")
        with open(mask_path, "w", encoding="utf-8") as f:
            json.dump(mask.to_jsonable(), f)
        files["mask"] = mask_path
    return {
        "cell": cell.name,
        "status": "done",
        "final_accuracy": reports[-1].test_accuracy,
        "final_sparsity": reports[-1].sparsity,
        "bytes_up_total": int(sum(r.bytes_up for r in reports)),
        "bytes_down_total": int(sum(r.bytes_down for r in reports)),
        "files": files,
    }


def _write_manifest(path: Path, manifest: dict) -> None:
    # write-rename so readers never observe a torn manifest
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".manifest-")
    with os.fdopen(fd, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    os.replace(tmp, path)


def run_grid(config: ExperimentConfig, outdir: str) -> int:
    """Run the full grid, resumably; nonzero return if any cell failed."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = out / "manifest.json"
    manifest = {"cells": {}}
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
    cells = expand_cells(config)
    manifest["grid_size"] = len(cells)

    def is_done(cell: Cell) -> bool:
        entry = manifest["cells"].get(cell.name)
        return (
            entry is not None
            and entry.get("status") == "done"
            and all(Path(p).exists() for p in entry.get("files", {}).values())
        )

    pending = [c for c in cells if not is_done(c)]
    print(f"grid: {len(cells)} cells, {len(cells) - len(pending)} already done")
    if config.workers > 1 and len(pending) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=config.workers) as pool:
            futures = {pool.submit(run_cell, config, cell, str(out)): cell for cell in pending}
            for fut in concurrent.futures.as_completed(futures):
                entry = fut.result()
                manifest["cells"][entry["cell"]] = entry
                _write_manifest(manifest_path, manifest)
                print(f"  {entry['cell']}: {entry['status']}")
    else:
        for cell in pending:
            entry = run_cell(config, cell, str(out))
            manifest["cells"][entry["cell"]] = entry
            _write_manifest(manifest_path, manifest)
            print(f"  {entry['cell']}: {entry['status']}")
    failures = [e for e in manifest["cells"].values() if e.get("status") != "done"]
    if failures:
        for e in failures:
            print(f"FAILED {e['cell']}: {e.get('error', '?')}", file=sys.stderr)
        return 2
    return 0


def _cmd_run(args) -> int:
    config = parse_config(Path(args.config).read_text())
    outdir = args.output_dir or os.environ.get(ENV_OUTPUT_DIR) or config.output_dir
    return run_grid(config, outdir)


def _cmd_validate(args) -> int:
    config = parse_config(Path(args.config).read_text())
    cells = expand_cells(config)
    print(f"OK: {len(cells)} cells "
          f"({len(config.strategies)} strategies x {len(config.kappas)} kappa "
          f"x {len(config.alphas)} alpha x {len(config.seeds)} seeds), "
          f"{config.rounds} rounds each")
    return 0


def _cmd_curves(args) -> int:
    paths: list[Path] = []
    for item in args.inputs:
        p = Path(item)
        paths.extend(sorted(p.glob("*.csv")) if p.is_dir() else [p])
    if not paths:
        print("no CSV files found", file=sys.stderr)
        return 2
    rows = [row for p in paths for row in read_csv(p)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    round_series = {}
    for (strategy, kappa, alpha), pts in accuracy_vs_round(rows).items():
        label = f"{strategy}_k{kappa}_a{alpha}"
        write_dat(out / f"acc_vs_round__{label}.dat", pts, "round accuracy")
        round_series[label] = pts
    sparsity_series = {}
    for (strategy, alpha), pts in accuracy_vs_sparsity(rows).items():
        label = f"{strategy}_a{alpha}"
        write_dat(out / f"acc_vs_sparsity__{label}.dat", pts, "sparsity accuracy")
        sparsity_series[label] = pts
    if args.svg:
        write_svg(out / "acc_vs_round.svg", round_series, "round", "accuracy")
        write_svg(out / "acc_vs_sparsity.svg", sparsity_series, "sparsity", "accuracy")
    print(f"wrote {len(round_series) + len(sparsity_series)} .dat files to {out}")
    return 0


def _cmd_partition_stats(args) -> int:
    dataset = make_synthetic(args.classes, args.samples_per_class, args.dim, args.seed)
    if args.alpha.lower() == "iid":
        plan = partition_iid(dataset, args.clients, args.seed)
    else:
        plan = partition_dirichlet(dataset, args.clients, float(args.alpha), args.seed)
    labels = dataset.labels
    shares = []
    sizes = []
    print(f"{'client':>6} {'samples':>8} {'max class share':>16}")
    for j, idx in enumerate(plan.client_indices):
        counts = np.bincount(labels[idx], minlength=dataset.num_classes)
        share = counts.max() / max(1, counts.sum())
        shares.append(share)
        sizes.append(len(idx))
        print(f"{j:>6} {len(idx):>8} {share:>16.3f}")
    print(
        f"mean max-class-share {np.mean(shares):.3f}, "
        f"shard sizes [{min(sizes)}, {max(sizes)}]"
    )
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="fedpai", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the experiment grid of a config file")
    p_run.add_argument("config")
    p_run.add_argument("--output-dir", default=None)
    p_run.set_defaults(fn=_cmd_run)

    p_val = sub.add_parser("validate", help="lint a config file")
    p_val.add_argument("config")
    p_val.set_defaults(fn=_cmd_validate)

    p_cur = sub.add_parser("curves", help="CSV results to line data")
    p_cur.add_argument("inputs", nargs="+", help="CSV files or result directories")
    p_cur.add_argument("--out", default="curves")
    p_cur.add_argument("--svg", action="store_true")
    p_cur.set_defaults(fn=_cmd_curves)

    p_ps = sub.add_parser("partition-stats", help="Dirichlet skew statistics")
    p_ps.add_argument("--alpha", required=True, help="concentration, or 'iid'")
    p_ps.add_argument("--clients", type=int, default=10)
    p_ps.add_argument("--seed", type=int, default=0)
    p_ps.add_argument("--classes", type=int, default=10)
    p_ps.add_argument("--samples-per-class", type=int, default=500)
    p_ps.add_argument("--dim", type=int, default=16)
    p_ps.set_defaults(fn=_cmd_partition_stats)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (FedPaiError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
