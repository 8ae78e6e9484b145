"""``supernas`` command line: train, search, bench, consistency, report, template."""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__, analysis, pipeline
from ._backend import BACKEND
from .config import EngineConfig, load_config, template
from .errors import IncompleteEvaluation, InvalidConfig, SupernasError
from .moea import write_fitness_csv

log = logging.getLogger("supernas")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_INCOMPLETE = 0, 1, 2, 3


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_jsonl(path: Path, records, mode="w") -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, mode) as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _manifest(cfg: EngineConfig, command: str, extra: dict | None = None) -> dict:
    return {
        "command": command,
        "config_sha256": cfg.digest(),
        "seeds": cfg.seeds.model_dump(),
        "task_seed": cfg.task.seed,
        "versions": {"supernas": __version__, "numpy": np.__version__, "python": platform.python_version(),
                     "backend": BACKEND},
        **(extra or {}),
    }


def _out_dir(cfg: EngineConfig, args) -> Path:
    return Path(getattr(args, "out_dir", None) or cfg.output.dir)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_template(args, cfg=None) -> int:
    text = template(args.preset)
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_train(args, cfg: EngineConfig) -> int:
    run = cfg.to_run_config()
    out = _out_dir(cfg, args)
    ckpt = Path(args.out) if args.out else out / f"supernet_{args.strategy}.ckpt"
    losses: list = []
    params, info = pipeline.train_supernet(run, run.make_task(), args.strategy, losses=losses)
    digest = pipeline.save_params(ckpt, params, {"strategy": args.strategy, "config_sha256": cfg.digest(),
                                                 "iterations": info["iterations"],
                                                 "schedule": info["schedule"], "rng_state": info["rng_state"]})
    _write_jsonl(out / f"train_losses_{args.strategy}.jsonl", losses)
    _write_json(out / "manifest_train.json", _manifest(cfg, "train", {"checkpoint": str(ckpt), "sha256": digest}))
    print(f"checkpoint {ckpt} sha256 {digest}")
    return EXIT_OK


def cmd_search(args, cfg: EngineConfig) -> int:
    run = cfg.to_run_config()
    out = _out_dir(cfg, args)
    state_path = out / "search.ckpt"
    traj_path = out / "trajectory.jsonl"
    tel_path = out / "telemetry.jsonl"
    state = None
    if args.resume:
        if not state_path.exists():
            raise FileNotFoundError(f"no search checkpoint to resume at {state_path}")
        state, snapshot = pipeline.load_search_state(state_path)
        for p in (traj_path, tel_path):  # keep exactly the generations the checkpoint knows
            lines = p.read_text().splitlines(keepends=True) if p.exists() else []
            p.write_text("".join(lines[: state.generation]))
        log.info("resuming at generation %d", state.generation)
    else:
        if not args.checkpoint:
            raise InvalidConfig("search needs --checkpoint (or --resume)")
        if not Path(args.checkpoint).exists():
            raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
        params, _ = pipeline.load_params(args.checkpoint)
        if params.shape.to_dict() != run.shape.to_dict():
            raise InvalidConfig("checkpoint network shape does not match config space")
        snapshot = params.snapshot()
        for p in (traj_path, tel_path):
            p.parent.mkdir(parents=True, exist_ok=True)
            p.write_text("")
    (out / "fitness").mkdir(parents=True, exist_ok=True)

    def on_generation(rec):
        _write_jsonl(traj_path, [{k: v for k, v in rec.items() if k != "telemetry"}], mode="a")
        _write_jsonl(tel_path, [{"generation": rec["generation"], "tasks": rec["telemetry"]}], mode="a")
        write_fitness_csv(out / "fitness" / f"gen_{rec['generation']:04d}.csv", np.asarray(rec["fitness"]))

    archive, traj, state = pipeline.search(snapshot, run, run.make_task(), state=state,
                                           checkpoint_path=state_path, stop_after=args.stop_after,
                                           on_generation=on_generation)
    archive.to_json(out / "archive.json")
    _write_json(out / "manifest_search.json", _manifest(cfg, "search", {
        "generations_done": state.generation, "evaluations": state.evaluations, "archive_size": len(archive),
    }))
    if state.generation < run.generations:
        print(f"stopped after generation {state.generation}; resume with --resume")
    else:
        print(f"archive {out / 'archive.json'} ({len(archive)} entries)")
    return EXIT_OK


def cmd_bench(args, cfg: EngineConfig) -> int:
    b = cfg.bench
    rows = analysis.throughput_ablation(
        [tuple(c) for c in b.configs],
        analysis.Workload(b.n_tasks, cfg.devices.count, b.task_time, b.spread, cfg.seeds.latency),
        analysis.ThroughputCost(b.contention, b.proc_overhead, b.load_per_model, b.residency, b.sync),
    )
    path = Path(args.out) if args.out else _out_dir(cfg, args) / "throughput.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    analysis.write_ablation_csv(path, rows)
    for r in rows:
        print(f"{r['strategy']:<20} N_p={r['N_p']} B_m={r['B_m']} time/G={r['time_per_gen']:.3f}s "
              f"speedup={r['speedup']:.2f}x")
    return EXIT_OK


def _parse_checkpoints(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise InvalidConfig(f"--checkpoint expects STRATEGY=PATH, got {item!r}")
        k, v = item.split("=", 1)
        out[k] = v
    return out


def cmd_consistency(args, cfg: EngineConfig) -> int:
    run = cfg.to_run_config()
    cc = cfg.consistency
    paths = _parse_checkpoints(args.checkpoint)
    supernets = {}
    for strat, p in paths.items():
        if not Path(p).exists():
            raise FileNotFoundError(f"checkpoint not found: {p}")
        supernets[strat] = pipeline.load_params(p)[0]
    strategies = list(paths) if paths else list(cc.strategies)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else list(cc.seeds)
    res = analysis.consistency_experiment(
        strategies, args.n_arch or cc.n_arch, seeds, run,
        cc.standalone_steps if args.steps is None else args.steps, supernets or None,
    )
    out = _out_dir(cfg, args)
    out.mkdir(parents=True, exist_ok=True)
    res.to_json(out / "consistency.json")
    res.scatter_csv(out / "consistency_scatter.csv")
    for s, v in res.summary().items():
        print(f"{s:<10} tau={v['mean']:.4f} +/- {v['std']:.4f} over {v['n_seeds']} seeds")
    return EXIT_OK


def cmd_report(args, cfg: EngineConfig) -> int:
    out = _out_dir(cfg, args)
    traj_path = Path(args.trajectory) if args.trajectory else out / "trajectory.jsonl"
    if not traj_path.exists():
        raise FileNotFoundError(f"trajectory not found: {traj_path}")
    traj = [json.loads(line) for line in traj_path.read_text().splitlines() if line.strip()]
    path = Path(args.out) if args.out else out / "report.csv"
    analysis.write_long_csv(path, analysis.long_format_rows(traj))
    print(f"report {path} ({len(traj)} generations)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="supernas", description="Supernet training and evolutionary search.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("config", nargs="?", help="YAML config (defaults when omitted)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field by dotted path")
        p.add_argument("--out-dir", help="override output.dir")
        return p

    p = sub.add_parser("template", help="print a config with every default spelled out")
    p.add_argument("--preset", default="default", choices=["default", "micro"])
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_template, needs_config=False)

    p = with_config(sub.add_parser("train", help="pretrain + finetune the supernet"))
    p.add_argument("--strategy", default="pst_ddkd", choices=list(pipeline.STRATEGIES))
    p.add_argument("--out", help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = with_config(sub.add_parser("search", help="evolutionary search on a trained supernet"))
    p.add_argument("--checkpoint", help="supernet checkpoint from `train`")
    p.add_argument("--resume", action="store_true", help="continue from <out>/search.ckpt")
    p.add_argument("--stop-after", type=int, help="stop after this many generations")
    p.set_defaults(func=cmd_search)

    p = with_config(sub.add_parser("bench", help="throughput ablation table"))
    p.add_argument("--out", help="CSV path")
    p.set_defaults(func=cmd_bench)

    p = with_config(sub.add_parser("consistency", help="Kendall tau of supernet proxy vs standalone training"))
    p.add_argument("--checkpoint", action="append", metavar="STRATEGY=PATH")
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--n-arch", type=int)
    p.add_argument("--steps", type=int, help="standalone training steps")
    p.set_defaults(func=cmd_consistency)

    p = with_config(sub.add_parser("report", help="long-format CSV from a trajectory"))
    p.add_argument("--trajectory")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = None
        if getattr(args, "needs_config", True):
            cfg = load_config(args.config, args.set)
        return args.func(args, cfg)
    except InvalidConfig as exc:
        print(f"config error:\n{exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IncompleteEvaluation as exc:
        print(f"incomplete evaluation: {exc}", file=sys.stderr)
        return EXIT_INCOMPLETE
    except (SupernasError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
