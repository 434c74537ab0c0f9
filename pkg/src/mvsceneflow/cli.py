"""Command line entry point: ``generate``, ``run``, ``check`` and ``spec``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .harness import check_rows, default_spec, emit_results, load_results, load_spec, run_experiment
from .synthworld import InfeasibleScenario, ScenarioConfig, derive_measures, generate, load_scenario, save_json

log = logging.getLogger("mvsceneflow")


def parse_seeds(text: str) -> tuple[int, ...]:
    """``"0-4,7"`` -> ``(0, 1, 2, 3, 4, 7)``."""
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise argparse.ArgumentTypeError("empty seed list")
    return tuple(seeds)


def _cmd_generate(args) -> int:
    config = load_scenario(args.spec) if args.spec else ScenarioConfig()
    out = Path(args.out)
    for seed in args.seeds or (config.seed,):
        cfg = replace(config, seed=seed)
        try:
            world = generate(cfg)
            measures = derive_measures(world, cfg)
        except InfeasibleScenario as exc:
            print(f"seed {seed}: {exc}", file=sys.stderr)
            return 2
        save_json(world, out / f"world_{seed}.json")
        save_json(measures, out / f"measures_{seed}.json")
        print(f"seed {seed}: {len(world.points_t0)} surface points, {measures.n} matched -> {out}")
    return 0


def _cmd_run(args) -> int:
    if args.spec:
        spec = load_spec(args.spec)
    elif args.experiment is not None:
        spec = default_spec(args.experiment, args.variant)
    else:
        print("run needs --spec or --experiment", file=sys.stderr)
        return 2
    if args.seeds:
        spec = replace(spec, seeds=args.seeds)
    rows = run_experiment(spec, threads=args.threads)
    paths = emit_results(rows, args.out, spec)
    print(f"{len(rows)} runs -> {paths['csv'].parent}")
    failed = [r for r in rows if r.termination == "numerical_failure"]
    for r in failed:
        print(f"failed run: sweep {r.sweep_index} seed {r.seed} ({r.termination})", file=sys.stderr)
    return 1 if failed else 0


def _cmd_check(args) -> int:
    path = Path(args.results)
    if path.is_dir():
        path = path / "results.json"
    _, rows = load_results(path)
    results = check_rows(rows)
    for c in results:
        print(c.line())
    if not results:
        print("no applicable checks", file=sys.stderr)
        return 1
    return 0 if all(c.passed for c in results) else 1


def _cmd_spec(args) -> int:
    spec = default_spec(args.experiment, args.variant)
    save_json(spec, args.out)
    print(f"experiment {args.experiment} spec -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mvsceneflow", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="scenario JSON -> world and measure JSON")
    g.add_argument("--spec", help="scenario JSON (defaults to the built-in scene)")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seeds", type=parse_seeds, help="e.g. 0-9 or 1,4,7")
    g.set_defaults(func=_cmd_generate)

    r = sub.add_parser("run", help="experiment spec -> CSV/JSON results")
    r.add_argument("--spec", help="experiment spec JSON")
    r.add_argument("--experiment", type=int, choices=(0, 1, 2, 3), help="use a preset spec")
    r.add_argument("--variant", default="", help="preset variant (experiment 3: 'timing')")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--seeds", type=parse_seeds, help="override the spec's seeds")
    r.add_argument("--threads", type=int, default=1, help="worker processes")
    r.set_defaults(func=_cmd_run)

    c = sub.add_parser("check", help="invariant suite over a results file")
    c.add_argument("--results", required=True, help="results.json or the directory holding it")
    c.set_defaults(func=_cmd_check)

    s = sub.add_parser("spec", help="write a preset experiment spec")
    s.add_argument("--experiment", type=int, choices=(0, 1, 2, 3), required=True)
    s.add_argument("--variant", default="")
    s.add_argument("--out", required=True, help="output JSON path")
    s.set_defaults(func=_cmd_spec)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
