"""Command line entry points: run experiments, compare runs, render traces."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .harness import (
    RunConfig,
    Verdict,
    ablation_preset,
    compare,
    load_results_dir,
    run_config_from_dict,
    run_experiment,
    summarize,
)
from .policies import PolicyKind
from .render import render_trace_file
from .scene import SceneKind


def _build_run_config(args: argparse.Namespace) -> RunConfig:
    if args.config:
        doc = json.loads(Path(args.config).read_text())
        cfg = run_config_from_dict(doc)
    else:
        cfg = RunConfig()
    overrides = {}
    if args.policy is not None:
        overrides["policy"] = PolicyKind(args.policy)
    if args.scenario is not None:
        overrides["scenario"] = SceneKind(args.scenario)
    if args.hard_grasps:
        overrides["hard_grasps"] = True
    if args.episodes is not None:
        overrides["episodes"] = args.episodes
    if args.seed is not None:
        overrides["base_seed"] = args.seed
    return replace(cfg, **overrides)


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _build_run_config(args)
    csv_path = run_experiment([cfg], args.out, workers=args.workers)
    results = load_results_dir(Path(args.out))
    m = summarize(results)
    print(f"wrote {csv_path}")
    print(f"SR {m.sr:.1f}%  AR {m.ar:.1f}%  GFR {m.gfr:.1f}%  "
          f"d {m.d_mean:.2f}+-{m.d_std:.2f} m  v {m.v_mean:.1f}+-{m.v_std:.1f}")
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    a = load_results_dir(args.a)
    b = load_results_dir(args.b)
    verdict = compare(a, b, args.metric)
    print(verdict.value)
    return 0 if verdict is not Verdict.INCONCLUSIVE else 1


def cmd_ablate(args: argparse.Namespace) -> int:
    cells = ablation_preset(args.preset, episodes=args.episodes, base_seed=args.seed)
    csv_path = run_experiment(cells, args.out, workers=args.workers)
    print(f"wrote {csv_path}")
    print(csv_path.read_text())
    return 0


def cmd_render(args: argparse.Namespace) -> int:
    out = render_trace_file(args.trace, args.out)
    print(f"wrote {out}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="actpermoma",
                                     description="active-perception mobile grasping sandbox")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment cell")
    p_run.add_argument("--policy", choices=[k.value for k in PolicyKind])
    p_run.add_argument("--scenario", choices=[k.value for k in SceneKind])
    p_run.add_argument("--hard-grasps", action="store_true")
    p_run.add_argument("--episodes", type=int)
    p_run.add_argument("--seed", type=int)
    p_run.add_argument("--config", help="JSON config file mirroring RunConfig")
    p_run.add_argument("--out", required=True)
    p_run.add_argument("--workers", type=int, default=None)
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare", help="statistically compare two run directories")
    p_cmp.add_argument("--a", required=True)
    p_cmp.add_argument("--b", required=True)
    p_cmp.add_argument("--metric", required=True, choices=["sr", "ar", "gfr", "d", "v"])
    p_cmp.set_defaults(func=cmd_compare)

    p_abl = sub.add_parser("ablate", help="run a preset hyperparameter/ablation grid")
    p_abl.add_argument("--preset", required=True, choices=["table1", "table2"])
    p_abl.add_argument("--episodes", type=int, default=100)
    p_abl.add_argument("--seed", type=int, default=0)
    p_abl.add_argument("--out", required=True)
    p_abl.add_argument("--workers", type=int, default=None)
    p_abl.set_defaults(func=cmd_ablate)

    p_ren = sub.add_parser("render", help="render an episode trace to SVG")
    p_ren.add_argument("--trace", required=True)
    p_ren.add_argument("--out", required=True)
    p_ren.set_defaults(func=cmd_render)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
