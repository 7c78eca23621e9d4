"""Command-line interface.

Exit codes: 0 success, 2 configuration/usage error, 3 stage failure.
The default output directory comes from the MULTISFM_OUTPUT_DIR environment
variable (falling back to ./multisfm_out); every stage is resumable — an
output produced from identical inputs is reused instead of recomputed.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

from .errors import ConfigError, MultiSfmError
from .matching import MatchGraph
from .pipeline import (
    EXPERIMENTS,
    PipelineConfig,
    default_output_dir,
    derive_seed,
    run_experiment,
    stage_align,
    stage_annotate,
    stage_evaluate,
    stage_match,
    stage_reconstruct,
    stage_simulate,
)
from .sfm import Reconstruction
from .simulator import SyntheticScene, load_annotations

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3

POLICIES = ("hybrid_vpr", "robust_cross", "robust_all", "handcrafted_all")


def _add_common(p):
    p.add_argument("--config", help="pipeline config JSON file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="dotted config override, repeatable")
    p.add_argument("--seed", type=int, help="root seed (overrides config)")
    p.add_argument("--threads", type=int, default=1, help="worker threads")
    p.add_argument("-o", "--output", default=None,
                   help=f"output directory (default: $MULTISFM_OUTPUT_DIR or multisfm_out)")


def build_parser():
    ap = argparse.ArgumentParser(prog="multisfm",
                                 description="multi-session structure-from-motion toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic survey scene + annotations")
    _add_common(p)

    p = sub.add_parser("match", help="build the pairwise match graph for a scene")
    _add_common(p)
    p.add_argument("--scene", required=True, help="scene JSON from `simulate`")
    p.add_argument("--policy", choices=POLICIES, default=None,
                   help="matching policy (default: config policy)")

    p = sub.add_parser("reconstruct", help="incremental SfM from a match graph")
    _add_common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--graph", required=True, help="match graph JSON from `match`")
    p.add_argument("--mode", choices=("joint", "per-session"), default="joint")

    p = sub.add_parser("align", help="merge per-session reconstructions with trimmed ICP")
    _add_common(p)
    p.add_argument("--sessions", required=True,
                   help="per-session reconstruction JSON from `reconstruct --mode per-session`")

    p = sub.add_parser("evaluate", help="cross-session reprojection error of a model")
    _add_common(p)
    p.add_argument("--recon", required=True, help="reconstruction JSON")
    p.add_argument("--annotations", required=True, help="annotations JSON from `simulate`")

    p = sub.add_parser("experiment", help="run a canned experiment")
    _add_common(p)
    p.add_argument("name", choices=EXPERIMENTS)

    p = sub.add_parser("report", help="print the summary of a finished experiment")
    p.add_argument("dir", help="experiment output directory")
    return ap


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if args.overrides:
        cfg = cfg.apply_overrides(args.overrides)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _outdir(args):
    out = args.output or default_output_dir()
    os.makedirs(out, exist_ok=True)
    return out


def cmd_simulate(args):
    cfg = _load_config(args)
    out = _outdir(args)
    scene = stage_simulate(cfg.scene, derive_seed(cfg.seed, "scene"),
                           os.path.join(out, "scene.json"))
    stage_annotate(scene, cfg.eval_pairs, cfg.eval_points,
                   derive_seed(cfg.seed, "annotate"),
                   os.path.join(out, "annotations.json"))
    print(f"scene: {len(scene.images)} images, {scene.n_landmarks} landmarks -> {out}")
    return EXIT_OK


def cmd_match(args):
    cfg = _load_config(args)
    out = _outdir(args)
    scene = SyntheticScene.load(args.scene)
    policy = args.policy or cfg.policy
    graph = stage_match(scene, policy, cfg, os.path.join(out, f"graph_{policy}.json"),
                        threads=args.threads)
    print(f"match graph [{policy}]: {len(graph)} admitted pairs -> {out}")
    return EXIT_OK


def cmd_reconstruct(args):
    cfg = _load_config(args)
    out = _outdir(args)
    scene = SyntheticScene.load(args.scene)
    graph = MatchGraph.load(args.graph)
    if args.mode == "joint":
        recon = stage_reconstruct(scene, graph, cfg.sfm, "joint",
                                  os.path.join(out, "recon_joint.json"))
        print(f"joint model: {recon.n_registered()}/{len(scene.images)} images, "
              f"{len(recon.triangulated_tracks())} points -> {out}")
    else:
        recons, failures = stage_reconstruct(scene, graph, cfg.sfm, "per-session",
                                             os.path.join(out, "recon_sessions.json"))
        for s in sorted(recons):
            print(f"session {s}: {recons[s].n_registered()} images registered")
        for s, msg in sorted(failures.items()):
            print(f"session {s}: FAILED ({msg})")
    return EXIT_OK


def cmd_align(args):
    cfg = _load_config(args)
    out = _outdir(args)
    with open(args.sessions) as f:
        d = json.load(f)
    recons = {int(s): Reconstruction.from_dict(r) for s, r in d["sessions"].items()}
    merged = stage_align(recons, cfg.icp, os.path.join(out, "merged_split.json"))
    print(f"merged model: {merged.n_registered()} images, "
          f"{len(merged.triangulated_tracks())} points -> {out}")
    return EXIT_OK


def cmd_evaluate(args):
    cfg = _load_config(args)
    out = _outdir(args)
    recon = Reconstruction.load(args.recon)
    annotations = load_annotations(args.annotations)
    rep = stage_evaluate(recon, annotations, os.path.join(out, "evaluation.json"))
    med = rep["median_error_px"]
    print(f"median cross-session RPE: {'n/a' if med is None else f'{med:.2f} px'}  "
          f"counts: {rep['counts']} -> {out}")
    return EXIT_OK


def cmd_experiment(args):
    cfg = _load_config(args)
    out = os.path.join(_outdir(args), args.name)
    run_experiment(args.name, cfg, out, threads=args.threads)
    print(f"experiment {args.name} -> {out}")
    return EXIT_OK


def cmd_report(args):
    report_dir = os.path.join(args.dir, "report")
    if not os.path.isdir(report_dir):
        raise ConfigError(f"no report directory under {args.dir}")
    found = False
    for name in sorted(os.listdir(report_dir)):
        if name.endswith(".csv"):
            found = True
            print(f"== {name} ==")
            with open(os.path.join(report_dir, name)) as f:
                for line in f:
                    print("  " + ", ".join(line.rstrip("\n").split(",")))
    if not found:
        for name in sorted(os.listdir(report_dir)):
            if name.endswith(".json"):
                found = True
                print(f"== {name} ==")
                with open(os.path.join(report_dir, name)) as f:
                    print(f.read())
    if not found:
        raise ConfigError(f"no report files under {report_dir}")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "match": cmd_match,
    "reconstruct": cmd_reconstruct,
    "align": cmd_align,
    "evaluate": cmd_evaluate,
    "experiment": cmd_experiment,
    "report": cmd_report,
}


def main(argv=None):
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on usage errors and 0 on --help
        return int(exc.code) if exc.code else EXIT_OK
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MultiSfmError as exc:
        print(f"stage failed: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
