"""Experiment orchestration: pipeline configuration, checkpointed stages and
the four canned experiments (reconstruction comparison table, error
histograms, track-class residuals, matching-cost scaling).

Determinism: every artifact a stage consumes is round-tripped through its
serialized form, so a resumed run sees bit-identical inputs to a fresh one.
Report files never contain wall times; timings go to a separate timings file.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError
from .evaluation import (
    EvaluationReport,
    aggregate_report,
    compute_reprojection_errors,
    matching_cost_report,
    save_cost_csv,
)
from .matching import MatchGraph, MatchingConfig, build_match_graph
from .placerec import (
    compute_distance_matrix,
    compute_global_descriptor,
    cross_session_distance_percentile,
    select_cross_session_pairs,
)
from .registration import IcpConfig, align_posthoc
from .sfm import Reconstruction, SfmConfig, reconstruct_joint, reconstruct_per_session
from .simulator import (
    SceneConfig,
    SyntheticScene,
    generate_annotations,
    generate_scene,
    load_annotations,
    save_annotations,
    scene_config_from_dict,
    scene_config_to_dict,
)

PIPELINE_SCHEMA_VERSION = 1

OUTPUT_DIR_ENV = "MULTISFM_OUTPUT_DIR"

# survey sizes (images per session) for the four evaluation subsets
SUBSET_PRESETS = {
    "s01": (50, 63, 52),
    "s02": (83, 134, 95),
    "s03": (87, 129, 93),
    "s04": (90, 76, 110),
}

EXPERIMENTS = ("table2", "fig5", "fig7", "fig8")

COST_SCALING_SIZES = (50, 100, 200, 400)   # images per session -> N = 150..1200


@dataclass
class PipelineConfig:
    seed: int = 0
    policy: str = "hybrid_vpr"
    vpr_k: int = 10
    vpr_percentile: float = 60.0
    eval_pairs: int = 10
    eval_points: int = 6
    scene: SceneConfig = field(default_factory=SceneConfig)
    matching: MatchingConfig = field(default_factory=MatchingConfig)
    sfm: SfmConfig = field(default_factory=SfmConfig)
    icp: IcpConfig = field(default_factory=IcpConfig)
    # subset name -> images per session, for the table2/fig5 experiments
    subsets: dict = field(default_factory=lambda: {k: list(v)
                                                   for k, v in SUBSET_PRESETS.items()})
    # images per session for the fig8 cost-scaling curve, and the size at
    # which the end-to-end policy quality comparison runs
    scaling_sizes: list = field(default_factory=lambda: list(COST_SCALING_SIZES))
    quality_size: int = 100

    def to_dict(self):
        d = asdict(self)
        d["scene"] = scene_config_to_dict(self.scene)
        d["schema_version"] = PIPELINE_SCHEMA_VERSION
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        ver = d.pop("schema_version", PIPELINE_SCHEMA_VERSION)
        if ver != PIPELINE_SCHEMA_VERSION:
            raise ConfigError(f"unsupported pipeline schema: {ver}")
        try:
            scene = scene_config_from_dict(d.pop("scene")) if "scene" in d else SceneConfig()
            matching = d.pop("matching", None)
            sfm = d.pop("sfm", None)
            icp = d.pop("icp", None)
            cfg = cls(scene=scene, **d)
            if matching is not None:
                ransac = matching.pop("ransac", None)
                cfg.matching = MatchingConfig(**matching)
                if ransac is not None:
                    cfg.matching.ransac = type(cfg.matching.ransac)(**ransac)
            if sfm is not None:
                ransac = sfm.pop("ransac", None)
                bundle = sfm.pop("bundle", None)
                cfg.sfm = SfmConfig(**sfm)
                if ransac is not None:
                    cfg.sfm.ransac = type(cfg.sfm.ransac)(**ransac)
                if bundle is not None:
                    cfg.sfm.bundle = type(cfg.sfm.bundle)(**bundle)
            if icp is not None:
                cfg.icp = IcpConfig(**icp)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return cfg

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def apply_overrides(self, overrides):
        """Apply dotted `key=value` overrides (`--set sfm.seed=3`); values are
        parsed as JSON with a plain-string fallback."""
        d = self.to_dict()
        for ov in overrides:
            if "=" not in ov:
                raise ConfigError(f"override {ov!r} is not key=value")
            key, _, raw = ov.partition("=")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            def step(node, p):
                if isinstance(node, list):
                    try:
                        i = int(p)
                    except ValueError:
                        raise ConfigError(f"unknown config path {key!r}") from None
                    if not (0 <= i < len(node)):
                        raise ConfigError(f"unknown config path {key!r}")
                    return node, i
                if isinstance(node, dict) and p in node:
                    return node, p
                raise ConfigError(f"unknown config path {key!r}")

            node = d
            parts = key.split(".")
            for p in parts[:-1]:
                node, idx = step(node, p)
                node = node[idx]
            node, idx = step(node, parts[-1])
            node[idx] = value
        return PipelineConfig.from_dict(d)


def default_output_dir():
    return os.environ.get(OUTPUT_DIR_ENV, "multisfm_out")


def derive_seed(*parts):
    """Deterministic integer sub-seed from a root seed and stage labels."""
    ints = [p if isinstance(p, int) else
            int.from_bytes(hashlib.sha256(str(p).encode()).digest()[:4], "big")
            for p in parts]
    return int(np.random.SeedSequence(ints).generate_state(1)[0])


# ---------------------------------------------------------------------------
# checkpointed stages
# ---------------------------------------------------------------------------

def _config_hash(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def _checkpoint(path, input_fingerprint, compute, save, load):
    """Run `compute` unless `path` already holds output produced from the same
    inputs; always return the serialized round-trip."""
    meta_path = path + ".meta.json"
    want = _config_hash(input_fingerprint)
    if os.path.exists(path) and os.path.exists(meta_path):
        with open(meta_path) as f:
            if json.load(f).get("input_hash") == want:
                return load(path)
    result = compute()
    save(result, path)
    with open(meta_path, "w") as f:
        json.dump({"input_hash": want}, f)
    return load(path)


def stage_simulate(scene_cfg: SceneConfig, seed, path) -> SyntheticScene:
    return _checkpoint(
        path, {"stage": "simulate", "config": scene_config_to_dict(scene_cfg), "seed": seed},
        lambda: generate_scene(scene_cfg, seed),
        lambda scene, p: scene.save(p),
        SyntheticScene.load)


def stage_annotate(scene: SyntheticScene, n_pairs, n_points, seed, path):
    return _checkpoint(
        path, {"stage": "annotate", "scene_seed": scene.seed, "n_pairs": n_pairs,
               "n_points": n_points, "seed": seed},
        lambda: generate_annotations(scene, n_pairs, n_points, seed=seed),
        lambda pairs, p: save_annotations(pairs, p),
        load_annotations)


def select_candidates(scene: SyntheticScene, vpr_k, vpr_percentile):
    descs = [compute_global_descriptor(im.image_id, im.keypoints,
                                       scene.cfg.stable_dim) for im in scene.images]
    dm = compute_distance_matrix(descs)
    session_of = scene.session_of()
    max_dist = cross_session_distance_percentile(dm, session_of, vpr_percentile)
    return select_cross_session_pairs(dm, session_of, vpr_k, max_dist), dm


def stage_match(scene: SyntheticScene, policy, cfg: PipelineConfig, path,
                threads=1) -> MatchGraph:
    def compute():
        candidates = None
        if policy == "hybrid_vpr":
            candidates, _ = select_candidates(scene, cfg.vpr_k, cfg.vpr_percentile)
        return build_match_graph(scene.images, candidates, cfg.matching,
                                 scene.intrinsics, policy=policy, threads=threads)

    return _checkpoint(
        path, {"stage": "match", "scene_seed": scene.seed, "policy": policy,
               "matching": asdict(cfg.matching), "vpr_k": cfg.vpr_k,
               "vpr_percentile": cfg.vpr_percentile},
        compute, lambda g, p: g.save(p), MatchGraph.load)


def stage_reconstruct(scene, graph: MatchGraph, sfm_cfg: SfmConfig, mode, path):
    """mode: 'joint' -> one model file; 'per-session' -> one file per session
    plus a failures sidecar. Returns Reconstruction or (dict, failures)."""
    graph_fp = {"n_pairs": len(graph),
                "n_inliers": int(sum(pm.n_inliers for pm in graph.pairs.values()))}
    if mode == "joint":
        return _checkpoint(
            path, {"stage": "reconstruct", "mode": mode, "scene_seed": scene.seed,
                   "graph": graph_fp, "sfm": asdict(sfm_cfg)},
            lambda: reconstruct_joint(scene.images, graph, scene.intrinsics, sfm_cfg),
            lambda r, p: r.save(p), Reconstruction.load)
    if mode != "per-session":
        raise ConfigError(f"unknown reconstruction mode {mode!r}")

    def compute():
        recons, failures = reconstruct_per_session(
            scene.images, graph, scene.intrinsics, sfm_cfg)
        return {"recons": recons, "failures": failures}

    def save(res, p):
        payload = {
            "failures": res["failures"],
            "sessions": {str(s): r.to_dict() for s, r in res["recons"].items()},
        }
        with open(p, "w") as f:
            json.dump(payload, f, separators=(",", ":"), sort_keys=True)

    def load(p):
        with open(p) as f:
            d = json.load(f)
        return ({int(s): Reconstruction.from_dict(r) for s, r in d["sessions"].items()},
                {int(s): msg for s, msg in d["failures"].items()})

    return _checkpoint(
        path, {"stage": "reconstruct", "mode": mode, "scene_seed": scene.seed,
               "graph": graph_fp, "sfm": asdict(sfm_cfg)},
        compute, save, load)


def stage_align(per_session: dict, icp_cfg: IcpConfig, path):
    def compute():
        merged, transforms, infos = align_posthoc(per_session, icp_cfg)
        return merged

    fp = {"stage": "align", "icp": asdict(icp_cfg),
          "sessions": {str(s): r.n_registered() for s, r in per_session.items()}}
    return _checkpoint(path, fp, compute, lambda r, p: r.save(p), Reconstruction.load)


def stage_evaluate(recon: Reconstruction, annotations, path) -> dict:
    def load(p):
        with open(p) as f:
            return json.load(f)

    fp = {"stage": "evaluate", "n_poses": recon.n_registered(),
          "n_tracks": len(recon.tracks),
          "n_pairs": len(annotations)}
    return _checkpoint(
        path, fp,
        lambda: compute_reprojection_errors(recon, annotations),
        lambda rep, p: rep.save(p), load)


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

def _subset_scene_config(base: SceneConfig, sizes) -> SceneConfig:
    d = scene_config_to_dict(base)
    cfg = scene_config_from_dict(d)
    if len(cfg.sessions) != len(sizes):
        raise ConfigError("subset preset size does not match session count")
    for s, n in zip(cfg.sessions, sizes):
        s.n_images = n
    return cfg


def _session_registration(recon: Reconstruction, scene: SyntheticScene):
    """Per-session registered-image counts of one model plus miss flags."""
    totals = {}
    for im in scene.images:
        totals[im.session_id] = totals.get(im.session_id, 0) + 1
    regs = {s: 0 for s in totals}
    for iid in recon.poses:
        regs[recon.session_of[iid]] += 1
    return {
        "registered": {str(s): regs[s] for s in sorted(regs)},
        "total": {str(s): totals[s] for s in sorted(totals)},
        "missing_sessions": [s for s in sorted(regs) if regs[s] == 0],
    }


METHODS = ("joint_hybrid", "joint_handcrafted", "split_icp")


def run_subset(cfg: PipelineConfig, name, sizes, outdir, threads=1, timings=None):
    """All three methods on one subset; returns its report row dict."""
    os.makedirs(outdir, exist_ok=True)
    timings = timings if timings is not None else {}

    def timed(label, fn):
        t0 = time.perf_counter()
        out = fn()
        timings[f"{name}.{label}"] = round(time.perf_counter() - t0, 3)
        return out

    scene_cfg = _subset_scene_config(cfg.scene, sizes)
    scene_seed = derive_seed(cfg.seed, name, "scene")
    scene = timed("simulate", lambda: stage_simulate(
        scene_cfg, scene_seed, os.path.join(outdir, "scene.json")))
    annotations = timed("annotate", lambda: stage_annotate(
        scene, cfg.eval_pairs, cfg.eval_points, derive_seed(cfg.seed, name, "annotate"),
        os.path.join(outdir, "annotations.json")))

    g_hybrid = timed("match_hybrid", lambda: stage_match(
        scene, "hybrid_vpr", cfg, os.path.join(outdir, "graph_hybrid.json"), threads))
    g_hand = timed("match_handcrafted", lambda: stage_match(
        scene, "handcrafted_all", cfg, os.path.join(outdir, "graph_handcrafted.json"),
        threads))

    joint_h = timed("recon_joint_hybrid", lambda: stage_reconstruct(
        scene, g_hybrid, cfg.sfm, "joint", os.path.join(outdir, "recon_joint_hybrid.json")))
    joint_c = timed("recon_joint_handcrafted", lambda: stage_reconstruct(
        scene, g_hand, cfg.sfm, "joint",
        os.path.join(outdir, "recon_joint_handcrafted.json")))
    per, failures = timed("recon_split", lambda: stage_reconstruct(
        scene, g_hybrid, cfg.sfm, "per-session", os.path.join(outdir, "recon_sessions.json")))

    row = {"sizes": list(sizes), "split_failures": {str(s): m for s, m in failures.items()},
           "methods": {}}
    models = {"joint_hybrid": joint_h, "joint_handcrafted": joint_c}
    if per:
        merged = timed("align", lambda: stage_align(
            per, cfg.icp, os.path.join(outdir, "merged_split.json")))
        models["split_icp"] = merged
        merged.save_ply(os.path.join(outdir, "merged_split.ply"))
    joint_h.save_ply(os.path.join(outdir, "recon_joint_hybrid.ply"))

    for method in METHODS:
        if method not in models:
            row["methods"][method] = {"failed": True, "reason": "alignment unavailable"}
            continue
        recon = models[method]
        rep = timed(f"evaluate_{method}", lambda r=recon, m=method: stage_evaluate(
            r, annotations, os.path.join(outdir, f"eval_{m}.json")))
        row["methods"][method] = {
            "median_error_px": rep["median_error_px"],
            "failure_fraction": rep["failure_fraction"],
            "counts": rep["counts"],
            "histogram": rep["histogram"],
            "session_span_medians": rep["session_span_medians"],
            "registration": _session_registration(recon, scene),
            "failed": rep["median_error_px"] is None,
        }
    return row


def run_table2(cfg: PipelineConfig, outdir, threads=1):
    """Three-method comparison over the four subset presets."""
    report_dir = os.path.join(outdir, "report")
    os.makedirs(report_dir, exist_ok=True)
    timings = {}
    rows = {}
    for name in sorted(cfg.subsets):
        rows[name] = run_subset(cfg, name, cfg.subsets[name],
                                os.path.join(outdir, "subsets", name), threads, timings)

    summary = {"subsets": rows, "aggregates": {}}
    for method in METHODS:
        per_subset = {}
        for name, row in rows.items():
            m = row["methods"][method]
            per_subset[name] = {
                "median_error_px": None if m.get("failed") else m["median_error_px"],
                "failure_fraction": None if m.get("failed") else m["failure_fraction"],
                "counts": m.get("counts", {}),
            }
        summary["aggregates"][method] = aggregate_report(per_subset)

    with open(os.path.join(report_dir, "table2.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    with open(os.path.join(report_dir, "table2.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["subset"] + [f"{m}_median_px" for m in METHODS]
                   + [f"{m}_missing_sessions" for m in METHODS])
        for name in sorted(rows):
            row = rows[name]
            meds, miss = [], []
            for m in METHODS:
                mm = row["methods"][m]
                meds.append("x" if mm.get("failed") else f"{mm['median_error_px']:.2f}")
                miss.append(len(mm.get("registration", {}).get("missing_sessions", []))
                            if not mm.get("failed") else "x")
            w.writerow([name] + meds + miss)
    with open(os.path.join(outdir, "timings.json"), "w") as f:
        json.dump(timings, f, indent=2, sort_keys=True)
    return summary


def run_fig5(cfg: PipelineConfig, outdir, threads=1):
    """Reprojection-error histograms per method, pooled over the subsets."""
    summary = run_table2(cfg, outdir, threads)
    report_dir = os.path.join(outdir, "report")
    hist = {}
    for method in METHODS:
        counts = None
        for row in summary["subsets"].values():
            m = row["methods"][method]
            if m.get("failed") or "histogram" not in m:
                continue
            c = np.asarray(m["histogram"]["counts"])
            counts = c if counts is None else counts + c
        hist[method] = {"bin_px": 5.0, "cap_px": 300.0,
                        "counts": [] if counts is None else counts.tolist()}
    with open(os.path.join(report_dir, "fig5_histograms.json"), "w") as f:
        json.dump(hist, f, indent=2, sort_keys=True)
    with open(os.path.join(report_dir, "fig5_histograms.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["bin_lo_px"] + list(METHODS))
        n = max((len(h["counts"]) for h in hist.values()), default=0)
        for i in range(n):
            w.writerow([i * 5.0] + [hist[m]["counts"][i] if i < len(hist[m]["counts"])
                                    else 0 for m in METHODS])
    return hist


def run_fig7(cfg: PipelineConfig, outdir, threads=1):
    """Single- vs multi-session track residuals on the first subset's joint
    model."""
    name = sorted(cfg.subsets)[0]
    sizes = cfg.subsets[name]
    subset_dir = os.path.join(outdir, "subsets", name)
    report_dir = os.path.join(outdir, "report")
    os.makedirs(report_dir, exist_ok=True)
    timings = {}
    run_subset(cfg, name, sizes, subset_dir, threads, timings)
    recon = Reconstruction.load(os.path.join(subset_dir, "recon_joint_hybrid.json"))

    per_track = {}
    for tid, _, err in recon.residuals():
        per_track.setdefault(tid, []).append(err)
    rows = []
    for t in recon.triangulated_tracks():
        span = recon.track_session_span(t)
        errs = per_track.get(t.track_id, [])
        if not errs:
            continue
        rows.append((t.track_id, len(span) > 1, float(np.mean(errs))))
    single = [r[2] for r in rows if not r[1]]
    multi = [r[2] for r in rows if r[1]]
    out = {
        "n_single": len(single), "n_multi": len(multi),
        "mean_residual_single_px": round(float(np.mean(single)), 6) if single else None,
        "mean_residual_multi_px": round(float(np.mean(multi)), 6) if multi else None,
        "median_residual_single_px": round(float(np.median(single)), 6) if single else None,
        "median_residual_multi_px": round(float(np.median(multi)), 6) if multi else None,
    }
    with open(os.path.join(report_dir, "fig7_track_residuals.json"), "w") as f:
        json.dump(out, f, indent=2, sort_keys=True)
    with open(os.path.join(report_dir, "fig7_track_residuals.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["track_id", "multi_session", "mean_residual_px"])
        for tid, multi_flag, err in sorted(rows):
            w.writerow([tid, int(multi_flag), f"{err:.6f}"])
    with open(os.path.join(outdir, "timings.json"), "w") as f:
        json.dump(timings, f, indent=2, sort_keys=True)
    return out


def run_fig8(cfg: PipelineConfig, outdir, threads=1):
    """Matching-policy cost scaling over survey sizes.

    Invocation counts are exact combinatorics (VPR candidate counts measured
    on generated scenes); at 3x100 images the hybrid and cross-exhaustive
    policies are additionally run end to end to compare reconstruction
    quality.
    """
    report_dir = os.path.join(outdir, "report")
    os.makedirs(report_dir, exist_ok=True)
    timings = {}
    scaling = {}
    for n in cfg.scaling_sizes:
        scene_cfg = _subset_scene_config(cfg.scene, (n, n, n))
        seed = derive_seed(cfg.seed, "fig8", n, "scene")
        sdir = os.path.join(outdir, "scaling", f"n{n}")
        os.makedirs(sdir, exist_ok=True)
        t0 = time.perf_counter()
        scene = stage_simulate(scene_cfg, seed, os.path.join(sdir, "scene.json"))
        candidates, _ = select_candidates(scene, cfg.vpr_k, cfg.vpr_percentile)
        timings[f"fig8.n{n}.simulate"] = round(time.perf_counter() - t0, 3)
        sizes = [sum(1 for im in scene.images if im.session_id == s)
                 for s in sorted({im.session_id for im in scene.images})]
        report = matching_cost_report(
            sizes, ("hybrid_vpr", "robust_cross", "robust_all", "handcrafted_all"),
            cfg.matching.handcrafted_cost_units, cfg.matching.robust_cost_units,
            candidate_pair_count=len(candidates))
        scaling[str(3 * n)] = {"images_per_session": sizes,
                               "candidate_pairs": len(candidates),
                               "policies": report}

    # end-to-end quality comparison at 3 x quality_size images
    n = cfg.quality_size
    sdir = os.path.join(outdir, "scaling", f"n{n}")
    scene = stage_simulate(
        _subset_scene_config(cfg.scene, (n, n, n)),
        derive_seed(cfg.seed, "fig8", n, "scene"), os.path.join(sdir, "scene.json"))
    annotations = stage_annotate(
        scene, cfg.eval_pairs, cfg.eval_points, derive_seed(cfg.seed, "fig8", "annotate"),
        os.path.join(sdir, "annotations.json"))
    quality = {}
    for policy in ("hybrid_vpr", "robust_cross"):
        t0 = time.perf_counter()
        g = stage_match(scene, policy, cfg, os.path.join(sdir, f"graph_{policy}.json"),
                        threads)
        timings[f"fig8.match_{policy}"] = round(time.perf_counter() - t0, 3)
        t0 = time.perf_counter()
        recon = stage_reconstruct(scene, g, cfg.sfm, "joint",
                                  os.path.join(sdir, f"recon_{policy}.json"))
        timings[f"fig8.recon_{policy}"] = round(time.perf_counter() - t0, 3)
        rep = stage_evaluate(recon, annotations, os.path.join(sdir, f"eval_{policy}.json"))
        robust_invocations = sum(
            st["invocations"] for prov, st in g.stats.items() if "robust" in prov)
        quality[policy] = {
            "median_error_px": rep["median_error_px"],
            "counts": rep["counts"],
            "robust_invocations": robust_invocations,
            "n_registered": recon.n_registered(),
        }

    out = {"scaling": scaling, "quality_n_images": 3 * n, "quality": quality}
    with open(os.path.join(report_dir, "fig8_costs.json"), "w") as f:
        json.dump(out, f, indent=2, sort_keys=True)
    save_cost_csv({f"N{N}_{p}": scaling[N]["policies"][p]
                   for N in sorted(scaling, key=int) for p in scaling[N]["policies"]},
                  os.path.join(report_dir, "fig8_costs.csv"))
    with open(os.path.join(outdir, "timings.json"), "w") as f:
        json.dump(timings, f, indent=2, sort_keys=True)
    return out


def run_experiment(name, cfg: PipelineConfig, outdir, threads=1):
    if name not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {name!r}; expected one of {EXPERIMENTS}")
    os.makedirs(outdir, exist_ok=True)
    cfg.save(os.path.join(outdir, "config.json"))
    runner = {"table2": run_table2, "fig5": run_fig5, "fig7": run_fig7,
              "fig8": run_fig8}[name]
    return runner(cfg, outdir, threads)
