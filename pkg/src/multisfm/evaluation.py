"""Cross-session evaluation: reprojection of ground-truth annotated pairs
through a reconstruction, report aggregation and matching-cost accounting."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ImageNotRegistered
from .geometry import project_many

HIST_BIN_PX = 5.0
HIST_CAP_PX = 300.0
FAILURE_THRESHOLD_PX = 50.0
ASSOCIATION_RADIUS_PX = 5.0
EXACT_EPS_PX = 1e-6


@dataclass
class RpeSample:
    """One annotated correspondence pushed through a reconstruction."""

    query_image_id: int
    db_image_id: int
    landmark_id: int
    status: str                  # resolved | unresolved | unregistered
    error_px: float = np.nan
    track_id: int = -1
    session_span: tuple = ()

    def to_dict(self):
        return {
            "query_image_id": self.query_image_id,
            "db_image_id": self.db_image_id,
            "landmark_id": int(self.landmark_id),
            "status": self.status,
            "error_px": None if not np.isfinite(self.error_px) else round(self.error_px, 6),
            "track_id": self.track_id,
            "session_span": list(self.session_span),
        }


@dataclass
class EvaluationReport:
    samples: list = field(default_factory=list)

    @property
    def resolved(self):
        return [s for s in self.samples if s.status == "resolved"]

    def median_error_px(self):
        errs = [s.error_px for s in self.resolved]
        return float(np.median(errs)) if errs else float("nan")

    def failure_fraction(self, threshold=FAILURE_THRESHOLD_PX):
        errs = [s.error_px for s in self.resolved]
        if not errs:
            return float("nan")
        return float(np.mean(np.asarray(errs) > threshold))

    def counts(self):
        c = {"resolved": 0, "unresolved": 0, "unregistered": 0}
        for s in self.samples:
            c[s.status] += 1
        return c

    def histogram(self, bin_px=HIST_BIN_PX, cap_px=HIST_CAP_PX):
        """(bin_edges, counts) with one trailing overflow bin beyond cap_px."""
        edges = np.arange(0.0, cap_px + bin_px, bin_px)
        counts = np.zeros(len(edges), dtype=int)  # last entry = overflow
        for s in self.resolved:
            if s.error_px >= cap_px:
                counts[-1] += 1
            else:
                counts[int(s.error_px // bin_px)] += 1
        return edges, counts

    def session_span_breakdown(self):
        """Median error per multi/single-session track span of the associated
        track (diagnostic for how cross-session points behave)."""
        groups = {}
        for s in self.resolved:
            key = "multi" if len(s.session_span) > 1 else "single"
            groups.setdefault(key, []).append(s.error_px)
        return {k: float(np.median(v)) for k, v in sorted(groups.items())}

    def to_dict(self):
        med = self.median_error_px()
        frac = self.failure_fraction()
        edges, counts = self.histogram()
        return {
            "median_error_px": None if np.isnan(med) else round(med, 6),
            "failure_fraction": None if np.isnan(frac) else round(frac, 6),
            "failure_threshold_px": FAILURE_THRESHOLD_PX,
            "counts": self.counts(),
            "histogram": {"bin_px": HIST_BIN_PX, "cap_px": HIST_CAP_PX,
                          "counts": counts.tolist()},
            "session_span_medians": self.session_span_breakdown(),
            "samples": [s.to_dict() for s in self.samples],
        }

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, separators=(",", ":"), sort_keys=True)

    def save_samples_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["query_image_id", "db_image_id", "landmark_id", "status",
                        "error_px", "track_id", "session_span"])
            for s in self.samples:
                w.writerow([s.query_image_id, s.db_image_id, s.landmark_id, s.status,
                            "" if not np.isfinite(s.error_px) else f"{s.error_px:.6f}",
                            s.track_id, "|".join(str(x) for x in s.session_span)])


def associate_query_point(recon, image_id, query_uv, radius_px=ASSOCIATION_RADIUS_PX):
    """Triangulated track whose observation in `image_id` is nearest to the
    query pixel: an exact hit (< 1e-6 px) wins outright, otherwise the nearest
    observation within `radius_px`. Returns the Track or None; raises
    ImageNotRegistered when the image has no pose."""
    if image_id not in recon.poses:
        raise ImageNotRegistered(f"image {image_id} is not registered")
    query_uv = np.asarray(query_uv, dtype=float)
    best = None
    for tid, kp, uv in recon.observations_in_image(image_id):
        d = float(np.linalg.norm(uv - query_uv))
        if d < EXACT_EPS_PX:
            return recon.tracks[tid]
        if d <= radius_px and (best is None or d < best[0]):
            best = (d, tid)
    return recon.tracks[best[1]] if best else None


def compute_reprojection_errors(recon, annotated_pairs,
                                radius_px=ASSOCIATION_RADIUS_PX) -> EvaluationReport:
    """Push every annotated ground-truth correspondence through the model.

    For each annotated point: associate the query pixel with a triangulated
    track in the query image, project that track's point into the database
    image and measure the pixel distance to the ground-truth location there.
    Correspondences whose images are unregistered count as `unregistered`;
    failed associations or behind-camera projections as `unresolved`.
    """
    report = EvaluationReport()
    k = recon.intrinsics
    for pair in annotated_pairs:
        qa, db = pair.query_image_id, pair.db_image_id
        registered = qa in recon.poses and db in recon.poses
        for m in range(len(pair.landmark_ids)):
            lid = int(pair.landmark_ids[m])
            if not registered:
                report.samples.append(RpeSample(qa, db, lid, "unregistered"))
                continue
            track = associate_query_point(recon, qa, pair.query_uv[m], radius_px)
            if track is None:
                report.samples.append(RpeSample(qa, db, lid, "unresolved"))
                continue
            uv, z = project_many(track.point, recon.poses[db], k)
            if z[0] <= 0 or not np.all(np.isfinite(uv[0])):
                report.samples.append(RpeSample(qa, db, lid, "unresolved",
                                                track_id=track.track_id))
                continue
            err = float(np.linalg.norm(uv[0] - pair.db_uv[m]))
            span = tuple(recon.track_session_span(track))
            report.samples.append(RpeSample(qa, db, lid, "resolved", err,
                                            track.track_id, span))
    return report


# ---------------------------------------------------------------------------
# aggregation across subsets
# ---------------------------------------------------------------------------

def aggregate_report(per_subset: dict):
    """Summary over subsets: per-subset medians/failure fractions, their
    average (rounded to 2 decimals) and pooled counts.

    `per_subset` maps subset name -> EvaluationReport (or its to_dict()).
    Subsets with no resolved samples are flagged as failures and excluded
    from the average.
    """
    rows = {}
    for name in sorted(per_subset):
        rep = per_subset[name]
        d = rep.to_dict() if isinstance(rep, EvaluationReport) else rep
        rows[name] = {
            "median_error_px": d["median_error_px"],
            "failure_fraction": d["failure_fraction"],
            "counts": d["counts"],
            "failed": d["median_error_px"] is None,
        }
    medians = [r["median_error_px"] for r in rows.values() if not r["failed"]]
    fracs = [r["failure_fraction"] for r in rows.values() if not r["failed"]]
    return {
        "subsets": rows,
        "n_failed_subsets": sum(r["failed"] for r in rows.values()),
        "average_median_error_px": round(float(np.mean(medians)), 2) if medians else None,
        "average_failure_fraction": round(float(np.mean(fracs)), 4) if fracs else None,
    }


# ---------------------------------------------------------------------------
# matching cost accounting
# ---------------------------------------------------------------------------

def expected_invocations(n_images_per_session, policy, candidate_pair_count=None):
    """Matcher invocation counts a policy requires, split by matcher type.

    Counts are per image pair (rotation augmentation is internal to one
    robust invocation). `candidate_pair_count` is required for hybrid_vpr.
    """
    ns = list(n_images_per_session)
    total = sum(ns)
    all_pairs = total * (total - 1) // 2
    intra = sum(n * (n - 1) // 2 for n in ns)
    cross = all_pairs - intra
    if policy == "hybrid_vpr":
        if candidate_pair_count is None:
            raise ValueError("hybrid_vpr needs the candidate pair count")
        return {"handcrafted": intra, "robust": int(candidate_pair_count)}
    if policy == "robust_cross":
        return {"handcrafted": intra, "robust": cross}
    if policy == "robust_all":
        return {"handcrafted": 0, "robust": all_pairs}
    if policy == "handcrafted_all":
        return {"handcrafted": all_pairs, "robust": 0}
    raise ValueError(f"unknown policy {policy!r}")


def matching_cost_report(n_images_per_session, policies, handcrafted_cost=1.0,
                         robust_cost=50.0, candidate_pair_count=None):
    """Modeled matching cost (in handcrafted-equivalent units) per policy."""
    out = {}
    for p in policies:
        inv = expected_invocations(n_images_per_session, p, candidate_pair_count)
        out[p] = {
            "invocations": inv,
            "cost_units": inv["handcrafted"] * handcrafted_cost + inv["robust"] * robust_cost,
        }
    return out


def save_cost_csv(cost_report, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["policy", "handcrafted_invocations", "robust_invocations", "cost_units"])
        for p in sorted(cost_report):
            r = cost_report[p]
            w.writerow([p, r["invocations"]["handcrafted"], r["invocations"]["robust"],
                        f"{r['cost_units']:.1f}"])
