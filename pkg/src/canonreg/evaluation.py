"""Matching accuracy, rotation/translation errors and threshold tables."""

import csv
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import BadParameter, InsufficientPairs
from .geom import is_rotation
from .validation import check_points

TAU1 = 0.05
MIN_INLIER_RATIO = 0.05
RRE_THRESHOLDS_DEG = (10, 20, 30)
RTE_THRESHOLDS_CM = (5, 10)


def match_accuracy(x, y, corr, t_true, tau1=TAU1):
    """Fraction of correspondences whose ground-truth-aligned source lies within ``tau1`` of its target."""
    if len(corr) == 0:
        raise InsufficientPairs("no correspondences")
    X = check_points(x, name="x")
    Y = check_points(y, name="y")
    r = np.linalg.norm(t_true.apply(X[corr.i]) - Y[corr.j], axis=1)
    return float(np.count_nonzero(r < tau1)) / len(corr)


def rre(r_est, r_true):
    """Geodesic angle (radians) between two rotations, from the trace formula."""
    A = np.asarray(r_est, dtype=np.float64)
    B = np.asarray(r_true, dtype=np.float64)
    if not (is_rotation(A, 1e-6) and is_rotation(B, 1e-6)):
        raise BadParameter("rre expects two rotation matrices")
    c = (np.trace(A.T @ B) - 1.0) / 2.0
    return float(math.acos(min(1.0, max(-1.0, c))))


def rte(p_est, p_true):
    return float(np.linalg.norm(np.asarray(p_est, dtype=np.float64) - np.asarray(p_true, dtype=np.float64)))


@dataclass
class EvalRecord:
    case_id: str
    match_acc: float
    rre: float
    rte: float
    inlier_ratio: float
    runtime: float = 0.0
    candidate: str = ""

    def __post_init__(self):
        if not 0 <= self.match_acc <= 1:
            raise BadParameter("match_acc must lie in [0, 1]")
        if not 0 <= self.rre <= math.pi + 1e-12 or self.rte < 0:
            raise BadParameter("invalid rre/rte")

    @property
    def match_ok(self):
        return self.match_acc >= MIN_INLIER_RATIO


@dataclass
class ThresholdTable:
    rre_thresholds: tuple
    rre_fractions: tuple
    rte_thresholds: tuple
    rte_fractions: tuple
    n: int

    def __post_init__(self):
        for name in ("rre", "rte"):
            th = getattr(self, f"{name}_thresholds")
            fr = getattr(self, f"{name}_fractions")
            pairs = sorted(zip(th, fr))
            if any(a[1] > b[1] for a, b in zip(pairs, pairs[1:])):
                raise BadParameter(f"{name} fractions are not monotone in the threshold")

    def render(self, label="method"):
        head = " | ".join(f"{t:g}" for t in self.rre_thresholds)
        head2 = " | ".join(f"{t:g}" for t in self.rte_thresholds)
        rre_s = " | ".join(f"{100 * f:6.2f}" for f in self.rre_fractions)
        rte_s = " | ".join(f"{100 * f:6.2f}" for f in self.rte_fractions)
        w = max(len(label), 6)
        lines = [
            f"{'':{w}} | RRE (degree): {head} | RTE (cm): {head2}",
            f"{label:{w}} | {rre_s} | {rte_s}",
        ]
        return "\n".join(lines)


def threshold_table(records, rre_thresholds=RRE_THRESHOLDS_DEG, rte_thresholds=RTE_THRESHOLDS_CM):
    """Fraction of records strictly below each RRE (degrees) and RTE (cm) threshold."""
    records = list(records)
    if not records:
        raise InsufficientPairs("no evaluation records")
    rre_deg = np.array([np.degrees(r.rre) for r in records])
    rte_cm = np.array([100.0 * r.rte for r in records])
    n = len(records)
    return ThresholdTable(
        tuple(rre_thresholds),
        tuple(float(np.count_nonzero(rre_deg < t)) / n for t in rre_thresholds),
        tuple(rte_thresholds),
        tuple(float(np.count_nonzero(rte_cm < t)) / n for t in rte_thresholds),
        n,
    )


_FIELDS = ["case_id", "candidate", "match_acc", "match_ok", "rre", "rte", "inlier_ratio", "runtime"]


def write_records(path, records, include_runtime=False, seed=None):
    """One CSV row per record. Runtime is written as 0 unless asked for, to keep reports reproducible."""
    tail = [seed] if seed is not None else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_FIELDS + (["seed"] if tail else []))
        for r in records:
            w.writerow([r.case_id, r.candidate, repr(r.match_acc), int(r.match_ok), repr(r.rre), repr(r.rte),
                        repr(r.inlier_ratio), repr(r.runtime if include_runtime else 0.0)] + tail)


def read_records(path):
    with open(path, newline="") as fh:
        return [EvalRecord(row["case_id"], float(row["match_acc"]), float(row["rre"]), float(row["rte"]),
                           float(row["inlier_ratio"]), float(row["runtime"]), row["candidate"])
                for row in csv.DictReader(fh)]


def summary(records):
    d = {k: float(np.mean([getattr(r, k) for r in records])) for k in ("match_acc", "rre", "rte", "inlier_ratio")}
    d["n"] = len(records)
    return d


def record_dict(r):
    return asdict(r)
