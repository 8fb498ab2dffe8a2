"""Normalized canonical coordinates and matching-pair generation.

A posed observation ``X`` of an object with pose ``T`` (object to world) and
canonical scale ``s`` is mapped to the shared category frame by
``x -> T^-1(x) / s``. Points of different instances that land close together
in that frame are treated as matching.
"""

import json
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import BadParameter, DegenerateShape, InsufficientPairs
from .geom import PointCloud, RigidTransform, bounding_box
from .validation import check_points, check_random_state

POS, NEG = 1, 0

SAME_INSTANCE_TAU = 0.025
CROSS_INSTANCE_TAU = 0.05
NEGATIVE_MARGIN = 1.5


@dataclass(frozen=True, eq=False)
class PosedCloud:
    cloud: PointCloud
    pose: RigidTransform
    scale: float

    def __post_init__(self):
        if not isinstance(self.cloud, PointCloud):
            object.__setattr__(self, "cloud", PointCloud(self.cloud))
        if not np.isfinite(self.scale) or not self.scale > 0:
            raise BadParameter(f"scale must be positive, got {self.scale!r}")


class MatchSet:
    """Index pairs ``(i, j)`` between two clouds, each labelled positive or negative."""

    def __init__(self, i, j, label):
        self.i = np.asarray(i, dtype=np.int64).reshape(-1)
        self.j = np.asarray(j, dtype=np.int64).reshape(-1)
        self.label = np.asarray(label, dtype=np.int8).reshape(-1)
        if not (len(self.i) == len(self.j) == len(self.label)):
            raise BadParameter("i, j and label must have the same length")

    @classmethod
    def empty(cls):
        return cls([], [], [])

    def __len__(self):
        return len(self.i)

    def __eq__(self, other):
        return (
            isinstance(other, MatchSet)
            and np.array_equal(self.i, other.i)
            and np.array_equal(self.j, other.j)
            and np.array_equal(self.label, other.label)
        )

    @property
    def positives(self):
        m = self.label == POS
        return self.i[m], self.j[m]

    @property
    def negatives(self):
        m = self.label == NEG
        return self.i[m], self.j[m]

    @property
    def n_pos(self):
        return int(np.count_nonzero(self.label == POS))

    @property
    def n_neg(self):
        return int(np.count_nonzero(self.label == NEG))

    def as_set(self):
        return set(zip(self.i.tolist(), self.j.tolist(), self.label.tolist()))

    def validate(self, n_x, n_y):
        if len(self) and (self.i.min() < 0 or self.i.max() >= n_x or self.j.min() < 0 or self.j.max() >= n_y):
            raise BadParameter("match indices out of range")
        if len(self.as_set()) != len(self):
            raise BadParameter("duplicate entries in match set")

    def to_jsonl(self, path):
        with open(path, "w") as fh:
            for a, b, lab in zip(self.i.tolist(), self.j.tolist(), self.label.tolist()):
                fh.write(json.dumps({"i": a, "j": b, "label": "pos" if lab == POS else "neg"}) + "\n")

    @classmethod
    def from_jsonl(cls, path):
        i, j, lab = [], [], []
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    i.append(rec["i"])
                    j.append(rec["j"])
                    lab.append(POS if rec["label"] == "pos" else NEG)
        return cls(i, j, lab)


def to_ncc(p):
    """Map a posed cloud into normalized canonical coordinates."""
    if not p.scale > 0:
        raise BadParameter("scale must be positive")
    return PointCloud(p.pose.inverse().apply(p.cloud.points) / p.scale)


def canonical_scale(model):
    """Bounding-box diagonal of a model in its canonical pose."""
    pts = check_points(model, allow_empty=True)
    if len(pts) < 2:
        raise DegenerateShape("canonical scale needs at least two points")
    return bounding_box(pts).diagonal


def positive_pairs(x_ncc, y_ncc, tau):
    """All ``(i, j)`` with ``|x_i - y_j| < tau`` (strict), sorted by ``(i, j)``."""
    if not tau > 0:
        raise BadParameter("tau must be positive")
    x = check_points(x_ncc, allow_empty=True)
    y = check_points(y_ncc, allow_empty=True)
    if len(x) == 0 or len(y) == 0:
        return MatchSet.empty()
    sdm = cKDTree(x).sparse_distance_matrix(cKDTree(y), tau, output_type="ndarray")
    i, j = sdm["i"].astype(np.int64), sdm["j"].astype(np.int64)
    # the tree uses <=, and its distances may differ in the last ulp
    d = x[i] - y[j]
    keep = np.sqrt(np.einsum("ij,ij->i", d, d)) < tau
    i, j = i[keep], j[keep]
    order = np.argsort(i * len(y) + j)  # keys are unique, so any sort gives (i, j) order
    return MatchSet(i[order], j[order], np.full(len(order), POS))


def cross_instance_pairs(x, y, tau=CROSS_INSTANCE_TAU):
    """Positive pairs between two posed instances, found in the shared NCC frame."""
    return positive_pairs(to_ncc(x), to_ncc(y), tau)


def sample_pairs(full, n_pos, n_neg, x, y, seed, *, tau=SAME_INSTANCE_TAU, margin=NEGATIVE_MARGIN):
    """Subsample positives and draw negatives for one training pair.

    ``x`` and ``y`` are the NCC clouds the positives were computed on.
    Negatives are uniform ``(i, j)`` draws rejected when they are already
    positive or closer than ``margin * tau``.
    """
    rng = check_random_state(seed)
    xp = check_points(x)
    yp = check_points(y)
    pi, pj = full.positives
    if n_pos > len(pi):
        raise InsufficientPairs(f"requested {n_pos} positives, only {len(pi)} available")
    sel = np.sort(rng.choice(len(pi), size=n_pos, replace=False)) if n_pos else np.zeros(0, dtype=np.int64)
    pos_i, pos_j = pi[sel], pj[sel]

    neg_i = np.zeros(0, dtype=np.int64)
    neg_j = np.zeros(0, dtype=np.int64)
    if n_neg > 0:
        # with margin >= 1 the distance test already excludes every positive
        positive_keys = set((pi * len(yp) + pj).tolist()) if margin < 1 else ()
        seen = set()
        reject_r = margin * tau
        chunks_i, chunks_j = [], []
        have = 0
        for _ in range(1000):
            m = 2 * (n_neg - have) + 16
            ci = rng.integers(0, len(xp), m)
            cj = rng.integers(0, len(yp), m)
            ok = np.linalg.norm(xp[ci] - yp[cj], axis=1) >= reject_r
            for a, b in zip(ci[ok].tolist(), cj[ok].tolist()):
                key = a * len(yp) + b
                if key in seen or key in positive_keys:
                    continue
                seen.add(key)
                chunks_i.append(a)
                chunks_j.append(b)
                have += 1
                if have == n_neg:
                    break
            if have == n_neg:
                break
        if have < n_neg:
            raise InsufficientPairs(f"could only draw {have} of {n_neg} negatives")
        neg_i = np.asarray(chunks_i, dtype=np.int64)
        neg_j = np.asarray(chunks_j, dtype=np.int64)

    return MatchSet(
        np.concatenate([pos_i, neg_i]),
        np.concatenate([pos_j, neg_j]),
        np.concatenate([np.full(len(pos_i), POS), np.full(len(neg_i), NEG)]),
    )


def write_pose(path, pose, scale, **extra):
    with open(path, "w") as fh:
        json.dump({**pose.to_dict(), "scale": float(scale), **extra}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_pose(path):
    with open(path) as fh:
        d = json.load(fh)
    return RigidTransform.from_dict(d), float(d["scale"]), d
