"""Feature correspondences, Kabsch alignment, RANSAC and candidate selection."""

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import BadParameter, DegenerateConfiguration, EmptyCloud, InsufficientPairs
from .geom import RigidTransform
from .parallel import n_workers
from .validation import check_features, check_points


@dataclass(frozen=True)
class CorrespondenceSet:
    i: np.ndarray
    j: np.ndarray
    distance: np.ndarray

    def __len__(self):
        return len(self.i)


def feature_correspondences(fX, fY, mutual=False):
    """Exact feature-space nearest neighbour in ``fY`` for every row of ``fX``."""
    FX = check_features(fX, name="fX")
    FY = check_features(fY, name="fY")
    if FX.shape[1] != FY.shape[1]:
        raise BadParameter(f"feature dimensions differ: {FX.shape[1]} vs {FY.shape[1]}")
    j = _nearest(FX, FY)
    i = np.arange(len(FX))
    dist = np.linalg.norm(FX - FY[j], axis=1)
    if mutual:
        back = _nearest(FY, FX)
        keep = back[j] == i
        i, j, dist = i[keep], j[keep], dist[keep]
    return CorrespondenceSet(i, j, dist)


def _nearest(A, B, block=2048):
    """Row index in ``B`` nearest to each row of ``A``.

    Brute force through matrix products: for 32-D features a kd-tree prunes
    almost nothing and is several times slower.
    """
    if len(B) == 0 or len(A) == 0:
        raise EmptyCloud("empty feature set")
    bb = np.einsum("ij,ij->i", B, B)
    out = np.empty(len(A), dtype=np.int64)
    for s in range(0, len(A), block):
        out[s:s + block] = np.argmin(bb[None, :] - 2.0 * (A[s:s + block] @ B.T), axis=1)
    return out


def kabsch(src, dst):
    """Least-squares rigid transform mapping ``src`` onto ``dst`` (det R = +1)."""
    A = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    B = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if A.shape != B.shape:
        raise BadParameter("src and dst must have the same shape")
    if len(A) < 3:
        raise InsufficientPairs("kabsch needs at least 3 point pairs")
    ca, cb = A.mean(axis=0), B.mean(axis=0)
    A0, B0 = A - ca, B - cb
    for P in (A0, B0):
        s = np.linalg.svd(P, compute_uv=False)
        if s[0] == 0 or s[1] <= 1e-12 * s[0]:
            raise DegenerateConfiguration("point set is collinear or coincident")
    H = A0.T @ B0
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = Vt.T @ D @ U.T
    return RigidTransform(R, cb - R @ ca)


def _kabsch_batch(A, B):
    """Vectorized Kabsch over a batch of ``(n, k, 3)`` samples; no degeneracy checks."""
    ca = A.mean(axis=1, keepdims=True)
    cb = B.mean(axis=1, keepdims=True)
    H = np.einsum("nki,nkj->nij", A - ca, B - cb)
    U, _, Vt = np.linalg.svd(H)
    V = np.swapaxes(Vt, 1, 2)
    d = np.sign(np.linalg.det(V @ np.swapaxes(U, 1, 2)))
    d[d == 0] = 1.0
    V[:, :, 2] *= d[:, None]
    R = V @ np.swapaxes(U, 1, 2)
    t = cb[:, 0] - np.einsum("nij,nj->ni", R, ca[:, 0])
    return R, t


@dataclass(frozen=True)
class RansacConfig:
    sample_size: int = 3
    max_iterations: int = 4000
    inlier_threshold: float = 0.05
    confidence: float = 0.999
    seed: int = 0
    mutual: bool = False
    batch: int = 250

    def validate(self):
        if self.sample_size < 3:
            raise BadParameter("sample_size must be >= 3")
        if self.max_iterations < 1:
            raise BadParameter("max_iterations must be >= 1")
        if not self.inlier_threshold > 0:
            raise BadParameter("inlier_threshold must be positive")
        if not 0 < self.confidence <= 1:
            raise BadParameter("confidence must lie in (0, 1]")
        return self


@dataclass(frozen=True)
class RegistrationResult:
    transform: RigidTransform
    inlier_count: int
    inlier_ratio: float
    rmse: float
    iterations: int = 0
    inliers: np.ndarray = None

    @property
    def fitness(self):
        return self.inlier_ratio

    def to_dict(self):
        return {
            "transform": self.transform.to_dict(),
            "inlier_count": int(self.inlier_count),
            "inlier_ratio": float(self.inlier_ratio),
            "fitness": float(self.inlier_ratio),
            "rmse": float(self.rmse),
            "iterations": int(self.iterations),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(RigidTransform.from_dict(d["transform"]), d["inlier_count"], d["inlier_ratio"], d["rmse"],
                   d.get("iterations", 0))


def _residuals(T, src, dst):
    return np.linalg.norm(T.apply(src) - dst, axis=1)


def _score(T, src, dst, thr):
    r = _residuals(T, src, dst)
    mask = r < thr
    n = int(mask.sum())
    rmse = float(np.sqrt(np.mean(r[mask] ** 2))) if n else math.inf
    return mask, n, rmse


def ransac_register(x, y, corr, cfg=RansacConfig()):
    """Robust rigid registration of ``x`` onto ``y`` from putative correspondences."""
    cfg.validate()
    X = check_points(x, name="x")
    Y = check_points(y, name="y")
    n = len(corr)
    if n < cfg.sample_size:
        raise InsufficientPairs(f"need at least {cfg.sample_size} correspondences, got {n}")
    src, dst = X[corr.i], Y[corr.j]
    rng = np.random.default_rng(cfg.seed)
    thr2 = cfg.inlier_threshold ** 2
    k = cfg.sample_size

    best_count, best = -1, None
    done = 0
    while done < cfg.max_iterations:
        m = min(cfg.batch, cfg.max_iterations - done)
        # k distinct correspondences per hypothesis
        idx = np.argsort(rng.random((m, n)), axis=1)[:, :k] if n <= 64 else _distinct_samples(rng, m, n, k)
        R, t = _kabsch_batch(src[idx], dst[idx])
        pred = np.einsum("hij,nj->hni", R, src) + t[:, None, :]
        counts = (np.sum((pred - dst) ** 2, axis=2) < thr2).sum(axis=1)
        h = int(np.argmax(counts))
        if counts[h] > best_count:
            best_count, best = int(counts[h]), (R[h], t[h])
        done += m
        w = best_count / n
        if w >= 1.0:
            break
        if w > 0 and cfg.confidence < 1:
            needed = math.log(1 - cfg.confidence) / math.log(1 - w**k) if w**k < 1 else 0
            if done >= needed:
                break

    R, t = best
    u, _, vt = np.linalg.svd(R)
    T = RigidTransform(u @ vt, t)
    mask, count, rmse = _score(T, src, dst, cfg.inlier_threshold)
    if count >= 3:
        try:
            refined = kabsch(src[mask], dst[mask])
        except DegenerateConfiguration:
            refined = None
        if refined is not None:
            m2, c2, r2 = _score(refined, src, dst, cfg.inlier_threshold)
            if c2 >= count:
                T, mask, count, rmse = refined, m2, c2, r2
    return RegistrationResult(T, count, count / n, rmse, done, mask)


def _distinct_samples(rng, m, n, k):
    idx = rng.integers(0, n, size=(m, k))
    while True:
        s = np.sort(idx, axis=1)
        dup = np.any(s[:, 1:] == s[:, :-1], axis=1)
        if not dup.any():
            return idx
        idx[dup] = rng.integers(0, n, size=(int(dup.sum()), k))


def select_model(x, candidates, fX, cfg=RansacConfig()):
    """Register ``x`` against each ``(id, cloud, features)`` candidate and pick the best.

    Best means highest inlier ratio, then lower inlier RMSE, then lower id.
    Returns ``(id, result, {id: result})``.
    """
    candidates = list(candidates)
    if not candidates:
        raise BadParameter("at least one candidate is required")

    def run(c):
        cid, cloud, fY = c
        corr = feature_correspondences(fX, fY, mutual=cfg.mutual)
        return ransac_register(x, cloud, corr, cfg)

    with ThreadPoolExecutor(max_workers=n_workers()) as ex:
        results = list(ex.map(run, candidates))
    by_id = {c[0]: r for c, r in zip(candidates, results)}
    best = min(by_id, key=lambda cid: (-by_id[cid].inlier_ratio, by_id[cid].rmse, cid))
    return best, by_id[best], by_id


def write_result(path, result, **extra):
    with open(path, "w") as fh:
        json.dump({**result.to_dict(), **extra}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_result(path):
    with open(path) as fh:
        d = json.load(fh)
    return RegistrationResult.from_dict(d), d
