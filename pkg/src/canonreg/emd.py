"""Exact Earth Mover's Distance and EMD-based neighbour annotation."""

import json
import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .errors import BadParameter, SizeMismatch
from .ncc import canonical_scale
from .validation import check_points, substream, check_positive
from .parallel import n_workers


def emd_exact(x, y):
    """Minimum total Euclidean cost over one-to-one matchings of two equal-size sets.

    The cost matrix is dense, so memory is ``8 * n**2`` bytes (32 MiB at n=2048).
    """
    a = check_points(x, allow_empty=True, name="x")
    b = check_points(y, allow_empty=True, name="y")
    if len(a) != len(b):
        raise SizeMismatch(f"EMD needs equal sizes, got {len(a)} and {len(b)}")
    if len(a) == 0:
        return 0.0
    cost = cdist(a, b)
    rows, cols = linear_sum_assignment(cost)
    # exactly rounded sum: independent of row order and of tie-breaking among optimal matchings
    return math.fsum(cost[rows, cols].tolist())


class NeighborGraph(dict):
    """``{model_id: [(neighbor_id, emd), ...]}`` sorted ascending by EMD."""

    def __init__(self, data=(), *, k=None, n_samples=None, seed=None):
        super().__init__(data)
        self.k = k
        self.n_samples = n_samples
        self.seed = seed

    def neighbors(self, model_id):
        return [nid for nid, _ in self[model_id]]

    def validate(self):
        for mid, lst in self.items():
            emds = [e for _, e in lst]
            if any(a > b for a, b in zip(emds, emds[1:])):
                raise BadParameter(f"neighbours of {mid} are not sorted by EMD")
            if any(nid == mid for nid, _ in lst):
                raise BadParameter(f"{mid} lists itself as a neighbour")
            if self.k is not None and len(lst) != self.k:
                raise BadParameter(f"{mid} has {len(lst)} neighbours, expected {self.k}")

    def to_json(self, path):
        payload = {
            "meta": {"k": self.k, "n_samples": self.n_samples, "seed": self.seed},
            "neighbors": {str(m): [{"id": n, "emd": e} for n, e in lst] for m, lst in sorted(self.items())},
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            payload = json.load(fh)
        meta = payload.get("meta", {})
        body = payload.get("neighbors", payload)
        data = {m: [(r["id"], float(r["emd"])) for r in lst] for m, lst in body.items()}
        return cls(data, k=meta.get("k"), n_samples=meta.get("n_samples"), seed=meta.get("seed"))


def _subsample(points, n, rng):
    if len(points) <= n:
        return points
    return points[np.sort(rng.choice(len(points), size=n, replace=False))]


def annotate_neighbors(models, k=3, n_samples=512, seed=0, *, pool=None, normalize=True):
    """EMD k-nearest-neighbour graph over a set of models.

    ``models`` is a sequence of ``(id, cloud)``. If ``pool`` is given, every
    model's neighbours are restricted to ids in ``pool`` (e.g. the training
    split). With ``normalize`` the clouds are divided by their canonical scale
    first so that EMD compares shape rather than size.
    """
    check_positive(n_samples, "n_samples", integer=True)
    check_positive(k, "k", integer=True)
    models = list(models)
    ids = [m for m, _ in models]
    if len(set(ids)) != len(ids):
        raise BadParameter("model ids must be unique")
    pool = set(ids) if pool is None else set(pool)
    if len(models) < k + 1:
        raise BadParameter(f"need at least k+1={k + 1} models, got {len(models)}")

    samples = {}
    for mid, cloud in models:
        pts = check_points(cloud)
        if normalize:
            pts = pts / canonical_scale(pts)
        # same stream for every model: identical clouds get identical samples,
        # and a sample never depends on which other models are present
        samples[mid] = _subsample(pts, n_samples, substream(seed, "emd"))
    sizes = {len(s) for s in samples.values()}
    if len(sizes) != 1:
        raise SizeMismatch(f"every model needs at least n_samples={n_samples} points")

    pairs = sorted({tuple(sorted((a, b), key=ids.index)) for a in ids for b in ids if a != b and (a in pool or b in pool)},
                   key=lambda p: (ids.index(p[0]), ids.index(p[1])))
    with ThreadPoolExecutor(max_workers=n_workers()) as ex:
        values = list(ex.map(lambda p: emd_exact(samples[p[0]], samples[p[1]]), pairs))
    dist = {}
    for (a, b), v in zip(pairs, values):
        dist[(a, b)] = dist[(b, a)] = v

    graph = NeighborGraph(k=k, n_samples=n_samples, seed=seed)
    for mid in ids:
        cands = [(o, dist[(mid, o)]) for o in ids if o != mid and o in pool]
        if len(cands) < k:
            raise BadParameter(f"model {mid} has only {len(cands)} candidate neighbours in the pool")
        cands.sort(key=lambda r: (r[1], ids.index(r[0])))
        graph[mid] = cands[:k]
    return graph
