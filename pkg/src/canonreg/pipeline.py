"""End-to-end glue: feature extraction, benchmark registration and evaluation."""

import time

import numpy as np

from .errors import BadParameter
from .evaluation import TAU1, EvalRecord, match_accuracy, rre, rte
from .geom import PointCloud, RigidTransform
from .register import RansacConfig, feature_correspondences, select_model


def extract(net, cloud, scale):
    """Per-point features of a cloud whose canonical scale is ``scale``."""
    pts = np.asarray(getattr(cloud, "points", cloud), dtype=np.float64)
    feats, _ = net.forward(pts / scale)
    return np.asarray(feats, dtype=np.float64)


def ground_truth_transform(pose, scale, target_scale):
    """Transform from an observation rescaled by ``target_scale / scale`` into a
    candidate's canonical (metric) frame.

    Both canonical frames are centred, so the shape-level alignment is the
    inverse pose with the translation carried to the candidate's size.
    """
    Rt = pose.rotation.T
    return RigidTransform(Rt, -Rt @ pose.translation * (target_scale / scale))


def rescale(cloud, scale, target_scale):
    return PointCloud(np.asarray(getattr(cloud, "points", cloud)) * (target_scale / scale))


class FeatureCache:
    """Memoizes candidate-model features for one network."""

    def __init__(self, net, dataset):
        self.net = net
        self.data = dataset
        self._models = {}

    def model(self, mid):
        if mid not in self._models:
            self._models[mid] = extract(self.net, self.data.models[mid], self.data.scales[mid])
        return self._models[mid]


def cross_instance_match_acc(net, dataset, graph, test_ids=None, tau1=TAU1, cache=None):
    """Mean MatchAcc of feature correspondences between held-out views and their EMD-neighbour models."""
    cache = cache or FeatureCache(net, dataset)
    accs = []
    for mid in test_ids if test_ids is not None else dataset.test:
        for view in dataset.views[mid]:
            fx = extract(net, view.cloud, view.scale)
            for nid in graph.neighbors(mid):
                s_y = dataset.scales[nid]
                corr = feature_correspondences(fx, cache.model(nid))
                x = rescale(view.cloud, view.scale, s_y)
                accs.append(match_accuracy(x, dataset.models[nid], corr,
                                           ground_truth_transform(view.pose, view.scale, s_y), tau1))
    return float(np.mean(accs))


def register_candidates(cloud, fx, scale, candidates, cfg=RansacConfig()):
    """Register an observation against ``(id, cloud, features, scale)`` candidates.

    Each candidate sees the observation rescaled to its own size. Returns
    ``(chosen id, result, {id: result})`` with the ranking of
    :func:`~canonreg.register.select_model`.
    """
    results = {}
    for cid, y, fy, s_y in candidates:
        _, results[cid], _ = select_model(rescale(cloud, scale, s_y), [(cid, y, fy)], fx, cfg)
    if not results:
        raise BadParameter("at least one candidate is required")
    best = min(results, key=lambda c: (-results[c].inlier_ratio, results[c].rmse, c))
    return best, results[best], results


def register_view(net, dataset, view, candidate_ids, cfg=RansacConfig(), cache=None, tau1=TAU1):
    """Register one observation against candidates; returns ``(chosen id, result, EvalRecord)``."""
    cache = cache or FeatureCache(net, dataset)
    t0 = time.perf_counter()
    fx = extract(net, view.cloud, view.scale)
    cands = [(cid, dataset.models[cid], cache.model(cid), dataset.scales[cid]) for cid in candidate_ids]
    best, res, _ = register_candidates(view.cloud, fx, view.scale, cands, cfg)
    runtime = time.perf_counter() - t0
    s_y = dataset.scales[best]
    gt = ground_truth_transform(view.pose, view.scale, s_y)
    corr = feature_correspondences(fx, cache.model(best))
    acc = match_accuracy(rescale(view.cloud, view.scale, s_y), dataset.models[best], corr, gt, tau1)
    rec = EvalRecord(view.name, acc, rre(res.transform.rotation, gt.rotation), rte(res.transform.translation,
                     gt.translation), res.inlier_ratio, runtime, best)
    return best, res, rec


def run_benchmark(net, dataset, graph, cfg=RansacConfig(), test_ids=None):
    cache = FeatureCache(net, dataset)
    out = []
    for mid in test_ids if test_ids is not None else dataset.test:
        for n, view in enumerate(dataset.views[mid]):
            seeded = RansacConfig(**{**cfg.__dict__, "seed": cfg.seed + 7919 * n + hash_id(mid)})
            out.append(register_view(net, dataset, view, graph.neighbors(mid), seeded, cache))
    return out


def hash_id(s):
    return sum((i + 1) * ord(c) for i, c in enumerate(s))
