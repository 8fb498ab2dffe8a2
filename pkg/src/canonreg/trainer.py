"""Contrastive metric learning over same-instance and cross-instance pairs."""

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import BadParameter, InsufficientPairs, TrainingDiverged
from .geom import RigidTransform, rot_z
from .ncc import (CROSS_INSTANCE_TAU, NEGATIVE_MARGIN, SAME_INSTANCE_TAU, PosedCloud, positive_pairs, sample_pairs,
                  to_ncc)
from .validation import check_features, substream

logger = logging.getLogger(__name__)

SAME = "same_instance"
MODEL_NEIGHBOR = "model_neighbor"
PARTIAL_NEIGHBOR = "partial_neighbor"
PAIR_KINDS = (SAME, MODEL_NEIGHBOR, PARTIAL_NEIGHBOR)


@dataclass(frozen=True)
class TrainConfig:
    p_pos: float = 0.1
    p_neg: float = 1.4
    learning_rate: float = 0.1
    momentum: float = 0.9
    lr_decay: float = 0.5
    lr_step: int = 20
    n_pos: int = 1024
    n_neg: int = 1024
    tau_same: float = SAME_INSTANCE_TAU
    tau_cross: float = CROSS_INSTANCE_TAU
    neg_margin: float = NEGATIVE_MARGIN
    hinged: bool = False
    augment: bool = True
    pairs_per_epoch: int = None
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.p_pos < self.p_neg <= 2:
            raise BadParameter("need 0 <= p_pos < p_neg <= 2 for unit-norm features")
        if self.learning_rate <= 0 or not 0 <= self.momentum < 1:
            raise BadParameter("invalid optimizer settings")


@dataclass(frozen=True)
class CurriculumPhase:
    name: str
    epochs: int
    mix: dict = field(default_factory=lambda: {SAME: 1.0})

    def __post_init__(self):
        if set(self.mix) - set(PAIR_KINDS):
            raise BadParameter(f"unknown pair sources {set(self.mix) - set(PAIR_KINDS)}")
        if abs(sum(self.mix.values()) - 1.0) > 1e-9 or any(v < 0 for v in self.mix.values()):
            raise BadParameter("phase mix fractions must be non-negative and sum to 1")
        if self.epochs < 0:
            raise BadParameter("epochs must be non-negative")


def default_schedule(epochs=(30, 30)):
    return [
        CurriculumPhase(SAME, epochs[0], {SAME: 1.0}),
        CurriculumPhase("cross_instance", epochs[1], {SAME: 0.25, MODEL_NEIGHBOR: 0.375, PARTIAL_NEIGHBOR: 0.375}),
    ]


def contrastive_loss(fx, fy, matched, cfg=TrainConfig()):
    """``(d - p_pos)^2`` for matched pairs, ``(d - p_neg)^2`` otherwise."""
    d = float(np.linalg.norm(np.asarray(fx, dtype=np.float64) - np.asarray(fy, dtype=np.float64)))
    if matched:
        r = d - cfg.p_pos
        return max(r, 0.0) ** 2 if cfg.hinged else r * r
    r = d - cfg.p_neg
    return min(r, 0.0) ** 2 if cfg.hinged else r * r


def _pair_terms(fx, fy, target, hinged, pull):
    diff = fx - fy
    d = np.sqrt(np.sum(diff * diff, axis=1))
    r = d - target
    if hinged:
        r = np.maximum(r, 0.0) if pull else np.minimum(r, 0.0)
    # d(d)/d(fx) = diff / d; zero at coincident features
    scale = np.divide(2.0 * r, d, out=np.zeros_like(d), where=d > 0)
    return r * r, scale[:, None] * diff


def batch_loss(fX, fY, ms, cfg=TrainConfig()):
    """Mean positive loss plus mean negative loss, with gradients for both feature sets.

    Returns ``(loss, grad_fX, grad_fY, (mean_pos, mean_neg))``.
    """
    FX = check_features(fX, name="fX")
    FY = check_features(fY, name="fY")
    if len(ms) == 0:
        raise InsufficientPairs("empty match set")
    gX = np.zeros_like(FX)
    gY = np.zeros_like(FY)
    means = []
    for (i, j), target, pull in ((ms.positives, cfg.p_pos, True), (ms.negatives, cfg.p_neg, False)):
        if len(i) == 0:
            means.append(0.0)
            continue
        losses, g = _pair_terms(FX[i], FY[j], target, cfg.hinged, pull)
        n = len(i)
        means.append(float(losses.mean()))
        np.add.at(gX, i, g / n)
        np.add.at(gY, j, -g / n)
    return means[0] + means[1], gX, gY, (means[0], means[1])


class SGD:
    """Momentum SGD, ``v <- mu v + g``, ``p <- p - lr v``."""

    def __init__(self, net, lr, momentum):
        self.net = net
        self.lr = lr
        self.momentum = momentum
        self.velocity = {n: np.zeros_like(p) for n, p in net.parameters()}

    def step(self, grads):
        """Apply one update; returns False if any parameter became non-finite."""
        finite = True
        for name, p in self.net.parameters():
            g = grads.get(name)
            if g is None:
                continue
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p -= (self.lr * v).astype(p.dtype)
            finite = finite and bool(np.all(np.isfinite(p)))
        self.net.touch()
        return finite


def _add_grads(a, b):
    out = dict(a)
    for k, v in b.items():
        out[k] = out[k] + v if k in out else v
    return out


class PairSource:
    """Draws training pair instances from a dataset according to a phase mix."""

    def __init__(self, dataset, graph, cfg):
        self.data = dataset
        self.graph = graph
        self.cfg = cfg
        self.train = list(dataset.train)
        self.same = [(m, v) for m in self.train for v in range(len(dataset.views.get(m, [])))]
        if not self.same:
            raise InsufficientPairs("training split has no views")
        missing = [m for m in self.train if graph is not None and m not in graph]
        if missing:
            raise BadParameter(f"neighbour graph does not cover {missing}")

    def default_epoch_size(self):
        return self.cfg.pairs_per_epoch or len(self.same)

    def _neighbors(self, m):
        if self.graph is None:
            raise BadParameter("cross-instance pairs need a neighbour graph")
        return [n for n in self.graph.neighbors(m) if n in self.data.models]

    def draw(self, phase, rng):
        size = self.default_epoch_size()
        kinds = [k for k in PAIR_KINDS if phase.mix.get(k, 0) > 0]
        counts = [int(round(size * phase.mix[k])) for k in kinds]
        counts[0] += size - sum(counts)
        pairs = []
        for kind, n in zip(kinds, counts):
            for _ in range(n):
                if kind == SAME:
                    m, v = self.same[int(rng.integers(len(self.same)))]
                    pairs.append((kind, ("model", m), ("view", m, v)))
                elif kind == MODEL_NEIGHBOR:
                    m = self.train[int(rng.integers(len(self.train)))]
                    nb = self._neighbors(m)
                    pairs.append((kind, ("model", m), ("model", nb[int(rng.integers(len(nb)))])))
                else:
                    m, v = self.same[int(rng.integers(len(self.same)))]
                    nb = self._neighbors(m)
                    pairs.append((kind, ("view", m, v), ("model", nb[int(rng.integers(len(nb)))])))
        order = rng.permutation(len(pairs))
        return [pairs[i] for i in order]

    def posed(self, ref, rng):
        if ref[0] == "view":
            view = self.data.views[ref[1]][ref[2]]
            cloud, pose, scale = view.cloud, view.pose, view.scale
        else:
            cloud, pose, scale = self.data.models[ref[1]], RigidTransform.identity(), self.data.scales[ref[1]]
        if self.cfg.augment:
            g = RigidTransform(rot_z(rng.uniform(0, 2 * np.pi)), rng.uniform(-0.5, 0.5, 3) * scale)
            return PosedCloud(g.apply(cloud.points), g @ pose, scale)
        return PosedCloud(cloud, pose, scale)


def train_step(net, opt, a, b, tau, cfg, rng):
    """One update on one cloud pair. Returns ``(mean_pos, mean_neg)`` or None if no positives."""
    xa, xb = to_ncc(a), to_ncc(b)
    full = positive_pairs(xa, xb, tau)
    if full.n_pos == 0:
        return None
    ms = sample_pairs(full, min(cfg.n_pos, full.n_pos), cfg.n_neg, xa, xb, rng, tau=tau, margin=cfg.neg_margin)
    fa, sa = net.forward(a.cloud.points / a.scale)
    fb, sb = net.forward(b.cloud.points / b.scale)
    loss, ga, gb, parts = batch_loss(fa, fb, ms, cfg)
    if not np.isfinite(loss):
        return float("nan"), float("nan")
    grads = _add_grads(net.backward(sa, ga), net.backward(sb, gb))
    if not opt.step(grads):
        return float("nan"), float("nan")
    return parts


def train(dataset, graph, net, schedule, cfg=TrainConfig(), *, start_epoch=0, on_phase_end=None, on_epoch_end=None):
    """Run the curriculum in order, updating ``net`` in place.

    Returns ``(net, history)`` where history rows are
    ``(epoch, phase, mean_pos_loss, mean_neg_loss)``.
    """
    source = PairSource(dataset, graph, cfg)
    history = []
    epoch = start_epoch
    for phase in schedule:
        # fresh momentum per phase, so resuming from a phase checkpoint matches an uninterrupted run
        opt = SGD(net, cfg.learning_rate, cfg.momentum)
        for _ in range(phase.epochs):
            opt.lr = cfg.learning_rate * cfg.lr_decay ** (epoch // cfg.lr_step)
            rng = substream(cfg.seed, f"train:epoch:{epoch}")
            pos, neg = [], []
            for kind, ra, rb in source.draw(phase, rng):
                a, b = source.posed(ra, rng), source.posed(rb, rng)
                tau = cfg.tau_same if kind == SAME else cfg.tau_cross
                parts = train_step(net, opt, a, b, tau, cfg, rng)
                if parts is None:
                    continue
                if not (np.isfinite(parts[0]) and np.isfinite(parts[1])):
                    raise TrainingDiverged(epoch)
                pos.append(parts[0])
                neg.append(parts[1])
            row = (epoch, phase.name, float(np.mean(pos)) if pos else 0.0, float(np.mean(neg)) if neg else 0.0)
            history.append(row)
            logger.info("epoch %d [%s] pos %.4f neg %.4f lr %.4g", *row, opt.lr)
            if on_epoch_end is not None:
                on_epoch_end(row, net)
            epoch += 1
        if on_phase_end is not None:
            on_phase_end(phase, net, epoch)
    return net, history


def write_history(path, history, seed=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "phase", "mean_pos_loss", "mean_neg_loss"] + (["seed"] if seed is not None else []))
        for e, ph, p, n in history:
            w.writerow([e, ph, repr(p), repr(n)] + ([seed] if seed is not None else []))


def read_history(path):
    with open(path, newline="") as fh:
        return [(int(r["epoch"]), r["phase"], float(r["mean_pos_loss"]), float(r["mean_neg_loss"]))
                for r in csv.DictReader(fh)]


def config_with(cfg, **kw):
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
