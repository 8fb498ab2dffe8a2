"""scikit-learn style wrappers around the feature network and the registration pipeline."""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import Dataset
from .errors import BadParameter
from .ncc import canonical_scale
from .pipeline import extract, register_candidates
from .register import RansacConfig
from .sparse import FeatureNet
from .trainer import TrainConfig, default_schedule, train
from .validation import check_points, check_positive


class FeatureExtractor(TransformerMixin, BaseEstimator):
    """Learns unit-norm per-point features with the two-phase curriculum.

    ``fit`` takes a :class:`~canonreg.data.Dataset` and, for the
    cross-instance phase, an EMD :class:`~canonreg.emd.NeighborGraph`.
    ``transform`` maps an (N, 3) cloud of known canonical scale to (N, k)
    features.
    """

    def __init__(self, k=32, channels=(32, 64), voxel=0.025, epochs=(30, 30), p_pos=0.1, p_neg=1.4,
                 learning_rate=0.1, momentum=0.9, n_pos=1024, n_neg=1024, hinged=False, dtype="float32",
                 random_state=0):
        self.k = k
        self.channels = channels
        self.voxel = voxel
        self.epochs = epochs
        self.p_pos = p_pos
        self.p_neg = p_neg
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.n_pos = n_pos
        self.n_neg = n_neg
        self.hinged = hinged
        self.dtype = dtype
        self.random_state = random_state

    def _train_config(self):
        return TrainConfig(p_pos=self.p_pos, p_neg=self.p_neg, learning_rate=self.learning_rate,
                           momentum=self.momentum, n_pos=self.n_pos, n_neg=self.n_neg, hinged=self.hinged,
                           seed=self._seed())

    def _seed(self):
        if self.random_state is None:
            return 0
        if not isinstance(self.random_state, (int, np.integer)):
            raise BadParameter("random_state must be an integer seed")
        return int(self.random_state)

    def fit(self, X, y=None, graph=None):
        if not isinstance(X, Dataset):
            raise BadParameter("FeatureExtractor.fit expects a Dataset")
        check_positive(self.k, "k", integer=True)
        check_positive(self.voxel, "voxel")
        e1, e2 = self.epochs
        if e2 and graph is None:
            raise BadParameter("the cross-instance phase needs a NeighborGraph")
        cfg = self._train_config()
        net = FeatureNet.default(self.k, tuple(self.channels), self.voxel, self._seed(), dtype=np.dtype(self.dtype))
        schedule = default_schedule((e1, e2))
        snapshots = {}
        net, hist = train(X, graph, net, schedule, cfg,
                          on_phase_end=lambda phase, n, _: snapshots.setdefault(phase.name, n.copy()))
        self.net_ = net
        self.phase1_net_ = snapshots[schedule[0].name]
        self.history_ = hist
        self.n_features_out_ = self.k
        return self

    @classmethod
    def from_net(cls, net):
        """Wrap an already trained network."""
        est = cls(k=net.k, voxel=net.voxel, dtype=net.dtype.name, random_state=net.seed)
        est.net_ = net
        est.phase1_net_ = None
        est.history_ = []
        est.n_features_out_ = net.k
        return est

    def transform(self, X, scale=None):
        check_is_fitted(self, "net_")
        pts = check_points(X)
        return extract(self.net_, pts, canonical_scale(pts) if scale is None else check_positive(scale, "scale"))


class CategoryRegistration(BaseEstimator):
    """Registers an observation to the best of several candidate models.

    ``fit`` stores candidate clouds ``{id: (M, 3)}`` and their features;
    ``predict`` returns ``(chosen id, RegistrationResult)`` mapping the
    observation (rescaled to the candidate's size) into the candidate frame.
    """

    def __init__(self, features=None, sample_size=3, max_iterations=4000, inlier_threshold=0.05,
                 confidence=0.999, mutual=False, random_state=0):
        self.features = features
        self.sample_size = sample_size
        self.max_iterations = max_iterations
        self.inlier_threshold = inlier_threshold
        self.confidence = confidence
        self.mutual = mutual
        self.random_state = random_state

    def _config(self):
        return RansacConfig(self.sample_size, self.max_iterations, self.inlier_threshold, self.confidence,
                            int(self.random_state or 0), self.mutual).validate()

    def fit(self, X, y=None, scales=None):
        if self.features is None:
            raise BadParameter("a fitted FeatureExtractor is required")
        check_is_fitted(self.features, "net_")
        if not isinstance(X, dict) or not X:
            raise BadParameter("candidates must be a non-empty {id: cloud} mapping")
        self._config()
        scales = scales or {}
        self.candidates_ = {}
        for cid in sorted(X):
            pts = check_points(X[cid], name=f"candidate {cid}")
            s = scales.get(cid, canonical_scale(pts))
            self.candidates_[cid] = (pts, self.features.transform(pts, s), s)
        return self

    def predict(self, X, scale, candidate_ids=None):
        check_is_fitted(self, "candidates_")
        pts = check_points(X)
        ids = sorted(self.candidates_) if candidate_ids is None else list(candidate_ids)
        unknown = set(ids) - set(self.candidates_)
        if unknown:
            raise BadParameter(f"unknown candidates {sorted(unknown)}")
        fx = self.features.transform(pts, scale)
        cands = [(cid, *self.candidates_[cid][:2], self.candidates_[cid][2]) for cid in ids]
        best, res, _ = register_candidates(pts, fx, scale, cands, self._config())
        return best, res

