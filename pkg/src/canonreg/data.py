"""In-memory view of a synthetic dataset tree written by :func:`canonreg.synth.make_dataset`."""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .geom import PointCloud, RigidTransform, read_ply
from .ncc import PosedCloud, canonical_scale, read_pose


@dataclass
class View:
    name: str
    model_id: str
    cloud: PointCloud
    pose: RigidTransform
    scale: float
    indices: np.ndarray = None

    def __post_init__(self):
        if not isinstance(self.cloud, PointCloud):
            self.cloud = PointCloud(self.cloud)

    @property
    def posed(self):
        return PosedCloud(self.cloud, self.pose, self.scale)


@dataclass
class Dataset:
    models: dict
    scales: dict
    views: dict = field(default_factory=dict)
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)
    manifest: dict = field(default_factory=dict)
    root: str = None

    def model_posed(self, mid, pose=None):
        return PosedCloud(self.models[mid], pose or RigidTransform.identity(), self.scales[mid])

    @classmethod
    def from_clouds(cls, models, views=(), train=None, test=()):
        """Build from ``{id: canonical cloud}`` and a list of :class:`View`."""
        models = {m: c if isinstance(c, PointCloud) else PointCloud(c) for m, c in models.items()}
        scales = {m: canonical_scale(c) for m, c in models.items()}
        by_model = {m: [] for m in models}
        for v in views:
            by_model[v.model_id].append(v)
        return cls(models, scales, by_model, sorted(train if train is not None else models), sorted(test))


def load_dataset(root, splits=("train", "test")):
    path = os.path.join(root, "manifest.json")
    if not os.path.exists(path):
        raise ConfigError(f"no manifest.json under {root}")
    with open(path) as fh:
        manifest = json.load(fh)
    wanted = sorted({m for s in splits for m in manifest[s]})
    models, scales, views = {}, {}, {}
    for mid in wanted:
        models[mid] = read_ply(os.path.join(root, "models", f"{mid}.ply"))
        scales[mid] = float(manifest["models"][mid]["scale"])
        views[mid] = []
        for name in manifest["models"][mid]["views"]:
            pose, scale, meta = read_pose(os.path.join(root, "annotations", f"{name}.json"))
            cloud = read_ply(os.path.join(root, "views", f"{name}.ply"))
            idx = np.asarray(meta.get("indices", []), dtype=np.int64) if "indices" in meta else None
            views[mid].append(View(name, mid, cloud, pose, scale, idx))
    return Dataset(models, scales, views, list(manifest["train"]), list(manifest["test"]), manifest, root)
