"""Point clouds, rigid transforms and spatial queries.

All geometry is kept in float64.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import BadParameter, EmptyCloud
from .validation import check_points, check_positive

_ORTHO_TOL = 1e-9


def _frozen(arr):
    arr = np.array(arr, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Ordered (N, 3) array of points in meters, optionally with per-point features."""

    points: np.ndarray
    features: np.ndarray = None

    def __post_init__(self):
        pts = check_points(self.points, allow_empty=True, name="points")
        object.__setattr__(self, "points", _frozen(pts))
        if self.features is not None:
            feats = np.asarray(self.features)
            if feats.shape[0] != pts.shape[0]:
                raise BadParameter("features must have one row per point")
            object.__setattr__(self, "features", _frozen(feats))

    def __len__(self):
        return self.points.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.points if dtype is None else self.points.astype(dtype)

    @property
    def count(self):
        return self.points.shape[0]

    def subset(self, indices):
        feats = None if self.features is None else self.features[indices]
        return PointCloud(self.points[indices], feats)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation (3x3, det +1) followed by translation, ``x -> R x + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise BadParameter("rotation must be 3x3 and translation a 3-vector")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise BadParameter("transform contains non-finite values")
        if not is_rotation(R):
            raise BadParameter("rotation is not orthonormal with determinant +1")
        object.__setattr__(self, "rotation", _frozen(R))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    def as_matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def apply(self, points):
        pts = np.asarray(getattr(points, "points", points), dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def inverse(self):
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def __matmul__(self, other):
        return compose(self, other)

    def to_dict(self):
        return {
            "rotation": [float(v) for v in self.rotation.reshape(-1)],
            "translation": [float(v) for v in self.translation],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3), d["translation"])


@dataclass(frozen=True)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    @property
    def diagonal(self):
        return float(np.linalg.norm(self.max - self.min))

    @property
    def center(self):
        return 0.5 * (self.min + self.max)


def is_rotation(R, tol=_ORTHO_TOL):
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        return False
    return bool(np.allclose(R.T @ R, np.eye(3), rtol=0.0, atol=tol) and abs(np.linalg.det(R) - 1.0) < tol)


def rotation_about_axis(axis, angle):
    """Rodrigues rotation matrix."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


def rot_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def random_rotation(rng):
    """Uniformly distributed rotation (QR of a Gaussian matrix, sign-fixed)."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_transform(rng, translation_scale=1.0):
    return RigidTransform(random_rotation(rng), rng.uniform(-translation_scale, translation_scale, 3))


def apply_transform(t, x):
    """Apply ``t`` to every point of ``x``; returns a new :class:`PointCloud`."""
    pts = check_points(x, allow_empty=True)
    return PointCloud(t.apply(pts))


def invert(t):
    return t.inverse()


def compose(a, b):
    """Transform equivalent to applying ``b`` first, then ``a``."""
    R = a.rotation @ b.rotation
    # Re-orthonormalize to stop drift over long composition chains.
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    return RigidTransform(R, a.rotation @ b.translation + a.translation)


def bounding_box(x):
    pts = check_points(x)
    return Aabb(pts.min(axis=0), pts.max(axis=0))


def voxel_keys(points, voxel):
    """Integer voxel index of each point; exact boundaries go to the lower cell."""
    return np.floor(points / voxel).astype(np.int64)


def voxel_downsample(x, voxel):
    """One point per occupied voxel, placed at the centroid of its members.

    Output is ordered by voxel index (lexicographic), which makes it
    independent of the input ordering.
    """
    if isinstance(voxel, bool) or not isinstance(voxel, (int, float, np.floating, np.integer)) or not voxel > 0:
        raise BadParameter(f"voxel must be positive, got {voxel!r}")
    pts = check_points(x, allow_empty=True)
    if pts.shape[0] == 0:
        return PointCloud(pts)
    keys, inverse = np.unique(voxel_keys(pts, voxel), axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    counts = np.bincount(inverse, minlength=len(keys)).astype(np.float64)
    out = np.empty((len(keys), 3))
    for d in range(3):
        out[:, d] = np.bincount(inverse, weights=pts[:, d], minlength=len(keys)) / counts
    return PointCloud(out)


class KnnIndex:
    """Exact nearest-neighbour index over a point cloud (kd-tree)."""

    def __init__(self, x):
        self.points = check_points(x, allow_empty=True)
        self._tree = cKDTree(self.points) if len(self.points) else None

    def __len__(self):
        return len(self.points)

    def query(self, p, k):
        return knn_query(self, p, k)

    def query_many(self, queries, k=1):
        if self._tree is None:
            raise EmptyCloud("index is empty")
        dist, idx = self._tree.query(np.asarray(queries, dtype=np.float64), k=k)
        return dist, idx


def knn_query(index, query, k):
    """``min(k, N)`` exact nearest neighbours of ``query`` as ``(index, distance)`` pairs."""
    check_positive(k, "k", integer=True)
    if index._tree is None:
        raise EmptyCloud("index is empty")
    k = min(int(k), len(index))
    dist, idx = index._tree.query(np.asarray(query, dtype=np.float64).reshape(3), k=k)
    dist, idx = np.atleast_1d(dist), np.atleast_1d(idx)
    return [(int(i), float(d)) for i, d in zip(idx, dist)]


# --- serialization -----------------------------------------------------------

def write_ply(path, x):
    """Write an ASCII PLY with float64 ``x, y, z`` vertex properties."""
    pts = check_points(x, allow_empty=True)
    header = (
        "ply\nformat ascii 1.0\n"
        f"element vertex {len(pts)}\n"
        "property double x\nproperty double y\nproperty double z\n"
        "end_header\n"
    )
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(header)
        # repr of a Python float round-trips float64 exactly
        fh.writelines(f"{a!r} {b!r} {c!r}\n" for a, b, c in pts.tolist())


def read_ply(path):
    with open(path, "r", encoding="ascii") as fh:
        if fh.readline().strip() != "ply":
            raise BadParameter(f"{path}: not a PLY file")
        n_vertex, props, fmt = None, [], None
        in_vertex = False
        for line in fh:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element":
                in_vertex = tok[1] == "vertex"
                if in_vertex:
                    n_vertex = int(tok[2])
            elif tok[0] == "property" and in_vertex:
                props.append(tok[-1])
            elif tok[0] == "end_header":
                break
        if fmt != "ascii":
            raise BadParameter(f"{path}: only ASCII PLY is supported")
        if n_vertex is None or props[:3] != ["x", "y", "z"]:
            raise BadParameter(f"{path}: missing x/y/z vertex properties")
        rows = [fh.readline() for _ in range(n_vertex)]
    data = np.loadtxt(rows, dtype=np.float64, ndmin=2) if n_vertex else np.zeros((0, len(props)))
    return PointCloud(data[:, :3])


def write_transform(path, t, **extra):
    with open(path, "w") as fh:
        json.dump({**t.to_dict(), **extra}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_transform(path):
    with open(path) as fh:
        return RigidTransform.from_dict(json.load(fh))
