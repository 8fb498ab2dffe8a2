"""Procedural chair category: parametric models, partial views and datasets.

Canonical pose: +z is up with the floor at the bottom, the backrest sits on
the -y side of the seat. Every generated model is translated so that its
sampled bounding box is centred at the origin.
"""

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import ConvexHull
from scipy.spatial import QhullError

from .errors import BadParameter, EmptyCloud
from .geom import PointCloud, RigidTransform, rot_z, rotation_about_axis, write_ply
from .ncc import canonical_scale, write_pose
from .validation import check_points, substream

LEG_STYLES = ("straight", "pedestal")


@dataclass(frozen=True)
class ShapeParams:
    seat_width: float = 0.45
    seat_depth: float = 0.42
    seat_height: float = 0.45
    seat_thickness: float = 0.05
    back_height: float = 0.45
    back_tilt: float = 0.1
    back_thickness: float = 0.04
    leg_thickness: float = 0.04
    leg_count: int = 4
    leg_style: str = "straight"
    armrest: bool = False
    scale: float = 1.0
    seed: int = 0

    def validate(self):
        dims = (self.seat_width, self.seat_depth, self.seat_height, self.seat_thickness, self.back_height,
                self.back_thickness, self.leg_thickness, self.scale)
        if not all(np.isfinite(d) and d > 0 for d in dims):
            raise BadParameter("all chair dimensions must be positive")
        if self.leg_style not in LEG_STYLES:
            raise BadParameter(f"leg_style must be one of {LEG_STYLES}")
        if self.leg_count < 3:
            raise BadParameter("a chair needs at least 3 legs")
        if not 0 <= self.back_tilt < np.pi / 3:
            raise BadParameter("back_tilt must lie in [0, pi/3)")
        if self.seat_thickness >= self.seat_height or self.leg_thickness * 2 >= min(self.seat_width, self.seat_depth):
            raise BadParameter("inconsistent part dimensions")
        return self

    @classmethod
    def random(cls, rng, seed=0):
        style = LEG_STYLES[int(rng.integers(0, 2))]
        return cls(
            seat_width=rng.uniform(0.38, 0.6),
            seat_depth=rng.uniform(0.36, 0.55),
            seat_height=rng.uniform(0.38, 0.52),
            seat_thickness=rng.uniform(0.03, 0.09),
            back_height=rng.uniform(0.25, 0.6),
            back_tilt=rng.uniform(0.0, 0.3),
            back_thickness=rng.uniform(0.025, 0.07),
            leg_thickness=rng.uniform(0.025, 0.055),
            leg_count=4 if style == "straight" else int(rng.integers(4, 6)),
            leg_style=style,
            armrest=bool(rng.random() < 0.4),
            scale=rng.uniform(0.85, 1.15),
            seed=seed,
        )


@dataclass(frozen=True)
class Box:
    center: np.ndarray
    half: np.ndarray
    rotation: np.ndarray
    part: str

    def corners(self):
        s = np.array([[i, j, k] for i in (-1, 1) for j in (-1, 1) for k in (-1, 1)], dtype=np.float64)
        return (s * self.half) @ self.rotation.T + self.center

    def face_areas(self):
        hx, hy, hz = self.half
        a = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy]) * 4.0
        return a

    def sample(self, n, rng):
        """``n`` points uniformly distributed over the box surface."""
        areas = self.face_areas()
        face = rng.choice(6, size=n, p=areas / areas.sum())
        uv = rng.uniform(-1.0, 1.0, (n, 2))
        local = np.empty((n, 3))
        axis = face // 2
        sign = np.where(face % 2 == 0, -1.0, 1.0)
        for a in range(3):
            m = axis == a
            others = [b for b in range(3) if b != a]
            local[m, a] = sign[m]
            local[m, others[0]] = uv[m, 0]
            local[m, others[1]] = uv[m, 1]
        return (local * self.half) @ self.rotation.T + self.center


def _box(center, size, part, rotation=None):
    return Box(np.asarray(center, float), 0.5 * np.asarray(size, float),
               np.eye(3) if rotation is None else rotation, part)


def chair_parts(params):
    """The chair as a list of oriented boxes, in meters, floor at z=0."""
    p = params.validate()
    s = p.scale
    W, D, H, T = p.seat_width * s, p.seat_depth * s, p.seat_height * s, p.seat_thickness * s
    lt, bt, bh = p.leg_thickness * s, p.back_thickness * s, p.back_height * s
    seat_top = H
    parts = [_box([0, 0, H - T / 2], [W, D, T], "seat")]

    # backrest hinged at the rear top edge of the seat, leaning toward -y
    tilt = rotation_about_axis([1, 0, 0], p.back_tilt)
    hinge = np.array([0.0, -D / 2 + bt / 2, seat_top])
    parts.append(Box(hinge + tilt @ np.array([0, 0, bh / 2]), 0.5 * np.array([W, bt, bh]), tilt, "back"))

    leg_h = H - T
    if p.leg_style == "straight":
        for sx in (-1, 1):
            for sy in (-1, 1):
                parts.append(_box([sx * (W / 2 - lt / 2), sy * (D / 2 - lt / 2), leg_h / 2], [lt, lt, leg_h], "leg"))
    else:
        foot_h = lt
        parts.append(_box([0, 0, foot_h + (leg_h - foot_h) / 2], [1.5 * lt, 1.5 * lt, leg_h - foot_h], "leg"))
        reach = 0.5 * max(W, D)
        for n in range(p.leg_count):
            ang = 2 * np.pi * n / p.leg_count + np.pi / p.leg_count
            R = rot_z(ang)
            parts.append(Box(R @ np.array([reach / 2, 0, foot_h / 2]), 0.5 * np.array([reach, lt, foot_h]), R, "leg"))

    if p.armrest:
        arm_h = 0.22 * s
        arm_w = 0.05 * s
        for sx in (-1, 1):
            x = sx * (W / 2 - arm_w / 2)
            parts.append(_box([x, 0.05 * D, seat_top + arm_h], [arm_w, 0.8 * D, 0.03 * s], "armrest"))
            parts.append(_box([x, 0.4 * D, seat_top + arm_h / 2], [arm_w * 0.6, arm_w * 0.6, arm_h], "armrest"))
    return parts


def analytic_extents(params):
    corners = np.concatenate([b.corners() for b in chair_parts(params)])
    return corners.min(axis=0), corners.max(axis=0)


def armrest_region(params):
    """Axis-aligned box (floor frame, meters) that only armrests occupy."""
    p = params
    s = p.scale
    W, D, H = p.seat_width * s, p.seat_depth * s, p.seat_height * s
    lo = np.array([W / 2 - 0.05 * s, -D / 2 + p.back_thickness * s + 0.02 * s, H + 0.08 * s])
    hi = np.array([W / 2 + 0.01 * s, D / 2, H + 0.3 * s])
    return lo, hi


def sample_chair(params, n_points, rng=None):
    """Uncentred surface samples and their part labels (floor frame)."""
    parts = chair_parts(params)
    rng = np.random.default_rng(params.seed) if rng is None else rng
    areas = np.array([b.face_areas().sum() for b in parts])
    counts = rng.multinomial(n_points, areas / areas.sum())
    pts, labels = [], []
    for b, c in zip(parts, counts):
        if c:
            pts.append(b.sample(c, rng))
            labels.extend([b.part] * c)
    return np.concatenate(pts), np.array(labels)


def generate_model(params, n_points=4096):
    """Point-sampled chair in canonical pose, bounding box centred at the origin."""
    if n_points < 100:
        raise BadParameter("n_points must be at least 100")
    pts, _ = sample_chair(params, n_points)
    center = 0.5 * (pts.min(axis=0) + pts.max(axis=0))
    return PointCloud(pts - center)


# --- views -------------------------------------------------------------------

@dataclass(frozen=True)
class ViewSpec:
    camera: np.ndarray
    look_at: np.ndarray = field(default_factory=lambda: np.zeros(3))
    angular_resolution: float = np.deg2rad(1.0)


def view_directions():
    """Unit vectors through the 10 upper-hemisphere faces of a vertex-up icosahedron."""
    z = 1 / np.sqrt(5)
    r = 2 / np.sqrt(5)
    top = np.array([0.0, 0.0, 1.0])
    upper = [np.array([r * np.cos(2 * np.pi * k / 5), r * np.sin(2 * np.pi * k / 5), z]) for k in range(5)]
    lower = [np.array([r * np.cos(2 * np.pi * k / 5 + np.pi / 5), r * np.sin(2 * np.pi * k / 5 + np.pi / 5), -z])
             for k in range(5)]
    faces = []
    for k in range(5):
        faces.append(top + upper[k] + upper[(k + 1) % 5])
    for k in range(5):
        faces.append(upper[k] + upper[(k + 1) % 5] + lower[k])
    d = np.array(faces)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def fixed_views(model, n_views=10, distance_factor=2.0):
    pts = check_points(model)
    if not 1 <= n_views <= 10:
        raise BadParameter("between 1 and 10 fixed views are available")
    radius = np.max(np.linalg.norm(pts, axis=1))
    return [ViewSpec(d * distance_factor * radius) for d in view_directions()[:n_views]]


def _direction_dedup(rel):
    """Visibility for tiny/degenerate inputs: nearest point per viewing ray."""
    dist = np.linalg.norm(rel, axis=1)
    dirs = np.round(rel / np.maximum(dist[:, None], 1e-300), 9)
    order = np.lexsort((dist, dirs[:, 2], dirs[:, 1], dirs[:, 0]))
    keep = []
    prev = None
    for i in order:
        key = tuple(dirs[i])
        if key != prev:
            keep.append(i)
            prev = key
    return np.sort(np.array(keep, dtype=np.int64))


def hidden_point_removal(points, camera, radius_factor=100.0):
    """Indices of points visible from ``camera`` (spherical flip + convex hull)."""
    rel = check_points(points) - np.asarray(camera, dtype=np.float64)
    if len(rel) < 4:
        return _direction_dedup(rel)
    norms = np.linalg.norm(rel, axis=1, keepdims=True)
    R = norms.max() * radius_factor
    flipped = rel + 2 * (R - norms) * rel / norms
    try:
        hull = ConvexHull(np.vstack([flipped, np.zeros((1, 3))]))
    except QhullError:
        return _direction_dedup(rel)
    v = hull.vertices
    return np.sort(v[v < len(rel)]).astype(np.int64)


def render_partial(model, view, radius_factor=100.0):
    """Points of ``model`` visible from ``view``: ``(PointCloud, indices into model)``."""
    pts = check_points(model, allow_empty=True)
    if len(pts) == 0:
        raise EmptyCloud("model is empty")
    cam = np.asarray(view.camera, dtype=np.float64)
    if np.linalg.norm(cam - view.look_at) <= np.max(np.linalg.norm(pts - view.look_at, axis=1)):
        raise BadParameter("camera lies inside the model's bounding sphere")
    idx = hidden_point_removal(pts, cam, radius_factor)
    return PointCloud(pts[idx]), idx


def depth_buffer_visible(model, view, rel_tol=0.03):
    """Coarse z-buffer visibility over angular bins; a test oracle for HPR."""
    pts = check_points(model)
    rel = pts - np.asarray(view.camera, dtype=np.float64)
    dist = np.linalg.norm(rel, axis=1)
    fwd = (np.asarray(view.look_at) - view.camera)
    fwd = fwd / np.linalg.norm(fwd)
    up = np.array([0.0, 0.0, 1.0]) if abs(fwd[2]) < 0.99 else np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    up = np.cross(right, fwd)
    az = np.arctan2(rel @ right, rel @ fwd)
    el = np.arctan2(rel @ up, rel @ fwd)
    res = view.angular_resolution
    bins = np.stack([np.floor(az / res), np.floor(el / res)], axis=1).astype(np.int64)
    _, inv = np.unique(bins, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    zmin = np.full(inv.max() + 1, np.inf)
    np.minimum.at(zmin, inv, dist)
    return dist <= zmin[inv] * (1 + rel_tol)


def random_pose(rng, full_rotation=False, translation_range=2.0):
    """Gravity-aligned placement (yaw + translation) unless ``full_rotation``."""
    from .geom import random_rotation

    R = random_rotation(rng) if full_rotation else rot_z(rng.uniform(0, 2 * np.pi))
    t = np.array([rng.uniform(-translation_range, translation_range), rng.uniform(-translation_range, translation_range),
                  rng.uniform(-0.25, 0.25)])
    return RigidTransform(R, t)


# --- datasets ----------------------------------------------------------------

def model_ids(n):
    return [f"m{i:03d}" for i in range(n)]


def make_dataset(root, n_models=32, n_views=10, split=0.75, seed=0, *, n_points=4096, jitter=None,
                 full_rotation=False):
    """Write a seeded synthetic dataset under ``root``.

    Layout: ``models/<id>.ply``, ``views/<id>_<v>.ply`` (posed observations),
    ``annotations/<id>_<v>.json`` (pose, scale, visible model indices) and
    ``manifest.json``.
    """
    if n_models < 4:
        raise BadParameter("n_models must be at least 4")
    if not 0 < split < 1:
        raise BadParameter("split must lie strictly between 0 and 1")
    ids = model_ids(n_models)
    rng_split = substream(seed, "synth:split")
    order = rng_split.permutation(n_models)
    n_train = min(n_models - 1, max(1, int(round(split * n_models))))
    train = sorted(ids[i] for i in order[:n_train])
    test = sorted(ids[i] for i in order[n_train:])

    for sub in ("models", "views", "annotations"):
        os.makedirs(os.path.join(root, sub), exist_ok=True)

    manifest_models = {}
    n_written_views = 0
    for n, mid in enumerate(ids):
        rng = substream(seed, f"synth:model:{mid}")
        params = ShapeParams.random(rng, seed=int(rng.integers(0, 2**31 - 1)))
        model = generate_model(params, n_points)
        scale = canonical_scale(model)
        path = os.path.join(root, "models", f"{mid}.ply")
        write_ply(path, model)
        views = []
        vrng = substream(seed, f"synth:views:{mid}")
        for v, spec in enumerate(fixed_views(model, n_views)):
            _, idx = render_partial(model, spec)
            pose = random_pose(vrng, full_rotation)
            pts = pose.apply(model.points[idx])
            if jitter:
                pts = pts + vrng.normal(0.0, jitter, pts.shape)
            name = f"{mid}_{v:02d}"
            write_ply(os.path.join(root, "views", f"{name}.ply"), pts)
            write_pose(os.path.join(root, "annotations", f"{name}.json"), pose, scale,
                       model=mid, view=v, camera=[float(c) for c in spec.camera], indices=idx.tolist())
            views.append(name)
            n_written_views += 1
        p = asdict(params)
        manifest_models[mid] = {"params": p, "scale": scale, "n_points": n_points, "views": views}

    manifest = {
        "seed": seed,
        "n_models": n_models,
        "n_views": n_views,
        "n_points": n_points,
        "split": split,
        "jitter": jitter,
        "full_rotation": full_rotation,
        "train": train,
        "test": test,
        "models": manifest_models,
        "counts": {"models": n_models, "views": n_written_views},
    }
    with open(os.path.join(root, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
