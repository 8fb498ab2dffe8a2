"""Input validation helpers shared by the estimators and the functional API."""

import numbers

import numpy as np

from .errors import BadParameter, EmptyCloud


def check_points(X, *, allow_empty=False, name="X"):
    """Return ``X`` as a C-contiguous float64 array of shape (N, 3).

    Accepts a :class:`~canonreg.geom.PointCloud`, anything exposing a
    ``points`` attribute, or an array-like.
    """
    X = getattr(X, "points", X)
    arr = np.ascontiguousarray(X, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 0:
        arr = arr.reshape(0, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise BadParameter(f"{name} must have shape (N, 3), got {arr.shape}")
    if not allow_empty and arr.shape[0] == 0:
        raise EmptyCloud(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise BadParameter(f"{name} contains non-finite coordinates")
    return arr


def check_features(F, *, name="F"):
    F = getattr(F, "features", F)
    arr = np.ascontiguousarray(F, dtype=np.float64)
    if arr.ndim != 2:
        raise BadParameter(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise EmptyCloud(f"{name} is empty")
    return arr


def check_positive(value, name, *, integer=False):
    kind = numbers.Integral if integer else numbers.Real
    if isinstance(value, bool) or not isinstance(value, kind) or not value > 0:
        raise BadParameter(f"{name} must be a positive {'integer' if integer else 'number'}, got {value!r}")
    return value


def check_random_state(seed):
    """Turn ``seed`` into a :class:`numpy.random.Generator`."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def substream(root_seed, name):
    """Named, independent generator derived from a root seed.

    The stream depends only on ``(root_seed, name)``, so stages can be
    re-seeded without disturbing each other.
    """
    key = [int.from_bytes(name.encode(), "little") % (2**63)]
    return np.random.default_rng(np.random.SeedSequence([int(root_seed)] + key))
