"""Sparse tensors, kernel maps and the sparse convolution primitive.

Coordinates are integer 3-vectors expressed in units of the tensor's own
stride. A stride-2 convolution maps input coordinate ``c_in`` to output
``c_out`` through ``c_in = 2 * c_out + i`` for kernel offset ``i``; the
transposed convolution uses the same relation with the roles swapped, so a
decoder can land exactly on the coordinates an encoder came from.
"""

import itertools

import numpy as np

from ..errors import BadParameter, EmptyCloud, ShapeError
from ..validation import check_points


def kernel_offsets(K):
    """All offsets of a ``K x K x K`` kernel in lexicographic order."""
    if K < 1:
        raise BadParameter(f"kernel size must be >= 1, got {K}")
    r = np.arange(K) - (K - 1) // 2
    return np.array(list(itertools.product(r, r, r)), dtype=np.int64)


class CoordinateSet:
    """Sorted unique integer coordinates with an O(log N) row lookup.

    Kernel maps and downsampled children are memoized here so layers that
    share coordinates (e.g. both convolutions of a residual block) share maps.
    """

    def __init__(self, coords, stride=1, *, assume_unique_sorted=False):
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        if not assume_unique_sorted:
            coords = np.unique(coords, axis=0)
        self.coords = coords
        self.coords.setflags(write=False)
        self.stride = int(stride)
        self._keys = self._encode(coords)
        self._maps = {}
        self._down = {}

    def __len__(self):
        return len(self.coords)

    # 21 bits per axis, offset so that negative coordinates encode too
    _BIAS = 1 << 20

    @classmethod
    def _encode(cls, c):
        c = np.asarray(c, dtype=np.int64) + cls._BIAS
        if len(c) and (c.min() < 0 or c.max() >= (1 << 21)):
            raise BadParameter("coordinates out of the supported range (|c| < 2**20)")
        return (c[:, 0] << 42) | (c[:, 1] << 21) | c[:, 2]

    def lookup(self, coords):
        """Row of every query coordinate, or -1 if absent."""
        q = np.asarray(coords, dtype=np.int64).reshape(-1, 3) + self._BIAS
        valid = np.all((q >= 0) & (q < (1 << 21)), axis=1)
        keys = (q[:, 0] << 42) | (q[:, 1] << 21) | q[:, 2]
        pos = np.searchsorted(self._keys, keys)
        pos = np.minimum(pos, len(self._keys) - 1)
        hit = valid & (self._keys[pos] == keys) if len(self._keys) else np.zeros(len(keys), bool)
        return np.where(hit, pos, -1)

    def downsample(self, factor=2):
        if factor not in self._down:
            self._down[factor] = CoordinateSet(np.floor_divide(self.coords, factor), self.stride * factor)
        return self._down[factor]


class SparseTensor:
    """Feature rows attached to unique integer coordinates."""

    def __init__(self, coords, feats, stride=1):
        cset = coords if isinstance(coords, CoordinateSet) else None
        if cset is None:
            raw = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
            cset = CoordinateSet(raw, stride)
            if len(cset) != len(raw):
                raise BadParameter("coordinates must be unique")
            if not np.array_equal(cset.coords, raw):
                # keep caller row order meaningful: reorder feats to sorted coordinates
                order = np.lexsort((raw[:, 2], raw[:, 1], raw[:, 0]))
                feats = np.asarray(feats)[order]
        feats = np.asarray(feats)
        if feats.ndim != 2 or feats.shape[0] != len(cset):
            raise ShapeError(f"feats must have shape ({len(cset)}, C), got {feats.shape}")
        self.cset = cset
        self.feats = feats

    @property
    def coords(self):
        return self.cset.coords

    @property
    def stride(self):
        return self.cset.stride

    @property
    def channels(self):
        return self.feats.shape[1]

    def __len__(self):
        return len(self.cset)

    def replace_feats(self, feats):
        return SparseTensor(self.cset, feats)


def quantize(x, voxel, dtype=np.float64):
    """Voxelize a cloud: ``(SparseTensor of ones, point -> row mapping)``."""
    if not voxel > 0:
        raise BadParameter(f"voxel must be positive, got {voxel!r}")
    pts = check_points(x, allow_empty=True)
    if len(pts) == 0:
        raise EmptyCloud("cannot quantize an empty cloud")
    keys = np.floor(pts / voxel).astype(np.int64)
    # packed keys sort in the same (x, y, z) lexicographic order as the coordinates
    packed, mapping = np.unique(CoordinateSet._encode(keys), return_inverse=True)
    mask = (1 << 21) - 1
    coords = np.stack([packed >> 42, (packed >> 21) & mask, packed & mask], axis=1) - CoordinateSet._BIAS
    cset = CoordinateSet(coords, 1, assume_unique_sorted=True)
    return SparseTensor(cset, np.ones((len(cset), 1), dtype=dtype)), mapping.reshape(-1)


class KernelMap:
    """Per-offset ``(input row, output row)`` lists realizing one convolution."""

    def __init__(self, offsets, in_rows, out_rows, n_in, out_cset, kernel_size, stride, transposed):
        self.offsets = offsets
        self.in_rows = in_rows
        self.out_rows = out_rows
        self.n_in = n_in
        self.out_cset = out_cset
        self.kernel_size = kernel_size
        self.stride = stride
        self.transposed = transposed

    @property
    def n_out(self):
        return len(self.out_cset)

    def __len__(self):
        return sum(len(r) for r in self.in_rows)

    def entries(self):
        """Flat ``(offset index, input row, output row)`` triples."""
        for k, (ri, ro) in enumerate(zip(self.in_rows, self.out_rows)):
            for a, b in zip(ri.tolist(), ro.tolist()):
                yield k, a, b


def build_kernel_map(input, out_coords=None, K=3, stride=1, transposed=False):
    """Kernel map from ``input`` coordinates to output coordinates.

    ``out_coords`` is only needed for transposed stride-2 maps, where it names
    the finer coordinate set to land on. Outputs that receive no contribution
    are dropped from the output set.
    """
    if stride not in (1, 2):
        raise BadParameter(f"stride must be 1 or 2, got {stride!r}")
    in_cset = input.cset if isinstance(input, SparseTensor) else input
    if out_coords is not None and not isinstance(out_coords, CoordinateSet):
        out_coords = CoordinateSet(out_coords, in_cset.stride // stride if transposed else in_cset.stride * stride)
    key = (K, stride, transposed, id(out_coords) if out_coords is not None else None)
    cached = in_cset._maps.get(key)
    if cached is not None and (out_coords is None or cached.out_cset is out_coords):
        return cached

    offsets = kernel_offsets(K)
    if not transposed:
        if out_coords is None:
            out_cset = in_cset if stride == 1 else in_cset.downsample(stride)
        else:
            out_cset = out_coords
        base = out_cset.coords * stride
        in_rows, out_rows = [], []
        for off in offsets:
            r = in_cset.lookup(base + off)
            hit = np.nonzero(r >= 0)[0]
            in_rows.append(r[hit])
            out_rows.append(hit)
    else:
        if out_coords is None:
            if stride != 1:
                raise BadParameter("transposed stride-2 maps need target coordinates")
            out_cset = in_cset
        else:
            out_cset = out_coords
        base = in_cset.coords * stride
        in_rows, out_rows = [], []
        for off in offsets:
            r = out_cset.lookup(base + off)
            hit = np.nonzero(r >= 0)[0]
            in_rows.append(hit)
            out_rows.append(r[hit])

    covered = np.zeros(len(out_cset), dtype=bool)
    for ro in out_rows:
        covered[ro] = True
    if not covered.all():
        remap = np.cumsum(covered) - 1
        out_cset = CoordinateSet(out_cset.coords[covered], out_cset.stride, assume_unique_sorted=True)
        out_rows = [remap[ro] for ro in out_rows]

    kmap = KernelMap(offsets, in_rows, out_rows, len(in_cset), out_cset, K, stride, transposed)
    in_cset._maps[key] = kmap
    return kmap


class ConvLayer:
    """Weights of one sparse convolution: ``(K**3, C_in, C_out)`` plus optional bias."""

    def __init__(self, weights, bias=None, kernel_size=None, stride=1, transposed=False):
        weights = np.asarray(weights)
        if weights.ndim != 3:
            raise ShapeError("weights must have shape (K**3, C_in, C_out)")
        K = kernel_size or round(weights.shape[0] ** (1 / 3))
        if K**3 != weights.shape[0]:
            raise ShapeError(f"{weights.shape[0]} offset matrices do not form a K^3 kernel")
        if stride == 1 and K % 2 == 0:
            raise BadParameter("stride-1 kernels must have odd size")
        if not np.all(np.isfinite(weights)):
            raise BadParameter("weights must be finite")
        self.weights = weights
        self.bias = None if bias is None else np.asarray(bias)
        self.kernel_size = K
        self.stride = stride
        self.transposed = transposed

    @property
    def in_channels(self):
        return self.weights.shape[1]

    @property
    def out_channels(self):
        return self.weights.shape[2]


def conv_forward(input, layer, kmap):
    """``out[c] = sum_i W_i^T in[c + i] (+ bias)`` over the kernel map."""
    if input.channels != layer.in_channels:
        raise ShapeError(f"input has {input.channels} channels, layer expects {layer.in_channels}")
    if kmap.n_in != len(input) or len(kmap.in_rows) != layer.weights.shape[0]:
        raise ShapeError("kernel map does not match input/layer")
    x = input.feats
    W = layer.weights
    out = np.zeros((kmap.n_out, layer.out_channels), dtype=np.result_type(x.dtype, W.dtype))
    # for a fixed offset both row lists are injective, so plain fancy-index += is safe
    for k in range(len(kmap.in_rows)):
        ri = kmap.in_rows[k]
        if len(ri):
            out[kmap.out_rows[k]] += x[ri] @ W[k]
    if layer.bias is not None:
        out += layer.bias
    return SparseTensor(kmap.out_cset, out)


def conv_backward(input, layer, kmap, grad_out):
    """Gradients of a scalar loss w.r.t. the input features and layer parameters.

    Returns ``(grad_in, {"weights": ..., "bias": ...})``.
    """
    grad_out = np.asarray(grad_out)
    if grad_out.shape != (kmap.n_out, layer.out_channels):
        raise ShapeError(f"grad_out must have shape {(kmap.n_out, layer.out_channels)}, got {grad_out.shape}")
    if input.channels != layer.in_channels or kmap.n_in != len(input):
        raise ShapeError("input does not match layer/kernel map")
    x = input.feats
    W = layer.weights
    grad_in = np.zeros_like(x, dtype=np.result_type(x.dtype, grad_out.dtype))
    grad_W = np.zeros_like(W)
    for k in range(len(kmap.in_rows)):
        ri = kmap.in_rows[k]
        if len(ri):
            g = grad_out[kmap.out_rows[k]]
            grad_W[k] = x[ri].T @ g
            grad_in[ri] += g @ W[k].T
    grads = {"weights": grad_W}
    if layer.bias is not None:
        grads["bias"] = grad_out.sum(axis=0)
    return grad_in, grads
