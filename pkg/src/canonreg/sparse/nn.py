"""Layers and the residual encoder-decoder feature network.

Layers are functional: ``forward`` returns ``(output, ctx)`` and
``backward(ctx, grad)`` returns ``(grad_input, grads)``, where ``grads`` maps
parameter names to arrays. Nothing is cached on the layer object, so a
network can be shared read-only between threads during inference.
"""

import io
import json
import struct

import numpy as np

from ..errors import BadParameter, ShapeError, StateError
from ..validation import check_points, check_random_state
from .tensor import ConvLayer, build_kernel_map, conv_backward, conv_forward, quantize

CHECKPOINT_VERSION = 1
_MAGIC = b"CRCK"


class Module:
    def parameters(self, prefix=""):
        """``(name, array)`` pairs in declaration order."""
        return []

    def children(self):
        return []

    def to_config(self):
        raise NotImplementedError


class Conv(Module):
    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, transposed=False, bias=True,
                 random_state=None, dtype=np.float64):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.transposed = transposed
        self.use_bias = bias
        rng = check_random_state(random_state)
        limit = np.sqrt(6.0 / (in_channels + out_channels))
        self.weights = rng.uniform(-limit, limit, (kernel_size**3, in_channels, out_channels)).astype(dtype)
        self.bias = np.zeros(out_channels, dtype=dtype) if bias else None

    def layer(self):
        return ConvLayer(self.weights, self.bias, self.kernel_size, self.stride, self.transposed)

    def parameters(self, prefix=""):
        out = [(prefix + "weights", self.weights)]
        if self.bias is not None:
            out.append((prefix + "bias", self.bias))
        return out

    def forward(self, x, target=None):
        kmap = build_kernel_map(x, target, self.kernel_size, self.stride, self.transposed)
        layer = self.layer()
        return conv_forward(x, layer, kmap), (x, layer, kmap)

    def backward(self, ctx, grad):
        x, layer, kmap = ctx
        grad_in, g = conv_backward(x, layer, kmap, grad)
        return grad_in, {k: v for k, v in g.items()}

    def to_config(self):
        return {"type": "conv", "in": self.in_channels, "out": self.out_channels, "kernel": self.kernel_size,
                "stride": self.stride, "transposed": self.transposed, "bias": self.use_bias}


class ReLU(Module):
    def forward(self, x):
        mask = x.feats > 0
        return x.replace_feats(x.feats * mask), mask

    def backward(self, mask, grad):
        return grad * mask, {}

    def to_config(self):
        return {"type": "relu"}


class Sequential(Module):
    def __init__(self, *modules):
        self.modules = list(modules)

    def children(self):
        return self.modules

    def parameters(self, prefix=""):
        out = []
        for n, m in enumerate(self.modules):
            out.extend(m.parameters(f"{prefix}{n}."))
        return out

    def forward(self, x):
        ctxs = []
        for m in self.modules:
            x, c = m.forward(x)
            ctxs.append(c)
        return x, ctxs

    def backward(self, ctxs, grad):
        grads = {}
        for n in reversed(range(len(self.modules))):
            grad, g = self.modules[n].backward(ctxs[n], grad)
            grads.update({f"{n}.{k}": v for k, v in g.items()})
        return grad, grads

    def to_config(self):
        return {"type": "sequential", "modules": [m.to_config() for m in self.modules]}


class ResBlock(Module):
    """``relu(x + conv(relu(conv(x))))`` on a fixed coordinate set."""

    def __init__(self, channels, kernel_size=3, bias=True, random_state=None, dtype=np.float64):
        rng = check_random_state(random_state)
        self.channels = channels
        self.conv1 = Conv(channels, channels, kernel_size, bias=bias, random_state=rng, dtype=dtype)
        self.conv2 = Conv(channels, channels, kernel_size, bias=bias, random_state=rng, dtype=dtype)

    def children(self):
        return [self.conv1, self.conv2]

    def parameters(self, prefix=""):
        return self.conv1.parameters(prefix + "conv1.") + self.conv2.parameters(prefix + "conv2.")

    def forward(self, x):
        h, c1 = self.conv1.forward(x)
        m1 = h.feats > 0
        h2, c2 = self.conv2.forward(h.replace_feats(h.feats * m1))
        s = h2.feats + x.feats
        m2 = s > 0
        return x.replace_feats(s * m2), (c1, m1, c2, m2)

    def backward(self, ctx, grad):
        c1, m1, c2, m2 = ctx
        g = grad * m2
        gh, g2 = self.conv2.backward(c2, g)
        gx, g1 = self.conv1.backward(c1, gh * m1)
        grads = {f"conv1.{k}": v for k, v in g1.items()}
        grads.update({f"conv2.{k}": v for k, v in g2.items()})
        return gx + g, grads

    def to_config(self):
        return {"type": "resblock", "channels": self.channels, "kernel": self.conv1.kernel_size,
                "bias": self.conv1.use_bias}


class UNetSkip(Module):
    """Encoder branch, transposed convolution back onto the input coordinates,
    ReLU, optional ``post`` block, then channel concatenation ``[decoded, skip]``."""

    def __init__(self, down, up, post=None):
        if not (isinstance(up, Conv) and up.transposed):
            raise BadParameter("up must be a transposed Conv")
        self.down = down
        self.up = up
        self.post = post

    def children(self):
        return [self.down, self.up] + ([self.post] if self.post is not None else [])

    def parameters(self, prefix=""):
        out = self.down.parameters(prefix + "down.") + self.up.parameters(prefix + "up.")
        if self.post is not None:
            out += self.post.parameters(prefix + "post.")
        return out

    def forward(self, x):
        h, cd = self.down.forward(x)
        u, cu = self.up.forward(h, target=x.cset)
        if u.cset is not x.cset:
            raise ShapeError("decoder did not land on the skip coordinates")
        mask = u.feats > 0
        u = u.replace_feats(u.feats * mask)
        cp = None
        if self.post is not None:
            u, cp = self.post.forward(u)
        out = np.concatenate([u.feats, x.feats], axis=1)
        return x.replace_feats(out), (cd, cu, mask, cp, u.channels)

    def backward(self, ctx, grad):
        cd, cu, mask, cp, n_dec = ctx
        gu = grad[:, :n_dec]
        gskip = grad[:, n_dec:]
        grads = {}
        if self.post is not None:
            gu, g_post = self.post.backward(cp, gu)
            grads.update({f"post.{k}": v for k, v in g_post.items()})
        gh, g_up = self.up.backward(cu, gu * mask)
        gx, g_down = self.down.backward(cd, gh)
        grads.update({f"down.{k}": v for k, v in g_down.items()})
        grads.update({f"up.{k}": v for k, v in g_up.items()})
        return gx + gskip, grads

    def to_config(self):
        cfg = {"type": "unet_skip", "down": self.down.to_config(), "up": self.up.to_config()}
        if self.post is not None:
            cfg["post"] = self.post.to_config()
        return cfg


class L2Normalize(Module):
    """Row-wise unit-norm output; backward projects onto the tangent space."""

    eps = 1e-12

    def forward(self, x):
        norms = np.sqrt(np.sum(x.feats**2, axis=1, keepdims=True))
        norms = np.maximum(norms, self.eps)
        y = x.feats / norms
        return x.replace_feats(y), (y, norms)

    def backward(self, ctx, grad):
        y, norms = ctx
        return (grad - y * np.sum(y * grad, axis=1, keepdims=True)) / norms, {}

    def to_config(self):
        return {"type": "l2norm"}


def module_from_config(cfg, rng=None, dtype=np.float64):
    rng = check_random_state(rng)
    t = cfg["type"]
    if t == "conv":
        return Conv(cfg["in"], cfg["out"], cfg["kernel"], cfg["stride"], cfg["transposed"], cfg["bias"], rng, dtype)
    if t == "relu":
        return ReLU()
    if t == "sequential":
        return Sequential(*[module_from_config(c, rng, dtype) for c in cfg["modules"]])
    if t == "resblock":
        return ResBlock(cfg["channels"], cfg["kernel"], cfg["bias"], rng, dtype)
    if t == "unet_skip":
        post = module_from_config(cfg["post"], rng, dtype) if "post" in cfg else None
        return UNetSkip(module_from_config(cfg["down"], rng, dtype), module_from_config(cfg["up"], rng, dtype), post)
    if t == "l2norm":
        return L2Normalize()
    raise BadParameter(f"unknown module type {t!r}")


class ForwardState:
    """Everything ``net_backward`` needs from one ``net_forward`` call."""

    def __init__(self, version, ctx, mapping, n_rows, out_dtype):
        self.version = version
        self.ctx = ctx
        self.mapping = mapping
        self.n_rows = n_rows
        self.out_dtype = out_dtype


class FeatureNet:
    """Sparse fully-convolutional network producing unit-norm per-point features."""

    def __init__(self, body, voxel=0.025, seed=None):
        if not isinstance(body, Sequential):
            body = Sequential(body)
        if not body.modules or not isinstance(body.modules[-1], L2Normalize):
            body = Sequential(*body.modules, L2Normalize())
        self.body = body
        self.voxel = voxel
        self.seed = seed
        self.version = 0
        convs = [m for m in _walk(body) if isinstance(m, Conv)]
        if not convs:
            raise BadParameter("network has no convolution layers")
        self.in_channels = convs[0].in_channels
        self.out_dim = _last_conv(body).out_channels

    @classmethod
    def default(cls, k=32, channels=(32, 64), voxel=0.025, seed=0, bias=True, dtype=np.float64):
        """Encoder conv3-C1, resblock, stride-2 conv3-C2, resblock; decoder
        transposed stride-2 conv3-C1, resblock, skip concat, conv1-k; L2 norm."""
        c1, c2 = channels
        rng = check_random_state(seed)
        body = Sequential(
            Conv(1, c1, 3, bias=bias, random_state=rng, dtype=dtype),
            ReLU(),
            ResBlock(c1, bias=bias, random_state=rng, dtype=dtype),
            UNetSkip(
                Sequential(
                    Conv(c1, c2, 3, stride=2, bias=bias, random_state=rng, dtype=dtype),
                    ReLU(),
                    ResBlock(c2, bias=bias, random_state=rng, dtype=dtype),
                ),
                Conv(c2, c1, 3, stride=2, transposed=True, bias=bias, random_state=rng, dtype=dtype),
                ResBlock(c1, bias=bias, random_state=rng, dtype=dtype),
            ),
            Conv(2 * c1, k, 1, bias=bias, random_state=rng, dtype=dtype),
            L2Normalize(),
        )
        return cls(body, voxel=voxel, seed=seed)

    @property
    def k(self):
        return self.out_dim

    def parameters(self):
        return self.body.parameters()

    def n_parameters(self):
        return sum(p.size for _, p in self.parameters())

    def get_flat(self):
        return np.concatenate([p.reshape(-1) for _, p in self.parameters()])

    def set_flat(self, flat):
        flat = np.asarray(flat)
        pos = 0
        for _, p in self.parameters():
            p[...] = flat[pos:pos + p.size].reshape(p.shape)
            pos += p.size
        if pos != flat.size:
            raise ShapeError(f"expected {pos} values, got {flat.size}")
        self.touch()

    def touch(self):
        """Mark parameters as modified; invalidates cached forward states."""
        self.version += 1

    def forward_tensor(self, st):
        return self.body.forward(st)

    def forward(self, x, voxel=None):
        """Per-point features and the state needed for :meth:`backward`."""
        voxel = self.voxel if voxel is None else voxel
        pts = check_points(x)
        st, mapping = quantize(pts, voxel, dtype=self.dtype)
        out, ctx = self.body.forward(st)
        return out.feats[mapping], ForwardState(self.version, ctx, mapping, len(st), out.feats.dtype)

    def backward(self, state, grad):
        if state.version != self.version:
            raise StateError("forward state is stale: parameters changed since the forward pass")
        grad = np.asarray(grad)
        if grad.shape[0] != len(state.mapping):
            raise ShapeError("gradient must have one row per input point")
        g_rows = np.zeros((state.n_rows, grad.shape[1]), dtype=grad.dtype)
        np.add.at(g_rows, state.mapping, grad)
        # backpropagate in the network's own precision
        g_rows = g_rows.astype(state.out_dtype, copy=False)
        _, grads = self.body.backward(state.ctx, g_rows)
        return grads

    @property
    def dtype(self):
        return self.parameters()[0][1].dtype

    def to_config(self):
        return {"body": self.body.to_config(), "voxel": self.voxel, "k": self.k, "seed": self.seed,
                "dtype": self.dtype.name}

    @classmethod
    def from_config(cls, cfg, dtype=None):
        dtype = np.dtype(dtype or cfg.get("dtype", "float64"))
        body = module_from_config(cfg["body"], rng=0, dtype=dtype)
        return cls(body, voxel=cfg["voxel"], seed=cfg.get("seed"))

    def copy(self):
        other = FeatureNet.from_config(self.to_config())
        other.set_flat(self.get_flat())
        return other

    # --- checkpoints ---------------------------------------------------------

    def save(self, path, **extra):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes(**extra))

    def to_bytes(self, **extra):
        header = {**self.to_config(), "params": [[n, list(p.shape)] for n, p in self.parameters()], **extra}
        hbytes = json.dumps(header, sort_keys=True).encode()
        buf = io.BytesIO()
        buf.write(bytes([CHECKPOINT_VERSION]))
        buf.write(_MAGIC)
        buf.write(struct.pack("<I", len(hbytes)))
        buf.write(hbytes)
        for _, p in self.parameters():
            buf.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def load(cls, path, dtype=None):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read(), dtype=dtype)

    @classmethod
    def from_bytes(cls, data, dtype=None):
        """Rebuild a network; ``dtype`` defaults to the precision it was saved from."""
        if len(data) < 9 or data[0] != CHECKPOINT_VERSION or data[1:5] != _MAGIC:
            raise BadParameter("not a checkpoint file or unsupported version")
        (hlen,) = struct.unpack("<I", data[5:9])
        header = json.loads(data[9:9 + hlen].decode())
        net = cls.from_config(header, dtype=dtype)
        flat = np.frombuffer(data[9 + hlen:], dtype="<f8")
        if flat.size != net.n_parameters():
            raise BadParameter("checkpoint parameter block has the wrong size")
        net.set_flat(flat.astype(net.dtype))
        net.version = 0
        net.header = header
        return net


def _walk(m):
    yield m
    for c in m.children():
        yield from _walk(c)


def _last_conv(body):
    last = None
    for m in _walk(body):
        if isinstance(m, Conv):
            last = m
    return last


def net_forward(net, x, voxel=None):
    return net.forward(x, voxel)


def net_backward(net, state, grad):
    return net.backward(state, grad)
