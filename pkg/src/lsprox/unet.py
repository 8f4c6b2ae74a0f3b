"""Hourglass encoder-decoder with skip connections (U-Net).

Each level runs two ``conv3x3 -> BN -> ReLU`` blocks. Encoder levels end
with 2x2 max pooling, decoder levels start with a 2x2 up-convolution whose
output is concatenated with the matching encoder features. A 1x1 conv head
maps to a single signed output channel.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

CHECKPOINT_MAGIC = b"LSPXCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 2
    base_channels: int = 8
    in_channels: int = 1
    out_channels: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.in_channels != 1 or self.out_channels != 1:
            raise ValueError("only single-channel input and output are supported")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")


def _layout(cfg):
    """Ordered ``(kind, prefix, c_in, c_out)`` entries describing the net."""
    b, d = cfg.base_channels, cfg.depth
    blocks = []
    c_prev = cfg.in_channels
    for i in range(d):
        c = b * 2 ** i
        blocks += [("conv", f"enc{i}.1", c_prev, c), ("conv", f"enc{i}.2", c, c)]
        c_prev = c
    c = b * 2 ** d
    blocks += [("conv", "mid.1", c_prev, c), ("conv", "mid.2", c, c)]
    for i in reversed(range(d)):
        c_skip = b * 2 ** i
        blocks += [("up", f"dec{i}.up", b * 2 ** (i + 1), c_skip),
                   ("conv", f"dec{i}.1", 2 * c_skip, c_skip),
                   ("conv", f"dec{i}.2", c_skip, c_skip)]
    blocks.append(("head", "head", b, cfg.out_channels))
    return blocks


def param_count(cfg):
    total = 0
    for kind, _, c_in, c_out in _layout(cfg):
        if kind == "conv":
            total += (9 * c_in + 1) * c_out + 2 * c_out
        elif kind == "up":
            total += 4 * c_in * c_out + c_out
        else:
            total += (c_in + 1) * c_out
    return total


class NetworkParams:
    """Trainable tensors by name plus per-layer batch-norm running stats."""

    def __init__(self, cfg, tensors, bn):
        self.cfg = cfg
        self.tensors = tensors
        self.bn = bn

    def count(self):
        return sum(a.size for a in self.tensors.values())

    def copy(self):
        bn = {}
        for name, st in self.bn.items():
            new = ad.BatchNormState(st.mean.size, st.momentum)
            new.mean, new.var = st.mean.copy(), st.var.copy()
            bn[name] = new
        return NetworkParams(self.cfg, {k: v.copy() for k, v in self.tensors.items()}, bn)

    def attach(self, graph, requires_grad=True):
        return {k: graph.leaf(v, requires_grad=requires_grad, name=k)
                for k, v in self.tensors.items()}

    def records(self):
        """All arrays, trainable and running stats, in a stable order."""
        out = list(self.tensors.items())
        for name, st in self.bn.items():
            out += [(f"{name}.running_mean", st.mean), (f"{name}.running_var", st.var)]
        return out


def build(cfg):
    """Initialize parameters deterministically from ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    tensors = {}
    bn = {}
    for kind, name, c_in, c_out in _layout(cfg):
        if kind == "conv":
            tensors[f"{name}.w"] = rng.standard_normal((c_out, c_in, 3, 3)) * np.sqrt(2.0 / (9 * c_in))
            tensors[f"{name}.b"] = np.zeros(c_out)
            tensors[f"{name}.gamma"] = np.ones(c_out)
            tensors[f"{name}.beta"] = np.zeros(c_out)
            bn[name] = ad.BatchNormState(c_out)
        elif kind == "up":
            tensors[f"{name}.w"] = rng.standard_normal((c_in, c_out, 2, 2)) * np.sqrt(2.0 / c_in)
            tensors[f"{name}.b"] = np.zeros(c_out)
        else:
            tensors[f"{name}.w"] = rng.standard_normal((c_out, c_in, 1, 1)) * np.sqrt(2.0 / c_in)
            tensors[f"{name}.b"] = np.zeros(c_out)
    return NetworkParams(cfg, tensors, bn)


def _conv_block(x, p, params, name, training):
    y = ad.conv2d(x, p[f"{name}.w"], p[f"{name}.b"])
    y = ad.batch_norm(y, p[f"{name}.gamma"], p[f"{name}.beta"], params.bn[name], training)
    return ad.relu(y)


def forward(params, x, training=False, graph=None, leaves=None):
    """Run the network on `x` of shape (n, 1, H, W); returns a Tensor.

    Without `graph` a private graph with constant parameters is used. Pass
    `leaves` (from ``params.attach(graph)``) to differentiate w.r.t. them.
    """
    cfg = params.cfg
    if isinstance(x, ad.Tensor):
        graph = x.graph
    else:
        x = np.asarray(x, dtype=np.float64)
        if graph is None:
            graph = ad.Graph()
        x = graph.constant(x, name="input")
    if x.data.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ValueError(f"expected input of shape (n, {cfg.in_channels}, H, W), got {x.shape}")
    f = 2 ** cfg.depth
    if x.shape[2] % f or x.shape[3] % f:
        raise ValueError(f"H and W must be divisible by {f}, got {x.shape[2:]}")
    p = leaves if leaves is not None else params.attach(graph, requires_grad=False)

    skips = []
    h = x
    for i in range(cfg.depth):
        h = _conv_block(h, p, params, f"enc{i}.1", training)
        h = _conv_block(h, p, params, f"enc{i}.2", training)
        skips.append(h)
        h = ad.max_pool2(h)
    h = _conv_block(h, p, params, "mid.1", training)
    h = _conv_block(h, p, params, "mid.2", training)
    for i in reversed(range(cfg.depth)):
        h = ad.up_conv2(h, p[f"dec{i}.up.w"], p[f"dec{i}.up.b"])
        h = ad.concat_channels(h, skips[i])
        h = _conv_block(h, p, params, f"dec{i}.1", training)
        h = _conv_block(h, p, params, f"dec{i}.2", training)
    return ad.conv2d(h, p["head.w"], p["head.b"])


def to_matrix(x):
    """(n, 1, H, W) frames -> (H*W, n) matrix, one vectorized frame per column."""
    if isinstance(x, ad.Tensor):
        return ad.frames_to_matrix(x)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1] != 1:
        raise ValueError(f"expected (n, 1, H, W), got {x.shape}")
    return x.reshape(x.shape[0], -1).T.copy()


def from_matrix(M, height, width):
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != height * width:
        raise ValueError(f"matrix of shape {M.shape} does not hold {height}x{width} frames")
    return M.T.reshape(M.shape[1], 1, height, width).copy()


# checkpoint file: magic, u32 version, u32 depth, u32 base, u32 in, u32 out,
# u64 seed, u32 record count; then per record u32 name length, name,
# u32 ndim, u64 dims..., float64 little-endian payload

def save(params, path):
    cfg = params.cfg
    recs = params.records()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IIIIIQI", CHECKPOINT_VERSION, cfg.depth, cfg.base_channels,
                             cfg.in_channels, cfg.out_channels, cfg.seed, len(recs)))
        for name, arr in recs:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    pos = 8
    head = struct.calcsize("<IIIIIQI")
    version, depth, base, c_in, c_out, seed, count = struct.unpack_from("<IIIIIQI", blob, pos)
    pos += head
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    cfg = UNetConfig(depth, base, c_in, c_out, seed)
    params = build(cfg)
    expected = dict(params.records())
    seen = set()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
        if name not in expected or expected[name].shape != arr.shape:
            raise ValueError(f"{path}: unexpected record {name} {shape}")
        if name.endswith(".running_mean"):
            params.bn[name[:-len(".running_mean")]].mean = arr
        elif name.endswith(".running_var"):
            params.bn[name[:-len(".running_var")]].var = arr
        else:
            params.tensors[name] = arr
        seen.add(name)
    if seen != set(expected):
        raise ValueError(f"{path}: missing records {sorted(set(expected) - seen)}")
    if pos != len(blob):
        raise ValueError(f"{path}: trailing bytes after last record")
    return params
