"""Small convolutional keypoint detector and descriptor with manual backprop.

Architecture: three 3x3 conv + ReLU layers (stride 1, 2, 2) form a shared
encoder at 1/4 resolution.  The heatmap head is a 3x3 conv to 16 channels
which a depth-to-space shuffle turns into full-resolution logits; a
spatial softmax makes them a distribution over pixels.  The descriptor head
is a 3x3 conv to ``D`` channels on the coarse grid, read out by bilinear
interpolation and L2 normalisation.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, OutOfBounds, ShapeMismatch, StaleCache
from .rng import make_rng

CELL = 4
_LAYERS = ("conv1", "conv2", "conv3", "heat", "desc")
_STRIDES = {"conv1": 1, "conv2": 2, "conv3": 2, "heat": 1, "desc": 1}


class ModelParams:
    """Named float64 parameter tensors plus a version counter.

    The counter is bumped on every in-place update so a forward cache can
    tell whether it still describes the current weights.
    """

    def __init__(self, tensors):
        self.tensors = OrderedDict((k, np.asarray(v, dtype=np.float64)) for k, v in tensors.items())
        self.version = 0

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return list(self.tensors)

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()})

    def bump(self):
        self.version += 1

    @property
    def size(self) -> int:
        return sum(v.size for v in self.tensors.values())

    @property
    def desc_dim(self) -> int:
        return self.tensors["desc.w"].shape[0]

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.tensors.values()])


def _f32(a):
    # weights live on the float32 grid so checkpoints round-trip exactly
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def init_params(seed: int = 0, channels=(8, 16, 32), desc_dim: int = 32) -> ModelParams:
    """Fan-in scaled uniform kernels, zero biases."""
    rng = make_rng(seed)
    c1, c2, c3 = channels
    shapes = {
        "conv1": (c1, 1),
        "conv2": (c2, c1),
        "conv3": (c3, c2),
        "heat": (CELL * CELL, c3),
        "desc": (desc_dim, c3),
    }
    t = OrderedDict()
    for name in _LAYERS:
        o, i = shapes[name]
        bound = np.sqrt(6.0 / (i * 9))
        t[f"{name}.w"] = _f32(rng.uniform(-bound, bound, size=(o, i, 3, 3)))
        t[f"{name}.b"] = np.zeros(o)
    return ModelParams(t)


# ---------------------------------------------------------------- layers


def _conv_forward(x, w, b, stride):
    n, c, h, wd = x.shape
    o = w.shape[0]
    ho = (h - 1) // stride + 1
    wo = (wd - 1) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((n, c, 3, 3, ho, wo))
    for ki in range(3):
        for kj in range(3):
            cols[:, :, ki, kj] = xp[:, :, ki : ki + stride * (ho - 1) + 1 : stride, kj : kj + stride * (wo - 1) + 1 : stride]
    cols = cols.reshape(n, c * 9, ho * wo)
    out = np.matmul(w.reshape(o, -1), cols) + b[None, :, None]
    return out.reshape(n, o, ho, wo), cols


def _conv_backward(g, cols, w, x_shape, stride):
    n, c, h, wd = x_shape
    o = w.shape[0]
    ho, wo = g.shape[2:]
    g2 = g.reshape(n, o, ho * wo)
    gw = np.einsum("nol,nkl->ok", g2, cols).reshape(w.shape)
    gb = g2.sum(axis=(0, 2))
    gcols = np.matmul(w.reshape(o, -1).T, g2).reshape(n, c, 3, 3, ho, wo)
    gxp = np.zeros((n, c, h + 2, wd + 2))
    for ki in range(3):
        for kj in range(3):
            gxp[:, :, ki : ki + stride * (ho - 1) + 1 : stride, kj : kj + stride * (wo - 1) + 1 : stride] += gcols[:, :, ki, kj]
    return gxp[:, :, 1:-1, 1:-1], gw, gb


def depth_to_space(x, r=CELL):
    n, c, h, w = x.shape
    return x.reshape(n, r, r, h, w).transpose(0, 3, 1, 4, 2).reshape(n, h * r, w * r)


def space_to_depth(y, r=CELL):
    n, H, W = y.shape
    return y.reshape(n, H // r, r, W // r, r).transpose(0, 2, 4, 1, 3).reshape(n, r * r, H // r, W // r)


def log_softmax(logits):
    """Spatial log-softmax over the last two axes."""
    flat = logits.reshape(logits.shape[:-2] + (-1,))
    m = flat.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(flat - m).sum(axis=-1, keepdims=True))
    return (flat - lse).reshape(logits.shape)


def log_softmax_backward(g_logp, logp):
    """VJP of the spatial log-softmax: g - softmax * sum(g)."""
    s = g_logp.sum(axis=(-2, -1), keepdims=True)
    return g_logp - np.exp(logp) * s


# ------------------------------------------------------------ outputs


@dataclass
class HeatMap:
    """Keypoint distribution over pixels, stored as log-probabilities."""

    logp: np.ndarray

    @property
    def prob(self) -> np.ndarray:
        return np.exp(self.logp)

    @property
    def shape(self):
        return self.logp.shape

    @classmethod
    def from_prob(cls, prob) -> "HeatMap":
        p = np.asarray(prob, dtype=np.float64)
        with np.errstate(divide="ignore"):
            return cls(np.log(p))


@dataclass
class DescriptorField:
    """Coarse raw descriptor grid read out at pixel positions.

    ``grid`` is (Hc, Wc, D).  Grid node ``k`` sits at pixel
    ``stride * k + (stride - 1) / 2``; coordinates are (x, y) = (col, row).
    """

    grid: np.ndarray
    stride: int
    image_shape: tuple

    def _weights(self, coords):
        c = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
        H, W = self.image_shape
        if (c < 0).any() or (c[:, 0] > W - 1).any() or (c[:, 1] > H - 1).any():
            raise OutOfBounds("descriptor lookup outside the image")
        hc, wc = self.grid.shape[:2]
        gx = np.clip((c[:, 0] + 0.5) / self.stride - 0.5, 0, wc - 1)
        gy = np.clip((c[:, 1] + 0.5) / self.stride - 0.5, 0, hc - 1)
        x0 = np.minimum(np.floor(gx), max(wc - 2, 0)).astype(int)
        y0 = np.minimum(np.floor(gy), max(hc - 2, 0)).astype(int)
        fx = gx - x0
        fy = gy - y0
        x1 = np.minimum(x0 + 1, wc - 1)
        y1 = np.minimum(y0 + 1, hc - 1)
        idx = [(y0, x0), (y0, x1), (y1, x0), (y1, x1)]
        wts = [(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx]
        return idx, wts

    def raw(self, coords):
        idx, wts = self._weights(coords)
        return sum(w[:, None] * self.grid[yy, xx] for (yy, xx), w in zip(idx, wts))

    def lookup(self, coords) -> np.ndarray:
        """Unit-norm descriptors at (n, 2) pixel coordinates."""
        v = self.raw(coords)
        return v / np.linalg.norm(v, axis=1, keepdims=True)

    def lookup_backward(self, coords, g_unit) -> np.ndarray:
        """Gradient w.r.t. ``grid`` given gradients of ``lookup`` outputs."""
        idx, wts = self._weights(coords)
        v = sum(w[:, None] * self.grid[yy, xx] for (yy, xx), w in zip(idx, wts))
        nrm = np.linalg.norm(v, axis=1, keepdims=True)
        u = v / nrm
        gv = (g_unit - u * np.sum(u * g_unit, axis=1, keepdims=True)) / nrm
        gg = np.zeros_like(self.grid)
        for (yy, xx), w in zip(idx, wts):
            np.add.at(gg, (yy, xx), w[:, None] * gv)
        return gg

    def dense(self) -> np.ndarray:
        """Full-resolution unit descriptor field (H, W, D)."""
        H, W = self.image_shape
        yy, xx = np.mgrid[0:H, 0:W]
        return self.lookup(np.stack([xx.ravel(), yy.ravel()], axis=1)).reshape(H, W, -1)


def descriptor_at(field: DescriptorField, x) -> np.ndarray:
    return field.lookup(np.asarray(x, dtype=np.float64).reshape(1, 2))[0]


# ------------------------------------------------------------ network


@dataclass
class ForwardCache:
    params: ModelParams
    version: int
    images_shape: tuple
    acts: dict = field(default_factory=dict)
    logp: np.ndarray | None = None


def forward(images, params: ModelParams):
    """Run the network on an (H, W) image or an (N, H, W) stack.

    Returns lists of ``HeatMap`` and ``DescriptorField`` (one per image)
    and the cache needed by ``backward``.
    """
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise ShapeMismatch("expected (H, W) or (N, H, W) images")
    n, H, W = x.shape
    if H % CELL or W % CELL or H == 0 or W == 0:
        raise ShapeMismatch(f"image size must be a positive multiple of {CELL}, got {H}x{W}")
    cache = ForwardCache(params, params.version, x.shape)
    h = x[:, None]
    for name in ("conv1", "conv2", "conv3"):
        z, cols = _conv_forward(h, params[f"{name}.w"], params[f"{name}.b"], _STRIDES[name])
        cache.acts[name] = (h.shape, cols, z > 0)
        h = np.maximum(z, 0.0)
    zh, cols_h = _conv_forward(h, params["heat.w"], params["heat.b"], 1)
    zd, cols_d = _conv_forward(h, params["desc.w"], params["desc.b"], 1)
    cache.acts["heat"] = (h.shape, cols_h, None)
    cache.acts["desc"] = (h.shape, cols_d, None)
    logp = log_softmax(depth_to_space(zh))
    cache.logp = logp
    heatmaps = [HeatMap(lp) for lp in logp]
    fields = [DescriptorField(np.moveaxis(d, 0, -1), CELL, (H, W)) for d in zd]
    return heatmaps, fields, cache


def backward(cache: ForwardCache, g_logp, g_desc) -> dict:
    """Parameter gradients of a scalar given its gradients w.r.t. the outputs.

    ``g_logp`` (N, H, W) is the gradient w.r.t. the log-heatmaps and
    ``g_desc`` (N, Hc, Wc, D) w.r.t. the raw descriptor grids (either may be
    ``None`` for zero).
    """
    params = cache.params
    if params.version != cache.version:
        raise StaleCache("parameters changed since the forward pass")
    n, H, W = cache.images_shape
    hc, wc = H // CELL, W // CELL
    D = params.desc_dim
    g_logp = np.zeros((n, H, W)) if g_logp is None else np.asarray(g_logp, dtype=np.float64).reshape(n, H, W)
    g_desc = np.zeros((n, hc, wc, D)) if g_desc is None else np.asarray(g_desc, dtype=np.float64).reshape(n, hc, wc, D)
    grads = {}
    g_logits = log_softmax_backward(g_logp, cache.logp)
    g_zh = space_to_depth(g_logits)
    g_zd = np.moveaxis(g_desc, -1, 1)
    shape, cols, _ = cache.acts["heat"]
    gh, grads["heat.w"], grads["heat.b"] = _conv_backward(g_zh, cols, params["heat.w"], shape, 1)
    shape, cols, _ = cache.acts["desc"]
    gd, grads["desc.w"], grads["desc.b"] = _conv_backward(g_zd, cols, params["desc.w"], shape, 1)
    g = gh + gd
    for name in ("conv3", "conv2", "conv1"):
        shape, cols, mask = cache.acts[name]
        g = g * mask
        g, grads[f"{name}.w"], grads[f"{name}.b"] = _conv_backward(g, cols, params[f"{name}.w"], shape, _STRIDES[name])
    return OrderedDict((k, grads[k]) for k in params.names())


# ------------------------------------------------------------ optimiser


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: ModelParams, grads, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update applied in place; returns (params, state)."""
    for k, g in grads.items():
        if k not in params.tensors or np.shape(g) != params[k].shape:
            raise ShapeMismatch(f"gradient for {k!r} does not match its parameter")
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for k, g in grads.items():
        m = state.m.get(k, np.zeros_like(g))
        v = state.v.get(k, np.zeros_like(g))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[k], state.v[k] = m, v
        params.tensors[k] = _f32(params[k] - lr * (m / c1) / (np.sqrt(v / c2) + eps))
    params.bump()
    return params, state


# ------------------------------------------------------------ checkpoints

MAGIC = b"RFPTCKPT"
FORMAT_VERSION = 1


def save_checkpoint(path, params: ModelParams):
    """Little-endian: magic, u32 version, u32 count, manifest, float32 data."""
    out = bytearray(MAGIC)
    out += struct.pack("<II", FORMAT_VERSION, len(params.tensors))
    for name, arr in params.tensors.items():
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    for arr in params.tensors.values():
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0

    def take(nbytes):
        nonlocal pos
        if pos + nbytes > len(data):
            raise FormatError(f"{path}: truncated at byte offset {len(data)} (needed {pos + nbytes})")
        chunk = data[pos : pos + nbytes]
        pos += nbytes
        return chunk

    if take(len(MAGIC)) != MAGIC:
        raise FormatError(f"{path}: bad magic")
    version, count = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    manifest = []
    for _ in range(count):
        (ln,) = struct.unpack("<H", take(2))
        name = take(ln).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        manifest.append((name, shape))
    tensors = OrderedDict()
    for name, shape in manifest:
        size = int(np.prod(shape))
        tensors[name] = np.frombuffer(take(4 * size), dtype="<f4").astype(np.float64).reshape(shape)
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes at offset {pos}")
    return ModelParams(tensors)
