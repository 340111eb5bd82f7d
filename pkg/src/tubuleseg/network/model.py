"""The five-encoder / five-decoder segmentation network.

Encoders E1..E4 run two conv-BN-ReLU units and then 2x2 max pooling, E5
runs the two units without pooling. D1 works at the bottleneck resolution;
D2..D5 first unpool with the indices recorded by E4..E1. D5 ends with a
plain 3x3 conv to two logits followed by a per-pixel softmax.

With ``base_channels = b`` the channel plan is

    E1 1->b, E2 b->2b, E3 2b->4b, E4 4b->8b, E5 8b->16b
    D1 16b->8b, D2 8b->4b, D3 4b->2b, D4 2b->b, D5 b->b->2

``b = 16`` is the full-size model (512x512 input gives a 256-channel 32x32
bottleneck); ``b = 8`` is the desk-scale model.
"""

import hashlib
import itertools
from dataclasses import dataclass, field

import numpy as np

from . import layers as L

FULL_BASE_CHANNELS = 16
DESK_BASE_CHANNELS = 8

ENCODERS = ("E1", "E2", "E3", "E4", "E5")
DECODERS = ("D1", "D2", "D3", "D4", "D5")
# decoder -> encoder whose pooling indices it consumes
UNPOOL_SOURCE = {"D2": "E4", "D3": "E3", "D4": "E2", "D5": "E1"}

_BN_SUFFIXES = ("bn_gamma", "bn_beta", "bn_mean", "bn_var")
_model_ids = itertools.count()


class StaleCacheError(RuntimeError):
    """A forward cache was used after the parameters changed."""


class UntrainedModelError(RuntimeError):
    """Inference requested on a model that never took a training step."""


def channel_plan(base_channels):
    """Ordered ``(block, c_in, c_out)`` triples for every block."""
    b = int(base_channels)
    if b < 1:
        raise ValueError("base_channels must be >= 1")
    enc = [("E1", 1, b), ("E2", b, 2 * b), ("E3", 2 * b, 4 * b),
           ("E4", 4 * b, 8 * b), ("E5", 8 * b, 16 * b)]
    dec = [("D1", 16 * b, 8 * b), ("D2", 8 * b, 4 * b), ("D3", 4 * b, 2 * b),
           ("D4", 2 * b, b), ("D5", b, b)]
    return enc + dec


def plan_string(base_channels):
    parts = [f"{name}:{ci}>{co}" for name, ci, co in channel_plan(base_channels)]
    return "|".join(parts) + "|out:2"


def architecture_hash(base_channels):
    """64-bit identifier of the channel plan."""
    digest = hashlib.sha256(plan_string(base_channels).encode("ascii")).digest()
    return int.from_bytes(digest[:8], "little")


def _conv_units(name, c_in, c_out):
    """(unit name, c_in, c_out, has_bn) for the convs of one block."""
    units = [(f"{name}.conv1", c_in, c_out, True), (f"{name}.conv2", c_out, c_out, True)]
    if name == "D5":
        units.append((f"{name}.conv3", c_out, 2, False))
    return units


def conv_units(base_channels):
    out = []
    for name, ci, co in channel_plan(base_channels):
        out.extend(_conv_units(name, ci, co))
    return out


def parameter_shapes(base_channels):
    """Ordered mapping of every stored array name to its shape."""
    shapes = {}
    for unit, ci, co, has_bn in conv_units(base_channels):
        shapes[f"{unit}.weight"] = (co, ci, 3, 3)
        shapes[f"{unit}.bias"] = (co,)
        if has_bn:
            for s in _BN_SUFFIXES:
                shapes[f"{unit}.{s}"] = (co,)
    return shapes


def is_trainable(name):
    return not (name.endswith(".bn_mean") or name.endswith(".bn_var"))


@dataclass
class ModelParams:
    """Learnable parameters plus batch-norm running statistics.

    ``steps`` counts applied optimizer updates; ``version`` changes on every
    in-place update so stale forward caches can be detected.
    """

    base_channels: int
    params: dict
    steps: int = 0
    version: int = 0
    uid: int = field(default_factory=lambda: next(_model_ids))

    @property
    def arch_hash(self):
        return architecture_hash(self.base_channels)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype):
        return ModelParams(self.base_channels,
                           {k: v.astype(dtype) for k, v in self.params.items()},
                           steps=self.steps)

    def copy(self):
        return self.astype(self.dtype)

    def trainable(self):
        return [k for k in self.params if is_trainable(k)]


def init_model(base_channels=DESK_BASE_CHANNELS, rng=None, dtype=np.float32):
    """He-style initialisation: N(0, 2 / (9 C_in)) kernels, zero biases,
    unit BN scale, zero BN shift, running mean 0 / variance 1."""
    rng = np.random.default_rng(rng)
    params = {}
    for name, shape in parameter_shapes(base_channels).items():
        if name.endswith(".weight"):
            std = np.sqrt(2.0 / (9 * shape[1]))
            params[name] = (rng.standard_normal(shape) * std).astype(dtype)
        elif name.endswith(".bn_gamma") or name.endswith(".bn_var"):
            params[name] = np.ones(shape, dtype=dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    return ModelParams(int(base_channels), params)


@dataclass
class ForwardCache:
    model_uid: int
    model_version: int
    mode: str
    logits: np.ndarray
    probs: np.ndarray
    trace: dict
    steps: list
    pool_indices: dict


def _check_input(x):
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1] != 1:
        raise L.ShapeError(f"expected (N, 1, H, W) input, got {x.shape}")
    h, w = x.shape[2:]
    if h % 16 or w % 16:
        raise L.ShapeError(f"spatial dims must be divisible by 16, got {h}x{w}")
    return x


def forward(model, x, mode="train"):
    """Run the network.

    Parameters
    ----------
    model : ModelParams
    x : ndarray, shape (N, 1, H, W) with H and W divisible by 16
    mode : {"train", "infer"}
        ``"train"`` normalizes with batch statistics and updates the BN
        running buffers; ``"infer"`` uses the running buffers.

    Returns
    -------
    probs : ndarray, shape (N, 2, H, W); channel 1 is the tubule class
    cache : ForwardCache
        ``cache.trace`` maps each block name to the shape of its input.
    """
    x = _check_input(x).astype(model.dtype, copy=False)
    if mode == "infer" and model.steps == 0:
        raise L.BatchNormStateError("model has no running statistics; train it first")
    p = model.params
    steps = []
    trace = {}
    pool_idx = {}
    h = x
    for name, ci, co in channel_plan(model.base_channels):
        if name in UNPOOL_SOURCE:
            h = L.maxunpool2x2(h, pool_idx[UNPOOL_SOURCE[name]])
            steps.append(("unpool", name, UNPOOL_SOURCE[name]))
        trace[name] = h.shape
        for unit, _, _, has_bn in _conv_units(name, ci, co):
            h, c = L.conv2d_forward(h, p[f"{unit}.weight"], p[f"{unit}.bias"])
            steps.append(("conv", unit, c))
            if not has_bn:
                continue
            h, c = L.batchnorm_forward(h, p[f"{unit}.bn_gamma"], p[f"{unit}.bn_beta"],
                                       p[f"{unit}.bn_mean"], p[f"{unit}.bn_var"], mode=mode)
            steps.append(("bn", unit, c))
            h, c = L.relu_forward(h)
            steps.append(("relu", unit, c))
        if name in ENCODERS and name != "E5":
            h, idx = L.maxpool2x2_forward(h)
            pool_idx[name] = idx
            steps.append(("pool", name, idx))
    trace["softmax"] = h.shape
    probs = L.softmax(h)
    cache = ForwardCache(model.uid, model.version, mode, h, probs, trace, steps, pool_idx)
    return probs, cache


def backward(model, cache, target):
    """Gradients of the mean cross-entropy loss w.r.t. every trainable array.

    Returns
    -------
    loss : float
    grads : dict mapping parameter name -> gradient array
    """
    if cache.model_uid != model.uid or cache.model_version != model.version:
        raise StaleCacheError("forward cache does not belong to the current parameters")
    if cache.mode != "train":
        raise ValueError("backward needs a train-mode forward cache")
    loss, g, _ = L.softmax_cross_entropy(cache.logits, target)
    grads = {}
    p = model.params
    for kind, name, c in reversed(cache.steps):
        if kind == "conv":
            g, gw, gb = L.conv2d_backward(g, c)
            grads[f"{name}.weight"] = gw
            grads[f"{name}.bias"] = gb
        elif kind == "bn":
            g, gg, gbeta = L.batchnorm_backward(g, c)
            grads[f"{name}.bn_gamma"] = gg
            grads[f"{name}.bn_beta"] = gbeta
        elif kind == "relu":
            g = L.relu_backward(g, c)
        elif kind == "pool":
            g = L.maxpool2x2_backward(g, c)
        elif kind == "unpool":
            g = L.maxunpool2x2_backward(g, cache.pool_indices[c])
    return loss, {k: grads[k] for k in p if k in grads}


def predict_proba(model, img):
    """Tubule probability map for one 2D image (inference mode)."""
    if model.steps == 0:
        raise UntrainedModelError("model has not been trained")
    img = np.asarray(img)
    probs, _ = forward(model, img[None, None], mode="infer")
    return probs[0, 1]


def predict(model, img):
    """Binary mask ``p_tubule > 0.5`` for one 2D image."""
    return (predict_proba(model, img) > 0.5).astype(np.uint8)
