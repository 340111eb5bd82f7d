"""Forward/backward primitives for the encoder-decoder network.

Every layer is a pair of plain functions. The forward returns its output
together with a cache tuple that the matching backward consumes. Arrays are
NCHW and the functions are dtype-agnostic: the network trains in float32
and the gradient checks run in float64.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    """Tensor shapes or channel counts are inconsistent."""


class BatchNormStateError(RuntimeError):
    """Inference-mode batch norm requested before any statistics exist."""


# --------------------------------------------------------------------------
# convolution, 3x3, stride 1, zero padding 1
# --------------------------------------------------------------------------

def conv2d_forward(x, w, b):
    """3x3 'same' convolution.

    Parameters
    ----------
    x : ndarray, shape (N, C_in, H, W)
    w : ndarray, shape (C_out, C_in, 3, 3)
    b : ndarray, shape (C_out,)

    Returns
    -------
    out : ndarray, shape (N, C_out, H, W)
    cache : tuple
    """
    if x.ndim != 4:
        raise ShapeError(f"expected NCHW input, got shape {x.shape}")
    c_out, c_in, kh, kw = w.shape
    if (kh, kw) != (3, 3):
        raise ShapeError(f"kernel must be 3x3, got {kh}x{kw}")
    if x.shape[1] != c_in:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {c_in}")
    n, _, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    # (N, C, H, W, 3, 3) -> (N, H, W, C, 3, 3) -> rows of C*9
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * h * wd, c_in * 9)
    wmat = w.reshape(c_out, c_in * 9)
    out = cols @ wmat.T
    out += b
    out = out.reshape(n, h, wd, c_out).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (cols, x.shape, w)


def conv2d_backward(grad_out, cache):
    """Returns (grad_x, grad_w, grad_b)."""
    cols, x_shape, w = cache
    n, c_in, h, wd = x_shape
    c_out = w.shape[0]
    g = grad_out.transpose(0, 2, 3, 1).reshape(n * h * wd, c_out)
    grad_w = (g.T @ cols).reshape(w.shape)
    grad_b = g.sum(axis=0)
    gcols = (g @ w.reshape(c_out, c_in * 9)).reshape(n, h, wd, c_in, 3, 3)
    # col2im: scatter each kernel tap back onto the padded input
    gxp = np.zeros((n, c_in, h + 2, wd + 2), dtype=grad_out.dtype)
    gcols = gcols.transpose(0, 3, 4, 5, 1, 2)  # (N, C, 3, 3, H, W)
    for i in range(3):
        for j in range(3):
            gxp[:, :, i:i + h, j:j + wd] += gcols[:, :, i, j]
    return gxp[:, :, 1:-1, 1:-1], grad_w, grad_b


# --------------------------------------------------------------------------
# batch normalization (per channel, over batch and spatial positions)
# --------------------------------------------------------------------------

def batchnorm_forward(x, gamma, beta, running_mean, running_var, mode="train",
                      momentum=BN_MOMENTUM, eps=BN_EPS):
    """Batch normalization.

    In ``"train"`` mode the statistics of `x` are used and the running
    buffers are updated in place (``r <- (1-momentum) r + momentum * batch``,
    with the biased variance so that inference reproduces the training-time
    normalization). In ``"infer"`` mode the running buffers are used; pass
    ``None`` for them to signal that no statistics exist yet.
    """
    if mode == "train":
        axes = (0, 2, 3)
        mu = x.mean(axis=axes)
        xc = x - mu[None, :, None, None]
        var = (xc * xc).mean(axis=axes)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv_std[None, :, None, None]
        if running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            running_var *= 1.0 - momentum
            running_var += momentum * var
        out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
        return out, (xhat, inv_std, gamma)
    if mode == "infer":
        if running_mean is None or running_var is None:
            raise BatchNormStateError("batch norm has no running statistics; train first")
        inv_std = 1.0 / np.sqrt(running_var + eps)
        scale = (gamma * inv_std).astype(x.dtype, copy=False)
        shift = (beta - running_mean * gamma * inv_std).astype(x.dtype, copy=False)
        return x * scale[None, :, None, None] + shift[None, :, None, None], None
    raise ValueError(f"unknown batch norm mode {mode!r}")


def batchnorm_backward(grad_out, cache):
    """Train-mode backward. Returns (grad_x, grad_gamma, grad_beta)."""
    xhat, inv_std, gamma = cache
    axes = (0, 2, 3)
    m = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
    grad_beta = grad_out.sum(axis=axes)
    grad_gamma = (grad_out * xhat).sum(axis=axes)
    gxhat = grad_out * gamma[None, :, None, None]
    grad_x = (inv_std / m)[None, :, None, None] * (
        m * gxhat
        - gxhat.sum(axis=axes)[None, :, None, None]
        - xhat * (gxhat * xhat).sum(axis=axes)[None, :, None, None]
    )
    return grad_x, grad_gamma, grad_beta


# --------------------------------------------------------------------------
# ReLU
# --------------------------------------------------------------------------

def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(grad_out, mask):
    # subgradient at exactly 0 is taken as 0
    return grad_out * mask


# --------------------------------------------------------------------------
# 2x2 max pooling with recorded argmax offsets, and the matching unpooling
# --------------------------------------------------------------------------

def maxpool2x2_forward(x):
    """2x2 / stride 2 max pooling.

    Returns the pooled tensor and an int8 array of the same shape holding
    the row-major offset (0..3) of the argmax inside each window. Ties go to
    the smallest offset.
    """
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max pooling needs even spatial dims, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)  # first occurrence on ties
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx.astype(np.int8)


def maxunpool2x2(x, indices):
    """Place each value at its recorded window offset; zeros elsewhere."""
    if x.shape != indices.shape:
        raise ShapeError(f"unpool input {x.shape} does not match indices {indices.shape}")
    n, c, h, w = x.shape
    onehot = indices[..., None] == np.arange(4, dtype=indices.dtype)
    win = np.where(onehot, x[..., None], np.zeros((), dtype=x.dtype))
    out = win.reshape(n, c, h, w, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(out.reshape(n, c, 2 * h, 2 * w))


def maxunpool2x2_backward(grad_out, indices):
    """Gather the upstream gradient from the recorded positions."""
    n, c, h, w = indices.shape
    if grad_out.shape != (n, c, 2 * h, 2 * w):
        raise ShapeError(f"gradient {grad_out.shape} does not match indices {indices.shape}")
    win = grad_out.reshape(n, c, h, 2, w, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w, 4)
    return np.take_along_axis(win, indices[..., None].astype(np.intp), axis=-1)[..., 0]


def maxpool2x2_backward(grad_out, indices):
    """Route each pooled gradient to its argmax position."""
    return maxunpool2x2(grad_out, indices)


# --------------------------------------------------------------------------
# softmax + 2D cross entropy
# --------------------------------------------------------------------------

def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, target):
    """Mean per-pixel cross entropy of a 2-class softmax.

    Parameters
    ----------
    logits : ndarray, shape (N, 2, H, W)
    target : ndarray of {0, 1}, shape (N, H, W) or (H, W)

    Returns
    -------
    loss : float
    grad : ndarray like `logits`, equal to (p - onehot) / (N*H*W)
    probs : ndarray like `logits`
    """
    if logits.ndim != 4 or logits.shape[1] != 2:
        raise ShapeError(f"expected (N, 2, H, W) logits, got {logits.shape}")
    target = np.asarray(target)
    if target.ndim == 2:
        target = target[None]
    n, _, h, w = logits.shape
    if target.shape != (n, h, w):
        raise ShapeError(f"target shape {target.shape} does not match logits {logits.shape}")
    t = target.astype(np.intp)
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp_true = np.take_along_axis(z, t[:, None], axis=1)[:, 0] - logsum
    count = n * h * w
    loss = float(-logp_true.sum() / count)
    probs = np.exp(z - logsum[:, None])
    grad = probs.copy()
    np.put_along_axis(grad, t[:, None], np.take_along_axis(grad, t[:, None], axis=1) - 1, axis=1)
    grad /= count
    return loss, grad, probs
