"""Dense tensor kernels with hand-derived backward passes.

Tensors are plain ``numpy.ndarray`` in double precision, laid out
(batch, channels, height, width) for 4-D data.  Every layer exposes a
``*_forward`` returning the output plus an opaque cache, and a matching
``*_backward`` that consumes the cache and the upstream gradient.  There is
no tape: the network composes these pairs by hand in a fixed order.

All functions are pure given explicit ``numpy.random.Generator`` streams;
batchnorm returns updated running statistics instead of mutating state.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ContractViolation(ValueError):
    """Raised when an operation's input contract is broken."""


@dataclass
class LayerGradients:
    """Gradients of one layer: w.r.t. its input and its named parameters."""

    grad_input: np.ndarray
    grad_params: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d_output_hw(in_hw, kernel_hw, stride, dilation, padding):
    """Spatial output extents and (top, bottom, left, right) zero padding."""
    out = []
    pads = []
    for size, k in zip(in_hw, kernel_hw):
        eff = (k - 1) * dilation + 1
        if padding == "same":
            o = -(-size // stride)  # ceil
            total = max((o - 1) * stride + eff - size, 0)
            lo, hi = total // 2, total - total // 2  # extra pad on bottom/right
        elif padding == "valid":
            if size < eff:
                raise ContractViolation(
                    f"input extent {size} smaller than effective kernel {eff}")
            o = (size - eff) // stride + 1
            lo = hi = 0
        else:
            raise ContractViolation(f"padding must be 'same' or 'valid', got {padding!r}")
        out.append(o)
        pads.append((lo, hi))
    return tuple(out), tuple(pads)


def conv2d_forward(x, kernel, bias, stride=1, dilation=1, padding="same"):
    """Cross-correlation of a 4-D input with a bank of filters.

    x: (N, C, H, W); kernel: (F, C, KH, KW); bias: (F,).
    Returns (out, cache) with out of shape (N, F, OH, OW).
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ContractViolation("conv2d expects 4-D input and kernel")
    n, c, h, w = x.shape
    f, ck, kh, kw = kernel.shape
    if ck != c:
        raise ContractViolation(
            f"kernel expects {ck} input channels, input has {c}")
    if bias.shape != (f,):
        raise ContractViolation(f"bias shape {bias.shape} != ({f},)")
    if stride < 1 or dilation < 1:
        raise ContractViolation("stride and dilation must be >= 1")

    (oh, ow), ((pt, pb), (pl, pr)) = conv2d_output_hw(
        (h, w), (kh, kw), stride, dilation, padding)
    if pt or pb or pl or pr:
        xp = np.zeros((n, c, h + pt + pb, w + pl + pr))
        xp[:, :, pt:pt + h, pl:pl + w] = x
    else:
        xp = np.ascontiguousarray(x)
    hp, wp = xp.shape[2], xp.shape[3]

    # shift-and-GEMM: one batched channel GEMM over all kernel taps at once,
    # then accumulate shifted strided views (stays NCHW, no im2col gather)
    kmat = kernel.transpose(2, 3, 0, 1).reshape(kh * kw * f, c)
    big = np.matmul(kmat, xp.reshape(n, c, hp * wp))
    big = big.reshape(n, kh, kw, f, hp, wp)
    out = np.broadcast_to(bias[None, :, None, None], (n, f, oh, ow)).copy()
    d, s = dilation, stride
    for i in range(kh):
        for j in range(kw):
            out += big[:, i, j, :,
                       i * d:i * d + s * (oh - 1) + 1:s,
                       j * d:j * d + s * (ow - 1) + 1:s]
    cache = (xp, x.shape, kernel, stride, dilation, (pt, pl), (oh, ow))
    return out, cache


def conv2d_backward(cache, grad_out):
    """Gradients of conv2d_forward w.r.t. input, kernel, and bias."""
    xp, x_shape, kernel, stride, dilation, (pt, pl), (oh, ow) = cache
    n, c, h, w = x_shape
    hp, wp = xp.shape[2], xp.shape[3]
    f, _, kh, kw = kernel.shape
    d, s = dilation, stride
    grad_bias = grad_out.sum(axis=(0, 2, 3))

    gout_flat = grad_out.reshape(n, f, oh * ow)
    ktmat = kernel.transpose(2, 3, 1, 0).reshape(kh * kw * c, f)
    spread = np.matmul(ktmat, gout_flat).reshape(n, kh, kw, c, oh, ow)
    gpad = np.zeros((n, c, hp, wp))
    gout_cols = grad_out.transpose(0, 2, 3, 1).reshape(-1, f)
    gk = np.empty((kh, kw, c, f))
    for i in range(kh):
        for j in range(kw):
            rows = slice(i * d, i * d + s * (oh - 1) + 1, s)
            cols = slice(j * d, j * d + s * (ow - 1) + 1, s)
            gpad[:, :, rows, cols] += spread[:, i, j]
            tap = xp[:, :, rows, cols].transpose(1, 0, 2, 3).reshape(c, -1)
            gk[i, j] = tap @ gout_cols
    grad_kernel = np.ascontiguousarray(gk.transpose(3, 2, 0, 1))
    grad_input = np.ascontiguousarray(gpad[:, :, pt:pt + h, pl:pl + w])
    return LayerGradients(grad_input, {"kernel": grad_kernel, "bias": grad_bias})


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

def batchnorm_forward(x, gamma, beta, running_mean, running_var,
                      mode="train", momentum=0.1, eps=1e-5):
    """Per-channel normalization.

    Train mode uses batch statistics over (N, H, W) and returns running
    statistics advanced by an exponential moving average; inference mode
    normalizes with the running statistics and returns them unchanged.
    Returns (out, new_running_mean, new_running_var, cache).
    """
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ContractViolation(f"gamma/beta must have shape ({c},)")
    if mode == "train":
        m = n * h * w
        if m < 2:
            raise ContractViolation("train-mode batchnorm needs batch*H*W >= 2")
        mu = x.mean(axis=(0, 2, 3))
        xc = x - mu[None, :, None, None]
        var = np.mean(xc * xc, axis=(0, 2, 3))
        new_rm = (1.0 - momentum) * running_mean + momentum * mu
        new_rv = (1.0 - momentum) * running_var + momentum * var
    elif mode == "inference":
        mu, var = running_mean, running_var
        new_rm, new_rv = running_mean, running_var
        xc = x - mu[None, :, None, None]
    else:
        raise ContractViolation(f"mode must be 'train' or 'inference', got {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    cache = (xhat, inv_std, gamma, mode)
    return out, new_rm, new_rv, cache


def batchnorm_backward(cache, grad_out):
    """Gradients w.r.t. input, gamma, and beta."""
    xhat, inv_std, gamma, mode = cache
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    dxhat = grad_out * gamma[None, :, None, None]
    if mode == "train":
        # batch statistics depend on x, so their gradient paths fold back in
        mean_d = dxhat.mean(axis=(0, 2, 3), keepdims=True)
        mean_dx = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
        grad_input = inv_std[None, :, None, None] * (dxhat - mean_d - xhat * mean_dx)
    else:
        grad_input = dxhat * inv_std[None, :, None, None]
    return LayerGradients(grad_input, {"gamma": grad_gamma, "beta": grad_beta})


# ---------------------------------------------------------------------------
# elementwise and spatial ops
# ---------------------------------------------------------------------------

def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(mask, grad_out):
    return grad_out * mask


def global_avgpool_forward(x):
    """Spatial mean per channel: (N, C, H, W) -> (N, C, 1, 1)."""
    if x.ndim != 4:
        raise ContractViolation("global_avgpool expects 4-D input")
    return x.mean(axis=(2, 3), keepdims=True), x.shape


def global_avgpool_backward(x_shape, grad_out):
    _, _, h, w = x_shape
    return np.broadcast_to(grad_out / (h * w), x_shape).copy()


def broadcast_spatial_forward(pooled, target_hw):
    """Replicate (N, C, 1, 1) values over a (h, w) spatial grid."""
    n, c = pooled.shape[:2]
    h, w = target_hw
    return np.broadcast_to(pooled, (n, c, h, w)).copy()


def broadcast_spatial_backward(grad_out):
    return grad_out.sum(axis=(2, 3), keepdims=True)


_UPSAMPLE_MATRICES: dict = {}


def _upsample_matrix(in_size, factor):
    """Row-stochastic interpolation matrix for align-corners-false bilinear."""
    key = (in_size, factor)
    if key not in _UPSAMPLE_MATRICES:
        out_size = in_size * factor
        mat = np.zeros((out_size, in_size))
        for o in range(out_size):
            src = min(max((o + 0.5) / factor - 0.5, 0.0), in_size - 1.0)
            i0 = int(np.floor(src))
            i1 = min(i0 + 1, in_size - 1)
            w1 = src - i0
            mat[o, i0] += 1.0 - w1
            mat[o, i1] += w1
        _UPSAMPLE_MATRICES[key] = mat
    return _UPSAMPLE_MATRICES[key]


def bilinear_upsample_forward(x, factor):
    """Align-corners-false bilinear upsampling by an integer factor."""
    if factor < 1:
        raise ContractViolation("upsample factor must be >= 1")
    if factor == 1:
        return x.copy(), None
    _, _, h, w = x.shape
    wh = _upsample_matrix(h, factor)
    ww = _upsample_matrix(w, factor)
    out = np.matmul(np.matmul(wh, x), ww.T)
    return out, (wh, ww)


def bilinear_upsample_backward(cache, grad_out):
    if cache is None:
        return grad_out.copy()
    wh, ww = cache
    return np.matmul(np.matmul(wh.T, grad_out), ww)


def dropout_forward(x, rate, mode="train", rng=None):
    """Inverted dropout: survivors are scaled by 1/(1-rate) at train time."""
    if not 0.0 <= rate < 1.0:
        raise ContractViolation(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "inference" or rate == 0.0:
        return x.copy(), None
    if rng is None:
        raise ContractViolation("train-mode dropout needs an rng stream")
    mask = rng.random(x.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    return x * mask * scale, (mask, scale)


def dropout_backward(cache, grad_out):
    if cache is None:
        return grad_out.copy()
    mask, scale = cache
    return grad_out * mask * scale


def concat_channels_forward(*tensors):
    """Concatenate along the channel axis; batch and spatial extents must match."""
    ref = tensors[0]
    for t in tensors[1:]:
        if t.shape[0] != ref.shape[0]:
            raise ContractViolation(
                f"batch mismatch in concat: {t.shape[0]} vs {ref.shape[0]}")
        if t.shape[2:] != ref.shape[2:]:
            raise ContractViolation(
                f"spatial mismatch in concat: {t.shape[2:]} vs {ref.shape[2:]}")
    sections = [t.shape[1] for t in tensors]
    return np.concatenate(tensors, axis=1), sections


def concat_channels_backward(sections, grad_out):
    """Split the gradient back into the original channel ranges."""
    bounds = np.cumsum(sections)[:-1]
    return tuple(np.ascontiguousarray(g) for g in np.split(grad_out, bounds, axis=1))


def softmax_channels(logits):
    """Numerically stable softmax over the channel axis."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_channels_backward(probs, grad_probs):
    """Gradient w.r.t. logits given the gradient w.r.t. probabilities."""
    dot = (grad_probs * probs).sum(axis=1, keepdims=True)
    return probs * (grad_probs - dot)


# ---------------------------------------------------------------------------
# optimizer step
# ---------------------------------------------------------------------------

def sgd_step(params, grads, lr, weight_decay=0.0):
    """One SGD step: theta <- theta - lr * (g + 2*weight_decay*theta).

    ``grads`` must contain one entry per differentiable parameter; running
    statistics are carried over untouched.  Returns a new parameter set.
    """
    if lr < 0:
        raise ContractViolation("learning rate must be nonnegative")
    new_blocks = {}
    for bname, block in params.blocks.items():
        new_block = {}
        for pname, value in block.items():
            name = f"{bname}.{pname}"
            if name not in grads:
                raise ContractViolation(f"missing gradient for parameter {name!r}")
            g = grads[name]
            if g.shape != value.shape:
                raise ContractViolation(
                    f"gradient shape {g.shape} != parameter shape "
                    f"{value.shape} for {name!r}")
            new_block[pname] = value - lr * (g + 2.0 * weight_decay * value)
        new_blocks[bname] = new_block
    return type(params)(
        blocks=new_blocks,
        running_stats={k: v.copy() for k, v in params.running_stats.items()},
        config=params.config)
