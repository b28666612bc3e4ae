"""Miniature fully convolutional segmentation network.

The network is a stack of stride-2 conv/batchnorm/relu encoder stages, a
decoder block that fuses upsampled deep features with a skip connection
through three parallel branches (1x1 conv, dilated 3x3 conv, global average
pooling) plus a residual path, and a bilinear upsample back to input
resolution with a per-pixel softmax head.

Parameters live in a :class:`ParameterSet`; the forward and backward passes
are composed by hand from the kernels in :mod:`metaseg.ops`.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .ops import ContractViolation


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``encoder_stages`` stride-2 stages follow the stem, each doubling the
    channel count; the decoder fuses the deepest features with the skip tap
    at ``rsd_skip_stage`` and predicts ``num_output_channels`` per-pixel
    class probabilities at full resolution.
    """

    input_hw: int = 32
    base_channels: int = 8
    encoder_stages: int = 3
    rsd_skip_stage: int = 2
    rsd_out_channels: int = 16
    dropout_rate: float = 0.2
    num_output_channels: int = 2

    def __post_init__(self):
        if self.input_hw % (1 << self.encoder_stages) != 0:
            raise ContractViolation(
                f"input_hw {self.input_hw} not divisible by 2^{self.encoder_stages}")
        if not 1 <= self.rsd_skip_stage < self.encoder_stages:
            raise ContractViolation(
                f"rsd_skip_stage must be in [1, {self.encoder_stages - 1}]")
        if self.num_output_channels < 2:
            raise ContractViolation("num_output_channels must be >= 2")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ContractViolation("dropout_rate must be in [0, 1)")

    def stage_channels(self, i):
        """Output channels of the stem (i=0) or encoder stage i."""
        return self.base_channels << i

    @property
    def rsd_in_channels(self):
        return (self.stage_channels(self.rsd_skip_stage)
                + self.stage_channels(self.encoder_stages))

    @property
    def rsd_has_projection(self):
        return self.rsd_in_channels != self.rsd_out_channels


@dataclass
class ParameterSet:
    """Named, block-grouped model parameters plus batch-norm running stats.

    ``blocks`` maps block name -> {param name -> array} in a fixed insertion
    order; flat parameter names are ``"block.param"``.  Running statistics
    are kept apart because they are state, not gradient-trained weights:
    they are excluded from flattening, L2 norms, and distances.
    """

    blocks: dict = field(default_factory=dict)
    running_stats: dict = field(default_factory=dict)
    config: ModelConfig | None = None

    def param_items(self):
        """Yield (flat name, array) over differentiable parameters in fixed order."""
        for bname, block in self.blocks.items():
            for pname, value in block.items():
                yield f"{bname}.{pname}", value

    def get(self, name):
        bname, pname = name.split(".", 1)
        return self.blocks[bname][pname]

    def set(self, name, value):
        bname, pname = name.split(".", 1)
        if pname not in self.blocks[bname]:
            raise KeyError(name)
        self.blocks[bname][pname] = value

    def copy(self):
        """Deep snapshot; restoring is just keeping the snapshot around."""
        return ParameterSet(
            blocks={b: {p: v.copy() for p, v in blk.items()}
                    for b, blk in self.blocks.items()},
            running_stats={k: v.copy() for k, v in self.running_stats.items()},
            config=self.config,
        )

    def restore(self, snapshot):
        """Copy all values (running stats included) from ``snapshot`` in place."""
        for b, blk in snapshot.blocks.items():
            for p, v in blk.items():
                self.blocks[b][p] = v.copy()
        for k, v in snapshot.running_stats.items():
            self.running_stats[k] = v.copy()

    def equals(self, other):
        """Bitwise equality of every parameter and running statistic."""
        mine = dict(self.param_items())
        theirs = dict(other.param_items())
        if mine.keys() != theirs.keys():
            return False
        if any(not np.array_equal(mine[k], theirs[k]) for k in mine):
            return False
        if self.running_stats.keys() != other.running_stats.keys():
            return False
        return all(np.array_equal(self.running_stats[k], other.running_stats[k])
                   for k in self.running_stats)

    def flatten(self):
        """All differentiable parameters as one vector, in param_items order."""
        return np.concatenate([v.ravel() for _, v in self.param_items()])

    def unflatten(self, vec):
        """Inverse of flatten: a new ParameterSet with values taken from ``vec``."""
        new = self.copy()
        offset = 0
        for name, value in self.param_items():
            n = value.size
            new.set(name, vec[offset:offset + n].reshape(value.shape).copy())
            offset += n
        if offset != vec.size:
            raise ContractViolation(
                f"vector length {vec.size} != parameter count {offset}")
        return new

    def block_vector(self, bname):
        """One block's parameters unrolled into a vector."""
        return np.concatenate([v.ravel() for v in self.blocks[bname].values()])

    @property
    def num_params(self):
        return sum(v.size for _, v in self.param_items())


def _he_conv(rng, f, c, kh, kw):
    std = np.sqrt(2.0 / (c * kh * kw))
    return rng.normal(0.0, std, size=(f, c, kh, kw))


def _bn_params(c):
    return np.ones(c), np.zeros(c)


def build_model(config, rng):
    """Initialize a ParameterSet: He-normal conv kernels, zero biases,
    batch-norm gamma=1/beta=0, running mean 0 / variance 1."""
    blocks = {}
    stats = {}

    def add_cbr(bname, c_in, c_out, ksize, prefix=""):
        g, b = _bn_params(c_out)
        blocks.setdefault(bname, {})
        blocks[bname][prefix + "kernel"] = _he_conv(rng, c_out, c_in, ksize, ksize)
        blocks[bname][prefix + "bias"] = np.zeros(c_out)
        blocks[bname][prefix + "gamma"] = g
        blocks[bname][prefix + "beta"] = b
        key = f"{bname}.{prefix}" if prefix else f"{bname}."
        stats[key + "mean"] = np.zeros(c_out)
        stats[key + "var"] = np.ones(c_out)

    add_cbr("stem", 1, config.base_channels, 3)
    for i in range(1, config.encoder_stages + 1):
        add_cbr(f"enc{i}", config.stage_channels(i - 1), config.stage_channels(i), 3)

    c_in = config.rsd_in_channels
    r = config.rsd_out_channels
    add_cbr("rsd", c_in, r, 1, prefix="b1_")
    add_cbr("rsd", c_in, r, 3, prefix="b2_")
    add_cbr("rsd", 2 * r + c_in, r, 3, prefix="fuse_")
    if config.rsd_has_projection:
        add_cbr("rsd", c_in, r, 1, prefix="proj_")

    blocks["head"] = {
        "kernel": _he_conv(rng, config.num_output_channels, r, 1, 1),
        "bias": np.zeros(config.num_output_channels),
    }
    return ParameterSet(blocks=blocks, running_stats=stats, config=config)


def param_count(config):
    """Closed-form parameter count: each KxK conv with C in / F out channels
    contributes F*C*K*K + F, each batch norm 2*C."""
    def cbr(c_in, c_out, k):
        return c_out * c_in * k * k + c_out + 2 * c_out

    total = cbr(1, config.base_channels, 3)
    for i in range(1, config.encoder_stages + 1):
        total += cbr(config.stage_channels(i - 1), config.stage_channels(i), 3)
    c_in, r = config.rsd_in_channels, config.rsd_out_channels
    total += cbr(c_in, r, 1) + cbr(c_in, r, 3) + cbr(2 * r + c_in, r, 3)
    if config.rsd_has_projection:
        total += cbr(c_in, r, 1)
    total += config.num_output_channels * r + config.num_output_channels
    return total


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def _cbr_forward(x, blk, stats, key, mode, stride=1, dilation=1, prefix=""):
    """conv -> batchnorm -> relu; returns (out, new stat pair, cache)."""
    out, c_conv = ops.conv2d_forward(
        x, blk[prefix + "kernel"], blk[prefix + "bias"],
        stride=stride, dilation=dilation, padding="same")
    out, nrm, nrv, c_bn = ops.batchnorm_forward(
        out, blk[prefix + "gamma"], blk[prefix + "beta"],
        stats[key + "mean"], stats[key + "var"], mode=mode)
    out, mask = ops.relu_forward(out)
    return out, (nrm, nrv), (c_conv, c_bn, mask)


def _cbr_backward(cache, grad_out, prefix=""):
    c_conv, c_bn, mask = cache
    g = ops.relu_backward(mask, grad_out)
    bn = ops.batchnorm_backward(c_bn, g)
    conv = ops.conv2d_backward(c_conv, bn.grad_input)
    grads = {
        prefix + "kernel": conv.grad_params["kernel"],
        prefix + "bias": conv.grad_params["bias"],
        prefix + "gamma": bn.grad_params["gamma"],
        prefix + "beta": bn.grad_params["beta"],
    }
    return conv.grad_input, grads


def rsd_block_forward(features, skip_features, block, stats, mode="train"):
    """Decoder block over upsampled deep features and a same-resolution skip.

    The concatenated input runs through three parallel branches (1x1 conv,
    3x3 conv with dilation 2, global average pooling broadcast back), the
    branch outputs are concatenated and fused by a 3x3 conv, and a residual
    path from the block input (1x1 projection when channel counts differ)
    is added.  ``stats`` holds the block-local running statistics keyed
    ``b1_mean`` etc.; returns (out, new_stats, cache).
    """
    if features.shape[2:] != skip_features.shape[2:]:
        raise ContractViolation(
            f"spatial mismatch: features {features.shape[2:]} vs skip "
            f"{skip_features.shape[2:]}")
    x, sec_in = ops.concat_channels_forward(skip_features, features)
    new_stats = {}

    b1, (new_stats["b1_mean"], new_stats["b1_var"]), c_b1 = _cbr_forward(
        x, block, stats, "b1_", mode, prefix="b1_")
    b2, (new_stats["b2_mean"], new_stats["b2_var"]), c_b2 = _cbr_forward(
        x, block, stats, "b2_", mode, dilation=2, prefix="b2_")
    pooled, c_pool = ops.global_avgpool_forward(x)
    pool = ops.broadcast_spatial_forward(pooled, x.shape[2:])

    y, sec_y = ops.concat_channels_forward(b1, b2, pool)
    fused, (new_stats["fuse_mean"], new_stats["fuse_var"]), c_fuse = _cbr_forward(
        y, block, stats, "fuse_", mode, prefix="fuse_")

    if "proj_kernel" in block:
        res, c_pconv = ops.conv2d_forward(
            x, block["proj_kernel"], block["proj_bias"], padding="same")
        res, new_stats["proj_mean"], new_stats["proj_var"], c_pbn = \
            ops.batchnorm_forward(res, block["proj_gamma"], block["proj_beta"],
                                  stats["proj_mean"], stats["proj_var"], mode=mode)
        c_proj = (c_pconv, c_pbn)
    else:
        res, c_proj = x, None

    out = fused + res
    cache = (sec_in, c_b1, c_b2, c_pool, sec_y, c_fuse, c_proj)
    return out, new_stats, cache


def rsd_block_backward(cache, grad_out):
    """Returns (grad_features, grad_skip, block param grads)."""
    sec_in, c_b1, c_b2, c_pool, sec_y, c_fuse, c_proj = cache
    grads = {}

    gy, g_fuse = _cbr_backward(c_fuse, grad_out, prefix="fuse_")
    grads.update(g_fuse)
    gb1, gb2, gpool = ops.concat_channels_backward(sec_y, gy)

    gx_b1, g_b1 = _cbr_backward(c_b1, gb1, prefix="b1_")
    grads.update(g_b1)
    gx_b2, g_b2 = _cbr_backward(c_b2, gb2, prefix="b2_")
    grads.update(g_b2)
    gx_pool = ops.global_avgpool_backward(
        c_pool, ops.broadcast_spatial_backward(gpool))
    gx = gx_b1 + gx_b2 + gx_pool

    if c_proj is not None:
        c_pconv, c_pbn = c_proj
        bn = ops.batchnorm_backward(c_pbn, grad_out)
        grads["proj_gamma"] = bn.grad_params["gamma"]
        grads["proj_beta"] = bn.grad_params["beta"]
        conv = ops.conv2d_backward(c_pconv, bn.grad_input)
        grads["proj_kernel"] = conv.grad_params["kernel"]
        grads["proj_bias"] = conv.grad_params["bias"]
        gx = gx + conv.grad_input
    else:
        gx = gx + grad_out

    grad_skip, grad_features = ops.concat_channels_backward(sec_in, gx)
    return grad_features, grad_skip, grads


def forward(params, images, mode="train", rng=None, dropout_rate=None,
            want_cache=False):
    """Per-pixel class probabilities of shape (N, num_outputs, H, W).

    Train mode applies dropout before the final 1x1 conv and commits updated
    batch-norm running statistics into ``params``; inference mode reads the
    running statistics and leaves ``params`` untouched.  ``dropout_rate``
    overrides the config default (used when adapting with tuned
    hyperparameters).
    """
    config = params.config
    if config is None:
        raise ContractViolation("ParameterSet carries no model config")
    if images.ndim != 4 or images.shape[1] != 1:
        raise ContractViolation(
            f"expected images of shape (N, 1, H, W), got {images.shape}")
    if images.shape[2] != config.input_hw or images.shape[3] != config.input_hw:
        raise ContractViolation(
            f"expected {config.input_hw}x{config.input_hw} images, "
            f"got {images.shape[2]}x{images.shape[3]}")
    rate = config.dropout_rate if dropout_rate is None else dropout_rate
    stats = params.running_stats
    new_stats = {}
    cache = {}

    x, (new_stats["stem.mean"], new_stats["stem.var"]), cache["stem"] = \
        _cbr_forward(images, params.blocks["stem"], stats, "stem.", mode)
    taps = {0: x}
    for i in range(1, config.encoder_stages + 1):
        key = f"enc{i}."
        x, (new_stats[key + "mean"], new_stats[key + "var"]), cache[f"enc{i}"] = \
            _cbr_forward(x, params.blocks[f"enc{i}"], stats, key, mode, stride=2)
        taps[i] = x

    up_factor = 1 << (config.encoder_stages - config.rsd_skip_stage)
    deep_up, cache["up_deep"] = ops.bilinear_upsample_forward(x, up_factor)
    rsd_stats = {k[len("rsd."):]: v for k, v in stats.items()
                 if k.startswith("rsd.")}
    r_out, rsd_new, cache["rsd"] = rsd_block_forward(
        deep_up, taps[config.rsd_skip_stage], params.blocks["rsd"], rsd_stats,
        mode=mode)
    for k, v in rsd_new.items():
        new_stats["rsd." + k] = v

    dropped, cache["dropout"] = ops.dropout_forward(r_out, rate, mode=mode, rng=rng)
    logits_low, cache["head"] = ops.conv2d_forward(
        dropped, params.blocks["head"]["kernel"], params.blocks["head"]["bias"],
        padding="same")
    logits, cache["up_head"] = ops.bilinear_upsample_forward(
        logits_low, 1 << config.rsd_skip_stage)
    probs = ops.softmax_channels(logits)
    cache["probs"] = probs

    if mode == "train":
        params.running_stats.update(new_stats)
    if want_cache:
        return probs, cache
    return probs


def backward(params, cache, grad_probs):
    """Gradients of a scalar loss w.r.t. every differentiable parameter,
    given its gradient w.r.t. the forward probabilities."""
    config = params.config
    grads = {}

    g = ops.softmax_channels_backward(cache["probs"], grad_probs)
    g = ops.bilinear_upsample_backward(cache["up_head"], g)
    head = ops.conv2d_backward(cache["head"], g)
    grads["head.kernel"] = head.grad_params["kernel"]
    grads["head.bias"] = head.grad_params["bias"]
    g = ops.dropout_backward(cache["dropout"], head.grad_input)

    g_deep_up, g_skip, rsd_grads = rsd_block_backward(cache["rsd"], g)
    for k, v in rsd_grads.items():
        grads[f"rsd.{k}"] = v
    g = ops.bilinear_upsample_backward(cache["up_deep"], g_deep_up)

    for i in range(config.encoder_stages, 0, -1):
        if i == config.rsd_skip_stage:
            g = g + g_skip
        g, stage_grads = _cbr_backward(cache[f"enc{i}"], g)
        for k, v in stage_grads.items():
            grads[f"enc{i}.{k}"] = v
    _, stem_grads = _cbr_backward(cache["stem"], g)
    for k, v in stem_grads.items():
        grads[f"stem.{k}"] = v
    return grads


def predict_mask(params, images):
    """Hard per-pixel decision: foreground wins only on a strict majority,
    so an exact tie maps to background (channel 0)."""
    probs = forward(params, images, mode="inference")
    if params.config.num_output_channels == 2:
        return (probs[:, 1] > probs[:, 0]).astype(np.float64)
    return np.argmax(probs, axis=1).astype(np.float64)


def reinit_head(params, num_output_channels, rng):
    """Fresh binary (or N-way) head on top of otherwise untouched weights."""
    config = dataclasses.replace(params.config,
                                 num_output_channels=num_output_channels)
    new = params.copy()
    new.config = config
    r = config.rsd_out_channels
    new.blocks["head"] = {
        "kernel": _he_conv(rng, num_output_channels, r, 1, 1),
        "bias": np.zeros(num_output_channels),
    }
    return new
