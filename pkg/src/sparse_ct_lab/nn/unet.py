"""Dual-frame U-Net assembled from the manual-gradient layer primitives.

Architecture: `depth` encoder blocks (two conv3x3+BN+ReLU each) with 2x2
max pooling after every block, a two-conv bottleneck, and a mirrored
decoder using nearest-neighbor 2x upsampling and classic concat skips
from each encoder block output. The dual-frame variant additionally
routes each *pooled* encoder output into the decoder tensor of matching
resolution right before it is upsampled, either added through a 1x1
channel-matching projection (``bridge_combine="add"``) or concatenated
(``"concat"``). The standard variant drops those bridges. A final 1x1
convolution maps back to one channel.

Parameters live in a flat ``dict[str, np.ndarray]`` whose insertion order
(execution order) is the documented checkpoint layout. Batch-norm running
statistics are stored alongside the learnables under ``.running_mean`` /
``.running_var`` keys; they are state, not parameters, and are excluded
from ``count_params``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers as L

VARIANTS = ("dual-frame", "standard")
BRIDGE_COMBINE = ("add", "concat")


class ShapeError(ValueError):
    """Tensor/parameter shape inconsistent with the configuration."""


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 4
    base_channels: int = 64
    variant: str = "dual-frame"
    bridge_combine: str = "add"
    input_size: int = 512
    in_channels: int = 1
    out_channels: int = 1
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.depth < 1:
            raise ShapeError("depth must be >= 1")
        if self.base_channels < 1:
            raise ShapeError("base_channels must be >= 1")
        if self.variant not in VARIANTS:
            raise ShapeError(f"variant must be one of {VARIANTS}")
        if self.bridge_combine not in BRIDGE_COMBINE:
            raise ShapeError(f"bridge_combine must be one of {BRIDGE_COMBINE}")
        if self.input_size % (1 << self.depth) != 0:
            raise ShapeError(
                f"input_size {self.input_size} not divisible by 2^{self.depth}")

    def enc_channels(self) -> list[int]:
        return [self.base_channels << i for i in range(self.depth)]

    @property
    def bottleneck_channels(self) -> int:
        return self.base_channels << self.depth


def _block_shapes(prefix, c_in, c_out):
    shapes = []
    for idx, (ci, co) in enumerate(((c_in, c_out), (c_out, c_out)), start=1):
        shapes.append((f"{prefix}.conv{idx}.w", (co, ci, 3, 3)))
        shapes.append((f"{prefix}.conv{idx}.b", (co,)))
        shapes.append((f"{prefix}.bn{idx}.gamma", (co,)))
        shapes.append((f"{prefix}.bn{idx}.beta", (co,)))
        shapes.append((f"{prefix}.bn{idx}.running_mean", (co,)))
        shapes.append((f"{prefix}.bn{idx}.running_var", (co,)))
    return shapes


def _decoder_in_channels(cfg: UNetConfig, i: int) -> tuple[int, int]:
    """(pre-upsample channels, concat input channels) for decoder level i."""
    enc = cfg.enc_channels()
    above = cfg.bottleneck_channels if i == cfg.depth - 1 else enc[i + 1]
    if cfg.variant == "dual-frame" and cfg.bridge_combine == "concat":
        pre_up = above + enc[i]
    else:
        pre_up = above  # additive bridge projects pooled features to `above`
    return pre_up, pre_up + enc[i]


def param_plan(cfg: UNetConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) pairs; the order is the checkpoint layout."""
    enc = cfg.enc_channels()
    shapes = []
    c_in = cfg.in_channels
    for i, c in enumerate(enc):
        shapes += _block_shapes(f"enc{i}", c_in, c)
        c_in = c
    shapes += _block_shapes("bott", enc[-1], cfg.bottleneck_channels)
    for i in reversed(range(cfg.depth)):
        above = cfg.bottleneck_channels if i == cfg.depth - 1 else enc[i + 1]
        if cfg.variant == "dual-frame" and cfg.bridge_combine == "add" \
                and enc[i] != above:
            shapes.append((f"bridge{i}.proj.w", (above, enc[i], 1, 1)))
            shapes.append((f"bridge{i}.proj.b", (above,)))
        _, cat_ch = _decoder_in_channels(cfg, i)
        shapes += _block_shapes(f"dec{i}", cat_ch, enc[i])
    shapes.append(("head.w", (cfg.out_channels, enc[0], 1, 1)))
    shapes.append(("head.b", (cfg.out_channels,)))
    return shapes


def is_learnable(name: str) -> bool:
    return not name.endswith((".running_mean", ".running_var"))


def count_params(cfg: UNetConfig) -> int:
    """Learnable scalars: kernels, biases, and BN scale/shift."""
    return sum(int(np.prod(shape)) for name, shape in param_plan(cfg)
               if is_learnable(name))


def init_unet(cfg: UNetConfig, seed: int, dtype=np.float32,
              head_init: str = "zero") -> dict[str, np.ndarray]:
    """He fan-in initialization; BN starts as the identity transform.

    The final 1x1 convolution defaults to zero so the untrained network
    predicts the zero residual (identity postprocessing); pass
    ``head_init="he"`` for a fully random head.
    """
    if head_init not in ("zero", "he"):
        raise ValueError(f"head_init must be 'zero' or 'he', got {head_init!r}")
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in param_plan(cfg):
        if name.endswith(".w"):
            if name == "head.w" and head_init == "zero":
                params[name] = np.zeros(shape, dtype=dtype)
                continue
            fan_in = int(np.prod(shape[1:]))
            params[name] = (rng.normal(size=shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
        elif name.endswith((".b", ".beta", ".running_mean")):
            params[name] = np.zeros(shape, dtype=dtype)
        else:  # gamma, running_var
            params[name] = np.ones(shape, dtype=dtype)
    return params


def check_params(params: dict, cfg: UNetConfig) -> None:
    plan = param_plan(cfg)
    if list(params) != [name for name, _ in plan]:
        raise ShapeError("parameter names do not match the configuration")
    for name, shape in plan:
        if params[name].shape != shape:
            raise ShapeError(f"{name}: shape {params[name].shape} != {shape}")
        if name.endswith(".running_var") and np.any(params[name] < 0):
            raise ShapeError(f"{name}: negative variance")


# ---------------------------------------------------------------------------
# forward / backward


def _block_forward(params, cfg, prefix, x, mode):
    caches = []
    h = x
    for idx in (1, 2):
        h, conv_cache = L.conv3x3_forward(
            h, params[f"{prefix}.conv{idx}.w"], params[f"{prefix}.conv{idx}.b"])
        gamma = params[f"{prefix}.bn{idx}.gamma"]
        beta = params[f"{prefix}.bn{idx}.beta"]
        rm_key = f"{prefix}.bn{idx}.running_mean"
        rv_key = f"{prefix}.bn{idx}.running_var"
        if mode == "train":
            h, bn_cache, new_rm, new_rv = L.bn_forward_train(
                h, gamma, beta, params[rm_key], params[rv_key],
                cfg.bn_momentum, cfg.bn_eps)
            params[rm_key] = new_rm
            params[rv_key] = new_rv
        else:
            h = L.bn_forward_eval(h, gamma, beta, params[rm_key], params[rv_key],
                                  cfg.bn_eps)
            bn_cache = None
        h, relu_cache = L.relu_forward(h)
        caches.append((conv_cache, bn_cache, relu_cache))
    return h, caches


def _block_backward(params, grads, prefix, caches, dout):
    dh = dout
    for idx in (2, 1):
        conv_cache, bn_cache, relu_cache = caches[idx - 1]
        dh = L.relu_backward(relu_cache, dh)
        dh, dgamma, dbeta = L.bn_backward(bn_cache, dh)
        grads[f"{prefix}.bn{idx}.gamma"] = dgamma
        grads[f"{prefix}.bn{idx}.beta"] = dbeta
        dh, dw, db = L.conv3x3_backward(conv_cache, dh)
        grads[f"{prefix}.conv{idx}.w"] = dw
        grads[f"{prefix}.conv{idx}.b"] = db
    return dh


def _bridge_forward(params, cfg, i, dec_in, pooled):
    """Combine the level-i pooled encoder output into the decoder path."""
    if cfg.bridge_combine == "concat":
        out, split = L.concat_forward(dec_in, pooled)
        return out, ("concat", split)
    key = f"bridge{i}.proj.w"
    if key in params:
        proj, proj_cache = L.conv1x1_forward(pooled, params[key],
                                             params[f"bridge{i}.proj.b"])
        return dec_in + proj, ("proj", proj_cache)
    return dec_in + pooled, ("add", None)


def _bridge_backward(params, grads, i, cache, dout):
    kind, payload = cache
    if kind == "concat":
        return L.concat_backward(payload, dout)
    if kind == "proj":
        dpooled, dw, db = L.conv1x1_backward(payload, dout)
        grads[f"bridge{i}.proj.w"] = dw
        grads[f"bridge{i}.proj.b"] = db
        return dout, dpooled
    return dout, dout


def unet_forward(params, cfg: UNetConfig, x, mode="eval"):
    """Run the network; returns (residual_prediction, cache).

    Train mode normalizes with batch statistics and refreshes the running
    stats stored in `params`; eval mode uses the stored stats and yields a
    cache unsuitable for backprop.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1] != cfg.in_channels \
            or x.shape[2] != cfg.input_size or x.shape[3] != cfg.input_size:
        raise ShapeError(
            f"input shape {x.shape} != (N, {cfg.in_channels}, "
            f"{cfg.input_size}, {cfg.input_size})")

    cache = {"mode": mode, "enc": [], "pool": [], "bridge": {}, "cat": {}, "dec": {}}
    h = x
    pooled = []
    enc_out = []
    for i in range(cfg.depth):
        h, block_cache = _block_forward(params, cfg, f"enc{i}", h, mode)
        cache["enc"].append(block_cache)
        enc_out.append(h)
        h, pool_cache = L.maxpool2_forward(h)
        cache["pool"].append(pool_cache)
        pooled.append(h)

    h, cache["bott"] = _block_forward(params, cfg, "bott", h, mode)

    for i in reversed(range(cfg.depth)):
        if cfg.variant == "dual-frame":
            h, cache["bridge"][i] = _bridge_forward(params, cfg, i, h, pooled[i])
        h = L.upsample2_forward(h)
        h, cache["cat"][i] = L.concat_forward(h, enc_out[i])
        h, cache["dec"][i] = _block_forward(params, cfg, f"dec{i}", h, mode)

    out, cache["head"] = L.conv1x1_forward(h, params["head.w"], params["head.b"])
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite activations in forward pass")
    return out, cache


def unet_backward(params, cfg: UNetConfig, cache, dout):
    """Gradients for every learnable parameter, mirroring `params` keys."""
    if cache.get("mode") != "train":
        raise ValueError("backward requires a cache from a train-mode forward")
    grads: dict[str, np.ndarray] = {}

    dh, dw, db = L.conv1x1_backward(cache["head"], np.asarray(dout))
    grads["head.w"] = dw
    grads["head.b"] = db

    d_enc = [None] * cfg.depth
    d_pool = [None] * cfg.depth
    for i in range(cfg.depth):  # reverse of the decoder loop
        dh = _block_backward(params, grads, f"dec{i}", cache["dec"][i], dh)
        dh, d_skip = L.concat_backward(cache["cat"][i], dh)
        d_enc[i] = d_skip
        dh = L.upsample2_backward(dh)
        if cfg.variant == "dual-frame":
            dh, d_pooled = _bridge_backward(params, grads, i, cache["bridge"][i], dh)
            d_pool[i] = d_pooled

    dh = _block_backward(params, grads, "bott", cache["bott"], dh)
    for i in reversed(range(cfg.depth)):
        total = dh if d_pool[i] is None else dh + d_pool[i]
        d_eout = L.maxpool2_backward(cache["pool"][i], total)
        d_eout = d_eout + d_enc[i]
        dh = _block_backward(params, grads, f"enc{i}", cache["enc"][i], d_eout)

    ordered = {name: grads[name] for name, _ in param_plan(cfg) if name in grads}
    return ordered
