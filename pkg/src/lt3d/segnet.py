"""Encoder-decoder segmentation network with dynamic linear-attention skips.

Layout of one forward pass (levels = L, channels double per level)::

    volume -> patch embedding -> enc0 -> enc1 ... enc{L-1}
    enc{L-1} -> head{L-1} (first mask)
    for l = L-2 .. 0:
        up    = resize(conv1x1(dec{l+1}))
        skip  = dynamic_skip_block(enc{l}, mask{l+1})
        dec{l} = act(conv3(up + skip))
        mask{l} = head{l}(dec{l})            (l > 0)
    dec0 -> 1x1x1 conv + pixel shuffle -> final probability

The deeper mask gates the skip features, picks the ROI for resampling, and
linear attention runs on the resampled tokens before they are mapped back.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .attention import AttentionParams, TokenSequence, linear_attention
from .errors import ContractError, DimensionError
from .sampler import SamplerConfig, build_sampling_plan, resample_forward, resample_inverse, roi_from_mask


@dataclass
class NetworkConfig:
    levels: int = 4
    base_channels: int = 16
    embed_patch: tuple = (1, 2, 2)  # (depth, height, width)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    attention: tuple | None = None  # per skip level 0..levels-2; None means all on
    heads: int = 1
    activation: str = "relu"
    gate_floor: float = 0.1
    residual: bool = True
    depth_min_for_downsample: int = 8
    binary_threshold: float = 0.5
    zero_init_heads: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        self.embed_patch = tuple(int(p) for p in self.embed_patch)
        if isinstance(self.sampler, dict):
            self.sampler = SamplerConfig(**self.sampler)
        if self.attention is None:
            self.attention = (True,) * (self.levels - 1)
        self.attention = tuple(bool(a) for a in self.attention)
        if self.levels < 2:
            raise ContractError("levels must be >= 2")
        if len(self.attention) != self.levels - 1:
            raise ContractError(f"attention needs {self.levels - 1} flags, got {len(self.attention)}")
        if len(self.embed_patch) != 3 or min(self.embed_patch) < 1:
            raise ContractError(f"embed_patch must be 3 positive ints, got {self.embed_patch}")
        if self.activation not in _ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")
        if self.dtype not in ("float32", "float64"):
            raise ContractError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if not 0 <= self.gate_floor <= 1:
            raise ContractError("gate_floor must lie in [0, 1]")

    def channels(self, level):
        return self.base_channels * 2 ** level

    def attention_dims(self):
        """Token dimension d at each skip level (equal to that level's channel count)."""
        return tuple(self.channels(l) for l in range(self.levels - 1))

    def to_dict(self):
        d = asdict(self)
        d["embed_patch"] = list(self.embed_patch)
        d["attention"] = list(self.attention)
        return d


_ACTIVATIONS = {"relu": T.relu, "gelu": T.gelu}


@dataclass
class StagePredictions:
    """Per-level masks (highest resolution first), the final mask and diagnostics."""

    stage_probs: list
    final_prob: T.Tensor
    final_binary: np.ndarray
    attention_tokens: list = field(default_factory=list)

    def all_probs(self):
        """Stage masks followed by the final probability: the loss and uncertainty inputs."""
        return list(self.stage_probs) + [self.final_prob]


# -- geometry ------------------------------------------------------------------

def level_shapes(cfg, spatial):
    """Spatial (D, H, W) extent at every encoder level; raises on indivisible input."""
    d, h, w = (int(s) for s in spatial)
    pd, ph, pw = cfg.embed_patch
    for name, n, p in (("depth", d, pd), ("height", h, ph), ("width", w, pw)):
        if n % p:
            raise DimensionError(f"{name} extent {n} is not divisible by embedding patch {p}")
    shape = [d // pd, h // ph, w // pw]
    shapes = [tuple(shape)]
    for _ in range(1, cfg.levels):
        for name, ax in (("height", 1), ("width", 2)):
            if shape[ax] % 2:
                raise DimensionError(
                    f"{name} extent {spatial[ax]} is not divisible by the total downsampling factor "
                    f"{cfg.embed_patch[ax] * 2 ** (cfg.levels - 1)}")
            shape[ax] //= 2
        if shape[0] >= cfg.depth_min_for_downsample:
            if shape[0] % 2:
                raise DimensionError(f"depth extent {spatial[0]} cannot be halved at every level")
            shape[0] //= 2
        shapes.append(tuple(shape))
    return shapes


def _depth_strides(cfg, spatial):
    shapes = level_shapes(cfg, spatial)
    return [1 if shapes[l][0] == shapes[l - 1][0] else 2 for l in range(1, cfg.levels)]


# -- parameters ------------------------------------------------------------------

def param_shapes(cfg):
    """Ordered mapping of parameter name -> shape."""
    c = cfg.channels
    L = cfg.levels
    P = math.prod(cfg.embed_patch)
    shapes = {
        "embed.w": (c(0), 1) + cfg.embed_patch, "embed.b": (c(0),),
        "enc0.w": (c(0), c(0), 3, 3, 3), "enc0.b": (c(0),),
    }
    for l in range(1, L):
        shapes[f"enc{l}.down.w"] = (c(l), c(l - 1), 3, 3, 3)
        shapes[f"enc{l}.down.b"] = (c(l),)
        shapes[f"enc{l}.conv.w"] = (c(l), c(l), 3, 3, 3)
        shapes[f"enc{l}.conv.b"] = (c(l),)
    shapes[f"head{L - 1}.w"] = (1, c(L - 1), 1, 1, 1)
    shapes[f"head{L - 1}.b"] = (1,)
    for l in range(L - 2, -1, -1):
        shapes[f"dec{l}.up.w"] = (c(l), c(l + 1), 1, 1, 1)
        shapes[f"dec{l}.up.b"] = (c(l),)
        if cfg.attention[l]:
            for m in ("wq", "wk", "wv"):
                shapes[f"skip{l}.{m}"] = (c(l), c(l))
        shapes[f"dec{l}.conv.w"] = (c(l), c(l), 3, 3, 3)
        shapes[f"dec{l}.conv.b"] = (c(l),)
        if l > 0:
            shapes[f"head{l}.w"] = (1, c(l), 1, 1, 1)
            shapes[f"head{l}.b"] = (1,)
    shapes["out.w"] = (P, c(0), 1, 1, 1)
    shapes["out.b"] = (P,)
    return shapes


def param_count(cfg):
    return sum(math.prod(s) for s in param_shapes(cfg).values())


def init_params(cfg, seed):
    """Deterministic parameter set: fan-in uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    dtype = np.dtype(cfg.dtype)
    params = {}
    for name, shape in param_shapes(cfg).items():
        is_head = name.startswith("head") or name.startswith("out.")
        if name.endswith(".b"):
            arr = np.zeros(shape)
        elif len(shape) == 2:
            bound = 1.0 / math.sqrt(shape[0])
            arr = rng.uniform(-bound, bound, size=shape)
        else:
            fan_in = math.prod(shape[1:])
            if is_head and cfg.zero_init_heads:
                arr = np.zeros(shape)
            else:
                # He-uniform for hidden convolutions, unit-gain for mask heads
                bound = math.sqrt((3.0 if is_head else 6.0) / fan_in)
                arr = rng.uniform(-bound, bound, size=shape)
        params[name] = T.Tensor(arr, dtype=dtype, requires_grad=True)
    return params


def _attention_params(params, level, cfg):
    if not cfg.attention[level]:
        return None
    return AttentionParams(params[f"skip{level}.wq"], params[f"skip{level}.wk"],
                           params[f"skip{level}.wv"], heads=cfg.heads)


# -- blocks ----------------------------------------------------------------------

def dynamic_skip_block(skip_feats, deeper_mask, attn, cfg, trace=None):
    """Gate skip features by the deeper mask, attend over ROI-resampled tokens, map back.

    ``attn`` is an :class:`AttentionParams` or None (gating only). Output has
    the shape of ``skip_feats``.
    """
    c, d, h, w = skip_feats.shape
    if deeper_mask.ndim != 4 or deeper_mask.shape[0] != 1:
        raise DimensionError(f"deeper_mask must be [1,D,H,W], got {deeper_mask.shape}")
    if any(m > s for m, s in zip(deeper_mask.shape[1:], (d, h, w))):
        raise DimensionError(f"deeper_mask {deeper_mask.shape} exceeds skip resolution {skip_feats.shape}")
    mask = T.trilinear_resize(deeper_mask, (d, h, w))
    floor = cfg.gate_floor
    gated = skip_feats * (mask * (1.0 - floor) + floor)
    if attn is None:
        return gated
    roi = roi_from_mask(mask.data[0], cfg.sampler.threshold)
    plan = build_sampling_plan(roi, (h, w), cfg.sampler)
    seq = TokenSequence.from_volume(resample_forward(gated, plan))
    attended = seq.to_volume(linear_attention(seq, attn))
    back = resample_inverse(attended, plan, (h, w))
    if trace is not None:
        trace.append({"level_shape": (d, h, w), "tokens": seq.n, "full_tokens": d * h * w,
                      "roi": roi, "plan": plan})
    return gated + back if cfg.residual else back


def _pixel_shuffle(x, patch):
    pd, ph, pw = patch
    p, d, h, w = x.shape
    if p != pd * ph * pw:
        raise DimensionError(f"pixel shuffle needs {pd * ph * pw} channels, got {p}")
    y = T.reshape(x, (pd, ph, pw, d, h, w))
    y = T.transpose(y, (3, 0, 4, 1, 5, 2))
    return T.reshape(y, (1, d * pd, h * ph, w * pw))


def _as_input(volume, dtype):
    if not isinstance(volume, T.Tensor):
        volume = np.asarray(volume)
        if volume.ndim == 3:
            volume = volume[None]
        volume = T.Tensor(volume, dtype=dtype)
    elif volume.ndim == 3:
        volume = T.reshape(volume, (1,) + volume.shape)
    if volume.ndim != 4 or volume.shape[0] != 1:
        raise DimensionError(f"volume must be [1,D,H,W], got {volume.shape}")
    if volume.dtype != dtype:
        volume = T.Tensor(volume.data, dtype=dtype)
    return volume


def forward(volume, params, cfg):
    """Run the network on ``volume[1, D, H, W]`` and return all stage predictions."""
    dtype = np.dtype(cfg.dtype)
    x = _as_input(volume, dtype)
    spatial = x.shape[1:]
    shapes = level_shapes(cfg, spatial)
    dstrides = _depth_strides(cfg, spatial)
    act = _ACTIVATIONS[cfg.activation]
    p = params
    L = cfg.levels

    h = T.conv3d(x, p["embed.w"], p["embed.b"], stride=cfg.embed_patch)
    h = act(T.conv3d(h, p["enc0.w"], p["enc0.b"], padding=1))
    feats = [h]
    for l in range(1, L):
        h = act(T.conv3d(h, p[f"enc{l}.down.w"], p[f"enc{l}.down.b"], stride=(dstrides[l - 1], 2, 2), padding=1))
        h = act(T.conv3d(h, p[f"enc{l}.conv.w"], p[f"enc{l}.conv.b"], padding=1))
        feats.append(h)

    dec = feats[-1]
    mask = T.sigmoid(T.conv3d(dec, p[f"head{L - 1}.w"], p[f"head{L - 1}.b"]))
    stage_probs = [mask]
    trace = []
    for l in range(L - 2, -1, -1):
        up = T.trilinear_resize(T.conv3d(dec, p[f"dec{l}.up.w"], p[f"dec{l}.up.b"]), shapes[l])
        skip = dynamic_skip_block(feats[l], mask, _attention_params(p, l, cfg), cfg, trace)
        dec = act(T.conv3d(up + skip, p[f"dec{l}.conv.w"], p[f"dec{l}.conv.b"], padding=1))
        if l > 0:
            mask = T.sigmoid(T.conv3d(dec, p[f"head{l}.w"], p[f"head{l}.b"]))
            stage_probs.append(mask)

    logits = _pixel_shuffle(T.conv3d(dec, p["out.w"], p["out.b"]), cfg.embed_patch)
    final_prob = T.sigmoid(logits)
    binary = (final_prob.data[0] > cfg.binary_threshold).astype(np.uint8)
    return StagePredictions(stage_probs[::-1], final_prob, binary, trace)


def predict(volume, params, cfg):
    with T.no_grad():
        return forward(volume, params, cfg)
