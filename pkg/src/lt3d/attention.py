"""Quadratic (reference) and factorized linear self-attention.

The linear form uses phi = softmax over the feature axis of each query row
and rho = softmax over the token axis of each key column, then evaluates
``phi(Q) @ (rho(K).T @ V)`` so the n x n similarity matrix never exists.
The quadratic form with ``softmax(Q K^T / sqrt(d))`` is kept as an oracle
and benchmark baseline only.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, ResourceError

# n*n elements the quadratic path may materialize (float32 scores: 1 GiB).
DEFAULT_QUADRATIC_BUDGET = 2 ** 28


@dataclass
class AttentionParams:
    w_q: T.Tensor
    w_k: T.Tensor
    w_v: T.Tensor
    heads: int = 1

    def __post_init__(self):
        shapes = {self.w_q.shape, self.w_k.shape, self.w_v.shape}
        if len(shapes) != 1:
            raise DimensionError(f"projection shapes differ: {sorted(shapes)}")
        d_in, d = self.w_q.shape
        if d_in != d:
            raise DimensionError(f"projections must be d x d, got {self.w_q.shape}")
        if d % self.heads:
            raise DimensionError(f"d={d} is not divisible by heads={self.heads}")

    @property
    def d(self):
        return self.w_q.shape[0]

    @classmethod
    def init(cls, d, rng, heads=1, dtype=np.float32):
        bound = 1.0 / math.sqrt(d)
        mats = [T.Tensor(rng.uniform(-bound, bound, size=(d, d)), dtype=dtype, requires_grad=True)
                for _ in range(3)]
        return cls(*mats, heads=heads)


@dataclass
class TokenSequence:
    """Tokens ``[n, d]`` flattened from a ``(depth, h, w, c)`` feature volume."""

    tokens: T.Tensor
    origin_shape: tuple

    def __post_init__(self):
        if self.tokens.ndim != 2:
            raise DimensionError(f"tokens must be [n, d], got {self.tokens.shape}")
        n_spatial = math.prod(self.origin_shape[:-1])
        if n_spatial != self.tokens.shape[0] or self.origin_shape[-1] != self.tokens.shape[1]:
            raise DimensionError(f"tokens {self.tokens.shape} do not match origin shape {self.origin_shape}")

    @property
    def n(self):
        return self.tokens.shape[0]

    @property
    def d(self):
        return self.tokens.shape[1]

    @classmethod
    def from_volume(cls, feats):
        """Flatten ``feats[C, D, H, W]`` into tokens ``[D*H*W, C]``."""
        c, d, h, w = feats.shape
        tokens = T.transpose(T.reshape(feats, (c, d * h * w)), (1, 0))
        return cls(tokens, (d, h, w, c))

    def to_volume(self, values=None):
        """Inverse of :meth:`from_volume` for ``values`` shaped like the tokens."""
        values = self.tokens if values is None else values
        d, h, w, c = self.origin_shape
        return T.reshape(T.transpose(values, (1, 0)), (c, d, h, w))


def _as_tokens(x):
    return x.tokens if isinstance(x, TokenSequence) else x


def _project(x, p):
    xt = _as_tokens(x)
    if xt.shape[1] != p.d:
        raise DimensionError(f"token dimension {xt.shape[1]} does not match projections d={p.d}")
    return T.matmul(xt, p.w_q), T.matmul(xt, p.w_k), T.matmul(xt, p.w_v)


def _split_heads(t, heads):
    if heads == 1:
        return t
    n, d = t.shape
    return T.transpose(T.reshape(t, (n, heads, d // heads)), (1, 0, 2))


def _merge_heads(t, heads):
    if heads == 1:
        return t
    h, n, dh = t.shape
    return T.reshape(T.transpose(t, (1, 0, 2)), (n, h * dh))


def normalize_qk(q, k, scale=None):
    """Return ``(phi_q, rho_k)``: row-softmax of Q over features, column-softmax of K over tokens.

    Works on ``[n, d]`` or head-batched ``[h, n, d]`` inputs. ``scale``
    optionally multiplies Q and K before normalization.
    """
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"q and k feature dims differ: {q.shape} vs {k.shape}")
    if scale is not None:
        q, k = q * scale, k * scale
    return T.softmax(q, axis=-1), T.softmax(k, axis=-2)


def linear_attention(x, p, scale=None):
    """Factorized attention in O(n d^2) time and O(d^2) extra memory."""
    q, k, v = _project(x, p)
    q, k, v = (_split_heads(t, p.heads) for t in (q, k, v))
    phi_q, rho_k = normalize_qk(q, k, scale)
    context = T.matmul(T.transpose(rho_k, _swap_last(rho_k.ndim)), v)  # [.., d, d]
    return _merge_heads(T.matmul(phi_q, context), p.heads)


def quadratic_attention(x, p, budget=DEFAULT_QUADRATIC_BUDGET, temperature=None):
    """Dot-product attention ``softmax(Q K^T / sqrt(d)) V``; materializes n x n weights."""
    weights, v = _quadratic_weights(x, p, budget, temperature)
    return _merge_heads(T.matmul(weights, v), p.heads)


def _swap_last(ndim):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def _quadratic_weights(x, p, budget, temperature):
    n = _as_tokens(x).shape[0]
    if n * n * p.heads > budget:
        raise ResourceError(f"quadratic attention needs {n * n * p.heads} weights, budget is {budget}")
    q, k, v = _project(x, p)
    q, k, v = (_split_heads(t, p.heads) for t in (q, k, v))
    d_head = q.shape[-1]
    tau = math.sqrt(d_head) if temperature is None else temperature
    scores = T.matmul(q * (1.0 / tau), T.transpose(k, _swap_last(k.ndim)))
    return T.softmax(scores, axis=-1), v


def quadratic_similarity(x, p, budget=DEFAULT_QUADRATIC_BUDGET, temperature=None):
    """The materialized ``sim(Q_i, K_j)`` matrix of the quadratic variant."""
    return _quadratic_weights(x, p, budget, temperature)[0]


def linear_similarity(x, p, scale=None):
    """The factorized similarity ``phi(Q) rho(K)^T`` materialized as an n x n matrix (oracle only)."""
    q, k, _ = _project(x, p)
    q, k = _split_heads(q, p.heads), _split_heads(k, p.heads)
    phi_q, rho_k = normalize_qk(q, k, scale)
    return T.matmul(phi_q, T.transpose(rho_k, _swap_last(rho_k.ndim)))


def materialized_linear_attention(x, p, scale=None):
    """``(phi(Q) rho(K)^T) V`` evaluated in the quadratic order; reference for the factorized path."""
    _, _, v = _project(x, p)
    v = _split_heads(v, p.heads)
    return _merge_heads(T.matmul(linear_similarity(x, p, scale), v), p.heads)
