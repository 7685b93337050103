"""Wasserstein self-attention over diagonal-Gaussian sequence embeddings.

Distances throughout are *squared* 2-Wasserstein distances between diagonal
Gaussians::

    W2^2(N(m1, c1), N(m2, c2)) = ||m1 - m2||^2 + ||sqrt(c1) - sqrt(c2)||^2

where ``c`` holds the diagonal variances.
"""
from __future__ import annotations

import numpy as np

from . import autograd as ag
from .embeddings import GaussianBatch, activate_covariance

SOFTMAX = "softmax"
PAPER_RATIO = "paper-ratio"
NORMALIZATION_MODES = (SOFTMAX, PAPER_RATIO)
LN_EPS = 1e-8

PROJECTIONS = ("wq_mean", "wk_mean", "wv_mean", "wq_cov", "wk_cov", "wv_cov")


class NormalizationError(ArithmeticError):
    pass


def w2_squared_diag(mu1, cov1, mu2, cov2):
    """Squared W2 between diagonal Gaussians, reduced over the last axis."""
    mu1, cov1, mu2, cov2 = (np.asarray(a, dtype=float) for a in (mu1, cov1, mu2, cov2))
    if np.any(cov1 <= 0) or np.any(cov2 <= 0):
        raise ValueError("covariance entries must be strictly positive")
    dm = mu1 - mu2
    ds = np.sqrt(cov1) - np.sqrt(cov2)
    return np.sum(dm * dm, axis=-1) + np.sum(ds * ds, axis=-1)


def _sq_cross(a, b):
    """||a_t - b_k||^2 for every (t, k) pair via the norm expansion."""
    aa = (a * a).sum(axis=-1, keepdims=True)                   # (..., n, 1)
    bb = ag.swapaxes((b * b).sum(axis=-1, keepdims=True), -1, -2)  # (..., 1, m)
    return aa + bb - 2.0 * (a @ ag.swapaxes(b, -1, -2))


def distance_matrix(q_mean, q_cov, k_mean, k_cov):
    """Pairwise squared W2 between query and key Gaussians.

    Inputs have shape ``(..., n, d)``; the output ``(..., n, m)`` holds the
    distance between query ``t`` and key ``k`` at ``[..., t, k]``. Cost is a
    handful of batched matrix products, i.e. O(n^2 d) per sequence.
    """
    q_mean, q_cov, k_mean, k_cov = (ag.as_tensor(x) for x in (q_mean, q_cov, k_mean, k_cov))
    if q_mean.shape != q_cov.shape or k_mean.shape != k_cov.shape:
        raise ValueError("mean/covariance shape mismatch")
    if q_mean.shape[:-2] != k_mean.shape[:-2] or q_mean.shape[-1] != k_mean.shape[-1]:
        raise ValueError(f"incompatible query {q_mean.shape} and key {k_mean.shape} shapes")
    return _sq_cross(q_mean, k_mean) + _sq_cross(ag.sqrt(q_cov), ag.sqrt(k_cov))


def attention_mask(mask):
    """``valid[b, t, k]`` is true when key ``k`` is real and ``k <= t``."""
    mask = np.asarray(mask, dtype=bool)
    n = mask.shape[-1]
    causal = np.tril(np.ones((n, n), dtype=bool))
    return causal & mask[..., None, :]


def normalize_attention(dist, mask, mode=SOFTMAX):
    """Turn a ``(B, H, n, n)`` distance tensor into causal attention weights.

    ``softmax`` weights keys by ``exp(-dist)``; ``paper-ratio`` divides the
    negative distances by their row sum. Both zero out future and padding keys.
    """
    dist = ag.as_tensor(dist)
    valid = attention_mask(mask)
    if valid.ndim < dist.ndim:
        valid = np.expand_dims(valid, tuple(range(1, 1 + dist.ndim - valid.ndim)))
    valid = np.broadcast_to(valid, dist.shape)
    if mode == SOFTMAX:
        return ag.softmax_masked(-dist, valid)
    if mode == PAPER_RATIO:
        scores = ag.masked_fill(-dist, ~valid, 0.0)
        denom = scores.sum(axis=-1, keepdims=True)
        has_key = valid.any(axis=-1, keepdims=True)
        if np.any(has_key & (denom.data == 0)):
            raise NormalizationError("attention row sums to zero (all distances are 0)")
        safe = denom + (~has_key).astype(dist.dtype)
        return scores / safe
    raise ValueError(f"unknown normalization mode {mode!r}")


def aggregate(weights, v_mean, v_cov):
    """Mean rows mix linearly; covariance rows mix with squared weights."""
    weights = ag.as_tensor(weights)
    return weights @ ag.as_tensor(v_mean), (weights * weights) @ ag.as_tensor(v_cov)


def dropout(x, rate, rng):
    if rng is None or rate <= 0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * keep


def ffn(x, w1, b1, w2, b2):
    return ag.elu(x @ w1 + b1) @ w2 + b2


def ffn_block(z_mean, z_cov, p, rate=0.0, rng=None, prefix=""):
    """Position-wise feed-forward with residual, for both Gaussian parameters.

    Mean: ``z + Dropout(FFN(LayerNorm(z)))``.
    Covariance: ``ELU(z + Dropout(FFN(LayerNorm(z)))) + 1``.
    """
    def path(z, tag):
        h = ag.layer_norm(z, p[f"{prefix}ln_{tag}_gain"], p[f"{prefix}ln_{tag}_bias"], LN_EPS)
        h = ffn(h, p[f"{prefix}ffn_{tag}_w1"], p[f"{prefix}ffn_{tag}_b1"],
                p[f"{prefix}ffn_{tag}_w2"], p[f"{prefix}ffn_{tag}_b2"])
        return z + dropout(h, rate, rng)

    return path(z_mean, "mean"), activate_covariance(path(z_cov, "cov"))


def _split_heads(x, n_heads):
    b, n, d = x.shape
    return x.reshape(b, n, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, n, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * d)


def wasserstein_layer(x, p, n_heads=1, mode=SOFTMAX, rate=0.0, rng=None,
                      attention_dropout=True, residual=True, prefix=""):
    """One Wasserstein self-attention block; returns ``(GaussianBatch, weights)``.

    With ``residual`` the layer input is added to the aggregated Gaussian
    (means add, covariances add) before the feed-forward block.
    """
    def proj_mean(name):
        return _split_heads(x.mean @ p[prefix + name], n_heads)

    def proj_cov(name):
        return _split_heads(activate_covariance(x.cov @ p[prefix + name]), n_heads)

    q_mu, k_mu, v_mu = proj_mean("wq_mean"), proj_mean("wk_mean"), proj_mean("wv_mean")
    q_cov, k_cov, v_cov = proj_cov("wq_cov"), proj_cov("wk_cov"), proj_cov("wv_cov")

    dist = distance_matrix(q_mu, q_cov, k_mu, k_cov)
    weights = normalize_attention(dist, x.mask, mode)
    applied = dropout(weights, rate, rng) if attention_dropout else weights
    z_mu, z_cov = aggregate(applied, v_mu, v_cov)
    z_mu, z_cov = _merge_heads(z_mu), _merge_heads(z_cov)
    if residual:
        z_mu, z_cov = z_mu + x.mean, z_cov + x.cov
    out_mu, out_cov = ffn_block(z_mu, z_cov, p, rate, rng, prefix)
    return GaussianBatch(out_mu, out_cov, x.mask), weights


def encoder_forward(layers, x, n_heads=1, mode=SOFTMAX, rate=0.0, rng=None,
                    attention_dropout=True, residual=True):
    """Stack of Wasserstein layers. ``layers`` is a list of parameter mappings.

    Returns the final :class:`GaussianBatch` and the per-layer attention weights.
    """
    if not layers:
        raise ValueError("need at least one layer")
    attn = []
    for p in layers:
        x, w = wasserstein_layer(x, p, n_heads, mode, rate, rng, attention_dropout, residual)
        attn.append(w)
    return x, attn


def init_layer(d_half, rng, dtype=np.float64):
    """Parameters for one layer: six projections, two FFNs, two LayerNorms."""
    std = np.sqrt(1.0 / d_half)

    def square():
        return (rng.standard_normal((d_half, d_half)) * std).astype(dtype)

    p = {name: square() for name in PROJECTIONS}
    for tag in ("mean", "cov"):
        p[f"ffn_{tag}_w1"] = square()
        p[f"ffn_{tag}_b1"] = np.zeros(d_half, dtype=dtype)
        p[f"ffn_{tag}_w2"] = square()
        p[f"ffn_{tag}_b2"] = np.zeros(d_half, dtype=dtype)
        p[f"ln_{tag}_gain"] = np.ones(d_half, dtype=dtype)
        p[f"ln_{tag}_bias"] = np.zeros(d_half, dtype=dtype)
    return p
