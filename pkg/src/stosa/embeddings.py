"""Stochastic embedding tables and sequence lookup."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .data import PAD

INIT_STD = 0.02


class EmbeddingLookupError(IndexError):
    pass


def activate_covariance(raw):
    """ELU(raw) + 1, mapping reals onto (0, inf).

    Works on numpy arrays and on autograd tensors.
    """
    if isinstance(raw, ag.Tensor):
        if not np.all(np.isfinite(raw.data)):
            raise FloatingPointError("non-finite covariance pre-activation")
        return ag.elu(raw) + 1.0
    raw = np.asarray(raw, dtype=float) if not isinstance(raw, np.ndarray) else raw
    if not np.all(np.isfinite(raw)):
        raise FloatingPointError("non-finite covariance pre-activation")
    return np.where(raw > 0, raw + 1.0, np.exp(np.minimum(raw, 0.0)))


@dataclass
class StochasticTables:
    item_mean: np.ndarray      # (|V|+1, d_half), row 0 is padding
    item_cov_raw: np.ndarray   # (|V|+1, d_half), pre-activation
    pos_mean: np.ndarray       # (n, d_half)
    pos_cov_raw: np.ndarray    # (n, d_half)

    @classmethod
    def initialize(cls, n_items, n, d_half, rng, dtype=np.float64):
        def normal(*shape):
            return (rng.standard_normal(shape) * INIT_STD).astype(dtype)
        return cls(normal(n_items + 1, d_half), normal(n_items + 1, d_half),
                   normal(n, d_half), normal(n, d_half))

    @property
    def d_half(self):
        return self.item_mean.shape[1]

    def item_covariance(self):
        return activate_covariance(self.item_cov_raw)


@dataclass
class GaussianBatch:
    """Means and positive diagonal covariances for a ``(B, n)`` grid of positions."""

    mean: object   # (B, n, d_half) array or Tensor
    cov: object
    mask: np.ndarray  # (B, n) bool

    def __post_init__(self):
        if tuple(self.mean.shape) != tuple(self.cov.shape):
            raise ValueError("mean and covariance shapes differ")
        if tuple(self.mean.shape[:2]) != tuple(self.mask.shape):
            raise ValueError("mask shape does not match the batch")


def lookup_sequence(item_mean, item_cov_raw, pos_mean, pos_cov_raw, inputs, mask=None):
    """Sequence embedding: item row plus positional row, covariance activated after the sum.

    Table arguments may be arrays or tensors; the result carries tensors.
    """
    inputs = np.asarray(inputs)
    if inputs.ndim == 1:
        inputs = inputs[None, :]
    n_rows = item_mean.shape[0]
    if inputs.min(initial=0) < 0 or inputs.max(initial=0) >= n_rows:
        raise EmbeddingLookupError(f"item id out of range [0, {n_rows})")
    n = inputs.shape[1]
    if n > pos_mean.shape[0]:
        raise EmbeddingLookupError(f"window length {n} exceeds positional table ({pos_mean.shape[0]})")
    tables = [t if isinstance(t, ag.Tensor) else ag.Tensor(t)
              for t in (item_mean, item_cov_raw, pos_mean, pos_cov_raw)]
    m_mu, m_cov, p_mu, p_cov = tables
    mean = ag.take_rows(m_mu, inputs) + p_mu[:n]
    cov = activate_covariance(ag.take_rows(m_cov, inputs) + p_cov[:n])
    if mask is None:
        mask = inputs != PAD
    return GaussianBatch(mean, cov, np.asarray(mask, dtype=bool).reshape(inputs.shape))
