"""Full STOSA model and the dot-product attention baseline.

Both variants share one scoring contract: ``predict_scores`` returns values
where *smaller is better*, so evaluation code never needs to know which
encoder produced them.
"""
from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autograd as ag
from .embeddings import activate_covariance, lookup_sequence
from .wasserstein import (LN_EPS, SOFTMAX, NORMALIZATION_MODES, distance_matrix,
                          dropout, encoder_forward, init_layer)

STOSA = "stosa"
DOT_BASELINE = "dot"
VARIANTS = (STOSA, DOT_BASELINE)

CHECKPOINT_FORMAT = "stosa-checkpoint"
CHECKPOINT_VERSION = 1
INIT_STD = 0.02


class VariantError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    variant: str = STOSA
    d: int = 64              # total width; STOSA splits it into mean and covariance halves
    n: int = 50              # window length
    n_layers: int = 1
    n_heads: int = 1
    dropout: float = 0.3
    normalization: str = SOFTMAX
    attention_dropout: bool = True
    attention_residual: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise VariantError(f"unknown variant {self.variant!r}")
        if self.d % 2:
            raise ValueError("d must be even")
        width = self.d // 2 if self.variant == STOSA else self.d
        if width % self.n_heads:
            raise ValueError(f"width {width} not divisible by {self.n_heads} heads")
        if self.normalization not in NORMALIZATION_MODES:
            raise ValueError(f"unknown normalization {self.normalization!r}")
        if self.n < 1 or self.n_layers < 1:
            raise ValueError("n and n_layers must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def d_half(self):
        return self.d // 2


@dataclass
class ModelParams:
    config: ModelConfig
    n_items: int
    arrays: dict

    @property
    def variant(self):
        return self.config.variant

    def copy(self):
        return ModelParams(self.config, self.n_items, {k: v.copy() for k, v in self.arrays.items()})

    def astype(self, dtype):
        return ModelParams(self.config, self.n_items,
                           {k: v.astype(dtype) for k, v in self.arrays.items()})

    def layer(self, source, i):
        prefix = f"layers.{i}."
        return {k[len(prefix):]: v for k, v in source.items() if k.startswith(prefix)}

    def tensors(self, requires_grad=False):
        make = ag.parameter if requires_grad else ag.Tensor
        return {k: make(v) for k, v in self.arrays.items()}

    def n_parameters(self):
        return int(sum(v.size for v in self.arrays.values()))


def init_params(config, n_items, rng, dtype=np.float32):
    """Random initial parameters; embedding tables ~ N(0, 0.02^2)."""
    arrays = {}

    def normal(*shape):
        return (rng.standard_normal(shape) * INIT_STD).astype(dtype)

    if config.variant == STOSA:
        dh = config.d_half
        arrays["item_mean"] = normal(n_items + 1, dh)
        arrays["item_cov"] = normal(n_items + 1, dh)
        arrays["pos_mean"] = normal(config.n, dh)
        arrays["pos_cov"] = normal(config.n, dh)
        for i in range(config.n_layers):
            for k, v in init_layer(dh, rng, dtype).items():
                arrays[f"layers.{i}.{k}"] = v
    else:
        d = config.d
        std = np.sqrt(1.0 / d)
        arrays["item_emb"] = normal(n_items + 1, d)
        arrays["pos_emb"] = normal(config.n, d)
        for i in range(config.n_layers):
            for name in ("wq", "wk", "wv", "ffn_w1", "ffn_w2"):
                arrays[f"layers.{i}.{name}"] = (rng.standard_normal((d, d)) * std).astype(dtype)
            for name in ("ffn_b1", "ffn_b2", "ln_attn_bias", "ln_ffn_bias"):
                arrays[f"layers.{i}.{name}"] = np.zeros(d, dtype=dtype)
            for name in ("ln_attn_gain", "ln_ffn_gain"):
                arrays[f"layers.{i}.{name}"] = np.ones(d, dtype=dtype)
        arrays["ln_out_gain"] = np.ones(d, dtype=dtype)
        arrays["ln_out_bias"] = np.zeros(d, dtype=dtype)
    return ModelParams(config, n_items, arrays)


def expected_param_count(config, n_items):
    """Closed-form parameter count from the configuration alone."""
    rows = n_items + 1
    if config.variant == STOSA:
        dh = config.d_half
        per_layer = 6 * dh * dh + 2 * (2 * dh * dh + 2 * dh) + 2 * (2 * dh)
        return 2 * rows * dh + 2 * config.n * dh + config.n_layers * per_layer
    d = config.d
    per_layer = 3 * d * d + (2 * d * d + 2 * d) + 2 * (2 * d)
    return rows * d + config.n * d + config.n_layers * per_layer + 2 * d


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def stosa_forward(params, inputs, tensors=None, rng=None):
    """Encode windows into Gaussian states; returns ``(GaussianBatch, attention list)``.

    Dropout is active only when ``rng`` is given.
    """
    if params.variant != STOSA:
        raise VariantError("stosa_forward needs a STOSA model")
    cfg = params.config
    t = tensors if tensors is not None else params.tensors()
    x = lookup_sequence(t["item_mean"], t["item_cov"], t["pos_mean"], t["pos_cov"], inputs)
    layers = [params.layer(t, i) for i in range(cfg.n_layers)]
    return encoder_forward(layers, x, cfg.n_heads, cfg.normalization, cfg.dropout, rng,
                           cfg.attention_dropout, cfg.attention_residual)


def baseline_forward(params, inputs, tensors=None, rng=None):
    """Causal scaled dot-product self-attention encoder.

    Pre-LayerNorm queries with residual, point-wise ReLU FFN with residual,
    padding rows zeroed after each block and a final LayerNorm. Returns the
    ``(B, n, d)`` state tensor and per-layer attention weights.
    """
    if params.variant != DOT_BASELINE:
        raise VariantError("baseline_forward needs a DOT_BASELINE model")
    cfg = params.config
    t = tensors if tensors is not None else params.tensors()
    inputs = np.atleast_2d(np.asarray(inputs))
    if inputs.max(initial=0) > params.n_items or inputs.min(initial=0) < 0:
        raise IndexError("item id out of range")
    mask = inputs != 0
    keep = mask[..., None].astype(t["item_emb"].dtype)
    n = inputs.shape[1]
    x = (ag.take_rows(t["item_emb"], inputs) + t["pos_emb"][:n]) * keep
    x = dropout(x, cfg.dropout, rng)
    valid = np.tril(np.ones((n, n), dtype=bool)) & mask[:, None, None, :]
    h_count, dk = cfg.n_heads, cfg.d // cfg.n_heads
    attn = []
    for i in range(cfg.n_layers):
        p = params.layer(t, i)
        q_in = ag.layer_norm(x, p["ln_attn_gain"], p["ln_attn_bias"], LN_EPS)

        def heads(z):
            b = z.shape[0]
            return z.reshape(b, n, h_count, dk).transpose(0, 2, 1, 3)

        q, k, v = heads(q_in @ p["wq"]), heads(x @ p["wk"]), heads(x @ p["wv"])
        logits = (q @ ag.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dk))
        w = ag.softmax_masked(logits, np.broadcast_to(valid, logits.shape))
        attn.append(w)
        if cfg.attention_dropout:
            w = dropout(w, cfg.dropout, rng)
        z = (w @ v).transpose(0, 2, 1, 3).reshape(inputs.shape[0], n, cfg.d)
        x = q_in + z
        h = ag.layer_norm(x, p["ln_ffn_gain"], p["ln_ffn_bias"], LN_EPS)
        f = ag.relu(h @ p["ffn_w1"] + p["ffn_b1"]) @ p["ffn_w2"] + p["ffn_b2"]
        x = (h + dropout(f, cfg.dropout, rng)) * keep
    x = ag.layer_norm(x, t["ln_out_gain"], t["ln_out_bias"], LN_EPS)
    return x, attn


def encode(params, inputs, tensors=None, rng=None):
    if params.variant == STOSA:
        return stosa_forward(params, inputs, tensors, rng)
    return baseline_forward(params, inputs, tensors, rng)


def pair_distance(params, tensors, states, position_items):
    """Distance between each position's state and one item per position.

    ``states`` is the encoder output; ``position_items`` has shape ``(B, n)``.
    For STOSA this is squared W2 against the input tables, for the baseline the
    negated dot product.
    """
    ids = np.asarray(position_items)
    if params.variant == STOSA:
        mu = ag.take_rows(tensors["item_mean"], ids)
        cov = activate_covariance(ag.take_rows(tensors["item_cov"], ids))
        dm = states.mean - mu
        ds = ag.sqrt(states.cov) - ag.sqrt(cov)
        return (dm * dm).sum(axis=-1) + (ds * ds).sum(axis=-1)
    emb = ag.take_rows(tensors["item_emb"], ids)
    return -(states * emb).sum(axis=-1)


def item_distance(params, tensors, items_a, items_b):
    """Squared W2 between two sets of items from the input tables (STOSA only)."""
    ta, tb = np.asarray(items_a), np.asarray(items_b)
    mu_a = ag.take_rows(tensors["item_mean"], ta)
    mu_b = ag.take_rows(tensors["item_mean"], tb)
    sd_a = ag.sqrt(activate_covariance(ag.take_rows(tensors["item_cov"], ta)))
    sd_b = ag.sqrt(activate_covariance(ag.take_rows(tensors["item_cov"], tb)))
    dm, ds = mu_a - mu_b, sd_a - sd_b
    return (dm * dm).sum(axis=-1) + (ds * ds).sum(axis=-1)


def last_valid_position(mask):
    mask = np.atleast_2d(np.asarray(mask, dtype=bool))
    if not mask.any(axis=1).all():
        raise ValueError("window has no valid positions")
    n = mask.shape[1]
    return n - 1 - np.argmax(mask[:, ::-1], axis=1)


def final_states(params, inputs):
    """Encoder output at the last valid position of each window, as numpy arrays."""
    inputs = np.atleast_2d(np.asarray(inputs))
    last = last_valid_position(inputs != 0)
    rows = np.arange(inputs.shape[0])
    out, _ = encode(params, inputs)
    if params.variant == STOSA:
        return out.mean.data[rows, last], out.cov.data[rows, last]
    return out.data[rows, last], None


def predict_scores(params, inputs, batch_size=1024):
    """Scores for every item, ascending = best.

    Returns ``(B, |V| + 1)``; column ``j`` scores item ``j`` and column 0
    (padding) is ``+inf``. STOSA scores are squared W2 distances between the
    final state and each item's input-table Gaussian.
    """
    inputs = np.atleast_2d(np.asarray(inputs))
    chunks = []
    for start in range(0, inputs.shape[0], batch_size):
        chunks.append(_predict_chunk(params, inputs[start:start + batch_size]))
    return np.concatenate(chunks, axis=0)


def _predict_chunk(params, inputs):
    a = params.arrays
    if params.variant == STOSA:
        mu, cov = final_states(params, inputs)
        item_cov = activate_covariance(a["item_cov"])
        scores = distance_matrix(mu[None], cov[None], a["item_mean"][None], item_cov[None]).data[0]
        scores = np.maximum(scores, 0.0)
    else:
        h, _ = final_states(params, inputs)
        scores = -(h @ a["item_emb"].T)
    scores = scores.astype(np.float64)
    scores[:, 0] = np.inf
    return scores


def top_n(scores, n, exclude=()):
    """Best ``n`` item ids by ascending score, ties by ascending id."""
    if n < 1:
        raise ValueError("N must be >= 1")
    scores = np.asarray(scores, dtype=float)
    ids = np.arange(1, scores.shape[0])
    keep = ~np.isin(ids, np.fromiter(exclude, dtype=np.int64, count=len(exclude)))
    ids = ids[keep]
    order = np.lexsort((ids, scores[ids]))
    return ids[order][:n].tolist()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(params, path, extra=None):
    """Write an ``.npz`` archive: one ``.npy`` member per array plus ``__meta__``.

    ``__meta__`` is a 0-d unicode array holding JSON with the format name,
    version, model config, item count, parameter count and ``extra``.
    """
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(params.config),
        "n_items": params.n_items,
        "param_count": params.n_parameters(),
        "arrays": {k: [list(v.shape), str(v.dtype)] for k, v in params.arrays.items()},
        "extra": extra or {},
    }
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.array(json.dumps(meta, sort_keys=True)), **params.arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(ModelParams, extra)``."""
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION} file")
        arrays = {k: z[k] for k in meta["arrays"]}
    for k, (shape, dtype) in meta["arrays"].items():
        if list(arrays[k].shape) != shape or str(arrays[k].dtype) != dtype:
            raise ValueError(f"{path}: array {k} does not match its header")
    known = {f.name for f in fields(ModelConfig)}
    config = ModelConfig(**{k: v for k, v in meta["config"].items() if k in known})
    return ModelParams(config, int(meta["n_items"]), arrays), meta["extra"]
