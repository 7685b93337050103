"""Regularised BPR objective, Adam, the training loop and gradient checking."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .data import make_window, sample_negatives, stack_windows
from .evaluation import evaluate
from .model import STOSA, encode, init_params, item_distance, pair_distance

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term, value):
        super().__init__(f"loss term {term!r} is not finite ({value})")
        self.term = term


@dataclass
class LossTerms:
    bpr: float
    pvn: float
    l2: float
    total: float
    lam: float
    beta: float


def pvn_regularizer(d_pos, d_pos_neg):
    """Hinge ``max(d_pos - d_pos_neg, 0)`` on the prediction distance."""
    d_pos, d_pos_neg = np.asarray(d_pos, dtype=float), np.asarray(d_pos_neg, dtype=float)
    if np.any(d_pos < 0) or np.any(d_pos_neg < 0):
        raise ValueError("distances must be non-negative")
    return np.maximum(d_pos - d_pos_neg, 0.0)


def loss_graph(params, tensors, batch, negatives, lam, beta, rng=None):
    """Build the loss as autograd tensors; returns ``(total, bpr, pvn, l2)``.

    Sums over every non-padding position of every window in the batch; the
    L2 penalty covers all trainable arrays once.
    """
    states, _ = encode(params, batch.inputs, tensors, rng)
    dtype = params.arrays[next(iter(params.arrays))].dtype
    m = np.asarray(batch.mask).astype(dtype)
    d_pos = pair_distance(params, tensors, states, batch.targets)
    d_neg = pair_distance(params, tensors, states, negatives)
    bpr = -(ag.log_sigmoid(d_neg - d_pos) * m).sum()
    if params.variant == STOSA:
        d_pn = item_distance(params, tensors, batch.targets, negatives)
        pvn = (ag.relu(d_pos - d_pn) * m).sum()
    else:
        pvn = ag.Tensor(np.zeros((), dtype=dtype))
    l2 = None
    for t in tensors.values():
        sq = (t * t).sum()
        l2 = sq if l2 is None else l2 + sq
    total = bpr + lam * pvn + beta * l2
    return total, bpr, pvn, l2


def step_loss(params, batch, negatives, lam, beta, rng=None):
    """Loss terms and gradients (dict keyed like ``params.arrays``) for one batch."""
    tensors = params.tensors(requires_grad=True)
    try:
        total, bpr, pvn, l2 = loss_graph(params, tensors, batch, negatives, lam, beta, rng)
    except NonFiniteLossError:
        raise
    except FloatingPointError as exc:
        raise NonFiniteLossError("encoder", exc) from exc
    for name, t in (("bpr", bpr), ("pvn", pvn), ("l2", l2), ("total", total)):
        if not np.isfinite(t.data):
            raise NonFiniteLossError(name, float(t.data))
    total.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
             for k, t in tensors.items()}
    terms = LossTerms(float(bpr.data), float(pvn.data), float(l2.data), float(total.data),
                      lam, beta)
    return terms, grads


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(state, arrays, grads):
    """One bias-corrected Adam step, updating ``arrays`` in place."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, g in grads.items():
        p = arrays[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return arrays


@dataclass
class TrainResult:
    params: object
    log: list
    best_epoch: int
    best_val_mrr: float
    status: str = "finished"   # finished | early-stopped | diverged
    last: object = None


def training_windows(dataset, n):
    users = dataset.user_ids()
    return users, stack_windows([make_window(dataset.train(u), n) for u in users])


def train(dataset, config, log_path=None, on_epoch=None):
    """Optimise a model on ``dataset`` under ``config`` (a RunConfig).

    Each epoch shuffles users into batches, resamples one negative per valid
    position and evaluates validation MRR; the best-validation parameters are
    returned (ties go to the later epoch). Stops after ``patience`` consecutive
    epochs without strict improvement.
    """
    mcfg = config.model_config()
    params = init_params(mcfg, dataset.n_items, config.rng("init"), config.np_dtype)
    opt = AdamState(lr=config.lr)
    shuffle_rng = config.rng("shuffle")
    neg_rng = config.rng("negatives")
    drop_rng = config.rng("dropout") if config.dropout > 0 else None

    users, windows = training_windows(dataset, mcfg.n)
    usable = windows.mask.any(axis=1)
    users = users[usable]
    inputs, targets, mask = windows.inputs[usable], windows.targets[usable], windows.mask[usable]

    best, best_mrr, best_epoch, stale = params.copy(), -np.inf, 0, 0
    history = []
    status = "finished"
    sink = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, config.max_epochs + 1):
            t0 = time.perf_counter()
            order = shuffle_rng.permutation(len(users))
            sums = np.zeros(4)
            try:
                for start in range(0, len(order), config.batch_size):
                    idx = order[start:start + config.batch_size]
                    batch = type(windows)(inputs[idx], targets[idx], mask[idx])
                    negs = sample_negatives(dataset, users[idx], batch.mask, neg_rng)
                    terms, grads = step_loss(params, batch, negs, config.lam, config.beta,
                                             drop_rng)
                    adam_update(opt, params.arrays, grads)
                    sums += (terms.total, terms.bpr, terms.pvn, terms.l2)
            except NonFiniteLossError as exc:
                log.error("epoch %d: %s; keeping best checkpoint from epoch %d",
                          epoch, exc, best_epoch)
                status = "diverged"
                break
            val = evaluate(params, dataset, "valid", ns=config.eval_ns, rank_all=config.rank_all)
            record = {
                "epoch": epoch,
                "train_loss": float(sums[0]),
                "bpr": float(sums[1]),
                "pvn": float(sums[2]),
                "l2": float(sums[3]),
                "val_mrr": val.mrr,
                "elapsed_s": round(time.perf_counter() - t0, 6),
            }
            history.append(record)
            if sink:
                sink.write(json.dumps(record, sort_keys=True) + "\n")
                sink.flush()
            if on_epoch:
                on_epoch(record)
            if val.mrr > best_mrr:
                best, best_mrr, best_epoch, stale = params.copy(), val.mrr, epoch, 0
            else:
                if val.mrr == best_mrr:
                    # a tie keeps the later, longer-trained checkpoint
                    best, best_epoch = params.copy(), epoch
                stale += 1
                if stale >= config.patience:
                    status = "early-stopped"
                    break
    finally:
        if sink:
            sink.close()
    return TrainResult(best, history, best_epoch, float(best_mrr), status, params)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def finite_difference_grads(loss_fn, arrays, h=1e-5):
    """Central differences of ``loss_fn(arrays)`` w.r.t. every entry of every array."""
    out = {}
    for k, a in arrays.items():
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn(arrays)
            flat[i] = orig - h
            down = loss_fn(arrays)
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        out[k] = g
    return out


def relative_errors(analytic, numeric, floor=1e-8):
    """Per-array max of ``|a - n| / max(|a|, |n|, floor)``."""
    errs = {}
    for k in analytic:
        a, n = analytic[k], numeric[k]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        errs[k] = float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
    return errs


def gradient_check(params, batch, negatives, lam, beta, h=1e-5):
    """Compare float64 autograd gradients with central differences.

    The differences are evaluated in ``np.longdouble`` (extended precision on
    x86) at the same float64 point, so roundoff in ``L(x+h) - L(x-h)`` does not
    swamp small gradient entries. Returns ``{array name: max relative error}``.
    """
    p64 = params.astype(np.float64)
    _, analytic = step_loss(p64, batch, negatives, lam, beta)
    wide = p64.astype(np.longdouble)

    def loss(arrays):
        tensors = {k: ag.Tensor(v) for k, v in arrays.items()}
        total, *_ = loss_graph(wide, tensors, batch, negatives, lam, beta)
        return total.data

    numeric = finite_difference_grads(loss, wide.arrays, h)
    return relative_errors(analytic, {k: v.astype(np.float64) for k, v in numeric.items()})
