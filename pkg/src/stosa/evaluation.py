"""Full-ranking evaluation: Recall@N, NDCG@N, MRR and bucketed breakdowns."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .data import assign_bucket, make_input_window, train_item_counts
from .model import predict_scores


@dataclass
class RankingReport:
    per_user_rank: dict
    recall: dict
    ndcg: dict
    mrr: float
    buckets: dict = field(default_factory=dict)

    @property
    def n_users(self):
        return len(self.per_user_rank)

    def to_dict(self):
        out = {
            "n_users": self.n_users,
            "recall": {str(k): v for k, v in self.recall.items()},
            "ndcg": {str(k): v for k, v in self.ndcg.items()},
            "mrr": self.mrr,
        }
        if self.buckets:
            out["buckets"] = {name: {str(b): (r.to_dict() if r is not None else None)
                                     for b, r in groups.items()}
                              for name, groups in self.buckets.items()}
        return out


def rank_of(scores, target, exclude=()):
    """1-based rank of ``target`` among candidates (all items minus ``exclude``).

    Lower scores rank first; equal scores with a smaller item id rank ahead.
    """
    scores = np.asarray(scores, dtype=float)
    if target in exclude or not 1 <= target < scores.shape[0]:
        raise ValueError(f"target {target} is not a candidate")
    cand = np.ones(scores.shape[0], dtype=bool)
    cand[0] = False
    if exclude:
        cand[list(exclude)] = False
    s = scores[target]
    ids = np.arange(scores.shape[0])
    ahead = cand & ((scores < s) | ((scores == s) & (ids < target)))
    return int(ahead.sum()) + 1


def ranks_batch(scores, targets, excluded):
    """Vectorised :func:`rank_of`; ``excluded`` is a boolean ``(B, |V|+1)`` mask."""
    scores = np.asarray(scores, dtype=float)
    targets = np.asarray(targets)
    rows = np.arange(scores.shape[0])
    if excluded[rows, targets].any():
        raise ValueError("a target is filtered out of its candidate set")
    s = scores[rows, targets][:, None]
    ids = np.arange(scores.shape[1])[None, :]
    cand = ~excluded
    cand[:, 0] = False
    ahead = cand & ((scores < s) | ((scores == s) & (ids < targets[:, None])))
    return ahead.sum(axis=1) + 1


def compute_metrics(per_user_rank, ns=(1, 5)):
    ranks = np.fromiter(per_user_rank.values(), dtype=float, count=len(per_user_rank))
    if ranks.size == 0:
        raise ValueError("no users to evaluate")
    if np.any(ranks < 1):
        raise ValueError("ranks must be >= 1")
    recall, ndcg = {}, {}
    for n in ns:
        hit = ranks <= n
        recall[n] = float(hit.mean())
        ndcg[n] = float(np.where(hit, 1.0 / np.log2(ranks + 1.0), 0.0).mean())
    return RankingReport(dict(per_user_rank), recall, ndcg, float((1.0 / ranks).mean()))


def bucketed_metrics(per_user_rank, assignment, n_buckets, ns=(1, 5)):
    """Metrics per bucket; ``assignment`` maps user -> bucket index. Empty buckets are ``None``."""
    out = {}
    for b in range(n_buckets):
        sub = {u: r for u, r in per_user_rank.items() if assignment.get(u) == b}
        out[b] = compute_metrics(sub, ns) if sub else None
    return out


def user_buckets_by_length(dataset, edges):
    return {int(u): b for u in dataset.user_ids()
            if (b := assign_bucket(len(dataset.train(u)), edges)) is not None}


def user_buckets_by_test_popularity(dataset, edges, split="test"):
    """Group users by the train popularity of their held-out item."""
    counts = train_item_counts(dataset)
    out = {}
    for u in dataset.user_ids():
        target = dataset.test_item(u) if split == "test" else dataset.valid_item(u)
        b = assign_bucket(int(counts[target]), edges)
        if b is not None:
            out[int(u)] = b
    return out


def split_inputs(dataset, split, n, users=None):
    """Inference windows, targets and exclusion masks for a held-out split.

    Test windows see train + validation items; validation windows see train
    items only. The excluded set holds previously seen items plus, for
    validation, the test item; the target itself is never excluded.
    """
    if split not in ("test", "valid"):
        raise ValueError(f"unknown split {split!r}")
    users = dataset.user_ids() if users is None else np.asarray(users)
    inputs, targets, seen = [], [], []
    for u in users:
        seq = dataset.sequence(u)
        if split == "test":
            history, target, extra = seq[:-1], int(seq[-1]), ()
        else:
            history, target, extra = seq[:-2], int(seq[-2]), (int(seq[-1]),)
        inputs.append(make_input_window(history, n))
        targets.append(target)
        seen.append((history, extra))
    return users, np.stack(inputs), np.array(targets), seen


def evaluate(params, dataset, split="test", ns=(1, 5), rank_all=False, users=None,
             batch_size=512):
    """Rank every user's held-out item against all items; returns a RankingReport.

    With ``rank_all`` false, items in the user's visible history (and the test
    item, when ranking validation) are removed from the candidates.
    """
    users, inputs, targets, seen = split_inputs(dataset, split, params.config.n, users)
    per_user = {}
    for start in range(0, len(users), batch_size):
        sl = slice(start, start + batch_size)
        scores = predict_scores(params, inputs[sl])
        excluded = np.zeros(scores.shape, dtype=bool)
        for row, (history, extra) in enumerate(seen[sl]):
            excluded[row, list(extra)] = True
            if not rank_all:
                excluded[row, history] = True
        rows = np.arange(scores.shape[0])
        excluded[rows, targets[sl]] = False
        ranks = ranks_batch(scores, targets[sl], excluded)
        per_user.update(zip(users[sl].tolist(), ranks.tolist()))
    return compute_metrics(per_user, ns)


def write_ranks_csv(report, path, dataset=None):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["user_id", "user", "rank"])
        for u, r in sorted(report.per_user_rank.items()):
            name = dataset.users[u - 1] if dataset is not None else ""
            w.writerow([u, name, r])


def random_ranking_mrr(n_candidates):
    """Expected 1/rank when the target's rank is uniform on 1..n_candidates."""
    return sum(1.0 / r for r in range(1, n_candidates + 1)) / n_candidates


def relative_improvement(a, b):
    """Percent improvement of ``a`` over ``b``; ``None`` when ``b`` is zero."""
    if b == 0 or b is None or a is None:
        return None
    return 100.0 * (a - b) / b

