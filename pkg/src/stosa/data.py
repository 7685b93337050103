"""Interaction ingestion, k-core filtering, sequences, windows and negatives."""
from __future__ import annotations

import io
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

PAD = 0
MANIFEST_HEADER = "#stosa-split v1"


class IngestionError(Exception):
    pass


class DatasetError(ValueError):
    pass


class SamplingError(ValueError):
    pass


@dataclass(frozen=True)
class Interaction:
    user: str
    item: str
    timestamp: int

    def __post_init__(self):
        if not self.user or not self.item:
            raise ValueError("user and item ids must be non-empty strings")


@dataclass
class ParseResult:
    interactions: list
    malformed: list = field(default_factory=list)  # (line number, raw line)

    @property
    def n_malformed(self):
        return len(self.malformed)


def parse_interactions(stream):
    """Parse tab-separated ``user, item, timestamp[, ...]`` records.

    ``stream`` may be a binary or text file object, or raw bytes / str.
    Lines with fewer than three fields or a non-integer timestamp are collected
    in ``ParseResult.malformed`` with their 1-based line number. Blank lines
    are skipped silently.
    """
    try:
        if isinstance(stream, (bytes, bytearray)):
            text = bytes(stream).decode("utf-8")
        elif isinstance(stream, str):
            text = stream
        else:
            raw = stream.read()
            text = raw.decode("utf-8") if isinstance(raw, (bytes, bytearray)) else raw
    except (OSError, UnicodeDecodeError) as exc:
        raise IngestionError(f"cannot read interaction stream: {exc}") from exc

    result = ParseResult(interactions=[])
    for lineno, line in enumerate(io.StringIO(text), start=1):
        line = line.rstrip("\r\n")
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) < 3 or not fields[0] or not fields[1]:
            result.malformed.append((lineno, line))
            continue
        try:
            ts = int(fields[2])
        except ValueError:
            result.malformed.append((lineno, line))
            continue
        result.interactions.append(Interaction(fields[0], fields[1], ts))
    if result.malformed:
        log.warning("%d malformed line(s) skipped, first at line %d",
                    len(result.malformed), result.malformed[0][0])
    return result


def read_interactions(path):
    try:
        with open(path, "rb") as fh:
            return parse_interactions(fh)
    except OSError as exc:
        raise IngestionError(f"cannot open {path}: {exc}") from exc


def k_core_filter(interactions, k, iterative=False):
    """Keep users with at least ``k`` interactions (repeats count).

    With ``iterative=True`` users and items are alternately pruned until both
    sides satisfy the threshold.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    kept = list(interactions)
    while True:
        users = Counter(x.user for x in kept)
        out = [x for x in kept if users[x.user] >= k]
        if iterative:
            items = Counter(x.item for x in out)
            out = [x for x in out if items[x.item] >= k]
        if not iterative or len(out) == len(kept):
            return out
        kept = out


@dataclass
class SequenceDataset:
    """Per-user chronological item sequences with leave-one-out markers.

    ``sequences[u]`` holds dense item ids for dense user ``u`` (1-based; index 0
    of the list is unused). The last element is the test item, the one before
    it the validation item.
    """

    users: list    # dense id - 1 -> user string
    items: list    # dense id - 1 -> item string
    sequences: list  # dense user id - 1 -> np.ndarray of item ids

    def __post_init__(self):
        self.user_index = {u: i + 1 for i, u in enumerate(self.users)}
        self.item_index = {v: i + 1 for i, v in enumerate(self.items)}

    @property
    def n_users(self):
        return len(self.users)

    @property
    def n_items(self):
        return len(self.items)

    @property
    def n_interactions(self):
        return int(sum(len(s) for s in self.sequences))

    def sequence(self, user):
        return self.sequences[user - 1]

    def train(self, user):
        return self.sequences[user - 1][:-2]

    def valid_item(self, user):
        return int(self.sequences[user - 1][-2])

    def test_item(self, user):
        return int(self.sequences[user - 1][-1])

    def user_ids(self):
        return np.arange(1, self.n_users + 1)

    def decode(self, user, item):
        return self.users[user - 1], self.items[item - 1]

    def stats(self):
        n_u, n_v, n_i = self.n_users, self.n_items, self.n_interactions
        return {
            "users": n_u,
            "items": n_v,
            "interactions": n_i,
            "density": n_i / (n_u * n_v) if n_u and n_v else 0.0,
            "avg_interactions_per_user": n_i / n_u if n_u else 0.0,
        }


def build_sequences(interactions):
    """Index users/items by first appearance and sort each user's events by time.

    Ties in timestamp keep input order (``sorted`` is stable).
    """
    users, items = {}, {}
    per_user = {}
    for x in interactions:
        u = users.setdefault(x.user, len(users) + 1)
        v = items.setdefault(x.item, len(items) + 1)
        per_user.setdefault(u, []).append((x.timestamp, v))
    sequences = []
    for u in range(1, len(users) + 1):
        events = sorted(per_user[u], key=lambda e: e[0])
        if len(events) < 3:
            name = next(k for k, i in users.items() if i == u)
            raise DatasetError(f"user {name!r} has {len(events)} interactions; "
                               "need >= 3 for a train/validation/test split")
        sequences.append(np.array([v for _, v in events], dtype=np.int64))
    return SequenceDataset(users=list(users), items=list(items), sequences=sequences)


@dataclass
class TrainingWindow:
    inputs: np.ndarray
    targets: np.ndarray
    mask: np.ndarray


def make_window(sequence, n):
    """Right-aligned next-item window over the ``n + 1`` most recent items."""
    if n < 1:
        raise ValueError("n must be >= 1")
    seq = np.asarray(sequence, dtype=np.int64)
    if seq.size == 0:
        raise ValueError("sequence must be non-empty")
    tail = seq[-(n + 1):]
    m = tail.size - 1
    inputs = np.zeros(n, dtype=np.int64)
    targets = np.zeros(n, dtype=np.int64)
    if m > 0:
        inputs[n - m:] = tail[:-1]
        targets[n - m:] = tail[1:]
    return TrainingWindow(inputs, targets, inputs != PAD)


def make_input_window(sequence, n):
    """Right-aligned inference window: the ``n`` most recent items, left-padded."""
    seq = np.asarray(sequence, dtype=np.int64)[-n:]
    out = np.zeros(n, dtype=np.int64)
    if seq.size:
        out[n - seq.size:] = seq
    return out


def stack_windows(windows):
    return TrainingWindow(np.stack([w.inputs for w in windows]),
                          np.stack([w.targets for w in windows]),
                          np.stack([w.mask for w in windows]))


def sample_negative(dataset, user, rng):
    """Draw one item uniformly from items the user never interacted with."""
    seen = set(dataset.sequence(user).tolist())
    if len(seen) >= dataset.n_items:
        raise SamplingError(f"user {user} has interacted with every item")
    while True:
        j = int(rng.integers(1, dataset.n_items + 1))
        if j not in seen:
            return j


def sample_negatives(dataset, users, mask, rng):
    """Vectorised :func:`sample_negative` for a ``(B, n)`` grid of positions.

    Positions where ``mask`` is false get the padding id.
    """
    users = np.asarray(users)
    n_items = dataset.n_items
    seen = np.zeros((len(users), n_items + 1), dtype=bool)
    for row, u in enumerate(users):
        seen[row, dataset.sequence(u)] = True
    if seen[:, 1:].all(axis=1).any():
        raise SamplingError("a user has interacted with every item")
    out = np.zeros(mask.shape, dtype=np.int64)
    todo = np.asarray(mask, dtype=bool).copy()
    rows = np.broadcast_to(np.arange(len(users))[:, None], mask.shape)
    while todo.any():
        draw = rng.integers(1, n_items + 1, size=int(todo.sum()))
        ok = ~seen[rows[todo], draw]
        idx = np.flatnonzero(todo)
        out.flat[idx[ok]] = draw[ok]
        todo.flat[idx[ok]] = False
    return out


def train_item_counts(dataset):
    counts = np.zeros(dataset.n_items + 1, dtype=np.int64)
    for u in dataset.user_ids():
        np.add.at(counts, dataset.train(u), 1)
    return counts


def bucketize(dataset, axis, edges):
    """Assign users (by train length) or items (by train count) to half-open buckets.

    ``edges`` are strictly increasing; bucket ``i`` is ``[edges[i], edges[i+1])``.
    Use ``math.inf`` as the last edge for an open-ended bucket. Items with no
    train interaction are not assigned.
    """
    edges = [float(e) for e in edges]
    if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError("edges must be strictly increasing with at least two entries")
    if axis == "sequence-length":
        keys = dataset.user_ids()
        values = np.array([len(dataset.train(u)) for u in keys])
    elif axis == "item-popularity":
        counts = train_item_counts(dataset)
        keys = np.flatnonzero(counts > 0)
        values = counts[keys]
    else:
        raise ValueError(f"unknown bucket axis {axis!r}")
    assignment = {}
    for key, value in zip(keys.tolist(), values.tolist()):
        b = assign_bucket(value, edges)
        if b is not None:
            assignment[key] = b
    return assignment


def assign_bucket(value, edges):
    idx = int(np.searchsorted(edges, value, side="right")) - 1
    if idx < 0 or idx >= len(edges) - 1:
        return None
    return idx


def quartile_edges(values):
    qs = np.quantile(np.asarray(values, dtype=float), [0.25, 0.5, 0.75])
    edges = [float(np.min(values))]
    for q in np.ceil(qs):
        if q > edges[-1]:
            edges.append(float(q))
    edges.append(math.inf)
    return edges


# ---------------------------------------------------------------------------
# split manifest
# ---------------------------------------------------------------------------

def write_manifest(dataset, path):
    """Write the versioned split manifest.

    Layout: header line, a ``#stats`` JSON line, one ``I`` line per item
    (``I<TAB>id<TAB>item``), then one ``U`` line per user
    (``U<TAB>id<TAB>user<TAB>train ids space-separated<TAB>valid id<TAB>test id``).
    """
    lines = [MANIFEST_HEADER, "#stats " + json.dumps(dataset.stats(), sort_keys=True)]
    lines += [f"I\t{i}\t{name}" for i, name in enumerate(dataset.items, start=1)]
    for u in dataset.user_ids():
        train = " ".join(str(v) for v in dataset.train(u))
        lines.append(f"U\t{u}\t{dataset.users[u - 1]}\t{train}\t"
                     f"{dataset.valid_item(u)}\t{dataset.test_item(u)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path):
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or text[0].strip() != MANIFEST_HEADER:
        raise DatasetError(f"{path}: missing '{MANIFEST_HEADER}' header")
    items, users, sequences = [], [], []
    for lineno, line in enumerate(text[1:], start=2):
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if parts[0] == "I" and len(parts) == 3:
            if int(parts[1]) != len(items) + 1:
                raise DatasetError(f"{path}:{lineno}: item ids must be dense and ordered")
            items.append(parts[2])
        elif parts[0] == "U" and len(parts) == 6:
            if int(parts[1]) != len(users) + 1:
                raise DatasetError(f"{path}:{lineno}: user ids must be dense and ordered")
            users.append(parts[2])
            train = [int(v) for v in parts[3].split()]
            sequences.append(np.array(train + [int(parts[4]), int(parts[5])], dtype=np.int64))
        else:
            raise DatasetError(f"{path}:{lineno}: unrecognised manifest line")
    return SequenceDataset(users=users, items=items, sequences=sequences)
