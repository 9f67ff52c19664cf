"""User-item interaction data: ingestion, per-user splits and BPR sampling."""

import json
import logging
import os
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_RATIOS = (0.5, 0.25, 0.25)
MIN_INTERACTIONS = 3


class DatasetError(ValueError):
    pass


class ParseError(DatasetError):
    def __init__(self, path, lineno, message):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


@dataclass(frozen=True)
class RawInteractions:
    """Deduplicated interactions with dense 0-based indices."""

    user_ids: list
    item_ids: list
    pairs: np.ndarray  # (n, 2) int64

    @property
    def num_users(self):
        return len(self.user_ids)

    @property
    def num_items(self):
        return len(self.item_ids)

    def __len__(self):
        return len(self.pairs)


def _freeze(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def _pairs_array(pairs):
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)


@dataclass(frozen=True, eq=False)
class InteractionDataset:
    num_users: int
    num_items: int
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int = 0
    ratios: tuple = DEFAULT_RATIOS
    user_freq: np.ndarray = field(init=False)
    item_freq: np.ndarray = field(init=False)

    def __post_init__(self):
        for name in ("train", "val", "test"):
            arr = _pairs_array(getattr(self, name))
            if len(arr) and (arr.min() < 0 or arr[:, 0].max() >= self.num_users
                             or arr[:, 1].max() >= self.num_items):
                raise DatasetError(f"{name} split has an index out of range")
            object.__setattr__(self, name, _freeze(arr))
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        object.__setattr__(self, "user_freq", _freeze(
            np.bincount(self.train[:, 0], minlength=self.num_users).astype(np.int64)))
        object.__setattr__(self, "item_freq", _freeze(
            np.bincount(self.train[:, 1], minlength=self.num_items).astype(np.int64)))
        codes = np.unique(self.train[:, 0] * self.num_items + self.train[:, 1])
        object.__setattr__(self, "_train_codes", _freeze(codes))

    @property
    def num_entities(self):
        return self.num_users + self.num_items

    def split_pairs(self, name):
        if name not in ("train", "val", "test"):
            raise DatasetError(f"unknown split {name!r}")
        return getattr(self, name)

    def in_train(self, users, items):
        """Vectorised membership test of (user, item) pairs in the train split."""
        codes = np.asarray(users, dtype=np.int64) * self.num_items + np.asarray(items, dtype=np.int64)
        pos = np.searchsorted(self._train_codes, codes)
        pos = np.minimum(pos, max(len(self._train_codes) - 1, 0))
        if len(self._train_codes) == 0:
            return np.zeros(codes.shape, dtype=bool)
        return self._train_codes[pos] == codes

    def train_items_by_user(self):
        """CSR-style (indptr, items) view of train items per user, items ascending."""
        users = self._train_codes // self.num_items
        items = self._train_codes % self.num_items
        indptr = np.zeros(self.num_users + 1, dtype=np.int64)
        np.cumsum(np.bincount(users, minlength=self.num_users), out=indptr[1:])
        return indptr, items

    def relevant_by_user(self, name):
        """Mapping user -> sorted item array for the given split (nonempty users only)."""
        pairs = self.split_pairs(name)
        if len(pairs) == 0:
            return {}
        order = np.lexsort((pairs[:, 1], pairs[:, 0]))
        pairs = pairs[order]
        users, starts = np.unique(pairs[:, 0], return_index=True)
        groups = np.split(pairs[:, 1], starts[1:])
        return {int(u): g for u, g in zip(users, groups)}


def load_interactions(path):
    """Read ``user<TAB>item`` lines; ids are arbitrary strings.

    Ids are mapped to dense indices in order of first appearance and
    duplicate pairs are dropped. Blank lines are ignored.
    """
    users, items = {}, {}
    seen = set()
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise ParseError(path, lineno, f"expected 'user<TAB>item', got {line!r}")
            u = users.setdefault(parts[0], len(users))
            v = items.setdefault(parts[1], len(items))
            if (u, v) not in seen:
                seen.add((u, v))
                pairs.append((u, v))
    if not pairs:
        raise DatasetError(f"{path}: no interactions")
    return RawInteractions(list(users), list(items), _pairs_array(pairs))


def _split_counts(n, ratios):
    n_val = int(np.floor(n * ratios[1] + 0.5))
    n_test = int(np.floor(n * ratios[2] + 0.5))
    # every user keeps at least one train interaction
    while n - n_val - n_test < 1:
        if n_val >= n_test and n_val > 0:
            n_val -= 1
        else:
            n_test -= 1
    return n - n_val - n_test, n_val, n_test


def split(raw, ratios=DEFAULT_RATIOS, seed=0):
    """Per-user shuffled train/val/test split.

    Users with fewer than three interactions are dropped and the remaining
    users are re-indexed densely in their original order. Item indices are
    left unchanged.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise DatasetError(f"ratios must be three positive fractions summing to 1, got {ratios}")
    pairs = raw.pairs if isinstance(raw, RawInteractions) else _pairs_array(raw)
    num_items = raw.num_items if isinstance(raw, RawInteractions) else int(pairs[:, 1].max()) + 1
    num_users_in = raw.num_users if isinstance(raw, RawInteractions) else int(pairs[:, 0].max()) + 1

    order = np.argsort(pairs[:, 0], kind="stable")
    pairs = pairs[order]
    counts = np.bincount(pairs[:, 0], minlength=num_users_in)
    kept = np.flatnonzero(counts >= MIN_INTERACTIONS)
    dropped = num_users_in - len(kept)
    if dropped:
        logger.info("dropped %d users with fewer than %d interactions", dropped, MIN_INTERACTIONS)
    if len(kept) == 0:
        raise DatasetError("dataset too sparse: no user has at least 3 interactions")
    remap = np.full(num_users_in, -1, dtype=np.int64)
    remap[kept] = np.arange(len(kept))

    rng = np.random.default_rng(seed)
    starts = np.concatenate([[0], np.cumsum(counts)])
    out = ([], [], [])
    for old in kept:
        user_items = pairs[starts[old]:starts[old + 1], 1]
        user_items = user_items[rng.permutation(len(user_items))]
        n_train, n_val, _ = _split_counts(len(user_items), ratios)
        new = remap[old]
        chunks = (user_items[:n_train], user_items[n_train:n_train + n_val],
                  user_items[n_train + n_val:])
        for bucket, chunk in zip(out, chunks):
            bucket.append(np.column_stack([np.full(len(chunk), new), chunk]))
    train, val, test = (np.concatenate(b).astype(np.int64) for b in out)
    return InteractionDataset(len(kept), num_items, train, val, test, seed=seed, ratios=ratios)


class BprBatch(NamedTuple):
    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray


def sample_negatives(ds, users, rng, max_rounds=1000):
    """Uniform negatives for ``users``, rejection-resampled until unobserved."""
    users = np.asarray(users, dtype=np.int64)
    if len(users) and np.any(ds.user_freq[users] >= ds.num_items):
        bad = int(users[np.argmax(ds.user_freq[users] >= ds.num_items)])
        raise DatasetError(f"no negatives available for user {bad}")
    neg = rng.integers(0, ds.num_items, size=len(users))
    todo = np.flatnonzero(ds.in_train(users, neg))
    rounds = 0
    while len(todo):
        neg[todo] = rng.integers(0, ds.num_items, size=len(todo))
        todo = todo[ds.in_train(users[todo], neg[todo])]
        rounds += 1
        if rounds > max_rounds:
            raise DatasetError("negative sampling did not terminate")
    return neg


def sample_bpr_batch(ds, batch_size, rng):
    """Draw ``batch_size`` (user, positive, negative) triples."""
    if batch_size < 1:
        raise DatasetError("batch_size must be >= 1")
    if len(ds.train) == 0:
        raise DatasetError("empty train split")
    idx = rng.integers(0, len(ds.train), size=batch_size)
    users = ds.train[idx, 0].copy()
    pos = ds.train[idx, 1].copy()
    return BprBatch(users, pos, sample_negatives(ds, users, rng))


def _allocate_per_user(num_users, num_items, interactions, rng, activity_exponent=0.0):
    counts = np.full(num_users, MIN_INTERACTIONS, dtype=np.int64)
    extra = interactions - counts.sum()
    # activity weights follow a power law over a random user ranking
    share = rng.permutation(np.arange(1, num_users + 1, dtype=np.float64)) ** -float(activity_exponent)
    while extra > 0:
        room = num_items - counts
        open_users = np.flatnonzero(room > 0)
        w = share[open_users]
        add = rng.multinomial(extra, w / w.sum())
        add = np.minimum(add, room[open_users])
        counts[open_users] += add
        extra -= int(add.sum())
    return counts


def generate_synthetic(num_users, num_items, interactions, popularity_exponent=1.0, seed=0,
                       ratios=DEFAULT_RATIOS, clusters=8, taste=0.8, activity_exponent=0.5):
    """Power-law popularity corpus with latent taste groups, split per user.

    Item ``j`` has popularity weight ``(j + 1) ** -popularity_exponent``.
    Items are dealt round-robin by popularity rank into ``clusters`` groups
    and users are dealt evenly into the same groups; a user's item weights are the
    popularity weights with a share ``taste`` of the mass moved onto its own
    group. Each user draws its items without replacement from those
    weights. Round-robin dealing gives every group about the same
    popularity mass, so item marginals keep the power law.

    Beyond a floor of three interactions each, user activity is spread in
    proportion to ``rank ** -activity_exponent`` over a random ranking
    (0 gives every user the same expected count).
    """
    if num_users < 1 or num_items < MIN_INTERACTIONS:
        raise DatasetError("need at least one user and three items")
    if interactions < MIN_INTERACTIONS * num_users:
        raise DatasetError(f"need at least {MIN_INTERACTIONS * num_users} interactions "
                           f"for {num_users} users, got {interactions}")
    if interactions > num_users * num_items:
        raise DatasetError(f"infeasible: {interactions} interactions exceed the "
                           f"{num_users}x{num_items} grid")
    if popularity_exponent < 0:
        raise DatasetError("popularity_exponent must be >= 0")
    if activity_exponent < 0:
        raise DatasetError("activity_exponent must be >= 0")
    if clusters < 1 or not 0 <= taste < 1:
        raise DatasetError("need clusters >= 1 and taste in [0, 1)")
    rng = np.random.default_rng(seed)
    weights = np.arange(1, num_items + 1, dtype=np.float64) ** -float(popularity_exponent)
    weights /= weights.sum()
    item_group = np.arange(num_items) % clusters
    group_probs = []
    for g in range(clusters):
        own = item_group == g
        w = (1.0 - taste) * weights + taste * np.where(own, weights, 0.0) / weights[own].sum()
        group_probs.append(w / w.sum())
    user_group = rng.permutation(np.arange(num_users) % clusters)
    counts = _allocate_per_user(num_users, num_items, interactions, rng, activity_exponent)
    rows = []
    for u, k in enumerate(counts):
        items = rng.choice(num_items, size=int(k), replace=False, p=group_probs[user_group[u]])
        rows.append(np.column_stack([np.full(k, u), np.sort(items)]))
    pairs = np.concatenate(rows).astype(np.int64)
    raw = RawInteractions(list(range(num_users)), list(range(num_items)), pairs)
    return split(raw, ratios=ratios, seed=seed)


def save_dataset(ds, directory):
    os.makedirs(directory, exist_ok=True)
    for name in ("train", "val", "test"):
        np.savetxt(os.path.join(directory, f"{name}.tsv"), ds.split_pairs(name),
                   fmt="%d", delimiter="\t")
    header = {"num_users": ds.num_users, "num_items": ds.num_items,
              "seed": ds.seed, "ratios": list(ds.ratios)}
    with open(os.path.join(directory, "header.json"), "w") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(directory):
    with open(os.path.join(directory, "header.json")) as fh:
        header = json.load(fh)
    splits = {}
    for name in ("train", "val", "test"):
        path = os.path.join(directory, f"{name}.tsv")
        arr = np.loadtxt(path, dtype=np.int64, delimiter="\t", ndmin=2)
        splits[name] = arr.reshape(-1, 2)
    return InteractionDataset(header["num_users"], header["num_items"], splits["train"],
                              splits["val"], splits["test"], seed=header["seed"],
                              ratios=tuple(header["ratios"]))
