"""Interaction-log ingestion, 5-core filtering and leave-one-out splits.

Input is a UTF-8 tab-separated log with columns ``user item category
timestamp`` (unix seconds), optional header. Users and items with fewer
than five interactions are discarded iteratively until a fixed point, each
user's interactions are sorted chronologically (stable on file order for
ties), and the last two items per user are held out for test/validation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .embedding import ContextVocab, PAD_CATEGORY

MIN_INTERACTIONS = 5


class IngestionError(ValueError):
    pass


@dataclass
class Interaction:
    user: str
    item: str
    category: str
    timestamp: int


@dataclass
class ItemVocab:
    """Item and category indexing by first appearance (deterministic)."""
    item_index: dict = field(default_factory=dict)      # raw item -> 0-based global index
    category_index: dict = field(default_factory=dict)  # raw category -> 1-based index
    item_category: list = field(default_factory=list)   # global index -> category index

    def add(self, item, category):
        if category not in self.category_index:
            self.category_index[category] = len(self.category_index) + 1  # 0 = PAD
        if item not in self.item_index:
            self.item_index[item] = len(self.item_index)
            self.item_category.append(self.category_index[category])
        return self.item_index[item]

    @property
    def n_items(self):
        return len(self.item_index)

    @property
    def n_categories(self):
        return len(self.category_index)

    def save(self, path):
        inverse = {v: k for k, v in self.item_index.items()}
        with open(path, "w", encoding="utf-8") as f:
            for idx in range(len(inverse)):
                f.write(f"{inverse[idx]}\t{idx}\t{self.item_category[idx]}\n")

    @classmethod
    def load(cls, path):
        vocab = cls()
        rows = []
        with open(path, encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    continue
                raw, idx, cat = line.rstrip("\n").split("\t")
                rows.append((raw, int(idx), int(cat)))
        rows.sort(key=lambda r: r[1])
        for raw, idx, cat in rows:
            vocab.item_index[raw] = idx
            vocab.item_category.append(cat)
        vocab.category_index = {f"cat{c}": c for c in sorted(set(r[2] for r in rows))}
        return vocab


@dataclass
class UserSequence:
    user: str
    items: list   # global item indices, chronological
    cats: list    # category index per position
    hours: list   # hour of day per position

    def __len__(self):
        return len(self.items)


def ingest(path):
    """Parse the interaction log; returns (interactions, n_malformed).

    Malformed lines are counted and skipped; more than 1% malformed lines
    aborts with samples of the offenders.
    """
    interactions = []
    bad = []
    n_lines = 0
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if lineno == 1 and line.lower().startswith("user\t"):
                continue
            n_lines += 1
            parts = line.split("\t")
            if len(parts) != 4 or not all(p.strip() for p in parts[:3]):
                bad.append((lineno, line))
                continue
            user, item, category, ts = parts
            try:
                timestamp = int(ts)
            except ValueError:
                bad.append((lineno, line))
                continue
            if timestamp < 0:
                bad.append((lineno, line))
                continue
            interactions.append(Interaction(user, item, category, timestamp))
    if n_lines and len(bad) / n_lines > 0.01:
        samples = "; ".join(f"line {ln}: {txt!r}" for ln, txt in bad[:5])
        raise IngestionError(f"{len(bad)}/{n_lines} malformed lines in {path}: {samples}")
    return interactions, len(bad)


def _five_core(interactions):
    """Iteratively drop items then users with < MIN_INTERACTIONS, to a fixed point."""
    rows = list(interactions)
    while True:
        item_counts = {}
        for r in rows:
            item_counts[r.item] = item_counts.get(r.item, 0) + 1
        kept = [r for r in rows if item_counts[r.item] >= MIN_INTERACTIONS]
        user_counts = {}
        for r in kept:
            user_counts[r.user] = user_counts.get(r.user, 0) + 1
        kept = [r for r in kept if user_counts[r.user] >= MIN_INTERACTIONS]
        if len(kept) == len(rows):
            return kept
        rows = kept


def build_sequences(interactions):
    """5-core filter, per-user chronological ordering, vocab assignment.

    Returns (ItemVocab, list of UserSequence). Timestamp ties preserve file
    order; item/category indices follow first appearance in the filtered,
    ordered stream.
    """
    if not interactions:
        raise ValueError("no interactions to process")
    rows = _five_core(interactions)
    if not rows:
        raise ValueError("all interactions removed by 5-core filtering")
    by_user = {}
    for pos, r in enumerate(rows):
        by_user.setdefault(r.user, []).append((r.timestamp, pos, r))
    vocab = ItemVocab()
    sequences = []
    for user in by_user:  # insertion order = first appearance in file
        ordered = sorted(by_user[user], key=lambda t: (t[0], t[1]))
        items, cats, hours = [], [], []
        for ts, _, r in ordered:
            idx = vocab.add(r.item, r.category)
            items.append(idx)
            cats.append(vocab.item_category[idx])
            hours.append((ts // 3600) % 24)
        sequences.append(UserSequence(user, items, cats, hours))
    return vocab, sequences


def split_leave_one_out(seq):
    """(train length, validation position, test position) for one user.

    Train items are everything before the second-last; returns None for
    sequences shorter than 3 (the caller should skip them with a warning).
    """
    if len(seq) < 3:
        return None
    return len(seq) - 2, len(seq) - 2, len(seq) - 1


def window_contexts(cats, hours):
    """Context triplets for a window; position 0 uses the PAD previous-category."""
    out = []
    prev = PAD_CATEGORY
    for cat, hour in zip(cats, hours):
        out.append((prev, cat, hour))
        prev = cat
    return out


def build_context_vocab(sequences):
    """Register every triplet a training window can produce.

    For each training position both the true-previous-category triplet and
    the PAD-previous variant (used when a window starts there) are added.
    """
    vocab = ContextVocab()
    for seq in sequences:
        split = split_leave_one_out(seq)
        if split is None:
            continue
        train_len = split[0]
        for i in range(train_len):
            vocab.add((PAD_CATEGORY, seq.cats[i], seq.hours[i]))
            if i > 0:
                vocab.add((seq.cats[i - 1], seq.cats[i], seq.hours[i]))
    return vocab


def generate_training_samples(seq, ctx_vocab, max_len):
    """One sample per prefix: input v_1..v_t (last max_len), target v_{t+1}."""
    split = split_leave_one_out(seq)
    if split is None:
        return []
    train_len = split[0]
    samples = []
    for t in range(1, train_len):
        lo = max(0, t - max_len)
        items = np.array(seq.items[lo:t], dtype=np.int64)
        ctxs = ctx_vocab.lookup_many(window_contexts(seq.cats[lo:t], seq.hours[lo:t]))
        samples.append((items, ctxs, seq.items[t]))
    return samples


def eval_input(seq, ctx_vocab, max_len, split):
    """(input items, input contexts, held-out target) for val or test."""
    marks = split_leave_one_out(seq)
    if marks is None:
        return None
    _, val_pos, test_pos = marks
    end = val_pos if split == "val" else test_pos
    lo = max(0, end - max_len)
    items = np.array(seq.items[lo:end], dtype=np.int64)
    ctxs = ctx_vocab.lookup_many(window_contexts(seq.cats[lo:end], seq.hours[lo:end]))
    return items, ctxs, seq.items[end]


def dataset_stats(vocab, sequences):
    """Summary mirroring the usual users/items/interactions/sparsity columns."""
    n_users = len(sequences)
    n_items = vocab.n_items
    n_inter = sum(len(s) for s in sequences)
    return {
        "n_users": n_users,
        "n_items": n_items,
        "n_categories": vocab.n_categories,
        "n_interactions": n_inter,
        "avg_interactions_per_user": n_inter / n_users if n_users else 0.0,
        "avg_interactions_per_item": n_inter / n_items if n_items else 0.0,
        "sparsity": 1.0 - n_inter / (n_users * n_items) if n_users and n_items else 0.0,
    }


def save_sequences(sequences, path):
    doc = [{"user": s.user, "items": s.items, "cats": s.cats, "hours": s.hours}
           for s in sequences]
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True, separators=(",", ":"))


def load_sequences(path):
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    return [UserSequence(d["user"], d["items"], d["cats"], d["hours"]) for d in doc]
