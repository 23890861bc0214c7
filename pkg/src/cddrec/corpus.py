"""Interaction log ingestion, k-core filtering, leave-one-out splits and batching."""

from __future__ import annotations

import hashlib
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PAD = 0
CORPUS_HEADER = "#cddrec-corpus v1"
CATALOG_FILE = "catalog.tsv"
SEQUENCES_FILE = "sequences.tsv"
STATS_FILE = "stats.txt"

AUGMENT_KINDS = ("crop", "mask", "reorder")
DEFAULT_RATIOS = {"crop": 0.6, "mask": 0.3, "reorder": 0.25}

LENGTH_BUCKETS = ("[≤10]", "(10,20]", "(20,30]", "(>30]")
FREQUENCY_BUCKETS = ("[≤20]", "(20,40]", "(40,60]", "(>60]")
SPLITS = ("train", "valid", "test")


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class RawInteraction:
    user_key: str
    item_key: str
    timestamp: int


@dataclass
class ItemCatalog:
    """Bijection between raw item keys and indices 1..item_count (0 is padding)."""

    keys: list[str]
    key_to_index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.key_to_index = {k: i + 1 for i, k in enumerate(self.keys)}
        if len(self.key_to_index) != len(self.keys):
            raise CorpusError("duplicate item keys in catalog")

    @property
    def item_count(self) -> int:
        return len(self.keys)

    def index_of(self, key: str) -> int:
        return self.key_to_index[key]

    def key_of(self, index: int) -> str:
        if not 1 <= index <= self.item_count:
            raise CorpusError(f"item index {index} outside [1, {self.item_count}]")
        return self.keys[index - 1]


@dataclass(frozen=True)
class InteractionSequence:
    user_index: int
    items: tuple[int, ...]

    def __post_init__(self):
        if len(self.items) < 3:
            raise CorpusError(f"user {self.user_index}: sequence needs >= 3 items, got {len(self.items)}")
        if PAD in self.items:
            raise CorpusError(f"user {self.user_index}: padding index inside sequence")

    @property
    def train_part(self) -> tuple[int, ...]:
        return self.items[:-2]

    @property
    def valid_target(self) -> int:
        return self.items[-2]

    @property
    def test_target(self) -> int:
        return self.items[-1]

    def history(self, split: str) -> tuple[int, ...]:
        """Items visible when predicting the target of ``split``."""
        if split == "valid":
            return self.items[:-2]
        if split == "test":
            return self.items[:-1]
        if split == "train":
            return self.train_part[:-1]
        raise CorpusError(f"unknown split {split!r}")

    def target(self, split: str) -> int:
        if split == "valid":
            return self.valid_target
        if split == "test":
            return self.test_target
        if split == "train":
            return self.train_part[-1]
        raise CorpusError(f"unknown split {split!r}")


@dataclass
class PaddedBatch:
    """Left-padded training batch; ``pad_mask`` is True at padding slots."""

    user_index: np.ndarray  # [B]
    input_ids: np.ndarray  # [B, L]
    target_ids: np.ndarray  # [B, L]
    pad_mask: np.ndarray  # [B, L]
    augmented_input_ids: np.ndarray  # [B, L]

    def __len__(self) -> int:
        return len(self.user_index)


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------


def load_interactions(path, format: str | None = None) -> list[RawInteraction]:
    """Read ``user, item, timestamp`` rows in file order.

    ``format`` is ``tsv`` or ``csv``; inferred from the suffix when omitted.
    Lines with more than three fields use the last field as the timestamp,
    which covers rating dumps laid out as ``user,item,rating,timestamp``.
    Blank lines and ``#`` comments are skipped.
    """
    path = Path(path)
    if format is None:
        format = "csv" if path.suffix.lower() == ".csv" else "tsv"
    if format not in ("tsv", "csv"):
        raise CorpusError(f"unknown format {format!r}")
    sep = "\t" if format == "tsv" else ","
    rows: list[RawInteraction] = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split(sep)
            if len(parts) < 3:
                raise CorpusError(f"{path}:{lineno}: expected user{sep!r}item{sep!r}timestamp, got {line!r}")
            user, item, ts = parts[0].strip(), parts[1].strip(), parts[-1].strip()
            if not user or not item:
                raise CorpusError(f"{path}:{lineno}: empty user or item field")
            try:
                stamp = int(ts)
            except ValueError:
                try:
                    stamp = int(float(ts))
                except ValueError:
                    raise CorpusError(f"{path}:{lineno}: bad timestamp {ts!r}") from None
            rows.append(RawInteraction(user, item, stamp))
    logger.info("loaded %d interactions from %s", len(rows), path)
    return rows


def k_core(interactions: Sequence[RawInteraction], min_count: int) -> list[RawInteraction]:
    """Drop users and items with fewer than ``min_count`` rows until nothing changes."""
    rows = list(interactions)
    while True:
        users = Counter(r.user_key for r in rows)
        items = Counter(r.item_key for r in rows)
        kept = [r for r in rows if users[r.user_key] >= min_count and items[r.item_key] >= min_count]
        if len(kept) == len(rows):
            return kept
        rows = kept


def build_sequences(
    interactions: Sequence[RawInteraction], min_count: int = 5
) -> tuple[list[InteractionSequence], ItemCatalog]:
    if min_count < 1:
        raise CorpusError(f"min_count must be >= 1, got {min_count}")
    rows = k_core(interactions, min_count)

    per_user: dict[str, list[tuple[int, int, str]]] = {}
    for order, r in enumerate(rows):
        per_user.setdefault(r.user_key, []).append((r.timestamp, order, r.item_key))
    for events in per_user.values():
        events.sort()  # (timestamp, file order) keeps ties stable

    ordered = {u: [it for _, _, it in ev] for u, ev in per_user.items() if len(ev) >= 3}
    if not ordered:
        raise CorpusError("empty corpus: every interaction was filtered out")

    keys: list[str] = []
    seen: set[str] = set()
    for r in rows:
        if r.user_key in ordered and r.item_key not in seen:
            seen.add(r.item_key)
            keys.append(r.item_key)
    catalog = ItemCatalog(keys)

    sequences = [
        InteractionSequence(uid, tuple(catalog.index_of(k) for k in items))
        for uid, items in enumerate(ordered.values(), start=1)
    ]
    return sequences, catalog


def corpus_stats(sequences: Sequence[InteractionSequence], catalog: ItemCatalog) -> dict[str, float]:
    n = sum(len(s.items) for s in sequences)
    return {
        "users": len(sequences),
        "items": catalog.item_count,
        "interactions": n,
        "ints_per_item": round(n / catalog.item_count, 2),
        "avg_len": round(n / len(sequences), 2),
    }


# ---------------------------------------------------------------------------
# sequence transforms
# ---------------------------------------------------------------------------


def pad_truncate(items: Sequence[int], max_len: int = 20) -> list[int]:
    if max_len < 1:
        raise CorpusError(f"max_len must be >= 1, got {max_len}")
    tail = list(items)[-max_len:]
    return [PAD] * (max_len - len(tail)) + tail


def augment(items: Sequence[int], rng: np.random.Generator, kind: str, ratio: float) -> list[int]:
    """Return an augmented copy of ``items``.

    crop keeps ceil(ratio*n) contiguous items; mask zeroes floor(ratio*n)
    positions; reorder shuffles a contiguous span of floor(ratio*n) items.
    """
    if not 0.0 < ratio < 1.0:
        raise CorpusError(f"augmentation ratio must lie in (0, 1), got {ratio}")
    items = list(items)
    n = len(items)
    if n == 0:
        raise CorpusError("cannot augment an empty sequence")
    if kind == "crop":
        keep = max(1, math.ceil(ratio * n))
        start = int(rng.integers(0, n - keep + 1))
        return items[start : start + keep]
    if kind == "mask":
        count = math.floor(ratio * n)
        for pos in rng.choice(n, size=count, replace=False):
            items[pos] = PAD
        return items
    if kind == "reorder":
        span = math.floor(ratio * n)
        start = int(rng.integers(0, n - span + 1))
        window = items[start : start + span]
        items[start : start + span] = [window[i] for i in rng.permutation(span)]
        return items
    raise CorpusError(f"unknown augmentation {kind!r}")


def random_view(items: Sequence[int], rng: np.random.Generator, ratios: dict[str, float] | None = None) -> list[int]:
    ratios = ratios or DEFAULT_RATIOS
    kind = AUGMENT_KINDS[int(rng.integers(0, len(AUGMENT_KINDS)))]
    return augment(items, rng, kind, ratios[kind])


# ---------------------------------------------------------------------------
# subgroups
# ---------------------------------------------------------------------------


def length_bucket(length: int) -> str:
    if length <= 10:
        return LENGTH_BUCKETS[0]
    if length <= 20:
        return LENGTH_BUCKETS[1]
    if length <= 30:
        return LENGTH_BUCKETS[2]
    return LENGTH_BUCKETS[3]


def frequency_bucket(freq: int) -> str:
    if freq <= 20:
        return FREQUENCY_BUCKETS[0]
    if freq <= 40:
        return FREQUENCY_BUCKETS[1]
    if freq <= 60:
        return FREQUENCY_BUCKETS[2]
    return FREQUENCY_BUCKETS[3]


def training_frequency(sequences: Sequence[InteractionSequence], include_valid: bool = False) -> Counter:
    freq: Counter = Counter()
    for s in sequences:
        freq.update(s.train_part)
        if include_valid:
            freq[s.valid_target] += 1
    return freq


def bucket(
    sequences: Sequence[InteractionSequence], split: str = "test", include_valid: bool = False
) -> list[tuple[str, str]]:
    """(length bucket, target-frequency bucket) for every sequence.

    Length is the training-part length; frequency counts the split target's
    occurrences across all training parts (plus validation targets when
    ``include_valid`` is set).
    """
    freq = training_frequency(sequences, include_valid)
    return [(length_bucket(len(s.train_part)), frequency_bucket(freq[s.target(split)])) for s in sequences]


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def training_pairs(seq: InteractionSequence, max_len: int) -> tuple[list[int], list[int]]:
    """Input and next-item target lists over the training part, newest last."""
    part = seq.train_part[-(max_len + 1) :]
    return list(part[:-1]), list(part[1:])


def make_batch(
    sequences: Sequence[InteractionSequence],
    max_len: int,
    rng: np.random.Generator,
    ratios: dict[str, float] | None = None,
    augment_views: bool = True,
) -> PaddedBatch:
    users, inputs, targets, views = [], [], [], []
    for seq in sequences:
        inp, tgt = training_pairs(seq, max_len)
        users.append(seq.user_index)
        inputs.append(pad_truncate(inp, max_len))
        targets.append(pad_truncate(tgt, max_len))
        view = random_view(inp, rng, ratios) if augment_views and inp else inp
        views.append(pad_truncate(view, max_len))
    input_ids = np.asarray(inputs, dtype=np.int64).reshape(len(users), max_len)
    return PaddedBatch(
        user_index=np.asarray(users, dtype=np.int64),
        input_ids=input_ids,
        target_ids=np.asarray(targets, dtype=np.int64).reshape(len(users), max_len),
        pad_mask=input_ids == PAD,
        augmented_input_ids=np.asarray(views, dtype=np.int64).reshape(len(users), max_len),
    )


def trainable(sequences: Sequence[InteractionSequence]) -> list[InteractionSequence]:
    """Sequences with at least one (input, target) pair in the training part."""
    return [s for s in sequences if len(s.train_part) >= 2]


def iter_batches(
    sequences: Sequence[InteractionSequence],
    batch_size: int,
    max_len: int,
    order_rng: np.random.Generator,
    batch_rng,
    ratios: dict[str, float] | None = None,
    augment_views: bool = True,
) -> Iterator[PaddedBatch]:
    """Shuffle with ``order_rng``; ``batch_rng(i)`` supplies the augmentation rng of batch ``i``."""
    pool = trainable(sequences)
    order = order_rng.permutation(len(pool))
    for i, start in enumerate(range(0, len(pool), batch_size)):
        chunk = [pool[j] for j in order[start : start + batch_size]]
        yield make_batch(chunk, max_len, batch_rng(i), ratios, augment_views)


def eval_inputs(
    sequences: Sequence[InteractionSequence], split: str, max_len: int
) -> tuple[np.ndarray, np.ndarray]:
    """Left-padded histories [U, L] and targets [U] for ``split``."""
    if split not in SPLITS:
        raise CorpusError(f"unknown split {split!r}")
    hist = np.asarray([pad_truncate(s.history(split), max_len) for s in sequences], dtype=np.int64)
    targets = np.asarray([s.target(split) for s in sequences], dtype=np.int64)
    return hist.reshape(len(sequences), max_len), targets


def history_matrix(sequences: Sequence[InteractionSequence], item_count: int) -> np.ndarray:
    """Boolean [max_user+1, item_count+1]; True where the user interacted with the item."""
    top = max(s.user_index for s in sequences)
    seen = np.zeros((top + 1, item_count + 1), dtype=bool)
    for s in sequences:
        seen[s.user_index, list(s.items)] = True
    seen[:, PAD] = True
    return seen


# ---------------------------------------------------------------------------
# cache files
# ---------------------------------------------------------------------------


def write_corpus(workdir, sequences: Sequence[InteractionSequence], catalog: ItemCatalog) -> dict[str, float]:
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    with (workdir / CATALOG_FILE).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(CORPUS_HEADER + "\n")
        for idx, key in enumerate(catalog.keys, start=1):
            fh.write(f"{key}\t{idx}\n")
    with (workdir / SEQUENCES_FILE).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(CORPUS_HEADER + "\n")
        for s in sequences:
            fh.write(f"{s.user_index}\t{' '.join(map(str, s.items))}\n")
    stats = corpus_stats(sequences, catalog)
    with (workdir / STATS_FILE).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(CORPUS_HEADER + "\n")
        fh.write(" ".join(f"{k}={v}" for k, v in stats.items()) + "\n")
    return stats


def _read_body(path: Path) -> list[str]:
    if not path.exists():
        raise CorpusError(f"missing corpus file {path}; run `prepare` first")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != CORPUS_HEADER:
        raise CorpusError(f"{path}: missing header {CORPUS_HEADER!r}")
    return lines[1:]


def read_corpus(workdir) -> tuple[list[InteractionSequence], ItemCatalog]:
    workdir = Path(workdir)
    keys = []
    for n, line in enumerate(_read_body(workdir / CATALOG_FILE), start=1):
        key, idx = line.rsplit("\t", 1)
        if int(idx) != n:
            raise CorpusError(f"catalog out of order at index {idx}")
        keys.append(key)
    catalog = ItemCatalog(keys)
    sequences = []
    for line in _read_body(workdir / SEQUENCES_FILE):
        uid, items = line.split("\t")
        sequences.append(InteractionSequence(int(uid), tuple(int(x) for x in items.split())))
    return sequences, catalog


def corpus_hash(workdir) -> str:
    h = hashlib.sha256()
    for name in (CATALOG_FILE, SEQUENCES_FILE):
        h.update((Path(workdir) / name).read_bytes())
    return h.hexdigest()
