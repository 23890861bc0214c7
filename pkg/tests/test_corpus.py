import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cddrec.corpus import (
    CORPUS_HEADER,
    PAD,
    CorpusError,
    InteractionSequence,
    ItemCatalog,
    RawInteraction,
    augment,
    bucket,
    build_sequences,
    eval_inputs,
    frequency_bucket,
    history_matrix,
    iter_batches,
    length_bucket,
    load_interactions,
    make_batch,
    pad_truncate,
    read_corpus,
    write_corpus,
)


def rows_for(users: dict[str, str]):
    out, ts = [], 0
    for user, items in users.items():
        for item in items.split():
            ts += 1
            out.append(RawInteraction(user, item, ts))
    return out


# --------------------------------------------------------------------- loading


def test_empty_file(tmp_path):
    p = tmp_path / "empty.tsv"
    p.write_text("")
    assert load_interactions(p) == []


def test_three_line_fixture_keeps_order(tmp_path):
    p = tmp_path / "raw.csv"
    p.write_text("u1,a,1\nu1,b,2\nu2,a,5\n")
    assert load_interactions(p) == [
        RawInteraction("u1", "a", 1),
        RawInteraction("u1", "b", 2),
        RawInteraction("u2", "a", 5),
    ]


def test_tab_format_and_extra_columns(tmp_path):
    p = tmp_path / "raw.tsv"
    p.write_text("u1\ta\t5.0\t100\n\n# comment\nu2\tb\t3.0\t200\n")
    assert load_interactions(p, "tsv") == [RawInteraction("u1", "a", 100), RawInteraction("u2", "b", 200)]


def test_malformed_line_reports_line_number(tmp_path):
    p = tmp_path / "raw.tsv"
    p.write_text("u1\ta\t1\nu1\tb\n")
    with pytest.raises(CorpusError, match=":2:"):
        load_interactions(p)


def test_bad_timestamp(tmp_path):
    p = tmp_path / "raw.tsv"
    p.write_text("u1\ta\tyesterday\n")
    with pytest.raises(CorpusError, match=":1:"):
        load_interactions(p)


# ------------------------------------------------------------------- filtering


def test_threshold_one_keeps_everything():
    rows = rows_for({"u1": "a b c", "u2": "d e f"})
    seqs, cat = build_sequences(rows, min_count=1)
    assert [s.items for s in seqs] == [(1, 2, 3), (4, 5, 6)]
    assert cat.keys == ["a", "b", "c", "d", "e", "f"]


def test_fixpoint_on_six_user_fixture():
    """Hand-run of the iterative filter at min_count=5.

    counts: a=b=c=d=6, e=5, z=4, f=1.
    pass 1: z and f fall below 5; u1 shrinks to 4 interactions.
    pass 2: u1 is removed; a..e drop to 5 each, u2..u6 keep 5 each.
    pass 3: no change -> 5 users x 5 items = 25 interactions.
    """
    rows = rows_for(
        {
            "u1": "a b c d z",
            "u2": "a b c d e z",
            "u3": "a b c d e z",
            "u4": "a b c d e z",
            "u5": "a b c d e",
            "u6": "a b c d e f",
        }
    )
    seqs, cat = build_sequences(rows, min_count=5)
    assert sorted(cat.keys) == ["a", "b", "c", "d", "e"]
    assert len(seqs) == 5
    assert sum(len(s.items) for s in seqs) == 25
    user_counts = [len(s.items) for s in seqs]
    item_counts = Counter(i for s in seqs for i in s.items)
    assert min(user_counts) >= 5 and min(item_counts.values()) >= 5


def test_chronological_sort_with_stable_ties():
    rows = [
        RawInteraction("u", "late", 9),
        RawInteraction("u", "tie1", 5),
        RawInteraction("u", "early", 1),
        RawInteraction("u", "tie2", 5),
    ]
    seqs, cat = build_sequences(rows, min_count=1)
    assert [cat.key_of(i) for i in seqs[0].items] == ["early", "tie1", "tie2", "late"]


def test_short_sequences_dropped_and_empty_corpus():
    rows = rows_for({"u1": "a b", "u2": "a b c"})
    seqs, _ = build_sequences(rows, min_count=1)
    assert len(seqs) == 1
    with pytest.raises(CorpusError, match="empty corpus"):
        build_sequences(rows_for({"u1": "a b"}), min_count=1)
    with pytest.raises(CorpusError):
        build_sequences(rows, min_count=0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 8), st.integers(0, 6)), min_size=1, max_size=120), st.integers(1, 4))
def test_filter_fixpoint_property(pairs, k):
    rows = [RawInteraction(f"u{u}", f"i{i}", n) for n, (u, i) in enumerate(pairs)]
    try:
        seqs, cat = build_sequences(rows, min_count=k)
    except CorpusError:
        return
    items = Counter(i for s in seqs for i in s.items)
    assert all(len(s.items) >= max(k, 3) for s in seqs)
    if k >= 3:  # below 3 the short-sequence drop can undercut the item threshold
        assert min(items.values()) >= k
    # catalog round trip
    for key in cat.keys:
        assert cat.key_of(cat.index_of(key)) == key
    assert set(items) <= set(range(1, cat.item_count + 1))


def test_catalog_bijection():
    cat = ItemCatalog(["x", "y"])
    assert cat.index_of("x") == 1 and cat.key_of(2) == "y"
    with pytest.raises(CorpusError):
        cat.key_of(0)
    with pytest.raises(CorpusError):
        ItemCatalog(["x", "x"])


def test_sequence_splits():
    s = InteractionSequence(1, (4, 5, 6, 7))
    assert s.train_part == (4, 5) and s.valid_target == 6 and s.test_target == 7
    assert s.history("valid") == (4, 5) and s.history("test") == (4, 5, 6)
    assert s.history("train") == (4,) and s.target("train") == 5
    with pytest.raises(CorpusError):
        InteractionSequence(1, (1, 2))
    with pytest.raises(CorpusError):
        InteractionSequence(1, (1, 0, 2))


# -------------------------------------------------------------------- padding


def test_pad_truncate_examples():
    assert pad_truncate([5, 6], 4) == [0, 0, 5, 6]
    assert pad_truncate(list(range(1, 26)), 20) == list(range(6, 26))
    assert pad_truncate([], 3) == [0, 0, 0]
    with pytest.raises(CorpusError):
        pad_truncate([1], 0)


@given(st.lists(st.integers(1, 100), max_size=50), st.integers(1, 30))
def test_pad_truncate_length(items, max_len):
    out = pad_truncate(items, max_len)
    assert len(out) == max_len
    assert [x for x in out if x] == items[-max_len:]


# --------------------------------------------------------------- augmentation


def test_mask_with_tiny_ratio_is_identity(rng):
    assert augment([1, 2, 3], rng, "mask", 1e-9) == [1, 2, 3]


def test_crop_matches_enumerated_start():
    """keep = ceil(0.5 * 4) = 2; starts 0..2 give [1,2], [2,3], [3,4]."""
    spans = {0: [1, 2], 1: [2, 3], 2: [3, 4]}
    seen_start_one = False
    for seed in range(30):
        start = int(np.random.default_rng(seed).integers(0, 3))
        out = augment([1, 2, 3, 4], np.random.default_rng(seed), "crop", 0.5)
        assert out == spans[start]
        seen_start_one |= start == 1
    assert seen_start_one


def test_reorder_preserves_outside_window():
    for seed in range(20):
        out = augment([1, 2, 3, 4], np.random.default_rng(seed), "reorder", 0.5)
        assert sorted(out) == [1, 2, 3, 4]
        moved = [i for i, (a, b) in enumerate(zip(out, [1, 2, 3, 4])) if a != b]
        if moved:
            assert max(moved) - min(moved) == 1  # span of floor(0.5 * 4) = 2


def test_augment_errors(rng):
    with pytest.raises(CorpusError):
        augment([1, 2], rng, "mask", 0.0)
    with pytest.raises(CorpusError):
        augment([1, 2], rng, "mask", 1.0)
    with pytest.raises(CorpusError):
        augment([1, 2], rng, "rotate", 0.5)
    with pytest.raises(CorpusError):
        augment([], rng, "crop", 0.5)


@settings(max_examples=80, deadline=None)
@given(
    st.lists(st.integers(1, 30), min_size=1, max_size=25),
    st.sampled_from(["crop", "mask", "reorder"]),
    st.floats(0.01, 0.99),
    st.integers(0, 2**32 - 1),
)
def test_augment_properties(items, kind, ratio, seed):
    out = augment(items, np.random.default_rng(seed), kind, ratio)
    again = augment(items, np.random.default_rng(seed), kind, ratio)
    assert out == again
    if kind == "mask":
        assert set(out) <= set(items) | {PAD}
        assert sum(1 for x in out if x == PAD) == math.floor(ratio * len(items))
    elif kind == "reorder":
        assert sorted(out) == sorted(items)
    else:
        k = len(out)
        assert k == max(1, math.ceil(ratio * len(items)))
        assert any(items[s : s + k] == out for s in range(len(items) - k + 1))


# -------------------------------------------------------------------- buckets


@pytest.mark.parametrize(
    "length,label", [(1, "[≤10]"), (10, "[≤10]"), (11, "(10,20]"), (20, "(10,20]"), (30, "(20,30]"), (31, "(>30]")]
)
def test_length_buckets(length, label):
    assert length_bucket(length) == label


@pytest.mark.parametrize("freq,label", [(0, "[≤20]"), (20, "[≤20]"), (21, "(20,40]"), (60, "(40,60]"), (61, "(>60]")])
def test_frequency_buckets(freq, label):
    assert frequency_bucket(freq) == label


def test_bucket_counts_training_occurrences(tiny_sequences):
    # train parts: (1,2,3), (2,3), (5,); test targets 5, 6, 1
    labels = bucket(tiny_sequences, "test")
    assert [l for l, _ in labels] == ["[≤10]"] * 3
    seqs = [InteractionSequence(1, tuple([7] * 25 + [8, 7])), InteractionSequence(2, (7, 8, 9))]
    assert bucket(seqs, "test")[0] == ("(20,30]", "(20,40]")  # item 7 occurs 25 times in training
    assert bucket(seqs, "valid")[1] == ("[≤10]", "[≤20]")
    # validation targets only counted on request
    assert bucket(seqs, "test", include_valid=True)[1][1] == "[≤20]"


# -------------------------------------------------------------------- batches


def test_batch_shift_property(tiny_sequences, rng):
    batch = make_batch(tiny_sequences, 4, rng)
    for b in range(len(batch)):
        inp, tgt = batch.input_ids[b], batch.target_ids[b]
        for j in range(3):
            if inp[j] and inp[j + 1]:
                assert tgt[j] == inp[j + 1]
        assert np.array_equal(batch.pad_mask[b], inp == 0)
        assert np.array_equal(inp == 0, tgt == 0)
    # user 1: train part (1,2,3) -> input [0,0,1,2], target [0,0,2,3]
    assert batch.input_ids[0].tolist() == [0, 0, 1, 2]
    assert batch.target_ids[0].tolist() == [0, 0, 2, 3]


def test_split_disjointness(tiny_sequences, rng):
    batch = make_batch(tiny_sequences, 6, rng)
    for seq, tgt in zip(tiny_sequences, batch.target_ids):
        if len(seq.train_part) < 2:
            assert not tgt.any()
            continue
        # the final training target is the last item of the train part, never a held-out slot
        assert tgt[-1] == seq.train_part[-1]
        assert len([x for x in tgt if x]) == len(seq.train_part) - 1


def test_iter_batches_skips_untrainable_and_is_deterministic(tiny_sequences):
    def run():
        return list(
            iter_batches(tiny_sequences, 2, 4, np.random.default_rng(3), lambda i: np.random.default_rng(100 + i))
        )

    first, second = run(), run()
    assert sum(len(b) for b in first) == 2  # user 3 has a one-item training part
    for a, b in zip(first, second):
        assert np.array_equal(a.input_ids, b.input_ids)
        assert np.array_equal(a.augmented_input_ids, b.augmented_input_ids)


def test_eval_inputs(tiny_sequences):
    hist, targets = eval_inputs(tiny_sequences, "valid", 4)
    assert hist[0].tolist() == [0, 1, 2, 3] and targets.tolist() == [4, 4, 6]
    hist, targets = eval_inputs(tiny_sequences, "test", 4)
    assert hist[0].tolist() == [1, 2, 3, 4] and targets.tolist() == [5, 6, 1]


def test_history_matrix(tiny_sequences):
    seen = history_matrix(tiny_sequences, 6)
    assert seen[3].tolist() == [True, True, False, False, False, True, True]


# ------------------------------------------------------------------ cache files


def test_cache_round_trip(tmp_path, tiny_sequences):
    cat = ItemCatalog(["a", "b", "c", "d", "e", "f"])
    stats = write_corpus(tmp_path, tiny_sequences, cat)
    assert stats["users"] == 3 and stats["interactions"] == 12
    for name in ("catalog.tsv", "sequences.tsv", "stats.txt"):
        assert (tmp_path / name).read_text().splitlines()[0] == CORPUS_HEADER
    seqs, cat2 = read_corpus(tmp_path)
    assert seqs == tiny_sequences and cat2.keys == cat.keys


def test_cache_requires_header(tmp_path, tiny_sequences):
    write_corpus(tmp_path, tiny_sequences, ItemCatalog(list("abcdef")))
    path = tmp_path / "sequences.tsv"
    path.write_text("\n".join(path.read_text().splitlines()[1:]))
    with pytest.raises(CorpusError, match="header"):
        read_corpus(tmp_path)
