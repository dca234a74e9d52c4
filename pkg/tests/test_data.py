import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fatrec.data import (TEST, TRAIN, VALID, DataError, build_item_user_index,
                         build_training_samples, chrono_split, filter_sparse, ingest,
                         iter_training_samples, load_categories, prepare, read_cache,
                         select_eval_target, split_sizes, write_cache)


def _write(tmp_path, text, name="log.tsv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def _split_from_rows(tmp_path, rows):
    text = "".join(f"{u}\t{i}\t{r}\t{t}\n" for u, i, r, t in rows)
    return chrono_split(ingest(_write(tmp_path, text)))


def test_ingest_sorts_by_timestamp(tmp_path):
    lg = ingest(_write(tmp_path, "u1\ti1\t5\t100\nu1\ti2\t4\t50\nu2\ti1\t3\t10\n"))
    items = lg.catalog.item_ids
    assert [items[k] for k in lg.sequence(0)] == ["i2", "i1"]


def test_ingest_movielens_dat(tmp_path):
    lg = ingest(_write(tmp_path, "1::1193::5::978300760\n", "r.dat"), "movielens-dat")
    assert lg.catalog.user_ids == ["1"] and lg.catalog.item_ids == ["1193"]
    assert lg.ratings[0] == 5.0 and lg.timestamps[0] == 978300760


def test_ingest_keeps_duplicates(tmp_path):
    lg = ingest(_write(tmp_path, "a\tx\t1\t5\na\tx\t1\t5\nb\tx\t2\t6\n"))
    assert len(lg) == 3


def test_ingest_tie_broken_by_input_order(tmp_path):
    lg = ingest(_write(tmp_path, "a\tx\t1\t5\na\ty\t1\t5\na\tz\t1\t4\n"))
    assert [lg.catalog.item_ids[k] for k in lg.sequence(0)] == ["z", "x", "y"]


def test_ingest_header_with_string_ids(tmp_path):
    lg = ingest(_write(tmp_path, "user\titem\trating\ttimestamp\nu1\ti1\t5\t100\n"))
    assert len(lg) == 1


def test_ingest_errors(tmp_path):
    with pytest.raises(DataError, match="line 2"):
        ingest(_write(tmp_path, "a\tx\t1\t5\nb\ty\n"))
    with pytest.raises(DataError, match="line 2"):
        ingest(_write(tmp_path, "a\tx\t1\t5\nb\ty\tbad\t3\n"))
    with pytest.raises(DataError):
        ingest(_write(tmp_path, "\n\n"))


def test_filter_identity(synth_paths):
    lg = ingest(synth_paths[0])
    out = filter_sparse(lg, 1, 1)
    assert len(out) == len(lg)


def test_filter_fixpoint_cascade(tmp_path):
    # u5 has 2 records; removing it drops item z below 3, which removes u4's z record,
    # taking u4 below its threshold on the second pass
    rows = []
    for u in range(1, 4):
        rows += [(f"u{u}", "x", 1, 1), (f"u{u}", "y", 1, 2), (f"u{u}", "w", 1, 3)]
    rows += [("u4", "x", 1, 1), ("u4", "y", 1, 2), ("u4", "z", 1, 3)]
    rows += [("u5", "z", 1, 1), ("u5", "w", 1, 2)]
    text = "".join(f"{u}\t{i}\t{r}\t{t}\n" for u, i, r, t in rows)
    lg = filter_sparse(ingest(_write(tmp_path, text)), 3, 3)
    assert sorted(lg.catalog.user_ids) == ["u1", "u2", "u3"]
    assert "z" not in lg.catalog.item_ids


def test_filter_satisfies_thresholds(synth_paths):
    lg = filter_sparse(ingest(synth_paths[0]), 15, 6)
    assert np.bincount(lg.users).min() >= 15
    assert np.bincount(lg.items).min() >= 6
    assert lg.catalog.n_users == len(np.unique(lg.users))


def test_filter_empty_raises(synth_paths):
    with pytest.raises(DataError):
        filter_sparse(ingest(synth_paths[0]), 10_000, 1)


@pytest.mark.parametrize("n,expect", [(10, (8, 1, 1)), (20, (16, 2, 2)), (5, (3, 1, 1)),
                                      (15, (11, 2, 2)), (3, (1, 1, 1))])
def test_split_sizes(n, expect):
    assert split_sizes(n) == expect


def test_split_drops_tiny_users(tmp_path):
    sp = _split_from_rows(tmp_path, [("a", "x", 1, 1), ("a", "y", 1, 2),
                                     ("b", "x", 1, 1), ("b", "y", 1, 2), ("b", "z", 1, 3)])
    assert sp.catalog.user_ids == ["b"]


def test_split_invariants(synth_split):
    sp = synth_split
    for u in range(sp.n_users):
        tr, va, te = (sp.times_of(u, c) for c in (TRAIN, VALID, TEST))
        assert len(tr) and len(te)
        assert tr.max() <= va.min() <= te.min()
        assert np.all(np.diff(np.concatenate([tr, va, te])) >= 0)


def test_training_samples_rule(tmp_path):
    rows = [("a", k, 1, t) for t, k in enumerate("abcdefghij")]
    sp = _split_from_rows(tmp_path, rows)
    samples = list(iter_training_samples(sp, build_training_samples(sp, 50)))
    ids = sp.catalog.item_ids
    assert [[ids[x] for x in s.prefix] for s in samples[:2]] == [["a"], ["a", "b"]]
    assert [ids[s.target] for s in samples[:2]] == ["b", "c"]
    assert len(samples) == 7  # 8 train items


def test_training_samples_truncation(tmp_path):
    rows = [("a", k, 1, t) for t, k in enumerate("abcdefghij")]
    sp = _split_from_rows(tmp_path, rows)
    last = list(iter_training_samples(sp, build_training_samples(sp, 2)))[-1]
    ids = sp.catalog.item_ids
    assert [ids[x] for x in last.prefix] == ["f", "g"] and ids[last.target] == "h"


def test_training_samples_count(synth_split):
    n = sum(max(0, len(synth_split.items_of(u)) - 1) for u in range(synth_split.n_users))
    assert len(build_training_samples(synth_split)) == n


def test_single_train_item_emits_nothing(tmp_path):
    sp = _split_from_rows(tmp_path, [("a", "x", 1, 1), ("a", "y", 1, 2), ("a", "z", 1, 3)])
    assert len(build_training_samples(sp)) == 0


def test_item_user_index_excludes_heldout(tmp_path):
    rows = []
    for u in ("2", "7"):
        rows += [(u, f"f{k}", 1, k) for k in range(8)] + [(u, "x", 1, 0)] + [(u, "t1", 1, 99), (u, "t2", 1, 100)]
    rows += [("9", f"f{k}", 1, k) for k in range(8)] + [("9", "q", 1, 50), ("9", "x", 1, 101)]
    sp = _split_from_rows(tmp_path, rows)
    idx = build_item_user_index(sp)
    x = sp.catalog.item_index()["x"]
    users = sorted(sp.catalog.user_ids[u] for u in idx[x])
    assert users == ["2", "7"]
    assert len(idx[sp.catalog.item_index()["t2"]]) == 0


def test_item_user_index_round_trip(synth_split):
    idx = build_item_user_index(synth_split)
    m = synth_split.train_mask()
    truth = set(zip(synth_split.items[m].tolist(), synth_split.users[m].tolist()))
    rebuilt = {(i, int(u)) for i in range(len(idx)) for u in idx[i]}
    assert rebuilt == truth and idx.n_pairs() == len(truth)
    assert all(np.all(np.diff(idx[i]) > 0) for i in range(len(idx)))


def test_eval_target_first_of_test(tmp_path):
    rows = [("a", f"i{k}", 1, k) for k in range(30)]
    sp = _split_from_rows(tmp_path, rows)
    t = select_eval_target(0, sp, "first-of-test")
    test_items = sp.items_of(0, TEST)
    assert t.target == test_items[0] and t.ground_truth == set(test_items.tolist())
    assert len(t.history) == 27 and t.history_times.max() < t.target_time


def test_eval_target_seeded_random(synth_split):
    for u in range(5):
        a = select_eval_target(u, synth_split, "seeded-random", 3)
        b = select_eval_target(u, synth_split, "seeded-random", 3)
        assert a.target == b.target and a.target in a.ground_truth
    with pytest.raises(ValueError):
        select_eval_target(0, synth_split, "nope")


def test_eval_target_valid_holdout(synth_split):
    t = select_eval_target(0, synth_split, holdout=VALID)
    assert len(t.history) == len(synth_split.items_of(0, TRAIN))


def test_cache_round_trip(synth_split, tmp_path):
    write_cache(synth_split, tmp_path / "c.fatd")
    back = read_cache(tmp_path / "c.fatd")
    for a in ("users", "items", "ratings", "timestamps", "segment"):
        assert np.array_equal(getattr(back, a), getattr(synth_split, a))
    assert back.catalog.user_ids == synth_split.catalog.user_ids
    assert back.catalog.item_ids == synth_split.catalog.item_ids
    assert np.array_equal(back.catalog.item_category, synth_split.catalog.item_category)
    assert back.summary() == synth_split.summary()
    assert (tmp_path / "c.fatd").read_bytes()[:4] == b"FATD"


def test_cache_bad_magic(tmp_path):
    p = _write(tmp_path, "nope", "x.fatd")
    with pytest.raises(DataError):
        read_cache(p)


def test_categories_movielens(tmp_path):
    lg = ingest(_write(tmp_path, "1::10::5::1\n1::11::5::2\n", "r.dat"), "movielens-dat")
    cat = load_categories(_write(tmp_path, "10::A (1995)::Comedy|Drama\n", "m.dat"), lg.catalog,
                          "movielens-dat")
    assert cat.category_names == ["Comedy"]
    assert cat.item_category.tolist() == [0, -1]


def test_prepare_records_raw_counts(synth_paths):
    sp = prepare(synth_paths[0], "tsv", 5, 2)
    s = sp.summary()
    assert s["raw_users"] == 40 and s["min_user_records"] == 5
    assert s["interactions"] == s["train"] + s["valid"] + s["test"]


@settings(max_examples=50, deadline=None)
@given(st.integers(3, 500))
def test_split_sizes_property(n):
    tr, va, te = split_sizes(n)
    assert tr + va + te == n and va >= 1 and te >= 1 and tr >= 1
