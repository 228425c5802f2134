import json

import pytest

from mvrec.data import (
    DatasetStats,
    compute_stats,
    density_percent,
    load_interactions,
    load_metadata,
    load_split_manifest,
    metadata_by_item,
    write_split_manifest,
    _split_sizes,
)
from mvrec.errors import (
    DataError,
    DuplicateItemIdError,
    EmptyAfterKCoreError,
    ParameterError,
    ParseError,
)


def write_tsv(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write("\t".join(str(x) for x in row) + "\n")


@pytest.fixture
def dense_4x3(tmp_path):
    rows = [(f"u{u}", f"i{i}", 100 + i) for u in range(4) for i in range(3)]
    path = tmp_path / "inter.tsv"
    write_tsv(path, rows)
    return path


def test_split_size_rule():
    # val and test each floor(n/10), remainder to train; tiny users all-train
    assert _split_sizes(1) == (1, 0, 0)
    assert _split_sizes(2) == (2, 0, 0)
    assert _split_sizes(3) == (3, 0, 0)
    assert _split_sizes(9) == (9, 0, 0)
    assert _split_sizes(10) == (8, 1, 1)
    assert _split_sizes(12) == (10, 1, 1)
    assert _split_sizes(25) == (21, 2, 2)


def test_load_interactions_4x3_split_counts(dense_4x3):
    # oracle: enumerate the documented rounding rule for n=3 per user
    ds = load_interactions(dense_4x3, k_core=1, seed=7)
    assert ds.n_users == 4 and ds.n_items == 3
    for u in range(4):
        n = len(ds.train_positives[u])
        expect = _split_sizes(3)
        assert (n, len(ds.val_positives[u]), len(ds.test_positives[u])) == expect


def test_split_counts_larger_user(tmp_path):
    rows = [("u0", f"i{i:02d}", i) for i in range(12)]
    rows += [(f"u{u}", f"i{i:02d}", i) for u in range(1, 3) for i in range(12)]
    path = tmp_path / "inter.tsv"
    write_tsv(path, rows)
    ds = load_interactions(path, k_core=1, seed=3)
    for u in range(ds.n_users):
        sizes = (
            len(ds.train_positives[u]),
            len(ds.val_positives[u]),
            len(ds.test_positives[u]),
        )
        assert sizes == _split_sizes(12)
        joined = set(ds.train_positives[u]) | set(ds.val_positives[u]) | set(ds.test_positives[u])
        assert len(joined) == 12


def test_split_deterministic(dense_4x3):
    a = load_interactions(dense_4x3, k_core=1, seed=7)
    b = load_interactions(dense_4x3, k_core=1, seed=7)
    assert a == b
    c = load_interactions(dense_4x3, k_core=1, seed=8)
    assert a.user_ids == c.user_ids and a.item_ids == c.item_ids


def test_kcore_fixpoint(tmp_path):
    # u0 and u1 share 2 items; u2 has a single interaction and must drop at k=2
    rows = [
        ("u0", "a", 1), ("u0", "b", 2),
        ("u1", "a", 3), ("u1", "b", 4),
        ("u2", "c", 5),
    ]
    path = tmp_path / "inter.tsv"
    write_tsv(path, rows)
    ds = load_interactions(path, k_core=2, seed=0)
    assert ds.user_ids == ("u0", "u1")
    assert ds.item_ids == ("a", "b")
    # re-running the filter on the surviving graph changes nothing
    for u in range(ds.n_users):
        total = sum(len(ds.positives(s)[u]) for s in ("train", "val", "test"))
        assert total >= 2


def test_kcore_empty_error(tmp_path):
    path = tmp_path / "inter.tsv"
    write_tsv(path, [("u0", "a", 1)])
    with pytest.raises(EmptyAfterKCoreError):
        load_interactions(path, k_core=3)


def test_degenerate_single_pair(tmp_path):
    path = tmp_path / "inter.tsv"
    write_tsv(path, [("u0", "a", 1)])
    ds = load_interactions(path, k_core=1)
    stats = compute_stats(ds)
    assert stats.density == 1.0


def test_parse_error_line_number(tmp_path):
    path = tmp_path / "inter.tsv"
    with open(path, "w") as fh:
        fh.write("u0\ta\t1\n")
        fh.write("not-tab-separated\n")
    with pytest.raises(ParseError) as err:
        load_interactions(path, k_core=1)
    assert ":2:" in str(err.value)


def test_bad_timestamp(tmp_path):
    path = tmp_path / "inter.tsv"
    with open(path, "w") as fh:
        fh.write("u0\ta\tnot-a-number\n")
    with pytest.raises(ParseError):
        load_interactions(path, k_core=1)


def test_k_core_validation():
    with pytest.raises(ParameterError):
        load_interactions("/nonexistent", k_core=0)


def test_duplicate_pairs_collapse(tmp_path):
    path = tmp_path / "inter.tsv"
    write_tsv(path, [("u0", "a", 5), ("u0", "a", 2), ("u0", "b", 1)])
    ds = load_interactions(path, k_core=1)
    assert ds.n_interactions == 2


def test_density_large_catalog_counts():
    assert density_percent(160792, 19445, 7050) == "0.117%"
    assert density_percent(296337, 35598, 18357) == "0.045%"
    assert density_percent(278677, 39387, 23033) == "0.031%"


def test_density_exact_recompute():
    stats = DatasetStats(19445, 7050, 160792, 160792 / (19445 * 7050))
    # counted density recomputes the integer interaction count exactly
    from fractions import Fraction

    frac = Fraction(stats.n_interactions, stats.n_users * stats.n_items)
    assert frac * stats.n_users * stats.n_items == stats.n_interactions


def test_stats_rejects_empty():
    with pytest.raises(DataError):
        DatasetStats(0, 0, 0, 0.0)


def test_load_metadata_full_and_flagged(tmp_path):
    path = tmp_path / "meta.jsonl"
    recs = [
        {"item_id": "a", "title": "T", "brand": "B", "categories": ["x", "y"],
         "description": "D", "image_path": "a.jpg"},
        {"item_id": "b", "title": "T2", "categories": "c1, c2", "description": "",
         "weird": 1},
    ]
    with open(path, "w") as fh:
        for r in recs:
            fh.write(json.dumps(r) + "\n")
    metas = load_metadata(path)
    assert metas[0].fields == {"title": "T", "brand": "B", "categories": "x, y", "description": "D"}
    assert metas[0].image_ref == "a.jpg"
    assert metas[0].missing_fields == ()
    assert metas[1].fields["brand"] == ""
    assert "brand" in metas[1].missing_fields
    assert metas[1].unknown_fields == ("weird",)


def test_load_metadata_duplicate_id(tmp_path):
    path = tmp_path / "meta.jsonl"
    with open(path, "w") as fh:
        fh.write(json.dumps({"item_id": "a", "title": "x"}) + "\n")
        fh.write(json.dumps({"item_id": "b", "title": "y"}) + "\n")
        fh.write(json.dumps({"item_id": "a", "title": "z"}) + "\n")
    with pytest.raises(DuplicateItemIdError) as err:
        load_metadata(path)
    assert "'a'" in str(err.value)


def test_metadata_by_item_reports_missing(tmp_path, dense_4x3):
    ds = load_interactions(dense_4x3, k_core=1, seed=0)
    path = tmp_path / "meta.jsonl"
    with open(path, "w") as fh:
        fh.write(json.dumps({"item_id": "i0", "title": "only one"}) + "\n")
        fh.write(json.dumps({"item_id": "zz", "title": "stranger"}) + "\n")
    metas = load_metadata(path)
    aligned, missing, extra = metadata_by_item(ds, metas)
    assert len(aligned) == ds.n_items
    assert missing == ["i1", "i2"]
    assert extra == ["zz"]
    assert aligned[1].fields["title"] == ""


def test_manifest_roundtrip(tmp_path, dense_4x3):
    ds = load_interactions(dense_4x3, k_core=1, seed=7)
    manifest = tmp_path / "splits.jsonl"
    write_split_manifest(ds, manifest)
    again = load_split_manifest(manifest)
    assert again == ds
    # byte-identical re-emission
    manifest2 = tmp_path / "splits2.jsonl"
    write_split_manifest(again, manifest2)
    assert manifest.read_bytes() == manifest2.read_bytes()


def test_manifest_rejects_duplicates(tmp_path):
    path = tmp_path / "splits.jsonl"
    rec = {"user_id": "u", "item_id": "i", "split": "train"}
    with open(path, "w") as fh:
        fh.write(json.dumps(rec) + "\n")
        fh.write(json.dumps(rec) + "\n")
    with pytest.raises(ParseError):
        load_split_manifest(path)
