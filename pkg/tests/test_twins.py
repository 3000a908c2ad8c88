import random
import threading

import pytest

from edgetms.twins import (
    InvalidPath,
    RevisionConflict,
    SignatureQuery,
    SignatureRecord,
    TwinDocument,
    TwinError,
    TwinNotFound,
    TwinStore,
    recency,
    split_path,
)

TID = "siteA/node1"


@pytest.fixture(params=["memory", "disk"])
def store(request, tmp_path):
    s = TwinStore(tmp_path if request.param == "disk" else None, clock=lambda: 1000)
    yield s
    s.close()


def test_create_and_replace_bump_revision(store):
    assert store.upsert_twin(TwinDocument(TID, {"description": "corner"})) == 1
    assert store.upsert_twin({"twin_id": TID, "attributes": {"lat": 1.5}}) == 2
    doc = store.get_twin(TID)
    assert doc.revision == 2 and doc.attributes == {"lat": 1.5} and doc.modified_ms == 1000


def test_get_returns_a_copy(store):
    store.upsert_twin(TwinDocument(TID, {"a": 1}))
    doc = store.get_twin(TID)
    doc.attributes["a"] = 99
    assert store.get_twin(TID).attributes == {"a": 1}


def test_not_found_and_bad_ids(store):
    with pytest.raises(TwinNotFound):
        store.get_twin("x/y")
    with pytest.raises(TwinNotFound):
        store.set_property("x/y", "attributes/a", 1)
    with pytest.raises(TwinError):
        store.upsert_twin(TwinDocument("no-slash"))
    with pytest.raises(TwinError):
        store.upsert_twin(TwinDocument("a/../b"))


def test_set_property_leaves_siblings(store):
    store.upsert_twin(TwinDocument(TID, features={"traffic": {"properties": {"speed": 30}}}))
    rev = store.set_property(TID, "features/traffic/properties/count", 17)
    doc = store.get_twin(TID)
    assert rev == 2
    assert doc.get("features/traffic/properties/count") == 17
    assert doc.get("features/traffic/properties/speed") == 30


def test_path_rules(store):
    store.upsert_twin(TwinDocument(TID))
    store.set_property(TID, "features/a/properties/b/c/d/e", 1)  # depth 7
    store.set_property(TID, "features/a/properties/b/c/d/f/g", 1)  # depth 8
    with pytest.raises(InvalidPath):
        store.set_property(TID, "features/a/properties/b/c/d/e/f/g", 1)  # depth 9
    with pytest.raises(InvalidPath):
        store.set_property(TID, "features/a/b", 1)
    with pytest.raises(InvalidPath):
        store.set_property(TID, "revision", 1)
    with pytest.raises(InvalidPath):
        store.set_property(TID, "attributes/x", {"not": "scalar"})
    with pytest.raises(InvalidPath):
        store.set_property(TID, "features/a/properties/b", 2)  # would clobber a subtree
    assert store.get_twin(TID).revision == 3
    assert len(split_path("attributes/a")) == 2


def test_expected_revision(store):
    store.upsert_twin(TwinDocument(TID))
    store.upsert_twin(TwinDocument(TID), expected_revision=1)
    with pytest.raises(RevisionConflict):
        store.upsert_twin(TwinDocument(TID), expected_revision=1)


def test_update_feature(store):
    store.ensure_twin(TID, {"site": "siteA"})
    store.ensure_twin(TID, {"site": "ignored"})
    rev = store.update_feature(TID, "traffic", {"count_car": 3, "mean_confidence": 0.8})
    assert rev == 2
    assert store.get_twin(TID).features["traffic"]["properties"] == {"count_car": 3, "mean_confidence": 0.8}
    assert store.get_twin(TID).attributes == {"site": "siteA"}
    with pytest.raises(InvalidPath):
        store.update_feature(TID, "traffic", {"a/b": 1})


def test_concurrent_writers_never_lose_revisions(store):
    store.upsert_twin(TwinDocument(TID))
    start = store.get_twin(TID).revision

    def writer(w):
        for i in range(10):
            store.set_property(TID, f"features/w{w}/properties/i", i)

    threads = [threading.Thread(target=writer, args=(w,)) for w in range(100)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    doc = store.get_twin(TID)
    assert doc.revision == start + 1000
    assert all(doc.features[f"w{w}"]["properties"]["i"] == 9 for w in range(100))


def test_signature_sequences(store):
    store.ensure_twin(TID)
    seqs = [store.append_signature(SignatureRecord(TID, "co2_ppm", float(i), 10 + i, 1.0)) for i in range(1000)]
    assert seqs == list(range(1, 1001))
    # late data keeps its timestamp but still gets the next sequence
    assert store.append(TID, "co2_ppm", 1.0, 1, 0.5) == 1001
    recs = store.signatures(TID)
    assert [r.sequence for r in recs] == list(range(1, 1002))
    assert recs[-1].timestamp_ms == 1


def test_append_validation(store):
    store.ensure_twin(TID)
    with pytest.raises(ValueError):
        store.append(TID, "co2_ppm", 1.0, 1, 1.5)
    with pytest.raises(ValueError):
        store.append(TID, "co2_ppm", float("nan"), 1, 1.0)
    with pytest.raises(TwinError):
        store.append("bad id", "co2_ppm", 1.0, 1, 1.0)
    with pytest.raises(ValueError):
        store.append(TID, "co 2", 1.0, 1, 1.0)


def test_signatures_may_precede_the_document(store):
    assert store.append("siteZ/n9", "co2_ppm", 1.0, 1, 1.0) == 1
    assert not store.has_twin("siteZ/n9")


def test_prefix_stability(store):
    store.ensure_twin(TID)
    for i in range(50):
        store.append(TID, "noise_db", float(i), i + 1, 1.0)
    before = store.signatures(TID)
    for i in range(50):
        store.append(TID, "co2_ppm", float(i), i + 1, 1.0)
    assert store.signatures(TID)[:50] == before


def test_reopen_preserves_everything(tmp_path):
    with TwinStore(tmp_path) as s:
        s.upsert_twin(TwinDocument(TID, {"a": 1}, {"f": {"properties": {"x": 0.1 + 0.2}}}))
        s.set_property(TID, "attributes/b", "two")
        for i in range(300):
            s.append(TID, ["co2_ppm", "noise_db", "inference"][i % 3], i * 0.1, 1000 + i, (i % 10) / 10)
        snap_doc = s.get_twin(TID)
        snap_sigs = s.signatures(TID)
    with TwinStore(tmp_path) as s:
        assert s.get_twin(TID) == snap_doc
        assert s.signatures(TID) == snap_sigs
        assert s.append(TID, "co2_ppm", 1.0, 1, 1.0) == 301


def test_reopen_drops_torn_tail(tmp_path):
    with TwinStore(tmp_path) as s:
        s.ensure_twin(TID)
        s.append(TID, "co2_ppm", 1.0, 1, 1.0)
        s.append(TID, "co2_ppm", 2.0, 2, 1.0)
    log = tmp_path / "signatures" / "siteA" / "node1.log"
    with open(log, "a") as fh:
        fh.write("3 co2_ppm,node=node1 val")
    with TwinStore(tmp_path) as s:
        assert [r.value for r in s.signatures(TID)] == [1.0, 2.0]
        assert s.append(TID, "co2_ppm", 3.0, 3, 1.0) == 3


def test_recency():
    assert recency(100, 0, 100) == 1.0
    assert recency(0, 0, 100) == 0.0
    assert recency(50, 0, 100) == 0.5
    assert recency(200, 0, 100) == 1.0
    assert recency(5, 5, 5) == 1.0 and recency(4, 5, 5) == 0.0


def test_pure_recency_and_pure_quality(store):
    store.ensure_twin(TID)
    store.append(TID, "noise_db", 1.0, 100, 0.5)
    store.append(TID, "noise_db", 2.0, 200, 0.5)
    got = store.select_signatures(SignatureQuery(TID, 0, 300, recency_weight=1.0))
    assert [r.timestamp_ms for r in got] == [200, 100]
    store.append(TID, "co2_ppm", 3.0, 10, 0.9)
    got = store.select_signatures(SignatureQuery(TID, 0, 300, recency_weight=0.0))
    assert got[0].quality == 0.9


def test_query_validation():
    with pytest.raises(ValueError):
        SignatureQuery(TID, 10, 5)
    with pytest.raises(ValueError):
        SignatureQuery(TID, 0, 5, max_results=0)
    with pytest.raises(ValueError):
        SignatureQuery(TID, 0, 5, recency_weight=1.5)


def brute_force_select(records, q):
    """Filter, score and sort with no shared code paths."""
    ref = q.to_ms if q.reference_ms is None else q.reference_ms
    out = []
    for r in records:
        if r.twin_id != q.twin_id or not q.from_ms <= r.timestamp_ms <= q.to_ms:
            continue
        if q.sources is not None and r.source not in q.sources:
            continue
        if r.quality < q.min_quality:
            continue
        if ref - q.from_ms <= 0:
            rec = 1.0 if r.timestamp_ms >= ref else 0.0
        else:
            rec = min(1.0, max(0.0, 1 - (ref - r.timestamp_ms) / (ref - q.from_ms)))
        out.append((q.recency_weight * rec + (1 - q.recency_weight) * r.quality, r.sequence, r))
    out.sort(key=lambda x: (-x[0], -x[1]))
    return [r for _, _, r in out[: q.max_results]]


def random_query(rng):
    a, b = sorted(rng.randint(0, 10_000) for _ in range(2))
    return SignatureQuery(
        TID,
        a,
        b,
        sources=rng.choice([None, {"co2_ppm"}, {"noise_db", "no2_ppb"}, {"inference", "co2_ppm", "noise_db"}]),
        min_quality=rng.choice([0.0, 0.25, rng.random()]),
        max_results=rng.randint(1, 60),
        recency_weight=rng.choice([0.0, 1.0, rng.random()]),
        reference_ms=rng.choice([None, b, b + rng.randint(0, 500)]),
    )


def test_select_matches_brute_force_oracle(store):
    rng = random.Random(11)
    store.ensure_twin(TID)
    for _ in range(200):
        store.append(
            TID,
            rng.choice(["co2_ppm", "noise_db", "no2_ppb", "inference"]),
            rng.uniform(0, 100),
            rng.randint(1, 10_000),
            rng.choice([0.25, 0.5, 1.0, round(rng.random(), 3)]),
        )
    records = store.signatures(TID)
    for _ in range(50):
        q = random_query(rng)
        expected = brute_force_select(records, q)
        assert store.select_signatures(q) == expected
        assert store.select_signatures(q) == expected  # pure


def test_raising_quality_never_lowers_rank(store):
    store.ensure_twin(TID)
    for i in range(20):
        store.append(TID, "co2_ppm", float(i), 100 + i * 10, 0.5)
    store.append(TID, "co2_ppm", 99.0, 150, 0.5)
    q = SignatureQuery(TID, 0, 400, max_results=100, recency_weight=0.7)
    rank_before = [r.value for r in store.select_signatures(q)].index(99.0)
    other = TwinStore()
    other.ensure_twin(TID)
    for r in store.signatures(TID):
        other.append(TID, r.source, r.value, r.timestamp_ms, 0.9 if r.value == 99.0 else r.quality)
    rank_after = [r.value for r in other.select_signatures(q)].index(99.0)
    assert rank_after <= rank_before


def test_latest_and_list(store):
    store.ensure_twin(TID)
    store.ensure_twin("siteB/n2")
    store.append(TID, "co2_ppm", 1.0, 500, 1.0)
    store.append(TID, "co2_ppm", 2.0, 100, 1.0)
    assert store.latest(TID, "co2_ppm").value == 2.0  # by sequence, not timestamp
    assert store.latest(TID, "noise_db") is None
    assert store.list_twins() == ["siteA/node1", "siteB/n2"]
    assert store.signature_count(TID) == 2
