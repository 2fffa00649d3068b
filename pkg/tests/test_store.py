import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from builders import fact, scene, write_raw_store
from dualtrace.store import (
    STOPWORDS,
    CoverageStats,
    IntegrityError,
    MemoryStore,
    PairRejected,
    StoreError,
    coverage_from_outcomes,
    tokenize,
)
from dualtrace.traces import TraceKind


def test_insert_pair_and_reopen(tmp_path):
    store = MemoryStore(tmp_path)
    assert store.insert_pair(fact(), scene(), "s1") == "car_maintenance_march"
    again = MemoryStore(tmp_path)
    f, s = again.get_by_anchor("car_maintenance_march")
    assert f.entry == fact() and s.entry == scene()
    assert again.session_outcome("s1") == {"outcome": "pair_stored", "anchors": ["car_maintenance_march"]}
    assert (tmp_path / "entries.log").read_text() == again.dump()


def test_anchor_collisions_get_numeric_suffixes(tmp_path):
    store = MemoryStore(tmp_path)
    got = [store.insert_pair(fact(), scene(), f"s{i}") for i in range(3)]
    assert got == ["car_maintenance_march", "car_maintenance_march_2", "car_maintenance_march_3"]
    f, s = store.get_by_anchor("car_maintenance_march_3")
    assert f.entry.frontmatter.linked_scene == "car_maintenance_march_3"
    assert s.entry.frontmatter.linked_fact == "car_maintenance_march_3"
    assert store.insert_fact(fact(linked=False), "s9") == "car_maintenance_march_4"
    assert store.audit() == []


def test_long_anchor_collision_stays_within_limit(tmp_path):
    store = MemoryStore(tmp_path)
    a = "x" * 64
    store.insert_fact(fact(a, linked=False))
    b = store.insert_fact(fact(a, linked=False))
    assert len(b) == 64 and b.endswith("_2")


def test_invalid_pair_rejected(tmp_path):
    store = MemoryStore(tmp_path)
    with pytest.raises(PairRejected, match="back-link mismatch"):
        store.insert_pair(fact(), scene(linked_fact="nope"))
    with pytest.raises(PairRejected):
        store.insert_fact(fact())  # carries linked_scene
    assert len(store) == 0


class _Boom(Exception):
    pass


class FaultyStore(MemoryStore):
    """Writes half of the next chunk, then fails."""

    fail_next = False

    def _write_chunk(self, fh, data):
        if self.fail_next:
            self.fail_next = False
            fh.write(data[: len(data) // 2])
            fh.flush()
            raise _Boom("disk full")
        super()._write_chunk(fh, data)


def test_failed_write_leaves_no_partial_pair(tmp_path):
    store = FaultyStore(tmp_path)
    store.insert_pair(fact("first"), scene("first"), "s1")
    before = (tmp_path / "entries.log").read_bytes()
    store.fail_next = True
    with pytest.raises(_Boom):
        store.insert_pair(fact("second"), scene("second"), "s2")
    assert (tmp_path / "entries.log").read_bytes() == before
    assert store.get(TraceKind.FACT, "second") is None
    reopened = MemoryStore(tmp_path)
    assert [r.anchor for r in reopened.records()] == ["first", "first"]
    assert reopened.session_outcome("s2") is None


def test_uncommitted_tail_is_discarded_on_open(tmp_path):
    store = MemoryStore(tmp_path)
    store.insert_pair(fact(), scene(), "s1")
    committed = (tmp_path / "entries.log").read_bytes()
    with open(tmp_path / "entries.log", "ab") as fh:
        fh.write(b"[FACT:torn]\n---\ninfo_ty")
    reopened = MemoryStore(tmp_path)
    assert len(reopened) == 2
    assert (tmp_path / "entries.log").read_bytes() == committed


def test_short_log_is_an_error(tmp_path):
    store = MemoryStore(tmp_path)
    store.insert_pair(fact(), scene())
    (tmp_path / "entries.log").write_bytes(b"")
    with pytest.raises(StoreError):
        MemoryStore(tmp_path)


def test_dangling_link_raises_integrity_error(tmp_path):
    write_raw_store(tmp_path, [fact()])
    store = MemoryStore(tmp_path)
    with pytest.raises(IntegrityError):
        store.get_by_anchor("car_maintenance_march")
    assert store.audit() == ["FACT car_maintenance_march: linked_scene car_maintenance_march missing"]


def test_orphan_scene_is_reported(tmp_path):
    write_raw_store(tmp_path, [scene()])
    assert MemoryStore(tmp_path).audit() == ["SCENE car_maintenance_march: linked_fact car_maintenance_march missing"]


def test_replace_revises_in_place(tmp_path):
    store = MemoryStore(tmp_path)
    store.insert_pair(fact(), scene(), "s1")
    store.replace(fact(components=("Oil change at 35,000 miles",)), scene(body="Picture: odometer at 35,000. (Mnemonic depiction only. Not evidence.)"))
    reopened = MemoryStore(tmp_path)
    f, s = reopened.get_by_anchor("car_maintenance_march")
    assert f.entry.components == ("Oil change at 35,000 miles",)
    assert "35,000" in s.entry.body
    assert len(reopened) == 2
    with pytest.raises(PairRejected, match="orphan"):
        store.replace(fact(linked=False))
    with pytest.raises(StoreError):
        store.replace(fact("missing"))


def test_drop_then_store_counts_once(tmp_path):
    store = MemoryStore(tmp_path)
    store.record_drop("s1")
    store.insert_fact(fact(linked=False), "s2")
    store.insert_pair(fact("b"), scene("b"), "s3")
    cov = store.coverage_stats()
    assert (cov.sessions_processed, cov.sessions_stored, cov.sessions_dual) == (3, 2, 1)
    assert cov.coverage_ratio == pytest.approx(2 / 3)
    assert cov.dual_ratio == pytest.approx(1 / 2)
    assert MemoryStore(tmp_path).coverage_stats() == cov


def test_coverage_examples():
    outcomes = ["dropped"] * 5 + ["pair_stored"] * 4 + ["fact_stored"]
    cov = coverage_from_outcomes(outcomes)
    assert (cov.coverage_ratio, cov.dual_ratio) == (0.5, 0.8)
    assert coverage_from_outcomes([]) == CoverageStats(0, 0, 0, 0.0, 0.0, True)


def test_coverage_at_full_scale():
    # 4,375 sessions processed, 2,399 stored, 2,208 of those with scenes.
    outcomes = ["pair_stored"] * 2208 + ["fact_stored"] * (2399 - 2208) + ["dropped"] * (4375 - 2399)
    cov = coverage_from_outcomes(outcomes)
    assert round(100 * cov.coverage_ratio, 1) == 54.8
    assert round(100 * cov.dual_ratio, 1) == 92.0


def test_manifest_is_valid_json_after_each_commit(tmp_path):
    store = MemoryStore(tmp_path)
    for i in range(3):
        store.insert_pair(fact(f"a{i}"), scene(f"a{i}"), f"s{i}")
        m = json.loads((tmp_path / "manifest.json").read_text())
        assert m["insert_seq"] == 2 * (i + 1)
        assert m["log_bytes"] == (tmp_path / "entries.log").stat().st_size


# -- search ------------------------------------------------------------------------


def test_search_ranks_slug_matches_above_text_matches(tmp_path):
    store = MemoryStore(tmp_path)
    store.insert_fact(fact("dentist_visit", ["Cleaning booked"], linked=False))
    store.insert_fact(fact("weekend", ["Asked the dentist about whitening"], linked=False))
    hits = store.search("When is my dentist cleaning?")
    assert [h.record.anchor for h in hits] == ["dentist_visit", "weekend"]
    assert [h.score for h in hits] == [3, 1]


def test_pair_completion_pulls_in_partner(tmp_path):
    store = MemoryStore(tmp_path)
    store.insert_pair(fact("race", ["Finished in 35:00"]), scene("race", "Picture: a stopwatch. (Mnemonic depiction only. Not evidence.)"))
    hits = store.search("stopwatch", k=1)
    assert [(h.record.entry.kind, h.completed) for h in hits] == [(TraceKind.SCENE, False), (TraceKind.FACT, True)]


def test_stopword_only_query_finds_nothing(tmp_path):
    store = MemoryStore(tmp_path)
    store.insert_fact(fact("the_what", ["what is the thing"], linked=False))
    assert store.search("what is the") == []
    with pytest.raises(ValueError):
        store.search("x", k=0)


def test_embedding_rerank_orders_by_similarity(tmp_path):
    from dualtrace.provider import MockProvider

    store = MemoryStore(tmp_path)
    store.insert_fact(fact("a", ["guitar lesson at the recital hall with Maria"], linked=False, category="music"))
    store.insert_fact(fact("b", ["guitar"], linked=False, category="guitar"))
    lexical = [h.record.anchor for h in store.search("guitar")]
    embedded = [h.record.anchor for h in store.search("guitar", embedder=MockProvider())]
    assert lexical == ["a", "b"]
    assert embedded == ["b", "a"]


WORDS = ["oil", "change", "honda", "dentist", "guitar", "recital", "nurse", "the", "my", "race"]


def _oracle(entries, query, k):
    """Direct re-statement of the ranking rule over (insert order, entry) pairs."""
    q = {w for w in query.lower().split() if w not in STOPWORDS}
    scored = []
    for seq, e in enumerate(entries):
        slug_words = set(e.anchor.split("_"))
        text_words = set(" ".join([e.frontmatter.category, *e.components]).lower().split())
        s = sum(2 * (w in slug_words) + (w in text_words) for w in q)
        if s > 0:
            scored.append((-s, seq, e.anchor, s))
    scored.sort()
    return [(a, s) for _, _, a, s in scored[:k]]


@settings(max_examples=150, deadline=None)
@given(
    st.lists(
        st.tuples(
            st.lists(st.sampled_from(WORDS), min_size=1, max_size=2),
            st.lists(st.lists(st.sampled_from(WORDS), min_size=1, max_size=4), min_size=1, max_size=3),
        ),
        min_size=0,
        max_size=8,
    ),
    st.lists(st.sampled_from(WORDS), min_size=0, max_size=4),
    st.integers(1, 5),
)
def test_search_matches_brute_force_oracle(tmp_path_factory, docs, query_words, k):
    store = MemoryStore(tmp_path_factory.mktemp("s"))
    inserted = []
    for slug_words, comps in docs:
        e = fact("_".join(slug_words), [" ".join(c) for c in comps], linked=False, category="misc")
        anchor = store.insert_fact(e)
        inserted.append(store.get(TraceKind.FACT, anchor).entry)
    query = " ".join(query_words)
    got = [(h.record.anchor, h.score) for h in store.search(query, k)]
    assert got == _oracle(inserted, query, k)


def test_tokenize_drops_stopwords_and_punctuation():
    assert tokenize("What's my Honda's mileage?") == ["s", "honda", "s", "mileage"]
