"""Corpus tests: dataset parsing, term-level splitting, length statistics,
knowledge-base construction from cached responses and chunking."""

from __future__ import annotations

import json
import logging
import random

import pytest

from ragkit.corpus import (
    Chunk,
    DatasetError,
    KbDocument,
    ParaphraseRecord,
    build_kb,
    chunk_kb,
    doc_id,
    ingest_text,
    load_dataset,
    paraphrase_length_stats,
    records_from_jsonl,
    records_to_jsonl,
    split_by_term,
)
from ragkit.metrics import tokenize
from ragkit.wiki import WikiClient

from conftest import FIXTURE_TERMS, write_fixture_wiki_cache


# -- load_dataset ------------------------------------------------------------------


def _write_tsv(path, rows, header=True):
    lines = (["term\tparaphrase"] if header else []) + rows
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def test_load_tsv_groups_by_term_preserving_order(tmp_path):
    path = _write_tsv(
        tmp_path / "data.tsv",
        ["zona\tmaladie virale", "angine\tinfection de la gorge", "zona\téruption douloureuse"],
    )
    records = load_dataset(path)
    assert [r.term for r in records] == ["zona", "angine"]
    assert records[0].references == ["maladie virale", "éruption douloureuse"]
    assert records[0].source_id == "data.tsv"


def test_load_tsv_without_header(tmp_path):
    path = _write_tsv(tmp_path / "data.tsv", ["zona\tmaladie virale"], header=False)
    records = load_dataset(path)
    assert records[0].term == "zona"


def test_load_tsv_trims_whitespace(tmp_path):
    path = _write_tsv(tmp_path / "data.tsv", ["  zona \t maladie virale  "])
    records = load_dataset(path)
    assert records[0].term == "zona"
    assert records[0].references == ["maladie virale"]


def test_load_tsv_rejects_wrong_column_count_with_row_number(tmp_path):
    path = _write_tsv(tmp_path / "data.tsv", ["zona\tok", "bad row without tab"])
    with pytest.raises(DatasetError, match="row 3"):
        load_dataset(path)


def test_load_tsv_rejects_empty_fields_with_row_number(tmp_path):
    path = _write_tsv(tmp_path / "data.tsv", ["zona\tok", "\tno term"])
    with pytest.raises(DatasetError, match="row 3.*empty term"):
        load_dataset(path)
    path2 = _write_tsv(tmp_path / "data2.tsv", ["zona\t  "])
    with pytest.raises(DatasetError, match="row 2.*empty paraphrase"):
        load_dataset(path2)


def test_load_dataset_deduplicates_and_warns(tmp_path, caplog):
    path = _write_tsv(
        tmp_path / "data.tsv", ["zona\tmaladie virale", "zona\tmaladie virale"]
    )
    with caplog.at_level(logging.WARNING):
        records = load_dataset(path)
    assert records[0].references == ["maladie virale"]
    assert any("duplicate" in message for message in caplog.messages)


def test_load_jsonl(tmp_path):
    path = tmp_path / "data.jsonl"
    rows = [
        {"term": "zona", "paraphrase": "maladie virale"},
        {"term": "zona", "paraphrase": "éruption"},
    ]
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n", encoding="utf-8")
    records = load_dataset(path)  # format inferred from the extension
    assert records[0].references == ["maladie virale", "éruption"]


def test_load_jsonl_rejects_missing_keys_with_row_number(tmp_path):
    path = tmp_path / "data.jsonl"
    path.write_text('{"term": "zona"}\n', encoding="utf-8")
    with pytest.raises(DatasetError, match="row 1"):
        load_dataset(path)


def test_load_dataset_unknown_format(tmp_path):
    path = _write_tsv(tmp_path / "data.tsv", ["a\tb"])
    with pytest.raises(DatasetError, match="format"):
        load_dataset(path, format="xml")


def test_records_jsonl_roundtrip(tmp_path):
    records = [
        ParaphraseRecord("zona", ["a", "b"], split="train", source_id="x"),
        ParaphraseRecord("angine", ["c"], split="test", source_id="x"),
    ]
    path = tmp_path / "records.jsonl"
    records_to_jsonl(records, path)
    assert records_from_jsonl(path) == records


# -- split_by_term -----------------------------------------------------------------


def _make_records(reference_counts):
    return [
        ParaphraseRecord(term=f"t{i}", references=[f"p{i}-{j}" for j in range(count)])
        for i, count in enumerate(reference_counts)
    ]


def test_split_disjoint_and_covering():
    records = _make_records([1] * 10)
    train, validation, test = split_by_term(records, (0.6, 0.2, 0.2), seed=1)
    assert len(train) == 6 and len(validation) == 2 and len(test) == 2
    terms = lambda bucket: {r.term for r in bucket}
    assert terms(train) | terms(validation) | terms(test) == {f"t{i}" for i in range(10)}
    assert terms(train) & terms(validation) == set()
    assert terms(train) & terms(test) == set()
    assert terms(validation) & terms(test) == set()
    assert all(r.split == "train" for r in train)


def test_split_deterministic_for_same_inputs():
    records_a = _make_records([1, 2, 3, 1, 1, 4, 2, 1, 1, 2])
    records_b = _make_records([1, 2, 3, 1, 1, 4, 2, 1, 1, 2])
    split_a = split_by_term(records_a, (0.6, 0.2, 0.2), seed=42)
    split_b = split_by_term(records_b, (0.6, 0.2, 0.2), seed=42)
    for bucket_a, bucket_b in zip(split_a, split_b):
        assert [r.term for r in bucket_a] == [r.term for r in bucket_b]


def test_split_changes_with_seed():
    records_a = _make_records([1] * 30)
    records_b = _make_records([1] * 30)
    train_a, _, _ = split_by_term(records_a, seed=1)
    train_b, _, _ = split_by_term(records_b, seed=2)
    assert {r.term for r in train_a} != {r.term for r in train_b}


def test_split_tracks_pair_count_targets():
    rng = random.Random(3)
    counts = [rng.randint(1, 6) for _ in range(400)]
    records = _make_records(counts)
    total = sum(counts)
    train, validation, test = split_by_term(records, (0.6, 0.2, 0.2), seed=9)
    pair_count = lambda bucket: sum(len(r.references) for r in bucket)
    # greedy filling can only overshoot a boundary by one term's references
    assert abs(pair_count(train) - 0.6 * total) <= 6
    assert abs(pair_count(validation) - 0.2 * total) <= 12  # both boundaries
    assert abs(pair_count(test) - 0.2 * total) <= 12


def test_split_validation_errors():
    records = _make_records([1, 1, 1])
    with pytest.raises(DatasetError, match="ratios"):
        split_by_term(records, (0.5, 0.5, 0.5), seed=1)
    with pytest.raises(DatasetError, match="ratios"):
        split_by_term(records, (0.8, 0.3, -0.1), seed=1)
    with pytest.raises(DatasetError, match="at least 3"):
        split_by_term(_make_records([1, 1]), seed=1)
    already = _make_records([1, 1, 1])
    already[0].split = "train"
    with pytest.raises(DatasetError, match="already assigned"):
        split_by_term(already, seed=1)


def test_split_never_leaves_a_split_empty():
    # one huge term plus two tiny ones: naive greedy would leave a gap
    records = _make_records([100, 1, 1])
    train, validation, test = split_by_term(records, (0.6, 0.2, 0.2), seed=5)
    assert train and validation and test


# -- length statistics ---------------------------------------------------------------


def test_length_stats_hand_case():
    records = [
        ParaphraseRecord("a", ["un", "deux mots"]),
        ParaphraseRecord("b", ["trois mots ici"]),
    ]
    stats = paraphrase_length_stats(records)
    assert stats.n_references == 3
    assert stats.min == 1 and stats.max == 3
    assert stats.mean == pytest.approx(2.0)
    assert stats.std == pytest.approx((2 / 3) ** 0.5, abs=1e-12)


def test_length_stats_unicode_whitespace():
    records = [ParaphraseRecord("a", ["mot suivant\tfinal"])]
    assert paraphrase_length_stats(records).max == 3


def test_length_stats_requires_references():
    with pytest.raises(DatasetError):
        paraphrase_length_stats([])


# -- knowledge base -------------------------------------------------------------------


@pytest.fixture
def offline_client(tmp_path):
    cache = write_fixture_wiki_cache(tmp_path / "cache")
    return WikiClient(cache_dir=cache, offline=True)


def test_build_kb_keeps_matching_titles_in_rank_order(offline_client):
    result = build_kb(["asthme"], offline_client)
    assert not result.failures
    assert [d.page_title for d in result.documents] == ["Asthme"]  # second page is empty
    doc = result.documents[0]
    assert doc.rank == 1
    assert 0 < len(doc.lines) <= 20
    assert all(line == " ".join(line.split()) for line in doc.lines)
    assert doc.fetched_at


def test_build_kb_filters_non_matching_titles(offline_client):
    result = build_kb(["bronchite"], offline_client)
    titles = [d.page_title for d in result.documents]
    assert "Liste de maladies" not in titles
    assert titles == ["Bronchite", "Bronchite (médecine)"]
    assert [d.rank for d in result.documents] == [1, 2]


def test_build_kb_accent_insensitive_matching(tmp_path):
    cache = tmp_path / "cache"
    WikiClient.write_fixture(
        cache, "fr", "search", "anemie|10",
        {"query": {"search": [{"title": "Anémie"}]}},
    )
    WikiClient.write_fixture(
        cache, "fr", "extract", "Anémie",
        {"query": {"pages": {"1": {"title": "Anémie", "extract": "Un manque de globules."}}}},
    )
    client = WikiClient(cache_dir=cache, offline=True)
    result = build_kb(["anemie"], client)
    assert [d.page_title for d in result.documents] == ["Anémie"]


def test_build_kb_records_misses(tmp_path):
    cache = tmp_path / "cache"
    WikiClient.write_fixture(
        cache, "fr", "search", "introuvable|10", {"query": {"search": []}}
    )
    client = WikiClient(cache_dir=cache, offline=True)
    result = build_kb(["introuvable"], client)
    assert result.documents == []
    assert result.misses == ["introuvable"]
    assert result.failures == []


def test_build_kb_records_failures_and_continues(offline_client, caplog):
    # "inconnu" has no cached search response: offline miss becomes a failure
    with caplog.at_level(logging.WARNING):
        result = build_kb(["asthme", "inconnu"], offline_client)
    assert [d.term for d in result.documents] == ["asthme"]
    assert [term for term, _ in result.failures] == ["inconnu"]


def test_build_kb_respects_line_limit(offline_client):
    result = build_kb(["bronchite"], offline_client, line_limit=2)
    assert all(len(d.lines) <= 2 for d in result.documents)


def test_build_kb_preserves_term_order_despite_workers(offline_client):
    terms = list(FIXTURE_TERMS[:8])
    result = build_kb(terms, offline_client, workers=4)
    seen_terms = []
    for document in result.documents:
        if document.term not in seen_terms:
            seen_terms.append(document.term)
    assert seen_terms == [t for t in terms if t in {d.term for d in result.documents}]


def test_build_kb_input_validation(offline_client):
    with pytest.raises(DatasetError):
        build_kb(["a", "a"], offline_client)
    with pytest.raises(DatasetError):
        build_kb([" "], offline_client)


# -- chunking -----------------------------------------------------------------------


def _doc(lines, term="asthme", title="Asthme"):
    return KbDocument(term=term, page_title=title, rank=1, lines=list(lines))


def test_chunk_line_granularity_one_chunk_per_line():
    doc = _doc(["Première ligne.", "Deuxième ligne."])
    chunks = chunk_kb([doc], granularity="line")
    assert [c.text for c in chunks] == ["Première ligne.", "Deuxième ligne."]
    assert [c.index for c in chunks] == [0, 1]
    assert chunks[0].chunk_ref == f"{doc_id(doc)}#0"


def test_chunk_sentence_granularity_splits_on_terminators():
    doc = _doc(["Premier fait. Deuxième fait! Troisième fait?"])
    chunks = chunk_kb([doc], granularity="sentence")
    assert [c.text for c in chunks] == [
        "Premier fait.", "Deuxième fait!", "Troisième fait?"
    ]


def test_chunk_token_counts_use_metrics_tokenizer():
    doc = _doc(["Asthme: maladie chronique."])
    (chunk,) = chunk_kb([doc], granularity="line")
    assert chunk.token_count == len(tokenize(chunk.text).tokens)


def test_chunk_respects_max_tokens_with_word_boundary_split():
    words = " ".join(f"mot{i}" for i in range(20))
    doc = _doc([words])
    chunks = chunk_kb([doc], granularity="line", max_tokens=6)
    assert all(c.token_count <= 6 for c in chunks)
    assert " ".join(c.text for c in chunks) == words


def test_chunk_join_reproduces_ingest_text():
    doc = _doc(["Une   ligne avec  espaces. Autre phrase!", "Seconde ligne."])
    for granularity in ("line", "sentence"):
        chunks = chunk_kb([doc], granularity=granularity)
        assert " ".join(c.text for c in chunks) == ingest_text(doc)


def test_chunk_pathological_word_splits_mid_word():
    doc = _doc(["supercalifragilisticexpialidocious"])
    chunks = chunk_kb([doc], granularity="line", max_tokens=1)
    assert len(chunks) == 1  # one word is one token; already within budget
    long_word = "a" * 50
    doc2 = _doc([f"{long_word}'{long_word}'{long_word}"])
    chunks2 = chunk_kb([doc2], granularity="line", max_tokens=2)
    assert all(c.token_count <= 2 for c in chunks2)
    assert "".join(c.text for c in chunks2).replace(" ", "") == f"{long_word}'{long_word}'{long_word}"


def test_chunk_rejects_bad_parameters():
    doc = _doc(["ligne"])
    with pytest.raises(DatasetError):
        chunk_kb([doc], granularity="paragraph")
    with pytest.raises(DatasetError):
        chunk_kb([doc], max_tokens=0)


def test_chunk_rejects_duplicate_documents():
    doc = _doc(["ligne"])
    with pytest.raises(DatasetError, match="duplicate"):
        chunk_kb([doc, doc])


def test_doc_id_stable_and_distinct():
    a = _doc(["x"], term="asthme", title="Asthme")
    b = _doc(["x"], term="asthme", title="Asthme (médecine)")
    assert doc_id(a) == doc_id(a)
    assert doc_id(a) != doc_id(b)
    assert len(doc_id(a)) == 12
