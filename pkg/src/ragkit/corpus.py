"""Dataset loading, term-level splitting and knowledge-base construction.

A dataset row is one (term, paraphrase) pair; rows group into one
:class:`ParaphraseRecord` per term, preserving first-seen order.  Splitting
assigns whole terms to train/validation/test so no term leaks across splits.
The knowledge base holds encyclopedia article heads per term, later chunked
into retrievable passages.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import re
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .metrics import tokenize
from .wiki import WikiClient, normalize_title

__all__ = [
    "DatasetError",
    "ParaphraseRecord",
    "LengthStats",
    "KbDocument",
    "Chunk",
    "KbResult",
    "SPLITS",
    "load_dataset",
    "split_by_term",
    "paraphrase_length_stats",
    "build_kb",
    "chunk_kb",
    "ingest_text",
    "doc_id",
    "records_to_jsonl",
    "records_from_jsonl",
]

logger = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")


class DatasetError(ValueError):
    """Raised on malformed dataset rows or invalid split parameters."""


@dataclass
class ParaphraseRecord:
    """All accepted paraphrases of one term.

    Attributes:
        term: The technical term (unique per record).
        references: Accepted paraphrases, first-seen order, deduplicated.
        split: ``"train"``, ``"validation"``, ``"test"`` or ``"unassigned"``.
        source_id: Provenance label (dataset file name).
    """

    term: str
    references: list[str]
    split: str = "unassigned"
    source_id: str = ""


@dataclass(frozen=True)
class LengthStats:
    """Word-count statistics over all references of a record set."""

    n_references: int
    min: int
    max: int
    mean: float
    std: float


@dataclass
class KbDocument:
    """The head of one encyclopedia article matched to a term.

    Attributes:
        term: The dataset term this document was fetched for.
        page_title: Matched article title.
        rank: 1-based rank among this term's kept articles.
        lines: Leading article lines, whitespace-normalized, all non-empty.
        source_url: Canonical article URL.
        fetched_at: Fetch timestamp (ISO 8601) of the underlying response.
    """

    term: str
    page_title: str
    rank: int
    lines: list[str]
    source_url: str = ""
    fetched_at: str = ""


@dataclass(frozen=True)
class Chunk:
    """One retrievable passage of a knowledge-base document."""

    doc_ref: str
    index: int
    text: str
    token_count: int

    @property
    def chunk_ref(self) -> str:
        return f"{self.doc_ref}#{self.index}"


@dataclass
class KbResult:
    """Outcome of a knowledge-base build."""

    documents: list[KbDocument]
    #: Terms for which no article matched (not an error).
    misses: list[str]
    #: (term, reason) pairs for terms whose fetch failed outright.
    failures: list[tuple[str, str]]


# -- dataset loading ----------------------------------------------------------


def _rows_from_tsv(path: Path) -> Iterable[tuple[int, str, str]]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        for number, row in enumerate(reader, start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue  # blank line
            if len(row) != 2:
                raise DatasetError(
                    f"{path.name}: row {number}: expected 2 tab-separated "
                    f"columns, got {len(row)}"
                )
            if number == 1 and [c.strip().lower() for c in row] == ["term", "paraphrase"]:
                continue  # header
            yield number, row[0], row[1]


def _rows_from_jsonl(path: Path) -> Iterable[tuple[int, str, str]]:
    with open(path, encoding="utf-8") as fh:
        for number, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path.name}: row {number}: invalid JSON: {exc}") from exc
            if not isinstance(obj, dict) or "term" not in obj or "paraphrase" not in obj:
                raise DatasetError(
                    f"{path.name}: row {number}: expected an object with "
                    f"'term' and 'paraphrase' keys"
                )
            yield number, str(obj["term"]), str(obj["paraphrase"])


def load_dataset(path: str | Path, format: str | None = None) -> list[ParaphraseRecord]:
    """Load a term/paraphrase dataset and group rows by term.

    Args:
        path: Dataset file.
        format: ``"tsv"`` (two tab-separated columns, optional
            ``term\tparaphrase`` header) or ``"jsonl"`` (one object per line
            with ``term`` and ``paraphrase`` keys).  Defaults by file
            extension (``.jsonl`` means JSONL, anything else TSV).

    Returns:
        One record per distinct term, in first-seen order; references are
        deduplicated within each term (duplicates logged as a warning).

    Raises:
        DatasetError: On rows with missing or empty fields, naming the row
            number.
    """
    path = Path(path)
    if format is None:
        format = "jsonl" if path.suffix.lower() == ".jsonl" else "tsv"
    if format not in ("tsv", "jsonl"):
        raise DatasetError(f"unknown dataset format {format!r}")
    rows = _rows_from_jsonl(path) if format == "jsonl" else _rows_from_tsv(path)

    records: dict[str, ParaphraseRecord] = {}
    seen: set[tuple[str, str]] = set()
    duplicates = 0
    for number, raw_term, raw_para in rows:
        term = raw_term.strip()
        para = raw_para.strip()
        if not term:
            raise DatasetError(f"{path.name}: row {number}: empty term")
        if not para:
            raise DatasetError(f"{path.name}: row {number}: empty paraphrase")
        key = (term, para)
        if key in seen:
            duplicates += 1
            continue
        seen.add(key)
        record = records.get(term)
        if record is None:
            record = ParaphraseRecord(term=term, references=[], source_id=path.name)
            records[term] = record
        record.references.append(para)
    if duplicates:
        logger.warning("%s: dropped %d duplicate (term, paraphrase) rows", path.name, duplicates)
    if not records:
        raise DatasetError(f"{path.name}: no rows")
    return list(records.values())


def records_to_jsonl(records: Sequence[ParaphraseRecord], path: str | Path) -> None:
    """Serialize records, one JSON object per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(
                json.dumps(
                    {
                        "term": record.term,
                        "references": record.references,
                        "split": record.split,
                        "source_id": record.source_id,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


def records_from_jsonl(path: str | Path) -> list[ParaphraseRecord]:
    """Load records written by :func:`records_to_jsonl`."""
    out: list[ParaphraseRecord] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            out.append(
                ParaphraseRecord(
                    term=obj["term"],
                    references=list(obj["references"]),
                    split=obj.get("split", "unassigned"),
                    source_id=obj.get("source_id", ""),
                )
            )
    return out


# -- splitting and statistics --------------------------------------------------


def split_by_term(
    records: Sequence[ParaphraseRecord],
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2),
    seed: int = 13,
) -> tuple[list[ParaphraseRecord], list[ParaphraseRecord], list[ParaphraseRecord]]:
    """Assign whole terms to train/validation/test.

    Terms are shuffled with a seeded PRNG, then filled greedily into train,
    validation and test so that cumulative *pair* counts track
    ``ratios * total_pairs``.  Identical ``(records, ratios, seed)`` give an
    identical assignment.  Because whole terms move at once, realized pair
    counts can deviate from the targets by up to the largest per-term
    reference count.

    Args:
        records: Records with ``split == "unassigned"``.
        ratios: Positive train/validation/test pair-count fractions, sum 1.
        seed: Shuffle seed.

    Returns:
        ``(train, validation, test)`` lists; the records' ``split`` fields are
        set in place.

    Raises:
        DatasetError: On bad ratios, fewer than 3 records, or records already
            assigned.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise DatasetError(f"ratios must be 3 positive numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DatasetError(f"ratios must sum to 1, got {sum(ratios)}")
    if len(records) < 3:
        raise DatasetError(f"need at least 3 records to populate all splits, got {len(records)}")
    assigned = [r.term for r in records if r.split != "unassigned"]
    if assigned:
        raise DatasetError(f"records already assigned: {assigned[:5]}")

    order = list(range(len(records)))
    random.Random(seed).shuffle(order)

    total_pairs = sum(len(r.references) for r in records)
    train_target = ratios[0] * total_pairs
    val_target = (ratios[0] + ratios[1]) * total_pairs

    buckets: dict[str, list[ParaphraseRecord]] = {name: [] for name in SPLITS}
    cumulative = 0
    for position in order:
        record = records[position]
        if cumulative < train_target:
            name = "train"
        elif cumulative < val_target:
            name = "validation"
        else:
            name = "test"
        record.split = name
        buckets[name].append(record)
        cumulative += len(record.references)

    # Degenerate ratios or skewed reference counts can leave a split empty;
    # repopulate it from the largest split so all three are usable.
    for name in SPLITS:
        while not buckets[name]:
            donor = max(SPLITS, key=lambda s: len(buckets[s]))
            moved = buckets[donor].pop()
            moved.split = name
            buckets[name].append(moved)

    return buckets["train"], buckets["validation"], buckets["test"]


def paraphrase_length_stats(records: Sequence[ParaphraseRecord]) -> LengthStats:
    """Word-count statistics over every reference in ``records``.

    Words are split on Unicode whitespace.  The standard deviation is the
    population deviation (denominator N).

    Raises:
        DatasetError: If the records hold no references.
    """
    lengths = [len(ref.split()) for record in records for ref in record.references]
    if not lengths:
        raise DatasetError("no references to measure")
    n = len(lengths)
    mean = sum(lengths) / n
    variance = sum((x - mean) ** 2 for x in lengths) / n
    return LengthStats(
        n_references=n,
        min=min(lengths),
        max=max(lengths),
        mean=mean,
        std=math.sqrt(variance),
    )


# -- knowledge base -------------------------------------------------------------


def _normalize_line(line: str) -> str:
    return " ".join(line.split())


def doc_id(doc: KbDocument) -> str:
    """Stable short identifier for a knowledge-base document."""
    payload = f"{doc.term}\x1f{doc.page_title}".encode("utf-8")
    return hashlib.sha1(payload).hexdigest()[:12]


def _fetch_term(
    client: WikiClient,
    term: str,
    language: str,
    top_n: int,
    line_limit: int,
    search_limit: int,
) -> list[KbDocument]:
    titles = client.search(term, language=language, limit=search_limit)
    wanted = normalize_title(term)
    matching = [t for t in titles if wanted in normalize_title(t)]
    documents: list[KbDocument] = []
    for title in matching:
        if len(documents) >= top_n:
            break
        extract, fetched_at = client.page_extract(title, language=language)
        lines = [_normalize_line(l) for l in extract.split("\n")]
        lines = [l for l in lines if l][:line_limit]
        if not lines:
            continue
        documents.append(
            KbDocument(
                term=term,
                page_title=title,
                rank=len(documents) + 1,
                lines=lines,
                source_url=client.page_url_for(title, language=language),
                fetched_at=fetched_at,
            )
        )
    return documents


def build_kb(
    terms: Sequence[str],
    client: WikiClient,
    language: str = "fr",
    top_n: int = 3,
    line_limit: int = 20,
    workers: int = 4,
    search_limit: int = 10,
) -> KbResult:
    """Fetch the top matching encyclopedia articles for each term.

    For every term the client searches for candidate pages, keeps titles that
    contain the term (accent- and case-insensitive), and stores the first
    ``line_limit`` non-empty lines of up to ``top_n`` matching articles.

    Args:
        terms: Distinct, non-empty terms; document order follows term order.
        client: The API client (live or offline/cached).
        language: Wiki language code.
        top_n: Maximum articles kept per term.
        line_limit: Maximum lines kept per article.
        workers: Concurrent fetch threads.
        search_limit: Candidate titles requested per search.

    Returns:
        A :class:`KbResult`: documents (term order, then rank), terms with no
        match in ``misses``, and per-term fetch failures in ``failures``
        (failures do not abort the batch).
    """
    cleaned = [t.strip() for t in terms]
    if any(not t for t in cleaned):
        raise DatasetError("terms must be non-empty")
    if len(set(cleaned)) != len(cleaned):
        raise DatasetError("terms must be distinct")

    def task(term: str):
        return _fetch_term(client, term, language, top_n, line_limit, search_limit)

    documents: list[KbDocument] = []
    misses: list[str] = []
    failures: list[tuple[str, str]] = []
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        futures = [(term, pool.submit(task, term)) for term in cleaned]
        for term, future in futures:
            try:
                docs = future.result()
            except Exception as exc:  # noqa: BLE001 - recorded, batch continues
                logger.warning("knowledge-base fetch failed for %r: %s", term, exc)
                failures.append((term, str(exc)))
                continue
            if docs:
                documents.extend(docs)
            else:
                misses.append(term)
    return KbResult(documents=documents, misses=misses, failures=failures)


def ingest_text(doc: KbDocument) -> str:
    """The document text the chunker sees: normalized lines joined by spaces."""
    return " ".join(_normalize_line(l) for l in doc.lines if _normalize_line(l))


_SENTENCE_SPLIT_RE = re.compile(r"(?<=[.!?])\s+")


def _token_count(text: str) -> int:
    return len(tokenize(text).tokens)


def _split_long_word(word: str, max_tokens: int) -> list[str]:
    """Character-level fallback for a single word above the token budget."""
    pieces: list[str] = []
    rest = word
    while rest:
        if _token_count(rest) <= max_tokens:
            pieces.append(rest)
            break
        lo, hi = 1, len(rest)
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if _token_count(rest[:mid]) <= max_tokens:
                lo = mid
            else:
                hi = mid - 1
        pieces.append(rest[:lo])
        rest = rest[lo:]
    return pieces


def _split_segment(segment: str, max_tokens: int) -> list[str]:
    """Greedy word-boundary split of an over-long segment."""
    if _token_count(segment) <= max_tokens:
        return [segment]
    pieces: list[str] = []
    current: list[str] = []
    current_tokens = 0
    for word in segment.split(" "):
        word_tokens = _token_count(word)
        if word_tokens > max_tokens:
            if current:
                pieces.append(" ".join(current))
                current, current_tokens = [], 0
            pieces.extend(_split_long_word(word, max_tokens))
            continue
        if current and current_tokens + word_tokens > max_tokens:
            pieces.append(" ".join(current))
            current, current_tokens = [], 0
        current.append(word)
        current_tokens += word_tokens
    if current:
        pieces.append(" ".join(current))
    return pieces


def chunk_kb(
    documents: Sequence[KbDocument],
    granularity: str = "sentence",
    max_tokens: int = 128,
) -> list[Chunk]:
    """Split knowledge-base documents into retrievable chunks.

    With ``granularity="line"`` each document line is one chunk; with
    ``"sentence"`` each line splits into sentences (after ``.``, ``!`` or
    ``?`` followed by whitespace).  Segments above ``max_tokens`` (counted
    with the metrics tokenizer) split at word boundaries; a single word above
    the budget splits mid-word, which is the only case where joining chunk
    texts with single spaces does not reproduce :func:`ingest_text`.

    Returns:
        Chunks in document order, indexed consecutively within each document.

    Raises:
        DatasetError: On an unknown granularity or non-positive budget, or
            when two documents collide on the same identifier.
    """
    if granularity not in ("line", "sentence"):
        raise DatasetError(f"unknown granularity {granularity!r}")
    if max_tokens < 1:
        raise DatasetError(f"max_tokens must be positive, got {max_tokens}")

    chunks: list[Chunk] = []
    seen_refs: set[str] = set()
    for document in documents:
        ref = doc_id(document)
        if ref in seen_refs:
            raise DatasetError(
                f"duplicate document id {ref} (term={document.term!r}, "
                f"title={document.page_title!r})"
            )
        seen_refs.add(ref)
        index = 0
        for line in document.lines:
            line = _normalize_line(line)
            if not line:
                continue
            segments = [line] if granularity == "line" else _SENTENCE_SPLIT_RE.split(line)
            for segment in segments:
                for piece in _split_segment(segment, max_tokens):
                    chunks.append(
                        Chunk(
                            doc_ref=ref,
                            index=index,
                            text=piece,
                            token_count=_token_count(piece),
                        )
                    )
                    index += 1
    return chunks
