"""Lexical and embedding-based quality metrics for generated paraphrases.

Every n-gram metric in this module runs on the same tokenizer so that scores
are comparable across metrics.  Scoring a run against a reference set keeps
the best reference per query (a candidate only needs to match one accepted
paraphrase) and averages those per-query maxima over the query set.
"""

from __future__ import annotations

import io
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import TYPE_CHECKING, Callable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

if TYPE_CHECKING:  # imported for annotations only; avoids an import cycle
    from .corpus import ParaphraseRecord
    from .generator import GenerationRun

__all__ = [
    "MetricError",
    "TokenSequence",
    "tokenize",
    "ngram_precisions",
    "bleu",
    "rouge_n",
    "rouge_l",
    "rouge_lsum",
    "embed_f1",
    "score_pair",
    "QueryScore",
    "MetricReport",
    "ragrefs",
    "ReportTable",
    "format_report",
    "CorrelationResult",
    "correlate",
    "METRIC_NAMES",
    "REPORT_COLUMN_ORDER",
]


class MetricError(ValueError):
    """Raised when metric inputs violate a precondition."""


# Words (with internal apostrophes or hyphens) or single punctuation marks.
# Lowercasing happens before matching, so "Asthme: maladie" tokenizes to
# ["asthme", ":", "maladie"] and "l'os" stays one token.
_TOKEN_RE = re.compile(r"\w+(?:['’\-]\w+)*|[^\w\s]", re.UNICODE)

_SENTENCE_END = frozenset({".", "!", "?"})

#: Metric names accepted by :func:`score_pair` and :func:`ragrefs`.
METRIC_NAMES = (
    "bleu",
    "bleu_p1",
    "bleu_p2",
    "bleu_p3",
    "bleu_p4",
    "rouge1",
    "rouge2",
    "rougeL",
    "rougeLsum",
    "embed_f1",
    "external_scorer",
)

#: Canonical column order for rendered reports.
REPORT_COLUMN_ORDER = (
    "bleu",
    "embed_f1",
    "external_scorer",
    "rouge1",
    "rouge2",
    "rougeL",
    "rougeLsum",
    "bleu_p1",
    "bleu_p2",
    "bleu_p3",
    "bleu_p4",
)


@dataclass(frozen=True)
class TokenSequence:
    """A tokenized text: the lowercased tokens plus the original source string."""

    tokens: tuple[str, ...]
    source: str

    def __len__(self) -> int:
        return len(self.tokens)


def tokenize(text: str) -> TokenSequence:
    """Lowercase ``text`` and split it into word and punctuation tokens.

    Words keep internal apostrophes and hyphens; every other punctuation mark
    becomes its own token.  Tokenizing the space-joined token list again gives
    the same tokens back (the operation is idempotent on its own output).

    Args:
        text: Raw text; may be empty.

    Returns:
        A :class:`TokenSequence` whose ``tokens`` may be empty for
        whitespace-only input.
    """
    return TokenSequence(tokens=tuple(_TOKEN_RE.findall(text.lower())), source=text)


def _ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def ngram_precisions(
    candidate: TokenSequence, reference: TokenSequence, max_n: int = 4
) -> tuple[float, ...]:
    """Clipped n-gram precisions of ``candidate`` against ``reference``.

    Each candidate n-gram counts at most as often as it appears in the
    reference.  Orders where the candidate has no n-grams (fewer than ``n``
    tokens) score 0 by convention, as does an empty candidate.

    Returns:
        ``max_n`` precisions, each in [0, 1].
    """
    out = []
    for n in range(1, max_n + 1):
        cand_counts = _ngram_counts(candidate.tokens, n)
        total = sum(cand_counts.values())
        if total == 0:
            out.append(0.0)
            continue
        ref_counts = _ngram_counts(reference.tokens, n)
        clipped = sum(min(count, ref_counts[gram]) for gram, count in cand_counts.items())
        out.append(clipped / total)
    return tuple(out)


def bleu(candidate: TokenSequence, reference: TokenSequence, max_n: int = 4) -> float:
    """Sentence-level BLEU with brevity penalty and add-floor smoothing.

    Uses the geometric mean of clipped n-gram precisions up to ``max_n``.  A
    zero precision is replaced by ``1 / (2 * len(candidate))`` so that a single
    missing order does not zero the whole score; the raw precisions remain
    available through :func:`ngram_precisions`.  The brevity penalty is
    ``min(1, exp(1 - len(reference) / len(candidate)))``.

    Args:
        candidate: Tokenized system output.
        reference: Tokenized reference paraphrase.

    Returns:
        BLEU in [0, 1]; 0.0 when the candidate has no tokens.
    """
    c = len(candidate.tokens)
    r = len(reference.tokens)
    if c == 0:
        return 0.0
    precisions = ngram_precisions(candidate, reference, max_n)
    floor = 1.0 / (2.0 * c)
    log_sum = 0.0
    for p in precisions:
        log_sum += math.log(p if p > 0.0 else floor)
    geo_mean = math.exp(log_sum / max_n)
    bp = min(1.0, math.exp(1.0 - r / c))
    return bp * geo_mean


class PRF(NamedTuple):
    """Precision / recall / F1 triple."""

    precision: float
    recall: float
    f1: float


def _f1(precision: float, recall: float) -> float:
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def rouge_n(candidate: TokenSequence, reference: TokenSequence, n: int) -> PRF:
    """ROUGE-N overlap of ``candidate`` against ``reference``.

    Overlap counts are clipped per n-gram type.  Components with a zero
    denominator (a side with fewer than ``n`` tokens) are 0.

    Returns:
        Precision, recall and F1, each in [0, 1].
    """
    if n < 1:
        raise MetricError(f"n must be >= 1, got {n}")
    cand_counts = _ngram_counts(candidate.tokens, n)
    ref_counts = _ngram_counts(reference.tokens, n)
    cand_total = sum(cand_counts.values())
    ref_total = sum(ref_counts.values())
    overlap = sum(min(count, ref_counts[gram]) for gram, count in cand_counts.items())
    precision = overlap / cand_total if cand_total else 0.0
    recall = overlap / ref_total if ref_total else 0.0
    return PRF(precision, recall, _f1(precision, recall))


def _lcs_table(a: Sequence[str], b: Sequence[str]) -> list[list[int]]:
    rows, cols = len(a), len(b)
    table = [[0] * (cols + 1) for _ in range(rows + 1)]
    for i in range(1, rows + 1):
        ai = a[i - 1]
        row = table[i]
        prev = table[i - 1]
        for j in range(1, cols + 1):
            if ai == b[j - 1]:
                row[j] = prev[j - 1] + 1
            else:
                row[j] = max(prev[j], row[j - 1])
    return table


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    return _lcs_table(a, b)[len(a)][len(b)]


def _lcs_ref_indices(reference: Sequence[str], candidate: Sequence[str]) -> set[int]:
    """Positions of ``reference`` covered by one longest common subsequence."""
    if not reference or not candidate:
        return set()
    table = _lcs_table(reference, candidate)
    i, j = len(reference), len(candidate)
    covered: set[int] = set()
    while i > 0 and j > 0:
        if reference[i - 1] == candidate[j - 1]:
            covered.add(i - 1)
            i -= 1
            j -= 1
        elif table[i - 1][j] >= table[i][j - 1]:
            i -= 1
        else:
            j -= 1
    return covered


def rouge_l(candidate: TokenSequence, reference: TokenSequence) -> PRF:
    """ROUGE-L: longest-common-subsequence overlap.

    Precision is LCS length over candidate length, recall over reference
    length; zero-length sides contribute 0.
    """
    lcs = _lcs_length(candidate.tokens, reference.tokens)
    precision = lcs / len(candidate.tokens) if candidate.tokens else 0.0
    recall = lcs / len(reference.tokens) if reference.tokens else 0.0
    return PRF(precision, recall, _f1(precision, recall))


def _split_sentences(ts: TokenSequence) -> list[list[str]]:
    """Split a token sequence into sentences after each ``.``, ``!`` or ``?`` token."""
    sentences: list[list[str]] = []
    current: list[str] = []
    for token in ts.tokens:
        current.append(token)
        if token in _SENTENCE_END:
            sentences.append(current)
            current = []
    if current:
        sentences.append(current)
    return sentences


def rouge_lsum(candidate: TokenSequence, reference: TokenSequence) -> PRF:
    """Sentence-split ROUGE-L with union-LCS matching.

    Both sides are split into sentences after each sentence-final punctuation
    token.  For every reference sentence, the positions matched by an LCS with
    each candidate sentence are unioned; the total number of matched reference
    positions acts as the hit count for precision (over all candidate tokens)
    and recall (over all reference tokens).  With a single sentence on each
    side this reduces exactly to :func:`rouge_l`.
    """
    cand_sents = _split_sentences(candidate)
    ref_sents = _split_sentences(reference)
    cand_total = len(candidate.tokens)
    ref_total = len(reference.tokens)
    if cand_total == 0 or ref_total == 0:
        return PRF(0.0, 0.0, 0.0)
    hits = 0
    for ref_sent in ref_sents:
        covered: set[int] = set()
        for cand_sent in cand_sents:
            covered |= _lcs_ref_indices(ref_sent, cand_sent)
        hits += len(covered)
    precision = hits / cand_total
    recall = hits / ref_total
    return PRF(precision, recall, _f1(precision, recall))


def embed_f1(
    candidate: TokenSequence, reference: TokenSequence, embedder
) -> PRF:
    """Greedy token-embedding similarity between candidate and reference.

    Every token is embedded with ``embedder.embed`` (unit-norm vectors).  Each
    candidate token greedily takes its best cosine against the reference
    tokens (precision side) and vice versa (recall side); negative cosines are
    clamped to 0 so antonymic noise cannot push the score below "no match".

    Args:
        candidate: Tokenized system output.
        reference: Tokenized reference paraphrase.
        embedder: Object with ``embed(text) -> numpy.ndarray`` returning
            unit-norm vectors of a fixed dimension.

    Returns:
        Precision, recall and F1 in [0, 1]; all 0 when either side is empty.
    """
    if not candidate.tokens or not reference.tokens:
        return PRF(0.0, 0.0, 0.0)
    cand_vecs = np.stack([embedder.embed(tok) for tok in candidate.tokens])
    ref_vecs = np.stack([embedder.embed(tok) for tok in reference.tokens])
    sims = np.maximum(cand_vecs @ ref_vecs.T, 0.0)
    precision = float(sims.max(axis=1).mean())
    recall = float(sims.max(axis=0).mean())
    return PRF(precision, recall, _f1(precision, recall))


def score_pair(
    candidate_text: str,
    reference_text: str,
    metrics: Sequence[str],
    embedder=None,
    scorer: Callable[[str, str], float] | None = None,
    rouge_mode: str = "f1",
) -> dict[str, float]:
    """Score one candidate/reference pair on the requested metrics.

    Args:
        candidate_text: System output.
        reference_text: One reference paraphrase.
        metrics: Names from :data:`METRIC_NAMES`.
        embedder: Required when ``embed_f1`` is requested.
        scorer: Required when ``external_scorer`` is requested; a callable
            ``(candidate, reference) -> float`` wrapping any external learned
            metric.
        rouge_mode: ``"f1"`` or ``"recall"``; which ROUGE component to report.

    Returns:
        Mapping of metric name to value.
    """
    if rouge_mode not in ("f1", "recall"):
        raise MetricError(f"unknown rouge_mode {rouge_mode!r}")
    unknown = [m for m in metrics if m not in METRIC_NAMES]
    if unknown:
        raise MetricError(f"unknown metrics: {', '.join(unknown)}")
    if "embed_f1" in metrics and embedder is None:
        raise MetricError("embed_f1 requested but no embedder given")
    if "external_scorer" in metrics and scorer is None:
        raise MetricError("external_scorer requested but no scorer given")

    cand = tokenize(candidate_text)
    ref = tokenize(reference_text)
    out: dict[str, float] = {}
    need_precisions = any(m in metrics for m in ("bleu_p1", "bleu_p2", "bleu_p3", "bleu_p4"))
    if need_precisions:
        p1, p2, p3, p4 = ngram_precisions(cand, ref, 4)
        for name, value in (("bleu_p1", p1), ("bleu_p2", p2), ("bleu_p3", p3), ("bleu_p4", p4)):
            if name in metrics:
                out[name] = value
    component = 2 if rouge_mode == "f1" else 1
    for name in metrics:
        if name == "bleu":
            out[name] = bleu(cand, ref)
        elif name == "rouge1":
            out[name] = rouge_n(cand, ref, 1)[component]
        elif name == "rouge2":
            out[name] = rouge_n(cand, ref, 2)[component]
        elif name == "rougeL":
            out[name] = rouge_l(cand, ref)[component]
        elif name == "rougeLsum":
            out[name] = rouge_lsum(cand, ref)[component]
        elif name == "embed_f1":
            out[name] = embed_f1(cand, ref, embedder).f1
        elif name == "external_scorer":
            out[name] = float(scorer(candidate_text, reference_text))
    return out


@dataclass
class QueryScore:
    """Per-query metric values after taking the best reference for each metric."""

    query_id: str
    term: str
    values: dict[str, float]
    #: Index (into the record's reference list) of the reference that won, per metric.
    best_reference: dict[str, int] = field(default_factory=dict)


@dataclass
class MetricReport:
    """Mean and population standard deviation of each metric over a query set."""

    config_id: str
    n_queries: int
    mean: dict[str, float]
    std: dict[str, float]


def ragrefs(
    runs: Iterable["GenerationRun"],
    records: Iterable["ParaphraseRecord"],
    metrics: Sequence[str],
    embedder=None,
    scorer: Callable[[str, str], float] | None = None,
    config_id: str = "",
    rouge_mode: str = "f1",
) -> tuple[list[QueryScore], MetricReport, list[str]]:
    """Score generation runs against the reference sets of their terms.

    For each run, every metric is computed against every reference of the
    run's term and the maximum is kept; the report then averages those maxima
    over all scored runs.  The maximum is insensitive to reference order and
    to duplicated references.

    Args:
        runs: Generation runs (need ``query_id``, ``term``, ``output_text``).
        records: Paraphrase records (need ``term``, ``references``).
        metrics: Metric names to compute.
        embedder: Passed to :func:`score_pair` for ``embed_f1``.
        scorer: Passed to :func:`score_pair` for ``external_scorer``.
        config_id: Label stored on the report.
        rouge_mode: Which ROUGE component to report.

    Returns:
        ``(scores, report, excluded)`` where ``excluded`` lists query ids of
        runs whose term had no record (scored runs never include them).

    Raises:
        MetricError: If no run could be scored.
    """
    by_term: dict[str, "ParaphraseRecord"] = {}
    for record in records:
        by_term.setdefault(record.term, record)

    scores: list[QueryScore] = []
    excluded: list[str] = []
    for run in runs:
        record = by_term.get(run.term)
        if record is None or not record.references:
            excluded.append(run.query_id)
            continue
        best: dict[str, float] = {}
        best_ref: dict[str, int] = {}
        for ref_index, reference in enumerate(record.references):
            pair = score_pair(
                run.output_text, reference, metrics, embedder, scorer, rouge_mode
            )
            for name, value in pair.items():
                if name not in best or value > best[name]:
                    best[name] = value
                    best_ref[name] = ref_index
        scores.append(
            QueryScore(
                query_id=run.query_id, term=run.term, values=best, best_reference=best_ref
            )
        )

    if not scores:
        raise MetricError("no runs could be scored against the reference set")

    mean: dict[str, float] = {}
    std: dict[str, float] = {}
    for name in metrics:
        values = np.array([s.values[name] for s in scores], dtype=np.float64)
        mean[name] = float(values.mean())
        std[name] = float(values.std())
    report = MetricReport(
        config_id=config_id, n_queries=len(scores), mean=mean, std=std
    )
    return scores, report, excluded


def _round2(value: float) -> str:
    """Round half-up to two decimals, as a string."""
    return str(Decimal(repr(value)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def format_cell(mean: float, std: float) -> str:
    """Render one report cell as ``m.mm_{s.ss}``."""
    return f"{_round2(mean)}_{{{_round2(std)}}}"


@dataclass
class ReportTable:
    """A rendered metric report: column names plus text and CSV serializations."""

    columns: list[str]
    text: str
    csv: str


def _ordered_columns(names: set[str]) -> list[str]:
    ordered = [c for c in REPORT_COLUMN_ORDER if c in names]
    ordered.extend(sorted(names - set(ordered)))
    return ordered


def format_report(reports: Sequence[MetricReport]) -> ReportTable:
    """Render metric reports as one row per configuration.

    Cells carry the mean with the standard deviation as a subscript,
    ``m.mm_{s.ss}``, in both the plain-text table and the CSV (the CSV holds
    the same cell strings; machine-readable means and deviations live in the
    report objects themselves).

    Args:
        reports: One report per configuration, in presentation order.

    Returns:
        A :class:`ReportTable`.
    """
    if not reports:
        raise MetricError("no reports to format")
    names: set[str] = set()
    for report in reports:
        names.update(report.mean)
    columns = _ordered_columns(names)

    header = ["config", "n"] + columns
    rows: list[list[str]] = []
    for report in reports:
        row = [report.config_id, str(report.n_queries)]
        for column in columns:
            if column in report.mean:
                row.append(format_cell(report.mean[column], report.std[column]))
            else:
                row.append("-")
        rows.append(row)

    widths = [max(len(header[i]), *(len(r[i]) for r in rows)) for i in range(len(header))]
    lines = [
        "  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip(),
        "  ".join("-" * w for w in widths),
    ]
    for row in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
    text = "\n".join(lines) + "\n"

    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(row) + "\n")
    return ReportTable(columns=columns, text=text, csv=buf.getvalue())


@dataclass
class CorrelationResult:
    """Pearson correlations between automatic metrics and manual criteria."""

    metric_names: list[str]
    criteria: list[str]
    #: values[metric][criterion] -> correlation in [-1, 1]
    values: dict[str, dict[str, float]]
    #: (metric, criterion) pairs where a side was constant (correlation set to 0).
    constant_pairs: list[tuple[str, str]]
    n_configs: int


def _pearson(x: np.ndarray, y: np.ndarray) -> float | None:
    """Pearson r, or ``None`` when either series is constant."""
    dx = x - x.mean()
    dy = y - y.mean()
    sx = math.sqrt(float(dx @ dx))
    sy = math.sqrt(float(dy @ dy))
    if sx == 0.0 or sy == 0.0:
        return None
    r = float(dx @ dy) / (sx * sy)
    return max(-1.0, min(1.0, r))


def correlate(
    reports: Sequence[MetricReport],
    manual_means: Mapping[str, Mapping[str, float]],
    min_configs: int = 3,
) -> CorrelationResult:
    """Correlate automatic metric means with manual criterion means per config.

    Configurations present in both inputs are paired by ``config_id``; the
    Pearson correlation is computed per (metric, criterion) pair over those
    configurations.  Pairs where either series is constant get a correlation
    of 0 and are listed in ``constant_pairs``.

    Args:
        reports: Automatic metric reports.
        manual_means: Per-config manual criterion means
            (``config_id -> criterion -> value``).
        min_configs: Minimum number of paired configurations.

    Raises:
        MetricError: If fewer than ``min_configs`` configurations pair up.
    """
    paired = [r for r in reports if r.config_id in manual_means]
    if len(paired) < min_configs:
        raise MetricError(
            f"need at least {min_configs} paired configurations, got {len(paired)}"
        )
    metric_names = _ordered_columns({name for r in paired for name in r.mean})
    criteria: list[str] = []
    for config in manual_means.values():
        for criterion in config:
            if criterion not in criteria:
                criteria.append(criterion)

    values: dict[str, dict[str, float]] = {}
    constant_pairs: list[tuple[str, str]] = []
    for metric in metric_names:
        row: dict[str, float] = {}
        x = np.array([r.mean.get(metric, math.nan) for r in paired])
        for criterion in criteria:
            y = np.array(
                [float(manual_means[r.config_id].get(criterion, math.nan)) for r in paired]
            )
            mask = ~(np.isnan(x) | np.isnan(y))
            if mask.sum() < min_configs:
                row[criterion] = 0.0
                constant_pairs.append((metric, criterion))
                continue
            r_value = _pearson(x[mask], y[mask])
            if r_value is None:
                row[criterion] = 0.0
                constant_pairs.append((metric, criterion))
            else:
                row[criterion] = r_value
        values[metric] = row
    return CorrelationResult(
        metric_names=metric_names,
        criteria=criteria,
        values=values,
        constant_pairs=constant_pairs,
        n_configs=len(paired),
    )
