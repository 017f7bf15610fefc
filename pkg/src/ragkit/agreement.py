"""Inter-annotator agreement and aggregation of manual annotations.

Annotations rate generated paraphrases on five criteria: readability (1 best
to 3 worst) and strict/relaxed binary completeness and correctness.  The
criteria and their legal values live in a JSON schema shared with the
annotation UI, so both ends validate against the same domains.

Agreement is Krippendorff's alpha for nominal data (computed from the
coincidence matrix, so any number of annotators and missing ratings are
handled) plus plain percent agreement.
"""

from __future__ import annotations

import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

__all__ = [
    "AgreementError",
    "AnnotationRecord",
    "CRITERIA",
    "annotation_domains",
    "validate_annotation_values",
    "AlphaResult",
    "krippendorff_alpha",
    "percent_agreement",
    "AgreementReport",
    "compute_agreement",
    "AggregateResult",
    "aggregate_manual",
    "annotations_to_jsonl",
    "annotations_from_jsonl",
    "format_agreement",
]

logger = logging.getLogger(__name__)


class AgreementError(ValueError):
    """Raised on invalid annotation values or unusable agreement input."""


def annotation_domains() -> dict[str, dict]:
    """The shared criterion schema: legal values, labels and the worst value."""
    text = resources.files("ragkit").joinpath("annotation_domains.json").read_text(
        encoding="utf-8"
    )
    return json.loads(text)


_DOMAINS = None


def _domains() -> dict[str, dict]:
    global _DOMAINS
    if _DOMAINS is None:
        _DOMAINS = annotation_domains()
    return _DOMAINS


#: Criterion names, in schema order.
CRITERIA = tuple(annotation_domains().keys())


def validate_annotation_values(values: Mapping[str, int]) -> None:
    """Check a criterion->value mapping against the shared schema.

    Raises:
        AgreementError: Naming the first missing or out-of-domain field.
    """
    domains = _domains()
    for criterion, domain in domains.items():
        if criterion not in values:
            raise AgreementError(f"missing criterion {criterion!r}")
        value = values[criterion]
        if not isinstance(value, int) or isinstance(value, bool) or value not in domain["values"]:
            raise AgreementError(
                f"invalid value {value!r} for {criterion!r}; "
                f"allowed: {domain['values']}"
            )
    extras = set(values) - set(domains)
    if extras:
        raise AgreementError(f"unknown criteria: {sorted(extras)}")


@dataclass(frozen=True)
class AnnotationRecord:
    """One annotator's ratings of one sample on all five criteria."""

    sample_id: str
    annotator_id: str
    readability: int
    completeness_strict: int
    completeness_relaxed: int
    correctness_strict: int
    correctness_relaxed: int

    def __post_init__(self) -> None:
        if not self.sample_id:
            raise AgreementError("sample_id must be non-empty")
        if not self.annotator_id:
            raise AgreementError("annotator_id must be non-empty")
        validate_annotation_values(self.values())

    def values(self) -> dict[str, int]:
        return {criterion: getattr(self, criterion) for criterion in CRITERIA}

    def to_dict(self) -> dict:
        out = {"sample_id": self.sample_id, "annotator_id": self.annotator_id}
        out.update(self.values())
        return out

    @classmethod
    def from_dict(cls, obj: Mapping) -> "AnnotationRecord":
        try:
            return cls(
                sample_id=obj["sample_id"],
                annotator_id=obj["annotator_id"],
                **{criterion: obj[criterion] for criterion in CRITERIA},
            )
        except KeyError as exc:
            raise AgreementError(f"annotation record missing field {exc}") from exc


def annotations_to_jsonl(records: Iterable[AnnotationRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record.to_dict(), ensure_ascii=False) + "\n")


def annotations_from_jsonl(path: str | Path) -> list[AnnotationRecord]:
    out: list[AnnotationRecord] = []
    with open(path, encoding="utf-8") as fh:
        for number, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(AnnotationRecord.from_dict(json.loads(line)))
            except (json.JSONDecodeError, AgreementError) as exc:
                raise AgreementError(f"{Path(path).name}: line {number}: {exc}") from exc
    return out


def _units(records: Sequence[AnnotationRecord], criterion: str) -> dict[str, list[int]]:
    """Ratings per sample; one entry per annotator (last rating wins)."""
    if criterion not in CRITERIA:
        raise AgreementError(f"unknown criterion {criterion!r}")
    latest: dict[tuple[str, str], int] = {}
    for record in records:
        latest[(record.sample_id, record.annotator_id)] = getattr(record, criterion)
    units: dict[str, list[int]] = defaultdict(list)
    for (sample_id, _), value in latest.items():
        units[sample_id].append(value)
    return units


class AlphaResult(NamedTuple):
    """Krippendorff's alpha plus a flag for the degenerate no-variance case."""

    alpha: float
    degenerate: bool


def krippendorff_alpha(
    records: Sequence[AnnotationRecord], criterion: str
) -> AlphaResult:
    """Krippendorff's alpha for nominal data on one criterion.

    Built from the coincidence matrix: each sample rated by ``m >= 2``
    annotators contributes each ordered pair of its ratings with weight
    ``1/(m-1)``.  With observed disagreement ``D_o`` and expected
    disagreement ``D_e`` (both from the matrix), alpha is ``1 - D_o/D_e``.
    When every pairable rating is identical, ``D_e`` is 0 and alpha is
    reported as 1.0 with ``degenerate=True`` (agreement is perfect but
    chance-corrected agreement is undefined).

    The value is invariant under relabeling of the categories.

    Raises:
        AgreementError: If no sample has two or more ratings.
    """
    units = _units(records, criterion)
    pairable = {s: vals for s, vals in units.items() if len(vals) >= 2}
    if not pairable:
        raise AgreementError(
            f"no sample has two or more ratings for {criterion!r}"
        )
    coincidence: Counter[tuple[int, int]] = Counter()
    n_total = 0
    for values in pairable.values():
        m = len(values)
        weight = 1.0 / (m - 1)
        n_total += m
        for i, vi in enumerate(values):
            for j, vj in enumerate(values):
                if i != j:
                    coincidence[(vi, vj)] += weight

    categories = sorted({c for pair in coincidence for c in pair})
    marginals = {
        c: sum(coincidence[(c, k)] for k in categories) for c in categories
    }
    observed_disagreement = (
        sum(v for (c, k), v in coincidence.items() if c != k) / n_total
    )
    expected_pairs = sum(
        marginals[c] * marginals[k]
        for c in categories
        for k in categories
        if c != k
    )
    expected_disagreement = expected_pairs / (n_total * (n_total - 1))
    if expected_disagreement == 0.0:
        return AlphaResult(alpha=1.0, degenerate=True)
    return AlphaResult(
        alpha=1.0 - observed_disagreement / expected_disagreement, degenerate=False
    )


def percent_agreement(records: Sequence[AnnotationRecord], criterion: str) -> float:
    """Fraction of multiply-rated samples whose ratings all agree.

    Raises:
        AgreementError: If no sample has two or more ratings.
    """
    units = _units(records, criterion)
    pairable = [vals for vals in units.values() if len(vals) >= 2]
    if not pairable:
        raise AgreementError(f"no sample has two or more ratings for {criterion!r}")
    agreeing = sum(1 for vals in pairable if len(set(vals)) == 1)
    return agreeing / len(pairable)


@dataclass
class AgreementReport:
    """Agreement figures for one criterion over one record set."""

    criterion: str
    alpha: float
    alpha_degenerate: bool
    percent: float
    n_samples: int
    n_annotators: int

    def to_dict(self) -> dict:
        return {
            "criterion": self.criterion,
            "alpha": self.alpha,
            "alpha_degenerate": self.alpha_degenerate,
            "percent": self.percent,
            "n_samples": self.n_samples,
            "n_annotators": self.n_annotators,
        }


def compute_agreement(records: Sequence[AnnotationRecord]) -> list[AgreementReport]:
    """Alpha and percent agreement for every criterion.

    Raises:
        AgreementError: If no sample has two or more ratings.
    """
    reports: list[AgreementReport] = []
    for criterion in CRITERIA:
        units = _units(records, criterion)
        pairable = {s: v for s, v in units.items() if len(v) >= 2}
        alpha = krippendorff_alpha(records, criterion)
        percent = percent_agreement(records, criterion)
        annotators = {r.annotator_id for r in records}
        reports.append(
            AgreementReport(
                criterion=criterion,
                alpha=alpha.alpha,
                alpha_degenerate=alpha.degenerate,
                percent=percent,
                n_samples=len(pairable),
                n_annotators=len(annotators),
            )
        )
    return reports


@dataclass
class AggregateResult:
    """Per-configuration manual means plus the ties hit along the way.

    ``means[config_id][criterion]`` is the mean readability (1 to 3) or, for
    binary criteria, the percentage of samples judged 1 (0 to 100).
    """

    means: dict[str, dict[str, float]]
    #: (sample_id, criterion) pairs whose vote was tied (resolved to worst).
    ties: list[tuple[str, str]] = field(default_factory=list)
    n_samples: int = 0


def _majority(values: Sequence[int], criterion: str) -> tuple[int, bool]:
    """Majority vote; ties resolve to the worst value among the tied ones."""
    counts = Counter(values)
    top = max(counts.values())
    tied = sorted(c for c, n in counts.items() if n == top)
    if len(tied) == 1:
        return tied[0], False
    worst = _domains()[criterion]["worst"]
    # Worst is the highest value for readability, the lowest for binaries.
    resolved = max(tied) if worst == max(_domains()[criterion]["values"]) else min(tied)
    return resolved, True


def aggregate_manual(
    records: Sequence[AnnotationRecord],
    sample_configs: Mapping[str, str],
) -> AggregateResult:
    """Reduce annotations to one row per configuration.

    Each sample's ratings reduce to a majority vote per criterion (ties go to
    the worst value and are flagged); votes then average per configuration.
    Binary criteria are reported as percentages (share of samples voted 1),
    readability as a plain mean.

    Args:
        records: Annotation records; several annotators per sample welcome.
        sample_configs: ``sample_id -> config_id``; every annotated sample
            must be present.

    Raises:
        AgreementError: On an annotated sample missing from
            ``sample_configs``, or on no records.
    """
    if not records:
        raise AgreementError("no annotation records")
    missing = sorted({r.sample_id for r in records} - set(sample_configs))
    if missing:
        raise AgreementError(f"samples not in campaign: {missing[:5]}")

    votes: dict[str, dict[str, int]] = {}
    ties: list[tuple[str, str]] = []
    for criterion in CRITERIA:
        units = _units(records, criterion)
        for sample_id, values in units.items():
            vote, tied = _majority(values, criterion)
            votes.setdefault(sample_id, {})[criterion] = vote
            if tied:
                ties.append((sample_id, criterion))

    by_config: dict[str, list[dict[str, int]]] = defaultdict(list)
    for sample_id, sample_votes in votes.items():
        by_config[sample_configs[sample_id]].append(sample_votes)

    means: dict[str, dict[str, float]] = {}
    for config_id, rows in sorted(by_config.items()):
        out: dict[str, float] = {}
        for criterion in CRITERIA:
            values = [row[criterion] for row in rows]
            mean = sum(values) / len(values)
            if set(_domains()[criterion]["values"]) == {0, 1}:
                out[criterion] = 100.0 * mean
            else:
                out[criterion] = mean
        means[config_id] = out
    return AggregateResult(means=means, ties=ties, n_samples=len(votes))


def format_agreement(
    groups: Mapping[str, Sequence[AnnotationRecord]]
) -> tuple[str, str]:
    """Render agreement reports per record group as text and CSV.

    Args:
        groups: Group label -> records (for example token-budget or
            fine-tuning cohorts); a single ``"all"`` group is fine.

    Returns:
        ``(text, csv)``; one block per group, one row per criterion, with
        alpha, percent agreement and sample counts.  Degenerate alphas are
        marked.
    """
    header = ["group", "criterion", "alpha", "percent", "n_samples", "n_annotators"]
    text_lines: list[str] = []
    csv_lines = [",".join(header)]
    for label in groups:
        reports = compute_agreement(groups[label])
        text_lines.append(f"[{label}]")
        for report in reports:
            mark = " (degenerate: no variance)" if report.alpha_degenerate else ""
            text_lines.append(
                f"  {report.criterion:<22} alpha={report.alpha:+.3f}{mark}  "
                f"percent={report.percent * 100:.1f}%  "
                f"n={report.n_samples}  annotators={report.n_annotators}"
            )
            csv_lines.append(
                ",".join(
                    [
                        label,
                        report.criterion,
                        f"{report.alpha:.6f}",
                        f"{report.percent:.6f}",
                        str(report.n_samples),
                        str(report.n_annotators),
                    ]
                )
            )
        text_lines.append("")
    return "\n".join(text_lines).rstrip() + "\n", "\n".join(csv_lines) + "\n"
