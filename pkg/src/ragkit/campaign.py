"""Sampling generation runs into a human-annotation campaign.

The campaign draws the same terms from every configuration wherever possible
(a paired design: raters judge each configuration on the same inputs), hides
the configuration from annotators, and shuffles presentation order.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .generator import GenerationRun

__all__ = ["CampaignError", "CampaignSample", "sample_campaign",
           "campaign_to_jsonl", "campaign_from_jsonl"]

logger = logging.getLogger(__name__)


class CampaignError(ValueError):
    """Raised when runs cannot populate the requested campaign."""


@dataclass(frozen=True)
class CampaignSample:
    """One item of the annotation campaign.

    ``sample_id`` is what annotators see; ``config_id`` and ``query_id`` stay
    server-side so ratings are blind to the configuration.
    """

    sample_id: str
    query_id: str
    config_id: str
    term: str
    output_text: str


def _sample_id(seed: int, query_id: str) -> str:
    return hashlib.sha1(f"{seed}\x1f{query_id}".encode("utf-8")).hexdigest()[:12]


def sample_campaign(
    runs: Sequence[GenerationRun], per_config: int, seed: int
) -> list[CampaignSample]:
    """Draw ``per_config`` runs from every configuration.

    Terms shared by all configurations are preferred and drawn once for all of
    them, so the campaign stays paired; when a configuration lacks shared
    terms, it tops up from its own remaining terms (logged as a warning, as is
    a configuration that cannot reach ``per_config`` at all).  The final
    presentation order is shuffled.  Identical ``(runs, per_config, seed)``
    give an identical campaign.

    Args:
        runs: Generation runs, any number of configurations.
        per_config: Samples wanted per configuration (>= 1).
        seed: PRNG seed for term choice and shuffling.

    Raises:
        CampaignError: On an empty run list, ``per_config < 1``, or duplicate
            (config, term) pairs.
    """
    if per_config < 1:
        raise CampaignError(f"per_config must be >= 1, got {per_config}")
    if not runs:
        raise CampaignError("no runs to sample from")

    by_config: dict[str, dict[str, GenerationRun]] = {}
    for run in runs:
        terms = by_config.setdefault(run.config_id, {})
        if run.term in terms:
            raise CampaignError(
                f"duplicate run for config {run.config_id!r}, term {run.term!r}"
            )
        terms[run.term] = run

    rng = random.Random(seed)
    shared = set.intersection(*(set(terms) for terms in by_config.values()))
    shared_order = sorted(shared)
    take_shared = min(per_config, len(shared_order))
    chosen_shared = (
        rng.sample(shared_order, take_shared) if take_shared else []
    )

    samples: list[CampaignSample] = []
    for config_id, terms in by_config.items():
        chosen = list(chosen_shared)
        if len(chosen) < per_config:
            remaining = sorted(set(terms) - set(chosen))
            top_up = min(per_config - len(chosen), len(remaining))
            if top_up:
                logger.warning(
                    "campaign: config %s tops up %d samples outside the shared term set",
                    config_id,
                    top_up,
                )
                chosen.extend(rng.sample(remaining, top_up))
        if len(chosen) < per_config:
            logger.warning(
                "campaign: config %s has only %d of %d requested samples",
                config_id,
                len(chosen),
                per_config,
            )
        for term in chosen:
            run = terms[term]
            samples.append(
                CampaignSample(
                    sample_id=_sample_id(seed, run.query_id),
                    query_id=run.query_id,
                    config_id=run.config_id,
                    term=run.term,
                    output_text=run.output_text,
                )
            )
    rng.shuffle(samples)
    return samples


def campaign_to_jsonl(samples: Iterable[CampaignSample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sample in samples:
            fh.write(
                json.dumps(
                    {
                        "sample_id": sample.sample_id,
                        "query_id": sample.query_id,
                        "config_id": sample.config_id,
                        "term": sample.term,
                        "output_text": sample.output_text,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


def campaign_from_jsonl(path: str | Path) -> list[CampaignSample]:
    out: list[CampaignSample] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            out.append(
                CampaignSample(
                    sample_id=obj["sample_id"],
                    query_id=obj["query_id"],
                    config_id=obj["config_id"],
                    term=obj["term"],
                    output_text=obj["output_text"],
                )
            )
    return out
