"""Shared fixtures: a deterministic embedder, a stand-in dataset and a fully
offline pipeline tree (dataset + cached wiki responses + config)."""

from __future__ import annotations

import json
import os
import random
from pathlib import Path

import pytest

from ragkit.embed import HashingEmbedder
from ragkit.wiki import WikiClient

from synth_dataset import build_stand_in_dataset

#: Terms for the offline pipeline fixture; accents exercise the
#: accent-insensitive title matching.
FIXTURE_TERMS = (
    "asthme", "bronchite", "eczéma", "hypertension", "diabète", "migraine",
    "anémie", "arthrose", "otite", "sinusite", "angine", "gastrite",
    "hépatite", "néphrite", "phlébite", "tendinite", "conjonctivite",
    "dermatose", "lombalgie", "vertige", "acouphène", "entorse",
    "luxation", "scoliose",
)

_WORDS = (
    "maladie", "inflammation", "affection", "organe", "traitement", "douleur",
    "chronique", "infection", "peau", "sang", "qui", "touche", "provoque",
    "une", "des", "la", "le", "et", "dans", "corps", "tissu", "cellule",
    "muscle", "os", "nerf", "souvent", "frequente", "benigne", "grave",
)


def _sentence(rng: random.Random, lead: str | None = None, words: int = 8) -> str:
    tokens = [lead] if lead else []
    while len(tokens) < words:
        tokens.append(rng.choice(_WORDS))
    text = " ".join(tokens)
    return text[0].upper() + text[1:] + "."


def write_fixture_dataset(path: Path, terms=FIXTURE_TERMS) -> Path:
    """A small TSV dataset: 1 to 3 French-ish paraphrases per term."""
    rng = random.Random(97)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("term\tparaphrase\n")
        for term in terms:
            for ref in range(rng.randint(1, 3)):
                words = rng.randint(4, 14)
                fh.write(f"{term}\t{_sentence(rng, term if ref == 0 else None, words)[:-1]}\n")
    return path


def write_fixture_wiki_cache(
    cache_dir: Path, terms=FIXTURE_TERMS, language: str = "fr", search_limit: int = 10
) -> Path:
    """Cached search and extract responses for every term.

    Each term gets two matching titles (the second carries a disambiguation
    suffix), one non-matching distractor to exercise the title filter, and an
    empty-extract page for every fourth term to exercise page skipping.
    """
    cache_dir.mkdir(parents=True, exist_ok=True)
    for position, term in enumerate(terms):
        rng = random.Random(1000 + position)
        main_title = term[0].upper() + term[1:]
        second_title = f"{main_title} (médecine)"
        titles = [main_title, "Liste de maladies", second_title]
        body = {"query": {"search": [{"title": t} for t in titles]}}
        WikiClient.write_fixture(
            cache_dir, language, "search", f"{term}|{search_limit}", body
        )
        for title_position, title in enumerate((main_title, second_title)):
            if title_position == 1 and position % 4 == 0:
                extract = ""  # empty page: must be skipped, not kept
            else:
                lines = [
                    _sentence(rng, term, 10) + " " + _sentence(rng, None, 8)
                    for _ in range(4)
                ]
                extract = "\n".join(lines)
            page_body = {
                "query": {
                    "pages": {
                        str(7000 + 10 * position + title_position): {
                            "pageid": 7000 + 10 * position + title_position,
                            "title": title,
                            "extract": extract,
                        }
                    }
                }
            }
            WikiClient.write_fixture(cache_dir, language, "extract", title, page_body)
    return cache_dir


def write_pipeline_config(
    root: Path,
    n_backends: int = 1,
    budgets=(25, 50),
    per_config: int = 5,
    annotators: dict | None = None,
) -> Path:
    """A complete offline pipeline tree under ``root``; returns the config path.

    Uses the mock generation backend, the hashing embedder and the cached
    wiki fixtures, so every stage runs without network access and
    bit-reproducibly.
    """
    root.mkdir(parents=True, exist_ok=True)
    write_fixture_dataset(root / "dataset.tsv")
    write_fixture_wiki_cache(root / "wiki_cache")
    backends = [
        {
            "endpoint_url": "mock:para",
            "model_name": f"mock-{chr(ord('a') + i)}",
            "finetuned": i % 2 == 1,
        }
        for i in range(n_backends)
    ]
    config = {
        "dataset": {"path": "dataset.tsv", "format": "tsv"},
        "split": {"ratios": [0.6, 0.2, 0.2], "seed": 13},
        "kb": {
            "splits": ["validation", "test"],
            "language": "fr",
            "top_n": 3,
            "line_limit": 20,
            "cache_dir": "wiki_cache",
            "offline": True,
            "granularity": "sentence",
            "max_chunk_tokens": 64,
        },
        "embedders": [{"name": "hash64", "kind": "hashing", "dim": 64}],
        "backends": backends,
        "generation": {
            "split": "test",
            "modes": ["base", "rag"],
            "budgets": list(budgets),
            "retrieval_k": 3,
            "workers": 2,
        },
        "eval": {
            "metrics": [
                "bleu", "bleu_p1", "bleu_p2", "bleu_p3", "bleu_p4",
                "rouge1", "rouge2", "rougeL", "rougeLsum", "embed_f1",
            ],
            "embedder": "hash64",
        },
        "campaign": {"per_config": per_config, "seed": 7},
        "annotators": annotators or {"token-alice": "alice", "token-bob": "bob"},
        "output_dir": "out",
    }
    config_path = root / "config.yaml"
    import yaml

    config_path.write_text(yaml.safe_dump(config, sort_keys=True), encoding="utf-8")
    return config_path


@pytest.fixture
def hash_embedder():
    return HashingEmbedder(dim=64)


@pytest.fixture(scope="session")
def stand_in_dataset(tmp_path_factory) -> Path:
    """The profile-matched dataset; a real corpus path overrides it via env."""
    real = os.environ.get("RAGKIT_REFOMED_PATH")
    if real:
        return Path(real)
    path = tmp_path_factory.mktemp("dataset") / "refomed_stand_in.tsv"
    return build_stand_in_dataset(path)


@pytest.fixture
def pipeline_tree(tmp_path) -> Path:
    """A ready-to-run offline pipeline config in a fresh directory."""
    return write_pipeline_config(tmp_path / "tree")
