"""Shared inputs for the demo scripts: a small paraphrase dataset and a
matching offline encyclopedia cache, so every demo runs without network."""

from __future__ import annotations

import random
from pathlib import Path

from ragkit.wiki import WikiClient

TERMS = (
    "asthme", "bronchite", "eczéma", "migraine", "anémie", "otite",
    "sinusite", "angine", "gastrite", "entorse", "phlébite", "vertige",
)

_WORDS = (
    "maladie", "inflammation", "affection", "organe", "traitement", "douleur",
    "chronique", "infection", "peau", "sang", "qui", "touche", "provoque",
    "une", "des", "la", "le", "et", "dans", "corps", "tissu", "souvent",
)


def _sentence(rng: random.Random, lead: str | None = None, words: int = 8) -> str:
    tokens = [lead] if lead else []
    while len(tokens) < words:
        tokens.append(rng.choice(_WORDS))
    text = " ".join(tokens)
    return text[0].upper() + text[1:] + "."


def write_demo_dataset(path: Path) -> Path:
    """A TSV of one to three short paraphrases per term."""
    rng = random.Random(42)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("term\tparaphrase\n")
        for term in TERMS:
            for ref in range(rng.randint(1, 3)):
                sentence = _sentence(rng, term if ref == 0 else None, rng.randint(5, 12))
                fh.write(f"{term}\t{sentence[:-1]}\n")
    return path


def write_demo_wiki_cache(cache_dir: Path) -> Path:
    """Cached search and extract responses for every demo term."""
    cache_dir.mkdir(parents=True, exist_ok=True)
    for position, term in enumerate(TERMS):
        rng = random.Random(100 + position)
        title = term[0].upper() + term[1:]
        WikiClient.write_fixture(
            cache_dir, "fr", "search", f"{term}|10",
            {"query": {"search": [{"title": title}, {"title": "Liste de maladies"}]}},
        )
        lines = [_sentence(rng, term, 9) + " " + _sentence(rng, None, 7) for _ in range(4)]
        WikiClient.write_fixture(
            cache_dir, "fr", "extract", title,
            {"query": {"pages": {str(position): {"title": title, "extract": "\n".join(lines)}}}},
        )
    return cache_dir
