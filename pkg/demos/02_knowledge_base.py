"""Build a knowledge base from cached encyclopedia responses and chunk it.

Run from the repository root:

    python3 demos/02_knowledge_base.py

The cache directory stands in for the live API: the same client serves
requests from disk (offline=True) or fetches, throttles and caches live ones.
"""

import tempfile
from pathlib import Path

from _support import TERMS, write_demo_wiki_cache

from ragkit.corpus import build_kb, chunk_kb
from ragkit.wiki import WikiClient

with tempfile.TemporaryDirectory() as workdir:
    cache_dir = write_demo_wiki_cache(Path(workdir) / "wiki_cache")
    client = WikiClient(cache_dir=cache_dir, offline=True)

    # Top-3 title-matching articles per term, first 20 normalized lines each.
    # Titles that do not contain the term ("Liste de maladies") are dropped.
    result = build_kb(TERMS[:6], client, top_n=3, line_limit=20)
    print(f"knowledge base: {len(result.documents)} documents, "
          f"{len(result.misses)} misses, {len(result.failures)} failures")
    for document in result.documents[:3]:
        print(f"  [{document.rank}] {document.term} -> {document.page_title!r}, "
              f"{len(document.lines)} lines")

    chunks = chunk_kb(result.documents, granularity="sentence", max_tokens=64)
    print(f"\nchunks: {len(chunks)} (sentence granularity, <= 64 tokens each)")
    for chunk in chunks[:3]:
        print(f"  {chunk.chunk_ref}: {chunk.text[:70]}...")

    # Chunking is lossless: joining a document's chunks gives back its text.
    first_doc_ref = chunks[0].doc_ref
    joined = " ".join(c.text for c in chunks if c.doc_ref == first_doc_ref)
    print(f"\nlossless: chunks of {first_doc_ref} join back to "
          f"{len(joined)} characters of document text")
