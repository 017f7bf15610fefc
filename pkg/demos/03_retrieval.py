"""Embed knowledge-base chunks, build a vector index, and query it.

Run from the repository root:

    python3 demos/03_retrieval.py

The hashing embedder is fully deterministic (character trigrams hashed into a
fixed number of signed buckets, then L2-normalized), so index builds and
query scores reproduce bit-for-bit across machines.
"""

import tempfile
from pathlib import Path

from _support import TERMS, write_demo_wiki_cache

from ragkit.corpus import build_kb, chunk_kb
from ragkit.embed import HashingEmbedder
from ragkit.retriever import build_index, load_index, query_index, save_index
from ragkit.wiki import WikiClient

with tempfile.TemporaryDirectory() as workdir:
    cache_dir = write_demo_wiki_cache(Path(workdir) / "wiki_cache")
    client = WikiClient(cache_dir=cache_dir, offline=True)
    documents = build_kb(TERMS, client, top_n=3, line_limit=20).documents
    chunks = chunk_kb(documents, granularity="sentence", max_tokens=64)

    embedder = HashingEmbedder(dim=256, model_name="hash256")
    index = build_index(chunks, embedder)
    print(f"index: {len(index)} chunks embedded at dim={index.dim}")

    for query in ("asthme difficulté à respirer", "inflammation de la peau"):
        context = query_index(index, query, k=3, embedder=embedder)
        print(f"\nquery: {query!r}")
        for hit in context.hits:
            print(f"  {hit.score:.4f}  {hit.chunk_ref}")

    # The on-disk format round-trips exactly: same scores after save/load.
    index_path = Path(workdir) / "kb.idx"
    save_index(index, index_path)
    reloaded = load_index(index_path)
    again = query_index(reloaded, "asthme difficulté à respirer", k=3, embedder=embedder)
    fresh = query_index(index, "asthme difficulté à respirer", k=3, embedder=embedder)
    assert [(h.chunk_ref, h.score) for h in again.hits] == [
        (h.chunk_ref, h.score) for h in fresh.hits
    ]
    print(f"\nsaved {index_path.stat().st_size} bytes; reloaded index scores match exactly")
