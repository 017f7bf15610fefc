"""Render prompts, generate with the offline mock backend, and score outputs.

Run from the repository root:

    python3 demos/04_generation_and_scoring.py

Two prompting modes are compared: "base" asks the question alone, "rag"
prepends retrieved knowledge-base passages.  The mock:para backend answers
deterministically so the whole comparison reproduces offline.  Every output
is scored against all reference paraphrases of its term and the best
reference wins, per metric.
"""

import tempfile
from pathlib import Path

from _support import write_demo_dataset, write_demo_wiki_cache

from ragkit.corpus import build_kb, chunk_kb, load_dataset
from ragkit.embed import HashingEmbedder
from ragkit.generator import (
    BackendConfig,
    GenerationRun,
    config_id_for,
    generate,
    load_template,
    query_id_for,
    render_prompt,
)
from ragkit.metrics import format_report, ragrefs
from ragkit.retriever import build_index, query_index
from ragkit.wiki import WikiClient

with tempfile.TemporaryDirectory() as workdir:
    root = Path(workdir)
    records = load_dataset(write_demo_dataset(root / "dataset.tsv"))
    terms = sorted({r.term for r in records})[:5]

    cache_dir = write_demo_wiki_cache(root / "wiki_cache")
    client = WikiClient(cache_dir=cache_dir, offline=True)
    documents = build_kb(terms, client, top_n=3, line_limit=20).documents
    chunks = chunk_kb(documents, granularity="sentence", max_tokens=64)
    embedder = HashingEmbedder(dim=256, model_name="hash256")
    index = build_index(chunks, embedder)

    backend = BackendConfig(endpoint_url="mock:para", model_name="demo-model")
    templates = {mode: load_template(mode) for mode in ("base", "rag")}

    runs_by_mode = {"base": [], "rag": []}
    for mode in ("base", "rag"):
        encoder = embedder.model_name if mode == "rag" else None
        config_id = config_id_for(backend.model_name, mode, encoder, 25)
        for term in terms:
            context = None
            refs: list[str] = []
            if mode == "rag":
                hits = query_index(index, term, k=3, embedder=embedder)
                context = [c.text for c in chunks if c.chunk_ref in set(hits.chunk_refs)]
                refs = hits.chunk_refs
            rendered = render_prompt(templates[mode], term, context=context)
            run = GenerationRun(
                query_id=query_id_for(config_id, term),
                config_id=config_id,
                term=term,
                mode=mode,
                backend_model=backend.model_name,
                encoder=encoder,
                max_tokens=25,
                prompt=rendered.text,
                context_refs=refs,
            )
            runs_by_mode[mode].append(generate(backend, run))

    sample = runs_by_mode["rag"][0]
    print(f"sample rag prompt for {sample.term!r}:")
    print("  " + sample.prompt[:160].replace("\n", "\n  ") + "...")
    print(f"sample output: {sample.output_text!r}\n")

    metrics = ["bleu", "rouge1", "rougeL", "embed_f1"]
    reports = []
    for mode, runs in runs_by_mode.items():
        scores, report, excluded = ragrefs(
            runs, records, metrics, embedder=embedder, config_id=runs[0].config_id
        )
        reports.append(report)
        assert not excluded

    # Cells read m.mm_{s.ss}: mean with population standard deviation.
    print(format_report(reports).text)
