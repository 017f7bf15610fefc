"""Generator tests: prompt templates and rendering, the offline mock backend,
retry behaviour, configuration enumeration and resumable batch runs."""

from __future__ import annotations

import logging

import pytest
import requests

from ragkit.corpus import Chunk
from ragkit.embed import HashingEmbedder
from ragkit.generator import (
    BackendConfig,
    GenerationRun,
    GeneratorError,
    PromptError,
    PromptTemplate,
    RetrieverHandle,
    RunSpec,
    config_id_for,
    enumerate_configs,
    generate,
    load_template,
    query_id_for,
    render_prompt,
    run_batch,
    run_from_dict,
    run_to_dict,
    runs_from_jsonl,
)
from ragkit.retriever import build_index


# -- templates ---------------------------------------------------------------------


def test_packaged_templates_have_required_placeholders():
    base = load_template("base")
    assert base.text.count("{question}") == 1
    assert "{context}" not in base.text
    rag = load_template("rag")
    assert rag.text.count("{question}") == 1
    assert rag.text.count("{context}") == 1
    assert "Contexte" in rag.text and "Question" in rag.text


def test_template_from_file(tmp_path):
    path = tmp_path / "tpl.txt"
    path.write_text("Définis {question} simplement.", encoding="utf-8")
    template = load_template("base", path)
    assert template.text == "Définis {question} simplement."


def test_template_placeholder_validation():
    with pytest.raises(PromptError, match="question"):
        PromptTemplate(mode="base", text="pas de champ")
    with pytest.raises(PromptError, match="question"):
        PromptTemplate(mode="base", text="{question} et {question}")
    with pytest.raises(PromptError, match="context"):
        PromptTemplate(mode="base", text="{question} {context}")
    with pytest.raises(PromptError, match="context"):
        PromptTemplate(mode="rag", text="{question} seulement")
    with pytest.raises(PromptError):
        PromptTemplate(mode="other", text="{question}")


# -- rendering ---------------------------------------------------------------------


def test_render_base_substitutes_question():
    template = PromptTemplate(mode="base", text="Explique : {question}")
    result = render_prompt(template, "asthme")
    assert result.text == "Explique : asthme"
    assert not result.truncated and result.dropped_context == 0


def test_render_base_rejects_context():
    template = PromptTemplate(mode="base", text="Explique : {question}")
    with pytest.raises(PromptError):
        render_prompt(template, "asthme", ["contexte"])


def test_render_rag_joins_context_with_blank_lines():
    template = PromptTemplate(mode="rag", text="C:\n{context}\nQ: {question}")
    result = render_prompt(template, "asthme", ["premier", "second"])
    assert result.text == "C:\npremier\n\nsecond\nQ: asthme"


def test_render_rag_requires_context():
    template = PromptTemplate(mode="rag", text="{context} {question}")
    with pytest.raises(PromptError):
        render_prompt(template, "asthme", [])


def test_render_rejects_empty_question():
    template = PromptTemplate(mode="base", text="{question}")
    with pytest.raises(PromptError):
        render_prompt(template, "   ")


def test_render_drops_context_from_the_end_to_fit_budget():
    template = PromptTemplate(mode="rag", text="{context}|{question}")
    items = ["a" * 30, "b" * 30, "c" * 30]
    result = render_prompt(template, "q", items, char_budget=70)
    assert result.truncated and result.dropped_context == 1
    assert "a" * 30 in result.text and "b" * 30 in result.text
    assert "c" not in result.text


def test_render_keeps_prompt_even_when_budget_unreachable():
    template = PromptTemplate(mode="rag", text="{context}|{question}")
    result = render_prompt(template, "q" * 50, ["ctx"], char_budget=10)
    assert result.dropped_context == 1
    assert "q" * 50 in result.text  # question never dropped


def test_render_is_deterministic():
    template = load_template("rag")
    first = render_prompt(template, "asthme", ["un contexte", "autre contexte"])
    second = render_prompt(template, "asthme", ["un contexte", "autre contexte"])
    assert first.text == second.text


# -- single-run generation ------------------------------------------------------------


def _run(prompt="Explique asthme", max_tokens=25, mode="base"):
    return GenerationRun(
        query_id="q1",
        config_id="c1",
        term="asthme",
        mode=mode,
        backend_model="m",
        encoder=None,
        max_tokens=max_tokens,
        prompt=prompt,
    )


def test_generate_mock_static():
    config = BackendConfig(endpoint_url="mock:static:Bonjour", model_name="m")
    run = generate(config, _run())
    assert run.output_text == "Bonjour"
    assert run.finish_reason == "stop"
    assert run.latency_ms == 0
    assert run.raw_response["choices"][0]["message"]["content"] == "Bonjour"


def test_generate_mock_fill_exhausts_budget():
    config = BackendConfig(endpoint_url="mock:fill", model_name="m")
    run = generate(config, _run(max_tokens=7))
    assert len(run.output_text.split()) == 7
    assert run.finish_reason == "length"


def test_generate_mock_para_deterministic_and_budgeted():
    config = BackendConfig(endpoint_url="mock:para", model_name="m")
    first = generate(config, _run(prompt="Explique le zona", max_tokens=25))
    second = generate(config, _run(prompt="Explique le zona", max_tokens=25))
    assert first.output_text == second.output_text
    assert first.finish_reason == second.finish_reason
    assert 0 < len(first.output_text.split()) <= 25
    other = generate(config, _run(prompt="Explique la grippe", max_tokens=25))
    assert other.output_text != first.output_text


def test_generate_base_run_rejects_context_refs():
    with pytest.raises(GeneratorError):
        GenerationRun(
            query_id="q",
            config_id="c",
            term="t",
            mode="base",
            backend_model="m",
            encoder=None,
            max_tokens=5,
            prompt="p",
            context_refs=["x#0"],
        )


def test_generate_retries_then_succeeds():
    calls = []

    def flaky(url, payload, headers, timeout_s):
        calls.append(1)
        if len(calls) < 3:
            raise requests.ConnectionError("down")
        return 200, {
            "choices": [
                {"message": {"content": "ok"}, "finish_reason": "stop"}
            ]
        }, 4

    config = BackendConfig(endpoint_url="http://x", model_name="m", retries=2)
    run = generate(config, _run(), transport=flaky)
    assert len(calls) == 3
    assert run.output_text == "ok"
    assert run.latency_ms == 4


def test_generate_exhausted_retries_mark_error(caplog):
    def dead(url, payload, headers, timeout_s):
        raise requests.Timeout("no answer")

    config = BackendConfig(endpoint_url="http://x", model_name="m", retries=1)
    with caplog.at_level(logging.WARNING):
        run = generate(config, _run(), transport=dead)
    assert run.finish_reason == "error"
    assert run.output_text == ""
    assert run.raw_response["attempts"] == 2
    assert sum("attempt" in m for m in caplog.messages) == 2


def test_generate_retryable_status_then_success():
    statuses = iter([429, 503, 200])

    def sometimes(url, payload, headers, timeout_s):
        status = next(statuses)
        body = {"choices": [{"message": {"content": "enfin"}, "finish_reason": "stop"}]}
        return status, body if status == 200 else {}, 1

    config = BackendConfig(endpoint_url="http://x", model_name="m", retries=2)
    run = generate(config, _run(), transport=sometimes)
    assert run.output_text == "enfin"


def test_generate_non_retryable_status_raises():
    def forbidden(url, payload, headers, timeout_s):
        return 403, {"error": "no"}, 1

    config = BackendConfig(endpoint_url="http://x", model_name="m")
    with pytest.raises(GeneratorError, match="403"):
        generate(config, _run(), transport=forbidden)


def test_generate_malformed_body_raises_with_excerpt():
    def weird(url, payload, headers, timeout_s):
        return 200, {"unexpected": True}, 1

    config = BackendConfig(endpoint_url="http://x", model_name="m")
    with pytest.raises(GeneratorError, match="unexpected"):
        generate(config, _run(), transport=weird)


def test_generate_sends_model_budget_and_bearer(monkeypatch):
    captured = {}

    def spy(url, payload, headers, timeout_s):
        captured.update(payload=payload, headers=headers)
        return 200, {"choices": [{"message": {"content": "x"}, "finish_reason": "stop"}]}, 1

    monkeypatch.setenv("RAGKIT_API_KEY", "secret-token")
    config = BackendConfig(endpoint_url="http://x", model_name="modele-a", temperature=0.0)
    generate(config, _run(max_tokens=50), transport=spy)
    assert captured["payload"]["model"] == "modele-a"
    assert captured["payload"]["max_tokens"] == 50
    assert captured["payload"]["temperature"] == 0.0
    assert captured["headers"]["Authorization"] == "Bearer secret-token"


# -- configuration enumeration ---------------------------------------------------------


def _backends(n):
    return [
        BackendConfig(endpoint_url="mock:para", model_name=f"mock-{i}", finetuned=i % 2 == 1)
        for i in range(n)
    ]


def test_enumerate_configs_order_and_count():
    specs = enumerate_configs(_backends(2), ["base", "rag"], [25, 50], ["enc"])
    assert len(specs) == 8  # 2 backends x (base + rag:enc) x 2 budgets
    assert [s.config_id for s in specs[:4]] == [
        "mock-0|base|25",
        "mock-0|base|50",
        "mock-0|rag:enc|25",
        "mock-0|rag:enc|50",
    ]


def test_enumerate_configs_full_grid_matches_published_campaign_shape():
    specs = enumerate_configs(_backends(6), ["base", "rag"], [25, 50], ["enc"])
    assert len(specs) == 24


def test_enumerate_configs_rag_needs_encoder():
    with pytest.raises(GeneratorError):
        enumerate_configs(_backends(1), ["rag"], [25], [])
    with pytest.raises(GeneratorError):
        enumerate_configs(_backends(1), ["libre"], [25], [])


def test_config_and_query_ids():
    assert config_id_for("m", "base", None, 25) == "m|base|25"
    assert config_id_for("m", "rag", "e5", 50) == "m|rag:e5|50"
    qid = query_id_for("m|base|25", "asthme")
    assert len(qid) == 16 and qid == query_id_for("m|base|25", "asthme")
    assert qid != query_id_for("m|base|50", "asthme")


# -- serialization -------------------------------------------------------------------


def test_run_dict_roundtrip():
    run = _run()
    run.output_text = "réponse"
    run.raw_response = {"choices": []}
    assert run_from_dict(run_to_dict(run)) == run


# -- batches -----------------------------------------------------------------------


@pytest.fixture
def rag_setup():
    embedder = HashingEmbedder(dim=64, model_name="hash64")
    chunks = [
        Chunk(doc_ref="d0", index=0, text="L'asthme touche les bronches.", token_count=6),
        Chunk(doc_ref="d0", index=1, text="Le zona est une maladie virale.", token_count=8),
        Chunk(doc_ref="d1", index=0, text="La grippe est saisonnière.", token_count=5),
    ]
    index = build_index(chunks, embedder)
    handle = RetrieverHandle(
        index=index,
        embedder=embedder,
        chunk_texts={c.chunk_ref: c.text for c in chunks},
    )
    templates = {"base": load_template("base"), "rag": load_template("rag")}
    return handle, templates


def test_run_batch_covers_grid_and_is_resumable(tmp_path, rag_setup):
    handle, templates = rag_setup
    specs = enumerate_configs(_backends(1), ["base", "rag"], [25], ["hash64"])
    terms = ["asthme", "zona", "grippe"]
    out = tmp_path / "runs.jsonl"

    result = run_batch(specs, terms, templates, {"hash64": handle}, out, workers=2)
    assert result.n_runs == 6 and result.n_skipped == 0 and not result.failures
    first_pass = out.read_bytes()
    runs = runs_from_jsonl(out)
    assert [(r.config_id, r.term) for r in runs] == [
        (s.config_id, t) for s in specs for t in terms
    ]
    rag_runs = [r for r in runs if r.mode == "rag"]
    assert all(r.context_refs for r in rag_runs)
    assert all(not r.context_refs for r in runs if r.mode == "base")

    resumed = run_batch(specs, terms, templates, {"hash64": handle}, out, workers=2)
    assert resumed.n_runs == 0 and resumed.n_skipped == 6
    assert out.read_bytes() == first_pass


def test_run_batch_output_is_order_deterministic(tmp_path, rag_setup):
    handle, templates = rag_setup
    specs = enumerate_configs(_backends(2), ["base", "rag"], [25, 50], ["hash64"])
    terms = ["asthme", "zona", "grippe"]
    files = []
    for name, workers in (("a.jsonl", 1), ("b.jsonl", 4)):
        out = tmp_path / name
        run_batch(specs, terms, templates, {"hash64": handle}, out, workers=workers)
        files.append(out.read_bytes())
    assert files[0] == files[1]


def test_run_batch_base_never_touches_retrieval(tmp_path, rag_setup):
    handle, templates = rag_setup
    hits = []
    original = handle.retrieve

    def counting(question, k):
        hits.append(question)
        return original(question, k)

    handle.retrieve = counting
    specs = enumerate_configs(_backends(1), ["base"], [25], [])
    run_batch(specs, ["asthme"], templates, {"hash64": handle}, tmp_path / "o.jsonl")
    assert hits == []


def test_run_batch_records_per_query_failures_and_continues(tmp_path, rag_setup, caplog):
    handle, templates = rag_setup
    specs = enumerate_configs(_backends(1), ["rag"], [25], ["hash64"])
    broken = dict(templates)
    failing_handle = RetrieverHandle(
        index=handle.index, embedder=handle.embedder, chunk_texts=handle.chunk_texts
    )
    original = failing_handle.retrieve

    def sometimes(question, k):
        if question == "zona":
            raise RuntimeError("retrieval backend offline")
        return original(question, k)

    failing_handle.retrieve = sometimes
    out = tmp_path / "runs.jsonl"
    with caplog.at_level(logging.WARNING):
        result = run_batch(
            specs, ["asthme", "zona", "grippe"], broken, {"hash64": failing_handle}, out
        )
    assert result.n_runs == 2
    assert len(result.failures) == 1
    assert "retrieval backend offline" in result.failures[0][1]
    assert [r.term for r in runs_from_jsonl(out)] == ["asthme", "grippe"]


def test_run_batch_writes_error_runs_for_dead_backend(tmp_path, rag_setup):
    handle, templates = rag_setup

    def dead(url, payload, headers, timeout_s):
        raise requests.ConnectionError("unreachable")

    backend = BackendConfig(endpoint_url="http://x", model_name="m", retries=0)
    specs = enumerate_configs([backend], ["base"], [25], [])
    out = tmp_path / "runs.jsonl"
    result = run_batch(specs, ["asthme"], templates, {}, out, transport=dead)
    assert result.n_runs == 1 and result.n_errors == 1
    (run,) = runs_from_jsonl(out)
    assert run.finish_reason == "error" and run.output_text == ""
