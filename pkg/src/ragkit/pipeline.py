"""Pipeline orchestration: YAML config, stage manifest and the stages themselves.

A run directory is driven by one YAML config.  Each stage reads the artifacts
of earlier stages, writes its own, and records them in ``manifest.json``
together with a hash of the config, so finished stages are skipped on re-runs
and a changed config is caught instead of silently mixing artifacts.  With
offline fixtures (cached wiki responses, mock backends, hashing embedders)
two runs of the same config produce byte-identical artifacts; the manifest is
the only file carrying timestamps.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Mapping, Sequence

import yaml

from . import agreement as agreement_mod
from . import corpus as corpus_mod
from . import metrics as metrics_mod
from .campaign import CampaignSample, campaign_from_jsonl, campaign_to_jsonl, sample_campaign
from .embed import EmbedderConfig, make_embedder
from .generator import (
    BackendConfig,
    PromptTemplate,
    RetrieverHandle,
    RunSpec,
    enumerate_configs,
    load_template,
    run_batch,
    runs_from_jsonl,
)
from .retriever import build_index, load_index, save_index
from .wiki import WikiClient

__all__ = [
    "ConfigError",
    "StageError",
    "RunConfig",
    "load_config",
    "config_hash",
    "Manifest",
    "STAGES",
    "run_stage",
]

logger = logging.getLogger(__name__)

STAGES = ("ingest", "split", "index", "run", "eval", "report", "agree")


class ConfigError(ValueError):
    """Raised on malformed configuration, naming the offending field."""


class StageError(RuntimeError):
    """Raised when a stage cannot run or fails while running."""


# -- configuration -------------------------------------------------------------


def _get(raw: Mapping, path: str, default=None, required: bool = False):
    node: Any = raw
    for part in path.split("."):
        if not isinstance(node, Mapping) or part not in node:
            if required:
                raise ConfigError(f"missing config field {path!r}")
            return default
        node = node[part]
    return node


def _expect(value, types, path: str):
    if not isinstance(value, types):
        names = types.__name__ if isinstance(types, type) else "/".join(
            t.__name__ for t in types
        )
        raise ConfigError(f"config field {path!r} must be {names}, got {type(value).__name__}")
    return value


@dataclass
class KbSettings:
    splits: list[str]
    language: str
    top_n: int
    line_limit: int
    cache_dir: Path | None
    offline: bool
    granularity: str
    max_chunk_tokens: int
    workers: int
    search_limit: int
    base_url: str | None


@dataclass
class GenerationSettings:
    split: str
    modes: list[str]
    budgets: list[int]
    retrieval_k: int
    char_budget: int
    workers: int
    prompt_base: Path | None
    prompt_rag: Path | None


@dataclass
class EvalSettings:
    metrics: list[str]
    embedder: str | None
    rouge_mode: str


@dataclass
class CampaignSettings:
    per_config: int
    seed: int


@dataclass
class RunConfig:
    """A fully validated pipeline configuration.

    Paths are resolved relative to the config file's directory; the hash is
    computed over the raw parsed YAML (before resolution), so a config tree
    copied elsewhere keeps its hash.
    """

    raw: dict
    config_dir: Path
    output_dir: Path
    dataset_path: Path
    dataset_format: str | None
    split_ratios: tuple[float, float, float]
    split_seed: int
    kb: KbSettings
    embedders: dict[str, EmbedderConfig]
    embedder_order: list[str]
    backends: list[BackendConfig]
    generation: GenerationSettings
    eval: EvalSettings
    campaign: CampaignSettings
    annotators: dict[str, str]
    annotations_path: Path | None

    @property
    def hash(self) -> str:
        return config_hash(self.raw)


def config_hash(raw: Mapping) -> str:
    """SHA-256 over the canonical JSON form of the parsed config."""
    canonical = json.dumps(raw, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _resolve(config_dir: Path, value: str) -> Path:
    path = Path(value)
    return path if path.is_absolute() else (config_dir / path)


def _parse_embedder(entry: Mapping, position: int) -> tuple[str, EmbedderConfig]:
    path = f"embedders[{position}]"
    kind = _expect(_get(entry, "kind", required=True), str, f"{path}.kind")
    name = entry.get("name") or entry.get("model_name")
    if not name:
        raise ConfigError(f"config field {path!r} needs a name")
    dim = _expect(_get(entry, "dim", required=True), int, f"{path}.dim")
    try:
        cfg = EmbedderConfig(
            kind=kind,
            model_name=str(entry.get("model_name", name)),
            dim=dim,
            endpoint_url=entry.get("endpoint_url"),
            timeout_ms=int(entry.get("timeout_ms", 10_000)),
            batch_size=int(entry.get("batch_size", 32)),
            retries=int(entry.get("retries", 2)),
            api_key_env=str(entry.get("api_key_env", "RAGKIT_API_KEY")),
        )
    except Exception as exc:
        raise ConfigError(f"config field {path!r}: {exc}") from exc
    return str(name), cfg


def _parse_backend(entry: Mapping, position: int) -> BackendConfig:
    path = f"backends[{position}]"
    url = _expect(_get(entry, "endpoint_url", required=True), str, f"{path}.endpoint_url")
    model = _expect(_get(entry, "model_name", required=True), str, f"{path}.model_name")
    return BackendConfig(
        endpoint_url=url,
        model_name=model,
        finetuned=bool(entry.get("finetuned", False)),
        temperature=float(entry.get("temperature", 0.0)),
        timeout_ms=int(entry.get("timeout_ms", 30_000)),
        retries=int(entry.get("retries", 2)),
        api_key_env=str(entry.get("api_key_env", "RAGKIT_API_KEY")),
    )


def load_config(path: str | Path) -> RunConfig:
    """Parse and validate a pipeline YAML config.

    Raises:
        ConfigError: Naming the missing or ill-typed field.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path.name}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a mapping, got {type(raw).__name__}")
    config_dir = path.parent

    dataset = _get(raw, "dataset", required=True)
    if isinstance(dataset, str):
        dataset_path, dataset_format = _resolve(config_dir, dataset), None
    elif isinstance(dataset, Mapping):
        dataset_path = _resolve(
            config_dir, _expect(_get(dataset, "path", required=True), str, "dataset.path")
        )
        dataset_format = dataset.get("format")
        if dataset_format is not None and dataset_format not in ("tsv", "jsonl"):
            raise ConfigError(f"config field 'dataset.format' must be tsv or jsonl")
    else:
        raise ConfigError("config field 'dataset' must be a path or a mapping")

    ratios_raw = _get(raw, "split.ratios", default=[0.6, 0.2, 0.2])
    if not isinstance(ratios_raw, Sequence) or len(ratios_raw) != 3:
        raise ConfigError("config field 'split.ratios' must be a list of 3 numbers")
    try:
        ratios = tuple(float(r) for r in ratios_raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError("config field 'split.ratios' must be numeric") from exc
    split_seed = _expect(_get(raw, "split.seed", default=13), int, "split.seed")

    kb_raw = _get(raw, "kb", default={})
    cache_dir_value = _get(kb_raw, "cache_dir")
    kb = KbSettings(
        splits=list(_get(kb_raw, "splits", default=["validation", "test"])),
        language=str(_get(kb_raw, "language", default="fr")),
        top_n=_expect(_get(kb_raw, "top_n", default=3), int, "kb.top_n"),
        line_limit=_expect(_get(kb_raw, "line_limit", default=20), int, "kb.line_limit"),
        cache_dir=_resolve(config_dir, cache_dir_value) if cache_dir_value else None,
        offline=bool(_get(kb_raw, "offline", default=False)),
        granularity=str(_get(kb_raw, "granularity", default="sentence")),
        max_chunk_tokens=_expect(
            _get(kb_raw, "max_chunk_tokens", default=128), int, "kb.max_chunk_tokens"
        ),
        workers=_expect(_get(kb_raw, "workers", default=4), int, "kb.workers"),
        search_limit=_expect(_get(kb_raw, "search_limit", default=10), int, "kb.search_limit"),
        base_url=_get(kb_raw, "base_url"),
    )
    for name in kb.splits:
        if name not in corpus_mod.SPLITS:
            raise ConfigError(f"config field 'kb.splits' has unknown split {name!r}")
    if kb.granularity not in ("line", "sentence"):
        raise ConfigError("config field 'kb.granularity' must be line or sentence")

    embedders_raw = _get(raw, "embedders", default=[])
    if not isinstance(embedders_raw, Sequence):
        raise ConfigError("config field 'embedders' must be a list")
    embedders: dict[str, EmbedderConfig] = {}
    embedder_order: list[str] = []
    for position, entry in enumerate(embedders_raw):
        if not isinstance(entry, Mapping):
            raise ConfigError(f"config field 'embedders[{position}]' must be a mapping")
        name, cfg = _parse_embedder(entry, position)
        if name in embedders:
            raise ConfigError(f"duplicate embedder name {name!r}")
        embedders[name] = cfg
        embedder_order.append(name)

    backends_raw = _get(raw, "backends", default=[])
    if not isinstance(backends_raw, Sequence):
        raise ConfigError("config field 'backends' must be a list")
    backends = []
    seen_models: set[str] = set()
    for position, entry in enumerate(backends_raw):
        if not isinstance(entry, Mapping):
            raise ConfigError(f"config field 'backends[{position}]' must be a mapping")
        backend = _parse_backend(entry, position)
        if backend.model_name in seen_models:
            raise ConfigError(f"duplicate backend model_name {backend.model_name!r}")
        seen_models.add(backend.model_name)
        backends.append(backend)

    gen_raw = _get(raw, "generation", default={})
    generation = GenerationSettings(
        split=str(_get(gen_raw, "split", default="test")),
        modes=list(_get(gen_raw, "modes", default=["base", "rag"])),
        budgets=[
            _expect(b, int, "generation.budgets[]")
            for b in _get(gen_raw, "budgets", default=[25, 50])
        ],
        retrieval_k=_expect(_get(gen_raw, "retrieval_k", default=3), int, "generation.retrieval_k"),
        char_budget=_expect(
            _get(gen_raw, "char_budget", default=4000), int, "generation.char_budget"
        ),
        workers=_expect(_get(gen_raw, "workers", default=2), int, "generation.workers"),
        prompt_base=(
            _resolve(config_dir, _get(gen_raw, "prompt_base"))
            if _get(gen_raw, "prompt_base")
            else None
        ),
        prompt_rag=(
            _resolve(config_dir, _get(gen_raw, "prompt_rag"))
            if _get(gen_raw, "prompt_rag")
            else None
        ),
    )
    if generation.split not in corpus_mod.SPLITS:
        raise ConfigError("config field 'generation.split' must be a split name")
    for mode in generation.modes:
        if mode not in ("base", "rag"):
            raise ConfigError(f"config field 'generation.modes' has unknown mode {mode!r}")
    if "rag" in generation.modes and not embedder_order:
        raise ConfigError("rag mode configured but 'embedders' is empty")

    eval_raw = _get(raw, "eval", default={})
    eval_settings = EvalSettings(
        metrics=list(
            _get(
                eval_raw,
                "metrics",
                default=[
                    "bleu", "bleu_p1", "bleu_p2", "bleu_p3", "bleu_p4",
                    "rouge1", "rouge2", "rougeL", "rougeLsum",
                ],
            )
        ),
        embedder=_get(eval_raw, "embedder"),
        rouge_mode=str(_get(eval_raw, "rouge_mode", default="f1")),
    )
    for metric in eval_settings.metrics:
        if metric not in metrics_mod.METRIC_NAMES:
            raise ConfigError(f"config field 'eval.metrics' has unknown metric {metric!r}")
    if "embed_f1" in eval_settings.metrics:
        if not eval_settings.embedder:
            raise ConfigError("eval.metrics includes embed_f1 but 'eval.embedder' is unset")
        if eval_settings.embedder not in embedders:
            raise ConfigError(
                f"config field 'eval.embedder' names unknown embedder "
                f"{eval_settings.embedder!r}"
            )

    campaign_raw = _get(raw, "campaign", default={})
    campaign = CampaignSettings(
        per_config=_expect(_get(campaign_raw, "per_config", default=50), int, "campaign.per_config"),
        seed=_expect(_get(campaign_raw, "seed", default=7), int, "campaign.seed"),
    )

    annotators_raw = _get(raw, "annotators", default={})
    if not isinstance(annotators_raw, Mapping):
        raise ConfigError("config field 'annotators' must map tokens to annotator ids")
    annotators = {str(k): str(v) for k, v in annotators_raw.items()}

    annotations_value = _get(raw, "annotations")
    annotations_path = (
        _resolve(config_dir, annotations_value) if annotations_value else None
    )

    output_dir = _resolve(config_dir, str(_get(raw, "output_dir", default="out")))

    return RunConfig(
        raw=raw,
        config_dir=config_dir,
        output_dir=output_dir,
        dataset_path=dataset_path,
        dataset_format=dataset_format,
        split_ratios=ratios,  # validated again by split_by_term
        split_seed=split_seed,
        kb=kb,
        embedders=embedders,
        embedder_order=embedder_order,
        backends=backends,
        generation=generation,
        eval=eval_settings,
        campaign=campaign,
        annotators=annotators,
        annotations_path=annotations_path,
    )


# -- manifest --------------------------------------------------------------------


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass
class StageState:
    status: str = "pending"  # pending | running | done | failed
    artifacts: list[str] = field(default_factory=list)
    completed_at: str | None = None
    details: dict = field(default_factory=dict)


class Manifest:
    """Stage bookkeeping for one output directory."""

    FILENAME = "manifest.json"

    def __init__(self, path: Path, config_hash_value: str, stages: dict[str, StageState]):
        self.path = path
        self.config_hash = config_hash_value
        self.stages = stages

    @classmethod
    def open(cls, output_dir: Path, config_hash_value: str, force: bool = False) -> "Manifest":
        """Load the directory's manifest, or create a fresh one.

        Raises:
            ConfigError: When the directory was produced by a different
                config (hash mismatch) and ``force`` is not set.
        """
        output_dir.mkdir(parents=True, exist_ok=True)
        path = output_dir / cls.FILENAME
        if path.exists():
            data = json.loads(path.read_text(encoding="utf-8"))
            if data.get("config_hash") != config_hash_value:
                if not force:
                    raise ConfigError(
                        f"output directory {output_dir} was built with a different "
                        f"config (hash mismatch); use a fresh directory or --force"
                    )
                data["config_hash"] = config_hash_value
            stages = {
                name: StageState(
                    status=state.get("status", "pending"),
                    artifacts=list(state.get("artifacts", [])),
                    completed_at=state.get("completed_at"),
                    details=dict(state.get("details", {})),
                )
                for name, state in data.get("stages", {}).items()
            }
            manifest = cls(path, config_hash_value, stages)
        else:
            manifest = cls(path, config_hash_value, {})
        manifest.save()
        return manifest

    def save(self) -> None:
        payload = {
            "config_hash": self.config_hash,
            "stages": {
                name: {
                    "status": state.status,
                    "artifacts": state.artifacts,
                    "completed_at": state.completed_at,
                    "details": state.details,
                }
                for name, state in self.stages.items()
            },
        }
        self.path.write_text(
            json.dumps(payload, ensure_ascii=False, indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )

    def state(self, stage: str) -> StageState:
        return self.stages.setdefault(stage, StageState())

    def is_done(self, stage: str) -> bool:
        return self.stages.get(stage, StageState()).status == "done"

    def require(self, stage: str, prerequisites: Sequence[str]) -> None:
        missing = [p for p in prerequisites if not self.is_done(p)]
        if missing:
            raise StageError(
                f"stage {stage!r} needs {missing[0]!r} to run first "
                f"(missing: {', '.join(missing)})"
            )

    def mark_running(self, stage: str) -> None:
        state = self.state(stage)
        state.status = "running"
        state.completed_at = None
        self.save()

    def mark_done(self, stage: str, artifacts: Sequence[str], details: dict | None = None) -> None:
        state = self.state(stage)
        state.status = "done"
        state.artifacts = list(artifacts)
        state.completed_at = _now()
        if details is not None:
            state.details = details
        self.save()

    def mark_failed(self, stage: str, reason: str) -> None:
        state = self.state(stage)
        state.status = "failed"
        state.details = {"error": reason}
        state.completed_at = _now()
        self.save()

    def all_artifacts(self) -> dict[str, str]:
        """Artifact -> owning stage; artifacts belong to exactly one stage."""
        owners: dict[str, str] = {}
        for name, state in self.stages.items():
            for artifact in state.artifacts:
                if artifact in owners:
                    raise StageError(
                        f"artifact {artifact!r} claimed by both "
                        f"{owners[artifact]!r} and {name!r}"
                    )
                owners[artifact] = name
        return owners


# -- helpers shared by stages ------------------------------------------------------


def _write_json(path: Path, payload) -> None:
    path.write_text(
        json.dumps(payload, ensure_ascii=False, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )


def _records_path(config: RunConfig) -> Path:
    return config.output_dir / "records.jsonl"


def _load_records(config: RunConfig) -> list[corpus_mod.ParaphraseRecord]:
    path = _records_path(config)
    if not path.exists():
        raise StageError(f"records file missing: {path}; run ingest first")
    return corpus_mod.records_from_jsonl(path)


def _chunks_path(config: RunConfig) -> Path:
    return config.output_dir / "chunks.jsonl"


def _load_chunk_texts(config: RunConfig) -> dict[str, str]:
    texts: dict[str, str] = {}
    with open(_chunks_path(config), encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                obj = json.loads(line)
                texts[obj["chunk_ref"]] = obj["text"]
    return texts


def _index_path(config: RunConfig, encoder: str) -> Path:
    return config.output_dir / f"index_{encoder}.bin"


def _wiki_client(config: RunConfig) -> WikiClient:
    kwargs: dict = {
        "cache_dir": config.kb.cache_dir,
        "offline": config.kb.offline,
    }
    if config.kb.base_url:
        kwargs["base_url"] = config.kb.base_url
    return WikiClient(**kwargs)


# -- stages ------------------------------------------------------------------------


def stage_ingest(config: RunConfig, manifest: Manifest) -> list[str]:
    records = corpus_mod.load_dataset(config.dataset_path, config.dataset_format)
    stats = corpus_mod.paraphrase_length_stats(records)
    corpus_mod.records_to_jsonl(records, _records_path(config))
    _write_json(
        config.output_dir / "length_stats.json",
        {
            "n_terms": len(records),
            "n_references": stats.n_references,
            "min": stats.min,
            "max": stats.max,
            "mean": stats.mean,
            "std": stats.std,
        },
    )
    manifest.state("ingest").details = {
        "n_terms": len(records),
        "n_references": stats.n_references,
    }
    return ["records.jsonl", "length_stats.json"]


def stage_split(config: RunConfig, manifest: Manifest, seed: int | None = None) -> list[str]:
    manifest.require("split", ["ingest"])
    records = _load_records(config)
    for record in records:
        record.split = "unassigned"
    train, validation, test = corpus_mod.split_by_term(
        records, config.split_ratios, seed if seed is not None else config.split_seed
    )
    corpus_mod.records_to_jsonl(records, _records_path(config))
    summary = {
        name: {
            "terms": len(bucket),
            "pairs": sum(len(r.references) for r in bucket),
        }
        for name, bucket in (("train", train), ("validation", validation), ("test", test))
    }
    _write_json(config.output_dir / "split_summary.json", summary)
    return ["split_summary.json"]


def stage_index(config: RunConfig, manifest: Manifest) -> list[str]:
    manifest.require("index", ["split"])
    records = _load_records(config)
    terms = [r.term for r in records if r.split in config.kb.splits]
    if not terms:
        raise StageError(
            f"no terms in splits {config.kb.splits}; nothing to index"
        )
    client = _wiki_client(config)
    result = corpus_mod.build_kb(
        terms,
        client,
        language=config.kb.language,
        top_n=config.kb.top_n,
        line_limit=config.kb.line_limit,
        workers=config.kb.workers,
        search_limit=config.kb.search_limit,
    )
    with open(config.output_dir / "kb.jsonl", "w", encoding="utf-8") as fh:
        for document in result.documents:
            fh.write(
                json.dumps(
                    {
                        "doc_ref": corpus_mod.doc_id(document),
                        "term": document.term,
                        "page_title": document.page_title,
                        "rank": document.rank,
                        "lines": document.lines,
                        "source_url": document.source_url,
                        "fetched_at": document.fetched_at,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )
    (config.output_dir / "kb_misses.txt").write_text(
        "".join(f"{term}\n" for term in result.misses), encoding="utf-8"
    )
    chunks = corpus_mod.chunk_kb(
        result.documents,
        granularity=config.kb.granularity,
        max_tokens=config.kb.max_chunk_tokens,
    )
    if not chunks:
        raise StageError("knowledge base produced no chunks; cannot build an index")
    with open(_chunks_path(config), "w", encoding="utf-8") as fh:
        for chunk in chunks:
            fh.write(
                json.dumps(
                    {
                        "chunk_ref": chunk.chunk_ref,
                        "doc_ref": chunk.doc_ref,
                        "index": chunk.index,
                        "text": chunk.text,
                        "token_count": chunk.token_count,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )
    artifacts = ["kb.jsonl", "kb_misses.txt", "chunks.jsonl"]
    for name in config.embedder_order:
        embedder = make_embedder(config.embedders[name])
        index = build_index(chunks, embedder)
        save_index(index, _index_path(config, name))
        artifacts.append(_index_path(config, name).name)
    manifest.state("index").details = {
        "documents": len(result.documents),
        "chunks": len(chunks),
        "misses": len(result.misses),
        "failures": len(result.failures),
    }
    if result.failures:
        logger.warning("knowledge-base build had %d failed terms", len(result.failures))
    return artifacts


def _build_specs(config: RunConfig) -> list[RunSpec]:
    return enumerate_configs(
        config.backends,
        config.generation.modes,
        config.generation.budgets,
        config.embedder_order,
    )


def stage_run(config: RunConfig, manifest: Manifest) -> list[str]:
    needs_index = "rag" in config.generation.modes
    manifest.require("run", ["split"] + (["index"] if needs_index else []))
    records = _load_records(config)
    terms = [r.term for r in records if r.split == config.generation.split]
    if not terms:
        raise StageError(f"no terms in generation split {config.generation.split!r}")

    specs = _build_specs(config)
    _write_json(
        config.output_dir / "configurations.json",
        [
            {
                "config_id": spec.config_id,
                "backend_model": spec.backend.model_name,
                "finetuned": spec.backend.finetuned,
                "mode": spec.mode,
                "encoder": spec.encoder,
                "max_tokens": spec.max_tokens,
            }
            for spec in specs
        ],
    )

    templates = {
        "base": load_template("base", config.generation.prompt_base),
        "rag": load_template("rag", config.generation.prompt_rag),
    }
    retrieval: dict[str, RetrieverHandle] = {}
    if needs_index:
        chunk_texts = _load_chunk_texts(config)
        for name in config.embedder_order:
            retrieval[name] = RetrieverHandle(
                index=load_index(_index_path(config, name)),
                embedder=make_embedder(config.embedders[name]),
                chunk_texts=chunk_texts,
            )

    result = run_batch(
        specs,
        terms,
        templates,
        retrieval,
        config.output_dir / "runs.jsonl",
        retrieval_k=config.generation.retrieval_k,
        char_budget=config.generation.char_budget,
        workers=config.generation.workers,
    )
    _write_json(
        config.output_dir / "batch_summary.json",
        {
            "configurations": len(specs),
            "terms": len(terms),
            "written": result.n_runs,
            "skipped_existing": result.n_skipped,
            "backend_errors": result.n_errors,
            "failures": [{"query_id": q, "reason": r} for q, r in result.failures],
        },
    )
    return ["configurations.json", "runs.jsonl", "batch_summary.json"]


def stage_eval(config: RunConfig, manifest: Manifest) -> list[str]:
    manifest.require("eval", ["run"])
    records = _load_records(config)
    runs = runs_from_jsonl(config.output_dir / "runs.jsonl")
    config_order = [
        entry["config_id"]
        for entry in json.loads(
            (config.output_dir / "configurations.json").read_text(encoding="utf-8")
        )
    ]
    by_config: dict[str, list] = {cid: [] for cid in config_order}
    for run in runs:
        by_config.setdefault(run.config_id, []).append(run)

    embedder = None
    if "embed_f1" in config.eval.metrics:
        embedder = make_embedder(config.embedders[config.eval.embedder])

    reports = []
    with open(config.output_dir / "query_scores.jsonl", "w", encoding="utf-8") as fh:
        for config_id in by_config:
            config_runs = [r for r in by_config[config_id] if r.finish_reason != "error"]
            if not config_runs:
                logger.warning("config %s has no scoreable runs", config_id)
                continue
            scores, report, excluded = metrics_mod.ragrefs(
                config_runs,
                records,
                config.eval.metrics,
                embedder=embedder,
                config_id=config_id,
                rouge_mode=config.eval.rouge_mode,
            )
            for score in scores:
                fh.write(
                    json.dumps(
                        {
                            "query_id": score.query_id,
                            "config_id": config_id,
                            "term": score.term,
                            "values": score.values,
                            "best_reference": score.best_reference,
                        },
                        ensure_ascii=False,
                    )
                    + "\n"
                )
            reports.append(
                {
                    "config_id": report.config_id,
                    "n_queries": report.n_queries,
                    "mean": report.mean,
                    "std": report.std,
                    "excluded": excluded,
                }
            )
    if not reports:
        raise StageError("no configuration produced scoreable runs")
    _write_json(config.output_dir / "reports.json", reports)
    return ["query_scores.jsonl", "reports.json"]


def stage_report(config: RunConfig, manifest: Manifest) -> list[str]:
    manifest.require("report", ["eval"])
    payload = json.loads((config.output_dir / "reports.json").read_text(encoding="utf-8"))
    reports = [
        metrics_mod.MetricReport(
            config_id=entry["config_id"],
            n_queries=entry["n_queries"],
            mean=entry["mean"],
            std=entry["std"],
        )
        for entry in payload
    ]
    table = metrics_mod.format_report(reports)
    (config.output_dir / "report.txt").write_text(table.text, encoding="utf-8")
    (config.output_dir / "report.csv").write_text(table.csv, encoding="utf-8")
    artifacts = ["report.txt", "report.csv"]

    manual_means_path = config.output_dir / "manual_means.json"
    if manual_means_path.exists():
        manual_means = json.loads(manual_means_path.read_text(encoding="utf-8"))
        try:
            correlation = metrics_mod.correlate(reports, manual_means)
        except metrics_mod.MetricError as exc:
            logger.warning("skipping correlation: %s", exc)
        else:
            rows = ["metric," + ",".join(correlation.criteria)]
            for metric in correlation.metric_names:
                rows.append(
                    metric
                    + ","
                    + ",".join(
                        f"{correlation.values[metric][c]:.6f}" for c in correlation.criteria
                    )
                )
            (config.output_dir / "correlation.csv").write_text(
                "\n".join(rows) + "\n", encoding="utf-8"
            )
            artifacts.append("correlation.csv")
    return artifacts


def _agreement_groups(
    config: RunConfig, records: list[agreement_mod.AnnotationRecord]
) -> dict[str, list[agreement_mod.AnnotationRecord]]:
    """Group annotations into 'all' plus budget and fine-tuning cohorts."""
    groups: dict[str, list[agreement_mod.AnnotationRecord]] = {"all": list(records)}
    campaign_path = config.output_dir / "campaign.jsonl"
    configurations_path = config.output_dir / "configurations.json"
    if not (campaign_path.exists() and configurations_path.exists()):
        return groups
    sample_to_config = {
        s.sample_id: s.config_id for s in campaign_from_jsonl(campaign_path)
    }
    config_attrs = {
        entry["config_id"]: entry
        for entry in json.loads(configurations_path.read_text(encoding="utf-8"))
    }

    def attrs_for(record: agreement_mod.AnnotationRecord) -> dict | None:
        config_id = sample_to_config.get(record.sample_id)
        return config_attrs.get(config_id) if config_id else None

    budgets = sorted(
        {entry["max_tokens"] for entry in config_attrs.values()}
    )
    for budget in budgets:
        subset = [
            r for r in records
            if (a := attrs_for(r)) is not None and a["max_tokens"] == budget
        ]
        if subset:
            groups[f"budget={budget}"] = subset
    for flag, label in ((False, "finetuned=no"), (True, "finetuned=yes")):
        subset = [
            r for r in records
            if (a := attrs_for(r)) is not None and a["finetuned"] == flag
        ]
        if subset:
            groups[label] = subset
    return groups


def stage_agree(
    config: RunConfig, manifest: Manifest, annotations: str | Path | None = None
) -> list[str]:
    # Precedence: explicit --annotations, then the config's 'annotations'
    # key, then the journal the annotation service writes into output_dir.
    annotations_path = Path(annotations) if annotations else config.annotations_path
    if annotations_path is None:
        journal = config.output_dir / "annotations.jsonl"
        if journal.exists():
            annotations_path = journal
        else:
            raise StageError(
                "agree needs an annotations file: serve and collect ratings "
                "first, set 'annotations' in the config, or pass --annotations"
            )
    if not annotations_path.exists():
        raise StageError(f"annotations file not found: {annotations_path}")
    records = agreement_mod.annotations_from_jsonl(annotations_path)
    if not records:
        raise StageError(f"annotations file is empty: {annotations_path}")

    groups = _agreement_groups(config, records)
    text, csv_text = agreement_mod.format_agreement(groups)
    (config.output_dir / "agreement.txt").write_text(text, encoding="utf-8")
    (config.output_dir / "agreement.csv").write_text(csv_text, encoding="utf-8")
    artifacts = ["agreement.txt", "agreement.csv"]

    campaign_path = config.output_dir / "campaign.jsonl"
    if campaign_path.exists():
        sample_to_config = {
            s.sample_id: s.config_id for s in campaign_from_jsonl(campaign_path)
        }
        aggregate = agreement_mod.aggregate_manual(records, sample_to_config)
        _write_json(config.output_dir / "manual_means.json", aggregate.means)
        artifacts.append("manual_means.json")
        if aggregate.ties:
            logger.warning(
                "%d tied votes resolved to the worst value", len(aggregate.ties)
            )
    return artifacts


def ensure_campaign(config: RunConfig, manifest: Manifest) -> list[CampaignSample]:
    """Load the campaign, sampling it from runs.jsonl on first use."""
    campaign_path = config.output_dir / "campaign.jsonl"
    if campaign_path.exists():
        return campaign_from_jsonl(campaign_path)
    manifest.require("serve", ["run"])
    runs = runs_from_jsonl(config.output_dir / "runs.jsonl")
    samples = sample_campaign(runs, config.campaign.per_config, config.campaign.seed)
    campaign_to_jsonl(samples, campaign_path)
    state = manifest.state("serve")
    if "campaign.jsonl" not in state.artifacts:
        state.artifacts.append("campaign.jsonl")
    manifest.save()
    return samples


_STAGE_FUNCTIONS = {
    "ingest": stage_ingest,
    "split": stage_split,
    "index": stage_index,
    "run": stage_run,
    "eval": stage_eval,
    "report": stage_report,
    "agree": stage_agree,
}


def run_stage(
    config: RunConfig,
    stage: str,
    force: bool = False,
    **stage_kwargs,
) -> list[str]:
    """Run one named stage against its manifest.

    A stage already marked done is skipped (no-op) unless ``force`` is set.
    Failures mark the stage failed in the manifest and re-raise.

    Returns:
        The stage's artifact names (relative to the output directory).
    """
    if stage not in _STAGE_FUNCTIONS:
        raise ConfigError(f"unknown stage {stage!r} (choose from {', '.join(STAGES)})")
    manifest = Manifest.open(config.output_dir, config.hash, force=force)
    if manifest.is_done(stage) and not force:
        logger.info("stage %s already done; skipping (use --force to re-run)", stage)
        return manifest.state(stage).artifacts
    manifest.mark_running(stage)
    try:
        artifacts = _STAGE_FUNCTIONS[stage](config, manifest, **stage_kwargs)
    except (ConfigError, StageError):
        manifest.mark_failed(stage, "stage failed")
        raise
    except Exception as exc:
        manifest.mark_failed(stage, str(exc))
        raise StageError(f"stage {stage!r} failed: {exc}") from exc
    details = manifest.state(stage).details
    manifest.mark_done(stage, artifacts, details or None)
    return artifacts
