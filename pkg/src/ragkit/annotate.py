"""HTTP service for the human-annotation campaign.

Annotators authenticate with opaque tokens, fetch one sample at a time
(configuration metadata never leaves the server, so ratings stay blind),
and submit ratings on all five criteria.  Every submission is appended to an
on-disk journal and fsynced before the request is acknowledged; restarting
the service replays the journal, so a crash loses nothing that was
acknowledged.  Resubmissions replace the effective rating while the journal
keeps the full audit trail.
"""

from __future__ import annotations

import json
import logging
import os
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping, Sequence

from fastapi import FastAPI, HTTPException, Query, Request
from fastapi.responses import JSONResponse, PlainTextResponse

from .agreement import (
    CRITERIA,
    AgreementError,
    AnnotationRecord,
    aggregate_manual,
    annotation_domains,
    compute_agreement,
)
from .campaign import CampaignSample

__all__ = ["CampaignState", "create_app", "create_app_from_config"]

logger = logging.getLogger(__name__)


class CampaignState:
    """In-memory campaign state backed by an append-only journal.

    The journal holds one JSON object per submission (an annotation record
    plus a timestamp).  The effective rating of a (sample, annotator) pair is
    the last journal entry for it; earlier entries remain as the audit trail.
    """

    def __init__(self, samples: Sequence[CampaignSample], journal_path: str | Path):
        if not samples:
            raise ValueError("campaign has no samples")
        self.samples = list(samples)
        self.by_id = {s.sample_id: s for s in self.samples}
        if len(self.by_id) != len(self.samples):
            raise ValueError("duplicate sample ids in campaign")
        self.journal_path = Path(journal_path)
        self._lock = threading.Lock()
        self._latest: dict[tuple[str, str], AnnotationRecord] = {}
        self._journal_entries = 0
        if self.journal_path.exists():
            self._replay()

    def _replay(self) -> None:
        with open(self.journal_path, encoding="utf-8") as fh:
            for number, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    record = AnnotationRecord.from_dict(json.loads(line))
                except (json.JSONDecodeError, AgreementError) as exc:
                    raise AgreementError(
                        f"{self.journal_path.name}: line {number}: {exc}"
                    ) from exc
                self._latest[(record.sample_id, record.annotator_id)] = record
                self._journal_entries += 1
        logger.info(
            "replayed %d journal entries (%d effective ratings)",
            self._journal_entries,
            len(self._latest),
        )

    def submit(self, record: AnnotationRecord) -> bool:
        """Persist a rating; returns True when it replaces an earlier one.

        The journal line is flushed and fsynced before the in-memory state
        updates, so an acknowledged rating survives a crash.
        """
        if record.sample_id not in self.by_id:
            raise KeyError(record.sample_id)
        entry = dict(record.to_dict())
        entry["ts"] = datetime.now(timezone.utc).isoformat()
        with self._lock:
            with open(self.journal_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, ensure_ascii=False) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            replaced = (record.sample_id, record.annotator_id) in self._latest
            self._latest[(record.sample_id, record.annotator_id)] = record
            self._journal_entries += 1
        return replaced

    def next_sample(self, annotator_id: str) -> CampaignSample | None:
        """First campaign sample this annotator has not rated yet."""
        with self._lock:
            rated = {s for (s, a) in self._latest if a == annotator_id}
        for sample in self.samples:
            if sample.sample_id not in rated:
                return sample
        return None

    def progress(self, annotator_id: str) -> dict:
        with self._lock:
            completed = sum(1 for (_, a) in self._latest if a == annotator_id)
        return {"completed": completed, "total": len(self.samples)}

    def records(self) -> list[AnnotationRecord]:
        """Effective ratings, sorted for deterministic export."""
        with self._lock:
            out = list(self._latest.values())
        return sorted(out, key=lambda r: (r.sample_id, r.annotator_id))

    def sample_configs(self) -> dict[str, str]:
        return {s.sample_id: s.config_id for s in self.samples}


def _resolve_annotator(tokens: Mapping[str, str], token: str | None) -> str:
    if not token or token not in tokens:
        raise HTTPException(status_code=403, detail="unknown annotator token")
    return tokens[token]


def create_app(
    state: CampaignState,
    tokens: Mapping[str, str],
    ui_dir: str | Path | None = None,
) -> FastAPI:
    """Build the annotation service.

    Args:
        state: Campaign state (samples plus journal).
        tokens: Opaque annotator tokens mapped to annotator ids.
        ui_dir: Directory holding the built annotation UI; served at ``/``
            when present.  The API works without it.
    """
    if not tokens:
        raise ValueError("no annotator tokens configured")
    app = FastAPI(title="ragkit annotation service")

    @app.get("/api/domains")
    def get_domains() -> JSONResponse:
        return JSONResponse(annotation_domains())

    @app.get("/api/next")
    def get_next(annotator: str = Query(default="")) -> JSONResponse:
        annotator_id = _resolve_annotator(tokens, annotator)
        sample = state.next_sample(annotator_id)
        progress = state.progress(annotator_id)
        if sample is None:
            return JSONResponse({"done": True, "sample": None, "progress": progress})
        # config_id and query_id stay server-side: ratings are blind.
        return JSONResponse(
            {
                "done": False,
                "sample": {
                    "sample_id": sample.sample_id,
                    "term": sample.term,
                    "output_text": sample.output_text,
                },
                "progress": progress,
            }
        )

    @app.post("/api/annotations")
    async def post_annotation(request: Request) -> JSONResponse:
        try:
            body = await request.json()
        except json.JSONDecodeError:
            raise HTTPException(status_code=422, detail="body must be JSON")
        if not isinstance(body, dict):
            raise HTTPException(status_code=422, detail="body must be a JSON object")
        annotator_id = _resolve_annotator(tokens, body.get("token"))
        sample_id = body.get("sample_id")
        if not isinstance(sample_id, str) or sample_id not in state.by_id:
            raise HTTPException(status_code=404, detail=f"unknown sample {sample_id!r}")
        try:
            record = AnnotationRecord(
                sample_id=sample_id,
                annotator_id=annotator_id,
                **{criterion: body.get(criterion) for criterion in CRITERIA},
            )
        except AgreementError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        replaced = state.submit(record)
        return JSONResponse({"ok": True, "replaced": replaced})

    @app.get("/api/stats")
    def get_stats() -> JSONResponse:
        records = state.records()
        payload: dict = {
            "n_records": len(records),
            "n_samples": len(state.samples),
            "agreement": [],
            "manual_means": {},
        }
        if records:
            try:
                payload["agreement"] = [r.to_dict() for r in compute_agreement(records)]
            except AgreementError:
                pass  # fewer than two ratings per sample so far
            aggregate = aggregate_manual(records, state.sample_configs())
            payload["manual_means"] = aggregate.means
            payload["ties"] = sorted(aggregate.ties)
        return JSONResponse(payload)

    @app.get("/api/export")
    def get_export() -> PlainTextResponse:
        lines = [json.dumps(r.to_dict(), ensure_ascii=False) for r in state.records()]
        return PlainTextResponse(
            "\n".join(lines) + ("\n" if lines else ""),
            media_type="application/jsonl",
        )

    if ui_dir is not None:
        ui_path = Path(ui_dir)
        if ui_path.is_dir():
            from fastapi.staticfiles import StaticFiles

            app.mount("/", StaticFiles(directory=ui_path, html=True), name="ui")
        else:
            logger.warning("ui directory %s not found; serving the API only", ui_path)
    return app


def create_app_from_config(config, manifest, ui_dir: str | Path | None = None) -> FastAPI:
    """Build the service for a pipeline run directory.

    Samples the campaign from recorded runs on first use, stores the journal
    next to the other artifacts, and serves the UI from ``ui_dir`` or, when
    unset, from a ``frontend/dist`` directory next to the package if present.
    """
    from .pipeline import ensure_campaign

    samples = ensure_campaign(config, manifest)
    state = CampaignState(samples, config.output_dir / "annotations.jsonl")
    if ui_dir is None:
        candidate = Path(__file__).resolve().parents[2] / "frontend" / "dist"
        ui_dir = candidate if candidate.is_dir() else None
    return create_app(state, config.annotators, ui_dir=ui_dir)
