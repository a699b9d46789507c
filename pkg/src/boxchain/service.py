"""HTTP surface for the manual-review workflow.

Serves pending review items with everything a reviewer needs (the indexed
overlay image, the question and ground truths, the draft annotation, and why
automatic QA failed), takes verdicts, and streams original/overlay rasters to
the UI. All mutations funnel through the store's serialized queue writer.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from . import __version__
from .errors import (
    ConflictError,
    ParameterError,
    StateError,
    ValidationError,
)
from .layout import load_layout
from .render import RenderStyle, load_image, encode_png, render_s1_overlay
from .store import (
    DatasetStore,
    RecordDraft,
    ReviewItem,
    ReviewQueue,
    Verdict,
)

IMAGE_ROLES = ("original", "s1_overlay")


@dataclass
class ServiceContext:
    queue: ReviewQueue
    dataset_store: DatasetStore
    images_dir: Path
    layouts_dir: Path
    token: Optional[str] = None
    style: RenderStyle = RenderStyle()

    def image_path(self, image_id: str) -> Optional[Path]:
        for suffix in (".png", ".jpg", ".jpeg"):
            candidate = self.images_dir / f"{image_id}{suffix}"
            if candidate.exists():
                return candidate
        return None

    def layout_path(self, image_id: str) -> Path:
        return self.layouts_dir / f"{image_id}.json"


class CorrectedAnnotation(BaseModel):
    helpful: list[int]
    confusing: list[int] = []
    rationales: dict[str, str] = {}


class VerdictBody(BaseModel):
    status: str
    reviewer: str
    corrected: Optional[CorrectedAnnotation] = None


def _error(status_code: int, error_code: str, detail: str) -> JSONResponse:
    return JSONResponse(
        status_code=status_code,
        content={"status": "error", "error_code": error_code, "detail": detail},
    )


def _image_id_of(draft: RecordDraft) -> str:
    return Path(draft.image_path).stem


def _item_payload(item: ReviewItem, ctx: ServiceContext) -> dict:
    draft = item.draft
    image_id = _image_id_of(draft)
    boxes: list[dict] = []
    width = height = None
    image_path = ctx.image_path(image_id)
    if image_path is not None:
        img = load_image(image_path)
        width, height = img.size
        layout_path = Path(draft.layout_path)
        if layout_path.exists():
            layout = load_layout(layout_path, image_id, width, height)
            boxes = [
                {"id": b.id, "bbox": b.bbox.as_list(), "category": b.category, "text": b.text}
                for b in layout.boxes
            ]
    return {
        "status": "ok",
        "empty": False,
        "item": {
            "item_id": item.item_id,
            "image_id": image_id,
            "image_width": width,
            "image_height": height,
            "image_url": f"/images/{image_id}/s1_overlay",
            "original_url": f"/images/{image_id}/original",
            "question": draft.question,
            "answers": list(draft.answers),
            "boxes": boxes,
            "annotation": {
                "helpful": list(draft.helpful),
                "confusing": list(draft.confusing),
                "rationales": {str(k): v for k, v in draft.rationales.items()},
            },
            "failed_checks": list(item.failed_checks),
            "item_status": item.status,
        },
    }


def create_app(ctx: ServiceContext) -> FastAPI:
    app = FastAPI(title="boxchain review service", version=__version__)

    @app.middleware("http")
    async def check_token(request: Request, call_next):
        if ctx.token and request.headers.get("X-Review-Token") != ctx.token:
            return _error(401, "unauthorized", "missing or wrong X-Review-Token header")
        return await call_next(request)

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok", "version": __version__}

    @app.get("/review/next")
    def review_next() -> dict:
        item = ctx.queue.next_pending()
        if item is None:
            return {"status": "ok", "empty": True, "item": None}
        return _item_payload(item, ctx)

    @app.get("/review/stats")
    def review_stats() -> dict:
        return {"status": "ok", "counts": ctx.queue.counts()}

    @app.post("/review/{item_id}/verdict")
    def review_verdict(item_id: str, body: VerdictBody):
        try:
            item = ctx.queue.get(item_id)
        except StateError:
            return _error(404, "not_found", f"unknown review item {item_id!r}")
        corrected_draft = None
        if body.corrected is not None:
            from dataclasses import replace

            corrected_draft = replace(
                item.draft,
                helpful=tuple(sorted(body.corrected.helpful)),
                confusing=tuple(sorted(body.corrected.confusing)),
                rationales={int(k): v for k, v in body.corrected.rationales.items()},
            )
        try:
            verdict = Verdict(status=body.status, reviewer=body.reviewer, corrected=corrected_draft)
            updated = ctx.queue.submit_verdict(item_id, verdict)
        except ConflictError as exc:
            return _error(409, "conflict", str(exc))
        except (ParameterError, ValidationError) as exc:
            return _error(422, "validation", str(exc))
        payload = _item_payload(updated, ctx)
        payload["counts"] = ctx.queue.counts()
        return payload

    @app.get("/images/{image_id}/{role}")
    def get_image(image_id: str, role: str):
        if role not in IMAGE_ROLES:
            return _error(404, "not_found", f"unknown image role {role!r}")
        path = ctx.image_path(image_id)
        if path is None:
            return _error(404, "not_found", f"unknown image {image_id!r}")
        img = load_image(path)
        if role == "original":
            return Response(content=encode_png(img), media_type="image/png")
        layout_path = ctx.layout_path(image_id)
        if not layout_path.exists():
            return _error(404, "not_found", f"no layout for image {image_id!r}")
        layout = load_layout(layout_path, image_id, *img.size)
        prompted = render_s1_overlay(img, layout, ctx.style)
        return Response(content=prompted.image_bytes, media_type="image/png")

    return app
