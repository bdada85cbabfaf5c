"""HTTP facade for the reader study.

Serves blinded images to authenticated readers and collects their
annotations. Responses never carry view counts or processing variants;
the only identifier on the wire is the opaque item id. Annotations are
acknowledged only after the store append has been fsynced.
"""

from __future__ import annotations

import base64
import threading
from pathlib import Path

from fastapi import FastAPI, Header, HTTPException
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, Field

from . import imageio
from .grids import UNIT_NORMALIZED
from .study import (Annotation, DuplicateAnnotation, StudyStore,
                    ValidationError)


class MaskPayload(BaseModel):
    width: int
    height: int
    counts: list[int]


class AnnotationPayload(BaseModel):
    item_id: str
    quality: int = Field(ge=1, le=6)
    confidence: int = Field(ge=1, le=6)
    artifacts: int = Field(ge=1, le=4)
    mask: MaskPayload


def create_app(store_path: str | Path, ui_dir: str | Path | None = None) -> FastAPI:
    """Application over an existing study store (one process owns it)."""
    store = StudyStore.open(store_path)
    write_lock = threading.Lock()
    png_cache: dict[str, bytes] = {}

    app = FastAPI(title="sparse-ct-lab reader study")
    app.state.store = store

    def reader_for(token: str | None) -> str:
        if token:
            for reader_id, meta in store.readers.items():
                if meta["token"] == token:
                    return reader_id
        raise HTTPException(status_code=401, detail="invalid session token")

    def rendered(item_id: str) -> bytes:
        if item_id not in png_cache:
            item = store.items[item_id]
            image = imageio.load_raw_image(item.image_path)
            if image.unit_tag != UNIT_NORMALIZED:
                raise HTTPException(status_code=500,
                                    detail="stored rendition is not display-ready")
            png_cache[item_id] = imageio.render_png8(image)
        return png_cache[item_id]

    @app.get("/api/session/next")
    def next_item(x_session_token: str | None = Header(default=None)):
        reader_id = reader_for(x_session_token)
        item = store.next_item(reader_id)
        if item is None:
            return {"done": True, "item_id": None, "image": None}
        return {
            "done": False,
            "item_id": item.item_id,
            "image": base64.b64encode(rendered(item.item_id)).decode("ascii"),
        }

    @app.post("/api/session/annotation", status_code=201)
    def submit_annotation(payload: AnnotationPayload,
                          x_session_token: str | None = Header(default=None)):
        reader_id = reader_for(x_session_token)
        try:
            mask = imageio.rle_to_mask(payload.mask.model_dump())
        except imageio.DataFormatError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        try:
            ann = Annotation(reader_id=reader_id, item_id=payload.item_id,
                             quality=payload.quality, confidence=payload.confidence,
                             artifacts=payload.artifacts, mask=mask)
            with write_lock:
                store.record_annotation(ann)
        except DuplicateAnnotation as exc:
            raise HTTPException(status_code=409, detail=str(exc)) from exc
        except ValidationError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        return {"status": "recorded", "item_id": payload.item_id}

    @app.get("/api/session/progress")
    def progress(x_session_token: str | None = Header(default=None)):
        reader_id = reader_for(x_session_token)
        done, total = store.reader_progress(reader_id)
        return {"done": done, "total": total}

    @app.exception_handler(ValidationError)
    def validation_handler(_, exc):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    if ui_dir is not None and Path(ui_dir).exists():
        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app
