"""HTTP front end over a gallery file.

Enrollment is serialized by a process-wide lock and appended through
``gallery.enroll_file``; verify and identify read the in-memory snapshot.
"""

from __future__ import annotations

import threading
from pathlib import Path

from fastapi import FastAPI
from fastapi.responses import JSONResponse

from . import __version__
from .errors import DuplicateCapture, EmptyGallery, ExtractorMismatch, PalmError, UnknownSubject
from .features import DescriptorConfig
from .gallery import Gallery, GalleryEntry, enroll_file, load_gallery, paths
from .schemas import (
    Candidate,
    EnrollRequest,
    EnrollResponse,
    ErrorBody,
    GalleryInfo,
    IdentifyRequest,
    IdentifyResponse,
    VerifyRequest,
    VerifyResponse,
    decode_embedding,
)

STATUS = {
    DuplicateCapture: 409,
    UnknownSubject: 404,
    EmptyGallery: 404,
    ExtractorMismatch: 422,
}


def create_app(gallery_path, extractor_id: str = DescriptorConfig().extractor_id) -> FastAPI:
    binp, _ = paths(gallery_path)
    store = load_gallery(binp) if binp.exists() else Gallery(extractor_id)
    lock = threading.Lock()
    app = FastAPI(title="palmpipe", version=__version__)

    @app.exception_handler(PalmError)
    async def _palm_error(request, exc: PalmError):
        status = next((s for cls, s in STATUS.items() if isinstance(exc, cls)), 400)
        return JSONResponse(ErrorBody(code=exc.code, detail=str(exc)).model_dump(), status_code=status)

    @app.exception_handler(ValueError)
    async def _value_error(request, exc: ValueError):
        return JSONResponse(ErrorBody(code="ValueError", detail=str(exc)).model_dump(), status_code=422)

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok"}

    @app.get("/gallery", response_model=GalleryInfo)
    def info() -> GalleryInfo:
        return GalleryInfo(extractor_id=store.extractor_id, size=len(store), subjects=store.subjects)

    @app.post("/enroll", response_model=EnrollResponse)
    def enroll(req: EnrollRequest) -> EnrollResponse:
        nonlocal store
        entry = GalleryEntry(
            req.subject_id,
            req.capture_id,
            req.hand_side,
            tuple(decode_embedding(e) for e in req.embeddings),
            req.age_months,
            req.enrolled_at,
        )
        with lock:
            Gallery(store.extractor_id, list(store.entries)).enroll(entry)  # validate before touching disk
            store = enroll_file(binp, entry, store.extractor_id)
        return EnrollResponse(capture_id=entry.capture_id, size=len(store))

    @app.post("/verify", response_model=VerifyResponse)
    def verify(req: VerifyRequest) -> VerifyResponse:
        probe = [decode_embedding(e) for e in req.embeddings]
        decision, score = store.verify(req.subject_id, probe, req.threshold, ensemble=len(probe) == 5)
        return VerifyResponse(subject_id=req.subject_id, decision=decision, score=score)

    @app.post("/identify", response_model=IdentifyResponse)
    def identify(req: IdentifyRequest) -> IdentifyResponse:
        probe = [decode_embedding(e) for e in req.embeddings]
        ranked = store.identify_topn(probe, req.n, ensemble=len(probe) == 5)
        return IdentifyResponse(candidates=[Candidate(subject_id=s, score=v) for s, v in ranked])

    app.state.gallery_path = Path(binp)
    return app
