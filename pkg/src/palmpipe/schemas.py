"""Request and response models of the HTTP service.

Embeddings travel as base64 of their binary record (the same bytes as an
``.emb`` file) so values survive the round trip bit-exactly.
"""

from __future__ import annotations

import base64
from typing import Literal, Optional

from pydantic import BaseModel, Field

from .errors import ParseError
from .features import Embedding


def encode_embedding(e: Embedding) -> str:
    return base64.b64encode(e.to_bytes()).decode("ascii")


def decode_embedding(s: str) -> Embedding:
    try:
        buf = base64.b64decode(s.encode("ascii"), validate=True)
    except ValueError as exc:
        raise ParseError(f"embedding is not valid base64: {exc}") from exc
    emb, end = Embedding.from_bytes(buf)
    if end != len(buf):
        raise ParseError("trailing bytes after embedding record")
    return emb


class EnrollRequest(BaseModel):
    subject_id: str = Field(min_length=1)
    capture_id: str = Field(min_length=1)
    hand_side: Literal["left", "right"] = "right"
    age_months: Optional[int] = Field(default=None, ge=6, le=48)
    enrolled_at: int = 0
    embeddings: list[str] = Field(min_length=5, max_length=5)


class EnrollResponse(BaseModel):
    capture_id: str
    size: int


class VerifyRequest(BaseModel):
    subject_id: str = Field(min_length=1)
    embeddings: list[str] = Field(min_length=1, max_length=5)
    threshold: float = Field(default=0.5, ge=0.0, le=1.0)


class VerifyResponse(BaseModel):
    subject_id: str
    decision: bool
    score: float


class IdentifyRequest(BaseModel):
    embeddings: list[str] = Field(min_length=1, max_length=5)
    n: int = Field(default=5, ge=1)


class Candidate(BaseModel):
    subject_id: str
    score: float


class IdentifyResponse(BaseModel):
    candidates: list[Candidate]


class GalleryInfo(BaseModel):
    extractor_id: str
    size: int
    subjects: list[str]


class ErrorBody(BaseModel):
    code: str
    detail: str
