"""Enrollment store with 1:1 verification and 1:N top-N identification.

On disk a gallery is two files side by side:

* ``<name>.plmg``: magic ``PLMG``, little-endian u16 version, u16 extractor-id
  length and the UTF-8 extractor id, then append-only entry records, each
  prefixed by its u32 byte length.
* ``<name>.json``: a sorted, indented index of the records (ids, metadata
  and byte offsets) for inspection and quick listing.

The binary file is authoritative; the index is rewritten after every enroll.
"""

from __future__ import annotations

import datetime as _dt
import fcntl
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DuplicateCapture, EmptyGallery, ExtractorMismatch, ParseError, UnknownSubject
from .features import PATCH_IDS, Embedding, similarity
from .fusion import ensemble_mean

MAGIC = b"PLMG"
VERSION = 1
HANDS = ("right", "left")
AGE_RANGE = (6, 48)


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def _unpack_str(buf: bytes, pos: int) -> tuple[str, int]:
    (n,) = struct.unpack_from("<H", buf, pos)
    pos += 2
    raw = buf[pos : pos + n]
    if len(raw) != n:
        raise ParseError("truncated string field")
    return raw.decode("utf-8"), pos + n


def default_enrolled_at() -> int:
    """SOURCE_DATE_EPOCH when set, else the Unix epoch, so reruns are byte-stable."""
    v = os.environ.get("SOURCE_DATE_EPOCH")
    return int(v) if v else 0


def iso_time(t: int) -> str:
    return _dt.datetime.fromtimestamp(int(t), _dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass(frozen=True, eq=False)
class GalleryEntry:
    subject_id: str
    capture_id: str
    hand_side: str
    embeddings: tuple
    age_months: int | None = None
    enrolled_at: int = 0  # seconds since the Unix epoch

    def __post_init__(self):
        embs = tuple(self.embeddings)
        object.__setattr__(self, "embeddings", embs)
        if not self.subject_id or not self.capture_id:
            raise ValueError("subject_id and capture_id must be non-empty")
        if self.hand_side not in HANDS:
            raise ValueError(f"hand_side must be one of {HANDS}")
        if tuple(e.patch_id for e in embs) != PATCH_IDS:
            raise ValueError(f"entry needs exactly the patches {PATCH_IDS} in order")
        if len({e.extractor_id for e in embs}) != 1:
            raise ExtractorMismatch("entry embeddings disagree on extractor_id")
        if self.age_months is not None and not AGE_RANGE[0] <= int(self.age_months) <= AGE_RANGE[1]:
            raise ValueError(f"age_months must lie in {AGE_RANGE}")

    @property
    def extractor_id(self) -> str:
        return self.embeddings[0].extractor_id

    def __eq__(self, other):
        if not isinstance(other, GalleryEntry):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()

    def to_bytes(self) -> bytes:
        age = 0 if self.age_months is None else int(self.age_months)
        out = _pack_str(self.subject_id) + _pack_str(self.capture_id)
        out += struct.pack("<BBq", HANDS.index(self.hand_side), age, int(self.enrolled_at))
        return out + b"".join(e.to_bytes() for e in self.embeddings)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "GalleryEntry":
        try:
            subject, pos = _unpack_str(buf, 0)
            capture, pos = _unpack_str(buf, pos)
            hand, age, t = struct.unpack_from("<BBq", buf, pos)
            pos += 10
            embs = []
            for _ in PATCH_IDS:
                e, pos = Embedding.from_bytes(buf, pos)
                embs.append(e)
        except (struct.error, UnicodeDecodeError) as exc:
            raise ParseError(f"corrupt gallery record: {exc}") from exc
        if pos != len(buf) or hand >= len(HANDS):
            raise ParseError("malformed gallery record")
        return cls(subject, capture, HANDS[hand], tuple(embs), age or None, t)

    def index_record(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "capture_id": self.capture_id,
            "hand_side": self.hand_side,
            "age_months": self.age_months,
            "enrolled_at": iso_time(self.enrolled_at),
        }


def fused_score(probe, entry: GalleryEntry, ensemble: bool = True) -> float:
    probe = list(probe)
    if ensemble:
        if len(probe) != len(PATCH_IDS):
            raise ValueError(f"ensemble scoring needs {len(PATCH_IDS)} probe embeddings")
        return ensemble_mean([similarity(p, g) for p, g in zip(probe, entry.embeddings)])
    return similarity(probe[0], entry.embeddings[0])


@dataclass
class Gallery:
    extractor_id: str
    entries: list[GalleryEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def subjects(self) -> list[str]:
        return sorted({e.subject_id for e in self.entries})

    def enroll(self, entry: GalleryEntry) -> "Gallery":
        if entry.extractor_id != self.extractor_id:
            raise ExtractorMismatch(f"store uses {self.extractor_id}, entry has {entry.extractor_id}")
        if any(e.capture_id == entry.capture_id for e in self.entries):
            raise DuplicateCapture(f"capture {entry.capture_id} is already enrolled")
        self.entries.append(entry)
        return self

    def _check_probe(self, probe) -> list[Embedding]:
        probe = list(probe)
        if not probe:
            raise ValueError("empty probe")
        for p in probe:
            if p.extractor_id != self.extractor_id:
                raise ExtractorMismatch(f"store uses {self.extractor_id}, probe has {p.extractor_id}")
        return probe

    def subject_scores(self, probe, ensemble: bool = True) -> dict[str, float]:
        """Best fused score per subject (max over that subject's captures)."""
        probe = self._check_probe(probe)
        best: dict[str, float] = {}
        for e in self.entries:
            s = fused_score(probe, e, ensemble)
            if s > best.get(e.subject_id, -np.inf):
                best[e.subject_id] = s
        return best

    def verify(self, subject_id: str, probe, threshold: float, ensemble: bool = True) -> tuple[bool, float]:
        probe = self._check_probe(probe)
        mine = [e for e in self.entries if e.subject_id == subject_id]
        if not mine:
            raise UnknownSubject(f"subject {subject_id} has no enrolled captures")
        score = max(fused_score(probe, e, ensemble) for e in mine)
        return score >= threshold, score

    def identify_topn(self, probe, n: int, ensemble: bool = True) -> list[tuple[str, float]]:
        if n < 1:
            raise ValueError("n must be >= 1")
        if not self.entries:
            raise EmptyGallery("gallery has no entries")
        ranked = sorted(self.subject_scores(probe, ensemble).items(), key=lambda kv: (-kv[1], kv[0]))
        return ranked[:n]

    # ------------------------------------------------------------- files

    def header_bytes(self) -> bytes:
        eid = self.extractor_id.encode("utf-8")
        return MAGIC + struct.pack("<HH", VERSION, len(eid)) + eid

    def to_bytes(self) -> bytes:
        out = [self.header_bytes()]
        for e in self.entries:
            rec = e.to_bytes()
            out.append(struct.pack("<I", len(rec)) + rec)
        return b"".join(out)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Gallery":
        if buf[:4] != MAGIC:
            raise ParseError("not a gallery file (bad magic)")
        try:
            version, n = struct.unpack_from("<HH", buf, 4)
        except struct.error as exc:
            raise ParseError("truncated gallery header") from exc
        if version != VERSION:
            raise ParseError(f"unsupported gallery version {version}")
        pos = 8 + n
        if pos > len(buf):
            raise ParseError("truncated gallery header")
        g = cls(buf[8:pos].decode("utf-8"))
        while pos < len(buf):
            if pos + 4 > len(buf):
                raise ParseError("truncated gallery record length")
            (size,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            rec = buf[pos : pos + size]
            if len(rec) != size:
                raise ParseError("truncated gallery record")
            g.enroll(GalleryEntry.from_bytes(rec))
            pos += size
        return g

    def index(self) -> dict:
        records, offset = [], len(self.header_bytes())
        for e in self.entries:
            size = len(e.to_bytes())
            rec = e.index_record()
            rec.update(offset=offset, length=size + 4)
            records.append(rec)
            offset += size + 4
        return {"format": "PLMG", "version": VERSION, "extractor_id": self.extractor_id, "entries": records}


def paths(base) -> tuple[Path, Path]:
    """(binary, index) paths for a gallery named by ``base`` (suffix optional)."""
    p = Path(base)
    if p.suffix in (".plmg", ".json"):
        p = p.with_suffix("")
    return p.with_suffix(".plmg"), p.with_suffix(".json")


def index_text(gallery: Gallery) -> str:
    return json.dumps(gallery.index(), indent=2, sort_keys=True) + "\n"


def save_gallery(gallery: Gallery, base) -> None:
    binp, idxp = paths(base)
    binp.parent.mkdir(parents=True, exist_ok=True)
    binp.write_bytes(gallery.to_bytes())
    idxp.write_text(index_text(gallery), encoding="utf-8")


def load_gallery(base) -> Gallery:
    binp, _ = paths(base)
    try:
        buf = binp.read_bytes()
    except OSError as exc:
        raise ParseError(f"cannot read gallery {binp}: {exc}") from exc
    return Gallery.from_bytes(buf)


def enroll_file(base, entry: GalleryEntry, extractor_id: str | None = None) -> Gallery:
    """Append one entry to an on-disk gallery, creating it if absent.

    Writers are serialized by an exclusive lock on the binary file; the file
    is left untouched when validation fails.
    """
    binp, idxp = paths(base)
    binp.parent.mkdir(parents=True, exist_ok=True)
    with open(binp, "a+b") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            fh.seek(0)
            buf = fh.read()
            g = Gallery.from_bytes(buf) if buf else Gallery(extractor_id or entry.extractor_id)
            g.enroll(entry)
            if not buf:
                fh.write(g.header_bytes())
            rec = entry.to_bytes()
            fh.write(struct.pack("<I", len(rec)) + rec)
            fh.flush()
            idxp.write_text(index_text(g), encoding="utf-8")
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)
    return g
