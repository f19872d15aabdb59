"""Patch embeddings and the similarity score.

The baseline extractor is a block gradient-orientation histogram: each
16x16 block contributes an 8-bin histogram of gradient orientation modulo
180 degrees, weighted by gradient magnitude, and the concatenation is
L2-normalised. Learned extractors can be slotted in through the embedding
file format as long as they declare their dimension.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DimensionMismatch, ExtractorMismatch, ParseError
from .imaging import Image

PATCH_IDS = ("whole", "q1", "q2", "q3", "q4")
ROI_SIZE = 224
# gradients are taken on a lightly smoothed patch so pixel noise and
# resampling do not dominate the orientation statistics
GRADIENT_SIGMA = 1.0

EMBEDDING_MAGIC = b"PLME"
EMBEDDING_VERSION = 1


@dataclass(frozen=True)
class DescriptorConfig:
    block: int = 16
    bins: int = 8

    @property
    def extractor_id(self) -> str:
        return f"orihist-b{self.block}-n{self.bins}"

    def dim(self, patch_id: str) -> int:
        side = ROI_SIZE if patch_id == "whole" else ROI_SIZE // 2
        return (side // self.block) ** 2 * self.bins


def parse_extractor_id(extractor_id: str) -> DescriptorConfig | None:
    """Recover the config of a baseline extractor id; None for foreign extractors."""
    try:
        name, b, n = extractor_id.split("-")
        if name == "orihist" and b[0] == "b" and n[0] == "n":
            return DescriptorConfig(int(b[1:]), int(n[1:]))
    except ValueError:
        pass
    return None


@dataclass(frozen=True, eq=False)
class Embedding:
    values: np.ndarray
    extractor_id: str
    patch_id: str = "whole"

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float32, copy=True).reshape(-1)
        if self.patch_id not in PATCH_IDS:
            raise ValueError(f"patch_id must be one of {PATCH_IDS}")
        if v.size == 0 or not np.all(np.isfinite(v)):
            raise ValueError("embedding values must be finite and non-empty")
        norm = float(np.linalg.norm(v.astype(np.float64)))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"embedding must be unit norm, got {norm}")
        cfg = parse_extractor_id(self.extractor_id)
        if cfg is not None and cfg.dim(self.patch_id) != v.size:
            raise DimensionMismatch(f"{self.extractor_id}/{self.patch_id} declares dim {cfg.dim(self.patch_id)}, got {v.size}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return int(self.values.size)

    def __eq__(self, other):
        if not isinstance(other, Embedding):
            return NotImplemented
        return (
            self.extractor_id == other.extractor_id
            and self.patch_id == other.patch_id
            and self.values.tobytes() == other.values.tobytes()
        )

    def __neg__(self) -> "Embedding":
        return Embedding(-self.values, self.extractor_id, self.patch_id)

    @classmethod
    def from_vector(cls, vec, extractor_id: str, patch_id: str = "whole") -> "Embedding":
        """Normalise an arbitrary non-zero vector into an embedding."""
        v = np.asarray(vec, dtype=np.float64).reshape(-1)
        n = np.linalg.norm(v)
        v = v / n if n > 0 else np.full(v.size, 1.0 / np.sqrt(v.size))
        v32 = v.astype(np.float32)
        return cls(v32 / np.float32(np.linalg.norm(v32.astype(np.float64))), extractor_id, patch_id)

    def to_bytes(self) -> bytes:
        eid = self.extractor_id.encode("utf-8")
        head = EMBEDDING_MAGIC + struct.pack("<HH", EMBEDDING_VERSION, len(eid)) + eid
        head += struct.pack("<BI", PATCH_IDS.index(self.patch_id), self.dim)
        return head + self.values.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes, offset: int = 0) -> tuple["Embedding", int]:
        """Decode one embedding starting at ``offset``; returns it with the next offset."""
        try:
            if buf[offset : offset + 4] != EMBEDDING_MAGIC:
                raise ParseError("bad embedding magic")
            version, n = struct.unpack_from("<HH", buf, offset + 4)
            if version != EMBEDDING_VERSION:
                raise ParseError(f"unsupported embedding version {version}")
            pos = offset + 8
            eid = buf[pos : pos + n].decode("utf-8")
            pos += n
            pid, dim = struct.unpack_from("<BI", buf, pos)
            pos += 5
            raw = buf[pos : pos + 4 * dim]
            if len(raw) != 4 * dim or pid >= len(PATCH_IDS):
                raise ParseError("truncated embedding record")
            values = np.frombuffer(raw, dtype="<f4").astype(np.float32)
        except (struct.error, UnicodeDecodeError) as exc:
            raise ParseError(f"corrupt embedding record: {exc}") from exc
        return cls(values, eid, PATCH_IDS[pid]), pos + 4 * dim


def write_embedding(emb: Embedding, path) -> None:
    Path(path).write_bytes(emb.to_bytes())


def read_embedding(path) -> Embedding:
    buf = Path(path).read_bytes()
    emb, end = Embedding.from_bytes(buf)
    if end != len(buf):
        raise ParseError(f"trailing bytes in {path}")
    return emb


@dataclass(frozen=True, eq=False)
class PatchSet:
    whole: Image
    quadrants: tuple[Image, Image, Image, Image]

    def patches(self) -> list[tuple[str, Image]]:
        return [("whole", self.whole)] + list(zip(PATCH_IDS[1:], self.quadrants))


def split_quadrants(roi: Image) -> PatchSet:
    """Whole ROI plus its top-left, top-right, bottom-left and bottom-right quarters."""
    if roi.shape != (ROI_SIZE, ROI_SIZE):
        raise DimensionMismatch(f"ROI must be {ROI_SIZE}x{ROI_SIZE}, got {roi.width}x{roi.height}")
    h = ROI_SIZE // 2
    p = roi.pixels
    quads = (Image(p[:h, :h]), Image(p[:h, h:]), Image(p[h:, :h]), Image(p[h:, h:]))
    return PatchSet(roi, quads)


def orientation_histograms(pixels: np.ndarray, block: int, bins: int, sigma: float = GRADIENT_SIGMA) -> np.ndarray:
    """Per-block magnitude-weighted orientation histograms, shape (rows, cols, bins)."""
    h, w = pixels.shape
    if sigma > 0:
        pixels = ndimage.gaussian_filter(pixels, sigma, mode="nearest")
    gy, gx = np.gradient(pixels)
    mag = np.hypot(gx, gy)
    theta = np.mod(np.arctan2(gy, gx), np.pi)
    # linear vote split between the two nearest bin centres
    pos = theta / (np.pi / bins) - 0.5
    lo = np.floor(pos)
    frac = pos - lo
    b0 = np.mod(lo, bins).astype(np.intp)
    b1 = np.mod(lo + 1, bins).astype(np.intp)
    rows, cols = h // block, w // block
    cell = (np.arange(h)[:, None] // block) * cols + (np.arange(w)[None, :] // block)
    n = rows * cols * bins
    hist = np.bincount((cell * bins + b0).ravel(), (mag * (1 - frac)).ravel(), minlength=n)
    hist += np.bincount((cell * bins + b1).ravel(), (mag * frac).ravel(), minlength=n)
    return hist.reshape(rows, cols, bins)


def extract_descriptor(img: Image, cfg: DescriptorConfig = DescriptorConfig(), patch_id: str = "whole") -> Embedding:
    if img.width % cfg.block or img.height % cfg.block:
        raise DimensionMismatch(f"{img.width}x{img.height} is not divisible by block {cfg.block}")
    expected = cfg.dim(patch_id)
    hist = orientation_histograms(img.pixels, cfg.block, cfg.bins).ravel()
    if hist.size != expected:
        raise DimensionMismatch(f"{patch_id} patch gives dim {hist.size}, expected {expected}")
    return Embedding.from_vector(hist, cfg.extractor_id, patch_id)


def embed_roi(roi: Image, cfg: DescriptorConfig = DescriptorConfig(), ensemble: bool = True) -> list[Embedding]:
    """Embeddings of the whole ROI and, with ``ensemble``, its four quadrants.

    Quadrant descriptors reuse the whole-ROI block histograms (gradients are
    taken once over the full ROI, so quadrant borders see their neighbours).
    """
    if roi.shape != (ROI_SIZE, ROI_SIZE):
        raise DimensionMismatch(f"ROI must be {ROI_SIZE}x{ROI_SIZE}, got {roi.width}x{roi.height}")
    if (ROI_SIZE // 2) % cfg.block:
        raise DimensionMismatch(f"quadrant side {ROI_SIZE // 2} is not divisible by block {cfg.block}")
    hist = orientation_histograms(roi.pixels, cfg.block, cfg.bins)
    out = [Embedding.from_vector(hist.ravel(), cfg.extractor_id, "whole")]
    if ensemble:
        q = hist.shape[0] // 2
        for pid, (r, c) in zip(PATCH_IDS[1:], ((0, 0), (0, 1), (1, 0), (1, 1))):
            part = hist[r * q : (r + 1) * q, c * q : (c + 1) * q]
            out.append(Embedding.from_vector(part.ravel(), cfg.extractor_id, pid))
    return out


def similarity(zp: Embedding, zg: Embedding) -> float:
    """(1 + cos) / 2 of the two embeddings, in [0, 1] and exactly symmetric."""
    if zp.extractor_id != zg.extractor_id:
        raise ExtractorMismatch(f"{zp.extractor_id} vs {zg.extractor_id}")
    if zp.dim != zg.dim or zp.patch_id != zg.patch_id:
        raise DimensionMismatch(f"{zp.patch_id}/{zp.dim} vs {zg.patch_id}/{zg.dim}")
    return similarity_vectors(zp.values, zg.values)


def similarity_vectors(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    cos = float(np.dot(a, b)) / float(np.sqrt(np.dot(a, a) * np.dot(b, b)))
    return min(1.0, max(0.0, 0.5 * (1.0 + cos)))
