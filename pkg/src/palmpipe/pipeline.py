"""End-to-end matching pipeline with ablation switches.

keypoints -> ROI -> optional enhancement -> optional per-comparison TPS
re-alignment of the probe onto the gallery ROI -> patch embeddings ->
whole-patch or ensemble-mean score.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .errors import PalmError
from .evaluation import Pair, ScoreRecord
from .features import DescriptorConfig, Embedding, embed_roi, similarity, write_embedding
from .fusion import ensemble_mean
from .geometry import DEFAULT_TEMPLATE, extract_roi_context
from .imaging import ENHANCE_WINDOW, Image, enhance_baseline, read_image, write_image
from .keypoints import KeypointProviderConfig, provide_keypoints
from .manifest import Manifest, ManifestRow
from .tps import GRID_N, LAMBDA, RADIUS, RealignConfig, realign

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    keypoints: str = "file"
    binarization_threshold: float = 0.25
    min_hand_area: float = 0.05
    enhance: bool = True
    enhance_window: int = ENHANCE_WINDOW
    tps: bool = True
    grid_n: int = GRID_N
    radius: int = RADIUS
    lam: float = LAMBDA
    ensemble: bool = True
    block: int = 16
    bins: int = 8
    threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.provider  # validates keypoint fields
        if self.enhance_window < 3 or self.enhance_window % 2 == 0:
            raise ValueError("enhance_window must be odd and >= 3")
        if self.grid_n < 2 or self.radius < 0 or self.lam < 0:
            raise ValueError("grid_n >= 2, radius >= 0 and lam >= 0 are required")
        if self.block < 1 or 224 % (2 * self.block) or self.bins < 1:
            raise ValueError("block must divide 112 and bins must be positive")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")

    @property
    def provider(self) -> KeypointProviderConfig:
        return KeypointProviderConfig(self.keypoints, self.binarization_threshold, self.min_hand_area)

    @property
    def descriptor(self) -> DescriptorConfig:
        return DescriptorConfig(self.block, self.bins)

    @property
    def realign_config(self) -> RealignConfig:
        return RealignConfig(self.grid_n, self.radius, self.lam)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def to_dict(self) -> dict:
        return asdict(self)


CONTEXT_PAD = 16
ROI = 224


def crop_roi(context: Image) -> Image:
    p = (context.width - ROI) // 2
    return Image(context.pixels[p : p + ROI, p : p + ROI])


def prepare_context(img: Image, row: ManifestRow, manifest: Manifest | None, cfg: PipelineConfig) -> Image:
    """Coarsely aligned (and optionally enhanced) ROI with CONTEXT_PAD pixels of surround.

    Enhancement runs on the padded crop; the ROI proper is its centre
    (see crop_roi). Re-alignment samples the warped probe from the surround.
    """
    kp_path = manifest.keypoint_path(row) if manifest is not None and row.keypoints else None
    kp = provide_keypoints(cfg.provider, img, kp_path, row.hand_side, row.capture_id)
    if kp.hand_side != row.hand_side:
        kp = type(kp)(kp.points, row.hand_side, kp.image_id)
    ctx = extract_roi_context(img, kp, DEFAULT_TEMPLATE, CONTEXT_PAD)
    return enhance_baseline(ctx, cfg.enhance_window) if cfg.enhance else ctx


def prepare_roi(img: Image, row: ManifestRow, manifest: Manifest | None, cfg: PipelineConfig) -> Image:
    """The 224x224 ROI fed to the descriptor."""
    return crop_roi(prepare_context(img, row, manifest, cfg))


def embed(roi: Image, cfg: PipelineConfig) -> list[Embedding]:
    return embed_roi(roi, cfg.descriptor, ensemble=cfg.ensemble)


def fuse(zp: list[Embedding], zg: list[Embedding]) -> float:
    return fuse_patch_scores(patch_scores(zp, zg))


def patch_scores(zp: list[Embedding], zg: list[Embedding]) -> list[float]:
    return [similarity(a, b) for a, b in zip(zp, zg)]


def fuse_patch_scores(scores: list[float]) -> float:
    return ensemble_mean(scores) if len(scores) == 5 else scores[0]


def compare_patches(probe_ctx: Image, gallery_ctx: Image, cfg: PipelineConfig, gallery_emb=None, probe_emb=None) -> list[float]:
    """Per-patch similarities of one comparison (whole first).

    With TPS on, the probe is re-aligned onto the gallery ROI first; when too
    few grid nodes match, the coarse probe is used as is.
    """
    probe_roi = crop_roi(probe_ctx)
    gallery_roi = crop_roi(gallery_ctx)
    zg = gallery_emb if gallery_emb is not None else embed(gallery_roi, cfg)
    zp = probe_emb
    if cfg.tps:
        warped, warp = realign(probe_roi, gallery_roi, cfg.realign_config, fill="edge", context=probe_ctx)
        if warp is not None:
            zp = embed(warped, cfg)
    if zp is None:
        zp = embed(probe_roi, cfg)
    return patch_scores(zp, zg)


def realign_context(probe_ctx: Image, reference_ctx: Image, cfg: PipelineConfig) -> Image:
    """Probe ROI re-aligned onto the reference ROI (coarse probe ROI when matching fails)."""
    warped, _ = realign(crop_roi(probe_ctx), crop_roi(reference_ctx), cfg.realign_config, fill="edge", context=probe_ctx)
    return warped


def compare(probe_ctx: Image, gallery_ctx: Image, cfg: PipelineConfig, gallery_emb=None, probe_emb=None) -> float:
    """Fused score of one comparison of two prepared contexts under ``cfg``."""
    return fuse_patch_scores(compare_patches(probe_ctx, gallery_ctx, cfg, gallery_emb, probe_emb))


@dataclass
class PreparedSet:
    contexts: dict[str, Image]
    embeddings: dict[str, list[Embedding]]
    failures: dict[str, str]


def _prepare_one(args):
    row, manifest, cfg = args
    try:
        img = read_image(manifest.image_path(row))
        ctx = prepare_context(img, row, manifest, cfg)
        return row.capture_id, ctx, embed(crop_roi(ctx), cfg), None
    except PalmError as exc:
        return row.capture_id, None, None, f"{exc.code}: {exc}"


def prepare_manifest(manifest: Manifest, cfg: PipelineConfig, jobs: int = 1, rows=None) -> PreparedSet:
    rows = list(manifest.rows if rows is None else rows)
    work = [(r, manifest, cfg) for r in rows]
    results = _map(_prepare_one, work, jobs)
    out = PreparedSet({}, {}, {})
    for cid, ctx, emb, err in results:
        if err is not None:
            log.error("%s: %s", cid, err)
            out.failures[cid] = err
        else:
            out.contexts[cid] = ctx
            out.embeddings[cid] = emb
    return out


def _score_chunk(args):
    chunk, ctxs, embs, cfg = args
    return [compare_patches(ctxs[p], ctxs[g], cfg, embs[g], embs[p]) for p, g in chunk]


def _map(fn, work, jobs: int):
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(jobs) as ex:
            return list(ex.map(fn, work))
    return [fn(w) for w in work]


def score_pairs_patches(pairs: list[Pair], prepared: PreparedSet, cfg: PipelineConfig, jobs: int = 1, chunk: int = 64):
    """Per-patch scores for every pair whose two captures were prepared, in ``pairs`` order."""
    usable = [p for p in pairs if p.probe.capture_id in prepared.contexts and p.gallery.capture_id in prepared.contexts]
    skipped = len(pairs) - len(usable)
    if skipped:
        log.warning("skipping %d pairs with failed captures", skipped)
    ids = [(p.probe.capture_id, p.gallery.capture_id) for p in usable]
    chunks = [ids[i : i + chunk] for i in range(0, len(ids), chunk)]
    if jobs > 1:
        work = []
        for c in chunks:
            need = {x for pg in c for x in pg}
            work.append((c, {k: prepared.contexts[k] for k in need}, {k: prepared.embeddings[k] for k in need}, cfg))
    else:
        work = [(c, prepared.contexts, prepared.embeddings, cfg) for c in chunks]
    return usable, [s for part in _map(_score_chunk, work, jobs) for s in part]


def _records(usable, values) -> list[ScoreRecord]:
    return [
        ScoreRecord(p.probe.capture_id, p.gallery.capture_id, v, p.genuine, p.probe.subject_id, p.gallery.subject_id)
        for p, v in zip(usable, values)
    ]


def score_pairs(pairs: list[Pair], prepared: PreparedSet, cfg: PipelineConfig, jobs: int = 1) -> list[ScoreRecord]:
    usable, per_patch = score_pairs_patches(pairs, prepared, cfg, jobs)
    return _records(usable, [fuse_patch_scores(s) for s in per_patch])


def score_pairs_views(pairs: list[Pair], prepared: PreparedSet, cfg: PipelineConfig, jobs: int = 1) -> dict[str, list[ScoreRecord]]:
    """Fused records plus, for ensemble runs, the whole-patch-only records of the same comparisons."""
    usable, per_patch = score_pairs_patches(pairs, prepared, cfg, jobs)
    views = {"fused": _records(usable, [fuse_patch_scores(s) for s in per_patch])}
    if cfg.ensemble:
        views["whole"] = _records(usable, [s[0] for s in per_patch])
    return views


def write_artifacts(prepared: PreparedSet, out_dir, save_roi: bool = False) -> list[Path]:
    """Write <capture>.<patch>.emb files (and optionally ROI PNGs) in capture order."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for cid in sorted(prepared.embeddings):
        for emb in prepared.embeddings[cid]:
            path = out / f"{cid}.{emb.patch_id}.emb"
            write_embedding(emb, path)
            written.append(path)
        if save_roi:
            write_image(crop_roi(prepared.contexts[cid]), out / f"{cid}.roi.png")
    return written
