"""Seeded synthetic palm generator with exact ground truth.

A palm identity is rendered once into the canonical 320x320 template frame
(silhouette, three principal creases, minor creases, band-pass ridge
texture). A capture samples that canonical raster through a smooth non-rigid
jitter and a perspective pose, then applies lighting, blur, noise and a
background. Ground-truth keypoints are the template points pushed through
the same mapping.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage
from skimage.draw import polygon as fill_polygon

from ._homog import apply_h
from .errors import BadSize, ReportIoError
from .geometry import TEMPLATE_POINTS, Homography, KeypointSet, mirror_matrix, pose_condition_number, save_keypoints
from .imaging import Image, gaussian_blur, sample, write_image
from .manifest import ManifestRow, write_manifest
from .tps import Correspondences, TpsWarp, fit_tps

log = logging.getLogger(__name__)

CANVAS_ORIGIN = -128
CANVAS_SIZE = 576
# superellipse palm through the lateral template points; it meets the forearm
# edges exactly at the wrist-base points, leaving a concave corner there
PALM_CENTER = np.array([160.0, 170.0])
ARM_HALF_WIDTH = 48.0
_a = 130.0
BODY_AXES = (_a, 130.0 / (1.0 - (ARM_HALF_WIDTH / _a) ** 4) ** 0.25)
ROI_CENTER = np.array([160.0, 160.0])
VALLEY_OFFSET = 1.0
WEB_RADIUS = 3.0
SKIN = 0.62
RIDGE_AMPLITUDE = 0.08
LINE_DEPTH = 0.3
POSE_CONDITION_MAX = 1e3


def _valley_apexes() -> np.ndarray:
    c = TEMPLATE_POINTS[8]
    v = TEMPLATE_POINTS[:4]
    d = v - c
    return v + VALLEY_OFFSET * d / np.linalg.norm(d, axis=1, keepdims=True)


APEX = _valley_apexes()
# finger bases in thumb -> little order
FINGER_BASES = (
    (np.array([28.0, 166.0]), APEX[3]),
    (np.array([92.0, 66.0]), APEX[0]),
    (APEX[0], APEX[1]),
    (APEX[1], APEX[2]),
    (APEX[2], np.array([262.0, 96.0])),
)
FINGER_DIRS = np.array([[-0.7, -0.71], [-0.42, -0.91], [-0.08, -1.0], [0.3, -0.95], [0.66, -0.75]])
FINGER_LENGTHS = np.array([80.0, 92.0, 104.0, 96.0, 74.0])
TIP_RADII = np.array([17.0, 16.0, 16.0, 15.5, 14.0])


@dataclass(frozen=True, eq=False)
class PalmIdentity:
    """Identity-bearing parameters; a deterministic function of ``seed``."""

    seed: int
    principal_line_controls: np.ndarray  # (3, 4, 2) cubic Bezier control points
    minor_crease_density: float  # creases per 100 px² of ROI
    ridge_frequency: float  # cycles / px
    ridge_phase_field_seed: int
    finger_lengths: np.ndarray
    tip_radii: np.ndarray
    creases: tuple = field(default=())  # ((4, 2) Bezier controls, depth) per minor crease

    @classmethod
    def from_seed(cls, seed: int) -> "PalmIdentity":
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x9A1]))
        base = np.array(
            [
                [[276, 104], [236, 88], [186, 112], [138, 90]],  # heart line
                [[66, 150], [120, 148], [190, 170], [254, 190]],  # head line
                [[74, 146], [120, 188], [126, 250], [118, 296]],  # life line
            ],
            dtype=np.float64,
        )
        controls = base + rng.uniform(-14.0, 14.0, size=base.shape)
        density = float(rng.uniform(0.025, 0.04))
        n_creases = int(round(density * 224 * 224 / 100.0))
        creases = []
        for _ in range(n_creases):
            c = rng.uniform(52.0, 268.0, size=2)
            ang = rng.uniform(0, math.pi)
            length = rng.uniform(14.0, 42.0)
            d = np.array([math.cos(ang), math.sin(ang)])
            nrm = np.array([-d[1], d[0]])
            bend = rng.uniform(-0.25, 0.25) * length
            pts = np.array([c - d * length / 2, c - d * length / 6 + nrm * bend, c + d * length / 6 + nrm * bend, c + d * length / 2])
            creases.append((pts, float(rng.uniform(0.10, 0.2))))
        return cls(
            seed=int(seed),
            principal_line_controls=controls,
            minor_crease_density=density,
            ridge_frequency=float(rng.uniform(0.095, 0.125)),
            ridge_phase_field_seed=int(rng.integers(0, 2**31 - 1)),
            finger_lengths=FINGER_LENGTHS * rng.uniform(0.92, 1.08, size=5),
            tip_radii=TIP_RADII * rng.uniform(0.9, 1.1, size=5),
            creases=tuple(creases),
        )


@dataclass(frozen=True)
class CaptureRanges:
    """Bounds from which per-capture conditions are drawn."""

    roll_deg: float = 8.0
    pitch_deg: float = 8.0
    yaw_deg: float = 8.0
    scale: tuple[float, float] = (0.8, 0.9)
    shift_px: float = 10.0
    tps_jitter_px: float = 3.0
    blur_sigma: tuple[float, float] = (0.0, 1.1)
    noise_sigma: tuple[float, float] = (0.0, 0.09)
    illumination: float = 0.3
    shading: float = 0.6
    cluttered_probability: float = 0.0
    focal_px: float = 700.0


@dataclass(frozen=True, eq=False)
class CaptureParams:
    pose: np.ndarray  # canonical frame -> image, before any left-hand mirroring
    tps_jitter_px: float = 0.0
    blur_sigma: float = 0.0
    noise_sigma: float = 0.0
    illumination_gradient: tuple[float, float] = (0.0, 0.0)
    shading: float = 0.0  # depth of a smooth random multiplicative shadow field
    background: str = "dark"
    seed: int = 0
    closed_fist: bool = False

    def __post_init__(self):
        if self.tps_jitter_px < 0:
            raise ValueError("tps_jitter_px must be non-negative")
        if not 0.0 <= self.shading < 1.0:
            raise ValueError("shading must lie in [0, 1)")
        if self.background not in ("dark", "cluttered"):
            raise ValueError("background must be 'dark' or 'cluttered'")


def pose_matrix(size: int, roll: float, pitch: float, yaw: float, scale: float, shift=(0.0, 0.0), focal: float = 700.0) -> np.ndarray:
    """Perspective image of the canonical palm plane tilted by (roll, pitch, yaw) degrees."""
    r, p, y = (math.radians(a) for a in (roll, pitch, yaw))
    Rx = np.array([[1, 0, 0], [0, math.cos(p), -math.sin(p)], [0, math.sin(p), math.cos(p)]])
    Ry = np.array([[math.cos(y), 0, math.sin(y)], [0, 1, 0], [-math.sin(y), 0, math.cos(y)]])
    Rz = np.array([[math.cos(r), -math.sin(r), 0], [math.sin(r), math.cos(r), 0], [0, 0, 1]])
    R = Rz @ Ry @ Rx
    z0 = focal / scale
    cx = size / 2.0 + shift[0]
    cy = 0.57 * size + shift[1]
    K = np.array([[focal, 0, cx], [0, focal, cy], [0, 0, 1.0]])
    A = np.array([[1.0, 0, -PALM_CENTER[0]], [0, 1.0, -PALM_CENTER[1]], [0, 0, 1.0]])
    H = K @ np.column_stack([R[:, 0], R[:, 1], [0.0, 0.0, z0]]) @ A
    return H / H[2, 2]


def sample_capture(rng: np.random.Generator, ranges: CaptureRanges = CaptureRanges(), size: int = 384, closed_fist: bool = False) -> CaptureParams:
    u = lambda a: float(rng.uniform(-a, a))  # noqa: E731
    H = pose_matrix(
        size,
        u(ranges.roll_deg),
        u(ranges.pitch_deg),
        u(ranges.yaw_deg),
        float(rng.uniform(*ranges.scale)),
        (u(ranges.shift_px), u(ranges.shift_px)),
        ranges.focal_px,
    )
    background = "cluttered" if rng.random() < ranges.cluttered_probability else "dark"
    return CaptureParams(
        pose=H,
        tps_jitter_px=ranges.tps_jitter_px,
        blur_sigma=float(rng.uniform(*ranges.blur_sigma)),
        noise_sigma=float(rng.uniform(*ranges.noise_sigma)),
        illumination_gradient=(u(ranges.illumination), u(ranges.illumination)),
        shading=float(rng.uniform(0.0, ranges.shading)),
        background=background,
        seed=int(rng.integers(0, 2**31 - 1)),
        closed_fist=closed_fist,
    )


# ------------------------------------------------------------ canonical art

def _canvas_grid(step: float = 1.0):
    n = int(CANVAS_SIZE / step)
    coords = CANVAS_ORIGIN + (np.arange(n) + 0.5) * step - 0.5
    return np.meshgrid(coords, coords)


def bezier(ctrl: np.ndarray, n: int = 64) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n)[:, None]
    p0, p1, p2, p3 = ctrl
    return (1 - t) ** 3 * p0 + 3 * (1 - t) ** 2 * t * p1 + 3 * (1 - t) * t**2 * p2 + t**3 * p3


def _polyline_distance(poly: np.ndarray, pad: float) -> tuple[tuple[slice, slice], np.ndarray]:
    """Exact distance to a polyline over its padded bounding box of the canvas."""
    lo = np.floor(poly.min(axis=0) - pad).astype(int)
    hi = np.ceil(poly.max(axis=0) + pad).astype(int)
    lo = np.clip(lo - CANVAS_ORIGIN, 0, CANVAS_SIZE - 1)
    hi = np.clip(hi - CANVAS_ORIGIN, 0, CANVAS_SIZE - 1)
    sl = (slice(lo[1], hi[1] + 1), slice(lo[0], hi[0] + 1))
    ys, xs = np.mgrid[sl]
    px = xs + CANVAS_ORIGIN
    py = ys + CANVAS_ORIGIN
    best = np.full(px.shape, np.inf)
    for a, b in zip(poly[:-1], poly[1:]):
        d = b - a
        L = float(d @ d)
        t = np.clip(((px - a[0]) * d[0] + (py - a[1]) * d[1]) / L, 0.0, 1.0) if L > 0 else 0.0
        qx = a[0] + t * d[0] - px
        qy = a[1] + t * d[1] - py
        np.minimum(best, qx * qx + qy * qy, out=best)
    return sl, np.sqrt(best)


def _finger_polygon(base_a, base_b, direction, length, radius) -> np.ndarray:
    d = direction / np.linalg.norm(direction)
    tip = (base_a + base_b) / 2 + d * length
    ang = np.linspace(0, 2 * np.pi, 48, endpoint=False)
    circle = tip + radius * np.column_stack([np.cos(ang), np.sin(ang)])
    pts = np.vstack([base_a, base_b, circle])
    from scipy.spatial import ConvexHull

    return pts[ConvexHull(pts).vertices]


def _fill(mask: np.ndarray, poly: np.ndarray, step: float, value: bool = True) -> None:
    # canvas pixel centre (i + 0.5) * step - 0.5 + origin  <->  polygon coordinate
    r = (poly[:, 1] - CANVAS_ORIGIN + 0.5) / step - 0.5
    c = (poly[:, 0] - CANVAS_ORIGIN + 0.5) / step - 0.5
    rr, cc = fill_polygon(r, c, shape=mask.shape)
    mask[rr, cc] = value


def silhouette(identity: PalmIdentity, closed_fist: bool = False, supersample: int = 2) -> np.ndarray:
    """Anti-aliased hand coverage on the canonical canvas."""
    step = 1.0 / supersample
    gx, gy = _canvas_grid(step)
    a, b = BODY_AXES
    body = ((np.abs(gx - PALM_CENTER[0]) / a) ** 4 + (np.abs(gy - PALM_CENTER[1]) / b) ** 4) <= 1.0
    body |= (np.abs(gx - 160.0) <= ARM_HALF_WIDTH) & (gy >= 240.0)

    tips = []
    fingers = []
    lengths = identity.finger_lengths if not closed_fist else np.full(5, 12.0)
    for (pa, pb), d, L, rad in zip(FINGER_BASES, FINGER_DIRS, lengths, identity.tip_radii):
        fingers.append(_finger_polygon(pa, pb, d, L, rad))
        tips.append((pa + pb) / 2 + d / np.linalg.norm(d) * L)
    if not closed_fist:
        for k, apex in enumerate((APEX[3], APEX[0], APEX[1], APEX[2])):
            _fill(body, np.array([apex, tips[k], tips[k + 1]]), step, False)
    for poly in fingers:
        _fill(body, poly, step, True)
    if not closed_fist:
        # rounded web at each valley; its lowest point is the apex
        for apex in APEX:
            u = (apex - TEMPLATE_POINTS[8]) / np.linalg.norm(apex - TEMPLATE_POINTS[8])
            c = apex + WEB_RADIUS * u
            body &= np.hypot(gx - c[0], gy - c[1]) > WEB_RADIUS
    n = CANVAS_SIZE
    return body.reshape(n, supersample, n, supersample).mean(axis=(1, 3))


def ridge_texture(identity: PalmIdentity) -> np.ndarray:
    """Unit-variance band-pass noise around the identity's ridge frequency."""
    rng = np.random.default_rng(identity.ridge_phase_field_seed)
    n = CANVAS_SIZE
    noise = rng.standard_normal((n, n))
    fy = np.fft.fftfreq(n)[:, None]
    fx = np.fft.rfftfreq(n)[None, :]
    fr = np.hypot(fx, fy)
    phi = np.arctan2(fy, fx)
    f0 = identity.ridge_frequency
    theta0 = rng.uniform(0, np.pi)
    band = np.exp(-0.5 * ((fr - f0) / (0.18 * f0)) ** 2) * (1.0 + 0.8 * np.cos(2 * (phi - theta0)))
    tex = np.fft.irfft2(np.fft.rfft2(noise) * band, s=(n, n))
    return tex / tex.std()


@dataclass(frozen=True, eq=False)
class CanonicalPalm:
    albedo: np.ndarray
    coverage: np.ndarray


_CANON_CACHE: dict = {}


def canonical_palm(identity: PalmIdentity, closed_fist: bool = False) -> CanonicalPalm:
    key = (identity.seed, id(identity), closed_fist)
    hit = _CANON_CACHE.get(key)
    if hit is not None and hit[0] is identity:
        return hit[1]

    rng = np.random.default_rng(np.random.SeedSequence([identity.seed, 0x7E7]))
    n = CANVAS_SIZE
    low = ndimage.gaussian_filter(rng.standard_normal((n, n)), 40.0)
    low /= max(low.std(), 1e-12)
    albedo = SKIN * (1.0 + 0.04 * low) * (1.0 + RIDGE_AMPLITUDE * ridge_texture(identity))

    shade = np.ones((n, n))
    for ctrl in identity.principal_line_controls:
        sl, d = _polyline_distance(bezier(ctrl, 80), 8.0)
        shade[sl] *= 1.0 - LINE_DEPTH * np.exp(-0.5 * (d / 1.7) ** 2)
    for ctrl, depth in identity.creases:
        sl, d = _polyline_distance(bezier(ctrl, 16), 5.0)
        shade[sl] *= 1.0 - depth * np.exp(-0.5 * (d / 0.9) ** 2)
    palm = CanonicalPalm(np.clip(albedo * shade, 0.0, 1.0), silhouette(identity, closed_fist))
    if len(_CANON_CACHE) > 8:
        _CANON_CACHE.clear()
    _CANON_CACHE[key] = (identity, palm)
    return palm


# ----------------------------------------------------------------- capture

def jitter_warp(rng: np.random.Generator, max_px: float) -> TpsWarp:
    """Smooth random displacement of the canonical frame, bounded by ``max_px`` at the controls."""
    g = np.linspace(0.0, 320.0, 5)
    src = np.array([(x, y) for y in g for x in g])
    if max_px <= 0:
        return TpsWarp.identity(src)
    ang = rng.uniform(0, 2 * np.pi, len(src))
    mag = rng.uniform(0.0, max_px, len(src))
    disp = np.column_stack([np.cos(ang), np.sin(ang)]) * mag[:, None]
    return fit_tps(Correspondences.exact(src, src + disp), 0.0)


def invert_points(warp: TpsWarp, pts: np.ndarray, iters: int = 50) -> np.ndarray:
    """Solve warp(u) = pts by fixed-point iteration (displacements are small)."""
    pts = np.asarray(pts, dtype=np.float64)
    u = pts.copy()
    for _ in range(iters):
        u = pts - (warp(u) - u)
    return u


def _background(rng: np.random.Generator, size: int, kind: str) -> np.ndarray:
    bg = 0.05 + 0.015 * ndimage.gaussian_filter(rng.standard_normal((size, size)), 12.0) / 0.02
    if kind == "cluttered":
        blobs = ndimage.gaussian_filter(rng.standard_normal((size, size)), 6.0)
        bg = bg + 0.12 * np.clip(blobs / blobs.std(), 0, None) / 2.5
    return np.clip(bg, 0.0, 0.2)


def _shadow_field(seed: int, size: int) -> np.ndarray:
    """Smooth field in [0, 1] on the scale of the palm."""
    rng = np.random.default_rng([seed, 0x5AD])
    f = ndimage.gaussian_filter(rng.standard_normal((size, size)), size / 10.0, mode="wrap")
    f -= f.min()
    return f / max(f.max(), 1e-12)


@dataclass(frozen=True, eq=False)
class RenderResult:
    image: Image
    keypoints: KeypointSet
    pose: Homography  # canonical frame -> delivered image (mirror included)
    tps: TpsWarp  # canonical frame jitter
    roi_center: np.ndarray  # image position of the canonical ROI centre


def render_palm(identity: PalmIdentity, capture: CaptureParams, size: int = 384, hand_side: str = "right", image_id: str = "") -> RenderResult:
    if size < 256:
        raise BadSize(f"size {size} < 256")
    if pose_condition_number(capture.pose, 320.0, float(size)) > POSE_CONDITION_MAX:
        raise ValueError("pose homography is ill-conditioned")
    rng = np.random.default_rng(capture.seed)
    jitter = jitter_warp(rng, capture.tps_jitter_px)
    palm = canonical_palm(identity, capture.closed_fist)

    # canonical coordinates of every image pixel, via a coarse lattice
    step = 4
    m = size // step + 1
    lat = np.linspace(0.0, size - 1.0, m)
    lx, ly = np.meshgrid(lat, lat)
    lattice = np.column_stack([lx.ravel(), ly.ravel()])
    canon = jitter(apply_h(np.linalg.inv(capture.pose), lattice)).reshape(m, m, 2)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    fi = xs * (m - 1) / (size - 1)
    fj = ys * (m - 1) / (size - 1)
    cu = sample(canon[..., 0], fi, fj) - CANVAS_ORIGIN
    cv = sample(canon[..., 1], fi, fj) - CANVAS_ORIGIN
    albedo = sample(palm.albedo, cu, cv, fill=0.0)
    cover = sample(palm.coverage, cu, cv, fill=0.0)

    gx, gy = capture.illumination_gradient
    light = 1.0 + gx * (xs - size / 2) / size + gy * (ys - size / 2) / size
    if capture.shading > 0:
        light = light * (1.0 - capture.shading * _shadow_field(capture.seed, size))
    bg = _background(rng, size, capture.background)
    img = cover * albedo * light + (1.0 - cover) * bg
    img = gaussian_blur(img, capture.blur_sigma)
    if capture.noise_sigma > 0:
        img = img + rng.normal(0.0, capture.noise_sigma, img.shape)
    img = np.clip(img, 0.0, 1.0)

    canon_pts = invert_points(jitter, np.vstack([TEMPLATE_POINTS, ROI_CENTER]))
    pts = apply_h(capture.pose, canon_pts)
    pose = capture.pose
    if hand_side == "left":
        img = img[:, ::-1]
        M = mirror_matrix(size)
        pts = apply_h(M, pts)
        pose = M @ pose
    kp = KeypointSet(pts[:9], hand_side, image_id)
    return RenderResult(Image(img), kp, Homography(pose), jitter, pts[9])


# ----------------------------------------------------------------- dataset

@dataclass(frozen=True)
class DatasetConfig:
    size: int = 384
    ranges: CaptureRanges = CaptureRanges()
    left_probability: float = 0.5


def subject_plan(seed: int, n_subjects: int, captures: int, cfg: DatasetConfig):
    """Deterministic per-subject identity seed, hand side, age and capture params."""
    plans = []
    for s, ss in enumerate(np.random.SeedSequence(int(seed)).spawn(n_subjects)):
        rng = np.random.default_rng(ss)
        identity_seed = int(ss.generate_state(1)[0])
        hand = "left" if rng.random() < cfg.left_probability else "right"
        age = int(rng.integers(6, 49))
        caps = [sample_capture(rng, cfg.ranges, cfg.size) for _ in range(captures)]
        plans.append((f"s{s:04d}", identity_seed, hand, age, caps))
    return plans


def _render_subject(args):
    subject_id, identity_seed, hand, age, caps, size, out_dir = args
    out = Path(out_dir)
    identity = PalmIdentity.from_seed(identity_seed)
    rows = []
    for k, cap in enumerate(caps):
        cid = f"{subject_id}_c{k:02d}"
        res = render_palm(identity, cap, size, hand, cid)
        img_rel = f"images/{cid}.png"
        kp_rel = f"keypoints/{cid}.json"
        write_image(res.image, out / img_rel)
        save_keypoints(res.keypoints, out / kp_rel)
        truth = {
            "capture_id": cid,
            "identity_seed": identity_seed,
            "pose": res.pose.matrix.tolist(),
            "roi_center": res.roi_center.tolist(),
            "tps": res.tps.to_dict(),
        }
        (out / "truth" / f"{cid}.json").write_text(json.dumps(truth) + "\n", encoding="utf-8")
        rows.append(ManifestRow(subject_id, cid, hand, age, img_rel, kp_rel))
    return rows


def generate_dataset(n_subjects: int, captures_per_subject: int, seed: int, out_dir, cfg: DatasetConfig = DatasetConfig(), jobs: int = 1) -> Path:
    """Render a subjects x captures dataset; returns the manifest path."""
    if n_subjects < 2 or captures_per_subject < 2:
        raise ValueError("need at least 2 subjects and 2 captures per subject")
    out = Path(out_dir)
    try:
        for sub in ("images", "keypoints", "truth"):
            (out / sub).mkdir(parents=True, exist_ok=True)
        plans = subject_plan(seed, n_subjects, captures_per_subject, cfg)
        work = [(*p, cfg.size, str(out)) for p in plans]
        if jobs > 1:
            with ProcessPoolExecutor(jobs) as ex:
                results = list(ex.map(_render_subject, work))
        else:
            results = [_render_subject(w) for w in work]
        rows = [r for rs in results for r in rs]
        manifest = out / "manifest.csv"
        write_manifest(rows, manifest)
    except OSError as exc:
        raise ReportIoError(f"cannot write dataset to {out}: {exc}") from exc
    log.info("wrote %d captures to %s", len(rows), out)
    return manifest


def with_ranges(cfg: DatasetConfig, **kw) -> DatasetConfig:
    return replace(cfg, ranges=replace(cfg.ranges, **kw))


# Published benchmark: 100 subjects x 6 captures from a fixed seed. The
# variants inject stronger nonlinear distortion or heavier blur.
BENCHMARK_SEED = 20240917
BENCHMARK_SUBJECTS = 100
BENCHMARK_CAPTURES = 6
BENCHMARK_VARIANTS = {
    "base": {},
    "distorted": {"tps_jitter_px": 6.0},
    "blurred": {"blur_sigma": (1.5, 1.5)},
}


def benchmark_config(variant: str = "base") -> DatasetConfig:
    if variant not in BENCHMARK_VARIANTS:
        raise ValueError(f"unknown benchmark variant {variant!r}; choose from {sorted(BENCHMARK_VARIANTS)}")
    return with_ranges(DatasetConfig(), **BENCHMARK_VARIANTS[variant])
