"""Keypoint providers: ground-truth files and a heuristic finger-valley detector.

The detector binarizes the frame, keeps the largest bright component, and
isolates the fingers with a morphological opening. Fingertips are the finger
pixels farthest from the palm centroid; each valley is the boundary point
closest to that centroid between two neighbouring tips. An affine fit of the
valleys onto the template locates the wrist: the wrist-base points are the
concave corners where the palm outline meets the forearm. A homography over
those six landmarks predicts template rows whose exits from the silhouette
give the lateral extrema, and places the palm centre.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage.measure import find_contours

from .errors import SegmentationFailed, ValleysNotFound
from .geometry import TEMPLATE_POINTS, KeypointSet, load_keypoints, mirror_matrix
from ._homog import apply_h, dlt
from .imaging import Image, sample

__all__ = ["KeypointProviderConfig", "detect_valleys", "load_keypoints", "provide_keypoints"]

WRIST_SEARCH = 0.35  # wrist-corner search radius relative to sqrt(hand area)
CORNER_TURN = 0.3  # minimal normalized turn of a concave corner
# template valleys in thumb -> little boundary order
BOUNDARY_VALLEYS = (3, 0, 1, 2)


@dataclass(frozen=True)
class KeypointProviderConfig:
    kind: str = "file"
    binarization_threshold: float = 0.25
    min_hand_area: float = 0.05
    opening_scale: float = 0.1  # opening radius relative to sqrt(hand area)
    min_finger_area: float = 0.004  # finger residue relative to hand area
    median: int = 3  # median filter width applied before thresholding, px

    def __post_init__(self):
        if self.kind not in ("file", "heuristic"):
            raise ValueError(f"unknown keypoint provider {self.kind!r}")
        if not 0.0 <= self.binarization_threshold <= 1.0:
            raise ValueError("binarization_threshold must lie in [0, 1]")
        if not 0.0 < self.min_hand_area < 1.0:
            raise ValueError("min_hand_area must lie in (0, 1)")
        if self.median < 1:
            raise ValueError("median must be a positive width")


def _disk(r: int) -> np.ndarray:
    y, x = np.mgrid[-r : r + 1, -r : r + 1]
    return x * x + y * y <= r * r


def segment_hand(pixels: np.ndarray, cfg: KeypointProviderConfig) -> np.ndarray:
    if cfg.median > 1:
        pixels = ndimage.median_filter(pixels, cfg.median, mode="nearest")
    fg = pixels > cfg.binarization_threshold
    lab, n = ndimage.label(fg)
    if n == 0:
        raise SegmentationFailed("no foreground above the binarization threshold")
    sizes = np.bincount(lab.ravel())[1:]
    k = int(np.argmax(sizes))
    if sizes[k] < cfg.min_hand_area * pixels.size:
        raise SegmentationFailed(f"largest component covers {sizes[k] / pixels.size:.3f} of the frame")
    return ndimage.binary_fill_holes(lab == k + 1)


def _open_palm(mask: np.ndarray, radius: int) -> np.ndarray:
    # edge padding keeps the frame border (wrist cut) from being eroded
    pad = radius + 2
    padded = np.pad(mask, pad, mode="edge")
    opened = ndimage.binary_opening(padded, structure=_disk(radius))
    return opened[pad:-pad, pad:-pad]


def _affine_fit(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    A = np.column_stack([src, np.ones(len(src))])
    sol, *_ = np.linalg.lstsq(A, dst, rcond=None)
    M = np.eye(3)
    M[:2, :] = sol.T
    return M


def _detect_right(pixels: np.ndarray, cfg: KeypointProviderConfig) -> np.ndarray:
    mask = segment_hand(pixels, cfg)
    area = float(mask.sum())
    radius = max(2, int(round(cfg.opening_scale * np.sqrt(area))))
    palm = _open_palm(mask, radius)
    if not palm.any():
        raise ValleysNotFound("opening removed the whole hand")
    cy, cx = ndimage.center_of_mass(palm)
    centre = np.array([cx, cy])

    lab, n = ndimage.label(mask & ~palm)
    if n < 5:
        raise ValleysNotFound(f"{n} finger candidates, need 5")
    sizes = np.bincount(lab.ravel())[1:]
    keep = np.argsort(-sizes, kind="stable")[:5] + 1
    if sizes[keep[-1] - 1] < cfg.min_finger_area * area:
        raise ValleysNotFound("fewer than 5 extended fingers")

    contours = find_contours(np.pad(mask, 1).astype(float), 0.5)
    contour = max(contours, key=len)[:, ::-1] - 1.0  # (x, y)
    if np.allclose(contour[0], contour[-1]):
        contour = contour[:-1]
    dist = np.hypot(*(contour - centre).T)

    tips = []
    for k in keep:
        ys, xs = np.nonzero(lab == k)
        d = np.hypot(xs - cx, ys - cy)
        j = int(np.argmax(d))
        tip = np.array([xs[j], ys[j]], dtype=float)
        tips.append(int(np.argmin(np.hypot(*(contour - tip).T))))
    tips = sorted(tips)
    m = len(contour)
    gaps = [(tips[(i + 1) % 5] - tips[i]) % m for i in range(5)]
    start = (int(np.argmax(gaps)) + 1) % 5  # the wrist lies in the biggest gap
    order = [tips[(start + i) % 5] for i in range(5)]

    valleys = []
    for a, b in zip(order[:-1], order[1:]):
        span = np.arange(a, a + ((b - a) % m)) % m
        if span.size < 3:
            raise ValleysNotFound("adjacent fingertips with no valley between them")
        valleys.append(contour[span[int(np.argmin(dist[span]))]])
    valleys = np.array(valleys)

    # the boundary may run little -> thumb; pick the labelling without reflection
    target = TEMPLATE_POINTS[list(BOUNDARY_VALLEYS)]
    best = None
    for seq in (valleys, valleys[::-1]):
        M = _affine_fit(seq, target)
        if np.linalg.det(M[:2, :2]) > 0:
            resid = float(np.sum((apply_h(M, seq) - target) ** 2))
            if best is None or resid < best[0]:
                best = (resid, seq, M)
    if best is None:
        raise ValleysNotFound("valley layout is inconsistent with an open hand")
    _, seq, M = best
    pts = np.empty((9, 2))
    pts[list(BOUNDARY_VALLEYS)] = seq

    # wrist base: the concave corner where the palm outline meets the forearm,
    # searched near where a template row leaves the silhouette
    Hinv = np.linalg.inv(M)
    scale = np.sqrt(area)
    turn = _concavity(contour, max(3, int(round(0.06 * scale))))
    reach = WRIST_SEARCH * scale
    for _ in range(2):
        for i in (4, 5):
            guess = apply_h(Hinv, TEMPLATE_POINTS[i : i + 1])[0]
            near = np.flatnonzero(np.hypot(*(contour - guess).T) <= reach)
            if near.size == 0:
                raise ValleysNotFound("no outline near the predicted wrist corner")
            # nearest clear corner, so the two wrist corners are never confused
            pts[i] = contour[_nearest_corner(turn, near, contour, guess)]
        Hinv = dlt(TEMPLATE_POINTS[:6], pts[:6])
        reach *= 0.5
    # lateral extrema: where the template row through them leaves the outline
    for i in (6, 7):
        pts[i] = _ray_exit(mask, Hinv, *RAY_TARGETS[i], TEMPLATE_POINTS[i])
    pts[8] = apply_h(Hinv, TEMPLATE_POINTS[8:])[0]
    return pts


def _nearest_corner(turn, near, contour, guess) -> int:
    """Strongest point of the concave run (turn >= CORNER_TURN) closest to ``guess``."""
    idx = near[turn[near] >= CORNER_TURN]
    if idx.size == 0:
        return int(near[np.argmax(turn[near])])
    runs = np.split(idx, np.flatnonzero(np.diff(idx) > 1) + 1)
    peaks = np.array([r[np.argmax(turn[r])] for r in runs])
    return int(peaks[np.argmin(np.hypot(*(contour[peaks] - guess).T))])


def _concavity(contour: np.ndarray, k: int) -> np.ndarray:
    """Signed turn at each contour point, positive where the outline bends inward."""
    prev = contour - np.roll(contour, k, axis=0)
    nxt = np.roll(contour, -k, axis=0) - contour
    cross = prev[:, 0] * nxt[:, 1] - prev[:, 1] * nxt[:, 0]
    x, y = contour.T
    orient = np.sign(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))
    return -orient * cross / (np.hypot(*prev.T) * np.hypot(*nxt.T) + 1e-12)


# landmark -> (template ray origin, direction sign along the template x axis)
RAY_TARGETS = {
    6: (np.array([160.0, 184.0]), -1.0),
    7: (np.array([160.0, 184.0]), 1.0),
}


def _ray_exit(fg: np.ndarray, Hinv: np.ndarray, origin: np.ndarray, sign: float, guess: np.ndarray) -> np.ndarray:
    """First foreground -> background transition on the image of a template row."""
    reach = abs(guess[0] - origin[0])
    t = np.linspace(0.0, 3.0 * reach, int(12 * reach))
    row = np.column_stack([origin[0] + sign * t, np.full_like(t, origin[1])])
    img_pts = apply_h(Hinv, row)
    h, w = fg.shape
    inside = (img_pts[:, 0] >= 0) & (img_pts[:, 0] <= w - 1) & (img_pts[:, 1] >= 0) & (img_pts[:, 1] <= h - 1)
    vals = np.zeros(len(t))
    vals[inside] = sample(fg.astype(np.float64), img_pts[inside, 0], img_pts[inside, 1])
    out = np.flatnonzero(vals < 0.5)
    if out.size == 0 or out[0] == 0:
        raise ValleysNotFound("hand outline not found along a template row")
    k = out[0]
    a = (vals[k - 1] - 0.5) / (vals[k - 1] - vals[k])
    return img_pts[k - 1] + a * (img_pts[k] - img_pts[k - 1])


def detect_valleys(img: Image, cfg: KeypointProviderConfig = KeypointProviderConfig(kind="heuristic"), hand_side: str = "right", image_id: str = "") -> KeypointSet:
    """Nine keypoints of an open hand; left hands are mirrored, detected, and mirrored back."""
    pixels = img.pixels
    if hand_side == "left":
        pts = _detect_right(pixels[:, ::-1], cfg)
        pts = apply_h(mirror_matrix(img.width), pts)
    else:
        pts = _detect_right(pixels, cfg)
    kp = KeypointSet(pts, hand_side, image_id)
    kp.check_bounds(img.width, img.height)
    return kp


def provide_keypoints(cfg: KeypointProviderConfig, img: Image, path=None, hand_side: str = "right", image_id: str = "") -> KeypointSet:
    if cfg.kind == "file":
        if path is None:
            raise ValueError("file provider needs a keypoint path")
        return load_keypoints(path)
    return detect_valleys(img, cfg, hand_side, image_id)
