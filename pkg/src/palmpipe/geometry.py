"""Coarse alignment: keypoints -> homography -> warped reference frame -> ROI crop."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._homog import apply_h, dlt
from .errors import DegenerateConfiguration, ParseError, SchemaViolation, SingularHomography
from .imaging import Image, warp_pixels

KEYPOINT_FORMAT = "palmpipe-keypoints/1"

# Index convention shared by detector, generator and keypoint files.
KEYPOINT_NAMES = (
    "valley_index_middle",
    "valley_middle_ring",
    "valley_ring_little",
    "valley_thumb_index",
    "wrist_radial",
    "wrist_ulnar",
    "lateral_radial",
    "lateral_ulnar",
    "palm_center",
)

# Destination points in the 320x320 reference frame (right hand, fingers up,
# thumb on the left). The thumb/index valley sits low on the radial side.
TEMPLATE_POINTS = np.array(
    [
        [136.0, 52.0],
        [180.0, 52.0],
        [222.0, 60.0],
        [68.0, 140.0],
        [112.0, 300.0],
        [208.0, 300.0],
        [30.0, 184.0],
        [290.0, 184.0],
        [160.0, 172.0],
    ]
)

HAND_SIDES = ("left", "right")


def mirror_matrix(width: int) -> np.ndarray:
    """Horizontal flip x -> width - 1 - x as a homography."""
    return np.array([[-1.0, 0.0, width - 1.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class KeypointSet:
    """Nine ordered (x, y) landmarks in source-image pixel coordinates."""

    points: np.ndarray
    hand_side: str = "right"
    image_id: str = ""

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True)
        if pts.shape != (9, 2):
            raise SchemaViolation(f"expected 9 (x, y) points, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ParseError("keypoint coordinates must be finite")
        if self.hand_side not in HAND_SIDES:
            raise SchemaViolation(f"hand_side must be one of {HAND_SIDES}")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __eq__(self, other):
        if not isinstance(other, KeypointSet):
            return NotImplemented
        return (
            self.hand_side == other.hand_side
            and self.image_id == other.image_id
            and np.array_equal(self.points, other.points)
        )

    def check_bounds(self, width: int, height: int, margin: float = 0.1) -> None:
        mx, my = margin * width, margin * height
        x, y = self.points[:, 0], self.points[:, 1]
        if x.min() < -mx or x.max() > width - 1 + mx or y.min() < -my or y.max() > height - 1 + my:
            raise SchemaViolation("keypoints fall outside the image rectangle plus margin")

    def mirrored(self, width: int) -> "KeypointSet":
        """Keypoints of the horizontally flipped image, with the hand side swapped."""
        pts = self.points.copy()
        pts[:, 0] = width - 1 - pts[:, 0]
        other = "left" if self.hand_side == "right" else "right"
        return KeypointSet(pts, other, self.image_id)

    def to_dict(self) -> dict:
        return {
            "format": KEYPOINT_FORMAT,
            "image_id": self.image_id,
            "hand_side": self.hand_side,
            "points": [[float(x), float(y)] for x, y in self.points],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KeypointSet":
        if not isinstance(d, dict) or "points" not in d:
            raise ParseError("keypoint record needs a 'points' field")
        pts = d["points"]
        if not isinstance(pts, list) or not all(isinstance(p, list) and len(p) == 2 for p in pts):
            raise ParseError("'points' must be a list of [x, y] pairs")
        try:
            arr = np.array(pts, dtype=np.float64).reshape(-1, 2)
        except (TypeError, ValueError) as exc:
            raise ParseError(f"non-numeric keypoint coordinate: {exc}") from exc
        if not np.all(np.isfinite(arr)):
            raise ParseError("keypoint coordinates must be finite")
        if len(arr) != 9:
            raise SchemaViolation(f"expected 9 points, got {len(arr)}")
        return cls(arr, str(d.get("hand_side", "right")), str(d.get("image_id", "")))


def save_keypoints(kp: KeypointSet, path) -> None:
    Path(path).write_text(json.dumps(kp.to_dict(), indent=2) + "\n", encoding="utf-8")


def load_keypoints(path) -> KeypointSet:
    try:
        # NaN/Infinity literals are rejected rather than silently parsed.
        d = json.loads(Path(path).read_text(encoding="utf-8"), parse_constant=_reject_constant)
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot parse keypoint file {path}: {exc}") from exc
    return KeypointSet.from_dict(d)


def _reject_constant(name):
    raise ParseError(f"non-finite literal {name} in keypoint file")


@dataclass(frozen=True, eq=False)
class Homography:
    """3x3 projective transform normalised so that the bottom-right entry is 1."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64, copy=True)
        if m.shape != (3, 3) or not np.all(np.isfinite(m)):
            raise SingularHomography("homography must be a finite 3x3 matrix")
        if abs(m[2, 2]) < 1e-15:
            raise SingularHomography("bottom-right entry is zero")
        m = m / m[2, 2]
        if abs(np.linalg.det(m)) <= 1e-12:
            raise SingularHomography("homography is not invertible")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "Homography":
        return cls(np.array([[1.0, 0, tx], [0, 1.0, ty], [0, 0, 1.0]]))

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))

    def apply(self, points) -> np.ndarray:
        return apply_h(self.matrix, points)

    def __matmul__(self, other: "Homography") -> "Homography":
        return Homography(self.matrix @ other.matrix)


@dataclass(frozen=True, eq=False)
class CanonicalTemplate:
    destination_points: np.ndarray = field(default_factory=lambda: TEMPLATE_POINTS.copy())
    frame_size: int = 320
    crop_size: int = 224
    crop_origin: tuple[int, int] = (48, 48)

    def __post_init__(self):
        d = np.array(self.destination_points, dtype=np.float64)
        if d.shape != (9, 2):
            raise SchemaViolation("template needs 9 destination points")
        ox, oy = self.crop_origin
        if ox < 0 or oy < 0 or ox + self.crop_size > self.frame_size or oy + self.crop_size > self.frame_size:
            raise ValueError("crop window must lie inside the reference frame")
        for idx in itertools.combinations(range(9), 5):
            if _collinear(d[list(idx)]):
                raise DegenerateConfiguration(f"template points {idx} are collinear")
        d.setflags(write=False)
        object.__setattr__(self, "destination_points", d)

    @property
    def crop_corners(self) -> np.ndarray:
        ox, oy = self.crop_origin
        e = self.crop_size - 1
        return np.array([[ox, oy], [ox + e, oy], [ox + e, oy + e], [ox, oy + e]], dtype=np.float64)


def _collinear(pts: np.ndarray, tol: float = 1e-6) -> bool:
    c = pts - pts.mean(axis=0)
    s = np.linalg.svd(c, compute_uv=False)
    return s[1] <= tol * max(s[0], 1.0)


DEFAULT_TEMPLATE = CanonicalTemplate()


def estimate_homography(K: KeypointSet, D: CanonicalTemplate = DEFAULT_TEMPLATE) -> Homography:
    """Least-squares DLT homography taking keypoint i onto destination point i."""
    return Homography(dlt(K.points, D.destination_points))


def _as_matrix(H) -> np.ndarray:
    if isinstance(H, Homography):
        return H.matrix
    m = np.asarray(H, dtype=np.float64)
    if m.shape != (3, 3) or not np.all(np.isfinite(m)) or abs(np.linalg.det(m)) <= 1e-12:
        raise SingularHomography("homography is not invertible")
    return m


def warp_image(img: Image, H, out_size) -> Image:
    """Inverse-map every output pixel through H⁻¹; uncovered pixels are 0."""
    m = _as_matrix(H)
    ow, oh = (out_size, out_size) if isinstance(out_size, int) else out_size
    return Image.from_array(warp_pixels(img.pixels, m, (oh, ow)))


def alignment_homography(img_width: int, K: KeypointSet, template: CanonicalTemplate = DEFAULT_TEMPLATE) -> Homography:
    """Homography from source-image pixels into the reference frame.

    Left hands are mirrored first so one right-hand template serves both;
    the flip is folded into the returned matrix.
    """
    if K.hand_side == "left":
        flipped = K.mirrored(img_width)
        return estimate_homography(flipped, template) @ Homography(mirror_matrix(img_width))
    return estimate_homography(K, template)


def coarse_align(img: Image, K: KeypointSet, template: CanonicalTemplate = DEFAULT_TEMPLATE) -> tuple[Image, Homography]:
    K.check_bounds(img.width, img.height)
    H = alignment_homography(img.width, K, template)
    frame = warp_image(img, H, template.frame_size)
    ox, oy = template.crop_origin
    n = template.crop_size
    return Image(frame.pixels[oy : oy + n, ox : ox + n]), H


def extract_roi(img: Image, K: KeypointSet, template: CanonicalTemplate = DEFAULT_TEMPLATE) -> Image:
    """The coarsely aligned crop_size x crop_size palm ROI."""
    return coarse_align(img, K, template)[0]


def extract_roi_context(img: Image, K: KeypointSet, template: CanonicalTemplate = DEFAULT_TEMPLATE, pad: int = 16) -> Image:
    """The ROI grown by ``pad`` pixels per side, cut from the same aligned frame."""
    K.check_bounds(img.width, img.height)
    ox, oy = template.crop_origin
    n = template.crop_size + 2 * pad
    shift = Homography.translation(pad - ox, pad - oy)
    return warp_image(img, shift @ alignment_homography(img.width, K, template), n)


def project_roi_polygon(H, template: CanonicalTemplate = DEFAULT_TEMPLATE) -> np.ndarray:
    """Crop-window corners mapped back into source-image coordinates."""
    m = _as_matrix(H)
    return apply_h(np.linalg.inv(m), template.crop_corners)


def reprojection_errors(H, src, dst) -> np.ndarray:
    return np.linalg.norm(apply_h(_as_matrix(H), src) - np.asarray(dst, dtype=float), axis=1)


def pose_condition_number(H: np.ndarray, src_size: float, dst_size: float) -> float:
    """Condition number of H expressed in frame coordinates scaled to [-1, 1]."""
    def norm(size):
        h = size / 2.0
        return np.array([[1 / h, 0, -1.0], [0, 1 / h, -1.0], [0, 0, 1.0]])

    Hn = norm(dst_size) @ np.asarray(H, dtype=float) @ np.linalg.inv(norm(src_size))
    return float(np.linalg.cond(Hn / Hn[2, 2]))


def similarity_matrix(scale: float, angle_deg: float, tx: float, ty: float) -> np.ndarray:
    t = math.radians(angle_deg)
    c, s = scale * math.cos(t), scale * math.sin(t)
    return np.array([[c, -s, tx], [s, c, ty], [0.0, 0.0, 1.0]])
