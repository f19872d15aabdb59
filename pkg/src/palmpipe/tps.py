"""Thin-plate-spline fine re-alignment of coarsely aligned ROIs.

Control points come from patch normalised cross-correlation between the
probe ROI and the ROI it is compared against; the fitted spline maps probe
coordinates onto reference coordinates, and ``apply_tps`` resamples the probe
into the reference frame.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    CollinearPoints,
    DimensionMismatch,
    DuplicateSourcePoints,
    InsufficientPoints,
    PalmError,
)
from .imaging import Image, sample

GRID_N = 6
RADIUS = 10
LAMBDA = 0.5
PATCH = 21
CONFIDENCE_MIN = 0.5
MIN_NODES = 8
FIELD_STEP = 4


def tps_kernel(r: np.ndarray) -> np.ndarray:
    """U(r) = r² log r with U(0) = 0."""
    r = np.asarray(r, dtype=np.float64)
    out = np.zeros_like(r)
    nz = r > 0
    out[nz] = r[nz] ** 2 * np.log(r[nz])
    return out


def _pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))


@dataclass(frozen=True, eq=False)
class Correspondences:
    source: np.ndarray
    target: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.source, dtype=np.float64).reshape(-1, 2)
        t = np.asarray(self.target, dtype=np.float64).reshape(-1, 2)
        c = np.asarray(self.confidence, dtype=np.float64).reshape(-1)
        if not (len(s) == len(t) == len(c)):
            raise DimensionMismatch("source, target and confidence lengths differ")
        if np.any((c < 0) | (c > 1)):
            raise ValueError("confidences must lie in [0, 1]")
        object.__setattr__(self, "source", s)
        object.__setattr__(self, "target", t)
        object.__setattr__(self, "confidence", c)

    @classmethod
    def exact(cls, source, target) -> "Correspondences":
        source = np.asarray(source, dtype=np.float64)
        return cls(source, target, np.ones(len(source)))

    def __len__(self):
        return len(self.source)

    @property
    def displacement(self) -> np.ndarray:
        return self.target - self.source


@dataclass(frozen=True, eq=False)
class TpsWarp:
    """f(p) = [1, x, y] · affine + Σᵢ U(|p - sᵢ|) · weightsᵢ."""

    source_points: np.ndarray
    weights: np.ndarray
    affine: np.ndarray
    lam: float = 0.0

    def __call__(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        P = np.column_stack([np.ones(len(p)), p])
        return P @ self.affine + tps_kernel(_pairwise(p, self.source_points)) @ self.weights

    @property
    def target_points(self) -> np.ndarray:
        return self(self.source_points)

    @classmethod
    def identity(cls, source_points) -> "TpsWarp":
        s = np.asarray(source_points, dtype=np.float64)
        return cls(s, np.zeros_like(s), np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), 0.0)

    def to_dict(self) -> dict:
        return {
            "source_points": self.source_points.tolist(),
            "weights": self.weights.tolist(),
            "affine": self.affine.tolist(),
            "lambda": self.lam,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TpsWarp":
        return cls(
            np.array(d["source_points"], dtype=np.float64).reshape(-1, 2),
            np.array(d["weights"], dtype=np.float64).reshape(-1, 2),
            np.array(d["affine"], dtype=np.float64).reshape(3, 2),
            float(d["lambda"]),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict())


def fit_tps(corr: Correspondences, lam: float = LAMBDA, min_confidence: float = CONFIDENCE_MIN) -> TpsWarp:
    """Regularised TPS through the confident correspondences.

    Solves [[K + λI, P], [Pᵀ, 0]] [w; a] = [targets; 0]; λ = 0 interpolates.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    keep = corr.confidence >= min_confidence
    src, tgt = corr.source[keep], corr.target[keep]
    n = len(src)
    if n < 3:
        raise InsufficientPoints(f"{n} usable control points, need at least 3")
    d = _pairwise(src, src)
    if np.any(d[np.triu_indices(n, 1)] < 1e-9):
        raise DuplicateSourcePoints("two control points share a source location")
    P = np.column_stack([np.ones(n), src])
    sv = np.linalg.svd(src - src.mean(axis=0), compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1.0):
        raise CollinearPoints("control points are collinear")

    K = tps_kernel(d)
    L = np.zeros((n + 3, n + 3))
    L[:n, :n] = K + lam * np.eye(n)
    L[:n, n:] = P
    L[n:, :n] = P.T
    rhs = np.zeros((n + 3, 2))
    rhs[:n] = tgt
    sol = np.linalg.solve(L, rhs)
    return TpsWarp(src.copy(), sol[:n], sol[n:], float(lam))


def bending_energy(warp: TpsWarp) -> float:
    """Σ over output coordinates of wᵀ K w; zero exactly for affine fields."""
    K = tps_kernel(_pairwise(warp.source_points, warp.source_points))
    w = warp.weights
    return float(max(0.0, np.einsum("ic,ij,jc->", w, K, w)))


def invert(warp: TpsWarp) -> TpsWarp:
    """Approximate inverse: refit with source and mapped target swapped."""
    tgt = warp.target_points
    return fit_tps(Correspondences.exact(tgt, warp.source_points), warp.lam)


def mapped_grid(warp: TpsWarp, shape: tuple[int, int], step: int = FIELD_STEP) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate ``warp`` on a coarse lattice and bilinearly spread the displacement to every pixel."""
    h, w = shape
    mx = max(2, int(np.ceil((w - 1) / step)) + 1)
    my = max(2, int(np.ceil((h - 1) / step)) + 1)
    lx = np.linspace(0.0, w - 1.0, mx)
    ly = np.linspace(0.0, h - 1.0, my)
    gx, gy = np.meshgrid(lx, ly)
    lattice = np.column_stack([gx.ravel(), gy.ravel()])
    disp = (warp(lattice) - lattice).reshape(my, mx, 2)
    # bilinear upsampling of a lattice is separable: Ry @ D @ Rx^T per coordinate
    Ry = _interp_matrix(h, my)
    Rx = _interp_matrix(w, mx)
    dx = Ry @ disp[..., 0] @ Rx.T
    dy = Ry @ disp[..., 1] @ Rx.T
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return xs + dx, ys + dy


def _interp_matrix(n: int, m: int) -> np.ndarray:
    """(n, m) weights taking m lattice samples spanning [0, n-1] to n pixels."""
    f = np.arange(n) * (m - 1) / max(n - 1, 1)
    i0 = np.minimum(np.floor(f).astype(int), m - 2)
    t = f - i0
    R = np.zeros((n, m))
    R[np.arange(n), i0] = 1.0 - t
    R[np.arange(n), i0 + 1] += t
    return R


def apply_tps(img: Image, warp: TpsWarp, fill: float | str = 0.0) -> Image:
    """Resample ``img`` so output point q shows the input at warp⁻¹(q).

    Points mapped outside the image get ``fill``; ``fill="edge"`` clamps them
    to the nearest border pixel instead.
    """
    return resample_tps(img, warp, img.shape, 0, fill)


def resample_tps(source: Image, warp: TpsWarp, out_shape: tuple[int, int], offset: int = 0, fill: float | str = 0.0) -> Image:
    """Like apply_tps, but read from ``source`` whose pixel (offset, offset) is output (0, 0).

    A source larger than the output (a padded crop around it) lets the warp
    pull real content into the border instead of fill.
    """
    inv = invert(warp)
    sx, sy = mapped_grid(inv, out_shape)
    sx = sx + offset
    sy = sy + offset
    if fill == "edge":
        sx = np.clip(sx, 0.0, source.width - 1.0)
        sy = np.clip(sy, 0.0, source.height - 1.0)
        fill = 0.0
    return Image.from_array(sample(source.pixels, sx, sy, float(fill)))


# ---------------------------------------------------------- correspondence

def grid_nodes(size: int, grid_n: int, margin: int) -> np.ndarray:
    lo, hi = margin, size - 1 - margin
    if hi < lo:
        raise ValueError("search radius too large for the image")
    return np.round(np.linspace(lo, hi, grid_n)).astype(int)


def _window_sums(a: np.ndarray, k: int) -> np.ndarray:
    """Sums over every k x k window of each (N, H, W) slice."""
    c = np.pad(a, ((0, 0), (1, 0), (1, 0))).cumsum(1).cumsum(2)
    return c[:, k:, k:] - c[:, :-k, k:] - c[:, k:, :-k] + c[:, :-k, :-k]


def find_correspondences(
    probe: Image,
    reference: Image,
    grid_n: int = GRID_N,
    radius: int = RADIUS,
    patch: int = PATCH,
) -> Correspondences:
    """Block-match interior grid nodes of ``probe`` against ``reference``.

    Confidence is the NCC peak clamped to [0, 1]; textureless probe patches
    get confidence 0. Peaks below 1 are refined to sub-pixel with a
    per-axis parabola.
    """
    if probe.shape != reference.shape:
        raise DimensionMismatch(f"probe {probe.shape} vs reference {reference.shape}")
    if grid_n < 3 or radius < 1:
        raise ValueError("grid_n must be >= 3 and radius >= 1")
    h, w = probe.shape
    half = patch // 2
    m = half + radius
    xs = grid_nodes(w, grid_n, m)
    ys = grid_nodes(h, grid_n, m)
    nodes = np.array([(x, y) for y in ys for x in xs], dtype=np.float64)
    N = len(nodes)

    P = np.stack([probe.pixels[y - half : y + half + 1, x - half : x + half + 1] for x, y in nodes.astype(int)])
    R = np.stack([reference.pixels[y - m : y + m + 1, x - m : x + m + 1] for x, y in nodes.astype(int)])

    Pc = P - P.mean(axis=(1, 2), keepdims=True)
    pnorm = np.sqrt((Pc**2).sum(axis=(1, 2)))
    textured = pnorm > 1e-6 * patch
    Pn = Pc / np.where(textured, pnorm, 1.0)[:, None, None]

    views = sliding_window_view(R, (patch, patch), axis=(1, 2))
    cross = np.einsum("nabij,nij->nab", views, Pn, optimize=True)
    area = patch * patch
    s1 = _window_sums(R, patch)
    s2 = _window_sums(R * R, patch)
    rvar = np.maximum(s2 - s1 * s1 / area, 0.0)
    rnorm = np.sqrt(rvar)
    ncc = np.where(rnorm > 1e-6 * patch, cross / np.where(rnorm > 0, rnorm, 1.0), 0.0)

    span = 2 * radius + 1
    flat = ncc.reshape(N, -1)
    best = flat.argmax(axis=1)
    oy, ox = np.divmod(best, span)
    peak = flat[np.arange(N), best]

    sub = np.zeros((N, 2))
    for i in range(N):
        if peak[i] >= 1.0 - 1e-9:
            continue
        sub[i, 0] = _parabola(ncc[i, oy[i], :], ox[i])
        sub[i, 1] = _parabola(ncc[i, :, ox[i]], oy[i])

    offset = np.column_stack([ox - radius, oy - radius]).astype(np.float64) + sub
    conf = np.where(textured, np.clip(peak, 0.0, 1.0), 0.0)
    offset[~textured] = 0.0
    return Correspondences(nodes, nodes + offset, conf)


def _parabola(profile: np.ndarray, i: int) -> float:
    if i <= 0 or i >= len(profile) - 1:
        return 0.0
    l, c, r = profile[i - 1], profile[i], profile[i + 1]
    denom = l - 2.0 * c + r
    if denom >= 0:
        return 0.0
    return float(np.clip(0.5 * (l - r) / denom, -0.5, 0.5))


@dataclass(frozen=True)
class RealignConfig:
    grid_n: int = GRID_N
    radius: int = RADIUS
    lam: float = LAMBDA
    min_nodes: int = MIN_NODES
    min_confidence: float = CONFIDENCE_MIN


def realign(
    probe: Image,
    reference: Image,
    cfg: RealignConfig = RealignConfig(),
    fill: float | str = 0.0,
    context: Image | None = None,
) -> tuple[Image, TpsWarp | None]:
    """Warp ``probe`` onto ``reference``; pass it through unchanged when too few nodes match.

    ``context`` is an optional padded crop centred on the probe; the warped
    output is then sampled from it.
    """
    corr = find_correspondences(probe, reference, cfg.grid_n, cfg.radius)
    if int((corr.confidence >= cfg.min_confidence).sum()) < cfg.min_nodes:
        return probe, None
    try:
        warp = fit_tps(corr, cfg.lam, cfg.min_confidence)
    except PalmError:
        return probe, None
    if context is None:
        return apply_tps(probe, warp, fill), warp
    offset = (context.width - probe.width) // 2
    return resample_tps(context, warp, probe.shape, offset, fill), warp
