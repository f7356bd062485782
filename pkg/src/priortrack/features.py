"""2D feature observations: FAST-9 corners, pyramidal patch tracking, mask filtering.

Pixel convention: ``(x, y)`` = (column, row), centers at integer coordinates.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

# Bresenham circle of radius 3, clockwise from 12 o'clock, as (dx, dy)
CIRCLE = np.array(
    [
        (0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
        (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3),
    ]
)
ARC = 9
PATCH_RADIUS = 7
DESCRIPTOR_BYTES = 32


@dataclass(frozen=True)
class Observation:
    frame_id: int
    pixel: tuple
    feature_id: Optional[int] = None
    descriptor: Optional[bytes] = None
    score: float = 0.0


@dataclass(eq=False)
class FrameObservations:
    """All feature measurements of one frame, stored column-wise."""

    frame_id: int
    timestamp: float
    pixels: np.ndarray
    feature_ids: np.ndarray
    scores: np.ndarray = None
    descriptors: Optional[np.ndarray] = None
    source: str = "simulator"
    image: Optional[np.ndarray] = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=float).reshape(-1, 2)
        n = len(self.pixels)
        if self.feature_ids is None:
            self.feature_ids = np.full(n, -1, dtype=np.int64)
        self.feature_ids = np.asarray(self.feature_ids, dtype=np.int64).reshape(n)
        self.scores = np.zeros(n) if self.scores is None else np.asarray(self.scores, dtype=float).reshape(n)
        if self.source not in ("detector", "simulator"):
            raise ValueError(f"unknown source {self.source!r}")
        ids = self.feature_ids[self.feature_ids >= 0]
        if len(np.unique(ids)) != len(ids):
            raise ValueError(f"frame {self.frame_id}: duplicate feature ids")

    def __len__(self) -> int:
        return len(self.pixels)

    @property
    def observations(self) -> list[Observation]:
        out = []
        for i in range(len(self)):
            fid = int(self.feature_ids[i])
            desc = None if self.descriptors is None else bytes(self.descriptors[i])
            out.append(Observation(self.frame_id, tuple(self.pixels[i]), fid if fid >= 0 else None, desc, float(self.scores[i])))
        return out

    def subset(self, keep) -> "FrameObservations":
        keep = np.asarray(keep)
        return FrameObservations(
            self.frame_id, self.timestamp, self.pixels[keep], self.feature_ids[keep], self.scores[keep],
            None if self.descriptors is None else self.descriptors[keep], self.source, self.image,
        )

    @classmethod
    def from_observations(cls, frame_id: int, timestamp: float, obs: list[Observation], source="simulator"):
        pix = np.array([o.pixel for o in obs], dtype=float).reshape(-1, 2)
        ids = np.array([-1 if o.feature_id is None else o.feature_id for o in obs], dtype=np.int64)
        sc = np.array([o.score for o in obs], dtype=float)
        desc = None
        if obs and all(o.descriptor is not None for o in obs):
            desc = np.array([np.frombuffer(o.descriptor, dtype=np.uint8) for o in obs])
        return cls(frame_id, timestamp, pix, ids, sc, desc, source)


def filter_by_mask(frame: FrameObservations, mask) -> FrameObservations:
    """Keep observations whose pixel lies on a set mask bit (order preserved)."""
    if mask is None:
        return frame
    return frame.subset(mask.contains(frame.pixels))


# ---------------------------------------------------------------------------
# FAST-9


def to_gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim == 2:
        return image.astype(np.float64)
    rgb = image[..., :3].astype(np.float64)
    return rgb[..., 0] * 0.299 + rgb[..., 1] * 0.587 + rgb[..., 2] * 0.114


def fast_scores(image: np.ndarray, threshold: float) -> np.ndarray:
    """Segment-test score per pixel (0 where the pixel is not a corner)."""
    I = np.asarray(image, dtype=np.float64)
    H, W = I.shape
    if H < 7 or W < 7:
        raise ValueError("image must be at least 7x7")
    c = I[3 : H - 3, 3 : W - 3]
    ring = np.stack([I[3 + dy : H - 3 + dy, 3 + dx : W - 3 + dx] for dx, dy in CIRCLE])
    diff = ring - c
    bright = diff > threshold
    dark = diff < -threshold
    out = np.zeros((H, W))
    corner = np.zeros(c.shape, dtype=bool)
    for flags in (bright, dark):
        wrapped = np.concatenate([flags, flags[: ARC - 1]]).astype(np.int8)
        cs = np.concatenate([np.zeros((1,) + c.shape, np.int16), np.cumsum(wrapped, axis=0, dtype=np.int16)])
        runs = cs[ARC:] - cs[:-ARC]
        corner |= (runs == ARC).any(axis=0)
    exceed = np.abs(diff) - threshold
    s_bright = np.where(bright, exceed, 0.0).sum(0)
    s_dark = np.where(dark, exceed, 0.0).sum(0)
    out[3 : H - 3, 3 : W - 3] = np.where(corner, np.maximum(s_bright, s_dark), 0.0)
    return out


def _nms(score: np.ndarray) -> np.ndarray:
    """3x3 non-maximum suppression; ties go to the earliest pixel in row-major order."""
    H, W = score.shape
    pad = np.pad(score, 1, constant_values=-np.inf)
    keep = score > 0
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dx == 0 and dy == 0:
                continue
            nb = pad[1 + dy : 1 + dy + H, 1 + dx : 1 + dx + W]
            earlier = dy < 0 or (dy == 0 and dx < 0)
            keep &= (score > nb) if earlier else (score >= nb)
    return keep


def detect_corners(image: np.ndarray, max_count: int = 600, threshold: float = 20.0, mask=None):
    """FAST-9 corners, NMS, optional mask; top ``max_count`` by score (ties row-major).

    Returns ``(pixels, scores)`` with pixels as (x, y) float pairs.
    """
    I = to_gray(image)
    score = fast_scores(I, threshold)
    keep = _nms(score)
    if mask is not None:
        keep &= mask.bits if hasattr(mask, "bits") else np.asarray(mask, dtype=bool)
    ys, xs = np.nonzero(keep)
    s = score[ys, xs]
    order = np.lexsort((xs, ys, -s))[:max_count]
    return np.stack([xs[order], ys[order]], axis=1).astype(float), s[order]


def select_bucketed(pixels: np.ndarray, scores: np.ndarray, width: int, height: int, budget: int, grid: int = 8) -> np.ndarray:
    """Indices of up to ``budget`` features spread over a ``grid x grid`` bucketing.

    Cells are visited round-robin: every cell gives its best feature, then its
    second best, and so on; within a round, stronger features come first.
    """
    n = len(pixels)
    if n <= budget:
        return np.arange(n)
    p = np.asarray(pixels)
    cx = np.clip((p[:, 0] * grid / width).astype(int), 0, grid - 1)
    cy = np.clip((p[:, 1] * grid / height).astype(int), 0, grid - 1)
    cell = cy * grid + cx
    order = np.lexsort((np.arange(n), -np.asarray(scores), cell))
    # rank of each feature within its cell
    sorted_cells = cell[order]
    starts = np.searchsorted(sorted_cells, sorted_cells, side="left")
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n) - starts
    pick = np.lexsort((np.arange(n), -np.asarray(scores), rank))[:budget]
    return np.sort(pick)


# ---------------------------------------------------------------------------
# pyramidal patch tracker


def _pyramid(image: np.ndarray, levels: int) -> list[np.ndarray]:
    pyr = [np.asarray(image, dtype=np.float64)]
    for _ in range(1, levels):
        pyr.append(gaussian_filter(pyr[-1], 1.0)[::2, ::2])
    return pyr


def track_features(
    prev_image: np.ndarray,
    next_image: np.ndarray,
    prev_pixels: np.ndarray,
    levels: int = 3,
    iterations: int = 20,
    max_ssd: float = 400.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Translational 15x15 patch alignment over an image pyramid.

    Returns new pixels (N,2) and a ``lost`` flag per input point; lost points
    keep NaN coordinates.
    """
    I0 = to_gray(prev_image)
    I1 = to_gray(next_image)
    if I0.shape != I1.shape:
        raise ValueError("images differ in size")
    H, W = I0.shape
    p0 = np.asarray(prev_pixels, dtype=float).reshape(-1, 2)
    n = len(p0)
    if n == 0:
        return np.zeros((0, 2)), np.zeros(0, dtype=bool)
    P0, P1 = _pyramid(I0, levels), _pyramid(I1, levels)
    r = PATCH_RADIUS
    oy, ox = np.mgrid[-r : r + 1, -r : r + 1]
    ox = ox.ravel().astype(float)
    oy = oy.ravel().astype(float)
    guess = np.zeros((n, 2))
    valid = np.ones(n, dtype=bool)
    for lvl in range(levels - 1, -1, -1):
        A, B = P0[lvl], P1[lvl]
        s = 2.0**lvl
        c = p0 / s
        gy, gx = np.gradient(A)
        xs = c[:, :1] + ox
        ys = c[:, 1:] + oy
        T = map_coordinates(A, [ys.ravel(), xs.ravel()], order=1, mode="nearest").reshape(n, -1)
        Ix = map_coordinates(gx, [ys.ravel(), xs.ravel()], order=1, mode="nearest").reshape(n, -1)
        Iy = map_coordinates(gy, [ys.ravel(), xs.ravel()], order=1, mode="nearest").reshape(n, -1)
        G = np.stack([np.stack([(Ix * Ix).sum(1), (Ix * Iy).sum(1)], -1), np.stack([(Ix * Iy).sum(1), (Iy * Iy).sum(1)], -1)], 1)
        det = G[:, 0, 0] * G[:, 1, 1] - G[:, 0, 1] ** 2
        ok = det > 1e-6
        if lvl == 0:
            valid &= ok
        det = np.where(ok, det, 1.0)
        Ginv = np.stack([np.stack([G[:, 1, 1], -G[:, 0, 1]], -1), np.stack([-G[:, 1, 0], G[:, 0, 0]], -1)], 1) / det[:, None, None]
        d = np.zeros((n, 2))
        active = ok.copy()
        for _ in range(iterations):
            if not active.any():
                break
            q = c + guess + d
            J = map_coordinates(B, [(q[:, 1:] + oy).ravel(), (q[:, :1] + ox).ravel()], order=1, mode="nearest").reshape(n, -1)
            e = T - J
            b = np.stack([(e * Ix).sum(1), (e * Iy).sum(1)], -1)
            step = np.einsum("nij,nj->ni", Ginv, b)
            step[~active] = 0.0
            d += step
            active &= np.linalg.norm(step, axis=1) > 0.01
        guess = guess + d
        if lvl > 0:
            guess *= 2.0
    new = p0 + guess
    J = map_coordinates(I1, [(new[:, 1:] + oy).ravel(), (new[:, :1] + ox).ravel()], order=1, mode="nearest").reshape(n, -1)
    T = map_coordinates(I0, [(p0[:, 1:] + oy).ravel(), (p0[:, :1] + ox).ravel()], order=1, mode="nearest").reshape(n, -1)
    ssd = ((T - J) ** 2).mean(1)
    inside = (new[:, 0] - r >= 0) & (new[:, 0] + r <= W - 1) & (new[:, 1] - r >= 0) & (new[:, 1] + r <= H - 1)
    inside &= (p0[:, 0] - r >= 0) & (p0[:, 0] + r <= W - 1) & (p0[:, 1] - r >= 0) & (p0[:, 1] + r <= H - 1)
    lost = ~(valid & inside & (ssd <= max_ssd) & np.isfinite(new).all(1))
    new[lost] = np.nan
    return new, lost


# ---------------------------------------------------------------------------
# binary descriptors


def _pattern() -> np.ndarray:
    rng = np.random.default_rng(0x5EED)
    return rng.integers(-PATCH_RADIUS, PATCH_RADIUS + 1, size=(DESCRIPTOR_BYTES * 8, 4))


_PATTERN = _pattern()


def compute_descriptors(image: np.ndarray, pixels: np.ndarray) -> np.ndarray:
    """256-bit intensity-comparison signatures on the smoothed 15x15 patch."""
    I = gaussian_filter(to_gray(image), 2.0)
    p = np.rint(np.asarray(pixels, dtype=float).reshape(-1, 2)).astype(int)
    H, W = I.shape
    x = np.clip(p[:, :1], 0, W - 1)
    y = np.clip(p[:, 1:], 0, H - 1)
    pa = I[np.clip(y + _PATTERN[:, 1], 0, H - 1), np.clip(x + _PATTERN[:, 0], 0, W - 1)]
    pb = I[np.clip(y + _PATTERN[:, 3], 0, H - 1), np.clip(x + _PATTERN[:, 2], 0, W - 1)]
    return np.packbits(pa < pb, axis=1)


def hamming(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise Hamming distances between two descriptor arrays (Na,32) x (Nb,32)."""
    x = np.bitwise_xor(a[:, None, :], b[None, :, :])
    return np.unpackbits(x, axis=2).sum(2)


# ---------------------------------------------------------------------------
# image sequences


def read_image(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im)


def write_image(path, image: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path)


def image_sequence(directory) -> Iterator[tuple[int, np.ndarray]]:
    """Numbered PNG/PPM/PGM frames of a directory, in numeric order."""
    files = [p for p in Path(directory).iterdir() if p.suffix.lower() in (".png", ".ppm", ".pgm")]

    def num(p):
        m = re.findall(r"\d+", p.stem)
        return int(m[-1]) if m else -1

    for p in sorted(files, key=lambda p: (num(p), p.name)):
        yield num(p), read_image(p)


class ImageFrontend:
    """Turns an image sequence into :class:`FrameObservations` with persistent track ids.

    Tracks from the previous frame are followed with :func:`track_features`; new
    FAST corners (inside ``mask`` when given) farther than ``min_distance`` from
    live tracks start new ids.
    """

    def __init__(self, budget: int = 600, threshold: float = 20.0, min_distance: float = 8.0, max_ssd: float = 400.0):
        self.budget = budget
        self.threshold = threshold
        self.min_distance = min_distance
        self.max_ssd = max_ssd
        self._prev: Optional[np.ndarray] = None
        self._pixels = np.zeros((0, 2))
        self._ids = np.zeros(0, dtype=np.int64)
        self._scores = np.zeros(0)
        self._next_id = 0

    def observe(self, frame_id: int, timestamp: float, image: np.ndarray, mask=None) -> FrameObservations:
        gray = to_gray(image)
        pix, ids, sc = np.zeros((0, 2)), np.zeros(0, dtype=np.int64), np.zeros(0)
        if self._prev is not None and len(self._pixels):
            new, lost = track_features(self._prev, gray, self._pixels, max_ssd=self.max_ssd)
            keep = ~lost
            pix, ids, sc = new[keep], self._ids[keep], self._scores[keep]
        room = self.budget - len(pix)
        if room > 0:
            corners, scores = detect_corners(gray, 4 * self.budget, self.threshold, mask)
            if len(pix) and len(corners):
                d = np.min(np.linalg.norm(corners[:, None, :] - pix[None, :, :], axis=2), axis=1)
                far = d > self.min_distance
                corners, scores = corners[far], scores[far]
            H, W = gray.shape
            pick = select_bucketed(corners, scores, W, H, room)
            corners, scores = corners[pick], scores[pick]
            new_ids = np.arange(self._next_id, self._next_id + len(corners), dtype=np.int64)
            self._next_id += len(corners)
            pix = np.vstack([pix, corners])
            ids = np.concatenate([ids, new_ids])
            sc = np.concatenate([sc, scores])
        self._prev = gray
        self._pixels, self._ids, self._scores = pix, ids, sc
        desc = compute_descriptors(gray, pix) if len(pix) else np.zeros((0, DESCRIPTOR_BYTES), dtype=np.uint8)
        return FrameObservations(frame_id, timestamp, pix, ids, sc, desc, "detector", np.asarray(image))

    def retain(self, feature_ids) -> None:
        """Stop following tracks that the tracker discarded."""
        keep = np.isin(self._ids, np.asarray(feature_ids, dtype=np.int64))
        self._pixels, self._ids, self._scores = self._pixels[keep], self._ids[keep], self._scores[keep]
