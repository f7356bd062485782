"""Prior shape: triangle mesh I/O, closest-point queries, mask/depth rendering and texturing."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import maximum_filter1d
from scipy.spatial import cKDTree

from . import raster
from .geometry import Intrinsics, Pose, rays_through_pixels

log = logging.getLogger(__name__)

MIN_FACE_AREA = 1e-12
MAX_TEXTURE_WEIGHT = 10.0


class MeshError(Exception):
    pass


class MeshParseError(MeshError):
    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.line_no = line_no


class EmptyMesh(MeshError):
    pass


@dataclass(eq=False)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    face_normals: np.ndarray
    face_colors: np.ndarray
    face_weights: np.ndarray
    dropped_faces: int = 0

    @classmethod
    def from_arrays(cls, vertices, faces, colors=None, drop_degenerate: bool = True) -> "TriangleMesh":
        v = np.ascontiguousarray(vertices, dtype=np.float64).reshape(-1, 3)
        f = np.ascontiguousarray(faces, dtype=np.int64).reshape(-1, 3)
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise MeshError("face index out of range")
        cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        area = 0.5 * np.linalg.norm(cross, axis=1)
        keep = area > MIN_FACE_AREA
        dropped = int((~keep).sum())
        if dropped and not drop_degenerate:
            raise MeshError(f"{dropped} degenerate faces")
        if dropped:
            log.warning("dropped %d degenerate face(s)", dropped)
        f, cross, area = f[keep], cross[keep], area[keep]
        if len(f) == 0:
            raise EmptyMesh("mesh has no non-degenerate faces")
        normals = cross / (2.0 * area[:, None])
        if colors is None:
            c = np.zeros((len(f), 3))
        else:
            c = np.asarray(colors, dtype=np.float64).reshape(-1, 3)[keep]
        return cls(v, f, normals, c, np.zeros(len(f)), dropped)

    @property
    def face_areas(self) -> np.ndarray:
        v, f = self.vertices, self.faces
        return 0.5 * np.linalg.norm(np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]]), axis=1)

    @property
    def total_area(self) -> float:
        return float(self.face_areas.sum())

    @property
    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))

    @property
    def centroid(self) -> np.ndarray:
        """Area-weighted surface centroid."""
        a = self.face_areas
        c = self.vertices[self.faces].mean(axis=1)
        return (a[:, None] * c).sum(0) / a.sum()

    def copy(self) -> "TriangleMesh":
        return TriangleMesh(
            self.vertices.copy(), self.faces.copy(), self.face_normals.copy(),
            self.face_colors.copy(), self.face_weights.copy(), self.dropped_faces,
        )

    def transformed(self, pose: Pose) -> "TriangleMesh":
        m = self.copy()
        m.vertices = pose.apply(self.vertices)
        m.face_normals = self.face_normals @ pose.rotation.T
        return m


# ---------------------------------------------------------------------------
# I/O


def load_mesh(path) -> TriangleMesh:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        v, f = _parse_obj(path)
    elif suffix == ".ply":
        v, f = _parse_ply(path)
    else:
        raise MeshError(f"unsupported mesh format: {suffix}")
    if len(v) == 0 or len(f) == 0:
        raise EmptyMesh(f"{path}: no vertices or faces")
    return TriangleMesh.from_arrays(v, f)


def _parse_obj(path: Path):
    verts, faces = [], []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(x) for x in parts[1:4]])
                    if len(verts[-1]) != 3:
                        raise ValueError("vertex needs 3 coordinates")
                elif parts[0] == "f":
                    idx = []
                    for tok in parts[1:]:
                        i = int(tok.split("/")[0])
                        idx.append(i - 1 if i > 0 else len(verts) + i)
                    if len(idx) < 3:
                        raise ValueError("face needs at least 3 vertices")
                    for j in range(1, len(idx) - 1):
                        faces.append([idx[0], idx[j], idx[j + 1]])
            except ValueError as exc:
                raise MeshParseError(path, line_no, str(exc)) from None
    return np.array(verts, dtype=float).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


def _parse_ply(path: Path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise MeshParseError(path, 1, "missing 'ply' magic")
    n_vert = n_face = 0
    vprops: list[str] = []
    current = None
    header_end = None
    for i, line in enumerate(lines[1:], 2):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format" and parts[1] != "ascii":
            raise MeshParseError(path, i, "only ASCII PLY is supported")
        if parts[0] == "element":
            current = parts[1]
            if current == "vertex":
                n_vert = int(parts[2])
            elif current == "face":
                n_face = int(parts[2])
        elif parts[0] == "property" and current == "vertex":
            vprops.append(parts[-1])
        elif parts[0] == "end_header":
            header_end = i
            break
    if header_end is None:
        raise MeshParseError(path, len(lines), "missing end_header")
    try:
        ix = [vprops.index(a) for a in ("x", "y", "z")]
    except ValueError:
        raise MeshParseError(path, header_end, "vertex element lacks x/y/z") from None
    body = lines[header_end:]
    verts, faces = [], []
    for j in range(n_vert):
        try:
            vals = body[j].split()
            verts.append([float(vals[a]) for a in ix])
        except (IndexError, ValueError) as exc:
            raise MeshParseError(path, header_end + j + 1, f"bad vertex record ({exc})") from None
    for j in range(n_face):
        line_no = header_end + n_vert + j + 1
        try:
            vals = body[n_vert + j].split()
            n = int(vals[0])
            idx = [int(x) for x in vals[1 : 1 + n]]
            if len(idx) != n or n < 3:
                raise ValueError("short face record")
        except (IndexError, ValueError) as exc:
            raise MeshParseError(path, line_no, f"bad face record ({exc})") from None
        for a in range(1, n - 1):
            faces.append([idx[0], idx[a], idx[a + 1]])
    return np.array(verts, dtype=float).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


def save_ply(mesh: TriangleMesh, path, with_weights: bool = False) -> None:
    """ASCII PLY with per-face uchar RGB."""
    colors = np.clip(np.rint(mesh.face_colors), 0, 255).astype(int)
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(mesh.vertices)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write(f"element face {len(mesh.faces)}\n")
        fh.write("property list uchar int vertex_indices\n")
        fh.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        if with_weights:
            fh.write("property float weight\n")
        fh.write("end_header\n")
        for v in mesh.vertices:
            fh.write(f"{v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for i, f in enumerate(mesh.faces):
            c = colors[i]
            line = f"3 {f[0]} {f[1]} {f[2]} {c[0]} {c[1]} {c[2]}"
            if with_weights:
                line += f" {mesh.face_weights[i]:g}"
            fh.write(line + "\n")


def save_obj(mesh: TriangleMesh, path) -> None:
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write("v " + " ".join(repr(float(x)) for x in v) + "\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def read_ply_face_colors(path) -> np.ndarray:
    """Per-face RGB written by :func:`save_ply`."""
    lines = Path(path).read_text().splitlines()
    n_vert = n_face = 0
    for i, line in enumerate(lines):
        p = line.split()
        if p[:2] == ["element", "vertex"]:
            n_vert = int(p[2])
        elif p[:2] == ["element", "face"]:
            n_face = int(p[2])
        elif p and p[0] == "end_header":
            start = i + 1 + n_vert
            break
    rows = [lines[start + j].split() for j in range(n_face)]
    return np.array([[int(r[4]), int(r[5]), int(r[6])] for r in rows])


# ---------------------------------------------------------------------------
# builtin shapes


def icosphere(subdivisions: int = 3, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Icosahedron subdivided ``subdivisions`` times (20 * 4**n faces), outward CCW winding."""
    t = (1.0 + math.sqrt(5.0)) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    v = [np.array(p, dtype=float) / np.linalg.norm(p) for p in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = v[a] + v[b]
                v.append(m / np.linalg.norm(m))
                cache[key] = len(v) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    V = np.array(v) * radius + np.asarray(center, dtype=float)
    return TriangleMesh.from_arrays(V, np.array(faces))


def ellipsoid(axes=(1.0, 0.8, 0.6), subdivisions: int = 4) -> TriangleMesh:
    m = icosphere(subdivisions)
    return TriangleMesh.from_arrays(m.vertices * np.asarray(axes, dtype=float), m.faces)


def bumpy_ellipsoid(axes=(1.0, 0.8, 0.6), subdivisions: int = 4, amplitude: float = 0.05, seed: int = 0) -> TriangleMesh:
    """Ellipsoid with a smooth seeded radial displacement (a few low-frequency bumps)."""
    m = icosphere(subdivisions)
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(6, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    u = m.vertices
    bump = np.exp(-((1.0 - u @ dirs.T) / 0.15)).sum(1)
    r = 1.0 + amplitude * (bump - bump.mean())
    return TriangleMesh.from_arrays(u * r[:, None] * np.asarray(axes, dtype=float), m.faces)


def grid_plane(center, normal, size: float, cells: int) -> TriangleMesh:
    """Square plane of ``cells x cells`` quads, front side facing ``normal``."""
    n = np.asarray(normal, dtype=float)
    n /= np.linalg.norm(n)
    a = np.cross(n, [0.0, 1.0, 0.0] if abs(n[1]) < 0.9 else [1.0, 0.0, 0.0])
    a /= np.linalg.norm(a)
    b = np.cross(n, a)
    s = np.linspace(-size / 2, size / 2, cells + 1)
    gu, gv = np.meshgrid(s, s, indexing="ij")
    V = np.asarray(center, dtype=float) + gu.reshape(-1, 1) * a + gv.reshape(-1, 1) * b
    faces = []
    for i in range(cells):
        for j in range(cells):
            p = i * (cells + 1) + j
            q = p + cells + 1
            faces += [(p, q, q + 1), (p, q + 1, p + 1)]
    return TriangleMesh.from_arrays(V, np.array(faces))


# ---------------------------------------------------------------------------
# closest point


@dataclass(eq=False)
class SurfaceIndex:
    samples: np.ndarray
    tree: cKDTree
    density: float
    sample_faces: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.samples)

    def query(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Nearest sample ids and distances for an (N, 3) array; ties go to the lowest id."""
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        k = min(4, len(self.samples))
        d, i = self.tree.query(pts, k=k)
        if k == 1:
            return i.astype(np.int64), d
        tied = d[:, 1] == d[:, 0]
        ids = i[:, 0].copy()
        if tied.any():
            for r in np.flatnonzero(tied):
                ids[r] = i[r][d[r] == d[r, 0]].min()
        return ids.astype(np.int64), d[:, 0]

    def closest_points(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ids, d = self.query(points)
        return self.samples[ids], d


def default_density(mesh: TriangleMesh, spacing_fraction: float = 0.005) -> float:
    """Samples per unit area so the mean spacing is ``spacing_fraction`` of the bbox diagonal."""
    spacing = spacing_fraction * mesh.bbox_diagonal
    return 1.0 / spacing**2


def sample_surface(mesh: TriangleMesh, count: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Area-uniform surface samples and their face ids."""
    areas = mesh.face_areas
    faces = rng.choice(len(areas), size=count, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    tri = mesh.vertices[mesh.faces[faces]]
    pts = (1 - r1)[:, None] * tri[:, 0] + (r1 * (1 - r2))[:, None] * tri[:, 1] + (r1 * r2)[:, None] * tri[:, 2]
    return pts, faces


def build_surface_index(mesh: TriangleMesh, density: Optional[float] = None, seed: int = 0) -> SurfaceIndex:
    if density is None:
        density = default_density(mesh)
    if density <= 0:
        raise ValueError("density must be positive")
    count = max(1, int(round(density * mesh.total_area)))
    pts, faces = sample_surface(mesh, count, np.random.default_rng(seed))
    return SurfaceIndex(pts, cKDTree(pts), float(density), faces)


def closest_point(index: SurfaceIndex, query) -> tuple[np.ndarray, float]:
    ids, d = index.query(np.asarray(query, dtype=float))
    return index.samples[ids[0]].copy(), float(d[0])


# ---------------------------------------------------------------------------
# rendering


@dataclass(frozen=True, eq=False)
class BinaryMask:
    width: int
    height: int
    bits: np.ndarray

    @classmethod
    def full(cls, k: Intrinsics, value: bool = True) -> "BinaryMask":
        return cls(k.width, k.height, np.full((k.height, k.width), value, dtype=bool))

    def contains(self, pixels: np.ndarray) -> np.ndarray:
        """Mask value under each (u, v) pixel; False outside the image."""
        p = np.asarray(pixels, dtype=float).reshape(-1, 2)
        out = np.zeros(len(p), dtype=bool)
        ok = np.isfinite(p).all(1)
        x = np.rint(np.where(ok, p[:, 0], -1)).astype(np.int64)
        y = np.rint(np.where(ok, p[:, 1], -1)).astype(np.int64)
        ok &= (x >= 0) & (x < self.width) & (y >= 0) & (y < self.height)
        out[ok] = self.bits[y[ok], x[ok]]
        return out

    @property
    def area(self) -> int:
        return int(self.bits.sum())

    @property
    def coverage(self) -> float:
        return self.area / float(self.width * self.height)


def default_dilation(k: Intrinsics) -> int:
    return max(0, int(round(5 * k.width / 1280)))


def dilate(bits: np.ndarray, radius: int) -> np.ndarray:
    """Dilation by a (2r+1) square structuring element."""
    if radius <= 0:
        return bits.copy()
    rows = np.flatnonzero(bits.any(axis=1))
    if len(rows) == 0:
        return bits.copy()
    cols = np.flatnonzero(bits.any(axis=0))
    # only the bounding box of the set pixels (plus the radius) can change
    y0, y1 = max(rows[0] - radius, 0), min(rows[-1] + radius + 1, bits.shape[0])
    x0, x1 = max(cols[0] - radius, 0), min(cols[-1] + radius + 1, bits.shape[1])
    b = bits[y0:y1, x0:x1].view(np.uint8)
    b = maximum_filter1d(b, 2 * radius + 1, axis=0, mode="constant")
    b = maximum_filter1d(b, 2 * radius + 1, axis=1, mode="constant")
    out = np.zeros_like(bits)
    out[y0:y1, x0:x1] = b.astype(bool)
    return out


def render_mask(mesh: TriangleMesh, pose: Pose, k: Intrinsics, dilation_px: Optional[int] = None) -> BinaryMask:
    if dilation_px is None:
        dilation_px = default_dilation(k)
    if dilation_px < 0:
        raise ValueError("dilation_px must be >= 0")
    cam = pose.apply(mesh.vertices)
    bits = raster.silhouette(cam, mesh.faces, k)
    return BinaryMask(k.width, k.height, dilate(bits, dilation_px))


def cast_pixels(mesh: TriangleMesh, pose: Pose, k: Intrinsics, pixels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ray-cast pixels; returns camera-frame depth (NaN on miss), world hit points and face ids (-1)."""
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    if len(pixels) and not k.contains(pixels).all():
        raise ValueError("pixels outside the image")
    origin, dirs = rays_through_pixels(pose, k, pixels)
    t, f = raster.cast_rays(origin, np.ascontiguousarray(dirs), mesh.vertices, mesh.faces)
    hit = np.isfinite(t)
    pts = np.full((len(pixels), 3), np.nan)
    pts[hit] = origin + t[hit, None] * dirs[hit]
    depth = np.full(len(pixels), np.nan)
    if hit.any():
        depth[hit] = pose.apply(pts[hit])[:, 2]
    return depth, pts, f


def render_depth(mesh: TriangleMesh, pose: Pose, k: Intrinsics, pixels) -> np.ndarray:
    """Camera-frame depth of the nearest surface hit per pixel; NaN marks a miss."""
    return cast_pixels(mesh, pose, k, pixels)[0]


def front_facing(mesh: TriangleMesh, pose: Pose) -> np.ndarray:
    """Texturing visibility test: z of the camera-frame normal is negative."""
    return (mesh.face_normals @ pose.rotation.T)[:, 2] < 0.0


def texture_update(mesh: TriangleMesh, pose: Pose, image: np.ndarray, k: Intrinsics,
                   margin_px: Optional[int] = None) -> np.ndarray:
    """Blend per-face mean image color into ``mesh`` in place; returns the updated face ids.

    By default every pixel covered by a front-facing projected triangle counts. With
    ``margin_px`` set, only pixels where the face is the nearest surface and which lie at least
    that far inside the predicted silhouette are used, so a small pose error does not smear
    background into faces along the outline.
    """
    image = np.asarray(image)
    if image.shape[0] != k.height or image.shape[1] != k.width:
        raise ValueError("image size does not match intrinsics")
    if image.ndim == 2:
        image = np.repeat(image[:, :, None], 3, axis=2)
    select = front_facing(mesh, pose)
    cam = pose.apply(mesh.vertices)
    if margin_px is None:
        sums, counts = raster.face_color_sums(cam, mesh.faces, k, image[:, :, :3], select)
    else:
        _, fbuf = raster.zbuffer(cam, mesh.faces, k)
        inside = fbuf >= 0
        if margin_px > 0:
            inside &= ~dilate(~inside, margin_px)
        ys, xs = np.nonzero(inside)
        fid = fbuf[ys, xs]
        keep = select[fid]
        fid, ys, xs = fid[keep], ys[keep], xs[keep]
        nf = len(mesh.faces)
        counts = np.bincount(fid, minlength=nf)
        pix = image[ys, xs, :3].astype(float)
        sums = np.stack([np.bincount(fid, weights=pix[:, c], minlength=nf) for c in range(3)], axis=1)
    upd = np.flatnonzero(counts > 0)
    mean = sums[upd] / counts[upd, None]
    w = mesh.face_weights[upd]
    mesh.face_colors[upd] = (w[:, None] * mesh.face_colors[upd] + mean) / (w[:, None] + 1.0)
    mesh.face_weights[upd] = np.minimum(MAX_TEXTURE_WEIGHT, w + 1.0)
    return upd
