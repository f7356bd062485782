"""CPU triangle rasterization and ray casting kernels (numba).

Pixel ``(x, y)`` has its center at integer coordinates ``(x, y)``: a projected
point ``(u, v)`` falls on pixel ``(round(u), round(v))``.  Coverage is tested at
pixel centers with a top-left style tie rule so that an edge shared by two
triangles is owned by exactly one of them.  Triangles crossing the near plane
are clipped against ``z = NEAR`` in camera space before projection.
"""

from __future__ import annotations

import numpy as np
from numba import njit

NEAR = 1e-6

MODE_MASK = 0
MODE_DEPTH = 1
MODE_ACCUM = 2


@njit(cache=True)
def _owns_edge(ax, ay, bx, by):
    dy = by - ay
    dx = bx - ax
    return dy > 0.0 or (dy == 0.0 and dx < 0.0)


@njit(cache=True)
def _raster_tri(
    x0, y0, z0, x1, y1, z1, x2, y2, z2, face, mode, width, height, mask, zbuf, fbuf, image, sums, counts
):
    area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
    if area == 0.0 or not np.isfinite(area):
        return
    if area < 0.0:
        x1, y1, z1, x2, y2, z2 = x2, y2, z2, x1, y1, z1
        area = -area
    xmin = max(int(np.ceil(min(x0, min(x1, x2)))), 0)
    xmax = min(int(np.floor(max(x0, max(x1, x2)))), width - 1)
    ymin = max(int(np.ceil(min(y0, min(y1, y2)))), 0)
    ymax = min(int(np.floor(max(y0, max(y1, y2)))), height - 1)
    if xmin > xmax or ymin > ymax:
        return
    own0 = _owns_edge(x1, y1, x2, y2)
    own1 = _owns_edge(x2, y2, x0, y0)
    own2 = _owns_edge(x0, y0, x1, y1)
    inv_area = 1.0 / area
    iz0 = 1.0 / z0
    iz1 = 1.0 / z1
    iz2 = 1.0 / z2
    for py in range(ymin, ymax + 1):
        fy = float(py)
        for px in range(xmin, xmax + 1):
            fx = float(px)
            w0 = (x2 - x1) * (fy - y1) - (y2 - y1) * (fx - x1)
            if w0 < 0.0 or (w0 == 0.0 and not own0):
                continue
            w1 = (x0 - x2) * (fy - y2) - (y0 - y2) * (fx - x2)
            if w1 < 0.0 or (w1 == 0.0 and not own1):
                continue
            w2 = (x1 - x0) * (fy - y0) - (y1 - y0) * (fx - x0)
            if w2 < 0.0 or (w2 == 0.0 and not own2):
                continue
            if mode == MODE_MASK:
                mask[py, px] = True
            elif mode == MODE_DEPTH:
                iz = (w0 * iz0 + w1 * iz1 + w2 * iz2) * inv_area
                z = 1.0 / iz
                if z < zbuf[py, px]:
                    zbuf[py, px] = z
                    fbuf[py, px] = face
            else:
                for c in range(image.shape[2]):
                    sums[face, c] += image[py, px, c]
                counts[face] += 1


@njit(cache=True)
def _emit_face(pc, fx, fy, cx, cy, face, mode, width, height, mask, zbuf, fbuf, image, sums, counts):
    """Clip a camera-space triangle (3x3) against the near plane and rasterize the pieces."""
    n_front = 0
    for i in range(3):
        if pc[i, 2] >= NEAR:
            n_front += 1
    if n_front == 0:
        return
    if n_front == 3:
        _raster_tri(
            fx * pc[0, 0] / pc[0, 2] + cx, fy * pc[0, 1] / pc[0, 2] + cy, pc[0, 2],
            fx * pc[1, 0] / pc[1, 2] + cx, fy * pc[1, 1] / pc[1, 2] + cy, pc[1, 2],
            fx * pc[2, 0] / pc[2, 2] + cx, fy * pc[2, 1] / pc[2, 2] + cy, pc[2, 2],
            face, mode, width, height, mask, zbuf, fbuf, image, sums, counts,
        )
        return
    poly = np.empty((4, 3))
    m = 0
    for i in range(3):
        a = pc[i]
        b = pc[(i + 1) % 3]
        a_in = a[2] >= NEAR
        b_in = b[2] >= NEAR
        if a_in:
            poly[m] = a
            m += 1
        if a_in != b_in:
            s = (NEAR - a[2]) / (b[2] - a[2])
            poly[m] = a + s * (b - a)
            poly[m, 2] = NEAR
            m += 1
    sx = np.empty(4)
    sy = np.empty(4)
    for i in range(m):
        sx[i] = fx * poly[i, 0] / poly[i, 2] + cx
        sy[i] = fy * poly[i, 1] / poly[i, 2] + cy
    for i in range(1, m - 1):
        _raster_tri(
            sx[0], sy[0], poly[0, 2], sx[i], sy[i], poly[i, 2], sx[i + 1], sy[i + 1], poly[i + 1, 2],
            face, mode, width, height, mask, zbuf, fbuf, image, sums, counts,
        )


@njit(cache=True)
def _raster_all(cam_vertices, faces, face_select, fx, fy, cx, cy, mode, width, height, mask, zbuf, fbuf, image, sums, counts):
    pc = np.empty((3, 3))
    for f in range(faces.shape[0]):
        if not face_select[f]:
            continue
        for i in range(3):
            pc[i] = cam_vertices[faces[f, i]]
        _emit_face(pc, fx, fy, cx, cy, f, mode, width, height, mask, zbuf, fbuf, image, sums, counts)


def _dummies(width: int, height: int):
    return (
        np.zeros((1, 1), dtype=np.bool_),
        np.zeros((1, 1)),
        np.zeros((1, 1), dtype=np.int32),
        np.zeros((1, 1, 1)),
        np.zeros((1, 1)),
        np.zeros(1, dtype=np.int64),
    )


def silhouette(cam_vertices: np.ndarray, faces: np.ndarray, k, face_select=None) -> np.ndarray:
    """Union of rasterized projected triangles, as a boolean (H, W) array."""
    mask = np.zeros((k.height, k.width), dtype=np.bool_)
    if face_select is None:
        face_select = np.ones(len(faces), dtype=np.bool_)
    _, zb, fb, im, su, co = _dummies(k.width, k.height)
    _raster_all(
        np.ascontiguousarray(cam_vertices, dtype=np.float64), faces, face_select,
        float(k.fx), float(k.fy), float(k.cx), float(k.cy), MODE_MASK, k.width, k.height, mask, zb, fb, im, su, co,
    )
    return mask


def zbuffer(cam_vertices: np.ndarray, faces: np.ndarray, k, face_select=None) -> tuple[np.ndarray, np.ndarray]:
    """Camera-frame depth buffer (inf where empty) and face-id buffer (-1 where empty)."""
    zbuf = np.full((k.height, k.width), np.inf)
    fbuf = np.full((k.height, k.width), -1, dtype=np.int32)
    if face_select is None:
        face_select = np.ones(len(faces), dtype=np.bool_)
    mk, _, _, im, su, co = _dummies(k.width, k.height)
    _raster_all(
        np.ascontiguousarray(cam_vertices, dtype=np.float64), faces, face_select,
        float(k.fx), float(k.fy), float(k.cx), float(k.cy), MODE_DEPTH, k.width, k.height, mk, zbuf, fbuf, im, su, co,
    )
    return zbuf, fbuf


def face_color_sums(
    cam_vertices: np.ndarray, faces: np.ndarray, k, image: np.ndarray, face_select: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Per-face sum of image values over covered pixels and the covered pixel count."""
    img = np.ascontiguousarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    sums = np.zeros((len(faces), img.shape[2]))
    counts = np.zeros(len(faces), dtype=np.int64)
    mk, zb, fb, _, _, _ = _dummies(k.width, k.height)
    _raster_all(
        np.ascontiguousarray(cam_vertices, dtype=np.float64), faces, face_select,
        float(k.fx), float(k.fy), float(k.cx), float(k.cy), MODE_ACCUM, k.width, k.height, mk, zb, fb, img, sums, counts,
    )
    return sums, counts


@njit(cache=True)
def _mt(ox, oy, oz, dx, dy, dz, v0, v1, v2):
    e1x = v1[0] - v0[0]
    e1y = v1[1] - v0[1]
    e1z = v1[2] - v0[2]
    e2x = v2[0] - v0[0]
    e2y = v2[1] - v0[1]
    e2z = v2[2] - v0[2]
    px = dy * e2z - dz * e2y
    py = dz * e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    n1 = np.sqrt(e1x * e1x + e1y * e1y + e1z * e1z)
    n2 = np.sqrt(e2x * e2x + e2y * e2y + e2z * e2z)
    if abs(det) < 1e-12 * max(1.0, n1 * n2):
        return -1.0
    inv = 1.0 / det
    sx = ox - v0[0]
    sy = oy - v0[1]
    sz = oz - v0[2]
    b1 = (sx * px + sy * py + sz * pz) * inv
    if b1 < 0.0 or b1 > 1.0:
        return -1.0
    qx = sy * e1z - sz * e1y
    qy = sz * e1x - sx * e1z
    qz = sx * e1y - sy * e1x
    b2 = (dx * qx + dy * qy + dz * qz) * inv
    if b2 < 0.0 or b1 + b2 > 1.0:
        return -1.0
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    if t <= 1e-9:
        return -1.0
    return t


@njit(cache=True)
def cast_rays(origin, directions, vertices, faces):
    """Nearest hit distance and face per ray by exhaustive Möller-Trumbore (inf / -1 on miss)."""
    n = directions.shape[0]
    t_best = np.full(n, np.inf)
    f_best = np.full(n, -1, dtype=np.int64)
    ox, oy, oz = origin[0], origin[1], origin[2]
    for r in range(n):
        dx, dy, dz = directions[r, 0], directions[r, 1], directions[r, 2]
        for f in range(faces.shape[0]):
            t = _mt(ox, oy, oz, dx, dy, dz, vertices[faces[f, 0]], vertices[faces[f, 1]], vertices[faces[f, 2]])
            if t > 0.0 and t < t_best[r]:
                t_best[r] = t
                f_best[r] = f
    return t_best, f_best


@njit(cache=True)
def _occlusion_kernel(cam_vertices, faces, fx, fy, cx, cy, uv, z, order, cell_start, cell, gw, gh, rel_tol, out):
    for f in range(faces.shape[0]):
        a = cam_vertices[faces[f, 0]]
        b = cam_vertices[faces[f, 1]]
        c = cam_vertices[faces[f, 2]]
        # faces reaching behind the near plane are skipped
        if a[2] < NEAR or b[2] < NEAR or c[2] < NEAR:
            continue
        x0 = fx * a[0] / a[2] + cx
        y0 = fy * a[1] / a[2] + cy
        x1 = fx * b[0] / b[2] + cx
        y1 = fy * b[1] / b[2] + cy
        x2 = fx * c[0] / c[2] + cx
        y2 = fy * c[1] / c[2] + cy
        area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if area == 0.0:
            continue
        gx0 = max(int(np.floor(min(x0, min(x1, x2)) / cell)), 0)
        gx1 = min(int(np.floor(max(x0, max(x1, x2)) / cell)), gw - 1)
        gy0 = max(int(np.floor(min(y0, min(y1, y2)) / cell)), 0)
        gy1 = min(int(np.floor(max(y0, max(y1, y2)) / cell)), gh - 1)
        for gy in range(gy0, gy1 + 1):
            for gx in range(gx0, gx1 + 1):
                g = gy * gw + gx
                for s in range(cell_start[g], cell_start[g + 1]):
                    i = order[s]
                    if out[i]:
                        continue
                    px = uv[i, 0]
                    py = uv[i, 1]
                    w0 = ((x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)) / area
                    w1 = ((x0 - x2) * (py - y2) - (y0 - y2) * (px - x2)) / area
                    w2 = 1.0 - w0 - w1
                    if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                        continue
                    zf = 1.0 / (w0 / a[2] + w1 / b[2] + w2 / c[2])
                    if zf < z[i] * (1.0 - rel_tol):
                        out[i] = True


def points_occluded(cam_vertices: np.ndarray, faces: np.ndarray, k, cam_points: np.ndarray, rel_tol: float = 1e-6) -> np.ndarray:
    """True for camera-frame points hidden behind some face along their line of sight.

    Points on the surface are not hidden by their own face (relative depth tolerance).
    Points behind the camera or projecting outside the image are reported as not occluded.
    """
    P = np.asarray(cam_points, dtype=np.float64).reshape(-1, 3)
    n = len(P)
    out = np.zeros(n, dtype=np.bool_)
    front = P[:, 2] > NEAR
    z = np.where(front, P[:, 2], 1.0)
    uv = np.stack([k.fx * P[:, 0] / z + k.cx, k.fy * P[:, 1] / z + k.cy], axis=1)
    ok = front & (uv[:, 0] >= -0.5) & (uv[:, 0] <= k.width - 0.5) & (uv[:, 1] >= -0.5) & (uv[:, 1] <= k.height - 0.5)
    idx = np.flatnonzero(ok)
    if len(idx) == 0:
        return out
    cell = 16.0
    gw = int(np.ceil(k.width / cell)) + 1
    gh = int(np.ceil(k.height / cell)) + 1
    gxy = np.floor(np.maximum(uv[idx], 0.0) / cell).astype(np.int64)
    g = np.minimum(gxy[:, 1], gh - 1) * gw + np.minimum(gxy[:, 0], gw - 1)
    srt = np.argsort(g, kind="stable")
    order = idx[srt]
    cell_start = np.searchsorted(g[srt], np.arange(gw * gh + 1)).astype(np.int64)
    _occlusion_kernel(
        np.ascontiguousarray(cam_vertices, dtype=np.float64), faces, float(k.fx), float(k.fy), float(k.cx), float(k.cy),
        uv, z, order, cell_start, cell, gw, gh, float(rel_tol), out,
    )
    return out
