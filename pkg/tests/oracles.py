"""Independent reference implementations used to cross-check the library.

Nothing here imports the code under test except plain value types (Intrinsics fields, arrays).
Each oracle takes the slow, obvious route.
"""

from __future__ import annotations

import math

import numpy as np

# frozen expected values, computed by hand
HUBER_D3_R5 = 21.0  # 3 * (2*5 - 3)
SPHERE_SILHOUETTE_RADIUS_PX = 700.0 / math.sqrt(3.0)  # f r / sqrt(d^2 - r^2) with f=700, r=1, d=2


def rodrigues(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    th = float(np.linalg.norm(w))
    K = np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])
    if th < 1e-12:
        return np.eye(3) + K
    K = K / th
    return np.eye(3) + math.sin(th) * K + (1.0 - math.cos(th)) * (K @ K)


def project(R, t, X, fx, fy, cx, cy):
    p = np.asarray(R) @ np.asarray(X, dtype=float) + np.asarray(t)
    return np.array([fx * p[0] / p[2] + cx, fy * p[1] / p[2] + cy])


# --- geometry ----------------------------------------------------------------

def plane_then_barycentric(origin, direction, v0, v1, v2):
    """Intersect the supporting plane, then test the hit with 2D barycentric coordinates.

    Returns (t, (b1, b2)) or None. Uses a different algebra from Moller-Trumbore on purpose.
    """
    o, d = np.asarray(origin, float), np.asarray(direction, float)
    a, b, c = (np.asarray(v, float) for v in (v0, v1, v2))
    n = np.cross(b - a, c - a)
    denom = float(n @ d)
    if abs(denom) < 1e-12 * np.linalg.norm(n):
        return None
    t = float(n @ (a - o)) / denom
    if t <= 1e-9:
        return None
    p = o + t * d
    # solve p - a = s (b - a) + u (c - a) in the least-squares sense (exact on the plane)
    M = np.stack([b - a, c - a], axis=1)
    s, u = np.linalg.lstsq(M, p - a, rcond=None)[0]
    if s < 0 or u < 0 or s + u > 1:
        return None
    return t, (s, u)


def linear_scan_nearest(samples: np.ndarray, query) -> tuple[int, float]:
    d2 = np.sum((samples - np.asarray(query, float)) ** 2, axis=1)
    i = int(np.argmin(d2))  # argmin returns the lowest index on ties
    return i, math.sqrt(float(d2[i]))


def icosphere_area(subdivisions: int, radius: float = 1.0) -> float:
    """Exact area of the flat-faced icosphere built by midpoint subdivision + normalization."""
    phi = (1 + 5 ** 0.5) / 2
    v = [(-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0), (0, -1, phi), (0, 1, phi), (0, -1, -phi),
         (0, 1, -phi), (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4), (11, 10, 2),
         (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9), (4, 9, 5), (2, 4, 11),
         (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    tris = [tuple(np.array(v[i], float) / np.linalg.norm(v[i]) for i in face) for face in f]
    for _ in range(subdivisions):
        nxt = []
        for a, b, c in tris:
            ab, bc, ca = ((x + y) / np.linalg.norm(x + y) for x, y in ((a, b), (b, c), (c, a)))
            nxt += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        tris = nxt
    return radius ** 2 * sum(0.5 * np.linalg.norm(np.cross(b - a, c - a)) for a, b, c in tris)


# --- features ----------------------------------------------------------------

CIRCLE16 = [(0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
            (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3)]


def fast9_pixel(img: np.ndarray, x: int, y: int, thr: float):
    """Segment test at one pixel; returns the score (0 when not a corner)."""
    c = float(img[y, x])
    vals = [float(img[y + dy, x + dx]) for dx, dy in CIRCLE16]
    best = 0.0
    is_corner = False
    for sign in (1, -1):
        flags = [sign * (v - c) > thr for v in vals]
        run = 0
        for f in flags + flags:
            run = run + 1 if f else 0
            if run >= 9:
                is_corner = True
        score = sum(abs(v - c) - thr for v, fl in zip(vals, flags) if fl)
        best = max(best, score)
    return best if is_corner else 0.0


def fast9_corners(img: np.ndarray, thr: float, max_count: int):
    H, W = img.shape
    S = np.zeros((H, W))
    for y in range(3, H - 3):
        for x in range(3, W - 3):
            S[y, x] = fast9_pixel(img, x, y, thr)
    out = []
    for y in range(H):
        for x in range(W):
            s = S[y, x]
            if s <= 0:
                continue
            ok = True
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    if dx == dy == 0:
                        continue
                    yy, xx = y + dy, x + dx
                    if not (0 <= yy < H and 0 <= xx < W):
                        continue
                    earlier = dy < 0 or (dy == 0 and dx < 0)
                    if (earlier and S[yy, xx] >= s) or (not earlier and S[yy, xx] > s):
                        ok = False
            if ok:
                out.append((-s, y, x))
    out.sort()
    return [(x, y, -s) for s, y, x in out[:max_count]]


# --- optimizer ----------------------------------------------------------------

def dense_ba(poses_Rt, fixed, points, edges, k, iterations=100):
    """Plain Levenberg-Marquardt with forward/central numeric Jacobians and a dense solve.

    ``poses_Rt`` is a list of (R, t); ``edges`` a list of (pose idx, point idx, (u, v)).
    Uses the same left update R' = Exp(w) R, t' = Exp(w) t + v. Returns the final squared cost.
    """
    fx, fy, cx, cy = k
    poses = [(np.array(R, float), np.array(t, float)) for R, t in poses_Rt]
    pts = np.array(points, float)
    free = [i for i, f in enumerate(fixed) if not f]

    def unpack(x):
        ps = list(poses)
        for n, i in enumerate(free):
            dR = rodrigues(x[6 * n : 6 * n + 3])
            R, t = poses[i]
            ps[i] = (dR @ R, dR @ t + x[6 * n + 3 : 6 * n + 6])
        return ps, pts + x[6 * len(free):].reshape(-1, 3)

    ei = np.array([e[0] for e in edges])
    ej = np.array([e[1] for e in edges])
    eq = np.array([e[2] for e in edges], dtype=float)

    def resid(x):
        ps, P = unpack(x)
        R = np.stack([ps[i][0] for i in ei])
        t = np.stack([ps[i][1] for i in ei])
        c = np.einsum("nij,nj->ni", R, P[ej]) + t
        uv = np.stack([fx * c[:, 0] / c[:, 2] + cx, fy * c[:, 1] / c[:, 2] + cy], axis=1)
        return (uv - eq).ravel()

    n = 6 * len(free) + pts.size
    lam = 1e-4
    for _ in range(iterations):
        r0 = resid(np.zeros(n))
        c0 = float(r0 @ r0)
        J = np.zeros((len(r0), n))
        h = 1e-6
        for c in range(n):
            d = np.zeros(n)
            d[c] = h
            J[:, c] = (resid(d) - resid(-d)) / (2 * h)
        A, g = J.T @ J, J.T @ r0
        step = None
        while lam < 1e16:
            dx = np.linalg.solve(A + lam * np.diag(np.maximum(np.diag(A), 1e-9)), -g)
            r1 = resid(dx)
            if r1 @ r1 < c0:
                step = dx
                lam = max(lam / 3, 1e-12)
                break
            lam *= 4
        if step is None:
            break
        poses, pts = unpack(step)
        if (c0 - float(r1 @ r1)) / c0 < 1e-15:
            break
    r = resid(np.zeros(n))
    return float(r @ r)


def huber(r: float, delta: float) -> float:
    return r * r if r <= delta else delta * (2 * r - delta)


# --- metrics -------------------------------------------------------------------

def rotate_pixels_about_center(pixels, cx, cy, angle_rad):
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    out = []
    for u, v in pixels:
        du, dv = u - cx, v - cy
        out.append((cx + c * du - s * dv, cy + s * du + c * dv))
    return out


def traj_error_rows(est, gt):
    """Per-frame loop: est/gt are lists of (R, t) or None. Returns (trans RMSE, rot RMSE in rad)."""
    te, re = [], []
    for e, g in zip(est, gt):
        if e is None:
            continue
        Rg, tg = g
        Re, te_ = e
        # g^-1 o e
        R = Rg.T @ Re
        t = Rg.T @ (te_ - tg)
        te.append(float(t @ t))
        cosang = max(-1.0, min(1.0, (np.trace(R) - 1.0) / 2.0))
        re.append(math.acos(cosang) ** 2)
    return math.sqrt(sum(te) / len(te)), math.sqrt(sum(re) / len(re))
