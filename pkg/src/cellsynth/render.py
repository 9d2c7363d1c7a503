"""Orthographic projections and planar cross-sections of cell scenes.

Images are ``(H, W, 4)`` float arrays holding straight-alpha RGBA in [0, 1];
pixels not touched by geometry have alpha exactly 0.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from PIL import Image as PILImage

from .mesh import Material, MeshError, Scene, center_of_gravity, rotation_matrix

PROJECTION = "projection"
CROSS_SECTION = "cross-section"
MODES = (PROJECTION, CROSS_SECTION)
MIN_SIZE = 16
_EDGE_EPS = 1e-9


@dataclass(frozen=True)
class ProjectionSpec:
    thetas: tuple
    phis: tuple
    size: int = 32
    mode: str = CROSS_SECTION
    world_extent: float = 5.0
    antialias: int = 2

    def __post_init__(self):
        object.__setattr__(self, "thetas", tuple(float(t) for t in self.thetas))
        object.__setattr__(self, "phis", tuple(float(p) for p in self.phis))
        if not self.thetas or not self.phis:
            raise ValueError("angle lists must be nonempty")
        if self.size < MIN_SIZE:
            raise ValueError(f"size must be >= {MIN_SIZE}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not self.world_extent > 0 or self.antialias < 1:
            raise ValueError("world_extent must be > 0 and antialias >= 1")

    @property
    def angles(self) -> list:
        return [(t, p) for t in self.thetas for p in self.phis]


def check_image(image, size=None) -> np.ndarray:
    """Validate one RGBA image and return it as float64."""
    img = np.asarray(image)
    if img.dtype == np.uint8:
        img = img.astype(np.float64) / 255.0
    img = img.astype(np.float64, copy=False)
    if img.ndim != 3 or img.shape[2] != 4:
        raise ValueError(f"expected an (H, W, 4) RGBA image, got shape {img.shape}")
    if size is not None and img.shape[:2] != (size, size):
        raise ValueError(f"expected a {size}x{size} image, got {img.shape[:2]}")
    if not np.all(np.isfinite(img)) or img.min() < 0 or img.max() > 1:
        raise ValueError("image samples must be finite and in [0, 1]")
    return img


def check_images(images) -> np.ndarray:
    """Validate a nonempty batch of equally sized RGBA images; returns ``(N, H, W, 4)``."""
    if isinstance(images, np.ndarray) and images.ndim == 4:
        batch = images
    else:
        images = list(images)
        if not images:
            raise ValueError("empty image batch")
        shapes = {np.shape(im) for im in images}
        if len(shapes) != 1:
            raise ValueError(f"images differ in size: {sorted(shapes)}")
        batch = np.stack([np.asarray(im) for im in images])
    if len(batch) == 0:
        raise ValueError("empty image batch")
    if batch.dtype == np.uint8:
        batch = batch.astype(np.float64) / 255.0
    batch = batch.astype(np.float64, copy=False)
    if batch.ndim != 4 or batch.shape[3] != 4:
        raise ValueError(f"expected (N, H, W, 4) images, got {batch.shape}")
    if not np.all(np.isfinite(batch)) or batch.min() < 0 or batch.max() > 1:
        raise ValueError("image samples must be finite and in [0, 1]")
    return batch


def blank_image(size: int) -> np.ndarray:
    return np.zeros((size, size, 4))


def _snap(x: float) -> float:
    r = round(x)
    return float(r) if abs(x - r) < 1e-15 else x


def camera_basis(theta: float, phi: float) -> tuple:
    """Image right ``u``, image up ``v`` and the direction ``d`` toward the viewer."""
    st, ct = _snap(np.sin(theta)), _snap(np.cos(theta))
    sp, cp = _snap(np.sin(phi)), _snap(np.cos(phi))
    d = np.array([st * cp, st * sp, ct])
    u = np.array([ct * cp, ct * sp, -st])
    v = np.array([-sp, cp, 0.0])
    return u, v, d


def rotate_about_view_axis(s: Scene, theta: float, phi: float, alpha: float) -> Scene:
    """Rotate ``s`` by ``alpha`` about the viewing axis through its center of gravity.

    The viewing axis points from the camera into the scene (``-d``), so
    ``project(rotate_about_view_axis(s, 0, phi, a), 0, phi)`` matches
    ``project(s, 0, phi + a)``.
    """
    _, _, d = camera_basis(theta, phi)
    c = center_of_gravity(s)
    R = np.eye(4)
    R[:3, :3] = rotation_matrix(-d, alpha)
    T, Ti = np.eye(4), np.eye(4)
    T[:3, 3], Ti[:3, 3] = c, -c
    M = T @ R @ Ti
    return Scene(list(s.meshes), [M @ t for t in s.transforms])


def _to_samples(x, y, n: int, extent: float):
    return (x / extent + 0.5) * n, (0.5 - y / extent) * n


def _rasterize(sx, sy, depth, tris, rgba, n: int) -> np.ndarray:
    """Depth-buffered flat-shaded fill of 2D triangles onto an ``n x n`` sample grid."""
    buf = np.zeros((n * n, 4))
    if len(tris) == 0:
        return buf.reshape(n, n, 4)
    x, y, z = sx[tris], sy[tris], depth[tris]  # (T, 3)
    area = (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0])
    i0 = np.maximum(np.ceil(x.min(axis=1) - 0.5), 0).astype(np.int64)
    i1 = np.minimum(np.floor(x.max(axis=1) - 0.5), n - 1).astype(np.int64)
    j0 = np.maximum(np.ceil(y.min(axis=1) - 0.5), 0).astype(np.int64)
    j1 = np.minimum(np.floor(y.max(axis=1) - 0.5), n - 1).astype(np.int64)
    width = np.maximum(i1 - i0, j1 - j0) + 1
    live = (np.abs(area) > 1e-12) & (i1 >= i0) & (j1 >= j0)
    idx_all, depth_all, tri_all = [], [], []
    bucket = np.where(live, np.ceil(np.log2(np.maximum(width, 1))).astype(np.int64), -1)
    for b in np.unique(bucket[bucket >= 0]):
        sel = np.flatnonzero(bucket == b)
        B = 1 << int(b)
        oy, ox = np.divmod(np.arange(B * B), B)
        ci = i0[sel, None] + ox[None]
        cj = j0[sel, None] + oy[None]
        valid = (ci <= i1[sel, None]) & (cj <= j1[sel, None])
        px, py = ci + 0.5, cj + 0.5
        xs, ys, zs, ar = x[sel], y[sel], z[sel], area[sel, None]
        w0 = ((xs[:, 1, None] - px) * (ys[:, 2, None] - py)
              - (xs[:, 2, None] - px) * (ys[:, 1, None] - py)) / ar
        w1 = ((xs[:, 2, None] - px) * (ys[:, 0, None] - py)
              - (xs[:, 0, None] - px) * (ys[:, 2, None] - py)) / ar
        w2 = 1.0 - w0 - w1
        hit = valid & (w0 >= -_EDGE_EPS) & (w1 >= -_EDGE_EPS) & (w2 >= -_EDGE_EPS)
        if not hit.any():
            continue
        dz = w0 * zs[:, 0, None] + w1 * zs[:, 1, None] + w2 * zs[:, 2, None]
        rows, cols = np.nonzero(hit)
        idx_all.append(cj[rows, cols] * n + ci[rows, cols])
        depth_all.append(dz[rows, cols])
        tri_all.append(sel[rows])
    if not idx_all:
        return buf.reshape(n, n, 4)
    idx = np.concatenate(idx_all)
    dep = np.concatenate(depth_all)
    tri = np.concatenate(tri_all)
    order = np.lexsort((tri, -dep, idx))  # nearest first, ties by triangle index
    idx_s = idx[order]
    first = np.ones(len(idx_s), dtype=bool)
    first[1:] = idx_s[1:] != idx_s[:-1]
    win = order[first]
    buf[idx[win]] = rgba[tri[win]]
    return buf.reshape(n, n, 4)


def _downsample(buf: np.ndarray, size: int, ss: int) -> np.ndarray:
    """Box-filter ``ss x ss`` samples into one straight-alpha pixel."""
    if ss == 1:
        return np.clip(buf, 0.0, 1.0)
    b = buf.reshape(size, ss, size, ss, 4)
    alpha = b[..., 3]
    premult = (b[..., :3] * alpha[..., None]).mean(axis=(1, 3))
    a = alpha.mean(axis=(1, 3))
    out = np.zeros((size, size, 4))
    nz = a > 0
    out[nz, :3] = premult[nz] / a[nz, None]
    out[..., 3] = a
    return np.clip(out, 0.0, 1.0)


def _safe_center(s: Scene):
    try:
        return center_of_gravity(s)
    except MeshError:
        return None


def _project_at(s: Scene, center, theta, phi, size, world_extent, antialias) -> np.ndarray:
    if center is None:
        return blank_image(size)
    u, v, d = camera_basis(theta, phi)
    n = size * antialias
    xs, ys, zs, tris, colors = [], [], [], [], []
    offset = 0
    for m in s.world_meshes():
        p = m.vertices - center
        sx, sy = _to_samples(p @ u, p @ v, n, world_extent)
        xs.append(sx)
        ys.append(sy)
        zs.append(p @ d)
        tris.append(m.triangles + offset)
        colors.append(m.colors[m.materials])
        offset += len(m.vertices)
    buf = _rasterize(np.concatenate(xs), np.concatenate(ys), np.concatenate(zs),
                     np.concatenate(tris), np.concatenate(colors), n)
    return _downsample(buf, size, antialias)


def project(s: Scene, theta: float, phi: float, size: int = 32, world_extent: float = 5.0,
            antialias: int = 2) -> np.ndarray:
    """Orthographic, depth-buffered, flat-shaded view along spherical angles (theta, phi)."""
    if not s.meshes:
        raise MeshError("empty scene")
    return _project_at(s, _safe_center(s), theta, phi, size, world_extent, antialias)


def _section_segments(vertices, triangles, center, u, v, d):
    """2D segments where the plane through ``center`` with normal ``d`` cuts the triangles."""
    p = vertices - center
    dist = p @ d
    x, y = p @ u, p @ v
    above = dist >= 0
    sa = above[triangles]
    mixed = sa.any(axis=1) & ~sa.all(axis=1)
    if not mixed.any():
        return np.zeros((0, 2, 2))
    t = triangles[mixed]
    pts = np.zeros((len(t), 3, 2))
    crosses = np.zeros((len(t), 3), dtype=bool)
    for k, (a, b) in enumerate(((0, 1), (1, 2), (2, 0))):
        ia, ib = t[:, a], t[:, b]
        crosses[:, k] = above[ia] != above[ib]
        denom = dist[ia] - dist[ib]
        w = np.where(crosses[:, k], dist[ia] / np.where(crosses[:, k], denom, 1.0), 0.0)
        pts[:, k, 0] = x[ia] + w * (x[ib] - x[ia])
        pts[:, k, 1] = y[ia] + w * (y[ib] - y[ia])
    # exactly two edges cross for every mixed triangle
    order = np.argsort(~crosses, axis=1, kind="stable")[:, :2]
    return np.take_along_axis(pts, order[:, :, None], axis=1)


def _even_odd_fill(segments, n: int, extent: float) -> np.ndarray:
    """Inside mask of the closed polygons formed by ``segments`` on an ``n x n`` grid."""
    if len(segments) == 0:
        return np.zeros((n, n), dtype=bool)
    centers = ((np.arange(n) + 0.5) / n - 0.5) * extent
    px, py = centers, -centers  # column x coordinates, row y coordinates (row 0 on top)
    x1, y1 = segments[:, 0, 0], segments[:, 0, 1]
    x2, y2 = segments[:, 1, 0], segments[:, 1, 1]
    straddle = (y1[None, :] > py[:, None]) != (y2[None, :] > py[:, None])  # (rows, S)
    dy = np.where(y2 != y1, y2 - y1, 1.0)
    xint = x1[None, :] + (py[:, None] - y1[None, :]) * ((x2 - x1) / dy)[None, :]
    xint = np.where(straddle, xint, -np.inf)
    count = (xint[:, None, :] > px[None, :, None]).sum(axis=2)
    return count % 2 == 1


def _section_at(s: Scene, center, theta, phi, size, world_extent, antialias) -> np.ndarray:
    if center is None:
        return blank_image(size)
    u, v, d = camera_basis(theta, phi)
    n = size * antialias
    buf = np.zeros((n, n, 4))
    nucleus_layers = []
    for m in s.world_meshes():
        for mat in (Material.MEMBRANE, Material.NUCLEUS):
            tris = m.triangles[m.materials == mat]
            if len(tris) == 0:
                continue
            seg = _section_segments(m.vertices, tris, center, u, v, d)
            mask = _even_odd_fill(seg, n, world_extent)
            if mat == Material.MEMBRANE:
                buf[mask] = m.colors[mat]
            else:
                nucleus_layers.append((mask, m.colors[mat]))
    for mask, color in nucleus_layers:
        buf[mask] = color
    return _downsample(buf, size, antialias)


def cross_section(s: Scene, theta: float, phi: float, size: int = 32, world_extent: float = 5.0,
                  antialias: int = 2) -> np.ndarray:
    """Slice through the center of gravity with normal (theta, phi); nucleus drawn over membrane."""
    if not s.meshes:
        raise MeshError("empty scene")
    return _section_at(s, _safe_center(s), theta, phi, size, world_extent, antialias)


def render_batch(s: Scene, spec: ProjectionSpec, n_jobs: int = 1) -> list:
    """Images for every (theta_i, phi_j) pair in row-major order."""
    if not s.meshes:
        raise MeshError("empty scene")
    center = _safe_center(s)
    fn = _project_at if spec.mode == PROJECTION else _section_at

    def one(angle):
        theta, phi = angle
        return theta, phi, fn(s, center, theta, phi, spec.size, spec.world_extent, spec.antialias)

    if n_jobs == 1:
        return [one(a) for a in spec.angles]
    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(one, spec.angles))


def render_view(s: Scene, theta: float, phi: float, spec: ProjectionSpec) -> np.ndarray:
    fn = project if spec.mode == PROJECTION else cross_section
    return fn(s, theta, phi, spec.size, spec.world_extent, spec.antialias)


# -- PNG ----------------------------------------------------------------------------

def to_uint8(image) -> np.ndarray:
    img = check_image(image)
    out = np.round(img * 255.0).astype(np.uint8)
    # keep geometry visible even when its coverage rounds down to zero
    out[..., 3] = np.where((img[..., 3] > 0) & (out[..., 3] == 0), 1, out[..., 3])
    return out


def save_png(path, image) -> None:
    PILImage.fromarray(to_uint8(image), mode="RGBA").save(path)


def load_png(path) -> np.ndarray:
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGBA"), dtype=np.float64) / 255.0
    return arr


def image_grid(images, columns: int) -> np.ndarray:
    """Tile equally sized images into one RGBA sheet (row-major)."""
    batch = check_images(images)
    n, h, w, _ = batch.shape
    rows = -(-n // columns)
    sheet = np.zeros((rows * h, columns * w, 4))
    for k, img in enumerate(batch):
        r, c = divmod(k, columns)
        sheet[r * h:(r + 1) * h, c * w:(c + 1) * w] = img
    return sheet
