"""Watertight cell and cluster meshes built from constrained features.

Each shell is an icosphere whose vertex directions carry a radial height field:
the deformation coefficients (interpolated from evenly spread anchor
directions), a smooth normal-displacement bump, then a few passes of uniform
Laplacian smoothing of the height field.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from functools import lru_cache

import numpy as np
from scipy import sparse

from .features import CellFeatures, ClusterFeatures, ConstraintSet, clamp_features

MAX_SUBDIVISIONS = 6
SMOOTH_PASSES = 3
SMOOTH_LAMBDA = 0.5
IDW_POWER = 2.0
MIN_HEIGHT = 0.05
NUCLEUS_MARGIN = 0.98


class MeshError(ValueError):
    pass


class Material(IntEnum):
    MEMBRANE = 0
    NUCLEUS = 1


MATERIAL_NAMES = {Material.MEMBRANE: "membrane", Material.NUCLEUS: "nucleus"}
DEFAULT_COLORS = np.array([[0.85, 0.55, 0.75, 1.0], [0.35, 0.2, 0.6, 1.0]])


@dataclass
class Mesh:
    vertices: np.ndarray
    triangles: np.ndarray
    materials: np.ndarray = None
    colors: np.ndarray = field(default_factory=lambda: DEFAULT_COLORS.copy())

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.materials is None:
            self.materials = np.zeros(len(self.triangles), dtype=np.int8)
        self.materials = np.asarray(self.materials, dtype=np.int8)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(2, 4)
        if len(self.materials) != len(self.triangles):
            raise MeshError("one material label per triangle required")
        if not np.all(np.isfinite(self.vertices)):
            raise MeshError("non-finite vertex coordinates")

    def copy(self) -> "Mesh":
        return Mesh(self.vertices.copy(), self.triangles.copy(), self.materials.copy(),
                    self.colors.copy())

    def transformed(self, matrix) -> "Mesh":
        matrix = np.asarray(matrix, dtype=np.float64)
        v = self.vertices @ matrix[:3, :3].T + matrix[:3, 3]
        return Mesh(v, self.triangles, self.materials, self.colors)

    def translated(self, t) -> "Mesh":
        return Mesh(self.vertices + np.asarray(t, dtype=np.float64), self.triangles,
                    self.materials, self.colors)

    def scaled(self, k: float) -> "Mesh":
        return Mesh(self.vertices * float(k), self.triangles, self.materials, self.colors)

    def submesh(self, material: int) -> "Mesh":
        keep = self.materials == int(material)
        tris = self.triangles[keep]
        used, inverse = np.unique(tris, return_inverse=True)
        return Mesh(self.vertices[used], inverse.reshape(-1, 3), self.materials[keep],
                    self.colors)

    def edge_use_counts(self) -> np.ndarray:
        t = self.triangles
        edges = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        return counts

    def is_watertight(self) -> bool:
        """Every undirected edge is shared by exactly two triangles, with opposite directions."""
        if len(self.triangles) == 0:
            return False
        t = self.triangles
        directed = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        if np.any(self.edge_use_counts() != 2):
            return False
        # consistent orientation: each directed edge appears exactly once
        return len(np.unique(directed, axis=0)) == len(directed)

    def signed_volume(self) -> float:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)

    def solid_volume_and_centroid(self) -> tuple:
        """Volume and centroid of the solid bounded by the outer (membrane) shell."""
        m = self.submesh(Material.MEMBRANE) if np.any(self.materials == Material.MEMBRANE) else self
        a, b, c = (m.vertices[m.triangles[:, i]] for i in range(3))
        vol = np.einsum("ij,ij->i", a, np.cross(b, c)) / 6.0
        total = vol.sum()
        if abs(total) < 1e-15:
            return 0.0, np.zeros(3)
        centroid = (vol[:, None] * (a + b + c) / 4.0).sum(axis=0) / total
        return float(total), centroid


@dataclass
class Scene:
    meshes: list
    transforms: list = None

    def __post_init__(self):
        if self.transforms is None:
            self.transforms = [np.eye(4) for _ in self.meshes]
        if len(self.transforms) != len(self.meshes):
            raise MeshError("one transform per mesh required")

    def world_meshes(self) -> list:
        return [m.transformed(t) for m, t in zip(self.meshes, self.transforms)]

    def bounding_sphere(self) -> tuple:
        if not self.meshes:
            raise MeshError("empty scene")
        pts = np.concatenate([m.vertices for m in self.world_meshes()])
        center = 0.5 * (pts.min(axis=0) + pts.max(axis=0))
        return center, float(np.linalg.norm(pts - center, axis=1).max())

    def translated(self, t) -> "Scene":
        out = []
        for m in self.transforms:
            m = m.copy()
            m[:3, 3] += np.asarray(t, dtype=np.float64)
            out.append(m)
        return Scene(list(self.meshes), out)

    def rotated(self, axis, angle: float) -> "Scene":
        """Rotate the whole scene about ``axis`` through the origin."""
        R = np.eye(4)
        R[:3, :3] = rotation_matrix(axis, angle)
        return Scene(list(self.meshes), [R @ t for t in self.transforms])


def rotation_matrix(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    c, s = np.cos(angle), np.sin(angle)
    K = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    return np.eye(3) * c + s * K + (1 - c) * np.outer(axis, axis)


def translation(t) -> np.ndarray:
    m = np.eye(4)
    m[:3, 3] = t
    return m


# -- primitives -------------------------------------------------------------------

def _icosahedron():
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    return verts / np.linalg.norm(verts, axis=1)[:, None], faces


def _subdivide(verts, faces):
    edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    uniq, inverse = np.unique(np.sort(edges, axis=1), axis=0, return_inverse=True)
    mids = verts[uniq[:, 0]] + verts[uniq[:, 1]]
    mids /= np.linalg.norm(mids, axis=1)[:, None]
    n_f = len(faces)
    mid_idx = (len(verts) + inverse.reshape(-1)).reshape(3, n_f).T  # ab, bc, ca
    a, b, c = faces.T
    ab, bc, ca = mid_idx.T
    new_faces = np.concatenate([
        np.stack([a, ab, ca], 1), np.stack([b, bc, ab], 1),
        np.stack([c, ca, bc], 1), np.stack([ab, bc, ca], 1),
    ])
    return np.concatenate([verts, mids]), new_faces


@lru_cache(maxsize=None)
def _icosphere_arrays(subdivisions: int):
    v, f = _icosahedron()
    for _ in range(subdivisions):
        v, f = _subdivide(v, f)
    v.setflags(write=False)
    f.setflags(write=False)
    return v, f


def icosphere(subdivisions: int = 3) -> Mesh:
    if not 0 <= subdivisions <= MAX_SUBDIVISIONS:
        raise MeshError(f"subdivisions must be in [0, {MAX_SUBDIVISIONS}]")
    v, f = _icosphere_arrays(int(subdivisions))
    return Mesh(v.copy(), f.copy())


def unit_cube() -> Mesh:
    v = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
                  [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]], dtype=np.float64)
    f = np.array([[0, 2, 1], [0, 3, 2], [4, 5, 6], [4, 6, 7], [0, 1, 5], [0, 5, 4],
                  [1, 2, 6], [1, 6, 5], [2, 3, 7], [2, 7, 6], [3, 0, 4], [3, 4, 7]])
    return Mesh(v, f)


@lru_cache(maxsize=None)
def fibonacci_directions(n: int) -> np.ndarray:
    """``n`` nearly uniform unit vectors (golden-spiral lattice)."""
    if n == 0:
        return np.zeros((0, 3))
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = np.pi * (3.0 - np.sqrt(5.0)) * np.arange(n)
    d = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    d.setflags(write=False)
    return d


@lru_cache(maxsize=None)
def _idw_weights(n_anchors: int, subdivisions: int) -> np.ndarray:
    dirs, _ = _icosphere_arrays(subdivisions)
    anchors = fibonacci_directions(n_anchors)
    d2 = np.maximum(0.0, 2.0 - 2.0 * dirs @ anchors.T)  # squared chord distance
    w = 1.0 / np.maximum(d2, 1e-24) ** (IDW_POWER / 2)
    exact = d2 < 1e-18
    rows = exact.any(axis=1)
    w[rows] = exact[rows].astype(np.float64)
    w /= w.sum(axis=1, keepdims=True)
    w.setflags(write=False)
    return w


@lru_cache(maxsize=None)
def _modifier_sq_distance(subdivisions: int) -> np.ndarray:
    """Squared distance from each vertex direction to the nearest base-icosahedron vertex."""
    dirs, _ = _icosphere_arrays(subdivisions)
    base, _ = _icosahedron()
    d2 = np.maximum(0.0, 2.0 - 2.0 * dirs @ base.T).min(axis=1)
    d2.setflags(write=False)
    return d2


@lru_cache(maxsize=None)
def _smoothing_operator(subdivisions: int):
    _, faces = _icosphere_arrays(subdivisions)
    n = int(faces.max()) + 1
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    adj = sparse.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n)).tocsr()
    adj = ((adj + adj.T) > 0).astype(np.float64)
    deg = np.asarray(adj.sum(axis=1)).ravel()
    mean = sparse.diags(1.0 / deg) @ adj
    return ((1 - SMOOTH_LAMBDA) * sparse.identity(n) + SMOOTH_LAMBDA * mean).tocsr()


def adjacency_pairs(subdivisions: int) -> np.ndarray:
    _, faces = _icosphere_arrays(subdivisions)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    return np.unique(np.sort(e, axis=1), axis=0)


def laplacian_smooth(heights, subdivisions: int, passes: int = SMOOTH_PASSES) -> np.ndarray:
    """Uniform-weight Laplacian smoothing of a per-vertex scalar field."""
    op = _smoothing_operator(subdivisions)
    h = np.asarray(heights, dtype=np.float64)
    for _ in range(passes):
        h = op @ h
    return h


def shell_heights(coeffs, subdivisions: int, strength: float = 0.0, distance: float = 1.0,
                  smooth: bool = True) -> np.ndarray:
    """Radial height of every icosphere vertex for one shell (unit base radius)."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    dirs, _ = _icosphere_arrays(subdivisions)
    h = np.ones(len(dirs))
    if coeffs.size:
        h = h + _idw_weights(coeffs.size, subdivisions) @ coeffs
    if strength != 0.0:
        h = h + strength * np.exp(-_modifier_sq_distance(subdivisions) / distance ** 2)
    if smooth:
        h = laplacian_smooth(h, subdivisions)
    return np.maximum(h, MIN_HEIGHT)


@lru_cache(maxsize=None)
def _cone_normals(subdivisions: int):
    dirs, faces = _icosphere_arrays(subdivisions)
    ua, ub, uc = (dirs[faces[:, i]] for i in range(3))
    out = np.concatenate([np.cross(ua, ub), np.cross(ub, uc), np.cross(uc, ua)]).T  # (3, 3F)
    out = np.ascontiguousarray(out)
    out.setflags(write=False)
    return out


def _radial_extent(heights, subdivisions: int, query) -> np.ndarray:
    """Distance from the origin to a star-shaped shell along unit directions ``query``."""
    dirs, faces = _icosphere_arrays(subdivisions)
    cones = _cone_normals(subdivisions)
    n_f = len(faces)
    side = (query @ cones).reshape(len(query), 3, n_f)
    inside = np.all(side >= -1e-12, axis=1)
    face = np.argmax(inside, axis=1)
    a, b, c = (dirs[faces[face, i]] * heights[faces[face, i], None] for i in range(3))
    normals = np.cross(b - a, c - a)
    denom = np.einsum("ij,ij->i", normals, query)
    num = np.einsum("ij,ij->i", normals, a)
    good = inside[np.arange(len(query)), face] & (np.abs(denom) > 1e-15)
    t = np.where(good, num / np.where(good, denom, 1.0), heights.min())
    return np.where(t > 0, t, heights.min())


def build_cell(f: CellFeatures, c: ConstraintSet, subdivisions: int = 3) -> Mesh:
    """Construct a watertight cell mesh (membrane shell, optional nucleus shell)."""
    if clamp_features(f, c) != f:
        raise MeshError("features violate the constraint set; call clamp_features first")
    dirs, faces = _icosphere_arrays(subdivisions)
    h_mem = shell_heights(f.deformation, subdivisions, f.surface_strength, f.surface_distance)
    membrane = dirs * h_mem[:, None]
    colors = np.stack([f.membrane_color, f.nucleus_color])
    if not f.layout.has_nucleus:
        return Mesh(membrane * f.scale, faces.copy(), np.zeros(len(faces), np.int8), colors)

    h_nuc = shell_heights(f.nucleus_deformation, subdivisions) * c.nucleus_radius
    center = np.array(f.nucleus_offset, dtype=np.float64)
    rc = np.linalg.norm(center)
    if rc > 0:
        limit = _radial_extent(h_mem, subdivisions, (center / rc)[None])[0]
        if rc >= 0.5 * limit:
            center = center * (0.5 * limit / rc)
    nucleus = center + dirs * h_nuc[:, None]
    # shrink toward the nucleus center until every vertex is strictly inside
    for _ in range(64):
        r = np.linalg.norm(nucleus, axis=1)
        q = nucleus / np.maximum(r, 1e-15)[:, None]
        limit = _radial_extent(h_mem, subdivisions, q)
        ratio = np.max(r / (NUCLEUS_MARGIN * limit))
        if ratio < 1.0:
            break
        nucleus = center + (nucleus - center) * min(0.95, 0.99 / ratio)
    verts = np.concatenate([membrane, nucleus]) * f.scale
    tris = np.concatenate([faces, faces + len(dirs)])
    mats = np.concatenate([np.zeros(len(faces), np.int8), np.ones(len(faces), np.int8)])
    return Mesh(verts, tris, mats, colors)


def mesh_volume(m: Mesh) -> float:
    if not m.is_watertight():
        raise MeshError("mesh is not watertight")
    return m.signed_volume()


def points_inside(m: Mesh, points, direction=(0.5773, 0.5774, 0.5775)) -> np.ndarray:
    """Ray-parity point-in-mesh test (watertight meshes)."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    a, b, c = (m.vertices[m.triangles[:, i]] for i in range(3))
    e1, e2 = b - a, c - a
    p = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, p)
    ok = np.abs(det) > 1e-14
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    counts = np.zeros(len(points), dtype=np.int64)
    for start in range(0, len(points), 256):
        s = points[start:start + 256, None, :] - a[None]
        u = np.einsum("pij,ij->pi", s, p) * inv
        q = np.cross(s, e1[None])
        v = np.einsum("ij,pij->pi", np.broadcast_to(d, e1.shape), q) * inv
        t = np.einsum("ij,pij->pi", e2, q) * inv
        hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0)
        counts[start:start + 256] = hit.sum(axis=1)
    return counts % 2 == 1


# -- scenes -------------------------------------------------------------------------

def separate_positions(positions, scales, factor: float = 0.6, max_sweeps: int = 200) -> np.ndarray:
    """Push cell centers apart until every pair is at least ``factor * (s_i + s_j)`` apart."""
    p = np.array(positions, dtype=np.float64).reshape(-1, 3)
    s = np.asarray(scales, dtype=np.float64)
    n = len(p)
    if n < 2:
        return p
    fallback_dirs = fibonacci_directions(max(2, n * n))
    floor = factor * (s[:, None] + s[None, :])
    for _ in range(max_sweeps):
        moved = False
        for i in range(n):
            for j in range(i + 1, n):
                delta = p[j] - p[i]
                dist = np.linalg.norm(delta)
                if dist >= floor[i, j]:
                    continue
                u = delta / dist if dist > 1e-12 else fallback_dirs[i * n + j]
                push = 0.5 * (floor[i, j] - dist) * (1 + 1e-6) + 1e-12
                p[i] -= push * u
                p[j] += push * u
                moved = True
        if not moved:
            return p
    # line the cells up along x; always satisfies the floor
    order = np.argsort(p[:, 0], kind="stable")
    x = 0.0
    out = np.zeros_like(p)
    for rank, idx in enumerate(order):
        if rank:
            x += floor[order[rank - 1], idx] * 1.001
        out[idx] = [x, 0.0, 0.0]
    return out - out.mean(axis=0)


def assemble_cluster(g: ClusterFeatures, c: ConstraintSet, subdivisions: int = 3) -> Scene:
    cells = [clamp_features(f, c) for f in g.cells]
    scales = [f.scale for f in cells]
    positions = separate_positions(g.positions, scales, c.overlap_factor)
    meshes = [build_cell(f, c, subdivisions) for f in cells]
    return Scene(meshes, [translation(p) for p in positions])


def scene_from_cell(f: CellFeatures, c: ConstraintSet, subdivisions: int = 3) -> Scene:
    return Scene([build_cell(f, c, subdivisions)])


def center_of_gravity(s: Scene) -> np.ndarray:
    """Volume-weighted centroid of the solids bounded by each mesh's membrane shell."""
    if not s.meshes:
        raise MeshError("empty scene")
    total, acc = 0.0, np.zeros(3)
    for m in s.world_meshes():
        vol, cen = m.solid_volume_and_centroid()
        total += vol
        acc += vol * cen
    if abs(total) < 1e-15:
        raise MeshError("scene has zero volume")
    return acc / total


def scene_volume(s: Scene) -> float:
    return sum(m.solid_volume_and_centroid()[0] for m in s.world_meshes())


# -- OBJ --------------------------------------------------------------------------

def export_obj(s: Scene, path) -> None:
    if not s.meshes:
        raise MeshError("cannot export an empty scene")
    lines = ["# cellsynth scene"]
    offset = 1
    for k, m in enumerate(s.world_meshes()):
        lines.append(f"o cell_{k}")
        lines.extend(f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in m.vertices)
        for mat in (Material.MEMBRANE, Material.NUCLEUS):
            tris = m.triangles[m.materials == mat]
            if len(tris) == 0:
                continue
            lines.append(f"usemtl {MATERIAL_NAMES[mat]}")
            lines.extend(f"f {a + offset} {b + offset} {c + offset}" for a, b, c in tris)
        offset += len(m.vertices)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_obj(path) -> Scene:
    names = {v: k for k, v in MATERIAL_NAMES.items()}
    objects = []
    verts = []
    current = None
    material = Material.MEMBRANE
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "o":
                current = {"tris": [], "mats": []}
                objects.append(current)
            elif parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "usemtl":
                material = names.get(parts[1], Material.MEMBRANE)
            elif parts[0] == "f":
                if current is None:
                    current = {"tris": [], "mats": []}
                    objects.append(current)
                current["tris"].append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
                current["mats"].append(int(material))
    verts = np.asarray(verts, dtype=np.float64)
    meshes = []
    for obj in objects:
        tris = np.asarray(obj["tris"], dtype=np.int64)
        used, inverse = np.unique(tris, return_inverse=True)
        meshes.append(Mesh(verts[used], inverse.reshape(-1, 3), obj["mats"]))
    return Scene(meshes)
