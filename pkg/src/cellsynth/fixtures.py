"""Synthetic stand-in data: ellipsoidal cells with known parameters, rendered like real patches."""

from __future__ import annotations

import numpy as np

from .features import FeatureLayout, load_preset, random_cluster
from .mesh import Material, Mesh, Scene, assemble_cluster, icosphere, rotation_matrix
from .render import CROSS_SECTION, cross_section, project

CLASSES = ("normal", "cancer")

# per-class ranges: semi-axis radius, axis ratio, nucleus fraction, membrane red, nucleus red
_CLASS_PARAMS = {
    "normal": dict(radius=(1.15, 1.35), ratio=(0.75, 0.95), nucleus=(0.40, 0.50),
                   membrane_red=(0.85, 0.95), nucleus_red=(0.15, 0.25)),
    "cancer": dict(radius=(1.30, 1.50), ratio=(0.60, 0.85), nucleus=(0.55, 0.65),
                   membrane_red=(0.60, 0.70), nucleus_red=(0.40, 0.50)),
}


def _ellipsoid(axes, rotation, s):
    m = icosphere(s)
    return m.vertices * axes @ rotation.T, m.triangles


def fixture_cell(label: str, rng, subdivisions: int = 3) -> tuple:
    """One ellipsoidal cell mesh and the parameters that produced it."""
    if label not in _CLASS_PARAMS:
        raise ValueError(f"unknown class {label!r}; expected one of {CLASSES}")
    cp = _CLASS_PARAMS[label]
    u = {k: rng.uniform(*v) for k, v in cp.items()}
    axes = u["radius"] * np.array([1.0, u["ratio"], 0.5 * (1 + u["ratio"])])
    axis = rng.normal(size=3)
    rot = rotation_matrix(axis / np.linalg.norm(axis), rng.uniform(0, 2 * np.pi))
    outer_v, outer_t = _ellipsoid(axes, rot, subdivisions)
    inner_v, inner_t = _ellipsoid(axes * u["nucleus"], rot, subdivisions)
    defaults = FeatureLayout()
    membrane = np.array(defaults.membrane_color, dtype=float)
    nucleus = np.array(defaults.nucleus_color, dtype=float)
    membrane[0], nucleus[0] = u["membrane_red"], u["nucleus_red"]
    mesh = Mesh(np.vstack([outer_v, inner_v]),
                np.vstack([outer_t, inner_t + len(outer_v)]),
                np.r_[np.full(len(outer_t), Material.MEMBRANE),
                      np.full(len(inner_t), Material.NUCLEUS)].astype(np.int8),
                np.stack([membrane, nucleus]))
    return mesh, {"label": label, "axes": axes.tolist(), **u}


def fixture_images(label: str, n: int, seed: int = 0, size: int = 32, world_extent: float = 4.0,
                   mode: str = CROSS_SECTION, subdivisions: int = 3) -> np.ndarray:
    """``n`` rendered fixture cells of one class at random view angles, shape (n, size, size, 4)."""
    rng = np.random.default_rng([seed, CLASSES.index(label) if label in CLASSES else 99])
    render = cross_section if mode == CROSS_SECTION else project
    out = np.zeros((n, size, size, 4))
    for i in range(n):
        mesh, _ = fixture_cell(label, rng, subdivisions)
        theta, phi = np.arccos(rng.uniform(-1, 1)), rng.uniform(0, 2 * np.pi)
        out[i] = render(Scene([mesh]), theta, phi, size, world_extent)
    return out


def fixture_patch(n_cells: int = 2, size: int = 96, seed: int = 0) -> tuple:
    """White H&E-like patch with dark purple elliptical nuclei; returns (rgb image, list of masks)."""
    rng = np.random.default_rng(seed)
    img = np.ones((size, size, 4))
    yy, xx = np.mgrid[:size, :size] + 0.5
    masks = []
    for k in range(n_cells):
        for _ in range(100):
            cy, cx = rng.uniform(size * 0.2, size * 0.8, 2)
            ry, rx = rng.uniform(size * 0.06, size * 0.12, 2)
            m = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
            grown = ((yy - cy) / (ry + 4)) ** 2 + ((xx - cx) / (rx + 4)) ** 2 <= 1
            if not any((grown & other).any() for other in masks):
                break
        else:
            raise ValueError("could not place well-separated cells; use fewer or a larger patch")
        img[m, :3] = [0.35, 0.2, 0.6]
        masks.append(m)
    return img, masks


def fixture_clusters(n: int, seed: int = 0, preset: str = "table1-5", slots: int = 3,
                     size: int = 32, world_extent: float = 8.0, thetas=(0.0, np.pi / 2),
                     phis=(0.0, np.pi / 2), subdivisions: int = 2) -> tuple:
    """Projections of ``n`` random clusters with known features, each at one grid angle.

    Returns ``(images, clusters)``.
    """
    layout, c = load_preset(preset)
    rng = np.random.default_rng(seed)
    images, clusters = np.zeros((n, size, size, 4)), []
    for i in range(n):
        g = random_cluster(layout, c, slots, int(rng.integers(2**31)))
        scene = assemble_cluster(g, c, subdivisions)
        theta, phi = thetas[rng.integers(len(thetas))], phis[rng.integers(len(phis))]
        images[i] = project(scene, theta, phi, size, world_extent)
        clusters.append(g)
    return images, clusters
