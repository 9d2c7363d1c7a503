import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from cellsynth.features import load_preset, random_features
from cellsynth.mesh import Mesh, MeshError, Scene, build_cell, icosphere, translation
from cellsynth.render import (
    CROSS_SECTION, PROJECTION, ProjectionSpec, check_image, cross_section, load_png, project,
    render_batch, rotate_about_view_axis, save_png,
)

SIZE, EXTENT = 128, 3.0
R_PX = SIZE / EXTENT  # pixels per world unit
MEMBRANE_RGBA = np.array([0.9, 0.5, 0.7, 1.0])
NUCLEUS_RGBA = np.array([0.3, 0.2, 0.6, 1.0])


def sphere_scene(s=3):
    return Scene([icosphere(s)])


def nucleated_sphere():
    outer, inner = icosphere(4), icosphere(4).scaled(0.5)
    v = np.vstack([outer.vertices, inner.vertices])
    t = np.vstack([outer.triangles, inner.triangles + len(outer.vertices)])
    mats = np.r_[np.zeros(len(outer.triangles)), np.ones(len(inner.triangles))].astype(np.int8)
    return Scene([Mesh(v, t, mats, np.stack([MEMBRANE_RGBA, NUCLEUS_RGBA]))])


def sphere_pair():
    a = icosphere(3)
    return Scene([a, a.scaled(0.7)], [translation([1.4, 0.3, 0.0]), translation([-1.2, -0.4, 0.2])])


def silhouette(img):
    return int((img[..., 3] >= 0.5).sum())


ANGLES = [(0.0, 0.0), (0.4, 1.1), (np.pi / 2, 0.3), (2.2, 4.0), (np.pi, 5.5)]


@pytest.mark.parametrize("theta,phi", ANGLES)
def test_sphere_silhouette_matches_disk_area(theta, phi):
    img = project(sphere_scene(), theta, phi, SIZE, EXTENT)
    assert abs(silhouette(img) / (np.pi * R_PX ** 2) - 1) < 0.02


@pytest.mark.parametrize("theta,phi", ANGLES)
def test_sphere_section_matches_disk_area(theta, phi):
    img = cross_section(sphere_scene(), theta, phi, SIZE, EXTENT)
    assert abs(silhouette(img) / (np.pi * R_PX ** 2) - 1) < 0.02


def test_background_alpha_zero_outside_silhouette():
    img = project(sphere_scene(), 0.3, 0.2, SIZE, EXTENT)
    yy, xx = np.mgrid[:SIZE, :SIZE] + 0.5
    far = np.hypot(xx - SIZE / 2, yy - SIZE / 2) > R_PX + 2
    assert np.all(img[far, 3] == 0)
    check_image(img)


@pytest.mark.parametrize("render", [project, cross_section])
def test_alpha_halo_is_at_most_one_pixel(render):
    img = render(sphere_pair(), 0.7, 0.2, 64, 5.0)
    opaque = img[..., 3] == 1
    partial = (img[..., 3] > 0) & ~opaque
    near = ndimage.binary_dilation(opaque, structure=np.ones((3, 3)))
    assert not np.any(partial & ~near)


def test_concentric_nucleus_radius_ratio():
    img = cross_section(nucleated_sphere(), 0.5, 0.8, SIZE, EXTENT)
    solid = img[..., 3] >= 0.5
    nucleus = solid & (np.abs(img[..., :3] - NUCLEUS_RGBA[:3]).max(axis=2) < 0.05)
    membrane = solid & (np.abs(img[..., :3] - MEMBRANE_RGBA[:3]).max(axis=2) < 0.05)
    r_inner = np.sqrt(nucleus.sum() / np.pi)
    r_outer = np.sqrt(solid.sum() / np.pi)
    assert membrane.sum() > 0
    assert abs(r_inner / r_outer - 0.5) < 0.5 * 0.05
    # the nucleus sits in the middle of the disk
    cy, cx = ndimage.center_of_mass(nucleus)
    assert abs(cy - SIZE / 2) < 1 and abs(cx - SIZE / 2) < 1


def test_disjoint_cells_give_two_components():
    a = icosphere(3)
    scene = Scene([a, a], [translation([-1.5, 0, 0]), translation([1.5, 0, 0])])
    img = cross_section(scene, np.pi / 2, np.pi / 2, 64, 5.0)  # plane normal along y
    _, count = ndimage.label(img[..., 3] > 0, structure=np.ones((3, 3)))
    assert count >= 2


def test_plane_missing_geometry_is_transparent():
    a = icosphere(2)
    scene = Scene([a, a], [translation([-2.0, 0, 0]), translation([2.0, 0, 0])])
    # slicing plane through the centroid with normal along x misses both spheres
    img = cross_section(scene, np.pi / 2, 0.0, 32, 5.0)
    assert np.all(img[..., 3] == 0)


def test_degenerate_scene_renders_transparent():
    flat = Mesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0.0]]), np.array([[0, 1, 2], [0, 2, 1]]))
    for fn in (project, cross_section):
        assert np.all(fn(Scene([flat]), 0.1, 0.2, 32, 5.0) == 0)


def test_empty_scene_rejected():
    with pytest.raises(MeshError):
        project(Scene([]), 0, 0)


@pytest.mark.parametrize("alpha", [np.pi / 2, np.pi, 3 * np.pi / 2])
@pytest.mark.parametrize("phi", [0.0, 0.6])
def test_rotation_about_view_axis_matches_phi_shift(alpha, phi):
    s = sphere_pair()
    rotated = project(rotate_about_view_axis(s, 0.0, phi, alpha), 0.0, phi, 64, 5.0)
    shifted = project(s, 0.0, phi + alpha, 64, 5.0)
    assert np.abs(rotated - shifted).max() <= 2 / 255


def test_render_batch_order_and_consistency():
    s = sphere_pair()
    spec = ProjectionSpec(thetas=[0.2, 1.0, 2.5], phis=[0.0, 1.5, 3.0, 4.5], size=32,
                          mode=PROJECTION, world_extent=5.0)
    batch = render_batch(s, spec)
    assert [(t, p) for t, p, _ in batch] == spec.angles
    assert len(batch) == 12
    for t, p, img in batch:
        assert np.array_equal(img, project(s, t, p, 32, 5.0))


def test_render_batch_sections_match_single_calls():
    s = sphere_pair()
    spec = ProjectionSpec(thetas=[0.3, 1.2], phis=[0.0, 2.0], size=32, mode=CROSS_SECTION)
    for t, p, img in render_batch(s, spec):
        assert np.array_equal(img, cross_section(s, t, p, 32, 5.0))


def test_render_batch_parallel_equals_sequential():
    s = sphere_pair()
    spec = ProjectionSpec(thetas=[0.3, 1.2, 2.0], phis=[0.0, 2.0], size=32, mode=PROJECTION)
    seq, par = render_batch(s, spec), render_batch(s, spec, n_jobs=3)
    assert all(np.array_equal(a[2], b[2]) for a, b in zip(seq, par))


def test_sphere_batch_silhouettes_agree():
    spec = ProjectionSpec(thetas=[0.3, 1.4, 2.6], phis=[0.0, 1.0, 2.5, 4.0], size=SIZE,
                          mode=PROJECTION, world_extent=EXTENT)
    counts = np.array([silhouette(img) for _, _, img in render_batch(sphere_scene(), spec)])
    assert counts.max() / counts.min() - 1 < 0.02


@pytest.mark.parametrize("kwargs", [
    dict(thetas=[], phis=[0.0]), dict(thetas=[0.0], phis=[0.0], size=8),
    dict(thetas=[0.0], phis=[0.0], mode="perspective"),
])
def test_projection_spec_validation(kwargs):
    with pytest.raises(ValueError):
        ProjectionSpec(**kwargs)


def test_png_round_trip(tmp_path):
    layout, c = load_preset("table1-32")
    img = project(Scene([build_cell(random_features(layout, c, 2), c, 2)]), 0.5, 0.5, 32, 3.0)
    path = tmp_path / "cell.png"
    save_png(path, img)
    back = load_png(path)
    assert back.shape == (32, 32, 4)
    assert np.array_equal(back[..., 3] == 0, img[..., 3] == 0)
    opaque = img[..., 3] == 1
    assert np.abs(back[opaque] - img[opaque]).max() <= 0.5 / 255 + 1e-12


def test_check_image_rejects_bad_input():
    with pytest.raises(ValueError):
        check_image(np.zeros((4, 4, 3)))
    with pytest.raises(ValueError):
        check_image(np.full((4, 4, 4), 1.5))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0, np.pi), st.floats(0, 2 * np.pi))
def test_rendered_samples_are_valid_images(seed, theta, phi):
    layout, c = load_preset("table1-32")
    s = Scene([build_cell(random_features(layout, c, seed), c, 1)])
    for fn in (project, cross_section):
        img = fn(s, theta, phi, 16, 4.0)
        check_image(img)
        assert img[..., 3].max() > 0
