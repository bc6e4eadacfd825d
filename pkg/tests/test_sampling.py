import numpy as np
import pytest

from matseg.errors import EmptyMeshError
from matseg.materials import MaterialLabelSet
from matseg.mesh import attach_labels, build_mesh
from matseg.sampling import (
    SurfaceSample,
    load_samples,
    positions_of,
    sample_surface_points,
    save_samples,
    subsample_even,
    visibility_filter,
)


def one_triangle():
    v = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    f = np.array([[0, 1, 2]])
    return build_mesh(v, f, ("t",), np.zeros(1, dtype=np.int64))


def two_triangles_9_to_1():
    v = np.array([
        [0.0, 0.0, 0.0], [6.0, 0.0, 0.0], [0.0, 3.0, 0.0],
        [10.0, 0.0, 0.0], [11.0, 0.0, 0.0], [10.0, 2.0, 0.0],
    ])
    f = np.array([[0, 1, 2], [3, 4, 5]])
    return build_mesh(v, f, ("big", "small"), np.array([0, 1]))


def box_mesh(lo, hi, closed=True):
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    corners = np.array([
        [lo[0], lo[1], lo[2]], [hi[0], lo[1], lo[2]],
        [hi[0], hi[1], lo[2]], [lo[0], hi[1], lo[2]],
        [lo[0], lo[1], hi[2]], [hi[0], lo[1], hi[2]],
        [hi[0], hi[1], hi[2]], [lo[0], hi[1], hi[2]],
    ])
    quads = [
        (0, 1, 5, 4),  # bottom
        (4, 5, 6, 7),  # front
        (1, 2, 6, 5),  # right
        (0, 4, 7, 3),  # left
        (0, 3, 2, 1),  # back
    ]
    if closed:
        quads.append((3, 7, 6, 2))  # top
    faces = []
    for a, b, c, d in quads:
        faces.append((a, b, c))
        faces.append((a, c, d))
    return corners, np.array(faces)


def test_single_triangle_sample_lands_on_it():
    mesh = one_triangle()
    samples = sample_surface_points(mesh, 1, seed=0)
    assert len(samples) == 1
    s = samples[0]
    assert s.face == 0
    assert np.all(s.barycentric >= 0)
    assert abs(s.barycentric.sum() - 1.0) < 1e-9


def test_area_weighted_split():
    mesh = two_triangles_9_to_1()
    samples = sample_surface_points(mesh, 1000, seed=42, relax_iterations=0)
    big = sum(1 for s in samples if s.face == 0)
    # 3 sigma of Binomial(1000, 0.9)
    assert abs(big - 900) <= 3 * np.sqrt(1000 * 0.9 * 0.1)


def test_sampling_deterministic():
    mesh = two_triangles_9_to_1()
    a = sample_surface_points(mesh, 64, seed=7)
    b = sample_surface_points(mesh, 64, seed=7)
    assert [s.face for s in a] == [s.face for s in b]
    assert np.array_equal(positions_of(a), positions_of(b))


def test_barycentric_reconstructs_position():
    mesh = two_triangles_9_to_1()
    for s in sample_surface_points(mesh, 100, seed=3):
        tri = mesh.vertices[mesh.faces[s.face]]
        rebuilt = s.barycentric @ tri
        assert np.linalg.norm(rebuilt - s.position) < 1e-6 * mesh.bounding_radius


def test_samples_inherit_component_labels():
    mesh = attach_labels(two_triangles_9_to_1(), {"big": ["wood"], "small": ["glass"]})
    for s in sample_surface_points(mesh, 200, seed=1):
        want = "wood" if s.face == 0 else "glass"
        assert s.labels == MaterialLabelSet([want])


def test_zero_area_mesh_rejected():
    v = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    f = np.array([[0, 1, 2]])
    mesh = build_mesh(v, f, ("d",), np.zeros(1, dtype=np.int64))
    with pytest.raises(EmptyMeshError):
        sample_surface_points(mesh, 4, seed=0)


def test_outer_cube_samples_visible():
    verts, faces = box_mesh((0, 0, 0), (1, 1, 1))
    mesh = build_mesh(verts, faces, ("cube",), np.zeros(len(faces), dtype=np.int64))
    samples = sample_surface_points(mesh, 32, seed=0)
    kept = visibility_filter(mesh, samples)
    assert len(kept) == len(samples)
    assert all(s.visible for s in samples)


def test_double_walled_box_inner_samples_invisible():
    outer_v, outer_f = box_mesh((0, 0, 0), (3, 3, 3))
    inner_v, inner_f = box_mesh((1, 1, 1), (2, 2, 2))
    verts = np.vstack([outer_v, inner_v])
    faces = np.vstack([outer_f, inner_f + len(outer_v)])
    comp = np.array([0] * len(outer_f) + [1] * len(inner_f))
    mesh = build_mesh(verts, faces, ("outer", "inner"), comp)
    inner_face = len(outer_f)  # a bottom face of the inner box
    s = SurfaceSample(
        position=np.array([1.4, 1.0, 1.4]),
        face=inner_face,
        barycentric=np.array([1 / 3, 1 / 3, 1 / 3]),
        normal=np.array([0.0, -1.0, 0.0]),
    )
    kept = visibility_filter(mesh, [s])
    assert kept == []
    assert s.visible is False


def test_open_top_box_floor_visible():
    verts, faces = box_mesh((0, 0, 0), (1, 1, 1), closed=False)
    mesh = build_mesh(verts, faces, ("box",), np.zeros(len(faces), dtype=np.int64))
    s = SurfaceSample(
        position=np.array([0.4, 0.0, 0.4]),
        face=0,
        barycentric=np.array([1 / 3, 1 / 3, 1 / 3]),
        normal=np.array([0.0, 1.0, 0.0]),  # inner side of the floor
    )
    kept = visibility_filter(mesh, [s])
    assert len(kept) == 1 and kept[0].visible


def test_visibility_monotone_under_face_removal():
    outer_v, outer_f = box_mesh((0, 0, 0), (3, 3, 3))
    inner_v, inner_f = box_mesh((1, 1, 1), (2, 2, 2))
    verts = np.vstack([outer_v, inner_v])
    all_faces = np.vstack([outer_f, inner_f + len(outer_v)])
    full = build_mesh(verts, all_faces, ("m",), np.zeros(len(all_faces), dtype=np.int64))
    # dropping the outer shell exposes the formerly hidden inner box
    part = build_mesh(verts, all_faces[len(outer_f):], ("m",),
                      np.zeros(len(inner_f), dtype=np.int64))

    def probe():
        return SurfaceSample(
            position=np.array([1.4, 1.0, 1.4]),
            face=0,
            barycentric=np.array([1 / 3, 1 / 3, 1 / 3]),
            normal=np.array([0.0, -1.0, 0.0]),
        )

    assert visibility_filter(full, [probe()]) == []
    assert len(visibility_filter(part, [probe()])) == 1


def test_subsample_exact_size_and_subset():
    mesh = two_triangles_9_to_1()
    samples = sample_surface_points(mesh, 150, seed=5)
    out = subsample_even(samples, 75, seed=5)
    assert len(out) == 75
    ids = {id(s) for s in samples}
    assert all(id(s) in ids for s in out)


def test_subsample_spreads_better_than_random():
    mesh = two_triangles_9_to_1()
    samples = sample_surface_points(mesh, 150, seed=9)
    pos = positions_of(samples)

    def min_gap(idx):
        p = pos[idx]
        d = np.linalg.norm(p[:, None, :] - p[None, :, :], axis=2)
        np.fill_diagonal(d, np.inf)
        return d.min()

    fps = subsample_even(samples, 75, seed=9)
    where = {id(s): i for i, s in enumerate(samples)}
    fps_idx = [where[id(s)] for s in fps]
    rng = np.random.default_rng(9)
    random_gaps = [min_gap(rng.choice(150, size=75, replace=False)) for _ in range(100)]
    assert min_gap(np.array(fps_idx)) >= max(random_gaps)


def test_subsample_identity_and_single():
    mesh = one_triangle()
    samples = sample_surface_points(mesh, 20, seed=2)
    whole = subsample_even(samples, 20, seed=0)
    assert sorted(id(s) for s in whole) == sorted(id(s) for s in samples)
    single = subsample_even(samples, 1, seed=11)
    start = int(np.random.default_rng(11).integers(20))
    assert single == [samples[start]]


def test_subsample_overflow_warns_and_returns_all():
    mesh = one_triangle()
    samples = sample_surface_points(mesh, 5, seed=0)
    with pytest.warns(UserWarning):
        out = subsample_even(samples, 10, seed=0)
    assert out == samples


def test_samples_round_trip(tmp_path):
    mesh = attach_labels(two_triangles_9_to_1(), {"big": ["wood"], "small": ["glass"]})
    samples = sample_surface_points(mesh, 40, seed=13)
    visibility_filter(mesh, samples)
    path = tmp_path / "samples.jsonl"
    save_samples(str(path), samples)
    back = load_samples(str(path), mesh)
    assert len(back) == len(samples)
    for a, b in zip(samples, back):
        assert a.face == b.face
        assert a.labels == b.labels
        assert a.visible == b.visible
        assert np.allclose(a.position, b.position)
        assert np.allclose(a.barycentric, b.barycentric)
