import json

import numpy as np
import pytest
from scipy.spatial import cKDTree

from sare_kit.dataio import import_xyz, read_sample, write_sample
from sare_kit.errors import GenerationFailureError, InvalidArgumentError, SchemaError, TruncatedFileError, \
    VersionMismatchError
from sare_kit.fracture import (EPS_ADJ, EPS_F, SHAPES, AssemblySample, Fragment, augment, downsample,
                               fracture_object, k_schedule, label_structure, label_structure_bruteforce)
from sare_kit.geom import PointCloud, RigidTransform


def test_catalog_shapes_generate(rng):
    for shape in SHAPES:
        s = fracture_object(shape, 3, seed=1)
        assert s.K == 3
        assert sum(len(f.points) for f in s.fragments) >= 20000
        s.validate()


def test_k2_cube_is_adjacent():
    for seed in range(5):
        s = fracture_object("cube", 2, seed=seed, n_points=4000)
        assert s.adjacency.tolist() == [[0, 1], [1, 0]]


def test_bad_k_and_shape():
    with pytest.raises(InvalidArgumentError):
        fracture_object("cube", 1, seed=0)
    with pytest.raises(InvalidArgumentError):
        fracture_object("cube", 51, seed=0)
    with pytest.raises((InvalidArgumentError, KeyError)):
        fracture_object("torus", 2, seed=0)


def test_split_retry_exhaustion():
    # a plane that misses the solid can never give an admissible split
    with pytest.raises(GenerationFailureError):
        fracture_object("cube", 2, seed=0, n_points=2000, cut_planes=[((1.0, 0, 0), 5.0)])


def test_plane_fracture_labels_lie_on_plane(cube2):
    # global centering shifts the cut plane x = 0 to x = -c_x, with c the raw centroid
    plane_x = -cube2.meta["centroid"][0]
    both = [p[l.astype(bool)] for p, l in zip(cube2.posed_points(), cube2.fracture_labels)]
    assert all(len(on) for on in both)
    for on in both:
        assert np.abs(on[:, 0] - plane_x).max() < EPS_F


def test_k5_contact_graphs_connected():
    for seed in range(100):
        s = fracture_object(SHAPES[seed % len(SHAPES)], 5, seed=seed, n_points=3000)
        assert np.all(s.adjacency.sum(axis=1) >= 1)


def test_sample_invariants(small_samples):
    for s in small_samples:
        s.validate()
        A = s.adjacency
        assert np.array_equal(A, A.T) and not A.diagonal().any()
        for f in s.fragments:
            assert np.allclose(f.points.points.mean(axis=0), 0, atol=1e-6)
            assert f.area > 0
        union = np.concatenate(s.posed_points())
        assert np.linalg.norm(union.mean(axis=0)) < 1e-6


def test_adjacent_pairs_touch(small_samples):
    for s in small_samples:
        posed = s.posed_points()
        for i, j in zip(*np.nonzero(np.triu(s.adjacency))):
            d, _ = cKDTree(posed[j]).query(posed[i])
            assert d.min() < EPS_ADJ


def test_labels_imply_adjacency(small_samples):
    """A labelled point whose nearest other fragment is j within eps_f marks (i, j) adjacent.

    The converse does not hold in general: pairs whose closest approach lies in
    [eps_f, eps_adj) are adjacent without a fracture-labelled witness.
    """
    for s in small_samples:
        posed = s.posed_points()
        trees = [cKDTree(p) for p in posed]
        for i in range(s.K):
            pts = posed[i][s.fracture_labels[i].astype(bool)]
            d = np.stack([trees[j].query(pts)[0] if j != i else np.full(len(pts), np.inf) for j in range(s.K)], 1)
            for j in np.unique(d.argmin(axis=1)[d.min(axis=1) < EPS_F]):
                assert s.adjacency[i, j] == 1


def _separated_pair(gap):
    g = np.stack(np.meshgrid(np.linspace(0, 1, 12), np.linspace(0, 1, 12)), -1).reshape(-1, 2)
    a = np.c_[np.zeros(len(g)), g]
    b = a + [gap, 0, 0]
    frags = [Fragment(0, PointCloud(a - a.mean(0)), 1.0), Fragment(1, PointCloud(b - b.mean(0)), 1.0)]
    gts = [RigidTransform(np.eye(3), a.mean(0)), RigidTransform(np.eye(3), b.mean(0))]
    return AssemblySample("pair", frags, gts, np.zeros((2, 2), np.uint8),
                          [np.zeros(len(a), np.uint8), np.zeros(len(b), np.uint8)])


def test_label_structure_separation_and_contact():
    labels, A = label_structure(_separated_pair(10 * EPS_ADJ))
    assert A.sum() == 0 and all(l.sum() == 0 for l in labels)
    labels, A = label_structure(_separated_pair(0.0))
    assert A.tolist() == [[0, 1], [1, 0]] and all(l.all() for l in labels)


def test_label_structure_matches_bruteforce(small_samples):
    for k, s in enumerate(small_samples):
        d = downsample(s, 500, seed=k)
        labels, A = label_structure(d)
        bl, bA = label_structure_bruteforce(d.posed_points())
        assert np.array_equal(A, bA)
        assert all(np.array_equal(x, y) for x, y in zip(labels, bl))


def test_augment_properties(small_samples):
    s = small_samples[1]
    a1, a2 = augment(s, 0, seed=5), augment(s, 0, seed=5)
    for f1, f2 in zip(a1.fragments, a2.fragments):
        assert np.array_equal(f1.points.points, f2.points.points)
    assert np.array_equal(a1.fragments[0].points.points, s.fragments[0].points.points)
    for before, after in zip(s.posed_points(), a1.posed_points()):
        assert np.allclose(before, after, atol=1e-9)
    for f in a1.fragments:
        assert np.allclose(f.points.points.mean(axis=0), 0, atol=1e-9)
    assert not np.allclose(a1.fragments[1].points.points, s.fragments[1].points.points)


def test_k_schedule_histogram_exact():
    hist = {2: 5, 3: 3, 6: 2}
    ks = k_schedule(10, 2, 6, hist, seed=1)
    assert {k: ks.count(k) for k in set(ks)} == hist
    with pytest.raises(InvalidArgumentError):
        k_schedule(9, 2, 6, hist, seed=1)


# serialization

def test_round_trip(tmp_path, small_samples):
    s = small_samples[0]
    write_sample(tmp_path, s)
    r = read_sample(tmp_path / s.object_id)
    assert r.object_id == s.object_id and r.K == s.K
    assert np.array_equal(r.adjacency, s.adjacency)
    for a, b in zip(r.fragments, s.fragments):
        assert np.allclose(a.points.points, b.points.points, atol=1e-6)
        assert np.allclose(a.points.normals, b.points.normals, atol=1e-6)
        assert a.area == pytest.approx(b.area)
    for a, b in zip(r.fracture_labels, s.fracture_labels):
        assert np.array_equal(a, b)
    for a, b in zip(r.gt_transforms, s.gt_transforms):
        assert np.allclose(a.rotation, b.rotation) and np.allclose(a.translation, b.translation)


@pytest.mark.parametrize("cut,section", [(2, "count"), (40, "points"), (-10, "labels")])
def test_truncated_file_names_section(tmp_path, small_samples, cut, section):
    s = small_samples[2]
    d = write_sample(tmp_path, s)
    f = d / "frag_0.bin"
    raw = f.read_bytes()
    f.write_bytes(raw[:cut] if cut > 0 else raw[:cut])
    with pytest.raises(TruncatedFileError) as err:
        read_sample(d)
    assert err.value.section == section


def test_truncated_normals(tmp_path, small_samples):
    s = small_samples[2]
    d = write_sample(tmp_path, s)
    n = len(s.fragments[0].points)
    f = d / "frag_0.bin"
    f.write_bytes(f.read_bytes()[:4 + 12 * n + 8])
    with pytest.raises(TruncatedFileError, match="normals"):
        read_sample(d)


def test_schema_and_version_errors(tmp_path, small_samples):
    s = small_samples[0]
    d = write_sample(tmp_path, s)
    m = json.loads((d / "manifest.json").read_text())
    bad = dict(m, adjacency_edges=[[0, 1]])
    (d / "manifest.json").write_text(json.dumps(bad))
    with pytest.raises(SchemaError, match="symmetric"):
        read_sample(d)
    (d / "manifest.json").write_text(json.dumps(dict(m, format_version="2")))
    with pytest.raises(VersionMismatchError):
        read_sample(d)
    m.pop("areas")
    (d / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(SchemaError):
        read_sample(d)


def test_import_xyz(tmp_path, cube2):
    for i, pts in enumerate(cube2.posed_points()):
        np.savetxt(tmp_path / f"part{i}.xyz", pts[::4])
    s = import_xyz(tmp_path)
    assert s.K == 2 and s.adjacency.tolist() == [[0, 1], [1, 0]]
    assert all(f.points.normals is not None for f in s.fragments)
