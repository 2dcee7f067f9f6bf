import json

import numpy as np
import pytest

from sare_kit.errors import InvalidArgumentError
from sare_kit.geom import RigidTransform, voxelize
from sare_kit.prepare import prepare
from sare_kit.refine import (RefineConfig, UnionFind, assembly_bbox, blend, candidate_edges, coverage,
                             dense_fracture_probs, known_state, overlap_ratio, refine_pipeline, renoise,
                             repaint_sample, stable_mask, verify_edges, write_refine_report)
from sare_kit.sampler import SampleResult, euler_sample, recover_poses, straight_line_field


def gt_clouds(sample):
    return [T.apply(f.points.points) for f, T in zip(sample.fragments, sample.gt_transforms)]


@pytest.fixture(scope="module")
def cube_prep(cube2):
    return prepare(cube2, 64, seed=1)


def perfect_first_pass(prep):
    x0 = prep.anchor_frame_targets()
    transforms, degenerate = recover_poses(prep.qset.queries, x0, prep.qset.fragment_map)
    A = np.asarray(prep.sample.adjacency, dtype=np.float64)
    return SampleResult(x0, np.zeros_like(x0), prep.fracture.copy(), A, transforms, degenerate, {})


# --- candidate edges ----------------------------------------------------------

def test_candidate_edges_examples():
    assert candidate_edges(np.zeros((4, 4))) == []
    assert len(candidate_edges(np.ones((4, 4)))) == 6
    A = np.array([[0, 0.4, 0.6], [0.4, 0, 0], [0.6, 0, 0]])
    assert candidate_edges(A, 0.5) == [(0, 2)]


def test_candidate_edges_rejects_bad_matrix():
    with pytest.raises(InvalidArgumentError):
        candidate_edges(np.zeros((2, 3)))
    with pytest.raises(InvalidArgumentError):
        candidate_edges(np.array([[0, 1.0], [0, 0]]))


# --- verification -------------------------------------------------------------

def test_identical_colocated_clouds_rejected(rng):
    pts = rng.uniform(-1, 1, size=(500, 3))
    keep, checks = verify_edges([pts, pts.copy()], [np.zeros(500), np.zeros(500)], [(0, 1)], RefineConfig())
    assert keep == [] and checks[0].overlap == 1.0 and checks[0].reason == "interpenetration"


def test_gt_half_cubes_retained(cube2):
    keep, checks = verify_edges(gt_clouds(cube2), [lab.astype(float) for lab in cube2.fracture_labels],
                                [(0, 1)], RefineConfig())
    assert keep == [(0, 1)], checks


def test_separated_clouds_not_retained(cube2):
    clouds = gt_clouds(cube2)
    config = RefineConfig()
    lo, hi = assembly_bbox(clouds, config.bbox_inflate)
    shift = 10 * (hi - lo).max() / config.resolution
    moved = [clouds[0], clouds[1] + np.array([shift, 0, 0])]
    keep, checks = verify_edges(moved, [lab.astype(float) for lab in cube2.fracture_labels], [(0, 1)], config)
    assert keep == [] and checks[0].reason == "insufficient coverage"


def test_empty_fracture_region_not_retained(cube2):
    probs = [cube2.fracture_labels[0].astype(float), np.zeros(len(cube2.fragments[1].points))]
    keep, checks = verify_edges(gt_clouds(cube2), probs, [(0, 1)], RefineConfig())
    assert keep == [] and checks[0].reason == "no fracture voxels"


def test_overlap_symmetric_and_bounded(rng):
    bbox = (np.full(3, -2.0), np.full(3, 2.0))
    for _ in range(20):
        a = voxelize(rng.normal(size=(200, 3)), 16, bbox)
        b = voxelize(rng.normal(size=(int(rng.integers(1, 300)), 3)) + rng.normal(size=3), 16, bbox)
        r = overlap_ratio(a, b)
        assert 0.0 <= r <= 1.0 and r == overlap_ratio(b, a)
    assert overlap_ratio(a, voxelize(np.zeros((0, 3)), 16, bbox)) == 0.0


def test_coverage_of_dilated_neighbour():
    bbox = (np.zeros(3), np.full(3, 8.0))
    a = voxelize(np.array([[0.5, 0.5, 0.5]]), 8, bbox)
    b = voxelize(np.array([[1.5, 1.5, 1.5]]), 8, bbox)
    c = voxelize(np.array([[3.5, 0.5, 0.5]]), 8, bbox)
    assert coverage(a, b, 1) == 1.0 and coverage(a, c, 1) == 0.0 and coverage(a, c, 3) == 1.0


def test_kept_edges_are_candidates(small_samples):
    for s in small_samples:
        E = candidate_edges(np.ones((s.K, s.K)))
        keep, _ = verify_edges(gt_clouds(s), [lab.astype(float) for lab in s.fracture_labels], E, RefineConfig())
        assert set(keep) <= set(E)


def test_config_validation():
    with pytest.raises(InvalidArgumentError):
        RefineConfig(tau_o=0.0).validate()
    with pytest.raises(InvalidArgumentError):
        RefineConfig(repeats=0).validate()
    with pytest.raises(InvalidArgumentError):
        RefineConfig(alpha=1.5).validate()


# --- stable mask --------------------------------------------------------------

def test_stable_mask_examples():
    fmap = np.repeat(np.arange(4), 3)
    mask, comps = stable_mask([], fmap)
    assert not mask.any() and comps == []
    mask, comps = stable_mask([(1, 2)], fmap)
    assert comps == [[1, 2]] and np.array_equal(mask, np.isin(fmap, [1, 2]))
    mask, comps = stable_mask([(0, 1), (1, 2)], fmap, min_size=4)
    assert not mask.any()
    mask, comps = stable_mask([(0, 1), (1, 2)], fmap, min_size=3)
    assert comps == [[0, 1, 2]]


def test_union_find_components():
    uf = UnionFind(5)
    uf.union(3, 4)
    uf.union(0, 3)
    assert uf.components() == [[0, 3, 4], [1], [2]]


# --- blend and second pass ----------------------------------------------------

def test_blend_identity_at_alpha_one(rng):
    x, ref, eps = (rng.normal(size=(12, 3)) for _ in range(3))
    mask = np.arange(12) % 3 == 0
    for t in (0.9, 0.37, 0.02):
        out = blend(x, ref, eps, mask, t, 1.0)
        assert np.array_equal(out[mask], known_state(ref[mask], eps[mask], t))
        assert np.array_equal(out[~mask], x[~mask])
    half = blend(x, ref, eps, mask, 0.5, 0.5)
    assert np.allclose(half[mask], 0.5 * x[mask] + 0.5 * known_state(ref, eps, 0.5)[mask])


def test_renoise_keeps_forward_marginal(rng):
    x_ref, z = rng.normal(size=(4000, 3)), rng.normal(size=(4000, 3))
    s, t = 0.3, 0.5
    x_s = known_state(x_ref, rng.normal(size=(4000, 3)), s)
    x_t = renoise(x_s, s, t, z)
    resid = x_t - (1 - t) * x_ref
    assert abs(resid.std() - t) < 0.02


def test_empty_mask_matches_plain_sample(rng):
    v = rng.normal(size=(16, 3))
    field = lambda x, t: (v * np.sin(3 * t) + 0.1 * x, None, None)  # noqa: E731
    amask = np.zeros(16, bool)
    amask[:4] = True
    pos = rng.normal(size=(16, 3))
    plain = euler_sample(field, 16, 9, 7, amask, pos)
    rep = repaint_sample(field, rng.normal(size=(16, 3)), np.zeros(16, bool), steps=9, seed=7,
                         alpha=0.5, repeats=3, anchor_mask=amask, anchor_positions=pos)
    assert np.array_equal(plain.x0_hat, rep.x0_hat) and np.array_equal(plain.eps, rep.eps)


@pytest.mark.parametrize("repeats", [1, 2])
def test_full_mask_alpha_one_returns_reference(rng, repeats):
    x_ref = rng.normal(size=(20, 3))
    out = repaint_sample(straight_line_field(x_ref), x_ref, np.ones(20, bool), steps=10, seed=1,
                         alpha=1.0, repeats=repeats)
    assert np.abs(out.x0_hat - x_ref).max() < 1e-9


def test_anchor_rows_fixed_through_repeats(rng):
    amask = np.zeros(12, bool)
    amask[:3] = True
    pos = rng.normal(size=(12, 3))
    out = repaint_sample(lambda x, t: (np.ones_like(x), None, None), rng.normal(size=(12, 3)),
                         np.arange(12) >= 6, steps=6, seed=0, repeats=3, anchor_mask=amask, anchor_positions=pos)
    assert np.array_equal(out.x0_hat[amask], pos[amask])


def test_mask_length_checked():
    with pytest.raises(InvalidArgumentError):
        repaint_sample(straight_line_field(np.zeros((5, 3))), np.zeros((5, 3)), np.ones(4, bool))


# --- pipeline -----------------------------------------------------------------

def test_dense_probs_cover_every_point(cube_prep):
    dense = dense_fracture_probs(cube_prep, cube_prep.fracture)
    assert [len(d) for d in dense] == [len(f.points) for f in cube_prep.sample.fragments]
    assert dense_fracture_probs(cube_prep, None) is None


def test_perfect_first_pass_survives_repaint(cube_prep):
    first = perfect_first_pass(cube_prep)
    out = refine_pipeline(straight_line_field(first.x0_hat), cube_prep, first, RefineConfig(), steps=20, seed=3)
    assert out.report["E_keep"] == [[0, 1]] and out.report["mask_size"] == cube_prep.qset.M
    for a, b in zip(out.result.transforms, first.transforms):
        assert np.abs(a.rotation - b.rotation).max() < 1e-6
        assert np.abs(a.translation - b.translation).max() < 1e-6


def test_empty_keep_resamples_independently(cube_prep, rng):
    first = perfect_first_pass(cube_prep)
    first.A_scores = np.zeros((2, 2))
    v = rng.normal(size=(cube_prep.qset.M, 3))
    field = lambda x, t: (v, None, None)  # noqa: E731
    out = refine_pipeline(field, cube_prep, first, RefineConfig(), steps=5, seed=4)
    assert out.report["E_cand"] == [] and out.report["mask_size"] == 0
    amask = cube_prep.qset.fragment_map == cube_prep.anchor_id
    pos = np.zeros_like(first.x0_hat)
    pos[amask] = cube_prep.qset.queries[cube_prep.anchor_id]
    assert np.array_equal(out.result.x0_hat, euler_sample(field, cube_prep.qset.M, 5, 4, amask, pos).x0_hat)


def test_oracle_mode_adds_missed_edge(cube_prep):
    first = perfect_first_pass(cube_prep)
    first.A_scores = np.zeros((2, 2))
    out = refine_pipeline(straight_line_field(first.x0_hat), cube_prep, first, RefineConfig(),
                          mode="oracle-adjacency", steps=4)
    assert out.report["E_cand"] == [[0, 1]]


def test_freeze_copies_stable_poses(cube_prep):
    first = perfect_first_pass(cube_prep)
    moved = [RigidTransform(T.rotation, T.translation + 0.01) for T in first.transforms]
    first.transforms = moved
    out = refine_pipeline(straight_line_field(first.x0_hat), cube_prep, first, RefineConfig(),
                          mode="freeze", steps=4)
    assert out.report["mode"] == "freeze"
    for f in range(2):
        assert out.result.transforms[f] is moved[f]
    with pytest.raises(InvalidArgumentError):
        refine_pipeline(straight_line_field(first.x0_hat), cube_prep, first, RefineConfig(), mode="bogus")


def test_report_written(cube_prep, tmp_path):
    first = perfect_first_pass(cube_prep)
    out = refine_pipeline(straight_line_field(first.x0_hat), cube_prep, first, RefineConfig(), steps=4)
    write_refine_report(tmp_path / "r.json", out.report, "abc")
    data = json.loads((tmp_path / "r.json").read_text())
    assert data["config_hash"] == "abc" and "stand-in" in data["resample_schedule"]
    assert data["config"]["alpha"] == 0.5
