import numpy as np
import pytest
import torch
from scipy.spatial.distance import pdist

from sare_kit.errors import InvalidArgumentError
from sare_kit.fracture import Fragment, fracture_object
from sare_kit.geom import PointCloud, RigidTransform, random_rotation
from sare_kit.prepare import anchor_for, eval_view, model_inputs, part_permutation, prepare, training_example
from sare_kit.query import (TOKEN_DIM, build_conditions, fourier_encode, local_token, local_tokens,
                            sample_queries)


def test_equal_area_budgets(cube2):
    q = sample_queries(cube2, 5120, seed=0)
    assert q.budgets == [2560, 2560] or abs(q.budgets[0] - q.budgets[1]) <= 2 * 0.05 * 5120
    assert sum(q.budgets) == 5120


def test_symmetric_areas_split_evenly():
    frag = fracture_object("cube", 2, seed=0, n_points=12000)
    twin = type(frag)(frag.object_id, [frag.fragments[0], Fragment(1, frag.fragments[0].points, frag.fragments[0].area)],
                      [frag.gt_transforms[0], frag.gt_transforms[0]], frag.adjacency,
                      [frag.fracture_labels[0], frag.fracture_labels[0]])
    assert sample_queries(twin, 5120, seed=1).budgets == [2560, 2560]


def test_queries_are_members_and_targets_align(small_samples):
    s = small_samples[1]
    q = sample_queries(s, 256, seed=3)
    assert q.M == 256 and sum(q.budgets) == 256
    for f, idx, pts, T, tg in zip(s.fragments, q.indices, q.queries, s.gt_transforms, q.gt_targets):
        assert np.array_equal(f.points.points[idx], pts)
        assert np.allclose(T.apply(pts), tg)
    assert np.array_equal(np.bincount(q.fragment_map), q.budgets)
    with pytest.raises(InvalidArgumentError):
        sample_queries(s, 8 * s.K - 1, seed=0)


def test_anchor_targets_are_translated_queries(small_samples):
    s = small_samples[0]
    v = eval_view(s, 128, seed=7)
    q, a = v.prep.qset, v.prep.anchor_id
    assert np.allclose(q.gt_targets[a], q.queries[a] + v.sample.gt_transforms[a].translation, atol=1e-12)


def test_fourier_examples():
    e = fourier_encode(np.zeros(3), 8)
    assert e.shape == (48,)
    assert np.array_equal(e, np.tile([0.0, 1.0], 24))
    v = np.random.default_rng(0).uniform(-3, 3, size=(100, 3))
    assert np.all(np.abs(fourier_encode(v, 8)) <= 1)
    with pytest.raises(InvalidArgumentError):
        fourier_encode(np.zeros(3), 0)


def test_fourier_injective_on_grid():
    # the encoding is separable over axes, so injectivity on the 3-D grid
    # reduces to injectivity of the 1-D map on each axis
    axis = np.round(np.arange(-100, 100) * 0.01, 10)  # [-1, 1)
    enc = fourier_encode(np.repeat(axis[:, None], 3, axis=1), 8)[:, :16]
    assert pdist(enc).min() > 1e-6


def test_fourier_endpoints_alias():
    # the lowest band has period 2, so the closed interval's endpoints share a code
    assert np.allclose(fourier_encode(-np.ones(3)), fourier_encode(np.ones(3)), atol=1e-12)


def _plane_fragment():
    g = np.stack(np.meshgrid(np.linspace(-0.2, 0.2, 10), np.linspace(-0.2, 0.2, 10)), -1).reshape(-1, 2)
    pts = np.c_[g, np.zeros(len(g))]
    return Fragment(0, PointCloud(pts, np.tile([0.0, 0.0, 1.0], (len(pts), 1))), 1.0)


def test_local_token_plane_and_shape():
    z = local_token(_plane_fragment(), 45, k=16)
    assert z.shape == (TOKEN_DIM,)
    assert abs(z[2]) < 1e-6
    assert np.all(np.abs(z) <= 1)
    with pytest.raises(InvalidArgumentError):
        local_token(_plane_fragment(), 0, k=101)


def test_local_tokens_rigid_invariant(small_samples, rng):
    f = small_samples[2].fragments[0]
    idx = np.arange(0, len(f.points), 97)
    T = RigidTransform(random_rotation(rng), rng.normal(size=3))
    moved = Fragment(0, PointCloud(T.apply(f.points.points), f.points.normals @ T.rotation.T), f.area)
    assert np.abs(local_tokens(f, idx) - local_tokens(moved, idx)).max() < 1e-6
    assert np.array_equal(local_tokens(f, idx), local_tokens(Fragment(1, f.points, f.area), idx))


def _cond_args(n=10, feat=111, D=16, seed=0):
    g = torch.Generator().manual_seed(seed)
    return (torch.randn(n, feat, generator=g, dtype=torch.float64),
            torch.randn(D, feat, generator=g, dtype=torch.float64),
            torch.randn(D, generator=g, dtype=torch.float64),
            torch.randn(50, D, generator=g, dtype=torch.float64),
            torch.randn(D, generator=g, dtype=torch.float64))


def test_build_conditions_zero_and_linearity():
    feats, W, b, table, anc = _cond_args()
    fmap = np.repeat([0, 1], 5)
    zero = build_conditions(feats, fmap, [3, 7], 0, torch.zeros_like(W), torch.zeros_like(b),
                            torch.zeros_like(table), torch.zeros_like(anc))
    assert torch.count_nonzero(zero.tokens) == 0
    z = torch.zeros_like(table)
    c1 = build_conditions(feats, fmap, [3, 7], 0, W, None, z, torch.zeros_like(anc)).tokens
    c2 = build_conditions(feats, fmap, [3, 7], 0, 2 * W, None, z, torch.zeros_like(anc)).tokens
    assert torch.allclose(c2, 2 * c1)


def test_identical_fragments_differ_by_part_embedding():
    feats, W, b, table, anc = _cond_args()
    feats[5:] = feats[:5]
    fmap = np.repeat([0, 1], 5)
    c = build_conditions(feats, fmap, [3, 7], 1, W, b, table, torch.zeros_like(anc)).tokens
    assert torch.allclose(c[:5] - c[5:], (table[3] - table[7]).expand(5, -1), atol=1e-12)


def test_anchor_mask_and_dimension_checks():
    feats, W, b, table, anc = _cond_args()
    fmap = np.array([0, 0, 0, 1, 1, 1, 1, 2, 2, 2])
    c = build_conditions(feats, fmap, [0, 1, 2], 1, W, b, table, anc)
    assert c.anchor_mask.sum() == 4 and np.array_equal(c.anchor_mask.astype(bool), fmap == 1)
    with pytest.raises(InvalidArgumentError):
        build_conditions(feats, fmap, [0, 1, 2], 1, W[:, :-1], b, table, anc)
    with pytest.raises(InvalidArgumentError):
        build_conditions(feats, fmap, [0, 1, 2], 1, W, b, table[:, :-1], anc)


def test_anchor_is_largest_budget(small_samples):
    for s in small_samples:
        q = sample_queries(s, 256, 0)
        a = anchor_for(s, 256)
        assert q.budgets[a] == max(q.budgets) and a == q.budgets.index(max(q.budgets))


def test_part_permutation_varies(rng):
    perms = {tuple(part_permutation(4, rng)) for _ in range(20)}
    assert len(perms) > 1
    assert all(len(set(p)) == 4 and max(p) < 50 for p in perms)


def test_training_example_anchor_rows_fixed(small_samples, rng):
    prep = prepare(small_samples[1], 128, seed=2)
    ex = training_example(prep, rng)
    a = prep.anchor_id
    mask = prep.qset.fragment_map == a
    assert np.array_equal(ex.x0.numpy()[mask], prep.qset.queries[a])
    inputs = model_inputs(prep, np.arange(prep.sample.K))
    assert inputs.features.shape == (128, TOKEN_DIM + 96)
