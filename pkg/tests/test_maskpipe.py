import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from pairflow import maskpipe, synthdata
from pairflow.errors import DegenerateMaskError, ShapeError, ValidationError
from pairflow.maskpipe import (EditMask, MaskParams, derive, dilate,
                               filter_components, log_weight, maxpool_down,
                               pixel_diff, reference_dilate,
                               reference_filter_components,
                               reference_maxpool_down, reference_pipeline,
                               weight_map)


def test_pixel_diff_trivials():
    img = np.random.default_rng(0).random((8, 8, 3))
    assert not pixel_diff(img, img, 0.05).any()
    tgt = img.copy()
    tgt[3, 4] += 0.5
    m = pixel_diff(img, tgt, 0.0)
    assert m[3, 4] and m.sum() == 1
    with pytest.raises(ShapeError):
        pixel_diff(img, img[:4], 0.05)
    with pytest.raises(ValidationError):
        pixel_diff(img, img, 1.0)


def test_pixel_diff_recolor_pair_contains_ground_truth():
    rng = np.random.default_rng(2)
    s = synthdata.sample_edit(rng, "recolor", 64)
    m = pixel_diff(s.condition, s.target, 0.05)
    # brute-force oracle: exact nonzero difference support
    oracle = np.any(np.abs(s.condition - s.target) > 0.05, axis=-1)
    assert np.array_equal(m, oracle)
    assert (m & ~s.gt_mask).sum() == 0  # never larger than the exact support


def test_dilate_trivials():
    m = np.zeros((7, 7), dtype=bool)
    m[3, 3] = True
    assert np.array_equal(dilate(m, 0), m)
    d = dilate(m, 1)
    assert d.sum() == 9 and d[2:5, 2:5].all()


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(bool, (12, 12)), st.integers(0, 3))
def test_dilate_monotone_superset(mask, radius):
    d = dilate(mask, radius)
    assert (d | mask).sum() == d.sum()  # dilation never removes pixels


def test_filter_components_trivials():
    m = np.ones((4, 4), dtype=bool)
    assert np.array_equal(filter_components(m, 4), m)
    single = np.zeros((5, 5), dtype=bool)
    single[2, 2] = True
    assert not filter_components(single, 2).any()


def test_filter_components_matches_reference_on_speckle():
    rng = np.random.default_rng(0)
    for _ in range(25):
        m = rng.random((16, 16)) < 0.35
        for conn in (4, 8):
            fast = filter_components(m, 3, conn)
            slow = reference_filter_components(m, 3, conn)
            assert np.array_equal(fast, slow)


def test_maxpool_trivials():
    z = np.zeros((8, 8), dtype=bool)
    pooled, a = maxpool_down(z, 4)
    assert not pooled.any() and a == 0
    o = np.ones((8, 8), dtype=bool)
    pooled, a = maxpool_down(o, 4)
    assert pooled.all() and a == 4
    checker = np.indices((8, 8)).sum(axis=0) % 2 == 0
    pooled, a = maxpool_down(checker, 2)
    assert pooled.all() and a == 16
    with pytest.raises(ShapeError):
        maxpool_down(np.zeros((9, 8), dtype=bool), 4)


def test_weight_formula_exact():
    assert log_weight(1.0) == 1.0
    assert log_weight(2.0) == 2.0
    assert log_weight(4.0) == 3.0


def test_weight_map_uniform_cases():
    latent = np.ones((4, 4), dtype=bool)
    em = EditMask(np.ones((16, 16), dtype=bool), latent, 16, 16)
    w = weight_map(em, "local")
    assert np.allclose(w, 1.0)  # x=1 -> w=1 everywhere
    w = weight_map(em, "global")
    assert np.array_equal(w, np.ones((4, 4)))


def test_weight_map_foreground_values():
    latent = np.zeros((4, 4), dtype=bool)
    latent[0, 0] = latent[0, 1] = latent[1, 0] = latent[1, 1] = True  # x = 4
    em = EditMask(np.zeros((16, 16), dtype=bool), latent, 4, 16)
    w = weight_map(em, "local")
    raw_fg, raw_bg = 3.0, 1.0  # log2(4)+1 = 3 before normalization
    mean = (4 * raw_fg + 12 * raw_bg) / 16
    assert np.allclose(w[latent], raw_fg / mean)
    assert np.allclose(w[~latent], raw_bg / mean)
    assert abs(w.mean() - 1.0) <= 1e-9
    assert (w > 0).all()


def test_weight_map_degenerate_and_scope_errors():
    em = EditMask(np.zeros((8, 8), dtype=bool), np.zeros((2, 2), dtype=bool), 0, 4)
    with pytest.raises(DegenerateMaskError):
        weight_map(em, "local")
    with pytest.raises(ValidationError):
        weight_map(em, "sideways")


def test_derive_identical_pair_is_degenerate():
    img = np.random.default_rng(1).random((16, 16, 3)).astype(np.float32)
    with pytest.raises(DegenerateMaskError):
        derive(img, img, "local", MaskParams(factor=4))


def test_derive_global_is_uniform_regardless_of_diff():
    rng = np.random.default_rng(5)
    s = synthdata.sample_edit(rng, "global-invert", 32)
    _, w = derive(s.condition, s.target, "global", MaskParams(factor=4))
    assert np.array_equal(w, np.ones_like(w))


def test_remove_edit_latent_iou_against_ground_truth():
    rng = np.random.default_rng(9)
    ious = []
    params = MaskParams(factor=4)
    for _ in range(30):
        s = synthdata.sample_edit(rng, "remove", 64)
        em, _ = derive(s.condition, s.target, "local", params)
        gt_latent, _ = maxpool_down(s.gt_mask, 4)
        inter = (em.latent_mask & gt_latent).sum()
        union = (em.latent_mask | gt_latent).sum()
        ious.append(inter / union)
    assert np.mean(ious) >= 0.8


def test_pipeline_monotone_in_edit_size():
    # enlarging the edited region never shrinks the latent edit count
    params = MaskParams(factor=4)
    base = np.full((32, 32, 3), 0.9, dtype=np.float32)
    areas = []
    for r in (3, 5, 8, 12):
        tgt = base.copy()
        tgt[10:10 + r, 10:10 + r] = 0.1
        em, _ = derive(base, tgt, "local", params)
        areas.append(em.a_edit)
    assert all(a <= b for a, b in zip(areas, areas[1:]))


def test_optimized_pipeline_equals_reference_bit_exact():
    rng = np.random.default_rng(3)
    params = MaskParams(tol=0.05, radius=1, min_area=4, factor=4)
    for i in range(200):
        src = rng.random((16, 16, 3)).astype(np.float32)
        tgt = src.copy()
        patch = rng.random((16, 16)) < 0.2
        tgt[patch] = rng.random(3).astype(np.float32)
        scope = "local" if i % 2 == 0 else "global"
        try:
            em_a, w_a = derive(src, tgt, scope, params)
        except DegenerateMaskError:
            with pytest.raises(DegenerateMaskError):
                reference_pipeline(src, tgt, scope, params)
            continue
        em_b, w_b = reference_pipeline(src, tgt, scope, params)
        assert np.array_equal(em_a.pixel_mask, em_b.pixel_mask)
        assert np.array_equal(em_a.latent_mask, em_b.latent_mask)
        assert em_a.a_edit == em_b.a_edit
        assert np.array_equal(w_a, w_b)


def test_reference_ops_match_scipy_on_random_masks():
    rng = np.random.default_rng(7)
    for _ in range(50):
        m = rng.random((12, 12)) < 0.3
        r = int(rng.integers(0, 3))
        assert np.array_equal(dilate(m, r), reference_dilate(m, r))
        pooled_a = maxpool_down(m, 4)
        pooled_b = reference_maxpool_down(m, 4)
        assert np.array_equal(pooled_a[0], pooled_b[0]) and pooled_a[1] == pooled_b[1]
