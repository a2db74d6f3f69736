import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gfscreen import ValidationError
from gfscreen.cropgrid import (
    CropRegion,
    contained_fraction,
    extract_subvolume,
    random_crop_group,
    sliding_windows,
    stitch,
)
from gfscreen.synthvol import Lesion, make_rng

from .conftest import scan_with_lesions


def test_exact_tiling():
    regions = sliding_windows((16, 16, 8), (8, 8, 8), (8, 8, 8))
    assert sorted(r.origin for r in regions) == [(0, 0, 0), (0, 8, 0), (8, 0, 0), (8, 8, 0)]


def test_border_clamp():
    regions = sliding_windows((20, 16, 8), (8, 8, 8), (8, 8, 8))
    assert len(regions) == 6
    assert {r.origin[0] for r in regions} == {0, 8, 12}


def test_window_equals_volume():
    regions = sliding_windows((9, 7, 5), (9, 7, 5), (1, 1, 1))
    assert regions == [CropRegion((0, 0, 0), (9, 7, 5))]


def test_window_too_large():
    with pytest.raises(ValidationError):
        sliding_windows((8, 8, 8), (9, 8, 8), (1, 1, 1))


triples = st.tuples(st.integers(1, 12), st.integers(1, 12), st.integers(1, 12))


@given(triples, triples, triples)
def test_windows_cover_every_voxel(dims, window, stride):
    window = tuple(min(w, n) for w, n in zip(window, dims))
    cover = np.zeros(dims, dtype=int)
    for r in sliding_windows(dims, window, stride):
        assert r.fits(dims)
        cover[r.slices] += 1
    assert cover.min() >= 1


@given(st.integers(0, 2**32 - 1))
def test_stitch_nonoverlapping_reproduces_regions(seed):
    rng = np.random.default_rng(seed)
    dims = (16, 16, 8)
    regions = sliding_windows(dims, (8, 8, 4), (8, 8, 4))
    probs = [rng.uniform(size=r.size) for r in regions]
    out = stitch(dims, list(zip(regions, probs)), [True] * len(regions), 0.5)
    for r, p in zip(regions, probs):
        assert np.array_equal(out[r.slices], p >= 0.5)


def test_stitch_nothing_selected():
    regions = sliding_windows((8, 8, 8), (4, 4, 4), (4, 4, 4))
    entries = [(r, np.ones(r.size)) for r in regions]
    assert not stitch((8, 8, 8), entries, [False] * len(regions)).any()


def test_stitch_single_region():
    r = CropRegion((2, 2, 2), (3, 3, 3))
    out = stitch((8, 8, 8), [(r, np.ones((3, 3, 3)))], [True], 0.5)
    expected = np.zeros((8, 8, 8), dtype=bool)
    expected[2:5, 2:5, 2:5] = True
    assert np.array_equal(out, expected)


def test_stitch_overlap_mean_at_threshold_is_positive():
    a = CropRegion((0, 0, 0), (4, 4, 4))
    b = CropRegion((2, 0, 0), (4, 4, 4))
    out = stitch((6, 4, 4), [(a, np.full((4, 4, 4), 0.8)), (b, np.full((4, 4, 4), 0.2))], [True, True], 0.5)
    # overlap mean is exactly 0.5 and the comparison is >=
    assert out[2:4].all()
    assert out[:2].all() and not out[4:].any()


def test_stitch_shape_mismatch():
    with pytest.raises(ValidationError):
        stitch((8, 8, 8), [(CropRegion((0, 0, 0), (4, 4, 4)), np.ones((3, 3, 3)))], [True])


def test_contained_fraction_inside_outside():
    lesion = Lesion((8.0, 8.0, 8.0), (2.0, 2.0, 2.0), 0.2)
    dims = (16, 16, 16)
    assert contained_fraction(CropRegion((4, 4, 4), (8, 8, 8)), lesion, dims) == 1.0
    assert contained_fraction(CropRegion((12, 12, 12), (4, 4, 4)), lesion, dims) == 0.0


def test_contained_fraction_bisected():
    lesion = Lesion((8.5, 8.0, 8.0), (3.0, 3.0, 3.0), 0.2)
    frac = contained_fraction(CropRegion((0, 0, 0), (9, 16, 16)), lesion, (16, 16, 16))
    assert frac == pytest.approx(0.5, abs=0.1)


def test_contained_fraction_matches_brute_force():
    lesion = Lesion((6.3, 7.1, 4.6), (2.7, 1.9, 1.4), 0.2)
    dims = (14, 14, 10)
    region = CropRegion((5, 3, 2), (6, 6, 4))
    # count voxel centers directly
    inside_all = inside_region = 0
    for x in range(dims[0]):
        for y in range(dims[1]):
            for z in range(dims[2]):
                r2 = sum(((p - c) / a) ** 2 for p, c, a in zip((x, y, z), lesion.center, lesion.semi_axes))
                if r2 <= 1.0:
                    inside_all += 1
                    if all(o <= p < o + s for p, o, s in zip((x, y, z), region.origin, region.size)):
                        inside_region += 1
    assert contained_fraction(region, lesion, dims) == inside_region / inside_all


def test_healthy_crops_are_negative():
    scan = scan_with_lesions((16, 16, 8), [])
    crops = random_crop_group(scan, 20, (8, 8, 4), make_rng(0), pos_bias=1.0)
    assert all(c.label == 0 for c in crops)


def test_pos_bias_one_contains_center(one_lesion_scan):
    lesion = one_lesion_scan.lesions[0]
    crops = random_crop_group(one_lesion_scan, 100, (8, 8, 4), make_rng(1), pos_bias=1.0)
    assert all(c.region.contains_point(lesion.center) for c in crops)
    assert all(c.label == 1 for c in crops)


def test_pos_bias_half_rate(one_lesion_scan):
    lesion = one_lesion_scan.lesions[0]
    rng = make_rng(2)
    crops = random_crop_group(one_lesion_scan, 1000, (8, 8, 4), rng, pos_bias=0.5)
    rate = np.mean([c.region.contains_point(lesion.center) for c in crops])
    assert 0.45 <= rate <= 0.60


def test_extract_subvolume_label(one_lesion_scan):
    sub = extract_subvolume(one_lesion_scan, CropRegion((12, 12, 4), (8, 8, 8)))
    assert sub.label == 1
    assert np.shares_memory(sub.voxels, one_lesion_scan.volume)
    with pytest.raises(ValidationError):
        extract_subvolume(one_lesion_scan, CropRegion((30, 0, 0), (8, 8, 8)))
