from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fsad.augment import (
    AugmentationPlan,
    IDENTITY_VIEW,
    SupportAug,
    ViewKind,
    ViewTransform,
    apply_support_aug,
    apply_view,
    default_support_augs,
    default_views,
    expand_support_set,
    invert_anomaly_map,
)
from fsad.errors import ConfigError, ShapeError

unit_f32 = st.floats(0.0, 1.0, allow_nan=False, width=32)


def square_images(max_side=8):
    side = st.shared(st.integers(1, max_side), key="side")
    return hnp.arrays(np.float32, st.tuples(side, side, st.just(3)), elements=unit_f32)


def any_images(max_side=8):
    return hnp.arrays(
        np.float32,
        st.tuples(st.integers(1, max_side), st.integers(1, max_side), st.just(3)),
        elements=unit_f32,
    )


class TestExpandSupportSet:
    def test_rotation_set_gives_four(self):
        img = np.random.default_rng(0).random((6, 6, 3)).astype(np.float32)
        out = expand_support_set(img, {SupportAug.ROT90, SupportAug.ROT180, SupportAug.ROT270})
        assert [t for t, _ in out] == ["", "rot90", "rot180", "rot270"]
        assert np.array_equal(out[0][1], img)

    def test_empty_set_returns_original_only(self):
        img = np.zeros((4, 4, 3), np.float32)
        out = expand_support_set(img, set())
        assert len(out) == 1 and out[0][0] == ""

    def test_canonical_order_ignores_input_order(self):
        img = np.zeros((4, 4, 3), np.float32)
        tags = [t for t, _ in expand_support_set(img, {SupportAug.FLIPY, SupportAug.ROT90})]
        assert tags == ["", "rot90", "flipy"]

    def test_non_square_rejected(self):
        with pytest.raises(ShapeError):
            expand_support_set(np.zeros((4, 6, 3), np.float32), set())

    @given(square_images())
    @settings(max_examples=40, deadline=None)
    def test_count_is_one_plus_augs(self, img):
        augs = {SupportAug.ROT90, SupportAug.FLIPX}
        assert len(expand_support_set(img, augs)) == 1 + len(augs)


class TestSupportAugGeometry:
    @given(square_images())
    @settings(max_examples=40, deadline=None)
    def test_rot180_is_involution(self, img):
        twice = apply_support_aug(apply_support_aug(img, SupportAug.ROT180), SupportAug.ROT180)
        assert np.array_equal(twice, img)

    @given(square_images())
    @settings(max_examples=40, deadline=None)
    def test_rot90_four_times_is_identity(self, img):
        cur = img
        for _ in range(4):
            cur = apply_support_aug(cur, SupportAug.ROT90)
        assert np.array_equal(cur, img)

    def test_rot90_moves_corner(self):
        img = np.zeros((3, 3, 3), np.float32)
        img[0, 2, 0] = 1.0
        out = apply_support_aug(img, SupportAug.ROT90)
        assert out[0, 0, 0] == 1.0

    @given(square_images(), st.sampled_from([SupportAug.FLIPX, SupportAug.FLIPY]))
    @settings(max_examples=40, deadline=None)
    def test_flips_are_involutions(self, img, aug):
        assert np.array_equal(apply_support_aug(apply_support_aug(img, aug), aug), img)


class TestApplyView:
    def test_posclamp_half_on_constant_half(self):
        img = np.full((2, 2, 3), 0.5, np.float32)
        out = apply_view(img, ViewTransform(ViewKind.POSCLAMP, 0.5))
        np.testing.assert_allclose(out, 1.0)

    def test_negclamp_zeroes_below_tau(self):
        img = np.array([[[0.2, 0.5, 0.9]]], np.float32)
        out = apply_view(img, ViewTransform(ViewKind.NEGCLAMP, 0.5))
        np.testing.assert_allclose(out[0, 0], [0.0, 0.0, 0.8], atol=1e-6)

    def test_xflip_on_1x2(self):
        img = np.zeros((1, 2, 3), np.float32)
        img[0, 0] = 0.25
        img[0, 1] = 0.75
        out = apply_view(img, ViewTransform(ViewKind.XFLIP))
        assert out[0, 0, 0] == 0.75 and out[0, 1, 0] == 0.25

    def test_rbswap_twice_is_identity(self):
        img = np.random.default_rng(1).random((3, 5, 3)).astype(np.float32)
        v = ViewTransform(ViewKind.RBSWAP)
        assert np.array_equal(apply_view(apply_view(img, v), v), img)

    def test_rbswap_swaps_channels(self):
        img = np.zeros((1, 1, 3), np.float32)
        img[0, 0] = [0.1, 0.2, 0.3]
        out = apply_view(img, ViewTransform(ViewKind.RBSWAP))
        np.testing.assert_array_equal(out[0, 0], img[0, 0, ::-1])

    @given(any_images(), st.floats(0.05, 0.95))
    @settings(max_examples=40, deadline=None)
    def test_photometric_views_keep_shape_and_range(self, img, tau):
        for v in (
            ViewTransform(ViewKind.POSCLAMP, tau),
            ViewTransform(ViewKind.NEGCLAMP, tau),
            ViewTransform(ViewKind.RBSWAP),
        ):
            out = apply_view(img, v)
            assert out.shape == img.shape
            assert np.min(out) >= 0.0 and np.max(out) <= 1.0 + 1e-6

    def test_identity_copies(self):
        img = np.zeros((2, 2, 3), np.float32)
        out = apply_view(img, IDENTITY_VIEW)
        out[0, 0, 0] = 9.0
        assert img[0, 0, 0] == 0.0


class TestInvertAnomalyMap:
    @given(
        hnp.arrays(
            np.float32,
            st.tuples(st.integers(1, 8), st.integers(1, 8)),
            elements=unit_f32,
        ),
        st.sampled_from([ViewKind.XFLIP, ViewKind.YFLIP]),
    )
    @settings(max_examples=40, deadline=None)
    def test_spatial_inversion_realigns(self, amap, kind):
        v = ViewTransform(kind)
        flipped = amap[:, ::-1] if kind is ViewKind.XFLIP else amap[::-1, :]
        assert np.array_equal(invert_anomaly_map(flipped, v), amap)

    def test_photometric_and_identity_pass_through(self):
        m = np.random.default_rng(2).random((4, 4)).astype(np.float32)
        for v in (IDENTITY_VIEW, ViewTransform(ViewKind.POSCLAMP, 0.3), ViewTransform(ViewKind.RBSWAP)):
            assert np.array_equal(invert_anomaly_map(m, v), m)


class TestPlanAndTags:
    def test_default_plan(self):
        plan = AugmentationPlan()
        assert plan.support_augs == default_support_augs()
        assert plan.views == default_views()
        assert plan.ordered_augs == (SupportAug.ROT90, SupportAug.ROT180, SupportAug.ROT270)

    def test_views_must_start_with_identity(self):
        with pytest.raises(ConfigError):
            AugmentationPlan(views=(ViewTransform(ViewKind.YFLIP),))
        with pytest.raises(ConfigError):
            AugmentationPlan(views=(IDENTITY_VIEW, IDENTITY_VIEW))
        with pytest.raises(ConfigError):
            AugmentationPlan(views=())

    def test_tau_validation(self):
        with pytest.raises(ConfigError):
            ViewTransform(ViewKind.POSCLAMP, 0.0)
        with pytest.raises(ConfigError):
            ViewTransform(ViewKind.POSCLAMP, 1.0)
        with pytest.raises(ConfigError):
            ViewTransform(ViewKind.POSCLAMP)
        with pytest.raises(ConfigError):
            ViewTransform(ViewKind.YFLIP, 0.5)

    def test_tags(self):
        assert ViewTransform(ViewKind.POSCLAMP, 0.5).tag() == "posclamp-0.5"
        assert ViewTransform(ViewKind.NEGCLAMP, 0.25).tag() == "negclamp-0.25"
        assert ViewTransform(ViewKind.YFLIP).tag() == "yflip"
        assert IDENTITY_VIEW.tag() == "identity"
        assert ViewTransform(ViewKind.XFLIP).is_spatial
        assert not ViewTransform(ViewKind.RBSWAP).is_spatial
