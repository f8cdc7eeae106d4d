import numpy as np
import pytest

from vesselseg.augment import (
    D4_TRANSFORMS,
    D4Transform,
    mixup,
    photometric_augment,
    spatial_augment,
    tta_expand,
    tta_fold,
)
from vesselseg.config import AugmentConfig


def all_probs_zero():
    return AugmentConfig(
        hflip_prob=0, vflip_prob=0, rot90_prob=0, ssr_prob=0, elastic_prob=0,
        brightness_contrast_prob=0, hsv_prob=0, clahe_prob=0, gamma_prob=0,
        noise_prob=0, blur_prob=0, mixup_prob=0)


def _probe():
    # an array with no dihedral symmetry, to distinguish all 8 group actions
    return np.arange(25, dtype=np.float64).reshape(5, 5)


class TestD4Group:
    def test_eight_distinct_elements(self):
        images = [t.apply(_probe()).tobytes() for t in D4_TRANSFORMS]
        assert len(D4_TRANSFORMS) == 8
        assert len(set(images)) == 8

    def test_inverse_in_set_and_exact(self):
        probe = _probe()
        actions = {t.apply(probe).tobytes(): t for t in D4_TRANSFORMS}
        for t in D4_TRANSFORMS:
            inv = t.inverse()
            assert inv in D4_TRANSFORMS
            assert np.array_equal(inv.apply(t.apply(probe)), probe)
            assert np.array_equal(t.apply_inverse(t.apply(probe)), probe)
            # the inverse's action belongs to the set of group actions
            assert inv.apply(probe).tobytes() in actions

    def test_composition_closed(self):
        probe = _probe()
        actions = {t.apply(probe).tobytes() for t in D4_TRANSFORMS}
        for a in D4_TRANSFORMS:
            for b in D4_TRANSFORMS:
                composed = b.apply(a.apply(probe))
                assert composed.tobytes() in actions

    def test_flip_both_axes_equals_rot180(self):
        probe = _probe()
        both = probe[::-1, ::-1]
        rot180 = D4Transform(2, False).apply(probe)
        assert np.array_equal(both, rot180)


class TestTta:
    def test_expand_returns_eight(self):
        img = np.random.default_rng(0).random((4, 16, 16))
        views = tta_expand(img)
        assert len(views) == 8
        assert all(v.shape == img.shape for v in views)

    def test_identical_predictions_average_to_same(self):
        pm = np.random.default_rng(1).random((8, 8))
        # simulate an oracle that returns the correctly-transformed map for
        # every orientation: folding must reproduce the map itself
        preds = [t.apply(pm) for t in D4_TRANSFORMS]
        assert np.allclose(tta_fold(preds), pm, atol=1e-12)

    def test_fold_rejects_wrong_count(self):
        with pytest.raises(ValueError):
            tta_fold([np.zeros((4, 4))] * 7)

    def test_expand_rejects_non_square(self):
        with pytest.raises(ValueError, match="square"):
            tta_expand(np.zeros((3, 4, 5)))

    def test_equivariant_stub_model_matches_single_pass(self):
        # stub "model": prediction = normalized green channel (equivariant)
        rng = np.random.default_rng(2)
        img = rng.random((4, 12, 12))

        def stub(x):
            return x[1] * 0.5 + 0.25

        single = stub(img)
        folded = tta_fold([stub(v) for v in tta_expand(img)])
        assert np.allclose(folded, single, atol=1e-12)


class TestSpatialAugment:
    def test_zero_probability_is_identity(self):
        rng = np.random.default_rng(3)
        img = rng.random((20, 24, 3))
        mask = (rng.random((20, 24)) > 0.5).astype(np.float64)
        wmap = 1.0 + rng.random((20, 24))
        out_img, out_mask, out_wmap = spatial_augment(img, mask, wmap,
                                                      all_probs_zero(),
                                                      np.random.default_rng(0))
        assert np.array_equal(out_img, img)
        assert np.array_equal(out_mask, mask)
        assert np.array_equal(out_wmap, wmap)

    def test_horizontal_flip_twice_is_identity(self):
        cfg = all_probs_zero()
        cfg.hflip_prob = 1.0
        rng = np.random.default_rng(4)
        img = rng.random((10, 12, 3))
        mask = (rng.random((10, 12)) > 0.5).astype(np.float64)
        wmap = np.ones((10, 12))
        i1, m1, w1 = spatial_augment(img, mask, wmap, cfg, np.random.default_rng(1))
        i2, m2, w2 = spatial_augment(i1, m1, w1, cfg, np.random.default_rng(1))
        assert np.array_equal(i2, img)
        assert np.array_equal(m2, mask)

    def test_masks_stay_binary_under_all_transforms(self):
        cfg = AugmentConfig()  # all spatial transforms at default probability
        rng = np.random.default_rng(5)
        base_mask = (rng.random((24, 24)) > 0.5).astype(np.float64)
        img = rng.random((24, 24, 3))
        wmap = 1.0 + rng.random((24, 24))
        for trial in range(200):
            _, m, _ = spatial_augment(img, base_mask, wmap, cfg,
                                      np.random.default_rng((9, trial)))
            assert set(np.unique(m)).issubset({0.0, 1.0})

    def test_same_seed_reproduces_bitwise(self):
        cfg = AugmentConfig()
        rng = np.random.default_rng(6)
        img = rng.random((16, 16, 3))
        mask = (rng.random((16, 16)) > 0.5).astype(np.float64)
        wmap = 1.0 + rng.random((16, 16))
        a = spatial_augment(img, mask, wmap, cfg, np.random.default_rng(42))
        b = spatial_augment(img, mask, wmap, cfg, np.random.default_rng(42))
        for x, y in zip(a, b):
            assert np.array_equal(x, y)

    def test_misaligned_inputs_rejected(self):
        with pytest.raises(ValueError, match="align"):
            spatial_augment(np.zeros((4, 4, 3)), np.zeros((5, 5)), np.zeros((4, 4)),
                            all_probs_zero(), np.random.default_rng(0))


class _ScriptedRng:
    """Deterministic stand-in with scripted uniform/random draws."""

    def __init__(self, randoms, uniforms):
        self._randoms = list(randoms)
        self._uniforms = list(uniforms)

    def random(self):
        return self._randoms.pop(0)

    def uniform(self, lo, hi):
        frac = self._uniforms.pop(0)
        return lo + (hi - lo) * frac


class TestPhotometricAugment:
    def test_zero_probability_is_identity(self):
        rng = np.random.default_rng(7)
        img = rng.random((12, 12, 3))
        out = photometric_augment(img, all_probs_zero(), np.random.default_rng(0))
        assert np.array_equal(out, img)

    def test_unit_gamma_is_identity(self):
        cfg = all_probs_zero()
        cfg.gamma_prob = 1.0
        cfg.gamma_low = cfg.gamma_high = 1.0
        rng = np.random.default_rng(8)
        img = rng.random((8, 8, 3))
        out = photometric_augment(img, cfg, np.random.default_rng(0))
        assert np.allclose(out, img, atol=1e-12)

    def test_brightness_saturates_at_one(self):
        cfg = all_probs_zero()
        cfg.brightness_contrast_prob = 1.0
        img = np.full((4, 4, 3), 0.9)
        # scripted draws: fire brightness/contrast (then 5 unfired gates),
        # with brightness=+0.3 and contrast=0.0
        rng = _ScriptedRng(randoms=[0.0, 1, 1, 1, 1, 1], uniforms=[1.0, 0.5])
        out = photometric_augment(img, cfg, rng)
        assert np.all(out == 1.0)

    def test_output_clamped_to_unit_range(self):
        cfg = AugmentConfig()
        rng = np.random.default_rng(9)
        img = rng.random((16, 16, 3))
        for trial in range(40):
            out = photometric_augment(img, cfg, np.random.default_rng((3, trial)))
            assert out.min() >= 0.0 and out.max() <= 1.0


class TestMixup:
    def test_lambda_one_returns_first_sample(self):
        rng = np.random.default_rng(10)
        a = (rng.random((4, 5, 5)), rng.random((5, 5)), rng.random((5, 5)))
        b = (rng.random((4, 5, 5)), rng.random((5, 5)), rng.random((5, 5)))
        x, g, w, lam = mixup(a, b, 0.2, np.random.default_rng(0), lam=1.0)
        assert np.array_equal(x, a[0]) and np.array_equal(g, a[1])

    def test_half_lambda_blends_evenly(self):
        a = (np.zeros((1, 3, 3)), np.zeros((3, 3)), np.ones((3, 3)))
        b = (np.ones((1, 3, 3)), np.ones((3, 3)), 3 * np.ones((3, 3)))
        x, g, w, lam = mixup(a, b, 0.2, np.random.default_rng(0), lam=0.5)
        assert np.all(x == 0.5) and np.all(g == 0.5) and np.all(w == 2.0)

    def test_beta_sampler_mean(self):
        rng = np.random.default_rng(11)
        draws = rng.beta(0.2, 0.2, size=100_000)
        assert abs(draws.mean() - 0.5) < 0.01

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            mixup((np.zeros((1, 2, 2)), np.zeros((2, 2)), np.zeros((2, 2))),
                  (np.zeros((1, 3, 3)), np.zeros((3, 3)), np.zeros((3, 3))),
                  0.2, np.random.default_rng(0))
