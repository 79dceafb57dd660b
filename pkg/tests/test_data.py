"""Synthetic task generation, dataset files, and the Dice metric."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aggsearch.data import (
    SyntheticTaskSpec, _coords, _object_fields, dice, dice_per_class,
    flip_augment, generate, generate_sample, load_dataset,
    mean_foreground_dice, save_dataset,
)
from aggsearch.errors import ConfigError, ShapeError

from helpers import counting_dice


class TestGenerator:
    def test_same_seed_is_bitwise_identical(self):
        spec = SyntheticTaskSpec(extent=32, samples=4, seed=9)
        a = generate(spec)
        b = generate(spec)
        for sa, sb in zip(a, b):
            assert sa.image.tobytes() == sb.image.tobytes()
            assert sa.label.tobytes() == sb.label.tobytes()

    def test_different_seeds_differ(self):
        a = generate(SyntheticTaskSpec(extent=32, samples=2, seed=0))
        b = generate(SyntheticTaskSpec(extent=32, samples=2, seed=1))
        assert a[0].image.tobytes() != b[0].image.tobytes()

    def test_labels_partition_and_shapes(self):
        spec = SyntheticTaskSpec(extent=32, samples=3, seed=2)
        for s in generate(spec):
            assert s.image.shape == (1, 32, 32)
            assert s.label.shape == (32, 32)
            assert s.label.dtype == np.uint8
            assert set(np.unique(s.label)) <= {0, 1, 2}

    def test_images_normalized(self):
        for s in generate(SyntheticTaskSpec(extent=32, samples=3, seed=3)):
            assert abs(s.image.mean()) <= 1e-12
            np.testing.assert_allclose(s.image.std(), 1.0, rtol=1e-12)

    def test_sphere_label_is_inside_predicate(self):
        # With zero noise the voxel class is exactly the geometric predicate.
        coords = _coords((17, 17))
        cov, inside = _object_fields("sphere", coords, [8.0, 8.0], 4.0,
                                     np.random.default_rng(0))
        dist = np.sqrt((coords[0] - 8.0) ** 2 + (coords[1] - 8.0) ** 2)
        np.testing.assert_array_equal(inside, dist <= 4.0)
        assert np.all((cov >= 0) & (cov <= 1))
        assert np.all(cov[dist <= 3.0] == 1.0)

    def test_class_presence_over_200_samples(self):
        spec = SyntheticTaskSpec(extent=32, samples=200, seed=5)
        present = {1: 0, 2: 0}
        for s in generate(spec):
            for c in (1, 2):
                present[c] += bool((s.label == c).any())
        assert present[1] >= 180 and present[2] >= 180

    def test_rank3_generation(self):
        spec = SyntheticTaskSpec(rank=3, extent=32, samples=1, seed=6)
        s = generate(spec)[0]
        assert s.image.shape == (1, 32, 32, 32)
        assert (s.label == 1).any() and (s.label == 2).any()

    def test_extent_too_small_rejected(self):
        with pytest.raises(ConfigError, match="extent"):
            SyntheticTaskSpec(extent=16)

    def test_noise_zero_image_is_pure_coverage(self):
        spec = SyntheticTaskSpec(extent=32, samples=1, seed=7, noise_std=0.0)
        s = generate(spec)[0]
        img = s.image[0]
        # normalized two-ish-level field: background all equal
        bg = img[s.label == 0]
        fg = img[s.label > 0]
        assert bg.min() == bg.flat[0] or np.unique(bg).size < bg.size
        assert fg.mean() > bg.mean()


class TestDatasetIO:
    def test_round_trip(self, tmp_path):
        spec = SyntheticTaskSpec(extent=32, samples=3, seed=11)
        samples = generate(spec)
        save_dataset(tmp_path / "d", spec, samples)
        spec2, back = load_dataset(tmp_path / "d")
        assert spec2 == spec
        for a, b in zip(samples, back):
            assert a.image.tobytes() == b.image.tobytes()
            assert a.label.tobytes() == b.label.tobytes()

    def test_manifest_names_prng(self, tmp_path):
        spec = SyntheticTaskSpec(extent=32, samples=1, seed=0)
        save_dataset(tmp_path / "d", spec, generate(spec))
        doc = json.loads((tmp_path / "d" / "manifest.json").read_text())
        assert doc["prng"] == "numpy-pcg64"
        assert doc["schema"] == "agg_dataset_v1"

    def test_flip_augment_keeps_alignment(self):
        spec = SyntheticTaskSpec(extent=32, samples=2, seed=12)
        samples = generate(spec)
        images = np.stack([s.image for s in samples])
        labels = np.stack([s.label for s in samples])
        fi, fl = flip_augment(images.copy(), labels.copy(),
                              np.random.default_rng(1))
        # the multiset of (intensity, label) pairs is preserved under flips
        assert sorted(zip(fi.reshape(-1), fl.reshape(-1))) == \
               sorted(zip(images.reshape(-1), labels.reshape(-1)))


class TestDice:
    def test_identical_masks(self):
        m = np.array([0, 1, 2, 1])
        assert dice(m, m, 1) == 1.0

    def test_disjoint_nonempty(self):
        assert dice(np.array([1, 1, 0]), np.array([0, 0, 1]), 1) == 0.0

    def test_counting_example(self):
        # |P|=4, |T|=4, |P∩T|=2 -> 0.5, against the counting oracle.
        pred = np.array([1, 1, 1, 1, 0, 0, 0, 0])
        true = np.array([1, 1, 0, 0, 1, 1, 0, 0])
        assert dice(pred, true, 1) == 0.5
        assert counting_dice(pred, true, 1) == 0.5

    def test_empty_empty_convention(self):
        z = np.zeros(6, dtype=int)
        assert dice(z, z, 2) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError, match="dice"):
            dice(np.zeros(3), np.zeros(4), 0)

    def test_matches_counting_oracle_on_random_masks(self):
        rng = np.random.default_rng(13)
        for _ in range(200):
            shape = tuple(rng.integers(2, 7, size=2))
            pred = rng.integers(0, 3, size=shape)
            true = rng.integers(0, 3, size=shape)
            c = int(rng.integers(0, 3))
            assert abs(dice(pred, true, c) - counting_dice(pred, true, c)) <= 1e-12

    @given(st.integers(0, 2**31), st.integers(1, 40))
    @settings(max_examples=40, deadline=None)
    def test_symmetry_and_permutation_invariance(self, seed, n):
        rng = np.random.default_rng(seed)
        pred = rng.integers(0, 3, size=n)
        true = rng.integers(0, 3, size=n)
        c = int(rng.integers(0, 3))
        assert dice(pred, true, c) == dice(true, pred, c)
        perm = rng.permutation(n)
        assert dice(pred, true, c) == dice(pred[perm], true[perm], c)

    def test_per_class_and_foreground_mean(self):
        pred = np.array([0, 1, 2, 2])
        true = np.array([0, 1, 2, 1])
        per = dice_per_class(pred, true, 3)
        assert per[0] == 1.0
        np.testing.assert_allclose(per[1], 2 * 1 / (1 + 2))
        np.testing.assert_allclose(per[2], 2 * 1 / (2 + 1))
        np.testing.assert_allclose(mean_foreground_dice(pred, true, 3),
                                   np.mean(per[1:]))
