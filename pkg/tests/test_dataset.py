import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gazedebias import dataset as ds
from gazedebias.dataset import ConfigError, GazeDirection, SynthConfig
from gazedebias.evaluation import pixel_mean_probe

SMALL = SynthConfig(subject_count=10, samples_per_subject=20, image_shape=(3, 16, 16), seed=7)


@pytest.fixture(scope="module")
def small():
    return ds.generate_synthetic_dataset(SMALL)


def test_generation_is_byte_identical(small):
    again = ds.generate_synthetic_dataset(SMALL)
    assert small.images.tobytes() == again.images.tobytes()
    assert small.gazes.tobytes() == again.gazes.tobytes()
    assert np.array_equal(small.subjects, again.subjects)


def test_counts():
    d = ds.generate_synthetic_dataset(SynthConfig(subject_count=10, samples_per_subject=200, image_shape=(3, 8, 8)))
    assert len(d) == 2000
    assert d.subject_count == 10
    assert d.subject_ids == list(range(10))


def test_value_ranges(small):
    assert small.images.dtype == np.float32
    assert small.images.min() >= 0 and small.images.max() <= 1
    assert np.all(np.abs(small.gazes) <= SMALL.gaze_range)
    assert np.all(np.abs(small.gazes) <= np.pi / 2)


def test_rerender_reproduces_every_image(small):
    for i in range(len(small)):
        s = small[i]
        img = ds.render_image(s.style, s.gaze, s.noise_seed, SMALL)
        assert np.array_equal(img, s.image)


def test_same_subject_shares_latent(small):
    for subj in small.subject_ids:
        styles = small.styles[small.subjects == subj]
        assert np.all(styles == styles[0])


@pytest.mark.parametrize(
    "bad",
    [
        dict(subject_count=0),
        dict(samples_per_subject=0),
        dict(image_shape=(3, 4, 4)),
        dict(image_shape=(32, 32)),
        dict(noise_std=-1.0),
        dict(confound_strength=-0.1),
    ],
)
def test_invalid_config(bad):
    with pytest.raises(ConfigError):
        ds.generate_synthetic_dataset(SynthConfig(**{**SMALL.to_dict(), **bad}))


def test_colour_confound_has_zero_luminance():
    field = ds.appearance_field(np.array([1.0, -0.5, 0.3, 0.2]), 3, 8, 8)
    assert np.allclose(field.sum(axis=0), 0.0, atol=1e-12)


def test_confound_is_decodable_from_pixel_means():
    d = ds.generate_synthetic_dataset(SynthConfig(subject_count=10, samples_per_subject=60, image_shape=(3, 16, 16),
                                                  confound_strength=0.5, seed=1))
    assert pixel_mean_probe(d, seed=0) > 2 * 0.1


def test_no_confound_means_chance_pixel_probe():
    d = ds.generate_synthetic_dataset(SynthConfig(subject_count=10, samples_per_subject=60, image_shape=(3, 16, 16),
                                                  confound_strength=0.0, seed=1))
    # 120 held-out samples; chance 0.1 with binomial std ~0.027
    assert pixel_mean_probe(d, seed=0) < 0.1 + 3 * 0.0274


class TestLoso:
    def test_partition(self, small):
        train, test = ds.split_leave_one_subject_out(small, 3)
        assert train.subject_ids == [s for s in range(10) if s != 3]
        assert test.subject_ids == [3]
        assert set(train.index) | set(test.index) == set(range(len(small)))
        assert set(train.index) & set(test.index) == set()

    def test_all_folds_cover_each_sample_once(self, small):
        counts = np.zeros(len(small), dtype=int)
        test_sets = []
        for s in small.subject_ids:
            _, test = ds.split_leave_one_subject_out(small, s)
            counts[test.index] += 1
            test_sets.append(frozenset(test.index.tolist()))
        assert np.all(counts == 1)
        assert len(set(test_sets)) == 10

    def test_invalid_subject(self, small):
        with pytest.raises(ConfigError):
            ds.split_leave_one_subject_out(small, 10)


class TestSubjectSampling:
    def test_k_equals_all(self, small):
        assert ds.sample_meta_train_subjects(small, 10, np.random.default_rng(0)) == list(range(10))

    def test_k_subset(self, small):
        chosen = ds.sample_meta_train_subjects(small, 5, np.random.default_rng(0))
        assert len(chosen) == len(set(chosen)) == 5
        assert set(chosen) <= set(small.subject_ids)

    def test_deterministic(self, small):
        a = ds.sample_meta_train_subjects(small, 5, np.random.default_rng(42))
        b = ds.sample_meta_train_subjects(small, 5, np.random.default_rng(42))
        assert a == b

    @pytest.mark.parametrize("k", [0, 11])
    def test_k_out_of_range(self, small, k):
        with pytest.raises(ConfigError):
            ds.sample_meta_train_subjects(small, k, np.random.default_rng(0))

    def test_adapt_disjoint(self, small):
        exclude = [0, 2, 4, 6, 8]
        adapt = ds.sample_meta_adapt_subjects(small, exclude, 2, np.random.default_rng(0))
        assert len(adapt) == 2 and not set(adapt) & set(exclude)

    def test_adapt_forced(self, small):
        exclude = list(range(8))
        assert ds.sample_meta_adapt_subjects(small, exclude, 2, np.random.default_rng(0)) == [8, 9]

    def test_adapt_insufficient(self, small):
        with pytest.raises(ConfigError):
            ds.sample_meta_adapt_subjects(small, list(range(9)), 2, np.random.default_rng(0))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_meta_sets_never_overlap(k, p, seed):
    d = ds.generate_synthetic_dataset(SynthConfig(subject_count=11, samples_per_subject=1, image_shape=(3, 8, 8)))
    rng = np.random.default_rng(seed)
    train = ds.sample_meta_train_subjects(d, k, rng)
    for _ in range(5):
        adapt = ds.sample_meta_adapt_subjects(d, train, p, rng)
        assert not set(adapt) & set(train)
        assert len(set(adapt)) == p


class TestBatches:
    def _data(self, n):
        return ds.generate_synthetic_dataset(SynthConfig(subject_count=2, samples_per_subject=n // 2,
                                                         image_shape=(3, 8, 8)))

    def test_full_pass_partition(self):
        d = self._data(64)
        it = ds.make_batches(d, [0, 1], 32, np.random.default_rng(0))
        b1, b2 = next(it), next(it)
        assert len(b1.rows) == len(b2.rows) == 32
        assert sorted(np.concatenate([b1.rows, b2.rows]).tolist()) == list(range(64))

    def test_short_final_batch(self):
        d = self._data(50)
        it = ds.make_batches(d, [0, 1], 32, np.random.default_rng(0))
        assert [len(next(it).rows) for _ in range(2)] == [32, 18]

    def test_deterministic(self):
        d = self._data(50)
        a = [next(ds.make_batches(d, [0, 1], 8, np.random.default_rng(3))).rows for _ in range(1)]
        b = [next(ds.make_batches(d, [0, 1], 8, np.random.default_rng(3))).rows for _ in range(1)]
        assert np.array_equal(a[0], b[0])
        s1 = list(itertools.islice(ds.make_batches(d, [0, 1], 8, np.random.default_rng(3)), 10))
        s2 = list(itertools.islice(ds.make_batches(d, [0, 1], 8, np.random.default_rng(3)), 10))
        assert all(np.array_equal(x.rows, y.rows) for x, y in zip(s1, s2))

    def test_restricted_to_subjects(self):
        d = self._data(50)
        batch = next(ds.make_batches(d, [1], 100, np.random.default_rng(0)))
        assert set(batch.subjects.tolist()) == {1}
        assert batch.images.shape == (25, 3, 8, 8)

    def test_empty_pool(self):
        d = self._data(50)
        with pytest.raises(ConfigError):
            next(ds.make_batches(d, [5], 8, np.random.default_rng(0)))


class TestStyleClusters:
    def test_gaze_held_fixed(self):
        cluster = ds.generate_style_cluster(GazeDirection(0.1, -0.2), 5, SMALL, seed=0)
        assert all(s.gaze == GazeDirection(0.1, -0.2) for s in cluster)

    def test_seven_by_seventy(self):
        cfg = SynthConfig(image_shape=(3, 8, 8))
        clusters = [ds.generate_style_cluster((0.05 * i, 0.0), 70, cfg, seed=i) for i in range(7)]
        assert sum(len(c) for c in clusters) == 490

    def test_distinct_latents_distinct_pixels(self):
        cfg = SynthConfig(image_shape=(3, 16, 16), noise_std=0.0)
        a, b = ds.generate_style_cluster((0.0, 0.0), 2, cfg, seed=11)
        assert not np.array_equal(a.style, b.style)
        assert not np.array_equal(a.image, b.image)

    def test_deterministic(self):
        a = ds.generate_style_cluster((0.0, 0.0), 3, SMALL, seed=4)
        b = ds.generate_style_cluster((0.0, 0.0), 3, SMALL, seed=4)
        assert all(np.array_equal(x.image, y.image) for x, y in zip(a, b))

    def test_needs_two(self):
        with pytest.raises(ConfigError):
            ds.generate_style_cluster((0.0, 0.0), 1, SMALL, seed=0)


@pytest.mark.parametrize("fmt", ["float32", "png8"])
def test_serialization_round_trip(tmp_path, small, fmt):
    ds.save_dataset(small, tmp_path / fmt, image_format=fmt)
    back = ds.load_dataset(tmp_path / fmt)
    assert back.subject_count == small.subject_count
    assert back.image_shape == small.image_shape
    assert np.array_equal(back.subjects, small.subjects)
    assert np.array_equal(back.gazes, small.gazes)
    if fmt == "float32":
        assert np.array_equal(back.images, small.images)
    else:
        assert np.max(np.abs(back.images - small.images)) <= 0.5 / 255 + 1e-6
