"""Synthetic task generation, episodes, augmentation, and dataset I/O."""
import numpy as np
import pytest

from metaseg import tasks
from metaseg.ops import ContractViolation
from metaseg.tasks import (Example, augment, generate_task_library, hflip,
                           load_dataset, sample_episode, save_dataset,
                           select_tasks, split_tasks)


@pytest.fixture(scope="module")
def library():
    return generate_task_library(6, 10, 32, master_seed=123)


class TestGenerator:
    def test_same_seed_bitwise_identical(self, library):
        again = generate_task_library(6, 10, 32, master_seed=123)
        for a, b in zip(library, again):
            assert a.id == b.id
            for ea, eb in zip(a.examples, b.examples):
                assert np.array_equal(ea.image, eb.image)
                assert np.array_equal(ea.mask, eb.mask)

    def test_foreground_fraction_bounds_1000_samples(self):
        lib = generate_task_library(25, 40, 32, master_seed=7)
        fracs = [ex.mask.mean() for t in lib for ex in t.examples]
        assert len(fracs) == 1000
        assert min(fracs) >= 0.02 and max(fracs) <= 0.6

    def test_families_differ(self, library):
        specs = [(t.family_spec.kind, t.family_spec.bg_tex_freq) for t in library]
        assert len(set(specs)) == len(specs)

    def test_image_range_and_mask_binary(self, library):
        for t in library:
            for ex in t.examples:
                assert ex.image.shape == (1, 32, 32)
                assert ex.mask.shape == (32, 32)
                assert 0.0 <= ex.image.min() and ex.image.max() <= 1.0
                assert set(np.unique(ex.mask)) <= {0.0, 1.0}

    def test_every_mask_nonempty_both_classes(self, library):
        for t in library:
            for ex in t.examples:
                assert 0.0 < ex.mask.mean() < 1.0

    def test_too_small_inputs_rejected(self):
        with pytest.raises(ContractViolation):
            generate_task_library(3, 10, 32, 0)
        with pytest.raises(ContractViolation):
            generate_task_library(4, 9, 32, 0)
        with pytest.raises(ContractViolation):
            generate_task_library(4, 10, 8, 0)


class TestSampleEpisode:
    def test_disjoint_no_overlap(self, library):
        ep = sample_episode(library[0], 5, 5, "disjoint",
                            np.random.default_rng(0))
        assert len(ep.train) == 5 and len(ep.val) == 5
        assert not set(ep.train_indices) & set(ep.val_indices)

    def test_union_mode_allows_duplicates(self, library):
        ep = sample_episode(library[0], 5, 5, "with_replacement_union",
                            np.random.default_rng(1))
        pool = len(library[0].examples)
        assert all(0 <= i < pool for i in ep.train_indices + ep.val_indices)

    def test_fixed_rng_reproducible(self, library):
        a = sample_episode(library[0], 5, 5, "disjoint", np.random.default_rng(2))
        b = sample_episode(library[0], 5, 5, "disjoint", np.random.default_rng(2))
        assert a.train_indices == b.train_indices
        assert a.val_indices == b.val_indices

    def test_insufficient_pool_rejected(self, library):
        with pytest.raises(ContractViolation):
            sample_episode(library[0], 6, 5, "disjoint", np.random.default_rng(3))

    def test_unknown_mode_rejected(self, library):
        with pytest.raises(ContractViolation):
            sample_episode(library[0], 5, 5, "bogus", np.random.default_rng(4))


class TestAugment:
    def test_rate_zero_is_identity(self, library):
        ex = library[0].examples[0]
        out = augment(ex, 0.0, np.random.default_rng(0))
        assert np.array_equal(out.image, ex.image)
        assert np.array_equal(out.mask, ex.mask)

    def test_hflip_is_involution(self, library):
        ex = library[0].examples[0]
        out = hflip(hflip(ex))
        assert np.array_equal(out.image, ex.image)
        assert np.array_equal(out.mask, ex.mask)

    def test_masks_stay_binary_and_shapes_fixed_1000_draws(self, library):
        rng = np.random.default_rng(5)
        ex = library[0].examples[0]
        for _ in range(1000):
            out = augment(ex, 1.0, rng)
            assert out.image.shape == ex.image.shape
            assert out.mask.shape == ex.mask.shape
            assert set(np.unique(out.mask)) <= {0.0, 1.0}
            assert 0.0 <= out.image.min() and out.image.max() <= 1.0

    def test_deterministic_under_fixed_stream(self, library):
        ex = library[0].examples[0]
        a = augment(ex, 0.7, np.random.default_rng(6))
        b = augment(ex, 0.7, np.random.default_rng(6))
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.mask, b.mask)


class TestDatasetIO:
    def test_roundtrip_exact(self, library, tmp_path):
        save_dataset(library, tmp_path)
        loaded = load_dataset(tmp_path)
        assert [t.id for t in loaded] == sorted(t.id for t in library)
        by_id = {t.id: t for t in library}
        for t in loaded:
            for ea, eb in zip(t.examples, by_id[t.id].examples):
                assert np.array_equal(ea.image, eb.image)
                assert np.array_equal(ea.mask, eb.mask)

    def test_missing_mask_names_file(self, library, tmp_path):
        save_dataset(library[:1], tmp_path)
        tdir = tmp_path / library[0].id
        (tdir / "000.mask.pgm").unlink()
        with pytest.raises(ContractViolation, match="000"):
            load_dataset(tmp_path)

    def test_missing_image_names_file(self, library, tmp_path):
        save_dataset(library[:1], tmp_path)
        (tmp_path / library[0].id / "001.img.pgm").unlink()
        with pytest.raises(ContractViolation, match="001"):
            load_dataset(tmp_path)

    def test_size_mismatch_rejected(self, library, tmp_path):
        save_dataset(library[:1], tmp_path)
        tdir = tmp_path / library[0].id
        tasks._write_pgm(tdir / "000.mask.pgm", np.zeros((16, 16), dtype=np.uint8))
        with pytest.raises(ContractViolation, match="mismatch"):
            load_dataset(tmp_path)

    def test_malformed_file_rejected(self, library, tmp_path):
        save_dataset(library[:1], tmp_path)
        tdir = tmp_path / library[0].id
        (tdir / "000.img.pgm").write_bytes(b"P6 not a pgm")
        with pytest.raises(ContractViolation, match="000"):
            load_dataset(tmp_path)

    def test_empty_directory_warns(self, tmp_path):
        with pytest.warns(UserWarning):
            assert load_dataset(tmp_path) == []

    def test_mask_binarization_threshold(self, tmp_path):
        tdir = tmp_path / "t"
        tdir.mkdir()
        img = np.full((16, 16), 100, dtype=np.uint8)
        msk = np.zeros((16, 16), dtype=np.uint8)
        msk[:8] = 127
        msk[8:] = 128
        tasks._write_pgm(tdir / "000.img.pgm", img)
        tasks._write_pgm(tdir / "000.mask.pgm", msk)
        loaded = load_dataset(tmp_path)
        mask = loaded[0].examples[0].mask
        assert np.all(mask[:8] == 0.0) and np.all(mask[8:] == 1.0)


class TestSplitTasks:
    def test_fraction_arithmetic(self, ):
        lib = generate_task_library(20, 10, 32, 1)
        split = split_tasks(lib, (0.6, 0.2, 0.2), seed=0)
        assert (len(split.train_tasks), len(split.val_tasks),
                len(split.test_tasks)) == (12, 4, 4)

    def test_same_seed_same_split(self):
        lib = generate_task_library(10, 10, 32, 2)
        a = split_tasks(lib, (0.6, 0.2, 0.2), seed=5)
        b = split_tasks(lib, (0.6, 0.2, 0.2), seed=5)
        assert a == b

    def test_partitions_disjoint_and_cover_100_seeds(self):
        lib = generate_task_library(9, 10, 32, 3)
        all_ids = {t.id for t in lib}
        for seed in range(100):
            s = split_tasks(lib, (0.5, 0.25, 0.25), seed=seed)
            parts = [set(s.train_tasks), set(s.val_tasks), set(s.test_tasks)]
            assert parts[0] | parts[1] | parts[2] == all_ids
            assert not parts[0] & parts[1]
            assert not parts[0] & parts[2]
            assert not parts[1] & parts[2]

    def test_bad_fractions_rejected(self):
        lib = generate_task_library(4, 10, 32, 4)
        with pytest.raises(ContractViolation):
            split_tasks(lib, (0.5, 0.5, 0.5), seed=0)
        with pytest.raises(ContractViolation):
            split_tasks(lib, (0.5, 0.5), seed=0)

    def test_select_preserves_order(self):
        lib = generate_task_library(5, 10, 32, 5)
        ids = [lib[3].id, lib[1].id]
        assert [t.id for t in select_tasks(lib, ids)] == ids


class TestPipelineDeterminism:
    def test_generate_split_episode_augment_bitwise(self):
        def run():
            lib = generate_task_library(5, 10, 32, master_seed=77)
            split = split_tasks(lib, (0.6, 0.2, 0.2), seed=1)
            task = select_tasks(lib, split.train_tasks)[0]
            rng = np.random.default_rng(9)
            ep = sample_episode(task, 5, 5, "disjoint", rng)
            return [augment(e, 0.5, rng) for e in ep.train]

        a, b = run(), run()
        for ea, eb in zip(a, b):
            assert np.array_equal(ea.image, eb.image)
            assert np.array_equal(ea.mask, eb.mask)
