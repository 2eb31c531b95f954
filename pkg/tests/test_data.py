"""Generator soundness, PGM round trips, Dice oracle, split properties."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxseg.data import (GeneratorConfig, Sample, SampleAttrs, SplitSpec,
                         centroid_side, decode_image, dice, encode_image,
                         generate_dataset, generate_sample, mc_split,
                         read_dataset, read_pgm, report_consistent,
                         split_indices, write_dataset, write_pgm)
from ctxseg.errors import DataFormatError, ShapeError

from oracles import dice_counters


class TestGenerator:
    def test_same_seed_bitwise_identical(self):
        cfg = GeneratorConfig()
        a = generate_sample(123, cfg)
        b = generate_sample(123, cfg)
        assert a.image.tobytes() == b.image.tobytes()
        assert a.mask.tobytes() == b.mask.tobytes()
        assert a.report == b.report and a.attrs == b.attrs

    def test_absent_gives_empty_mask_and_negative_sentence(self):
        cfg = GeneratorConfig(present_fraction=0.0)
        s = generate_sample(5, cfg)
        assert not s.attrs.present
        assert s.mask.sum() == 0
        assert "no pneumothorax" in s.report.lower()

    def test_mask_side_matches_attrs(self):
        cfg = GeneratorConfig()
        for seed in range(50):
            s = generate_sample(seed, cfg)
            if s.attrs.present:
                assert centroid_side(s.mask) == s.attrs.side

    def test_large_at_least_twice_small_median(self):
        cfg = GeneratorConfig(ambiguous_fraction=0.0)
        small, large = [], []
        for seed in range(400):
            s = generate_sample(seed, cfg)
            (small if s.attrs.size == "small" else large).append(int(s.mask.sum()))
        assert min(large) >= 2 * np.median(small) * 0.95   # rasterization slack

    def test_ambiguous_twin_statistics_match(self):
        # target and mirrored distractor crescents should look alike: compare
        # mean intensity inside the mask vs inside its left-right mirror
        cfg = GeneratorConfig(ambiguous_fraction=1.0)
        t_means, d_means = [], []
        for seed in range(200):
            s = generate_sample(seed, cfg)
            m = s.mask.astype(bool)
            t_means.append(float(s.image[m].mean()))
            d_means.append(float(s.image[m[:, ::-1]].mean()))
        t, d = np.mean(t_means), np.mean(d_means)
        assert abs(t - d) / t < 0.05

    def test_invariants_over_many_samples(self):
        cfg = GeneratorConfig(present_fraction=0.9, ambiguous_fraction=0.5)
        for seed in range(10000):
            s = generate_sample(seed, cfg)
            assert report_consistent(s), f"seed {seed}: {s.report} {s.attrs}"
            assert s.image.min() >= 0.0 and s.image.max() <= 1.0
            assert set(np.unique(s.mask)) <= {0, 1}
            assert bool(s.mask.sum()) == s.attrs.present


class TestPgm:
    def test_hand_written_fixture(self, tmp_path):
        path = tmp_path / "tiny.pgm"
        path.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 64, 128, 255]))
        arr, maxval = read_pgm(path)
        assert maxval == 255
        np.testing.assert_array_equal(arr, [[0, 64], [128, 255]])

    def test_16bit_round_trip(self, tmp_path, rng):
        img = rng.random((6, 7)).astype(np.float32)
        path = tmp_path / "img.pgm"
        write_pgm(path, encode_image(img), 65535)
        raw, maxval = read_pgm(path)
        assert maxval == 65535
        back = decode_image(raw)
        assert np.abs(back - img).max() <= 1.0 / 65535

    def test_comment_lines_skipped(self, tmp_path):
        path = tmp_path / "c.pgm"
        path.write_bytes(b"P5\n# a comment\n2 1\n255\n\x01\x02")
        arr, _ = read_pgm(path)
        np.testing.assert_array_equal(arr, [[1, 2]])

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.pgm"
        path.write_bytes(b"P6\n1 1\n255\n\x00")
        with pytest.raises(DataFormatError, match="P5"):
            read_pgm(path)

    def test_short_payload(self, tmp_path):
        path = tmp_path / "short.pgm"
        path.write_bytes(b"P5\n4 4\n255\n\x00\x00")
        with pytest.raises(DataFormatError, match="payload"):
            read_pgm(path)


class TestDatasetIO:
    def test_round_trip(self, tmp_path):
        cfg = GeneratorConfig(n=6, image_size=32)
        samples = generate_dataset(cfg, base_seed=3)
        write_dataset(samples, tmp_path / "d", meta={"n": 6})
        loaded = read_dataset(tmp_path / "d")
        assert len(loaded) == 6
        for a, b in zip(samples, loaded):
            assert np.abs(a.image - b.image).max() <= 1.0 / 65535
            np.testing.assert_array_equal(a.mask, b.mask)
            assert a.report == b.report and a.attrs == b.attrs and a.seed == b.seed

    def test_manifest_line_count(self, tmp_path):
        samples = generate_dataset(GeneratorConfig(n=4, image_size=32), 0)
        write_dataset(samples, tmp_path / "d")
        lines = (tmp_path / "d" / "manifest.jsonl").read_text().strip().splitlines()
        assert len(lines) == 4

    def test_write_read_write_idempotent(self, tmp_path):
        samples = generate_dataset(GeneratorConfig(n=3, image_size=32), 9)
        write_dataset(samples, tmp_path / "a", meta={"k": 1})
        write_dataset(read_dataset(tmp_path / "a"), tmp_path / "b", meta={"k": 1})
        for rel in ["manifest.jsonl", "meta.json", "images/000000.pgm",
                    "masks/000002.pgm"]:
            assert (tmp_path / "a" / rel).read_bytes() == \
                   (tmp_path / "b" / rel).read_bytes()

    def test_malformed_manifest_names_line(self, tmp_path):
        samples = generate_dataset(GeneratorConfig(n=2, image_size=32), 1)
        write_dataset(samples, tmp_path / "d")
        manifest = tmp_path / "d" / "manifest.jsonl"
        lines = manifest.read_text().splitlines()
        lines[1] = json.dumps({"id": "000001"})   # missing fields
        manifest.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataFormatError, match="line 2"):
            read_dataset(tmp_path / "d")


class TestDice:
    def test_identical_nonempty(self):
        m = np.zeros((4, 4), dtype=np.uint8)
        m[1:3, 1:3] = 1
        assert dice(m, m) == 1.0

    def test_disjoint(self):
        a = np.zeros((4, 4), dtype=np.uint8)
        b = np.zeros((4, 4), dtype=np.uint8)
        a[0, 0] = 1
        b[3, 3] = 1
        assert dice(a, b) == 0.0

    def test_half_overlap(self):
        a = np.zeros((4, 4), dtype=np.uint8)
        b = np.zeros((4, 4), dtype=np.uint8)
        a[0, :4] = 1          # |A| = 4
        b[0, 2:] = 1
        b[1, :2] = 1          # |B| = 4, overlap 2
        assert dice(a, b) == 0.5

    def test_both_empty_is_one(self):
        z = np.zeros((3, 3), dtype=np.uint8)
        assert dice(z, z) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            dice(np.zeros((2, 2)), np.zeros((3, 3)))

    def test_nonbinary_rejected(self):
        with pytest.raises(ValueError, match="binary"):
            dice(np.full((2, 2), 2), np.zeros((2, 2)))

    def test_matches_counter_oracle(self, rng):
        for _ in range(100):
            a = (rng.random((16, 16)) > 0.6).astype(np.uint8)
            b = (rng.random((16, 16)) > 0.6).astype(np.uint8)
            assert dice(a, b) == dice_counters(a, b)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_symmetric(self, seed):
        r = np.random.default_rng(seed)
        a = (r.random((8, 8)) > 0.5).astype(np.uint8)
        b = (r.random((8, 8)) > 0.5).astype(np.uint8)
        assert dice(a, b) == dice(b, a)


class TestSplits:
    def test_fraction_sizes(self):
        tr, va, te = split_indices(100, (0.7, 0.15, 0.15), fold_seed=1)
        assert (len(tr), len(va), len(te)) == (70, 15, 15)

    def test_same_seed_same_split(self):
        assert split_indices(50, (0.7, 0.15, 0.15), 9) == \
               split_indices(50, (0.7, 0.15, 0.15), 9)

    def test_partition_properties(self):
        spec = SplitSpec(fold_seeds=[1, 2, 3, 4, 5])
        for tr, va, te in mc_split(83, spec):
            all_idx = sorted(tr + va + te)
            assert all_idx == list(range(83))
            assert not (set(tr) & set(va)) and not (set(tr) & set(te))
            assert not (set(va) & set(te))

    def test_folds_differ(self):
        spec = SplitSpec(fold_seeds=[1, 2])
        (a, _, _), (b, _, _) = mc_split(40, spec)
        assert a != b

    def test_invalid_fractions(self):
        with pytest.raises(ValueError, match="fractions"):
            split_indices(20, (0.5, 0.2, 0.2), 0)

    def test_too_few_samples(self):
        with pytest.raises(ValueError, match="at least 10"):
            mc_split(9, SplitSpec())
