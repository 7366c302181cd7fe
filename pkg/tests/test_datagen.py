import numpy as np
import pytest

from modedec.datagen import (Dataset, LabeledExample, attach_labels, gen_dataset1, gen_dataset2,
                             split_train_val, test_signal_x1, test_signal_x2, window_series)
from modedec.exceptions import DataIngestionError, InvalidInputError
from modedec.signal import Signal, TimeGrid, snr_db, total_variation, write_components_csv

SMALL_GRID = TimeGrid(0.0, 6.0, 64)


@pytest.fixture(scope="module")
def d1():
    return gen_dataset1(SMALL_GRID)


class TestDataset1:
    def test_count_and_split(self, d1):
        assert len(d1) == 760
        assert (len(d1.train_idx), len(d1.val_idx)) == (608, 152)

    def test_family_counts(self, d1):
        fams = [e.meta["family"] for e in d1.examples]
        assert fams.count("A") == 40 and fams.count("B") == 720

    def test_first_examples(self, d1):
        plain, chirped = d1.examples[0], d1.examples[1]
        assert plain.meta == {"family": "A", "k": 5, "l": None, "c2_zero": False, "chirp": False}
        assert plain.feature.values[0] == 2.0
        assert chirped.feature.values[0] == pytest.approx(np.cos(1.0) + 1.0, abs=1e-15)
        assert chirped.feature.values[0] == pytest.approx(1.5403, abs=1e-4)

    def test_features_are_label_sums(self, d1):
        for e in d1.examples:
            assert np.array_equal(e.feature.values, e.labels[0] + e.labels[1])

    def test_family_b_frequency_ratio(self, d1):
        for e in d1.examples:
            if e.meta["family"] == "B":
                assert e.meta["l"] >= 2

    def test_zero_c2_variants(self, d1):
        zero = [e for e in d1.examples if e.meta["c2_zero"]]
        assert len(zero) == 380
        assert all(not e.labels[1].any() for e in zero)

    def test_family_formulas(self):
        t = SMALL_GRID.t
        ds = gen_dataset1(SMALL_GRID, families=("B",), split_seed=None)
        e = next(e for e in ds.examples if e.meta == {"family": "B", "k": 7, "l": 3,
                                                      "c2_zero": False, "chirp": True})
        np.testing.assert_allclose(e.labels[0], np.cos(21 * np.pi * t + t ** 2 + np.cos(t)),
                                   atol=1e-12)
        np.testing.assert_allclose(e.labels[1], np.cos(7 * np.pi * t), atol=1e-15)

    def test_unknown_family(self):
        with pytest.raises(InvalidInputError):
            gen_dataset1(SMALL_GRID, families=("C",))

    def test_reproducible(self):
        a = gen_dataset1(SMALL_GRID, families=("A",))
        b = gen_dataset1(SMALL_GRID, families=("A",))
        assert a.features().tobytes() == b.features().tobytes()
        np.testing.assert_array_equal(a.train_idx, b.train_idx)


class TestDataset2:
    def test_noise_and_labels(self, d1):
        d2 = gen_dataset2(SMALL_GRID, seed=3)
        np.testing.assert_array_equal(d2.labels(), d1.labels())
        for e in d2.examples[:20]:
            assert snr_db(e.labels.sum(axis=0), e.feature.values) == pytest.approx(25.0, abs=1e-9)

    def test_seeded(self):
        a = gen_dataset2(SMALL_GRID, seed=1, families=("A",))
        b = gen_dataset2(SMALL_GRID, seed=1, families=("A",))
        c = gen_dataset2(SMALL_GRID, seed=2, families=("A",))
        assert a.features().tobytes() == b.features().tobytes()
        assert a.features().tobytes() != c.features().tobytes()

    def test_subset_noise_is_stable(self):
        # Per-example seeds: the family-A examples get the same noise whether
        # or not family B is generated after them.
        a = gen_dataset2(SMALL_GRID, seed=4, families=("A",))
        ab = gen_dataset2(SMALL_GRID, seed=4)
        np.testing.assert_array_equal(a.features(), ab.features()[:40])


class TestHeldOut:
    def test_x1(self):
        x1 = test_signal_x1()
        assert x1.feature.values[0] == 2.0
        assert total_variation(x1.labels[1]) == pytest.approx(59.9961, rel=1e-3)
        assert total_variation(x1.labels[0]) == pytest.approx(76.6830, rel=1e-3)

    def test_x2(self):
        x2 = test_signal_x2(seed=5)
        assert total_variation(x2.labels[0]) == pytest.approx(141.7220, rel=1e-3)
        assert snr_db(x2.labels.sum(axis=0), x2.feature.values) == pytest.approx(15.0, abs=1e-9)


class TestWindows:
    @staticmethod
    def series(n):
        return Signal(TimeGrid(0.0, n - 1.0, n), np.random.default_rng(n).standard_normal(n))

    @pytest.mark.parametrize("n,count", [(720, 1), (900, 2), (1079, 2), (1080, 3)])
    def test_counts(self, n, count):
        assert len(window_series(self.series(n))) == count

    def test_exact_slices(self):
        s = self.series(1500)
        wins = window_series(s, 720, 180)
        for i, w in enumerate(wins):
            np.testing.assert_array_equal(w.values, s.values[180 * i:180 * i + 720])
            assert w.t[0] == s.t[180 * i]

    def test_too_short(self):
        with pytest.raises(InvalidInputError):
            window_series(self.series(100))


class TestAttachLabels:
    @staticmethod
    def make(tmp_path, n_windows=10, m=5, length=720, bad=None):
        wins = window_series(TestWindows.series(720 + 180 * (n_windows - 1)))
        files = []
        for i, w in enumerate(wins):
            n = length - 1 if bad == i else length
            path = tmp_path / f"w{i:03d}.csv"
            write_components_csv(path, np.arange(n), np.ones((m, n)) * i)
            files.append(path)
        return wins, files

    def test_ok(self, tmp_path):
        ds = attach_labels(*self.make(tmp_path))
        assert len(ds) == 10 and ds.n_components == 5
        assert (len(ds.train_idx), len(ds.val_idx)) == (8, 2)

    def test_missing_file(self, tmp_path):
        wins, files = self.make(tmp_path)
        files[3] = tmp_path / "gone.csv"
        with pytest.raises(DataIngestionError, match="window 3"):
            attach_labels(wins, files)

    def test_length_mismatch(self, tmp_path):
        wins, files = self.make(tmp_path, bad=4)
        with pytest.raises(DataIngestionError, match="window 4.*719"):
            attach_labels(wins, files)

    def test_count_mismatch(self, tmp_path):
        wins, files = self.make(tmp_path)
        with pytest.raises(DataIngestionError):
            attach_labels(wins, files[:-1])


class TestSplit:
    @staticmethod
    def dataset(n):
        g = TimeGrid(0, 1, 4)
        return Dataset([LabeledExample(Signal(g, np.full(4, float(i))), np.zeros((1, 4)))
                        for i in range(n)])

    def test_ten(self):
        ds = split_train_val(self.dataset(10), seed=0)
        assert (len(ds.train_idx), len(ds.val_idx)) == (8, 2)
        assert sorted(np.r_[ds.train_idx, ds.val_idx]) == list(range(10))

    def test_same_seed_same_partition(self):
        a = split_train_val(self.dataset(30), seed=5)
        b = split_train_val(self.dataset(30), seed=5)
        np.testing.assert_array_equal(a.val_idx, b.val_idx)

    def test_too_few(self):
        with pytest.raises(InvalidInputError):
            split_train_val(self.dataset(4), seed=0)
