"""Synthetic datasets, held-out test signals and windowed real series."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import DataIngestionError, InvalidInputError
from .signal import Signal, TimeGrid, add_noise_snr, read_components_csv

TRAIN_SNR_DB = 25.0
X2_SNR_DB = 15.0


@dataclass
class LabeledExample:
    feature: Signal
    labels: np.ndarray  # (M, N)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.atleast_2d(np.asarray(self.labels, dtype=float))
        if self.labels.shape[1] != self.feature.grid.n:
            raise InvalidInputError(
                f"labels have length {self.labels.shape[1]}, feature has {self.feature.grid.n}")

    @property
    def n_components(self) -> int:
        return self.labels.shape[0]


@dataclass
class Dataset:
    examples: list
    train_idx: np.ndarray = field(default_factory=lambda: np.array([], dtype=int))
    val_idx: np.ndarray = field(default_factory=lambda: np.array([], dtype=int))
    seed: int | None = None

    def __len__(self):
        return len(self.examples)

    @property
    def n_components(self) -> int:
        return self.examples[0].n_components

    @property
    def has_split(self) -> bool:
        return len(self.train_idx) > 0

    @property
    def train(self) -> list:
        return [self.examples[i] for i in self.train_idx]

    @property
    def val(self) -> list:
        return [self.examples[i] for i in self.val_idx]

    def subset(self, indices) -> "Dataset":
        return Dataset([self.examples[i] for i in indices], seed=self.seed)

    def features(self) -> np.ndarray:
        return np.stack([e.feature.values for e in self.examples])

    def labels(self) -> np.ndarray:
        return np.stack([e.labels for e in self.examples])


def _chirp_phase(t):
    return t ** 2 + np.cos(t)


def _synthetic_specs(families=("A", "B")):
    # Enumeration order: family, k, (l), c2 present/zero, c1 plain/chirped.
    for fam in families:
        if fam not in ("A", "B"):
            raise InvalidInputError(f"unknown family {fam!r}")
        for k in range(5, 15):
            ls = [None] if fam == "A" else range(2, 20)
            for l in ls:
                for c2_zero in (False, True):
                    for chirp in (False, True):
                        yield {"family": fam, "k": k, "l": l, "c2_zero": c2_zero, "chirp": chirp}


def _synthetic_components(spec, t):
    k = spec["k"]
    a = k + 1.5 if spec["family"] == "A" else k * spec["l"]
    phase = a * np.pi * t + (_chirp_phase(t) if spec["chirp"] else 0.0)
    c1 = np.cos(phase)
    c2 = np.zeros_like(t) if spec["c2_zero"] else np.cos(k * np.pi * t)
    return c1, c2


def _example_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def gen_dataset1(grid: TimeGrid | None = None, families=("A", "B"), split_seed: int | None = 0) -> Dataset:
    """Two-component signals ``c1 + c2`` with labels ``[c1, c2]``.

    Family A pairs ``cos(k pi t)`` with the close frequency
    ``(k + 1.5) pi``; family B uses ``k * l * pi`` for ``l = 2..19``. Each
    ``c2`` may be zero and each ``c1`` may carry the ``t**2 + cos(t)``
    phase. 760 examples for both families.
    """
    grid = grid or TimeGrid()
    t = grid.t
    examples = []
    for spec in _synthetic_specs(families):
        c1, c2 = _synthetic_components(spec, t)
        examples.append(LabeledExample(Signal(grid, c1 + c2), np.stack([c1, c2]), dict(spec)))
    ds = Dataset(examples)
    return split_train_val(ds, split_seed) if split_seed is not None else ds


def gen_dataset2(grid: TimeGrid | None = None, seed: int = 0, families=("A", "B"),
                 split_seed: int | None = 0, snr_db: float = TRAIN_SNR_DB) -> Dataset:
    """Dataset 1 with 25 dB white noise added to every feature; labels stay clean."""
    clean = gen_dataset1(grid, families, split_seed=None)
    examples = []
    for i, ex in enumerate(clean.examples):
        s = _example_seed(seed, i)
        noisy = add_noise_snr(ex.feature, snr_db, s)
        examples.append(LabeledExample(noisy, ex.labels, {**ex.meta, "snr_db": snr_db, "noise_seed": s}))
    ds = Dataset(examples, seed=seed)
    return split_train_val(ds, split_seed) if split_seed is not None else ds


def test_signal_x1(grid: TimeGrid | None = None) -> LabeledExample:
    """``cos(6.4 pi t) + cos(5 pi t)``."""
    grid = grid or TimeGrid()
    t = grid.t
    c1 = np.cos(6.4 * np.pi * t)
    c2 = np.cos(5 * np.pi * t)
    return LabeledExample(Signal(grid, c1 + c2), np.stack([c1, c2]), {"name": "x1"})


def test_signal_x2(grid: TimeGrid | None = None, seed: int = 0) -> LabeledExample:
    """``cos(8 pi t + 2 t**2 + cos t) + cos(5 pi t)`` plus 15 dB noise."""
    grid = grid or TimeGrid()
    t = grid.t
    c1 = np.cos(8 * np.pi * t + 2 * t ** 2 + np.cos(t))
    c2 = np.cos(5 * np.pi * t)
    feature = add_noise_snr(Signal(grid, c1 + c2), X2_SNR_DB, seed)
    return LabeledExample(feature, np.stack([c1, c2]),
                          {"name": "x2", "snr_db": X2_SNR_DB, "noise_seed": seed})


test_signal_x1.__test__ = False  # keep pytest from collecting these
test_signal_x2.__test__ = False


def window_series(series: Signal, length: int = 720, stride: int = 180) -> list[Signal]:
    """Cut ``series`` into windows starting every ``stride`` samples.

    A trailing window shorter than ``length`` is dropped.
    """
    n = series.grid.n
    if length < 2 or stride < 1:
        raise InvalidInputError("length must be >= 2 and stride >= 1")
    if n < length:
        raise InvalidInputError(f"series has {n} samples, shorter than window length {length}")
    t = series.t
    out = []
    for start in range(0, n - length + 1, stride):
        grid = TimeGrid(float(t[start]), float(t[start + length - 1]), length)
        out.append(Signal(grid, series.values[start:start + length].copy()))
    return out


def attach_labels(windows, label_files, split_seed: int | None = 0) -> Dataset:
    """Pair every window with its externally produced component CSV."""
    windows = list(windows)
    label_files = list(label_files)
    if len(label_files) != len(windows):
        raise DataIngestionError(
            f"{len(windows)} windows but {len(label_files)} label files")
    examples = []
    n_comp = None
    for i, (w, path) in enumerate(zip(windows, label_files)):
        if not Path(path).is_file():
            raise DataIngestionError(f"window {i}: label file {path} not found")
        try:
            _, comps, _ = read_components_csv(path, with_residue=False)
        except DataIngestionError as exc:
            raise DataIngestionError(f"window {i}: {exc}") from None
        if comps.shape[1] != w.grid.n:
            raise DataIngestionError(
                f"window {i}: label length {comps.shape[1]} differs from window length {w.grid.n}")
        if n_comp is None:
            n_comp = comps.shape[0]
        elif comps.shape[0] != n_comp:
            raise DataIngestionError(
                f"window {i}: {comps.shape[0]} components, expected {n_comp}")
        examples.append(LabeledExample(w, comps, {"window": i, "label_file": str(path)}))
    ds = Dataset(examples)
    return split_train_val(ds, split_seed) if split_seed is not None else ds


def split_train_val(dataset: Dataset, seed: int = 0, train_fraction: float = 0.8) -> Dataset:
    """Shuffle with ``seed`` and put the first ``floor(0.8 n)`` examples in training."""
    n = len(dataset.examples)
    if n < 5:
        raise InvalidInputError(f"need at least 5 examples to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(np.floor(train_fraction * n))
    return Dataset(dataset.examples, np.sort(perm[:n_train]), np.sort(perm[n_train:]),
                   dataset.seed)
