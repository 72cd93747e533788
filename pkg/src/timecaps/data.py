"""Dataset loading, normalization, splitting, and the synthetic waveform task.

CSV format: UTF-8, one example per line, ``label,s0,s1,...,s(L-1)``, no
header, '.' decimal separator, LF line endings.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError


@dataclass(frozen=True)
class LabeledSignal:
    samples: np.ndarray  # (L,) float64
    label: int


@dataclass
class Dataset:
    signals: list[LabeledSignal]
    L: int
    num_classes: int
    class_names: list[str] | None = None

    def __post_init__(self):
        for i, sig in enumerate(self.signals):
            if sig.samples.shape != (self.L,):
                raise DataFormatError(f"signal {i} has length {sig.samples.shape}, expected ({self.L},)")
            if not 0 <= sig.label < self.num_classes:
                raise DataFormatError(f"signal {i} label {sig.label} out of range [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.signals)

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.signals], dtype=int)

    def class_counts(self) -> np.ndarray:
        counts = np.zeros(self.num_classes, dtype=int)
        for s in self.signals:
            counts[s.label] += 1
        return counts


def load_csv(path, expected_L: int | None = None, num_classes: int | None = None) -> Dataset:
    """Parse a label-plus-samples CSV; the signal length comes from row 1."""
    signals: list[LabeledSignal] = []
    length = expected_L
    with open(path, "r", encoding="utf-8") as fh:
        for row_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            fields = line.split(",")
            if len(fields) < 2:
                raise DataFormatError(f"{path}: row {row_no} has no samples")
            try:
                label = int(fields[0])
            except ValueError:
                raise DataFormatError(f"{path}: row {row_no} has non-integer label {fields[0]!r}") from None
            if label < 0:
                raise DataFormatError(f"{path}: row {row_no} has negative label {label}")
            try:
                samples = np.array([float(v) for v in fields[1:]], dtype=np.float64)
            except ValueError:
                raise DataFormatError(f"{path}: row {row_no} has a non-numeric sample") from None
            if length is None:
                length = samples.size
            elif samples.size != length:
                raise DataFormatError(
                    f"{path}: row {row_no} has {samples.size} samples, expected {length}")
            signals.append(LabeledSignal(samples=samples, label=label))
    if not signals:
        raise DataFormatError(f"{path}: no data rows")
    classes = num_classes if num_classes is not None else max(s.label for s in signals) + 1
    return Dataset(signals=signals, L=int(length), num_classes=classes)


def save_csv(dataset: Dataset, path):
    """Inverse of load_csv; 17 significant digits keeps float64 round trips exact."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for sig in dataset.signals:
            fh.write(str(sig.label))
            for v in sig.samples:
                fh.write(f",{v:.17g}")
            fh.write("\n")


def normalize(dataset: Dataset, mode: str = "zscore") -> tuple[Dataset, list[tuple[float, float]]]:
    """Per-signal normalization; returns the new dataset and per-signal stats.

    zscore stats are (mean, std); minmax stats are (min, max).  Degenerate
    signals (zero spread) are mapped to all zeros.
    """
    if mode not in ("zscore", "minmax"):
        raise ValueError(f"mode must be 'zscore' or 'minmax', got {mode!r}")
    out: list[LabeledSignal] = []
    stats: list[tuple[float, float]] = []
    for sig in dataset.signals:
        x = sig.samples
        if mode == "zscore":
            mu = float(x.mean())
            sd = float(x.std())
            stats.append((mu, sd))
            y = np.zeros_like(x) if sd < 1e-12 else (x - mu) / sd
        else:
            lo, hi = float(x.min()), float(x.max())
            stats.append((lo, hi))
            y = np.zeros_like(x) if hi - lo < 1e-12 else 2.0 * (x - lo) / (hi - lo) - 1.0
        out.append(LabeledSignal(samples=y, label=sig.label))
    return Dataset(out, dataset.L, dataset.num_classes, dataset.class_names), stats


def split(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded stratified split; classes with fewer than 2 examples go to train."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[int]] = {}
    for i, sig in enumerate(dataset.signals):
        by_class.setdefault(sig.label, []).append(i)
    test_idx: set[int] = set()
    for label in sorted(by_class):
        idx = by_class[label]
        if len(idx) < 2:
            warnings.warn(f"class {label} has {len(idx)} example(s); keeping all in train")
            continue
        perm = rng.permutation(len(idx))
        n_test = int(round(test_fraction * len(idx)))
        n_test = min(max(n_test, 1), len(idx) - 1)
        test_idx.update(idx[j] for j in perm[:n_test])
    train_sigs = [s for i, s in enumerate(dataset.signals) if i not in test_idx]
    test_sigs = [s for i, s in enumerate(dataset.signals) if i in test_idx]
    mk = lambda sigs: Dataset(sigs, dataset.L, dataset.num_classes, dataset.class_names)
    return mk(train_sigs), mk(test_sigs)


def filter_min_class_count(dataset: Dataset, min_count: int) -> Dataset:
    """Drop classes with fewer than ``min_count`` examples and relabel densely."""
    if min_count <= 1:
        return dataset
    counts = dataset.class_counts()
    kept = [c for c in range(dataset.num_classes) if counts[c] >= min_count]
    if not kept:
        raise DataFormatError(f"no class has at least {min_count} examples")
    remap = {old: new for new, old in enumerate(kept)}
    sigs = [LabeledSignal(s.samples, remap[s.label]) for s in dataset.signals if s.label in remap]
    names = [dataset.class_names[c] for c in kept] if dataset.class_names else None
    return Dataset(sigs, dataset.L, len(kept), names)


SYNTH_CLASS_NAMES = ["sine", "square", "sawtooth"]


def synth_waveforms(num_per_class: int = 200, L: int = 64, noise_sigma: float = 0.1,
                    seed: int = 0) -> Dataset:
    """Three waveform families with random phase and 2-6 cycles per window."""
    if L < 8:
        raise ValueError(f"L must be >= 8, got {L}")
    if num_per_class < 1:
        raise ValueError(f"num_per_class must be >= 1, got {num_per_class}")
    rng = np.random.default_rng(seed)
    t = np.arange(L) / L
    signals: list[LabeledSignal] = []
    for label in range(3):
        for _ in range(num_per_class):
            freq = rng.uniform(2.0, 6.0)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            arg = 2.0 * np.pi * freq * t + phase
            if label == 0:
                base = np.sin(arg)
            elif label == 1:
                base = np.where(np.sin(arg) >= 0.0, 1.0, -1.0)
            else:
                base = 2.0 * np.mod(freq * t + phase / (2.0 * np.pi), 1.0) - 1.0
            if noise_sigma > 0:
                base = base + rng.normal(0.0, noise_sigma, size=L)
            signals.append(LabeledSignal(samples=base, label=label))
    return Dataset(signals, L, 3, list(SYNTH_CLASS_NAMES))
