"""Spiral benchmark data, seeded splits and a small delimited-table loader."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import ConfigError


class TableParseError(ValueError):
    def __init__(self, row: int, column: int, cell: str):
        super().__init__(f"row {row}, column {column}: cannot parse {cell!r} as a number")
        self.row = row
        self.column = column


@dataclass
class Dataset:
    """Feature matrix plus labels (int) or responses (float).

    ``splits`` maps a tag such as ``"train"`` to row indices.
    ``target_mean``/``target_std`` record a target standardisation so that
    predictions can be mapped back with :meth:`inverse_target`.
    """

    features: np.ndarray
    targets: np.ndarray
    task: str = "classification"
    splits: dict = field(default_factory=dict)
    feature_names: list | None = None
    target_mean: float = 0.0
    target_std: float = 1.0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        dtype = np.int64 if self.task == "classification" else np.float64
        self.targets = np.asarray(self.targets, dtype=dtype)
        if self.features.ndim != 2 or len(self.features) != len(self.targets):
            raise ValueError("features must be n x d with one target per row")

    def __len__(self):
        return len(self.targets)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, tag: str) -> "Dataset":
        idx = self.splits[tag]
        return replace(self, features=self.features[idx], targets=self.targets[idx], splits={})

    def inverse_target(self, y):
        return np.asarray(y) * self.target_std + self.target_mean


# --------------------------------------------------------------------------
# Spirals


@dataclass(frozen=True)
class SpiralConfig:
    omega: float
    n_samples: int = 1024
    noise_scale: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1:
            raise ConfigError("n_samples must be at least 1")
        if not self.noise_scale > 0:
            raise ConfigError("noise_scale must be positive")
        if self.omega < 0:
            raise ConfigError("omega must be non-negative")


def spiral_means(u, branch, omega: float) -> np.ndarray:
    angle = omega * u * math.pi / 2
    return np.stack([branch * u * np.cos(angle), branch * u * np.sin(angle)], axis=1)


def generate_spiral(config: SpiralConfig) -> Dataset:
    """Two interleaved spiral arms with rotation speed ``omega``.

    ``u = sqrt(t)`` with ``t`` uniform spreads points evenly along the arm;
    ``noise_scale`` is the per-coordinate standard deviation.  Arm ``-1`` is
    labelled 0 and arm ``+1`` is labelled 1.
    """
    rng = np.random.default_rng(config.seed)
    n = config.n_samples
    t = rng.uniform(0.0, 1.0, size=n)
    u = np.sqrt(t)
    branch = rng.choice(np.array([-1.0, 1.0]), size=n)
    x = spiral_means(u, branch, config.omega) + config.noise_scale * rng.standard_normal((n, 2))
    return Dataset(x, (branch > 0).astype(np.int64), "classification")


def spiral_splits(omega: float, n_per_split: int = 1024, seed: int = 0,
                  noise_scale: float = 0.02) -> Dataset:
    """Independently generated train/valid/test sets for one ``omega``."""
    seeds = np.random.SeedSequence(seed).generate_state(3)
    parts = [generate_spiral(SpiralConfig(omega, n_per_split, noise_scale, int(s))) for s in seeds]
    x = np.concatenate([p.features for p in parts])
    y = np.concatenate([p.targets for p in parts])
    splits = {tag: np.arange(i * n_per_split, (i + 1) * n_per_split)
              for i, tag in enumerate(("train", "valid", "test"))}
    return Dataset(x, y, "classification", splits)


# --------------------------------------------------------------------------
# Splits and tables


def split(data: Dataset, sizes, seed: int = 0) -> Dataset:
    """Seeded disjoint train/valid/test partition of ``data``."""
    n_train, n_valid, n_test = sizes
    if min(sizes) < 0 or n_train + n_valid + n_test > len(data):
        raise ValueError(f"sizes {tuple(sizes)} do not fit in {len(data)} rows")
    perm = np.random.default_rng(seed).permutation(len(data))
    bounds = np.cumsum([0, n_train, n_valid, n_test])
    splits = {tag: np.sort(perm[bounds[i]:bounds[i + 1]])
              for i, tag in enumerate(("train", "valid", "test"))}
    return replace(data, splits=splits)


def split_fractions(n: int, fractions=(0.8, 0.1, 0.1)) -> tuple[int, int, int]:
    n_valid = int(round(fractions[1] * n))
    n_test = int(round(fractions[2] * n))
    return n - n_valid - n_test, n_valid, n_test


def standardize(data: Dataset, target: bool | None = None) -> Dataset:
    """Zero-mean/unit-variance features using training rows only.

    Regression targets are standardised too unless ``target=False``; the
    statistics are kept on the returned dataset for inverse transforms.
    """
    train = data.splits.get("train", np.arange(len(data)))
    mu = data.features[train].mean(axis=0)
    sd = data.features[train].std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    out = replace(data, features=(data.features - mu) / sd)
    if target is None:
        target = data.task == "regression"
    if target:
        t_mu = float(data.targets[train].mean())
        t_sd = float(data.targets[train].std()) or 1.0
        out = replace(out, targets=(data.targets - t_mu) / t_sd, target_mean=t_mu, target_std=t_sd)
    return out


def _read_rows(path):
    with open(path, newline="") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"{path} is empty")
    if "," in lines[0]:
        rows = list(csv.reader(lines))
    else:
        rows = [ln.split() for ln in lines]
    return [c.strip() for c in rows[0]], rows[1:]


def load_table(path, target_column, task: str = "regression", standardize_features: bool = False,
               sizes=None, seed: int = 0) -> Dataset:
    """Load a delimited numeric table with a header row.

    The delimiter is a comma if the header contains one, otherwise runs of
    whitespace.  ``target_column`` is a header name or a column index.  When
    ``sizes`` is given the rows are split first, and standardisation (if
    requested) uses the training rows' statistics.
    """
    header, rows = _read_rows(path)
    if isinstance(target_column, str) and target_column in header:
        t = header.index(target_column)
    elif isinstance(target_column, int) and -len(header) <= target_column < len(header):
        t = target_column % len(header)
    else:
        raise ConfigError(f"target column {target_column!r} not found in {header}")
    values = np.empty((len(rows), len(header)))
    for i, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise TableParseError(i, len(row) + 1, "<missing>")
        for j, cell in enumerate(row, start=1):
            try:
                values[i - 2, j - 1] = float(cell)
            except ValueError:
                raise TableParseError(i, j, cell) from None
    keep = [j for j in range(len(header)) if j != t]
    data = Dataset(values[:, keep], values[:, t], task, feature_names=[header[j] for j in keep])
    if sizes is not None:
        data = split(data, sizes, seed)
    if standardize_features:
        data = standardize(data)
    return data


def save_table(data: Dataset, path) -> None:
    """Write ``x1, ..., xd, label`` rows; readable by :func:`load_table`."""
    names = data.feature_names or [f"x{j + 1}" for j in range(data.n_features)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*names, "label"])
        for xi, yi in zip(data.features, data.targets):
            w.writerow([repr(float(v)) for v in xi] + [repr(yi.item())])
