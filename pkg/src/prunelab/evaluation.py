"""Prune-accuracy curves, prune potential, excess error, and the excess-error
regression through the origin with percentile-bootstrap intervals.

All losses are the indicator loss (error = 1 - accuracy). Every comparison
is paired per seed: a pruned net is measured against its own parent on the
same distribution.
"""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import network as N
from .data import corrupted
from .seeding import derived_seed, stream

DEFAULT_DELTA = 0.005
DELTA_GRID = (0.0, 0.005, 0.01, 0.02, 0.05)
FLAT_COLUMNS = ("method", "ratio", "distribution", "metric", "mean", "std")

# slack for float noise when comparing an error gap against delta
_TOL = 1e-12


def sample_std(a, axis=0):
    a = np.asarray(a, dtype=np.float64)
    if a.shape[axis] < 2:
        return np.zeros(np.delete(a.shape, axis))
    return a.std(axis=axis, ddof=1)


# ---------------------------------------------------------------- distributions


def member_accuracy(net, dataset, corruption, seed, repetitions=1, split="test"):
    """Accuracy on one distribution member; random corruptions average over
    ``repetitions`` seeded draws shared by every net evaluated with this seed."""
    x, y = dataset.split(split)
    if corruption is None:
        return N.accuracy(net, x, y)
    reps = repetitions if corruption.kind in ("uniform-noise", "gaussian-noise", "occlusion") else 1
    accs = []
    for r in range(reps):
        s = derived_seed(seed, "corruption", zlib.crc32(corruption.name.encode()), r)
        accs.append(N.accuracy(net, corrupted(x, corruption, s), y))
    return float(np.mean(accs))


def distribution_accuracy(net, dataset, dist, seed, repetitions=1):
    """Mean accuracy over the members of ``dist``."""
    return float(
        np.mean([member_accuracy(net, dataset, c, seed, repetitions) for _, c in dist.members()])
    )


# ---------------------------------------------------------------- curves


@dataclass
class PruneAccuracyCurve:
    method: str
    distribution: str
    ratios: np.ndarray  # [cycles], mean over seeds
    accuracy: np.ndarray  # [seeds, cycles]
    seeds: list = field(default_factory=list)

    def __post_init__(self):
        self.ratios = np.asarray(self.ratios, dtype=np.float64)
        self.accuracy = np.atleast_2d(np.asarray(self.accuracy, dtype=np.float64))
        if self.ratios.size == 0 or self.ratios[0] != 0.0:
            raise ValueError("curve is missing the unpruned (ratio 0) reference")
        if np.any(np.diff(self.ratios) <= 0):
            raise ValueError("prune ratios must be strictly increasing")

    @property
    def error(self):
        return 1.0 - self.accuracy

    @property
    def mean(self):
        return self.accuracy.mean(axis=0)

    @property
    def std(self):
        return sample_std(self.accuracy)

    def rows(self):
        for i, r in enumerate(self.ratios):
            yield (self.method, float(r), self.distribution, "accuracy", float(self.mean[i]), float(self.std[i]))


def prune_accuracy_curve(runs, dataset, dist, method="", repetitions=1):
    """``runs`` maps seed -> list of networks (or checkpoint bytes), cycle 0 first."""
    seeds = list(runs)
    acc, ratios = [], []
    for s in seeds:
        nets = [N.from_bytes(n) if isinstance(n, (bytes, bytearray)) else n for n in runs[s]]
        if not nets or N.prune_ratio(nets[0]) != 0.0:
            raise ValueError(f"seed {s}: missing the unpruned (ratio 0) reference")
        acc.append([distribution_accuracy(n, dataset, dist, s, repetitions) for n in nets])
        ratios.append([N.prune_ratio(n) for n in nets])
    if len(ratios[0]) < 2:
        raise ValueError("a prune-accuracy curve needs at least two prune ratios")
    return PruneAccuracyCurve(method, dist.name, np.mean(ratios, axis=0), acc, seeds)


# ---------------------------------------------------------------- prune potential


@dataclass
class PrunePotentialReport:
    distribution: str
    delta: float
    potential: float  # from the seed-averaged paired error gap; always a tested ratio
    per_seed: np.ndarray
    mean: float
    std: float


def potential_from_errors(ratios, errors, delta):
    """Largest ratio whose error exceeds the ratio-0 error by at most ``delta``.

    ``errors`` is [cycles] or [seeds, cycles]; returns one potential per row.
    """
    ratios = np.asarray(ratios, dtype=np.float64)
    errors = np.atleast_2d(np.asarray(errors, dtype=np.float64))
    gap = errors - errors[:, :1]
    ok = gap <= delta + _TOL
    return np.array([ratios[np.flatnonzero(row)].max() for row in ok])


def prune_potential(curve, delta=DEFAULT_DELTA):
    if delta < 0:
        raise ValueError("delta must be >= 0")
    err = curve.error
    per_seed = potential_from_errors(curve.ratios, err, delta)
    gap = (err - err[:, :1]).mean(axis=0)
    pooled = potential_from_errors(curve.ratios, gap, delta)[0]
    return PrunePotentialReport(
        curve.distribution, float(delta), float(pooled), per_seed, float(per_seed.mean()), float(sample_std(per_seed))
    )


def delta_sweep(curve, deltas=DELTA_GRID):
    for d in deltas:
        if d < 0:
            raise ValueError("delta values must be >= 0")
    return [prune_potential(curve, d) for d in deltas]


@dataclass
class PotentialSummary:
    average: np.ndarray  # per seed
    minimum: np.ndarray


def summarize_potentials(reports):
    """Average and minimum per-seed potential over a corruption set."""
    per_seed = np.stack([r.per_seed for r in reports])
    return PotentialSummary(per_seed.mean(axis=0), per_seed.min(axis=0))


# ---------------------------------------------------------------- excess error


def excess_error(net, dataset, train_dist, test_dist, seed, repetitions=1):
    """Error on the test distribution minus error on the train distribution."""
    e_test = 1.0 - distribution_accuracy(net, dataset, test_dist, seed, repetitions)
    e_train = 1.0 - distribution_accuracy(net, dataset, train_dist, seed, repetitions)
    return e_test - e_train


def excess_differences(train_curve, test_curve):
    """[seeds, cycles] of e_hat - e: each pruned net's excess error minus its parent's."""
    if not np.array_equal(train_curve.ratios, test_curve.ratios):
        raise ValueError("train and test curves must share prune ratios")
    e = test_curve.error - train_curve.error
    return e - e[:, :1]


@dataclass
class ExcessErrorReport:
    ratios: np.ndarray
    differences: np.ndarray  # [seeds, cycles]
    slope: float
    ci: tuple
    resamples: int

    def points(self):
        x = np.broadcast_to(self.ratios, self.differences.shape).ravel()
        return x, self.differences.ravel()


def through_origin_slope(x, y):
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    sxx = float(np.dot(x, x))
    if sxx == 0:
        raise ValueError("all ratios are zero; slope through the origin is undefined")
    return float(np.dot(x, y)) / sxx


def excess_regression(x, y, resamples=1000, seed=0, level=0.95):
    """OLS slope with zero intercept and a percentile-bootstrap CI over points."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if np.unique(x[x != 0]).size < 2:
        raise ValueError("need at least two distinct nonzero ratios")
    if resamples < 100:
        raise ValueError("need at least 100 bootstrap resamples")
    slope = through_origin_slope(x, y)
    rng = stream(seed, "bootstrap")
    n = x.size
    idx = rng.integers(0, n, size=(resamples, n))
    xb, yb = x[idx], y[idx]
    sxx = (xb * xb).sum(axis=1)
    keep = sxx > 0
    boots = (xb * yb).sum(axis=1)[keep] / sxx[keep]
    alpha = (1 - level) / 2
    lo, hi = np.quantile(boots, [alpha, 1 - alpha])
    return slope, (float(lo), float(hi))


def excess_report(train_curve, test_curve, resamples=1000, seed=0):
    diffs = excess_differences(train_curve, test_curve)
    x = np.broadcast_to(train_curve.ratios, diffs.shape).ravel()
    slope, ci = excess_regression(x, diffs.ravel(), resamples, seed)
    return ExcessErrorReport(train_curve.ratios, diffs, slope, ci, resamples)


# ---------------------------------------------------------------- tables


def fmt(v):
    if v is None or v == "":
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))
