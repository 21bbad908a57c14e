"""Functional-distance metrics between two networks.

Informative-feature masks come from greedy backward selection: mask, one at
a time, the feature whose removal costs the least confidence in the
originally predicted class. Masked features are filled with 0, which is the
train-split mean in normalized space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import per_sample_seeds
from .seeding import stream

DEFAULT_EPS_GRID = (0.0, 0.05, 0.1, 0.2, 0.4)
MAX_BACKSELECT_FEATURES = 256


@dataclass
class FeatureMask:
    m: np.ndarray
    sparsity: float
    source_model: str = ""
    source_input: int = -1
    predicted_class: int = -1

    def __post_init__(self):
        n = self.m.size
        if not np.isin(self.m, (0.0, 1.0)).all():
            raise ValueError("feature mask must be binary")
        if self.m.sum() > math.ceil((1 - self.sparsity) * n - 1e-9):
            raise ValueError("feature mask keeps more features than its sparsity allows")


@dataclass
class SimilarityReport:
    eps: np.ndarray
    match: np.ndarray
    l2: np.ndarray
    match_std: np.ndarray
    l2_std: np.ndarray
    n_samples: int
    repetitions: int

    def rows(self):
        for i, e in enumerate(self.eps):
            yield float(e), float(self.match[i]), float(self.match_std[i]), float(self.l2[i]), float(self.l2_std[i])


def confidence(net, x, cls):
    """Softmax probability of ``cls`` for each sample in ``x``."""
    return net.predict_proba(x)[:, cls]


def back_select(net, x, predicted_class=None, return_confidences=False):
    """Feature order from least to most informative (first entry is masked first)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    if n > MAX_BACKSELECT_FEATURES:
        raise ValueError(f"back_select supports at most {MAX_BACKSELECT_FEATURES} features, got {n}")
    flat = x.ravel()
    if predicted_class is None:
        predicted_class = int(np.argmax(net.logits(x[None])[0]))
    current = flat.copy()
    remaining = list(range(n))
    order, confs = [], []
    while remaining:
        cand = np.repeat(current[None], len(remaining), axis=0)
        cand[np.arange(len(remaining)), remaining] = 0.0
        conf = confidence(net, cand.reshape((len(remaining),) + x.shape), predicted_class)
        best = int(np.argmax(conf))
        k = remaining.pop(best)
        current[k] = 0.0
        order.append(k)
        confs.append(float(conf[best]))
    order = np.array(order, dtype=np.int64)
    return (order, np.array(confs)) if return_confidences else order


def make_feature_mask(ordering, sparsity, source_model="", source_input=-1, predicted_class=-1):
    """Keep the ceil((1 - B) n) most informative features (the last ones masked)."""
    if not 0.0 <= sparsity <= 1.0:
        raise ValueError(f"sparsity must be in [0, 1], got {sparsity}")
    ordering = np.asarray(ordering)
    n = ordering.size
    keep = math.ceil((1.0 - sparsity) * n - 1e-9)
    m = np.zeros(n)
    if keep:
        m[ordering[n - keep :]] = 1.0
    return FeatureMask(m, sparsity, source_model, source_input, predicted_class)


def cross_confidence(net, mask, x, true_class):
    """Confidence of ``net`` in ``true_class`` on the masked input m * x."""
    x = np.asarray(x, dtype=np.float64)
    m = mask.m if isinstance(mask, FeatureMask) else np.asarray(mask)
    if m.size != x.size:
        raise ValueError(f"mask has {m.size} features but input has {x.size}")
    return float(confidence(net, (m * x.ravel()).reshape((1,) + x.shape), true_class)[0])


def confidence_heatmap(sources, evaluators, x, y, sparsity=0.9):
    """Mean confidence toward the true class; cell [i, j] evaluates net j on masks from net i.

    ``sources``/``evaluators`` map names to networks. Returns (matrix, per-input matrix).
    """
    s_names, e_names = list(sources), list(evaluators)
    per_input = np.zeros((len(s_names), len(e_names), len(x)))
    for i, sname in enumerate(s_names):
        src = sources[sname]
        for k in range(len(x)):
            pred = int(np.argmax(src.logits(x[k : k + 1])[0]))
            fm = make_feature_mask(back_select(src, x[k], pred), sparsity, sname, k, pred)
            masked = (fm.m * x[k].ravel()).reshape((1,) + x[k].shape)
            for j, ename in enumerate(e_names):
                per_input[i, j, k] = evaluators[ename].predict_proba(masked)[0, y[k]]
    return per_input.mean(axis=2), per_input


def noise_similarity(net_a, net_b, x, eps_grid=DEFAULT_EPS_GRID, repetitions=10, seed=0):
    """Monte-Carlo agreement of two nets under uniform input noise.

    Each repetition reuses one base draw scaled by every eps, so both nets and
    all noise levels see common random numbers.
    """
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("noise_similarity needs at least one sample")
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    eps_grid = np.asarray(eps_grid, dtype=np.float64)
    match = np.zeros((len(eps_grid), repetitions))
    l2 = np.zeros_like(match)
    for r in range(repetitions):
        rs = int(stream(seed, "noise", r).integers(0, 2**62))
        rngs = [np.random.default_rng([int(s), 0]) for s in per_sample_seeds(rs, len(x))]
        base = np.stack([g.uniform(-1.0, 1.0, size=x.shape[1:]) for g in rngs])
        for i, e in enumerate(eps_grid):
            if e == 0 and r > 0:
                match[i, r], l2[i, r] = match[i, 0], l2[i, 0]
                continue
            xn = x + e * base
            pa, pb = net_a.predict_proba(xn), net_b.predict_proba(xn)
            match[i, r] = np.mean(np.argmax(pa, axis=1) == np.argmax(pb, axis=1))
            l2[i, r] = np.mean(np.linalg.norm(pa - pb, axis=1))
    eff = np.where(eps_grid == 0, 1, repetitions)
    std = lambda a: np.array([a[i, : eff[i]].std(ddof=1) if eff[i] > 1 else 0.0 for i in range(len(eps_grid))])
    return SimilarityReport(
        eps_grid, match.mean(axis=1), l2.mean(axis=1), std(match), std(l2), len(x), repetitions
    )
