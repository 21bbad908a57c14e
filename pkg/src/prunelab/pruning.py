"""Sensitivity criteria, budget allocation, and iterative prune-retrain.

Unstructured criteria (WT, SiPP) rank individual weights over the whole
network. Structured criteria (FT, PFP) rank output units of every layer
except the classifier; FT removes the same fraction of units per layer,
PFP thresholds layer-max-normalized scores globally, which lets the data
decide how the budget splits across layers.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import network as N
from . import tensor as T
from .seeding import stream
from .train import TrainConfig, train

log = logging.getLogger(__name__)

CRITERIA = ("WT", "SiPP", "FT", "PFP")


class BudgetClampWarning(UserWarning):
    """A layer would have been emptied; the per-layer floor kept it alive."""


@dataclass(frozen=True)
class PruneMethod:
    criterion: str
    sample_size: int = 64

    def __post_init__(self):
        if self.criterion not in CRITERIA:
            raise ValueError(f"unknown criterion {self.criterion!r}; expected one of {CRITERIA}")
        if self.sample_size < 1:
            raise ValueError("sample size must be positive")

    @property
    def scope(self):
        return "global" if self.criterion in ("WT", "SiPP") else "local"

    @property
    def granularity(self):
        return N.PER_WEIGHT if self.scope == "global" else N.PER_UNIT

    @property
    def data_informed(self):
        return self.criterion in ("SiPP", "PFP")


@dataclass
class PruneSchedule:
    n_cycles: int = 6
    r_prune: float = 0.3
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.n_cycles < 0:
            raise ValueError("n_cycles must be >= 0")
        if not 0.0 < self.r_prune < 1.0:
            raise ValueError(f"r_prune must lie in (0, 1), got {self.r_prune}")

    @property
    def n_train(self):
        return self.train.epochs

    def expected_ratio(self, cycle):
        return 1.0 - (1.0 - self.r_prune) ** cycle


@dataclass
class SensitivityMap:
    """Per-layer scores (weight-shaped, or [n_units]); ``None`` for layers the
    criterion never prunes. ``active`` marks entries still eligible."""

    scores: list
    active: list
    granularity: str


# ---------------------------------------------------------------- sensitivities


def _layer_inputs(net, samples):
    rec = []
    with T.no_grad():
        net.forward(samples, record=rec)
    return rec


def _patch_abs(a, spec):
    cols, _, _ = T._im2col(a, spec.kernel, spec.padding)
    return np.abs(cols)


def sensitivity_wt(net):
    scores = [np.abs(p.weights.data * p.mask) for p in net.params]
    return SensitivityMap(scores, [p.mask > 0 for p in net.params], N.PER_WEIGHT)


def sensitivity_sipp(net, samples):
    """Mean over samples of |W_ij * a_j(x)|, a_j the input activation feeding the weight.
    Conv weights average over every spatial position they touch."""
    samples = np.asarray(samples)
    if len(samples) == 0:
        raise ValueError("SiPP needs at least one sample")
    inputs = _layer_inputs(net, samples)
    scores = []
    for li, (p, a) in enumerate(zip(net.params, inputs)):
        spec = net.specs[net.param_layers[li]]
        w = np.abs(p.weights.data * p.mask)
        if spec.kind == "dense":
            act = np.abs(a).mean(axis=0)
            scores.append(w * act[:, None])
        else:
            act = _patch_abs(a, spec).mean(axis=0).reshape(w.shape[1:])
            scores.append(w * act[None])
    return SensitivityMap(scores, [p.mask > 0 for p in net.params], N.PER_WEIGHT)


def _structured_layers(net):
    return range(len(net.params) - 1)


def sensitivity_ft(net):
    scores, active = [], []
    for li, p in enumerate(net.params):
        if li in _structured_layers(net):
            scores.append(np.abs(p.unit_rows(p.weights.data * p.mask)).sum(axis=1))
            active.append(p.unit_mask() > 0)
        else:
            scores.append(None)
            active.append(None)
    return SensitivityMap(scores, active, N.PER_UNIT)


def _pfp_unit_scores(net, li, inputs):
    """max over samples and downstream weights of |W_next[., j] * a_j(x)|."""
    if li + 1 < len(net.params):
        nxt = net.params[li + 1]
        spec = net.specs[net.param_layers[li + 1]]
        a = inputs[li + 1]
        w = np.abs(nxt.weights.data * nxt.mask)
        if spec.kind == "dense":
            # entry (i, o): |W[i, o]| * max_x |a_i(x)|
            per_input = w.max(axis=1) * np.abs(a).max(axis=0)
            groups = net.fanin_groups(li)
            return per_input[groups].max(axis=1)
        amax = _patch_abs(a, spec).max(axis=0).reshape(w.shape[1:])
        return (w.max(axis=0) * amax).reshape(w.shape[1], -1).max(axis=1)
    # classifier layer: the unit's own weighted inputs
    p = net.params[li]
    w = np.abs(p.weights.data * p.mask)
    return (w * np.abs(inputs[li]).max(axis=0)[:, None]).max(axis=0)


def sensitivity_pfp(net, samples):
    samples = np.asarray(samples)
    if len(samples) == 0:
        raise ValueError("PFP needs at least one sample")
    inputs = _layer_inputs(net, samples)
    scores, active = [], []
    for li, p in enumerate(net.params):
        if li in _structured_layers(net):
            scores.append(_pfp_unit_scores(net, li, inputs))
            active.append(p.unit_mask() > 0)
        else:
            scores.append(None)
            active.append(None)
    return SensitivityMap(scores, active, N.PER_UNIT)


def sensitivity(net, method, samples=None):
    if method.criterion == "WT":
        return sensitivity_wt(net)
    if method.criterion == "FT":
        return sensitivity_ft(net)
    if samples is None:
        raise ValueError(f"{method.criterion} is data-informed and needs a sample set")
    if method.criterion == "SiPP":
        return sensitivity_sipp(net, samples)
    return sensitivity_pfp(net, samples)


# ---------------------------------------------------------------- budgets


@dataclass
class Budget:
    pruned: list  # per layer: flat indices to remove (None for untouched layers)
    keep: list  # per layer: active count after pruning
    requested: int
    removed: int
    clamped: list = field(default_factory=list)


def _rank_and_take(keys, layers, flat, active_counts, k):
    """Take the k lowest (key, layer, flat) entries, keeping >=1 per layer."""
    order = np.lexsort((flat, layers, keys))
    left = dict(active_counts)
    taken, clamped = [], set()
    for o in order:
        if len(taken) == k:
            break
        layer = int(layers[o])
        if left[layer] <= 1:
            clamped.add(layer)
            continue
        left[layer] -= 1
        taken.append(o)
    return np.array(taken, dtype=np.int64), left, sorted(clamped)


def _global_threshold(values_per_layer, active_per_layer, r):
    keys, layers, flat, counts = [], [], [], {}
    for li, (v, act) in enumerate(zip(values_per_layer, active_per_layer)):
        if v is None:
            continue
        idx = np.flatnonzero(act.ravel())
        keys.append(v.ravel()[idx])
        layers.append(np.full(idx.size, li))
        flat.append(idx)
        counts[li] = idx.size
    keys, layers, flat = map(np.concatenate, (keys, layers, flat))
    k = int(np.floor(r * keys.size))
    taken, left, clamped = _rank_and_take(keys, layers, flat, counts, k)
    pruned = [None] * len(values_per_layer)
    for li in counts:
        pruned[li] = np.sort(flat[taken][layers[taken] == li])
    keep = [left.get(li) for li in range(len(values_per_layer))]
    return Budget(pruned, keep, k, int(taken.size), clamped)


def allocate_budgets(smap, r, method):
    """Decide which entries go. ``method`` may be a PruneMethod or a criterion name."""
    if not 0.0 < r < 1.0:
        raise ValueError(f"prune ratio must lie in (0, 1), got {r}")
    criterion = method.criterion if isinstance(method, PruneMethod) else method
    if criterion in ("WT", "SiPP"):
        budget = _global_threshold(smap.scores, smap.active, r)
    elif criterion == "PFP":
        normed = []
        for s, act in zip(smap.scores, smap.active):
            if s is None:
                normed.append(None)
                continue
            top = s[act].max() if act.any() else 0.0
            normed.append(s / top if top > 0 else np.zeros_like(s))
        budget = _global_threshold(normed, smap.active, r)
    elif criterion == "FT":
        pruned, keep, clamped = [], [], []
        requested = removed = 0
        for li, (s, act) in enumerate(zip(smap.scores, smap.active)):
            if s is None:
                pruned.append(None)
                keep.append(None)
                continue
            idx = np.flatnonzero(act)
            k = int(np.floor(r * idx.size))
            requested += k
            if k > idx.size - 1:
                clamped.append(li)
                k = max(idx.size - 1, 0)
            order = np.lexsort((idx, s[idx]))
            pruned.append(np.sort(idx[order[:k]]))
            keep.append(idx.size - k)
            removed += k
        budget = Budget(pruned, keep, requested, removed, clamped)
    else:
        raise ValueError(f"unknown criterion {criterion!r}")
    if budget.clamped:
        warnings.warn(
            f"per-layer floor kept layers {budget.clamped} alive "
            f"(removed {budget.removed} of {budget.requested} requested)",
            BudgetClampWarning,
            stacklevel=2,
        )
    return budget


# ---------------------------------------------------------------- prune


@dataclass
class PruneResult:
    requested: int
    removed: int
    clamped: list
    prune_ratio: float


def apply_budget(net, budget, granularity):
    for li, idx in enumerate(budget.pruned):
        if idx is None or idx.size == 0:
            if idx is not None and granularity == N.PER_UNIT:
                net.params[li].granularity = N.PER_UNIT
            continue
        p = net.params[li]
        if granularity == N.PER_WEIGHT:
            m = p.mask.ravel().copy()
            m[idx] = 0.0
            p.mask = m.reshape(p.mask.shape)
            p.apply_mask()
        else:
            p.granularity = N.PER_UNIT
            keep = p.unit_mask()
            keep[idx] = 0.0
            p.set_unit_mask(keep)


def prune(net, method, r_prune, samples=None):
    """Remove floor(r_prune * remaining) weights (or units) in place."""
    smap = sensitivity(net, method, samples)
    budget = allocate_budgets(smap, r_prune, method)
    apply_budget(net, budget, method.granularity)
    return PruneResult(budget.requested, budget.removed, budget.clamped, N.prune_ratio(net))


# ---------------------------------------------------------------- pipeline


@dataclass
class EvalRecord:
    cycle: int
    prune_ratio: float
    flop_reduction: float
    val_accuracy: float
    test_accuracy: float
    requested: int = 0
    removed: int = 0
    clamped: list = field(default_factory=list)


@dataclass
class PruneRetrainResult:
    net: object
    records: list
    checkpoints: list  # to_bytes() snapshot after each cycle, cycle 0 = parent

    @property
    def masks(self):
        return [p.mask for p in self.net.params]


def train_parent(seed, schedule, dataset, build, augment=(), purpose="init"):
    """Lines 1-2: seeded random init, then full training."""
    net = build(seed=_init_seed(seed, purpose))
    x, y = dataset.split("train")
    train(net, x, y, schedule.train, stream(seed, "data-order", 0 if purpose == "init" else 1), augment, cycle=0)
    return net


def _init_seed(seed, purpose):
    return int(stream(seed, purpose).integers(0, 2**62))


def _record(net, dataset, cycle, res=None):
    xv, yv = dataset.split("val")
    xt, yt = dataset.split("test")
    return EvalRecord(
        cycle,
        N.prune_ratio(net),
        N.flop_reduction(net),
        N.accuracy(net, xv, yv),
        N.accuracy(net, xt, yt),
        res.requested if res else 0,
        res.removed if res else 0,
        list(res.clamped) if res else [],
    )


def prune_retrain(seed, schedule, method, dataset, build=N.desk_cnn, augment=(), parent=None):
    """Train (or take) a parent, then n_cycles of prune + retrain with identical
    hyperparameters. Returns the final net, one EvalRecord per cycle, and checkpoints."""
    if parent is None:
        parent = train_parent(seed, schedule, dataset, build, augment)
    net = parent.clone()
    records = [_record(net, dataset, 0)]
    checkpoints = [N.to_bytes(net)]
    x, y = dataset.split("train")
    xv, _ = dataset.split("val")
    for cycle in range(1, schedule.n_cycles + 1):
        samples = None
        if method.data_informed:
            pick = stream(seed, "sample-set", cycle).choice(len(xv), size=min(method.sample_size, len(xv)), replace=False)
            samples = xv[np.sort(pick)]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", BudgetClampWarning)
            res = prune(net, method, schedule.r_prune, samples)
        if res.clamped:
            log.warning("cycle %d: per-layer floor clamped layers %s", cycle, res.clamped)
        train(net, x, y, schedule.train, stream(seed, "data-order", 100 + cycle), augment, cycle=cycle)
        records.append(_record(net, dataset, cycle, res))
        checkpoints.append(N.to_bytes(net))
    return PruneRetrainResult(net, records, checkpoints)
