import itertools
import warnings

import numpy as np
import pytest

from prunelab import data as D
from prunelab import network as N
from prunelab import pruning as P
from prunelab.train import TrainConfig


def _mlp_with(weights, biases=None):
    sizes = [weights[0].shape[0]] + [w.shape[1] for w in weights]
    net = N.mlp(sizes, seed=0)
    for p, w in zip(net.params, weights):
        p.weights.data = np.array(w, dtype=float)
    for p, b in zip(net.params, biases or [None] * len(weights)):
        p.bias.data = np.zeros(p.bias.shape) if b is None else np.array(b, dtype=float)
    return net


# ---------------------------------------------------------------- method metadata


def test_method_scope_and_granularity():
    assert P.PruneMethod("WT").scope == "global" and P.PruneMethod("SiPP").granularity == N.PER_WEIGHT
    assert P.PruneMethod("FT").scope == "local" and P.PruneMethod("PFP").granularity == N.PER_UNIT
    assert P.PruneMethod("SiPP").data_informed and not P.PruneMethod("FT").data_informed
    with pytest.raises(ValueError):
        P.PruneMethod("L2")


# ---------------------------------------------------------------- sensitivities


def test_wt_examples():
    net = _mlp_with([np.array([[0.5], [-2.0], [0.1], [0.0]])])
    np.testing.assert_array_equal(P.sensitivity_wt(net).scores[0].ravel(), [0.5, 2.0, 0.1, 0.0])
    net.params[0].weights.data *= -1
    np.testing.assert_array_equal(P.sensitivity_wt(net).scores[0].ravel(), [0.5, 2.0, 0.1, 0.0])
    net.params[0].weights.data[:] = 0.7
    assert len(np.unique(P.sensitivity_wt(net).scores[0])) == 1


def test_sipp_examples():
    net = _mlp_with([np.array([[2.0]])])
    assert P.sensitivity_sipp(net, np.array([[0.5]])).scores[0][0, 0] == 1.0
    net = _mlp_with([np.array([[1.0]])])
    assert P.sensitivity_sipp(net, np.array([[1.0], [3.0]])).scores[0][0, 0] == 2.0
    net = _mlp_with([np.array([[5.0]])])
    assert P.sensitivity_sipp(net, np.zeros((3, 1))).scores[0][0, 0] == 0.0


def test_ft_examples():
    net = _mlp_with([np.array([[1.0, 0.1], [-1.0, 0.2]]), np.ones((2, 2))])
    np.testing.assert_allclose(P.sensitivity_ft(net).scores[0], [2.0, 0.3])
    assert P.sensitivity_ft(net).scores[1] is None  # classifier never pruned structurally
    net.params[0].weights.data[:, 1] = 0
    assert P.sensitivity_ft(net).scores[0][1] == 0.0


def test_ft_scaling_invariance(rng):
    net = N.desk_cnn(seed=1)
    before = P.allocate_budgets(P.sensitivity_ft(net), 0.5, "FT")
    s1 = P.sensitivity_ft(net).scores[0]
    for p in net.params:
        p.weights.data *= 3
    np.testing.assert_allclose(P.sensitivity_ft(net).scores[0], 3 * s1)
    after = P.allocate_budgets(P.sensitivity_ft(net), 0.5, "FT")
    for a, b in zip(before.pruned, after.pruned):
        assert (a is None and b is None) or np.array_equal(a, b)


def test_pfp_examples():
    # unit activation a = relu(1 * 0.5) = 0.5, single downstream weight 2
    net = _mlp_with([np.array([[1.0]]), np.array([[2.0]])])
    assert P.sensitivity_pfp(net, np.array([[0.5]])).scores[0][0] == 1.0
    # downstream weights {1, -3}, a = 1
    net = _mlp_with([np.array([[1.0]]), np.array([[1.0, -3.0]])])
    assert P.sensitivity_pfp(net, np.array([[1.0]])).scores[0][0] == 3.0
    # zero activation on every sample
    net = _mlp_with([np.array([[1.0, 1.0]]), np.array([[4.0, 1.0], [1.0, 1.0]])])
    assert P.sensitivity_pfp(net, np.array([[-1.0], [-2.0]])).scores[0][0] == 0.0


def _pfp_oracle(net, samples):
    """Brute force: max over samples, downstream weights and spatial positions."""
    rec = []
    net.forward(samples, record=rec)
    out = []
    for li in range(len(net.params) - 1):
        p_next = net.params[li + 1]
        spec_next = net.specs[net.param_layers[li + 1]]
        a = rec[li + 1]
        w = p_next.weights.data * p_next.mask
        units = net.params[li].n_units
        scores = np.zeros(units)
        groups = net.fanin_groups(li)
        for j in range(units):
            best = 0.0
            for s in range(len(samples)):
                if spec_next.kind == "dense":
                    for i in groups[j]:
                        best = max(best, np.abs(w[i]).max() * abs(a[s, i]))
                else:
                    ap = np.pad(a[s, j], 1)
                    for o in range(w.shape[0]):
                        for y in range(a.shape[2]):
                            for x in range(a.shape[3]):
                                best = max(best, np.abs(w[o, j] * ap[y : y + 3, x : x + 3]).max())
            scores[j] = best
        out.append(scores)
    return out


def test_pfp_matches_brute_force_on_cnn():
    rng = np.random.default_rng(0)
    net = N.MaskedNetwork.build(
        [N.LayerSpec.conv2d(1, 3, 3), N.LayerSpec.relu(), N.LayerSpec.conv2d(3, 2, 3), N.LayerSpec.relu(),
         N.LayerSpec.flatten(), N.LayerSpec.dense(2 * 4 * 4, 5), N.LayerSpec.relu(), N.LayerSpec.dense(5, 3)],
        (1, 4, 4), 3, seed=2,
    )
    x = rng.normal(size=(4, 1, 4, 4))
    got = P.sensitivity_pfp(net, x).scores
    for g, want in zip(got, _pfp_oracle(net, x)):
        np.testing.assert_allclose(g, want, rtol=1e-12)


def test_sipp_matches_brute_force_on_conv():
    rng = np.random.default_rng(1)
    net = N.MaskedNetwork.build(
        [N.LayerSpec.conv2d(2, 2, 3), N.LayerSpec.flatten(), N.LayerSpec.dense(2 * 3 * 3, 2)], (2, 3, 3), 2, seed=0
    )
    x = rng.normal(size=(3, 2, 3, 3))
    w = net.params[0].weights.data
    want = np.zeros_like(w)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    for o, c, i, j in itertools.product(*map(range, w.shape)):
        want[o, c, i, j] = np.mean([abs(w[o, c, i, j] * xp[s, c, y + i, xx + j]) for s in range(3) for y in range(3) for xx in range(3)])
    np.testing.assert_allclose(P.sensitivity_sipp(net, x).scores[0], want, rtol=1e-12)


def test_data_dependence():
    net = N.desk_cnn(seed=0)
    rng = np.random.default_rng(0)
    s1, s2 = rng.normal(size=(8, 1, 8, 8)), rng.normal(size=(8, 1, 8, 8)) * 3
    for crit in ("WT", "FT"):
        a = P.sensitivity(net, P.PruneMethod(crit), s1).scores
        b = P.sensitivity(net, P.PruneMethod(crit), s2).scores
        assert all((x is None and y is None) or np.array_equal(x, y) for x, y in zip(a, b))
    for crit in ("SiPP", "PFP"):
        a = P.sensitivity(net, P.PruneMethod(crit), s1).scores
        b = P.sensitivity(net, P.PruneMethod(crit), s2).scores
        assert not np.array_equal(a[0], b[0])
    with pytest.raises(ValueError):
        P.sensitivity(net, P.PruneMethod("SiPP"))


# ---------------------------------------------------------------- budgets


def test_global_topk_example():
    smap = P.SensitivityMap([np.array([4.0, 3.0, 2.0, 1.0])], [np.ones(4, bool)], N.PER_WEIGHT)
    b = P.allocate_budgets(smap, 0.5, "WT")
    np.testing.assert_array_equal(b.pruned[0], [2, 3])  # keep {4, 3}


def test_ft_uniform_example():
    smap = P.SensitivityMap([np.arange(4.0), np.arange(4.0)[::-1], None], [np.ones(4, bool)] * 2 + [None], N.PER_UNIT)
    b = P.allocate_budgets(smap, 0.5, "FT")
    assert b.keep[:2] == [2, 2]
    np.testing.assert_array_equal(b.pruned[0], [0, 1])
    np.testing.assert_array_equal(b.pruned[1], [2, 3])


def _pfp_sweep_oracle(layers, r):
    """Sweep every candidate threshold on layer-max-normalized scores; the
    smallest one that removes at least floor(r * total) units fixes the keep counts."""
    normed = [np.asarray(s) / max(s) for s in layers]
    total = sum(len(s) for s in normed)
    k = int(np.floor(r * total))
    for t in sorted(set(np.concatenate(normed))):
        removed = [int(np.sum(s <= t)) for s in normed]
        if sum(removed) >= k:
            break
    # ties at the threshold are broken by layer then index
    over = sum(removed) - k
    for li in reversed(range(len(normed))):
        at_t = int(np.sum(normed[li] == t))
        drop = min(over, at_t)
        removed[li] -= drop
        over -= drop
    return [len(s) - r_ for s, r_ in zip(normed, removed)]


def test_pfp_threshold_example():
    layers = [[1.0, 0.9, 0.1, 0.05], [1.0, 0.2, 0.15, 0.1]]
    smap = P.SensitivityMap([np.array(s) for s in layers], [np.ones(4, bool)] * 2, N.PER_UNIT)
    b = P.allocate_budgets(smap, 0.5, "PFP")
    assert b.keep == _pfp_sweep_oracle(layers, 0.5) == [2, 2]


def test_pfp_threshold_random_vs_sweep():
    rng = np.random.default_rng(3)
    for _ in range(200):
        layers = [rng.random(rng.integers(2, 9)) + 0.01 for _ in range(rng.integers(1, 4))]
        r = float(rng.uniform(0.05, 0.6))
        smap = P.SensitivityMap([np.array(s) for s in layers], [np.ones(len(s), bool) for s in layers], N.PER_UNIT)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", P.BudgetClampWarning)
            b = P.allocate_budgets(smap, r, "PFP")
        if not b.clamped:
            assert b.keep == _pfp_sweep_oracle(layers, r)


def _random_net(rng):
    depth = int(rng.integers(1, 4))
    sizes = [int(s) for s in rng.integers(2, 7, size=depth + 1)]
    net = N.mlp(sizes, seed=int(rng.integers(1 << 30)))
    for p in net.params:
        p.mask = (rng.random(p.mask.shape) < 0.8).astype(float)
        p.mask.flat[0] = 1.0
        p.apply_mask()
    return net


def test_wt_matches_sort_oracle_1000_cases():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        net = _random_net(rng)
        r = float(rng.uniform(0.05, 0.95))
        entries = sorted(
            (abs(p.weights.data.flat[i]), li, i)
            for li, p in enumerate(net.params)
            for i in np.flatnonzero(p.mask.ravel())
        )
        k = int(np.floor(r * len(entries)))
        left = {li: int(p.mask.sum()) for li, p in enumerate(net.params)}
        want = set()
        for _, li, i in entries:
            if len(want) == k:
                break
            if left[li] > 1:
                left[li] -= 1
                want.add((li, i))
        before = [p.mask.copy() for p in net.params]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", P.BudgetClampWarning)
            P.prune(net, P.PruneMethod("WT"), r)
        got = {(li, int(i)) for li, p in enumerate(net.params) for i in np.flatnonzero((before[li] - p.mask).ravel())}
        assert got == want


def test_ft_matches_sort_oracle_1000_cases():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        net = _random_net(rng)
        if len(net.params) < 2:
            continue
        r = float(rng.uniform(0.05, 0.95))
        want = {}
        for li, p in enumerate(net.params[:-1]):
            alive = [j for j in range(p.n_units) if p.mask[:, j].any()]
            norms = sorted((float(np.abs(p.weights.data[:, j] * p.mask[:, j]).sum()), j) for j in alive)
            k = min(int(np.floor(r * len(alive))), len(alive) - 1)
            want[li] = {j for _, j in norms[:k]}
        before = [p.unit_mask() for p in net.params]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", P.BudgetClampWarning)
            P.prune(net, P.PruneMethod("FT"), r)
        for li in want:
            got = set(np.flatnonzero(before[li] - net.params[li].unit_mask()).tolist())
            assert got == want[li]
        assert np.array_equal(before[-1], net.params[-1].unit_mask())


def test_clamp_warns_and_keeps_one():
    smap = P.SensitivityMap([np.array([1.0, 2.0]), np.array([5.0, 6.0, 7.0])], [np.ones(2, bool), np.ones(3, bool)], N.PER_WEIGHT)
    with pytest.warns(P.BudgetClampWarning):
        b = P.allocate_budgets(smap, 0.9, "WT")
    assert b.keep == [1, 1] and b.removed == 3 and b.requested == 4


def test_remaining_count_examples():
    net = N.mlp([10, 1], seed=0)
    res = P.prune(net, P.PruneMethod("WT"), 0.5)
    assert res.removed == 5
    P.prune(net, P.PruneMethod("WT"), 0.5)
    assert N.prune_ratio(net) == pytest.approx(0.7, abs=1e-12)  # 10 -> 5 -> 3 (floor 2.5 = 2)
    net = N.mlp([8, 8], seed=0)
    P.prune(net, P.PruneMethod("WT"), 0.5)
    P.prune(net, P.PruneMethod("WT"), 0.5)
    assert N.prune_ratio(net) == 0.75


# ---------------------------------------------------------------- prune-retrain


@pytest.fixture(scope="module")
def small_ds():
    return D.make_synthetic("textured-patches-8x8", 200, 4, 0, noise=0.3)


def _small_net(seed):
    return N.desk_cnn(channels=4, hidden=8, seed=seed)


FAST = TrainConfig(epochs=1, lr=0.05, batch_size=32, warmup_epochs=0.0, milestones=[])


def test_zero_cycles_returns_parent(small_ds):
    res = P.prune_retrain(0, P.PruneSchedule(0, 0.5, FAST), P.PruneMethod("WT"), small_ds, _small_net)
    assert N.prune_ratio(res.net) == 0.0 and len(res.checkpoints) == 1 and len(res.records) == 1


def _expected_counts(n, r, cycles):
    out = []
    for _ in range(cycles):
        n -= int(np.floor(r * n))
        out.append(n)
    return out


@pytest.mark.parametrize("r", [0.3, 0.5, 0.85])
@pytest.mark.parametrize("criterion", P.CRITERIA)
def test_prune_retrain_invariants(small_ds, criterion, r):
    sched = P.PruneSchedule(6, r, FAST)
    res = P.prune_retrain(0, sched, P.PruneMethod(criterion, sample_size=16), small_ds, _small_net)
    nets = [N.from_bytes(b) for b in res.checkpoints]
    unit_level = criterion in ("FT", "PFP")
    structured = lambda n: n.params[:-1]
    total = sum(p.n_units for p in structured(nets[0])) if unit_level else sum(p.mask.size for p in nets[0].params)
    count = lambda n: sum(int(p.unit_mask().sum()) for p in structured(n)) if unit_level else sum(int(p.mask.sum()) for p in n.params)
    if criterion == "FT":
        per_layer = [_expected_counts(p.n_units, r, 6) for p in structured(nets[0])]
        want = [sum(c) for c in zip(*per_layer)]
    else:
        want = _expected_counts(total, r, 6)
    for i in range(1, len(nets)):
        prev, cur = nets[i - 1], nets[i]
        for pp, pc in zip(prev.params, cur.params):
            assert np.all(pc.mask <= pp.mask)  # monotone
            assert np.all(pc.weights.data[pc.mask == 0] == 0.0)  # exactly zero after retraining
            assert pc.unit_mask().sum() >= 1
        rec = res.records[i]
        if not rec.clamped and criterion != "PFP":
            assert count(cur) == want[i - 1]
        # geometric schedule within the rounding of each cycle
        ratio = 1 - count(cur) / total
        if not rec.clamped:
            assert abs(ratio - sched.expected_ratio(i)) <= i * len(cur.params) / total + 1e-12
    assert res.records[-1].prune_ratio == N.prune_ratio(res.net)


def test_two_cycles_half_gives_three_quarters(small_ds):
    res = P.prune_retrain(1, P.PruneSchedule(2, 0.5, FAST), P.PruneMethod("WT"), small_ds, _small_net)
    total = sum(p.mask.size for p in res.net.params)
    assert abs(N.prune_ratio(res.net) - 0.75) <= 2 / total


def test_prune_retrain_deterministic(small_ds):
    sched = P.PruneSchedule(2, 0.3, FAST)
    a = P.prune_retrain(3, sched, P.PruneMethod("SiPP", 16), small_ds, _small_net)
    b = P.prune_retrain(3, sched, P.PruneMethod("SiPP", 16), small_ds, _small_net)
    assert a.checkpoints == b.checkpoints
