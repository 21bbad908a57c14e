"""Acceptance criteria on the desk task. Each test prints one PASS/FAIL line.

The desk-scale runs (shift-desk twice, robust-desk once) take several
minutes on one core; they are shared through session fixtures.
"""

import time
import warnings

import numpy as np
import pytest

from prunelab import data as D
from prunelab import evaluation as E
from prunelab import experiment as X
from prunelab import metrics as M
from prunelab import network as N
from prunelab import pruning as P
from prunelab.tensor import run_gradcheck
from prunelab.train import TrainConfig

from conftest import ACCEPTANCE_LINES


def report(n, ok, detail):
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def _run_recipe(name, root):
    cfg = X.ExperimentConfig.load(X.recipe_path(name))
    cfg.output_dir = str(root)
    t0 = time.time()
    run_dir = X.run(cfg)
    return cfg, run_dir, time.time() - t0


@pytest.fixture(scope="session")
def shift(tmp_path_factory):
    return _run_recipe("shift-desk", tmp_path_factory.mktemp("shifta"))


@pytest.fixture(scope="session")
def shift_again(tmp_path_factory, shift):
    return _run_recipe("shift-desk", tmp_path_factory.mktemp("shiftb"))


@pytest.fixture(scope="session")
def robust(tmp_path_factory):
    return _run_recipe("robust-desk", tmp_path_factory.mktemp("robust"))


def _per_seed_curves(cfg, run_dir):
    """{(method, distribution): PruneAccuracyCurve} rebuilt straight from the per-seed evals."""
    raw = {}
    for s in cfg.seeds:
        for r in E.read_csv(run_dir / str(s) / "curves" / "evals.csv"):
            raw.setdefault((r["method"], r["distribution"]), {}).setdefault(s, []).append((int(r["cycle"]), float(r["ratio"]), float(r["accuracy"])))
    out = {}
    for key, by_seed in raw.items():
        rows = [sorted(by_seed[s]) for s in cfg.seeds]
        ratios = np.mean([[x[1] for x in r] for r in rows], axis=0)
        acc = np.array([[x[2] for x in r] for r in rows])
        out[key] = E.PruneAccuracyCurve(key[0], key[1], ratios, acc, cfg.seeds)
    return out


# ---------------------------------------------------------------- 1


def test_criterion_1_gradient_suite():
    t0 = time.time()
    errors, ok = run_gradcheck(cases_per_kind=10, seed=0, tol=1e-4)
    dt = time.time() - t0
    n = sum(len(v) for v in errors.values())
    worst = max(max(v) for v in errors.values())
    report(1, ok and n >= 100 and dt < 30, f"{n} cases over {len(errors)} ops, max rel err {worst:.1e}, {dt:.2f}s")


# ---------------------------------------------------------------- 2


def _iterated(n, r, cycles):
    out = []
    for _ in range(cycles):
        n -= int(np.floor(r * n))
        out.append(n)
    return out


def test_criterion_2_algorithm_invariants():
    ds = D.make_synthetic("textured-patches-8x8", 600, 4, 0, noise=0.7)
    sched_cfg = TrainConfig(epochs=1, warmup_epochs=0.5, milestones=[])
    failures, runs = [], 0
    for crit in P.CRITERIA:
        for r in (0.3, 0.5, 0.85):
            res = P.prune_retrain(0, P.PruneSchedule(6, r, sched_cfg), P.PruneMethod(crit, 32), ds, N.desk_cnn)
            runs += 1
            nets = [N.from_bytes(b) for b in res.checkpoints]
            structured = crit in ("FT", "PFP")
            if structured:
                count = lambda n: [int(p.unit_mask().sum()) for p in n.params[:-1]]
                want = [_iterated(p.n_units, r, 6) for p in nets[0].params[:-1]] if crit == "FT" else None
                total = sum(p.n_units for p in nets[0].params[:-1])
            else:
                count = lambda n: [sum(int(p.mask.sum()) for p in n.params)]
                total = sum(p.mask.size for p in nets[0].params)
                want = [_iterated(total, r, 6)]
            for i in range(1, len(nets)):
                for pp, pc in zip(nets[i - 1].params, nets[i].params):
                    if np.any(pc.mask > pp.mask):
                        failures.append(f"{crit} r={r} cycle {i}: mask grew")
                    if np.any(pc.weights.data[pc.mask == 0] != 0.0):
                        failures.append(f"{crit} r={r} cycle {i}: masked weight nonzero")
                got = count(nets[i])
                clamped = bool(res.records[i].clamped)
                if want is not None and not clamped and got != [w[i - 1] for w in want]:
                    failures.append(f"{crit} r={r} cycle {i}: {got} remaining, expected {[w[i - 1] for w in want]}")
                # PFP spreads one global unit budget; rounding is per cycle
                kept = sum(got)
                if not clamped and abs((1 - kept / total) - (1 - (1 - r) ** i)) > i * len(got) / total + 1e-12:
                    failures.append(f"{crit} r={r} cycle {i}: ratio {1 - kept / total:.4f} off schedule")
    report(2, not failures, f"{runs} runs x 6 cycles checked" + (f"; {failures[:3]}" if failures else ""))


# ---------------------------------------------------------------- 3


def test_criterion_3_criterion_oracles():
    rng = np.random.default_rng(2024)
    bad = 0
    for crit in ("WT", "FT"):
        for _ in range(1000):
            sizes = [int(s) for s in rng.integers(2, 7, size=int(rng.integers(3, 5)))]
            net = N.mlp(sizes, seed=int(rng.integers(1 << 30)))
            r = float(rng.uniform(0.05, 0.9))
            if crit == "WT":
                entries = sorted((abs(p.weights.data.flat[i]), li, i) for li, p in enumerate(net.params) for i in range(p.mask.size))
                left = {li: p.mask.size for li, p in enumerate(net.params)}
                want = set()
                for _, li, i in entries:
                    if len(want) == int(np.floor(r * len(entries))):
                        break
                    if left[li] > 1:
                        left[li] -= 1
                        want.add((li, i))
                before = [p.mask.copy() for p in net.params]
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    P.prune(net, P.PruneMethod("WT"), r)
                got = {(li, int(i)) for li, p in enumerate(net.params) for i in np.flatnonzero((before[li] - p.mask).ravel())}
            else:
                want = set()
                for li, p in enumerate(net.params[:-1]):
                    norms = sorted((float(np.abs(p.weights.data[:, j]).sum()), j) for j in range(p.n_units))
                    k = min(int(np.floor(r * p.n_units)), p.n_units - 1)
                    want |= {(li, j) for _, j in norms[:k]}
                P.prune(net, P.PruneMethod("FT"), r)
                got = {(li, int(j)) for li, p in enumerate(net.params[:-1]) for j in np.flatnonzero(p.unit_mask() == 0)}
            bad += got != want

    steps = 0
    for n, seed in ((8, 0), (27, 1), (64, 2)):
        net = N.mlp([n, 10, 3], seed=seed)
        x = np.random.default_rng(seed).normal(size=n)
        pred = int(np.argmax(net.logits(x[None])[0]))
        order = M.back_select(net, x, pred)
        cur, remaining = x.copy(), set(range(n))
        for k in order:
            conf = {}
            for j in remaining:
                t = cur.copy()
                t[j] = 0.0
                conf[j] = M.confidence(net, t[None], pred)[0]
            bad += conf[k] < max(conf.values()) - 1e-12
            cur[k] = 0.0
            remaining.remove(k)
            steps += 1
    report(3, bad == 0, f"2000 WT/FT sort-oracle cases and {steps} BackSelect argmin steps, {bad} mismatches")


# ---------------------------------------------------------------- 4


@pytest.mark.slow
def test_criterion_4_definition_fidelity(shift):
    cfg, run_dir, _ = shift
    curves = _per_seed_curves(cfg, run_dir)
    summary = X.report(run_dir)
    problems = []
    pot_rows = {(r["method"], r["distribution"], r["metric"]): r for r in E.read_csv(run_dir / "potential.csv")}
    for (m, dist), curve in curves.items():
        err = 1.0 - curve.accuracy
        gap = err - err[:, :1]
        per_seed = np.array([curve.ratios[gap[s] <= cfg.delta + 1e-12].max() for s in range(len(cfg.seeds))])
        rep = summary["potential"][m][dist]
        if rep["per_seed"] != per_seed.tolist():
            problems.append(f"{m}/{dist} per-seed potential")
        if float(pot_rows[(m, dist, f"potential@delta={cfg.delta:g}")]["mean"]) != per_seed.mean():
            problems.append(f"{m}/{dist} potential.csv")
        pots = [E.prune_potential(curve, d).mean for d in E.DELTA_GRID]
        if any(a > b for a, b in zip(pots, pots[1:])):
            problems.append(f"{m}/{dist} P(delta) not monotone")
    ex_rows = E.read_csv(run_dir / "excess.csv")
    for m in cfg.methods:
        tr, te = curves[(m, "train-dist")], curves[(m, "test-dist")]
        e = (1 - te.accuracy) - (1 - tr.accuracy)
        diffs = e - e[:, :1]
        if np.any(diffs[:, 0] != 0.0):
            problems.append(f"{m}: excess diff at ratio 0 nonzero")
        rows = [r for r in ex_rows if r["method"] == m]
        for i, r in enumerate(rows):
            if float(r["mean"]) != diffs[:, i].mean():
                problems.append(f"{m}: excess.csv cycle {i}")
    report(4, not problems, f"{len(curves)} curves recomputed from raw evals" + (f"; {problems[:3]}" if problems else ""))


# ---------------------------------------------------------------- 5


@pytest.mark.slow
def test_criterion_5_similarity_ordering(shift):
    cfg, run_dir, _ = shift
    ds = cfg.make_dataset()
    sim = cfg.similarity
    x = ds.x_test[: sim["samples"]]
    t0 = time.time()
    worst, checked, mismatched_csv = np.inf, 0, 0
    rows = E.read_csv(run_dir / "similarity.csv")
    for s in cfg.seeds:
        ck = run_dir / str(s) / "checkpoints"
        parent, indep = N.load_checkpoint(ck / "parent.plab"), N.load_checkpoint(ck / "independent.plab")
        noise_seed = X.derived_seed(s, "noise", 1)
        base = M.noise_similarity(parent, indep, x, sim["eps"], sim["repetitions"], noise_seed)
        for c in range(1, cfg.schedule["n_cycles"] + 1):
            child = N.load_checkpoint(ck / "WT" / f"cycle{c}.plab")
            if N.prune_ratio(child) > 0.75:
                continue
            rep = M.noise_similarity(parent, child, x, sim["eps"], sim["repetitions"], noise_seed)
            worst = min(worst, float((rep.match - base.match).min()))
            checked += 1
            per_seed_csv = E.read_csv(run_dir / str(s) / "metrics" / "similarity.csv")
            stored = [float(r["match_mean"]) for r in per_seed_csv if r["method"] == "WT" and int(r["cycle"]) == c]
            mismatched_csv += stored != rep.match.tolist()
    dt = time.time() - t0
    ok = worst > 0 and checked >= 3 * 3 and dt < 300 and mismatched_csv == 0 and rows
    report(5, ok, f"{checked} WT children (ratio <= 0.75) x {len(sim['eps'])} eps x 3 seeds; min margin over independent {worst:+.4f}; {dt:.1f}s")


# ---------------------------------------------------------------- 6


@pytest.mark.slow
def test_criterion_6_potential_drops_with_noise(shift):
    cfg, run_dir, _ = shift
    curves = _per_seed_curves(cfg, run_dir)
    top = f"noise@{max(cfg.noise_eps):g}"
    parts, ok = [], True
    for m in cfg.methods:
        clean = E.prune_potential(curves[(m, "noise@0")], cfg.delta).mean
        noisy = E.prune_potential(curves[(m, top)], cfg.delta).mean
        ok &= clean - noisy >= 0.20
        parts.append(f"{m}: P(eps=0)={clean:.3f} P({top})={noisy:.3f} drop={100 * (clean - noisy):.1f}pp")
    report(6, ok, "; ".join(parts))


# ---------------------------------------------------------------- 7


@pytest.mark.slow
def test_criterion_7_excess_slope(shift):
    cfg, run_dir, _ = shift
    rows = {r["method"]: r for r in E.read_csv(run_dir / "regression.csv")}
    good = [m for m in ("WT", "FT") if float(rows[m]["slope"]) > 0 and float(rows[m]["ci_low"]) > 0]
    detail = "; ".join(f"{m}: slope {float(rows[m]['slope']):+.4f} CI [{float(rows[m]['ci_low']):+.4f}, {float(rows[m]['ci_high']):+.4f}]" for m in ("WT", "FT"))
    report(7, bool(good), detail)


# ---------------------------------------------------------------- 8


@pytest.mark.slow
def test_criterion_8_robust_retraining(robust, shift):
    cfg, run_dir, _ = robust
    curves = _per_seed_curves(cfg, run_dir)
    nominal_reg = {r["method"]: r for r in E.read_csv(shift[1] / "regression.csv")}
    robust_reg = {r["method"]: r for r in E.read_csv(run_dir / "regression.csv")}
    parts, ok = [], True
    for m in cfg.methods:
        for c in cfg.train_dist_corruptions():
            p_nom = E.prune_potential(curves[(m, c.name)], cfg.delta).mean
            p_rob = E.prune_potential(curves[(f"{m}+robust", c.name)], cfg.delta).mean
            ok &= p_rob >= p_nom - 0.05
            parts.append(f"{m} {c.name}: {p_rob:.3f} vs {p_nom:.3f}")
        s_nom, s_rob = float(nominal_reg[m]["slope"]), float(robust_reg[f"{m}+robust"]["slope"])
        ok &= abs(s_rob) < abs(s_nom)
        parts.append(f"{m} |slope| {abs(s_rob):.4f} < {abs(s_nom):.4f}")
    report(8, ok, "; ".join(parts))


# ---------------------------------------------------------------- 9


def test_criterion_9_regression_unit():
    slope, _ = E.excess_regression([0.5, 1.0], [1.0, 2.0])
    # percentile intervals under-cover on small samples (about 92.7% at 40
    # points); at 500 points the interval is at its nominal 95%
    hits = 0
    for t in range(100):
        rng = np.random.default_rng(10_000 + t)
        x = rng.uniform(0.1, 1.0, size=500)
        y = 3 * x + rng.normal(0, 0.1, size=500)
        _, (lo, hi) = E.excess_regression(x, y, 1000, seed=t)
        hits += lo <= 3.0 <= hi
    report(9, slope == 2.0 and hits >= 93, f"exact slope {slope}; coverage {hits}/100")


# ---------------------------------------------------------------- 10


@pytest.mark.slow
def test_criterion_10_determinism(shift, shift_again):
    a, b = shift[1], shift_again[1]
    files = sorted(p.relative_to(a) for p in a.rglob("*.csv"))
    differ = [str(f) for f in files if (a / f).read_bytes() != (b / f).read_bytes()]
    same_set = files == sorted(p.relative_to(b) for p in b.rglob("*.csv"))
    report(10, same_set and not differ and len(files) > 0,
           f"{len(files)} CSV files compared across two runs ({shift[2]:.0f}s, {shift_again[2]:.0f}s)" + (f"; differ: {differ[:3]}" if differ else ""))
