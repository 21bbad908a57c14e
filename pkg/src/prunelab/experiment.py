"""Declarative experiment runs: train, prune-retrain per method and seed,
evaluate, and write flat result tables.

Layout: ``<out>/<config-hash>/<seed>/{checkpoints,curves,metrics}/`` plus
``record.json``; a seed directory only appears (by atomic rename) once all
of its outputs are written. Consolidated tables live in ``<out>/<config-hash>/``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import platform
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from . import data as D
from . import evaluation as E
from . import metrics as M
from . import network as N
from . import pruning as P
from .seeding import derived_seed
from .train import TrainConfig, TrainingDivergence

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "PRUNELAB_OUTPUT_ROOT"
RECORD = "record.json"


class ConfigError(ValueError):
    pass


class ReportError(ValueError):
    pass


@lru_cache(maxsize=1)
def config_schema():
    return json.loads(resources.files("prunelab").joinpath("schema/experiment.schema.json").read_text())


def recipe_path(name):
    """Path of a bundled recipe such as ``shift-desk``."""
    p = resources.files("prunelab").joinpath(f"recipes/{name}.json")
    if not p.is_file():
        raise ConfigError(f"no bundled recipe named {name!r}")
    return Path(str(p))


@dataclass
class ExperimentConfig:
    name: str
    dataset: dict
    network: dict
    methods: list
    schedule: dict
    seeds: list
    train_corruptions: list = field(default_factory=list)
    test_corruptions: list = field(default_factory=list)
    noise_eps: list = field(default_factory=lambda: [0.0])
    eval_repetitions: int = 1
    sample_size: int = 64
    metrics: dict = field(default_factory=dict)
    similarity: dict = field(default_factory=dict)
    backselect: dict = field(default_factory=dict)
    delta: float = E.DEFAULT_DELTA
    deltas: list = field(default_factory=lambda: list(E.DELTA_GRID))
    bootstrap_resamples: int = 1000
    output_dir: str = "runs"

    @classmethod
    def from_dict(cls, d):
        validator = jsonschema.Draft202012Validator(config_schema())
        errors = sorted(validator.iter_errors(d), key=lambda e: list(e.absolute_path))
        if errors:
            e = errors[0]
            where = "/".join(str(p) for p in e.absolute_path) or "<root>"
            raise ConfigError(f"invalid config at {where}: {e.message}")
        cfg = cls(**d)
        train = {c.kind for c in cfg.train_dist_corruptions()}
        test = {c.kind for c in cfg.test_dist_corruptions()}
        if train & test:
            raise ConfigError(f"invalid config at train_corruptions: overlaps test_corruptions on {sorted(train & test)}")
        return cfg

    @classmethod
    def load(cls, path):
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from None
        return cls.from_dict(d)

    def to_dict(self):
        return asdict(self)

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path):
        Path(path).write_text(self.dumps() + "\n", encoding="utf-8")

    def hash(self):
        """Identity of the computation, independent of seeds and output location."""
        d = self.to_dict()
        d.pop("seeds")
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def metric(self, name):
        defaults = {"similarity": True, "backselect": False, "potential": True, "excess": True, "robust_retrain": False}
        return bool(self.metrics.get(name, defaults[name]))

    def train_config(self):
        return TrainConfig.from_dict(self.schedule.get("train", {}))

    def prune_schedule(self):
        return P.PruneSchedule(self.schedule["n_cycles"], self.schedule["r_prune"], self.train_config())

    def train_dist_corruptions(self):
        return tuple(D.Corruption.from_dict(c) for c in self.train_corruptions)

    def test_dist_corruptions(self):
        return tuple(D.Corruption.from_dict(c) for c in self.test_corruptions)

    def make_dataset(self):
        ds = self.dataset
        return _cached_dataset(ds["kind"], ds["n"], ds["classes"], ds.get("seed", 0), json.dumps(ds.get("params", {}), sort_keys=True))

    def builder(self, dataset):
        net = self.network
        if net.get("arch", "desk-cnn") == "desk-cnn":
            return lambda seed: N.desk_cnn(dataset.input_shape, dataset.classes, net.get("channels", 8), net.get("hidden", 16), seed)
        sizes = [int(np.prod(dataset.input_shape))] + list(net.get("hidden_sizes", [32])) + [dataset.classes]
        return lambda seed: N.mlp(sizes, seed)

    def variants(self):
        """(variant id, criterion, robust) for every trained family."""
        out = [(m, m, False) for m in self.methods]
        if self.metric("robust_retrain"):
            out += [(f"{m}+robust", m, True) for m in self.methods]
        return out


@lru_cache(maxsize=4)
def _cached_dataset(kind, n, classes, seed, params):
    return D.make_synthetic(kind, n, classes, seed, **json.loads(params))


def output_root(cfg):
    return Path(os.environ.get(OUTPUT_ROOT_ENV) or cfg.output_dir)


# ---------------------------------------------------------------- distributions


def evaluation_distributions(cfg, robust):
    """Named distributions each pruned net is scored on."""
    train_c, test_c = cfg.train_dist_corruptions(), cfg.test_dist_corruptions()
    train_dist, test_dist = D.distribution_pair(train_c, test_c, robust=robust)
    dists = [D.DistributionSpec("nominal", ())]
    for e in cfg.noise_eps:
        cs = (D.Corruption("uniform-noise", param=float(e)),) if e > 0 else ()
        dists.append(D.DistributionSpec(f"noise@{float(e):g}", cs))
    for c in train_c + test_c:
        dists.append(D.DistributionSpec(c.name, (c,)))
    dists += [train_dist, test_dist]
    return dists


def corruption_groups(cfg, robust):
    """Member names of the train and test distributions, for potential summaries."""
    train = ["nominal"] + ([c.name for c in cfg.train_dist_corruptions()] if robust else [])
    test = [c.name for c in cfg.test_dist_corruptions()]
    return {"train-dist": train, "test-dist": test}


# ---------------------------------------------------------------- per-seed job


def _atomic_write(path, text):
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def run_seed(cfg, seed, run_dir):
    """Everything for one seed, written to ``run_dir/<seed>`` atomically."""
    t0 = time.time()
    final = run_dir / str(seed)
    work = run_dir / f".{seed}.partial"
    if work.exists():
        shutil.rmtree(work)
    for sub in ("checkpoints", "curves", "metrics"):
        (work / sub).mkdir(parents=True)

    ds = cfg.make_dataset()
    build = cfg.builder(ds)
    sched = cfg.prune_schedule()
    train_c = cfg.train_dist_corruptions()
    record = {"config_hash": cfg.hash(), "seed": seed, "version": __version__, "cycles": {}, "failures": []}

    parents = {False: P.train_parent(seed, sched, ds, build)}
    if cfg.metric("robust_retrain"):
        parents[True] = P.train_parent(seed, sched, ds, build, augment=train_c)
    N.save_checkpoint(parents[False], work / "checkpoints" / "parent.plab")

    checkpoints = {}
    for vid, criterion, robust in cfg.variants():
        method = P.PruneMethod(criterion, cfg.sample_size)
        try:
            res = P.prune_retrain(seed, sched, method, ds, build, train_c if robust else (), parent=parents[robust])
        except TrainingDivergence as e:
            record["failures"].append({"method": vid, "cycle": e.cycle, "error": str(e)})
            log.error("seed %s %s diverged in cycle %s: %s", seed, vid, e.cycle, e)
            continue
        checkpoints[vid] = res.checkpoints
        vdir = work / "checkpoints" / vid
        vdir.mkdir()
        for i, b in enumerate(res.checkpoints):
            (vdir / f"cycle{i}.plab").write_bytes(b)
        record["cycles"][vid] = [asdict(r) for r in res.records]

    rows = []
    for vid, criterion, robust in cfg.variants():
        if vid not in checkpoints:
            continue
        nets = [N.from_bytes(b) for b in checkpoints[vid]]
        for dist in evaluation_distributions(cfg, robust):
            for i, net in enumerate(nets):
                acc = E.distribution_accuracy(net, ds, dist, seed, cfg.eval_repetitions)
                rows.append((vid, i, N.prune_ratio(net), dist.name, acc))
    E.write_csv(work / "curves" / "evals.csv", ("method", "cycle", "ratio", "distribution", "accuracy"), rows)

    if cfg.metric("similarity") or cfg.metric("backselect"):
        independent = P.train_parent(seed, sched, ds, build, purpose="independent-init")
        N.save_checkpoint(independent, work / "checkpoints" / "independent.plab")
    if cfg.metric("similarity"):
        _similarity(cfg, seed, ds, parents[False], independent, checkpoints, work)
    if cfg.metric("backselect"):
        _heatmap(cfg, ds, parents[False], independent, checkpoints, work)

    record["wall_clock_s"] = round(time.time() - t0, 3)
    record["python"] = platform.python_version()
    record["numpy"] = np.__version__
    _atomic_write(work / RECORD, json.dumps(record, indent=2, sort_keys=True))
    if final.exists():
        shutil.rmtree(final)
    work.rename(final)
    return seed


def _similarity(cfg, seed, ds, parent, independent, checkpoints, work):
    sim = cfg.similarity
    x = ds.x_test[: sim.get("samples", 500)]
    eps = sim.get("eps", list(M.DEFAULT_EPS_GRID))
    reps = sim.get("repetitions", 10)
    noise_seed = derived_seed(seed, "noise", 1)
    rows = []
    rep = M.noise_similarity(parent, independent, x, eps, reps, noise_seed)
    rows += [("independent", "", 0, "", *r) for r in rep.rows()]
    for vid, _, robust in cfg.variants():
        if robust or vid not in checkpoints:
            continue
        for i, b in enumerate(checkpoints[vid][1:], start=1):
            child = N.from_bytes(b)
            rep = M.noise_similarity(parent, child, x, eps, reps, noise_seed)
            rows += [("child", vid, i, N.prune_ratio(child), *r) for r in rep.rows()]
    E.write_csv(
        work / "metrics" / "similarity.csv",
        ("comparison", "method", "cycle", "ratio", "eps", "match_mean", "match_std", "l2_mean", "l2_std"),
        rows,
    )


def _heatmap(cfg, ds, parent, independent, checkpoints, work):
    bs = cfg.backselect
    k = bs.get("samples", 50)
    x, y = ds.x_test[:k], ds.y_test[:k]
    nets = {"parent": parent}
    for vid, _, robust in cfg.variants():
        if robust or vid not in checkpoints:
            continue
        for c in bs.get("cycles", [2]):
            if c < len(checkpoints[vid]):
                nets[f"{vid}@{c}"] = N.from_bytes(checkpoints[vid][c])
    nets["independent"] = independent
    mean, _ = M.confidence_heatmap(nets, nets, x, y, bs.get("sparsity", 0.9))
    names = list(nets)
    rows = [(s, e, mean[i, j]) for i, s in enumerate(names) for j, e in enumerate(names)]
    E.write_csv(work / "metrics" / "heatmap.csv", ("source", "evaluated", "confidence"), rows)


# ---------------------------------------------------------------- run / report


def run(config_path, workers=1, seed_override=None):
    """Run every pending seed, then consolidate. Returns the run directory."""
    cfg = config_path if isinstance(config_path, ExperimentConfig) else ExperimentConfig.load(config_path)
    if seed_override is not None:
        cfg.seeds = [int(seed_override)]
    run_dir = output_root(cfg) / cfg.hash()
    run_dir.mkdir(parents=True, exist_ok=True)
    _atomic_write(run_dir / "config.json", cfg.dumps() + "\n")

    pending = [s for s in cfg.seeds if not _complete(run_dir, s, cfg.hash())]
    if pending:
        log.info("running seeds %s in %s", pending, run_dir)
    if workers > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run_seed, [cfg] * len(pending), pending, [run_dir] * len(pending)))
    else:
        for s in pending:
            run_seed(cfg, s, run_dir)
    report(run_dir, seeds=cfg.seeds)
    return run_dir


def _complete(run_dir, seed, chash):
    rec = run_dir / str(seed) / RECORD
    if not rec.is_file():
        return False
    return json.loads(rec.read_text())["config_hash"] == chash


def _resolve_run_dir(path):
    path = Path(path)
    if (path / "config.json").is_file():
        return path
    subs = [p for p in path.iterdir() if p.is_dir() and (p / "config.json").is_file()] if path.is_dir() else []
    if len(subs) > 1:
        raise ReportError(f"{path} mixes results from {len(subs)} config hashes: {sorted(p.name for p in subs)}")
    if not subs:
        raise ReportError(f"no run records under {path}")
    return subs[0]


def _load_evals(run_dir, seeds):
    """{(method, distribution): (ratios [cycles], acc [seeds, cycles])}"""
    table = {}
    for s in seeds:
        for row in E.read_csv(run_dir / str(s) / "curves" / "evals.csv"):
            key = (row["method"], row["distribution"])
            table.setdefault(key, {}).setdefault(s, []).append((int(row["cycle"]), float(row["ratio"]), float(row["accuracy"])))
    out = {}
    for key, by_seed in table.items():
        if set(by_seed) != set(seeds):
            continue
        series = [sorted(by_seed[s]) for s in seeds]
        n = min(len(x) for x in series)
        ratios = np.mean([[r for _, r, _ in x[:n]] for x in series], axis=0)
        acc = np.array([[a for _, _, a in x[:n]] for x in series])
        out[key] = (ratios, acc)
    return out


def curves_from_run(run_dir, seeds=None):
    run_dir = _resolve_run_dir(run_dir)
    seeds = seeds if seeds is not None else completed_seeds(run_dir)
    return {
        key: E.PruneAccuracyCurve(key[0], key[1], r, a, list(seeds)) for key, (r, a) in _load_evals(run_dir, seeds).items()
    }


def completed_seeds(run_dir):
    seeds = []
    for p in sorted(run_dir.iterdir()):
        if p.is_dir() and p.name.lstrip("-").isdigit() and (p / RECORD).is_file():
            seeds.append(int(p.name))
    return sorted(seeds)


def report(path, seeds=None):
    """Merge per-seed outputs into consolidated tables; returns a summary dict."""
    run_dir = _resolve_run_dir(path)
    cfg = ExperimentConfig.from_dict(json.loads((run_dir / "config.json").read_text()))
    chash = cfg.hash()
    if seeds is None:
        seeds = completed_seeds(run_dir)
    seeds = [s for s in seeds if (run_dir / str(s) / RECORD).is_file()]
    if not seeds:
        raise ReportError(f"no completed runs in {run_dir}")
    for s in seeds:
        rec = json.loads((run_dir / str(s) / RECORD).read_text())
        if rec["config_hash"] != chash:
            raise ReportError(f"seed {s} was produced by config {rec['config_hash']}, not {chash}")

    curves = curves_from_run(run_dir, seeds)
    curve_rows, pot_rows, summary_rows, excess_rows, reg_rows = [], [], [], [], []
    summary = {"config_hash": chash, "seeds": seeds, "potential": {}, "excess": {}, "summary": {}}
    for (vid, dist), curve in sorted(curves.items()):
        curve_rows += list(curve.rows())
        curve_rows += [
            (vid, float(r), dist, "error", float(m), float(sd))
            for r, m, sd in zip(curve.ratios, curve.error.mean(axis=0), E.sample_std(curve.error))
        ]

    if cfg.metric("potential"):
        for (vid, dist), curve in sorted(curves.items()):
            for d in sorted(set(cfg.deltas) | {cfg.delta}):
                rep = E.prune_potential(curve, d)
                pot_rows.append((vid, "", dist, f"potential@delta={d:g}", rep.mean, rep.std))
                pot_rows.append((vid, "", dist, f"potential_pooled@delta={d:g}", rep.potential, 0.0))
                if d == cfg.delta:
                    summary["potential"].setdefault(vid, {})[dist] = {
                        "pooled": rep.potential, "mean": rep.mean, "std": rep.std, "per_seed": rep.per_seed.tolist()
                    }
        for vid, _, robust in cfg.variants():
            for role, members in corruption_groups(cfg, robust).items():
                reps = [E.prune_potential(curves[(vid, m)], cfg.delta) for m in members if (vid, m) in curves]
                if not reps:
                    continue
                s = E.summarize_potentials(reps)
                for stat, vals in (("average", s.average), ("minimum", s.minimum)):
                    summary_rows.append((vid, role, stat, float(vals.mean()), float(E.sample_std(vals))))
                    summary["summary"].setdefault(vid, {}).setdefault(role, {})[stat] = float(vals.mean())

    if cfg.metric("excess"):
        for vid, _, _ in cfg.variants():
            tr, te = curves.get((vid, "train-dist")), curves.get((vid, "test-dist"))
            if tr is None or te is None or np.unique(tr.ratios[1:]).size < 2:
                continue
            rep = E.excess_report(tr, te, cfg.bootstrap_resamples, seed=0)
            for i, r in enumerate(rep.ratios):
                col = rep.differences[:, i]
                excess_rows.append((vid, float(r), "test-dist", "excess_error_diff", float(col.mean()), float(E.sample_std(col))))
            reg_rows.append((vid, rep.slope, rep.ci[0], rep.ci[1], rep.resamples, rep.differences.size))
            summary["excess"][vid] = {"slope": rep.slope, "ci": list(rep.ci)}

    E.write_csv(run_dir / "curves.csv", E.FLAT_COLUMNS, curve_rows)
    if cfg.metric("potential"):
        E.write_csv(run_dir / "potential.csv", E.FLAT_COLUMNS, pot_rows)
        E.write_csv(run_dir / "summary.csv", ("method", "distribution", "statistic", "mean", "std"), summary_rows)
    if cfg.metric("excess"):
        E.write_csv(run_dir / "excess.csv", E.FLAT_COLUMNS, excess_rows)
        E.write_csv(run_dir / "regression.csv", ("method", "slope", "ci_low", "ci_high", "resamples", "points"), reg_rows)
    if cfg.metric("similarity"):
        _merge_similarity(run_dir, seeds)
    if cfg.metric("backselect"):
        _merge_heatmap(run_dir, seeds)
    _atomic_write(run_dir / "report.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def _merge_similarity(run_dir, seeds):
    acc = {}
    for s in seeds:
        for row in E.read_csv(run_dir / str(s) / "metrics" / "similarity.csv"):
            key = (row["comparison"], row["method"], row["cycle"], row["eps"])
            acc.setdefault(key, []).append((float(row["ratio"] or 0.0), float(row["match_mean"]), float(row["l2_mean"])))
    rows = []
    for key in sorted(acc, key=lambda k: (k[0], k[1], int(k[2]), float(k[3]))):
        v = np.array(acc[key])
        if len(v) != len(seeds):
            continue
        rows.append((key[0], key[1], int(key[2]), v[:, 0].mean(), float(key[3]), v[:, 1].mean(), E.sample_std(v[:, 1]), v[:, 2].mean(), E.sample_std(v[:, 2])))
    E.write_csv(
        run_dir / "similarity.csv",
        ("comparison", "method", "cycle", "ratio", "eps", "match_mean", "match_std", "l2_mean", "l2_std"),
        rows,
    )


def _merge_heatmap(run_dir, seeds):
    acc = {}
    for s in seeds:
        for row in E.read_csv(run_dir / str(s) / "metrics" / "heatmap.csv"):
            acc.setdefault((row["source"], row["evaluated"]), []).append(float(row["confidence"]))
    rows = [(k[0], k[1], np.mean(v), E.sample_std(np.array(v))) for k, v in acc.items() if len(v) == len(seeds)]
    E.write_csv(run_dir / "heatmap.csv", ("source", "evaluated", "mean", "std"), rows)


# ---------------------------------------------------------------- calibration


def calibrate_corruptions(cfg, seeds=None):
    """Accuracy of the unpruned net under every corruption kind and severity.

    Returns rows (seed, kind, severity, strength, clean accuracy, accuracy, drop).
    """
    ds = cfg.make_dataset()
    build = cfg.builder(ds)
    sched = cfg.prune_schedule()
    rows = []
    for seed in seeds if seeds is not None else cfg.seeds:
        net = P.train_parent(seed, sched, ds, build)
        clean = E.member_accuracy(net, ds, None, seed)
        for kind in D.CORRUPTION_KINDS:
            if kind in D.IMAGE_ONLY and len(ds.input_shape) != 3:
                continue
            for sev in range(1, 6):
                c = D.Corruption(kind, sev)
                acc = E.member_accuracy(net, ds, c, seed, cfg.eval_repetitions)
                rows.append((seed, kind, sev, float(c.strength), clean, acc, clean - acc))
    return rows
