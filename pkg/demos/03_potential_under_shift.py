"""How much can we prune before accuracy drops by more than half a point,
on clean data and under growing input noise? And does pruning widen the gap
between train-distribution and held-out-corruption error?"""

import numpy as np

from prunelab import evaluation as E
from prunelab import network as N
from prunelab import pruning as P
from prunelab.data import Corruption, DistributionSpec, distribution_pair, make_synthetic
from prunelab.train import TrainConfig

ds = make_synthetic("textured-patches-8x8", 3000, 4, seed=0, noise=0.7)
schedule = P.PruneSchedule(5, 0.3, TrainConfig(epochs=6, warmup_epochs=1, milestones=[4, 5]))

runs = {}
for seed in (0, 1):
    runs[seed] = P.prune_retrain(seed, schedule, P.PruneMethod("WT"), ds).checkpoints

for eps in (0.0, 0.8, 1.6):
    dist = DistributionSpec(f"noise@{eps:g}", (Corruption("uniform-noise", param=eps),) if eps else ())
    curve = E.prune_accuracy_curve(runs, ds, dist, "WT", repetitions=2)
    rep = E.prune_potential(curve, 0.005)
    print(f"eps={eps:<4g} accuracy {np.round(curve.mean, 3)}  potential per seed {np.round(rep.per_seed, 3)}")

train_dist, test_dist = distribution_pair([], [Corruption("gaussian-noise"), Corruption("occlusion")])
ex = E.excess_report(
    E.prune_accuracy_curve(runs, ds, train_dist, "WT"),
    E.prune_accuracy_curve(runs, ds, test_dist, "WT", repetitions=2),
)
print(f"excess-error slope {ex.slope:+.4f}, 95% CI [{ex.ci[0]:+.4f}, {ex.ci[1]:+.4f}]")
