"""Iterative prune-retrain on the 8x8 texture task: weight thresholding
versus filter thresholding, one seed, a short schedule."""

from prunelab import network as N
from prunelab import pruning as P
from prunelab.data import make_synthetic
from prunelab.train import TrainConfig

ds = make_synthetic("textured-patches-8x8", 3000, 4, seed=0, noise=0.7)
schedule = P.PruneSchedule(n_cycles=4, r_prune=0.3, train=TrainConfig(epochs=6, warmup_epochs=1, milestones=[4, 5]))

parent = P.train_parent(0, schedule, ds, N.desk_cnn)
for criterion in ("WT", "FT"):
    res = P.prune_retrain(0, schedule, P.PruneMethod(criterion), ds, parent=parent)
    print(f"\n{criterion}  cycle  ratio  flops-cut  test-acc")
    for r in res.records:
        print(f"     {r.cycle:5d}  {r.prune_ratio:.3f}  {r.flop_reduction:9.3f}  {r.test_accuracy:.3f}")
