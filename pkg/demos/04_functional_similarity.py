"""Is a pruned child still "the same function" as its parent? Compare it with
an independently trained net under input noise and on sparse
BackSelect-masked inputs."""

import numpy as np

from prunelab import metrics as M
from prunelab import network as N
from prunelab import pruning as P
from prunelab.data import make_synthetic
from prunelab.train import TrainConfig

ds = make_synthetic("textured-patches-8x8", 3000, 4, seed=0, noise=0.7)
schedule = P.PruneSchedule(2, 0.3, TrainConfig(epochs=6, warmup_epochs=1, milestones=[4, 5]))

parent = P.train_parent(0, schedule, ds, N.desk_cnn)
independent = P.train_parent(0, schedule, ds, N.desk_cnn, purpose="independent-init")
child = P.prune_retrain(0, schedule, P.PruneMethod("WT"), ds, parent=parent).net

x = ds.x_test[:300]
for name, other in (("child", child), ("independent", independent)):
    rep = M.noise_similarity(parent, other, x, repetitions=5, seed=1)
    print(f"parent vs {name:11s} match {np.round(rep.match, 3)}  L2 {np.round(rep.l2, 3)}")

nets = {"parent": parent, "child": child, "independent": independent}
mean, _ = M.confidence_heatmap({"parent": parent}, nets, ds.x_test[:20], ds.y_test[:20], sparsity=0.9)
print("confidence on parent's 10% BackSelect masks:", "  ".join(f"{k} {v:.3f}" for k, v in zip(nets, mean[0])))
