"""Fit a small MLP on well-separated Gaussian clusters with the numpy tensor
core, then confirm the analytic gradients against finite differences."""

import numpy as np

from prunelab import network as N
from prunelab.data import make_synthetic
from prunelab.seeding import stream
from prunelab.tensor import Tensor, backward, cross_entropy, run_gradcheck
from prunelab.train import TrainConfig, train

ds = make_synthetic("gaussian-clusters", 1500, 3, seed=0, separation=6.0)
net = N.mlp([3, 16, 3], seed=0)

# one manual step, to show the moving parts
x, y = ds.x_train[:8], ds.y_train[:8]
loss = cross_entropy(net.forward(Tensor(x)), Tensor(np.eye(3)[y]))
backward(loss)
print(f"initial loss {float(loss.data):.3f}, |dL/dW0| = {np.linalg.norm(net.params[0].weights.grad):.3f}")
for p in net.parameters():
    p.zero_grad()

cfg = TrainConfig(epochs=10, lr=0.05, warmup_epochs=1, milestones=[6, 8])
train(net, ds.x_train, ds.y_train, cfg, stream(0, "data-order"))
print(f"test accuracy after {cfg.epochs} epochs: {N.accuracy(net, ds.x_test, ds.y_test):.3f}")

errors, ok = run_gradcheck(cases_per_kind=5)
print("gradcheck", "passed" if ok else "FAILED", {k: f"{max(v):.1e}" for k, v in errors.items()})
