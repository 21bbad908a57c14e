"""Layer stacks whose weight tensors carry binary prune masks.

Dense weights are stored ``[fan_in, fan_out]`` and conv kernels
``[out_ch, in_ch, k, k]``; an "output unit" is a dense column or a conv
filter. Biases are never pruned and never counted in the prune ratio, but a
unit removed with per-output-unit granularity has its bias gated off too,
so it behaves exactly like a physically removed unit.
"""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T

PER_WEIGHT = "per-weight"
PER_UNIT = "per-output-unit"

MAGIC = b"PLAB"
VERSION = 1

_KIND_CODES = {"dense": 0, "conv2d": 1, "relu": 2, "flatten": 3}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}
_PAD_CODES = {"same": 0, "valid": 1}
_PAD_NAMES = {v: k for k, v in _PAD_CODES.items()}
_GRAN_CODES = {PER_WEIGHT: 0, PER_UNIT: 1}
_GRAN_NAMES = {v: k for k, v in _GRAN_CODES.items()}


class CheckpointError(ValueError):
    """Checkpoint bytes are malformed, truncated, or from another version."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    n_in: int = 0
    n_out: int = 0
    kernel: int = 0
    padding: str = "same"

    @classmethod
    def dense(cls, fan_in, fan_out):
        return cls("dense", fan_in, fan_out)

    @classmethod
    def conv2d(cls, in_channels, out_channels, kernel, padding="same"):
        return cls("conv2d", in_channels, out_channels, kernel, padding)

    @classmethod
    def relu(cls):
        return cls("relu")

    @classmethod
    def flatten(cls):
        return cls("flatten")

    @property
    def has_params(self):
        return self.kind in ("dense", "conv2d")

    def weight_shape(self):
        if self.kind == "dense":
            return (self.n_in, self.n_out)
        return (self.n_out, self.n_in, self.kernel, self.kernel)

    def out_shape(self, in_shape):
        """Per-sample output shape, or ShapeError if the layer cannot consume ``in_shape``."""
        if self.kind == "dense":
            if len(in_shape) != 1 or in_shape[0] != self.n_in:
                raise T.ShapeError(f"dense expects ({self.n_in},), got {tuple(in_shape)}")
            return (self.n_out,)
        if self.kind == "conv2d":
            if len(in_shape) != 3 or in_shape[0] != self.n_in:
                raise T.ShapeError(f"conv2d expects ({self.n_in}, H, W), got {tuple(in_shape)}")
            _, h, w = in_shape
            if self.padding == "same":
                return (self.n_out, h, w)
            return (self.n_out, h - self.kernel + 1, w - self.kernel + 1)
        if self.kind == "flatten":
            return (int(np.prod(in_shape)),)
        return tuple(in_shape)


@dataclass
class MaskedParameter:
    weights: T.Tensor
    mask: np.ndarray
    bias: T.Tensor
    granularity: str = PER_WEIGHT
    unit_axis: int = 0

    @property
    def n_units(self):
        return self.weights.shape[self.unit_axis]

    def unit_rows(self, a=None):
        """View of ``a`` (default: weights) as [n_units, weights_per_unit]."""
        a = self.weights.data if a is None else a
        return np.moveaxis(a, self.unit_axis, 0).reshape(self.n_units, -1)

    def unit_mask(self):
        """1.0 for units with any surviving weight."""
        return self.unit_rows(self.mask).any(axis=1).astype(np.float64)

    def set_unit_mask(self, keep):
        keep = np.asarray(keep, dtype=np.float64)
        shape = [1] * self.mask.ndim
        shape[self.unit_axis] = -1
        self.mask = self.mask * keep.reshape(shape)
        self.apply_mask()

    def apply_mask(self):
        self.weights.data *= self.mask
        if self.granularity == PER_UNIT:
            self.bias.data *= self.unit_mask()

    def effective_bias(self):
        if self.granularity == PER_UNIT:
            return self.bias.data * self.unit_mask()
        return self.bias.data


class MaskedNetwork:
    def __init__(self, specs, input_shape, classes, params, seed=0):
        self.specs = list(specs)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.classes = int(classes)
        self.params = list(params)
        self.seed = int(seed)
        self.shapes = self._check_shapes()

    @classmethod
    def build(cls, specs, input_shape, classes, seed=0):
        """Kaiming-uniform weights (fan-in scaling), zero biases, all-ones masks."""
        rng = np.random.default_rng([seed, 0x1A17])
        params = []
        for spec in specs:
            if not spec.has_params:
                continue
            shape = spec.weight_shape()
            fan_in = spec.n_in if spec.kind == "dense" else spec.n_in * spec.kernel**2
            bound = np.sqrt(6.0 / fan_in)
            w = T.Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
            b = T.Tensor(np.zeros(spec.n_out), requires_grad=True)
            params.append(
                MaskedParameter(w, np.ones(shape), b, PER_WEIGHT, 1 if spec.kind == "dense" else 0)
            )
        return cls(specs, input_shape, classes, params, seed)

    def _check_shapes(self):
        shape = self.input_shape
        shapes = [shape]
        for spec in self.specs:
            shape = spec.out_shape(shape)
            shapes.append(shape)
        if shape != (self.classes,):
            raise T.ShapeError(f"network output {shape} does not match {self.classes} classes")
        if sum(s.has_params for s in self.specs) != len(self.params):
            raise T.ShapeError("parameter count does not match layer specs")
        return shapes

    @property
    def param_layers(self):
        return [i for i, s in enumerate(self.specs) if s.has_params]

    def clone(self):
        return copy.deepcopy(self)

    def parameters(self):
        out = []
        for p in self.params:
            out += [p.weights, p.bias]
        return out

    def masks(self):
        """Masks aligned with ``parameters()``; bias masks gate removed units."""
        out = []
        for p in self.params:
            out += [p.mask, p.unit_mask() if p.granularity == PER_UNIT else None]
        return out

    def forward(self, x, record=None):
        """Logits for batch ``x``. Builds a graph only when grad tracking is on.

        ``record``, if a list, receives the input array of each parameterized layer.
        """
        h = x if isinstance(x, T.Tensor) else T.Tensor(x)
        if tuple(h.shape[1:]) != self.input_shape:
            raise T.ShapeError(f"batch shape {h.shape[1:]} does not match network input {self.input_shape}")
        it = iter(self.params)
        for spec in self.specs:
            if spec.has_params:
                p = next(it)
                if record is not None:
                    record.append(h.data)
                w = T.mul(p.weights, T.Tensor(p.mask))
                b = p.bias
                if p.granularity == PER_UNIT:
                    b = T.mul(b, T.Tensor(p.unit_mask()))
                if spec.kind == "dense":
                    h = T.add_bias(T.matmul(h, w), b)
                else:
                    h = T.add_bias(T.conv2d(h, w, spec.padding), b)
            elif spec.kind == "relu":
                h = T.relu(h)
            else:
                h = T.flatten(h)
        return h

    def predict_proba(self, x, batch_size=2048):
        with T.no_grad():
            out = [
                T._softmax(self.forward(x[i : i + batch_size]).data) for i in range(0, len(x), batch_size)
            ]
        return np.concatenate(out) if out else np.zeros((0, self.classes))

    def logits(self, x, batch_size=2048):
        with T.no_grad():
            out = [self.forward(x[i : i + batch_size]).data for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.classes))

    def fanin_groups(self, layer):
        """For param layer ``layer`` (index into params), the input indices of the next
        param layer fed by each unit: array [n_units, group]. Dense consumers index
        flat input features, conv consumers index input channels."""
        pl = self.param_layers
        if layer + 1 >= len(pl):
            return None
        here, nxt = pl[layer], pl[layer + 1]
        units = self.params[layer].n_units
        if self.specs[nxt].kind == "conv2d":
            return np.arange(units).reshape(units, 1)
        out_shape = self.shapes[here + 1]
        per_unit = int(np.prod(out_shape[1:])) if len(out_shape) > 1 else 1
        return np.arange(units * per_unit).reshape(units, per_unit)


# ---------------------------------------------------------------- queries


def forward(net, batch):
    return net.forward(batch)


def accuracy(net, x, y):
    """Fraction of argmax(logits) == label; ties go to the lowest class index."""
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    if y.min() < 0 or y.max() >= net.classes:
        raise ValueError(f"labels must lie in [0, {net.classes})")
    pred = np.argmax(net.logits(x), axis=1)
    return float(np.mean(pred == y))


def prune_ratio(net):
    kept = sum(float(p.mask.sum()) for p in net.params)
    total = sum(p.mask.size for p in net.params)
    return 1.0 - kept / total


def _macs(net, masked):
    total = 0.0
    for li, p in enumerate(net.params):
        spec = net.specs[net.param_layers[li]]
        m = p.mask if masked else np.ones_like(p.mask)
        if masked and li > 0:
            prev = net.params[li - 1]
            if prev.granularity == PER_UNIT:
                alive = np.ones(spec.n_in)
                groups = net.fanin_groups(li - 1)
                for j, g in enumerate(groups):
                    if not prev.unit_mask()[j]:
                        alive[g] = 0.0
                if spec.kind == "dense":
                    m = m * alive[:, None]
                else:
                    m = m * alive[None, :, None, None]
        positions = 1
        if spec.kind == "conv2d":
            out = net.shapes[net.param_layers[li] + 1]
            positions = out[1] * out[2]
        total += float(m.sum()) * positions
    return total


def flop_reduction(net):
    """1 - MACs(masked) / MACs(dense). Removed units also drop the next layer's fan-in."""
    return 1.0 - _macs(net, True) / _macs(net, False)


# ---------------------------------------------------------------- checkpoints


def to_bytes(net):
    out = bytearray()
    out += MAGIC
    out += struct.pack("<Iq", VERSION, net.seed)
    out += struct.pack("<II", net.classes, len(net.input_shape))
    out += struct.pack(f"<{len(net.input_shape)}I", *net.input_shape)
    out += struct.pack("<I", len(net.specs))
    for s in net.specs:
        out += struct.pack("<BBIII", _KIND_CODES[s.kind], _PAD_CODES[s.padding], s.n_in, s.n_out, s.kernel)
    for p in net.params:
        out += struct.pack("<B", _GRAN_CODES[p.granularity])
        out += p.weights.data.astype("<f8").tobytes()
        out += np.packbits(p.mask.ravel().astype(np.uint8), bitorder="little").tobytes()
        out += p.bias.data.astype("<f8").tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos}")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(buf):
    r = _Reader(bytes(buf))
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, seed = r.unpack("<Iq")
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {VERSION})")
    classes, ndim = r.unpack("<II")
    input_shape = r.unpack(f"<{ndim}I")
    (n_layers,) = r.unpack("<I")
    specs = []
    for _ in range(n_layers):
        kind, pad, n_in, n_out, kernel = r.unpack("<BBIII")
        if kind not in _KIND_NAMES or pad not in _PAD_NAMES:
            raise CheckpointError("corrupted layer table")
        specs.append(LayerSpec(_KIND_NAMES[kind], n_in, n_out, kernel, _PAD_NAMES[pad]))
    params = []
    for s in specs:
        if not s.has_params:
            continue
        (gran,) = r.unpack("<B")
        if gran not in _GRAN_NAMES:
            raise CheckpointError("corrupted granularity tag")
        shape = s.weight_shape()
        size = int(np.prod(shape))
        w = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        bits = np.frombuffer(r.take((size + 7) // 8), dtype=np.uint8)
        mask = np.unpackbits(bits, count=size, bitorder="little").reshape(shape).astype(np.float64)
        b = np.frombuffer(r.take(8 * s.n_out), dtype="<f8").astype(np.float64)
        params.append(
            MaskedParameter(
                T.Tensor(w, requires_grad=True),
                mask,
                T.Tensor(b, requires_grad=True),
                _GRAN_NAMES[gran],
                1 if s.kind == "dense" else 0,
            )
        )
    if r.pos != len(r.buf):
        raise CheckpointError(f"checkpoint has {len(r.buf) - r.pos} trailing bytes")
    try:
        return MaskedNetwork(specs, input_shape, classes, params, seed)
    except T.ShapeError as e:
        raise CheckpointError(f"inconsistent layer table: {e}") from None


def save_checkpoint(net, path):
    Path(path).write_bytes(to_bytes(net))


def load_checkpoint(path):
    return from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------- stock architectures


def desk_cnn(input_shape=(1, 8, 8), classes=4, channels=8, hidden=16, seed=0):
    """conv3x3 -> relu -> flatten -> dense -> relu -> dense."""
    c, h, w = input_shape
    specs = [
        LayerSpec.conv2d(c, channels, 3),
        LayerSpec.relu(),
        LayerSpec.flatten(),
        LayerSpec.dense(channels * h * w, hidden),
        LayerSpec.relu(),
        LayerSpec.dense(hidden, classes),
    ]
    return MaskedNetwork.build(specs, input_shape, classes, seed)


def mlp(sizes, seed=0):
    specs = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        specs.append(LayerSpec.dense(a, b))
        if i < len(sizes) - 2:
            specs.append(LayerSpec.relu())
    return MaskedNetwork.build(specs, (sizes[0],), sizes[-1], seed)
