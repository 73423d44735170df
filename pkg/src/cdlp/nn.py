"""From-scratch CNN forward pass.

Every kernel fixes its accumulation order so that computing a layer in
pieces (neuron subsets, filter subsets, branch groups, streamed input
chunks) is bitwise identical to computing it whole:

* connected: each output neuron sums w[j][i] * a[i] for i ascending, then
  adds the bias, then applies the activation;
* convolutional: each output pixel accumulates channel-major, then kernel
  row, then kernel column (the flat weight-row order).

The per-element float32 operations never get reassociated, which makes the
partitioned executor's outputs comparable to the reference with ==, not a
tolerance.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, RangeError
from .model import FLOAT, LayerSpec, LayerWeights, ModelSpec, Tensor, WeightStore, validate_weights

_ZERO = np.float32(0.0)


def _activate(values: np.ndarray, activation: str | None) -> np.ndarray:
    if activation == "relu":
        return np.maximum(values, _ZERO)
    return values


def _flat_input(x: Tensor, expected: int, where: str) -> np.ndarray:
    if x.size != expected:
        raise DimensionError(f"{where}: input has {x.size} values, expected {expected}")
    return x.data


def connected_forward_rows(
    x: Tensor,
    rows: LayerWeights,
    spec: LayerSpec,
    abs_start: int,
    total_rows: int,
    groups: int = 1,
) -> Tensor:
    """Connected-layer outputs for an already-sliced row range.

    ``rows`` holds the weights of neurons [abs_start, abs_start+len) of a
    layer with ``total_rows`` neurons in all; the absolute position only
    matters for branched layers, where it decides which input slice each
    neuron reads.
    """
    if spec.kind != "connected":
        raise DimensionError(f"connected kernel got a {spec.kind} layer")
    count, cols = rows.rows, rows.cols
    if abs_start < 0 or abs_start + count > total_rows:
        raise RangeError(f"subset [{abs_start}, {abs_start + count}) outside {total_rows} neurons")
    if total_rows % groups:
        raise DimensionError(f"{total_rows} neurons not divisible into {groups} groups")
    xf = _flat_input(x, cols * groups, "connected")

    acc = np.zeros(count, dtype=FLOAT)
    if groups == 1:
        for i in range(cols):
            acc += rows.weights[:, i] * xf[i]
    else:
        per_group = total_rows // groups
        for g in range(groups):
            lo = max(abs_start, g * per_group)
            hi = min(abs_start + count, (g + 1) * per_group)
            if lo >= hi:
                continue
            seg = slice(lo - abs_start, hi - abs_start)
            block = rows.weights[seg]
            base = g * cols
            for i in range(cols):
                acc[seg] += block[:, i] * xf[base + i]
    out = _activate(acc + rows.biases, spec.activation)
    return Tensor((count,), out)


def connected_forward_subset(
    x: Tensor,
    w: LayerWeights,
    spec: LayerSpec,
    start: int,
    count: int,
    groups: int = 1,
) -> Tensor:
    """Outputs for neurons [start, start+count) of a connected layer.

    Bitwise equal to the same slice of connected_forward. ``groups`` > 1
    means the layer is branched: row j reads only its group's input slice.
    """
    if start < 0 or count < 0 or start + count > w.rows:
        raise RangeError(f"subset [{start}, {start + count}) outside {w.rows} neurons")
    sliced = LayerWeights(w.weights[start : start + count], w.biases[start : start + count])
    return connected_forward_rows(x, sliced, spec, start, w.rows, groups)


def connected_forward(x: Tensor, w: LayerWeights, spec: LayerSpec, groups: int = 1) -> Tensor:
    """Full connected layer; see connected_forward_subset for the contract."""
    return connected_forward_subset(x, w, spec, 0, w.rows, groups)


class DenseAccumulator:
    """Ascending-order partial sums for a neuron subset fed input in chunks.

    Streaming the input in consecutive chunks reproduces, bit for bit, the
    resident computation: every neuron sees the same products in the same
    order. Used when a layer's input activations arrive from encrypted
    spill chunks instead of living in memory whole.
    """

    def __init__(self, w: LayerWeights, spec: LayerSpec, start: int, count: int, groups: int = 1):
        if start < 0 or count < 0 or start + count > w.rows:
            raise RangeError(f"subset [{start}, {start + count}) outside {w.rows} neurons")
        sliced = LayerWeights(w.weights[start : start + count], w.biases[start : start + count])
        self._init_rows(sliced, spec, start, w.rows, groups)

    @classmethod
    def from_rows(
        cls, rows: LayerWeights, spec: LayerSpec, abs_start: int, total_rows: int, groups: int = 1
    ) -> "DenseAccumulator":
        """Build from an already-sliced row range (see connected_forward_rows)."""
        self = cls.__new__(cls)
        self._init_rows(rows, spec, abs_start, total_rows, groups)
        return self

    def _init_rows(self, rows: LayerWeights, spec, abs_start, total_rows, groups):
        if spec.kind != "connected":
            raise DimensionError("streaming accumulation supports connected layers only")
        if abs_start < 0 or abs_start + rows.rows > total_rows:
            raise RangeError(
                f"subset [{abs_start}, {abs_start + rows.rows}) outside {total_rows} neurons"
            )
        self._rows = rows
        self._spec = spec
        self._abs_start = abs_start
        self._groups = groups
        self._per_group = total_rows // groups
        self._acc = np.zeros(rows.rows, dtype=FLOAT)
        self._next = 0
        self._total = rows.cols * groups

    def feed(self, values: np.ndarray, base: int) -> None:
        if base != self._next:
            raise DimensionError(f"chunk starts at {base}, expected {self._next}")
        if base + values.size > self._total:
            raise DimensionError("chunk runs past the layer input")
        w = self._rows.weights
        cols = self._rows.cols
        count = self._rows.rows
        if self._groups == 1:
            for off in range(values.size):
                self._acc += w[:, base + off] * values[off]
        else:
            for off in range(values.size):
                i = base + off
                g, col = divmod(i, cols)
                lo = max(self._abs_start, g * self._per_group)
                hi = min(self._abs_start + count, (g + 1) * self._per_group)
                if lo >= hi:
                    continue
                seg = slice(lo - self._abs_start, hi - self._abs_start)
                self._acc[seg] += w[seg, col] * values[off]
        self._next = base + values.size

    def finish(self) -> Tensor:
        if self._next != self._total:
            raise DimensionError(f"only {self._next} of {self._total} inputs streamed")
        out = _activate(self._acc + self._rows.biases, self._spec.activation)
        return Tensor((self._rows.rows,), out)


def conv_forward_subset(
    x: Tensor, w: LayerWeights, spec: LayerSpec, start: int, count: int
) -> Tensor:
    """Cross-correlation with zero padding for filters [start, start+count)."""
    if spec.kind != "convolutional":
        raise DimensionError(f"convolutional kernel got a {spec.kind} layer")
    if start < 0 or count < 0 or start + count > w.rows:
        raise RangeError(f"filter subset [{start}, {start + count}) outside {w.rows}")
    if len(x.dims) != 3:
        raise DimensionError(f"convolutional input must be 3-D, got dims {x.dims}")
    c, h, wd = x.dims
    k, s, p = spec.kernel_size, spec.stride, spec.padding
    if w.cols != c * k * k:
        raise DimensionError(f"weight rows of {w.cols} values, expected {c}*{k}*{k}")
    if h + 2 * p < k or wd + 2 * p < k:
        raise DimensionError(f"kernel {k} does not fit {h}x{wd} input with padding {p}")
    oh = (h + 2 * p - k) // s + 1
    ow = (wd + 2 * p - k) // s + 1

    padded = np.zeros((c, h + 2 * p, wd + 2 * p), dtype=FLOAT)
    padded[:, p : p + h, p : p + wd] = x.as_map()

    # acc[f, pos] accumulates over the flat (channel, ky, kx) column index,
    # which is exactly the weight-row order.
    acc = np.zeros((count, oh * ow), dtype=FLOAT)
    block = w.weights[start : start + count]
    col = 0
    for ci in range(c):
        for ky in range(k):
            for kx in range(k):
                patch = padded[ci, ky : ky + oh * s : s, kx : kx + ow * s : s]
                acc += block[:, col : col + 1] * patch.reshape(1, oh * ow)
                col += 1
    out = _activate(acc + w.biases[start : start + count, None], spec.activation)
    return Tensor((count, oh, ow), out.reshape(-1))


def conv_forward(x: Tensor, w: LayerWeights, spec: LayerSpec) -> Tensor:
    return conv_forward_subset(x, w, spec, 0, w.rows)


def maxpool_forward(x: Tensor, spec: LayerSpec) -> Tensor:
    """Per-window maximum; windows must tile the input exactly."""
    if spec.kind != "maxpool":
        raise DimensionError(f"maxpool kernel got a {spec.kind} layer")
    if len(x.dims) != 3:
        raise DimensionError(f"maxpool input must be 3-D, got dims {x.dims}")
    c, h, w = x.dims
    k, s = spec.size, spec.stride
    for side in (h, w):
        if side < k or (side - k) % s != 0:
            raise DimensionError(f"pool window {k} stride {s} does not divide {h}x{w} input")
    oh = (h - k) // s + 1
    ow = (w - k) // s + 1
    m = x.as_map()
    out = np.full((c, oh, ow), -np.inf, dtype=FLOAT)
    for ky in range(k):
        for kx in range(k):
            np.maximum(out, m[:, ky : ky + oh * s : s, kx : kx + ow * s : s], out=out)
    return Tensor((c, oh, ow), out.reshape(-1))


def softmax_forward(x: Tensor) -> Tensor:
    """Max-subtracted softmax over the flattened input; output sums to ~1."""
    if x.size == 0:
        raise DimensionError("softmax on an empty input")
    shifted = x.data - np.max(x.data)
    e = np.exp(shifted)
    return Tensor((x.size,), e / np.sum(e))


def layer_forward(
    model: ModelSpec, weights: WeightStore, layer_index: int, x: Tensor
) -> Tensor:
    """Apply layer ``layer_index`` whole, honoring the branch topology."""
    layer = model.layers[layer_index]
    if layer.kind == "connected":
        return connected_forward(
            x, weights.layers[layer_index], layer, model.branch_groups(layer_index)
        )
    if layer.kind == "convolutional":
        return conv_forward(x, weights.layers[layer_index], layer)
    if layer.kind == "maxpool":
        return maxpool_forward(x, layer)
    return softmax_forward(x)


def reference_forward(model: ModelSpec, weights: WeightStore, x: Tensor) -> Tensor:
    """Sequential whole-layer forward pass.

    The equivalence oracle for every partitioned execution: those must
    reproduce this output bitwise.
    """
    validate_weights(model, weights)
    if model.layers and x.dims != model.input_dims:
        raise DimensionError(f"input dims {x.dims} do not match model {model.input_dims}")
    for i in range(len(model.layers)):
        x = layer_forward(model, weights, i, x)
    return x
