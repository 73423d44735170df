"""Domain types: tensors, layer descriptors, network specs, weight stores."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError

LAYER_KINDS = ("convolutional", "maxpool", "connected", "softmax")
ACTIVATIONS = ("linear", "relu")

FLOAT = np.dtype("<f4")
FLOAT_BYTES = 4


@dataclass
class Tensor:
    """Flat row-major float32 buffer with a shape attached.

    ``dims`` is either (channels, height, width) for feature maps or a
    single flat length for vectors. ``data`` always stays 1-D float32.
    """

    dims: tuple[int, ...]
    data: np.ndarray

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if any(d < 0 for d in self.dims) or not self.dims:
            raise DimensionError(f"bad tensor dims {self.dims}")
        arr = np.ascontiguousarray(self.data, dtype=FLOAT).reshape(-1)
        if arr.size != math.prod(self.dims):
            raise DimensionError(
                f"tensor dims {self.dims} need {math.prod(self.dims)} values, got {arr.size}"
            )
        self.data = arr

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "Tensor":
        arr = np.asarray(arr)
        return cls(arr.shape if arr.ndim else (1,), arr.reshape(-1))

    @property
    def size(self) -> int:
        return self.data.size

    def as_map(self) -> np.ndarray:
        """View as (channels, height, width); requires 3-D dims."""
        if len(self.dims) != 3:
            raise DimensionError(f"expected 3-D tensor, got dims {self.dims}")
        return self.data.reshape(self.dims)

    def tobytes(self) -> bytes:
        return self.data.tobytes()


@dataclass
class LayerSpec:
    """One layer of the network; the meaningful fields depend on ``kind``."""

    kind: str
    filters: int | None = None
    kernel_size: int | None = None
    stride: int | None = None
    padding: int | None = None
    activation: str | None = None
    size: int | None = None
    outputs: int | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise DimensionError(f"unknown layer kind {self.kind!r}")
        if self.kind == "convolutional":
            self._require(filters=self.filters, kernel_size=self.kernel_size, stride=self.stride)
            if self.padding is None or self.padding < 0:
                raise DimensionError("convolutional padding must be >= 0")
            self._check_activation()
        elif self.kind == "maxpool":
            self._require(size=self.size, stride=self.stride)
        elif self.kind == "connected":
            self._require(outputs=self.outputs)
            self._check_activation()

    def _require(self, **params):
        for name, value in params.items():
            if value is None or value < 1:
                raise DimensionError(f"{self.kind} {name} must be >= 1, got {value}")

    def _check_activation(self):
        if self.activation not in ACTIVATIONS:
            raise DimensionError(
                f"{self.kind} activation must be one of {ACTIVATIONS}, got {self.activation!r}"
            )

    @classmethod
    def convolutional(cls, filters, kernel_size, stride=1, padding=0, activation="linear"):
        return cls("convolutional", filters=filters, kernel_size=kernel_size,
                   stride=stride, padding=padding, activation=activation)

    @classmethod
    def maxpool(cls, size, stride):
        return cls("maxpool", size=size, stride=stride)

    @classmethod
    def connected(cls, outputs, activation="linear"):
        return cls("connected", outputs=outputs, activation=activation)

    @classmethod
    def softmax(cls):
        return cls("softmax")


@dataclass
class BranchTopology:
    """Split point after which connected layers form independent groups.

    Neuron i of group g connects only to previous-layer neurons of group g,
    so group weights are stored without the (nonexistent) cross-group rows.
    """

    branch_layer_index: int
    branch_count: int

    def __post_init__(self):
        if self.branch_layer_index < 0:
            raise DimensionError("branch layer index must be >= 0")
        if self.branch_count < 2:
            raise DimensionError(f"branch count must be >= 2, got {self.branch_count}")


@dataclass
class LayerWeights:
    """Row-major weight matrix plus bias vector for one layer.

    Rows are output neurons (connected) or filters (convolutional). For a
    branched connected layer the row length is the per-group input count.
    """

    weights: np.ndarray
    biases: np.ndarray

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=FLOAT)
        self.biases = np.ascontiguousarray(self.biases, dtype=FLOAT).reshape(-1)
        if self.weights.ndim != 2:
            raise DimensionError(f"weight matrix must be 2-D, got {self.weights.shape}")
        if self.biases.size != self.weights.shape[0]:
            raise DimensionError(
                f"{self.biases.size} biases for {self.weights.shape[0]} weight rows"
            )

    @property
    def rows(self) -> int:
        return self.weights.shape[0]

    @property
    def cols(self) -> int:
        return self.weights.shape[1]

    @property
    def value_count(self) -> int:
        return self.weights.size + self.biases.size


def output_dims(layer: LayerSpec, in_dims: tuple[int, ...]) -> tuple[int, ...]:
    """Output dims of ``layer`` applied to ``in_dims``; raises on bad geometry."""
    if layer.kind == "convolutional":
        if len(in_dims) != 3:
            raise DimensionError(f"convolutional layer needs a 3-D input, got {in_dims}")
        c, h, w = in_dims
        k, s, p = layer.kernel_size, layer.stride, layer.padding
        if h + 2 * p < k or w + 2 * p < k:
            raise DimensionError(f"kernel {k} does not fit {h}x{w} input with padding {p}")
        return (layer.filters, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)
    if layer.kind == "maxpool":
        if len(in_dims) != 3:
            raise DimensionError(f"maxpool layer needs a 3-D input, got {in_dims}")
        c, h, w = in_dims
        k, s = layer.size, layer.stride
        for side in (h, w):
            if side < k or (side - k) % s != 0:
                raise DimensionError(
                    f"pool window {k} stride {s} does not divide {h}x{w} input"
                )
        return (c, (h - k) // s + 1, (w - k) // s + 1)
    if layer.kind == "connected":
        return (layer.outputs,)
    # softmax flattens
    return (math.prod(in_dims),)


@dataclass
class ModelSpec:
    """Parsed network: ordered layers, input dims, optional branch topology.

    ``config_bytes`` records the byte length of the source configuration
    text (an input to the cost model); it does not affect equality.
    """

    layers: list[LayerSpec]
    input_dims: tuple[int, int, int]
    branch: BranchTopology | None = None
    config_bytes: int = field(default=0, compare=False)
    _shapes: list[tuple[tuple[int, ...], tuple[int, ...]]] = field(
        init=False, compare=False, repr=False
    )

    def __post_init__(self):
        self.input_dims = tuple(int(d) for d in self.input_dims)
        if len(self.input_dims) != 3 or any(d < 1 for d in self.input_dims):
            raise DimensionError(f"input dims must be 3 positive values, got {self.input_dims}")
        shapes = []
        dims: tuple[int, ...] = self.input_dims
        for layer in self.layers:
            out = output_dims(layer, dims)
            shapes.append((dims, out))
            dims = out
        self._shapes = shapes
        self._validate_branch()

    def _validate_branch(self):
        b = self.branch
        if b is None:
            return
        if b.branch_layer_index >= len(self.layers):
            raise DimensionError("branch point lies past the last layer")
        for j in range(b.branch_layer_index, len(self.layers)):
            layer = self.layers[j]
            if layer.kind != "connected":
                raise DimensionError(
                    f"layer {j} ({layer.kind}) after the branch point; "
                    "branched segments support connected layers only"
                )
            if self.in_elems(j) % b.branch_count or layer.outputs % b.branch_count:
                raise DimensionError(
                    f"layer {j} sizes {self.in_elems(j)}->{layer.outputs} "
                    f"not divisible by {b.branch_count} branches"
                )

    @property
    def shapes(self) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
        """Per layer (input dims, output dims)."""
        return self._shapes

    def in_dims(self, i: int) -> tuple[int, ...]:
        return self._shapes[i][0]

    def out_dims(self, i: int) -> tuple[int, ...]:
        return self._shapes[i][1]

    def in_elems(self, i: int) -> int:
        return math.prod(self._shapes[i][0])

    def out_elems(self, i: int) -> int:
        return math.prod(self._shapes[i][1])

    def branch_groups(self, i: int) -> int:
        """Independent groups in layer i: the branch count at/after the split, else 1."""
        if self.branch is not None and i >= self.branch.branch_layer_index:
            return self.branch.branch_count
        return 1

    def is_parameterized(self, i: int) -> bool:
        return self.layers[i].kind in ("convolutional", "connected")

    def units(self, i: int) -> int:
        """Partitionable output units: neurons, filters, or output elements."""
        layer = self.layers[i]
        if layer.kind == "connected":
            return layer.outputs
        if layer.kind == "convolutional":
            return layer.filters
        return self.out_elems(i)

    def param_shape(self, i: int) -> tuple[int, int] | None:
        """Weight matrix shape (rows, cols) for layer i, or None if weightless."""
        layer = self.layers[i]
        if layer.kind == "connected":
            return (layer.outputs, self.in_elems(i) // self.branch_groups(i))
        if layer.kind == "convolutional":
            in_c = self.in_dims(i)[0]
            return (layer.filters, in_c * layer.kernel_size * layer.kernel_size)
        return None

    def output_units_per_row(self, i: int) -> int:
        """Output elements produced per unit: 1 for neurons, map size for filters."""
        layer = self.layers[i]
        if layer.kind == "convolutional":
            _, oh, ow = self.out_dims(i)
            return oh * ow
        return 1


@dataclass
class WeightStore:
    """Per-layer weights in layer order; None for weightless layers."""

    layers: list[LayerWeights | None]

    @property
    def total_bytes(self) -> int:
        """Exact byte length of the serialized weights file."""
        from .weights import HEADER_BYTES  # local import avoids a cycle

        return HEADER_BYTES + FLOAT_BYTES * sum(
            lw.value_count for lw in self.layers if lw is not None
        )


def validate_weights(model: ModelSpec, store: WeightStore) -> None:
    """Raise DimensionError unless the store's shapes match the model."""
    if len(store.layers) != len(model.layers):
        raise DimensionError(
            f"weight store has {len(store.layers)} layers, model has {len(model.layers)}"
        )
    for i in range(len(model.layers)):
        expected = model.param_shape(i)
        lw = store.layers[i]
        if expected is None:
            if lw is not None:
                raise DimensionError(f"layer {i} ({model.layers[i].kind}) takes no weights")
            continue
        if lw is None:
            raise DimensionError(f"layer {i} is missing weights")
        if lw.weights.shape != expected:
            raise DimensionError(
                f"layer {i} weight shape {lw.weights.shape}, expected {expected}"
            )
