"""Binary weights file and per-partition weight blobs.

File layout, all little-endian:

    header   4 x u32: version triple (0, 2, 0) and an images-seen counter (0)
    per layer, in layer order, weightless layers contributing nothing:
        biases   rows x float32
        weights  rows x cols x float32, row-major

A partition blob is the same biases-then-weights layout restricted to the
partition's row range, with no header, so the blobs of one layer are a
disjoint exact cover of its section in the file.
"""

from __future__ import annotations

import struct
from typing import Mapping

import numpy as np

from .errors import DimensionError, FormatError
from .model import FLOAT, FLOAT_BYTES, LayerWeights, ModelSpec, WeightStore, validate_weights

_HEADER = struct.Struct("<4I")
HEADER_BYTES = _HEADER.size
_VERSION = (0, 2, 0)


def serialize_weights(store: WeightStore) -> bytes:
    out = [_HEADER.pack(*_VERSION, 0)]
    for lw in store.layers:
        if lw is None:
            continue
        out.append(lw.biases.astype(FLOAT, copy=False).tobytes())
        out.append(lw.weights.astype(FLOAT, copy=False).tobytes())
    return b"".join(out)


def load_weights(data: bytes, model: ModelSpec) -> WeightStore:
    """Parse a weights file against the model's layer shapes.

    Round-trips serialize_weights bitwise; truncation or trailing bytes
    raise FormatError.
    """
    if len(data) < HEADER_BYTES:
        raise FormatError(f"weights file of {len(data)} bytes has no header")
    major, minor, patch, _seen = _HEADER.unpack_from(data)
    if (major, minor, patch) != _VERSION:
        raise FormatError(f"unsupported weights version {major}.{minor}.{patch}")
    offset = HEADER_BYTES
    layers: list[LayerWeights | None] = []
    for i in range(len(model.layers)):
        shape = model.param_shape(i)
        if shape is None:
            layers.append(None)
            continue
        rows, cols = shape
        need = FLOAT_BYTES * rows * (1 + cols)
        if offset + need > len(data):
            raise FormatError(
                f"weights file truncated in layer {i}: need {need} bytes at offset {offset}"
            )
        biases = np.frombuffer(data, FLOAT, count=rows, offset=offset).copy()
        offset += FLOAT_BYTES * rows
        weights = (
            np.frombuffer(data, FLOAT, count=rows * cols, offset=offset)
            .reshape(rows, cols)
            .copy()
        )
        offset += FLOAT_BYTES * rows * cols
        layers.append(LayerWeights(weights, biases))
    if offset != len(data):
        raise FormatError(f"{len(data) - offset} trailing bytes after the last layer")
    store = WeightStore(layers)
    validate_weights(model, store)
    return store


def layer_blob(store: WeightStore, layer_index: int, start: int, end: int) -> bytes:
    """Serialized biases+weights for rows [start, end) of one layer."""
    lw = store.layers[layer_index]
    if lw is None:
        return b""
    if not 0 <= start <= end <= lw.rows:
        raise DimensionError(f"rows [{start}, {end}) outside layer of {lw.rows} rows")
    return lw.biases[start:end].tobytes() + lw.weights[start:end].tobytes()


def split_weights(store: WeightStore, plan) -> list[bytes]:
    """One blob per plan partition, in plan order.

    Together the blobs of a layer cover its rows exactly once, so the
    full store can be reassembled from them (see merge_blobs).
    """
    return [layer_blob(store, p.layer_index, p.start, p.end) for p in plan.partitions]


def partition_weights(
    model: ModelSpec, layer_index: int, start: int, end: int, blob: bytes
) -> LayerWeights:
    """Parse a partition blob back into the row slice it serializes."""
    shape = model.param_shape(layer_index)
    if shape is None:
        raise DimensionError(f"layer {layer_index} takes no weights")
    rows = end - start
    cols = shape[1]
    expect = FLOAT_BYTES * rows * (1 + cols)
    if len(blob) != expect:
        raise FormatError(
            f"partition blob of {len(blob)} bytes, expected {expect} "
            f"for {rows} rows of layer {layer_index}"
        )
    biases = np.frombuffer(blob, FLOAT, count=rows).copy()
    weights = (
        np.frombuffer(blob, FLOAT, count=rows * cols, offset=FLOAT_BYTES * rows)
        .reshape(rows, cols)
        .copy()
    )
    return LayerWeights(weights, biases)


def merge_blobs(model: ModelSpec, plan, blobs: Mapping[int, bytes]) -> WeightStore:
    """Reassemble a full WeightStore from per-partition blobs (id -> blob)."""
    layers: list[LayerWeights | None] = []
    for i in range(len(model.layers)):
        shape = model.param_shape(i)
        if shape is None:
            layers.append(None)
        else:
            layers.append(
                LayerWeights(np.zeros(shape, FLOAT), np.zeros(shape[0], FLOAT))
            )
    for p in plan.partitions:
        if not model.is_parameterized(p.layer_index):
            continue
        lw = partition_weights(model, p.layer_index, p.start, p.end, blobs[p.id])
        target = layers[p.layer_index]
        target.biases[p.start : p.end] = lw.biases
        target.weights[p.start : p.end] = lw.weights
    return WeightStore(layers)
