"""Shared helpers: seeded model/weight generators for the test suite."""

from __future__ import annotations

import math

import numpy as np

from cdlp.model import BranchTopology, LayerSpec, LayerWeights, ModelSpec, Tensor, WeightStore


def random_tensor(rng: np.random.Generator, dims) -> Tensor:
    return Tensor(tuple(dims), rng.standard_normal(math.prod(dims)).astype(np.float32))


def random_weight_store(model: ModelSpec, rng: np.random.Generator) -> WeightStore:
    layers = []
    for i in range(len(model.layers)):
        shape = model.param_shape(i)
        if shape is None:
            layers.append(None)
            continue
        layers.append(
            LayerWeights(
                (rng.standard_normal(shape) * 0.5).astype(np.float32),
                (rng.standard_normal(shape[0]) * 0.5).astype(np.float32),
            )
        )
    return WeightStore(layers)


def random_model(rng: np.random.Generator) -> ModelSpec:
    """Small branched model: optional conv/pool prefix, connected tail.

    Bounded to 6 layers and 64 output units per layer; every connected
    size is a multiple of the branch count so all three partitioning
    schemes apply to the same model.
    """
    k = int(rng.choice([2, 4]))
    channels = int(rng.choice([1, 2]))
    side = int(rng.choice([4, 6, 8]))
    layers: list[LayerSpec] = []
    dims = (channels, side, side)

    for _ in range(int(rng.integers(0, 3))):
        if len(layers) >= 4:
            break
        c, h, w = dims
        options = []
        max_filters = min(4, 64 // (h * w)) if h * w <= 64 else 0
        if max_filters >= 1 and h >= 3 and w >= 3:
            options.append("conv")
        if h >= 4 and h % 2 == 0 and w % 2 == 0:
            options.append("pool")
        if not options:
            break
        pick = options[int(rng.integers(len(options)))]
        if pick == "conv":
            f = int(rng.integers(1, max_filters + 1))
            layers.append(LayerSpec.convolutional(f, 3, 1, 1, activation="relu"))
            dims = (f, h, w)
        else:
            layers.append(LayerSpec.maxpool(2, 2))
            dims = (c, h // 2, w // 2)

    def connected_size() -> int:
        return int(rng.integers(1, 64 // k + 1)) * k

    def activation() -> str:
        return str(rng.choice(["relu", "linear"]))

    layers.append(LayerSpec.connected(connected_size(), activation()))
    branch_at = len(layers)
    for _ in range(int(rng.integers(1, min(3, 6 - len(layers)) + 1))):
        layers.append(LayerSpec.connected(connected_size(), activation()))
    return ModelSpec(layers, (channels, side, side), BranchTopology(branch_at, k))


def random_case(seed: int) -> tuple[ModelSpec, WeightStore, Tensor]:
    rng = np.random.default_rng(seed)
    model = random_model(rng)
    return model, random_weight_store(model, rng), random_tensor(rng, model.input_dims)
