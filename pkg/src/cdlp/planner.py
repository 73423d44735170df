"""Partition planning: layered, sub-layer, and branched schemes.

Footprints are estimated peak secure-world bytes for executing one
partition, at 4 bytes per float:

* whole layer: inputs + outputs + weights + biases;
* neuron/filter subset of size s: inputs + s weight rows + s biases +
  the subset's own outputs;
* branch partition: the per-branch slice of all four terms.

A layer whose input activations cannot sit in the arena even for a
single-neuron subset gets its spill flag set: the producer encrypts the
activations into shared memory and every subset streams them back in,
one chunk at a time.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from typing import Mapping

from .errors import LayerTooLargeError, PlanError, PlanInfeasibleError
from .model import FLOAT_BYTES, ModelSpec

SCHEME_LAYERED = "layered"
SCHEME_SUBLAYER = "sublayer"
SCHEME_BRANCHED = "branched"
SCHEMES = (SCHEME_LAYERED, SCHEME_SUBLAYER, SCHEME_BRANCHED)

WORLD_SECURE = "secure"
WORLD_NORMAL = "normal"

DEFAULT_SPILL_CHUNK_BYTES = 4096


@dataclass(frozen=True)
class Partition:
    """One executable unit: a row range of one layer, bound to a world."""

    id: int
    layer_index: int
    start: int
    end: int
    world: str
    footprint_bytes: int
    encrypted: bool


@dataclass(frozen=True)
class SubsetParams:
    subset_size: int
    subset_count: int


@dataclass
class PartitionPlan:
    scheme: str
    partitions: list[Partition]
    sublayer: dict[int, SubsetParams] = field(default_factory=dict)
    spill: frozenset[int] = field(default_factory=frozenset)

    def with_spill(self, *layer_indices: int) -> "PartitionPlan":
        """Copy of the plan with extra layers marked for activation spill."""
        return replace(self, spill=self.spill | frozenset(layer_indices))

    def secure_partitions(self) -> list[Partition]:
        return [p for p in self.partitions if p.world == WORLD_SECURE]


def estimate_layer_footprint(model: ModelSpec, layer_index: int) -> int:
    """Bytes to run the whole layer: in + out activations, weights, biases."""
    in_e = model.in_elems(layer_index)
    out_e = model.out_elems(layer_index)
    shape = model.param_shape(layer_index)
    params = shape[0] * shape[1] + shape[0] if shape else 0
    return FLOAT_BYTES * (in_e + out_e + params)


def _subset_footprint(model: ModelSpec, layer_index: int, subset_size: int) -> int:
    cols = model.param_shape(layer_index)[1]
    per_unit_out = model.output_units_per_row(layer_index)
    return FLOAT_BYTES * (
        model.in_elems(layer_index) + subset_size * (cols + 1 + per_unit_out)
    )


def _spilled_subset_footprint(
    model: ModelSpec, layer_index: int, subset_size: int, chunk_bytes: int
) -> int:
    cols = model.param_shape(layer_index)[1]
    per_unit_out = model.output_units_per_row(layer_index)
    return chunk_bytes + FLOAT_BYTES * subset_size * (cols + 1 + per_unit_out)


def plan_layered(model: ModelSpec, cap: int) -> PartitionPlan:
    """One secure, encrypted partition per layer, in layer order."""
    _check_cap(cap)
    partitions = []
    for i in range(len(model.layers)):
        footprint = estimate_layer_footprint(model, i)
        if footprint > cap:
            raise LayerTooLargeError(
                f"layer {i} ({model.layers[i].kind}) needs {footprint} bytes, "
                f"budget is {cap}"
            )
        partitions.append(
            Partition(i, i, 0, model.units(i), WORLD_SECURE, footprint, True)
        )
    return PartitionPlan(SCHEME_LAYERED, partitions)


def plan_sublayer(
    model: ModelSpec,
    cap: int,
    subset_size: int | Mapping[int, int] | None = None,
    chunk_bytes: int = DEFAULT_SPILL_CHUNK_BYTES,
) -> PartitionPlan:
    """Split oversized layers into contiguous subsets that fit the budget.

    With ``subset_size`` unset, the planner keeps fitting layers whole and
    picks the largest subset for the rest (fewest partitions, hence fewest
    context switches). An explicit size (one int, or a per-layer mapping)
    overrides the choice; degenerate full-size subsets reproduce the
    layered plan exactly.
    """
    _check_cap(cap)
    spill = _spill_layers(model, cap, chunk_bytes)
    partitions: list[Partition] = []
    sublayer: dict[int, SubsetParams] = {}
    next_id = 0
    for i in range(len(model.layers)):
        units = model.units(i)
        if not model.is_parameterized(i):
            footprint = estimate_layer_footprint(model, i)
            if footprint > cap:
                raise PlanInfeasibleError(
                    f"layer {i} ({model.layers[i].kind}) activations alone need "
                    f"{footprint} bytes, budget is {cap}"
                )
            partitions.append(Partition(next_id, i, 0, units, WORLD_SECURE, footprint, True))
            next_id += 1
            continue

        wanted = _requested_subset(subset_size, i)
        if wanted is not None:
            if not 1 <= wanted <= units:
                raise PlanError(
                    f"subset size {wanted} outside [1, {units}] for layer {i}"
                )
            size = wanted
        elif estimate_layer_footprint(model, i) <= cap:
            size = units
        else:
            size = _auto_subset_size(model, i, cap, chunk_bytes, spilled=i in spill)

        count = math.ceil(units / size)
        sublayer[i] = SubsetParams(size, count)
        for start in range(0, units, size):
            end = min(start + size, units)
            if i in spill:
                footprint = _spilled_subset_footprint(model, i, end - start, chunk_bytes)
            elif count == 1:
                footprint = estimate_layer_footprint(model, i)
            else:
                footprint = _subset_footprint(model, i, end - start)
            partitions.append(Partition(next_id, i, start, end, WORLD_SECURE, footprint, True))
            next_id += 1
    return PartitionPlan(SCHEME_SUBLAYER, partitions, sublayer, frozenset(spill))


def plan_branched(model: ModelSpec, cap: int) -> PartitionPlan:
    """Unbranched prefix in the normal world, one secure partition per branch.

    The early layers run with plaintext weights outside the arena; every
    layer at or after the branch point becomes k encrypted partitions, one
    per mutually independent group.
    """
    _check_cap(cap)
    if model.branch is None:
        raise PlanError("model has no branch topology")
    k = model.branch.branch_count
    split = model.branch.branch_layer_index
    partitions: list[Partition] = []
    next_id = 0
    for i in range(split):
        partitions.append(
            Partition(
                next_id, i, 0, model.units(i), WORLD_NORMAL,
                estimate_layer_footprint(model, i), False,
            )
        )
        next_id += 1
    for i in range(split, len(model.layers)):
        per_branch_in = model.in_elems(i) // k
        per_branch_out = model.units(i) // k
        footprint = FLOAT_BYTES * (
            per_branch_in + per_branch_in * per_branch_out + 2 * per_branch_out
        )
        if footprint > cap:
            raise LayerTooLargeError(
                f"layer {i} branch partition needs {footprint} bytes, budget is {cap}"
            )
        for g in range(k):
            partitions.append(
                Partition(
                    next_id, i, g * per_branch_out, (g + 1) * per_branch_out,
                    WORLD_SECURE, footprint, True,
                )
            )
            next_id += 1
    return PartitionPlan(SCHEME_BRANCHED, partitions)


def validate_plan(plan: PartitionPlan, model: ModelSpec, cap: int | None) -> list[str]:
    """All violations (not just the first); empty list means the plan is sound."""
    problems: list[str] = []
    if plan.scheme not in SCHEMES:
        problems.append(f"unknown scheme {plan.scheme!r}")
    ids = [p.id for p in plan.partitions]
    if len(set(ids)) != len(ids):
        problems.append("duplicate partition ids")

    by_layer: dict[int, list[Partition]] = {}
    previous_layer = 0
    seen_secure = False
    for p in plan.partitions:
        if p.layer_index < previous_layer:
            problems.append(f"partition {p.id} breaks layer execution order")
        previous_layer = max(previous_layer, p.layer_index)
        if not 0 <= p.layer_index < len(model.layers):
            problems.append(f"partition {p.id} names layer {p.layer_index} of {len(model.layers)}")
            continue
        if p.world == WORLD_SECURE:
            seen_secure = True
            if not p.encrypted:
                problems.append(f"partition {p.id} is secure but not encrypted")
            if cap is not None and p.footprint_bytes > cap:
                problems.append(
                    f"partition {p.id} footprint {p.footprint_bytes} exceeds budget {cap}"
                )
        elif p.world == WORLD_NORMAL:
            if p.encrypted:
                problems.append(f"partition {p.id} is normal-world but encrypted")
            if seen_secure:
                problems.append(
                    f"partition {p.id} runs in the normal world after a secure partition"
                )
        else:
            problems.append(f"partition {p.id} has unknown world {p.world!r}")
        by_layer.setdefault(p.layer_index, []).append(p)

    for i in range(len(model.layers)):
        parts = by_layer.get(i)
        if not parts:
            problems.append(f"layer {i} is not covered by any partition")
            continue
        units = model.units(i)
        cursor = 0
        for p in parts:  # plan order within the layer
            if p.start != cursor:
                problems.append(
                    f"layer {i} rows [{cursor}, {p.start}) "
                    + ("overlap" if p.start < cursor else "are uncovered")
                )
            if not 0 <= p.start <= p.end <= units:
                problems.append(f"partition {p.id} range [{p.start}, {p.end}) outside {units} units")
            cursor = max(cursor, p.end)
        if cursor != units:
            problems.append(f"layer {i} covered up to row {cursor} of {units}")
        worlds = {p.world for p in parts}
        if len(worlds) > 1:
            problems.append(f"layer {i} mixes worlds {sorted(worlds)}")

    for j in sorted(plan.spill):
        if not 1 <= j < len(model.layers):
            problems.append(f"spill flag on layer {j} is out of range")
            continue
        if model.layers[j].kind != "connected":
            problems.append(f"spill flag on layer {j} ({model.layers[j].kind}); only connected layers stream")
        producer = by_layer.get(j - 1)
        if producer and any(p.world != WORLD_SECURE for p in producer):
            problems.append(f"spill flag on layer {j} but layer {j - 1} runs in the normal world")
    return problems


def render_manifest(plan: PartitionPlan) -> str:
    """Line-oriented plan manifest; parse_manifest round-trips it."""
    lines = [f"scheme {plan.scheme}"]
    for i in sorted(plan.sublayer):
        params = plan.sublayer[i]
        lines.append(f"sublayer {i} s {params.subset_size} p {params.subset_count}")
    for i in sorted(plan.spill):
        lines.append(f"spill {i}")
    for p in plan.partitions:
        lines.append(
            f"partition {p.id} layer {p.layer_index} range {p.start}..{p.end} "
            f"world {p.world} bytes {p.footprint_bytes}"
        )
    return "\n".join(lines) + "\n"


_PARTITION_RE = re.compile(
    r"^partition (\d+) layer (\d+) range (\d+)\.\.(\d+) world (secure|normal) bytes (\d+)$"
)


def parse_manifest(text: str) -> PartitionPlan:
    scheme = None
    partitions = []
    sublayer: dict[int, SubsetParams] = {}
    spill: set[int] = set()
    for number, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("scheme "):
            scheme = line.split(" ", 1)[1]
            continue
        if line.startswith("sublayer "):
            parts = line.split()
            if len(parts) != 6 or parts[2] != "s" or parts[4] != "p":
                raise PlanError(f"manifest line {number}: malformed sublayer entry")
            sublayer[int(parts[1])] = SubsetParams(int(parts[3]), int(parts[5]))
            continue
        if line.startswith("spill "):
            spill.add(int(line.split(" ", 1)[1]))
            continue
        m = _PARTITION_RE.match(line)
        if not m:
            raise PlanError(f"manifest line {number}: unrecognized entry {line!r}")
        pid, layer, start, end, world, footprint = m.groups()
        partitions.append(
            Partition(
                int(pid), int(layer), int(start), int(end), world,
                int(footprint), world == WORLD_SECURE,
            )
        )
    if scheme is None:
        raise PlanError("manifest has no scheme line")
    if scheme not in SCHEMES:
        raise PlanError(f"manifest names unknown scheme {scheme!r}")
    return PartitionPlan(scheme, partitions, sublayer, frozenset(spill))


def _check_cap(cap: int) -> None:
    if cap <= 0:
        raise PlanError(f"memory budget must be positive, got {cap}")


def _requested_subset(subset_size, layer_index: int) -> int | None:
    if subset_size is None:
        return None
    if isinstance(subset_size, Mapping):
        return subset_size.get(layer_index)
    return int(subset_size)


def _spill_layers(model: ModelSpec, cap: int, chunk_bytes: int) -> set[int]:
    """Layers whose full input activations cannot share the arena with even
    a single-unit subset; their inputs will stream from encrypted spill."""
    spill: set[int] = set()
    for i in range(len(model.layers)):
        if not model.is_parameterized(i):
            continue
        if _subset_footprint(model, i, 1) > cap:
            if model.layers[i].kind != "connected" or i == 0:
                raise PlanInfeasibleError(
                    f"layer {i} ({model.layers[i].kind}) cannot stream its inputs "
                    f"and does not fit {cap} bytes"
                )
            spill.add(i)
    return spill


def _auto_subset_size(
    model: ModelSpec, layer_index: int, cap: int, chunk_bytes: int, spilled: bool
) -> int:
    """Largest subset size whose footprint fits the budget."""
    cols = model.param_shape(layer_index)[1]
    per_unit = cols + 1 + model.output_units_per_row(layer_index)
    if spilled:
        budget = cap - chunk_bytes
    else:
        budget = cap - FLOAT_BYTES * model.in_elems(layer_index)
    size = budget // (FLOAT_BYTES * per_unit)
    if size < 1:
        raise PlanInfeasibleError(
            f"layer {layer_index}: one weight row plus one activation chunk "
            f"exceeds the {cap}-byte budget"
        )
    return min(int(size), model.units(layer_index))
