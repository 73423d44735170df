import dataclasses

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdlp.config import load_canonical_model
from cdlp.errors import LayerTooLargeError, PlanError, PlanInfeasibleError
from cdlp.model import BranchTopology, LayerSpec, ModelSpec
from cdlp.planner import (
    estimate_layer_footprint,
    parse_manifest,
    plan_branched,
    plan_layered,
    plan_sublayer,
    render_manifest,
    validate_plan,
)

from support import random_model
import numpy as np

CAP = 7 * 2**20


def square_connected(n: int, layers: int = 1) -> ModelSpec:
    return ModelSpec([LayerSpec.connected(n, "linear")] * layers, (n, 1, 1))


def sublayer_sizes(model):
    return {i: model.units(i) for i in range(len(model.layers)) if model.is_parameterized(i)}


# --- footprints ---

def test_square_connected_footprint():
    model = square_connected(100)
    assert estimate_layer_footprint(model, 0) == 4 * (100 + 100 + 100 * 100 + 100) == 41200


def test_maxpool_footprint():
    model = ModelSpec([LayerSpec.maxpool(2, 2)], (1, 4, 4))
    assert estimate_layer_footprint(model, 0) == 4 * (16 + 4) == 80


def test_footprint_monotone_in_outputs():
    values = []
    for n_out in range(1, 60, 3):
        model = ModelSpec([LayerSpec.connected(n_out, "linear")], (32, 1, 1))
        values.append(estimate_layer_footprint(model, 0))
    assert values == sorted(values)
    assert len(set(values)) == len(values)


# --- layered ---

def test_canonical_model_layered_gives_eleven_partitions():
    plan = plan_layered(load_canonical_model(), CAP)
    assert len(plan.partitions) == 11
    assert all(p.world == "secure" and p.encrypted for p in plan.partitions)
    assert validate_plan(plan, load_canonical_model(), CAP) == []


def test_single_layer_model_gives_one_partition():
    plan = plan_layered(square_connected(8), CAP)
    assert len(plan.partitions) == 1
    assert (plan.partitions[0].start, plan.partitions[0].end) == (0, 8)


def test_layered_rejects_oversized_layer():
    model = square_connected(2000)  # ~16 MB of weights
    with pytest.raises(LayerTooLargeError, match="layer 0"):
        plan_layered(model, CAP)


# --- sublayer ---

def test_degenerate_subsets_reduce_to_layered():
    model = load_canonical_model()
    layered = plan_layered(model, CAP)
    sub = plan_sublayer(model, CAP, subset_size=sublayer_sizes(model))
    assert sub.partitions == layered.partitions


def test_auto_selection_solves_the_budget_inequality():
    model = square_connected(2000)
    plan = plan_sublayer(model, CAP)
    params = plan.sublayer[0]
    # 4*(2000 + 2000s + 2s) <= 7 MiB picks s=915, hence 3 subsets
    assert params.subset_size == 915
    assert params.subset_count == 3
    assert [p.end - p.start for p in plan.partitions] == [915, 915, 170]
    assert validate_plan(plan, model, CAP) == []


def test_single_neuron_subsets():
    model = square_connected(16)
    plan = plan_sublayer(model, CAP, subset_size=1)
    assert plan.sublayer[0].subset_count == 16
    assert all(p.footprint_bytes == 4 * (16 + 16 + 2) for p in plan.partitions)


def test_fitting_layers_stay_whole():
    model = load_canonical_model()
    plan = plan_sublayer(model, 100_000)
    # only the third convolution (index 4) is over the 100 kB budget
    split = {i for i, params in plan.sublayer.items() if params.subset_count > 1}
    assert split == {4}
    assert len(plan.partitions) == 12
    assert validate_plan(plan, model, 100_000) == []


def test_explicit_subset_size_out_of_range():
    with pytest.raises(PlanError):
        plan_sublayer(square_connected(8), CAP, subset_size=9)


def test_spill_flag_set_when_inputs_cannot_stay_resident():
    # inputs 20000 floats: even s=1 needs 4*(20000+20000+2) bytes resident
    model = ModelSpec(
        [LayerSpec.connected(20000, "linear"), LayerSpec.connected(8, "linear")],
        (4, 1, 1),
    )
    cap = 100_000
    plan = plan_sublayer(model, cap)
    assert plan.spill == frozenset({1})
    assert validate_plan(plan, model, cap) == []
    assert all(p.footprint_bytes <= cap for p in plan.partitions)


def test_spill_on_first_layer_is_infeasible():
    model = ModelSpec([LayerSpec.connected(4, "linear")], (20000, 1, 1))
    with pytest.raises(PlanInfeasibleError):
        plan_sublayer(model, 50_000)


def test_infeasible_when_one_row_exceeds_budget():
    model = square_connected(2000)
    with pytest.raises(PlanInfeasibleError):
        plan_sublayer(model, 6000)


@given(seed=st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_every_scheme_covers_every_layer_exactly(seed):
    model = random_model(np.random.default_rng(seed))
    for plan in (
        plan_layered(model, CAP),
        plan_sublayer(model, CAP, subset_size={i: max(1, model.units(i) // 3)
                                               for i in range(len(model.layers))
                                               if model.is_parameterized(i)}),
        plan_branched(model, CAP),
    ):
        assert validate_plan(plan, model, CAP) == []


@given(seed=st.integers(0, 10_000), caps=st.tuples(st.integers(12, 4000), st.integers(0, 4000)))
@settings(max_examples=40, deadline=None)
def test_more_budget_never_means_more_partitions(seed, caps):
    model = square_connected(24, layers=2)
    small = 4 * (24 + 24 + 2) + caps[0]  # always feasible: one-neuron subsets fit
    large = small + caps[1]
    a = plan_sublayer(model, small)
    b = plan_sublayer(model, large)
    assert len(b.partitions) <= len(a.partitions)


# --- branched ---

def branched_model() -> ModelSpec:
    return ModelSpec(
        [
            LayerSpec.convolutional(2, 3, 1, 1, "relu"),
            LayerSpec.connected(8, "relu"),
            LayerSpec.connected(8, "relu"),
            LayerSpec.connected(4, "linear"),
        ],
        (1, 4, 4),
        BranchTopology(2, 2),
    )


def test_branched_partition_counts():
    plan = plan_branched(branched_model(), CAP)
    normals = [p for p in plan.partitions if p.world == "normal"]
    secures = [p for p in plan.partitions if p.world == "secure"]
    assert len(normals) == 2
    assert len(secures) == 4
    assert not any(p.encrypted for p in normals)
    assert all(p.encrypted for p in secures)
    assert validate_plan(plan, branched_model(), CAP) == []


def test_branched_requires_topology():
    with pytest.raises(PlanError, match="branch topology"):
        plan_branched(square_connected(8), CAP)


def test_branch_weight_footprint_is_inverse_square_in_branches():
    n, k = 64, 4
    model = ModelSpec(
        [LayerSpec.connected(n, "linear"), LayerSpec.connected(n, "linear")],
        (n, 1, 1),
        BranchTopology(0, k),
    )
    plan = plan_branched(model, CAP)
    per_branch = plan.partitions[0].footprint_bytes
    weight_term = per_branch - 4 * (n // k + 2 * (n // k))
    assert weight_term == 4 * (n * n) // (k * k)


def test_branched_rejects_oversized_branch():
    model = ModelSpec(
        [LayerSpec.connected(2000, "linear"), LayerSpec.connected(2000, "linear")],
        (2000, 1, 1),
        BranchTopology(0, 2),
    )
    with pytest.raises(LayerTooLargeError):
        plan_branched(model, 100_000)


# --- validation ---

def test_validation_catches_overlap_and_budget():
    model = square_connected(8)
    plan = plan_layered(model, CAP)
    first = plan.partitions[0]
    overlapping = dataclasses.replace(plan, partitions=[
        dataclasses.replace(first, end=6),
        dataclasses.replace(first, id=1, start=4),
    ])
    problems = validate_plan(overlapping, model, CAP)
    assert any("overlap" in p for p in problems)

    over_budget = dataclasses.replace(plan, partitions=[
        dataclasses.replace(first, footprint_bytes=CAP + 1)
    ])
    problems = validate_plan(over_budget, model, CAP)
    assert any("exceeds budget" in p for p in problems)


def test_validation_catches_world_inconsistency():
    model = square_connected(8)
    plan = plan_layered(model, CAP)
    broken = dataclasses.replace(plan, partitions=[
        dataclasses.replace(plan.partitions[0], world="normal")
    ])
    problems = validate_plan(broken, model, CAP)
    assert any("encrypted" in p for p in problems)


def test_validation_catches_gaps():
    model = square_connected(8)
    plan = plan_layered(model, CAP)
    gappy = dataclasses.replace(plan, partitions=[
        dataclasses.replace(plan.partitions[0], end=5)
    ])
    problems = validate_plan(gappy, model, CAP)
    assert any("covered up to row 5" in p for p in problems)


def test_validation_checks_spill_flags():
    model = square_connected(8, layers=2)
    plan = plan_layered(model, CAP)
    assert validate_plan(plan.with_spill(1), model, CAP) == []
    problems = validate_plan(plan.with_spill(0), model, CAP)
    assert any("spill" in p for p in problems)


# --- manifest ---

def test_manifest_round_trip():
    model = load_canonical_model()
    for plan in (
        plan_layered(model, CAP),
        plan_sublayer(model, 100_000),
    ):
        again = parse_manifest(render_manifest(plan))
        assert again == plan


def test_manifest_round_trip_with_spill():
    model = ModelSpec(
        [LayerSpec.connected(20000, "linear"), LayerSpec.connected(8, "linear")],
        (4, 1, 1),
    )
    plan = plan_sublayer(model, 100_000)
    assert plan.spill
    assert parse_manifest(render_manifest(plan)) == plan


def test_manifest_partition_line_format():
    plan = plan_layered(square_connected(8), CAP)
    line = render_manifest(plan).splitlines()[1]
    assert line == f"partition 0 layer 0 range 0..8 world secure bytes {plan.partitions[0].footprint_bytes}"


def test_manifest_rejects_garbage():
    with pytest.raises(PlanError):
        parse_manifest("scheme layered\npartition zero\n")
    with pytest.raises(PlanError):
        parse_manifest("partition 0 layer 0 range 0..8 world secure bytes 1\n")
