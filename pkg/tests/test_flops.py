import numpy as np
import pytest

from cottad.flops import ablation_audit, count_flops, op_flops
from cottad.model import AblationVariant, ablate, build, reference_config
from cottad.schemas import validate

from oracles import reference_flops_sheet


@pytest.fixture(scope="module")
def model():
    return build(reference_config())


@pytest.mark.parametrize("size", [64, 128])
def test_per_layer_counts_match_hand_sheet(model, size):
    rep = count_flops(model, (3, size, size))
    sheet = reference_flops_sheet(size, size)
    for layer in rep.layers:
        macs, ops = sheet[layer.name]
        assert (layer.macs, layer.flops) == (macs, 2 * macs + ops), layer.name
    assert rep.total_flops == sum(2 * m + o for m, o in sheet.values())


def test_totals_are_sums_and_mac_ops_cost_two_flops(model):
    rep = count_flops(model)
    assert rep.total_flops == sum(l.flops for l in rep.layers) == sum(o.flops for o in rep.ops)
    assert rep.total_macs == sum(l.macs for l in rep.layers)
    assert rep.total_params == 1_088_929
    for op in rep.ops:
        if op.op in ("conv", "linear"):
            assert op.flops == 2 * op.macs
        else:
            assert op.macs == 0
    validate(rep.to_dict(include_ops=True), "flops_report")


def test_doubling_input_quadruples_conv_flops(model):
    def conv_flops(size):
        rep = count_flops(model, (3, size, size))
        return sum(o.flops for o in rep.ops if o.op == "conv" and "attention" not in o.path and "aggregate" not in o.path)

    assert conv_flops(128) == 4 * conv_flops(64)


def test_op_flops_convention():
    assert op_flops(10, 3) == 23


def test_remove_ngam_is_cheaper():
    g = reference_config()
    assert count_flops(build(ablate(g, "RemoveNGAM"))).total_flops < count_flops(build(g)).total_flops


@pytest.mark.parametrize("size", [64, 128])
def test_ablation_sign_pattern(size):
    audit = ablation_audit(reference_config(), [3, size, size])
    validate(audit, "ablation_audit")
    assert audit["passed"], audit["checks"]
    flops = {r["variant"]: r["flops"] for r in audit["rows"]}
    assert flops[AblationVariant.REMOVE_NELU.value] == flops["Full"]
