import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cottad import cten
from cottad.metrics import iou
from cottad.model import (
    AblationVariant, LayerKind, ModelConfigError, ModelGraph, ablate, build, count_params, decode, nms,
    reference_config,
)
from cottad.schemas import validate
from cottad.tensor import Tensor


@pytest.fixture(scope="module")
def graph():
    return reference_config()


@pytest.fixture(scope="module")
def model(graph):
    return build(graph, seed=42)


def test_reference_head_shape(model):
    out = model(Tensor(np.zeros((1, 3, 64, 64))))
    assert [o.shape for o in out] == [(1, 9, 8, 8)]


def test_reference_layout(graph):
    kinds = graph.kinds()
    order = [LayerKind.CONV, LayerKind.ODCONV, LayerKind.STD_BLOCK, LayerKind.SPDCONV, LayerKind.STD_BLOCK,
             LayerKind.SPDCONV, LayerKind.STD_BLOCK, LayerKind.NGAM, LayerKind.DRFSPPF]
    assert kinds[:len(order)] == order
    assert kinds[-1] is LayerKind.DETECT_HEAD
    assert kinds.count(LayerKind.SPDCONV) == 2


def test_config_roundtrip_and_schema(graph, tmp_path):
    validate(graph.to_dict(), "model_config")
    graph.save(tmp_path / "g.json")
    assert ModelGraph.load(tmp_path / "g.json").to_dict() == graph.to_dict()


def test_remove_drfsppf_swaps_in_sppf(graph):
    kinds = ablate(graph, AblationVariant.REMOVE_DRFSPPF).kinds()
    assert LayerKind.SPPF in kinds and LayerKind.DRFSPPF not in kinds


def test_remove_ngam_param_delta_is_ngam_weight_count(graph, model):
    c, r, k = 128, 32, 7
    ngam_weights = (r * c + r) + (c * r + c) + (r * c * k * k + r) + (c * r * k * k + c)
    assert count_params(model) - count_params(build(ablate(graph, "RemoveNGAM"))) == ngam_weights


def test_ablation_substitutions(graph):
    od = ablate(graph, "RemoveODConv")
    spec = od.layers[1]
    assert spec.kind is LayerKind.CONV and spec.args["stride"] == 2 and spec.args["kernel"] == 3
    spd = ablate(graph, "RemoveSPDConv")
    assert all(s.args["stride"] == 2 and s.args["kernel"] == 3 for s in spd.layers if s.name.startswith("spd"))
    no_ngam = ablate(graph, "RemoveNGAM")
    assert LayerKind.NGAM not in no_ngam.kinds()
    assert next(s for s in no_ngam.layers if s.name == "drfsppf").inputs == ["c4"]
    nelu = ablate(graph, "RemoveNeLU")
    assert "nelu" not in json.dumps(nelu.to_dict()).lower().replace("removenelu", "")
    ngam = next(s for s in nelu.layers if s.kind is LayerKind.NGAM)
    assert ngam.args["gate_mode"] == "KeepSigmoidGates" and ngam.args["activation"] == "relu"
    assert nelu.layers[0].args["act"] == "relu"


@pytest.mark.parametrize("variant", list(AblationVariant))
def test_every_variant_builds_and_runs(graph, variant):
    m = build(ablate(graph, variant))
    assert m(Tensor(np.zeros((1, 3, 64, 64))))[0].shape == (1, 9, 8, 8)


def test_count_params_equals_serialized_elements(model, tmp_path):
    cten.save_weights(tmp_path, model.state_dict())
    loaded = cten.load_weights(tmp_path)
    assert count_params(model) == sum(a.size for a in loaded.values()) == 1_088_929
    validate(json.loads((tmp_path / "manifest.json").read_text()), "weights_manifest")


def test_load_state_dict_reproduces_outputs(graph, model):
    other = build(graph, seed=7)
    x = Tensor(np.random.default_rng(0).random((1, 3, 64, 64)))
    assert not np.array_equal(other(x)[0].data, model(x)[0].data)
    other.load_state_dict(model.state_dict())
    np.testing.assert_array_equal(other(x)[0].data, model(x)[0].data)


def _doc(layers, shape=(3, 16, 16)):
    return {"input_shape": list(shape), "layers": layers}


def test_shape_errors_name_the_layer():
    bad = _doc([{"name": "a", "kind": "Conv", "args": {"out_channels": 8, "stride": 2}},
                {"name": "b", "kind": "SPDConv", "args": {"out_channels": 8, "scale": 3}},
                {"name": "h", "kind": "DetectHead"}])
    with pytest.raises(ModelConfigError, match="'b'"):
        build(bad)
    mismatch = _doc([{"name": "a", "kind": "Conv", "args": {"out_channels": 8, "stride": 2}},
                     {"name": "c", "kind": "Concat", "from": ["a", "input"]},
                     {"name": "h", "kind": "DetectHead"}])
    with pytest.raises(ModelConfigError, match="'c'"):
        build(mismatch)


def test_graph_reference_errors():
    with pytest.raises(ModelConfigError, match="not an earlier layer"):
        build(_doc([{"name": "a", "kind": "Conv", "from": ["h"], "args": {"out_channels": 4}},
                    {"name": "h", "kind": "DetectHead"}]))
    with pytest.raises(ModelConfigError, match="duplicate"):
        build(_doc([{"name": "a", "kind": "Conv", "args": {"out_channels": 4}},
                    {"name": "a", "kind": "DetectHead"}]))
    with pytest.raises(ModelConfigError, match="DetectHead"):
        build(_doc([{"name": "a", "kind": "Conv", "args": {"out_channels": 4}}]))


def test_schema_rejects_unknown_kind():
    import jsonschema

    with pytest.raises(jsonschema.ValidationError):
        build(_doc([{"name": "a", "kind": "Transformer"}]))


@given(st.integers(0, 2**31), st.floats(0.2, 0.8))
def test_decode_boxes_in_bounds_and_nms_separates(seed, nms_iou):
    maps = np.random.default_rng(seed).standard_normal((2, 9, 4, 4)) * 3
    for dets in decode([Tensor(maps)], conf_thr=0.05, nms_iou=nms_iou, image_size=(32, 32)):
        for d in dets:
            b = d.box
            assert 0 <= b.x1 < b.x2 <= 32 and 0 <= b.y1 < b.y2 <= 32
            assert 0 <= d.confidence <= 1
        for i, a in enumerate(dets):
            for b in dets[i + 1:]:
                if a.class_id == b.class_id:
                    assert iou(a.box, b.box) < nms_iou


def test_decode_recovers_a_planted_box():
    maps = np.full((1, 9, 8, 8), -10.0)
    maps[0, 0, 3, 5] = 10.0  # objectness at cell (gx=5, gy=3)
    maps[0, 1:5, 3, 5] = 0.0  # centre offsets 0.5, size 0.5 of the image
    maps[0, 5 + 2, 3, 5] = 10.0  # class 2
    (dets,) = decode(maps, conf_thr=0.5, image_size=(64, 64))
    assert len(dets) == 1 and dets[0].class_id == 2
    b = dets[0].box
    assert (b.x1, b.y1, b.x2, b.y2) == pytest.approx((28.0, 12.0, 60.0, 44.0))


def test_nms_keeps_highest_confidence():
    from cottad.metrics import Box, Detection

    dets = [Detection(Box(0, 0, 10, 10), 0, 0.5), Detection(Box(1, 1, 10, 10), 0, 0.9), Detection(Box(1, 1, 10, 10), 1, 0.1)]
    kept = nms(dets, 0.5)
    assert [d.confidence for d in kept] == [0.9, 0.1]
