import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dvstn.compression import (apply_passes, filter_similarity, fold_batchnorm, parse_passes, scale_channels,
                               separable_factorize, set_input_resolution)
from dvstn.errors import TransformError
from dvstn.graph import (LayerSpec, ModelSpec, WeightStore, compile_model, count_macs, count_params, init_weights,
                         layer_counts, validate_and_plan)
from dvstn.zoo import ENTRY_CONV, canonical_model


def conv_bn(w=2.0, b=0.0, gamma=3.0, beta=1.0, mean=0.0, var=1.0, eps=0.0):
    spec = ModelSpec("cb", (1, 2, 2), [
        LayerSpec("data", "input"),
        LayerSpec("c", "conv", ("data",), {"out_channels": 1, "kernel": 1}),
        LayerSpec("bn", "batchnorm", ("c",), {"eps": eps}),
    ])
    f = lambda v: np.array([v], np.float32)
    weights = WeightStore({"c": {"weights": np.full((1, 1, 1, 1), w, np.float32), "bias": f(b)},
                           "bn": {"gamma": f(gamma), "beta": f(beta), "mean": f(mean), "var": f(var)}})
    return spec, weights


# fold

def test_fold_identity_bn_keeps_weights():
    spec, w = conv_bn(w=2.0, gamma=1.0, beta=0.0)
    folded, fw = fold_batchnorm(spec, w)
    assert [layer.kind for layer in folded.layers] == ["input", "conv"]
    assert fw["c"]["weights"].item() == 2.0 and fw["c"]["bias"].item() == 0.0


def test_fold_hand_algebra():
    spec, w = conv_bn()
    _, fw = fold_batchnorm(spec, w)
    assert fw["c"]["weights"].item() == 6.0
    assert fw["c"]["bias"].item() == 1.0


def test_fold_uses_stored_eps():
    spec, w = conv_bn(w=1.0, gamma=1.0, beta=0.0, var=1.0, eps=3.0)
    _, fw = fold_batchnorm(spec, w)
    assert fw["c"]["weights"].item() == pytest.approx(0.5)


def _net_with(pred_kind):
    layers = [LayerSpec("data", "input")]
    if pred_kind == "relu":
        layers += [LayerSpec("p", "relu", ("data",))]
    elif pred_kind == "shared":
        layers += [LayerSpec("p", "conv", ("data",), {"out_channels": 2}), LayerSpec("x", "relu", ("p",))]
    layers += [LayerSpec("bn", "batchnorm", ("p",))]
    if pred_kind == "shared":
        layers += [LayerSpec("cat", "concat", ("bn", "x"))]
    return ModelSpec("n", (2, 4, 4), layers)


@pytest.mark.parametrize("kind", ["relu", "shared"])
def test_fold_rejects_ineligible_predecessor(kind):
    with pytest.raises(TransformError, match=r"\[bn\]"):
        fold_batchnorm(_net_with(kind))


def test_fold_equivalence_and_idempotence(rng):
    spec = canonical_model("M7")
    w = init_weights(spec, seed=4, randomize_bn=True)
    folded, fw = fold_batchnorm(spec, w)
    assert not any(layer.kind == "batchnorm" for layer in folded.layers)
    again, fw2 = fold_batchnorm(folded, fw)
    assert again == folded and fw2.equals(fw)
    a, b = compile_model(spec, w), compile_model(folded, fw)
    x = rng.random((8, 10, 32, 32), dtype=np.float32)
    assert np.abs(a(x) - b(x)).max() <= 1e-4


@settings(max_examples=25)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.01, 10.0))
def test_fold_preserves_outputs_property(seed, scale):
    spec = ModelSpec("p", (3, 6, 6), [
        LayerSpec("data", "input"),
        LayerSpec("c", "conv", ("data",), {"out_channels": 4, "kernel": 3, "stride": 2, "padding": 1}),
        LayerSpec("bn", "batchnorm", ("c",)),
        LayerSpec("r", "relu", ("bn",)),
        LayerSpec("d", "depthwise_conv", ("r",), {"kernel": 3, "padding": 1}),
        LayerSpec("bn2", "batchnorm", ("d",)),
        LayerSpec("g", "global_avg_pool", ("bn2",)),
        LayerSpec("fc", "fully_connected", ("g",), {"out_features": 2}),
        LayerSpec("bn3", "batchnorm", ("fc",)),
    ])
    w = init_weights(spec, seed=seed, randomize_bn=True)
    x = (np.random.default_rng(seed).normal(size=(4, 3, 6, 6)) * scale).astype(np.float32)
    folded, fw = fold_batchnorm(spec, w)
    ya, yb = compile_model(spec, w)(x), compile_model(folded, fw)(x)
    assert np.abs(ya - yb).max() <= 1e-4 * max(1.0, np.abs(ya).max())
    assert np.array_equal(ya.argmax(axis=1), yb.argmax(axis=1)) or np.abs(ya[:, 0] - ya[:, 1]).min() < 1e-4


def test_fold_removes_bn_params_only():
    m7, m8 = canonical_model("M7"), canonical_model("M8")
    bn_params = sum(4 * validate_and_plan(m7)[layer.id][0] for layer in m7.layers if layer.kind == "batchnorm")
    assert count_params(m7) - count_params(m8) == bn_params
    bn_macs = sum(2 * int(np.prod(validate_and_plan(m7)[layer.id])) for layer in m7.layers
                  if layer.kind == "batchnorm")
    assert count_macs(m7) - count_macs(m8) == bn_macs


# separable

def test_factorize_leaves_1x1_models_alone():
    spec = ModelSpec("p", (4, 8, 8), [LayerSpec("data", "input"),
                                      LayerSpec("c", "conv", ("data",), {"out_channels": 8, "kernel": 1})])
    assert separable_factorize(spec) is spec


def test_factorize_hand_macs():
    spec = ModelSpec("p", (16, 16, 16), [LayerSpec("data", "input"),
                                         LayerSpec("c", "conv", ("data",),
                                                   {"out_channels": 32, "kernel": 3, "padding": 1})])
    assert count_macs(spec) == 1_179_648
    out = separable_factorize(spec)
    assert count_macs(out) == 36_864 + 131_072 == 167_936
    assert [layer.kind for layer in out.layers] == ["input", "depthwise_conv", "conv"]
    assert out.metadata["weights_carried"] is False and out.metadata["requires_retraining"] is True
    assert out.provenance[-1]["pass"] == "separable_factorize"


def test_factorize_rewires_bn_after_pointwise():
    m4 = canonical_model("M4")
    by = {layer.id: layer for layer in m4.layers}
    assert by[f"{ENTRY_CONV}_bn"].inputs == (f"{ENTRY_CONV}_pw",)
    assert by[f"{ENTRY_CONV}_pw"].inputs == (f"{ENTRY_CONV}_dw",)


def test_factorize_on_every_eligible_conv():
    m3 = canonical_model("M3")
    plan = validate_and_plan(m3)
    full = separable_factorize(m3)
    eligible = [layer.id for layer in m3.layers if layer.kind == "conv" and
                np.prod(layer.conv_params().kernel) > 1 and plan[layer.inputs[0]][0] > 1]
    ids = {layer.id for layer in full.layers}
    for lid in eligible:
        assert lid not in ids and {f"{lid}_dw", f"{lid}_pw"} <= ids
    # everything else is untouched
    untouched = [layer for layer in m3.layers if layer.id not in eligible]
    assert len(full.layers) == len(m3.layers) + len(eligible)
    kept = {layer.id: layer for layer in full.layers}
    for layer in untouched:
        assert kept[layer.id].kind == layer.kind and kept[layer.id].attrs == layer.attrs


def test_factorize_named_layer_must_be_eligible():
    with pytest.raises(TransformError):
        separable_factorize(canonical_model("M3"), layers=["conv2_3x3_reduce"])
    with pytest.raises(TransformError):
        separable_factorize(canonical_model("M3"), layers=["missing"])


def test_factorize_skips_single_channel_input():
    spec = ModelSpec("p", (1, 8, 8), [LayerSpec("data", "input"),
                                      LayerSpec("c", "conv", ("data",), {"out_channels": 4, "kernel": 3})])
    assert separable_factorize(spec) is spec


# scale

def test_scale_arithmetic():
    spec = ModelSpec("p", (10, 8, 8), [LayerSpec("data", "input"),
                                       LayerSpec("c", "conv", ("data",), {"out_channels": 64, "kernel": 3}),
                                       LayerSpec("g", "global_avg_pool", ("c",)),
                                       LayerSpec("fc", "fully_connected", ("g",), {"out_features": 2})])
    out = scale_channels(spec, 0.75)
    assert out.layer("c").attrs["out_channels"] == 48
    assert out.layer("fc").attrs["out_features"] == 2
    assert out.input_shape == (10, 8, 8)


def test_scale_rounding_and_floor():
    spec = ModelSpec("p", (3, 4, 4), [LayerSpec("data", "input"),
                                      LayerSpec("c", "conv", ("data",), {"out_channels": 3}),
                                      LayerSpec("e", "conv", ("c",), {"out_channels": 2})])
    # the output conv is the head and stays at 2
    assert scale_channels(spec, 0.5).layer("c").attrs["out_channels"] == 2   # 1.5 rounds half up
    assert scale_channels(spec, 0.5, "floor").layer("c").attrs["out_channels"] == 1
    assert scale_channels(spec, 0.01).layer("c").attrs["out_channels"] == 1
    assert scale_channels(spec, 0.5).layer("e").attrs["out_channels"] == 2


def test_scale_two_stacked_convs_ratio():
    spec = ModelSpec("p", (64, 8, 8), [LayerSpec("data", "input"),
                                       LayerSpec("a", "conv", ("data",), {"out_channels": 64, "kernel": 3}),
                                       LayerSpec("b", "conv", ("a",), {"out_channels": 64, "kernel": 3}),
                                       LayerSpec("g", "global_avg_pool", ("b",)),
                                       LayerSpec("fc", "fully_connected", ("g",), {"out_features": 2})])
    out = scale_channels(spec, 0.75)
    params_b = lambda s: next(r[2] for r in layer_counts(s) if r[0] == "b")
    assert params_b(out) / params_b(spec) == pytest.approx(0.5625, rel=0.01)


def test_scale_identity_and_bounds():
    m3 = canonical_model("M3")
    assert scale_channels(m3, 1.0) is m3
    for bad in (0.0, -1, 1.5):
        with pytest.raises(TransformError):
            scale_channels(m3, bad)


def test_scale_factorize_commute():
    m3 = canonical_model("M3")
    a = scale_channels(separable_factorize(m3, [ENTRY_CONV]), 0.75)
    b = separable_factorize(scale_channels(m3, 0.75), [ENTRY_CONV])
    assert count_macs(a) == count_macs(b) and count_params(a) == count_params(b)
    a = scale_channels(separable_factorize(m3), 0.75)
    b = separable_factorize(scale_channels(m3, 0.75))
    assert count_macs(a) == count_macs(b)


# resolution

def test_resolution_m3_to_m6():
    m3 = canonical_model("M3")
    m6 = set_input_resolution(m3, 32)
    assert m6.input_shape == (10, 32, 32)
    ratio = count_macs(m3) / count_macs(m6)
    assert 3.5 < ratio < 4.5


def test_resolution_identity():
    m1 = canonical_model("M1")
    assert set_input_resolution(m1, 224) is m1


def test_resolution_too_small_names_layer():
    with pytest.raises(TransformError, match=r"\[pool2_3x3_s2\]"):
        set_input_resolution(canonical_model("M3"), 8)


def test_every_pass_output_validates():
    m3 = canonical_model("M3")
    for out in (separable_factorize(m3), scale_channels(m3, 0.5), set_input_resolution(m3, 48),
                fold_batchnorm(m3)[0]):
        validate_and_plan(out)


# pipelines

def test_parse_passes():
    assert parse_passes("separable,scale:0.75:floor,input:32,fold") == [
        ("separable", {"layers": None}), ("scale", {"factor": 0.75, "rounding": "floor"}),
        ("input", {"side": 32}), ("fold", {})]
    assert parse_passes(f"separable:{ENTRY_CONV}+x") == [("separable", {"layers": [ENTRY_CONV, "x"]})]
    assert parse_passes("") == []
    with pytest.raises(TransformError):
        parse_passes("prune")


def test_empty_pass_list_is_identity():
    m3 = canonical_model("M3")
    assert apply_passes(m3, "") == (m3, None)


def test_pass_pipeline_reproduces_ladder():
    m3 = canonical_model("M3")
    m8, _ = apply_passes(m3, f"input:32,separable:{ENTRY_CONV},scale:0.75,fold")
    assert m8.same_architecture(canonical_model("M8"))
    assert [p["pass"] for p in m8.provenance[-4:]] == [
        "set_input_resolution", "separable_factorize", "scale_channels", "fold_batchnorm"]


def test_weights_survive_resolution_but_not_architecture_changes():
    m3 = canonical_model("M3")
    w = init_weights(m3, seed=1, randomize_bn=True)
    spec, kept = apply_passes(m3, "input:32", w)
    assert kept is w
    spec, dropped = apply_passes(m3, "scale:0.75", w)
    assert dropped is None


def test_filter_similarity_report():
    w = {"c": {"weights": np.stack([np.ones((2, 3, 3)), np.ones((2, 3, 3)), -np.eye(3)[None].repeat(2, 0)])}}
    rep = filter_similarity(w, "c")
    assert rep["filters"] == 3 and rep["max"] == pytest.approx(1.0)
    assert 0 < rep["fraction_above"] < 1
