import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mrmf.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from mrmf.config import load_config
from mrmf.data.mrd import encode_dataset
from mrmf.data import Dataset
from mrmf.errors import BadMagicError, FileIOError, FusionMismatchError, ShapeError, TruncatedFileError
from mrmf.fusion import (
    adjust_model,
    first_fc_shape,
    flattened_size,
    fuse,
    propagate_shapes,
    provenance,
    split_layer_groups,
    strip_input_pooling,
    with_input_pooling,
)
from mrmf.nn import AvgPoolND, ConvND, Flatten, build_model, mse_loss

MINI = [{"kind": "conv", "kernel": 3, "out_channels": 1}, {"kind": "flatten"}, {"kind": "fc", "out_features": 4}]


def _neuron_like(seed=0, shape=(20, 3)):
    specs = [{"kind": "conv", "kernel": 3, "stride": 2, "out_channels": 4}, {"kind": "batchnorm"}, {"kind": "tanh"},
             {"kind": "flatten"}, {"kind": "fc", "out_features": 6}, {"kind": "relu"}, {"kind": "fc", "out_features": 2}]
    return build_model(specs, shape, seed=seed)


def test_propagate_shapes_examples():
    assert propagate_shapes([ConvND(3, 1, 1)], (10, 1)).shapes == ((8, 1),)
    trace = propagate_shapes([ConvND(3, 1, 1), AvgPoolND(2), Flatten()], (10, 1))
    assert trace.shapes == ((8, 1), (4, 1), (4,))
    assert trace.flatten_size == 4 and trace.flatten_index == 2
    with pytest.raises(ShapeError) as exc:
        propagate_shapes([ConvND(3, 1, 1), ConvND(9, 1, 1)], (10, 1))
    assert exc.value.layer == 1


def test_fig2_fixture_flatten_sizes():
    cfg = load_config("fig2_shapes")
    ref = cfg.build_reference()
    assert ref.input_shape == (1600, 3)
    assert flattened_size(ref) == 4320
    assert first_fc_shape(ref) == (4320, 512)
    coarse = adjust_model(ref, (800, 3), seed=1)
    assert flattened_size(coarse) == 1980
    assert first_fc_shape(coarse) == (1980, 512)
    assert coarse.shapes()[coarse.flatten_index - 3] == (11, 180)


def test_adjust_model_mini_and_identity():
    ref = build_model(MINI, (10, 1), seed=0)
    assert first_fc_shape(ref) == (8, 4)
    # 10 -> 6 is not an integer reduction, so the factor check is switched off
    coarse = adjust_model(ref, (6, 1), seed=1, check_factors=False)
    assert first_fc_shape(coarse) == (4, 4)
    same = adjust_model(ref, (10, 1), seed=2)
    assert [l.hyperparams() for l in same.layers] == [l.hyperparams() for l in ref.layers]


@settings(max_examples=20, deadline=None)
@given(st.sampled_from([1, 2, 4, 5]), st.integers(0, 1000))
def test_adjust_model_changes_only_first_fc(factor, seed):
    ref = _neuron_like(seed, (40, 3))
    coarse = adjust_model(ref, (40 // factor, 3), seed=seed + 1)
    changed = [i for i, (a, b) in enumerate(zip(ref.layers, coarse.layers)) if a.hyperparams() != b.hyperparams()]
    assert changed in ([], [4])
    assert coarse.layers[4].in_features == propagate_shapes(coarse.layers, coarse.input_shape).flatten_size


def test_adjust_model_rejects_bad_shapes():
    ref = build_model(MINI, (10, 1), seed=0)
    with pytest.raises(ShapeError):
        adjust_model(ref, (10, 2), seed=0)
    with pytest.raises(ShapeError):
        adjust_model(ref, (3, 1), seed=0)  # not an integer reduction
    with pytest.raises(ShapeError):
        adjust_model(ref, (2, 1), seed=0)  # conv underflows


def test_split_layer_groups_examples():
    def model(n_conv, n_fc):
        specs = [{"kind": "conv", "kernel": 1, "out_channels": 1}] * n_conv + [{"kind": "flatten"}]
        specs += [{"kind": "fc", "out_features": 2}] * n_fc
        return build_model(specs, (4, 1))

    for n_conv, n_fc in ((3, 5), (1, 1), (7, 3)):
        groups = split_layer_groups(model(n_conv, n_fc))
        assert (len(groups.bottom), len(groups.top)) == (n_conv + 1, n_fc)


def _const(model, conv_value, fc_value):
    for layer in model.layers:
        for name, arr in layer.params.items():
            arr[...] = fc_value if layer.kind == "fc" else conv_value
    return model


def test_fuse_constant_weight_provenance():
    ref = build_model([{"kind": "conv", "kernel": 3, "out_channels": 2}, {"kind": "flatten"},
                       {"kind": "fc", "out_features": 3}, {"kind": "fc", "out_features": 2}], (12, 1), seed=0)
    coarse = _const(adjust_model(ref, (6, 1), seed=1), 1.0, 3.0)
    dense = _const(adjust_model(ref, (12, 1), seed=2), 2.0, 4.0)
    fused = fuse(coarse, dense)
    assert np.all(fused.layers[0].params["weight"] == 1.0)
    for i in (2, 3):
        assert all(np.all(a == 4.0) for a in fused.layers[i].params.values())
    assert fused.input_shape == (12, 1)
    assert [src for _, _, src in provenance(fused, coarse, dense)] == ["coarse", "dense", "dense"]


@pytest.mark.parametrize("seed", range(20))
def test_fuse_random_pairs_bitwise(seed):
    ref = _neuron_like(seed, (20, 3))
    coarse = adjust_model(ref, (10, 3), seed=seed + 100)
    coarse.layers[1].buffers["running_mean"] = np.random.default_rng(seed).standard_normal(4)
    dense = adjust_model(ref, (20, 3), seed=seed + 200)
    fused = fuse(coarse, dense)
    groups = split_layer_groups(fused)
    for i in groups.bottom:
        for store in ("params", "buffers"):
            for name, arr in getattr(fused.layers[i], store).items():
                assert np.array_equal(arr, getattr(coarse.layers[i], store)[name])
    for i in groups.top:
        for name, arr in fused.layers[i].params.items():
            assert np.array_equal(arr, dense.layers[i].params[name])
    fused.forward(np.zeros((2, 20, 3)))


def test_fuse_self_is_identity_and_copies():
    m = _neuron_like(3)
    fused = fuse(m, m)
    assert fused.checksum() == m.checksum()
    fused.layers[0].params["weight"] += 1.0
    assert fused.checksum() != m.checksum()


def test_fuse_reinit_first_fc():
    m = _neuron_like(3)
    fused = fuse(m, m, reinit_first_fc=True, seed=5)
    assert not np.array_equal(fused.layers[4].params["weight"], m.layers[4].params["weight"])
    assert np.array_equal(fused.layers[6].params["weight"], m.layers[6].params["weight"])


def test_fuse_mismatch_errors():
    a = build_model(MINI, (10, 1), seed=0)
    b = build_model(MINI + [{"kind": "fc", "out_features": 2}], (10, 1), seed=0)
    with pytest.raises(FusionMismatchError):
        fuse(a, b)
    c = build_model([{"kind": "conv", "kernel": 2, "out_channels": 1}, {"kind": "flatten"},
                     {"kind": "fc", "out_features": 4}], (10, 1), seed=0)
    with pytest.raises(FusionMismatchError) as exc:
        fuse(a, c)
    assert exc.value.layer == 0
    e = build_model([{"kind": "conv", "kernel": 3, "out_channels": 1}, {"kind": "flatten"},
                     {"kind": "fc", "out_features": 4}], (12, 1), seed=0)
    e.layers[0].params["weight"] = np.zeros((3, 1, 2))
    with pytest.raises(FusionMismatchError):
        fuse(e, build_model(MINI, (12, 1), seed=0))
    with pytest.raises(ShapeError):
        fuse(a, a, reinit_first_fc=False).forward(np.zeros((1, 12, 1)))


def test_input_pooling_wrapper_shares_layers():
    m = build_model(MINI, (5, 1), seed=0)
    pooled = with_input_pooling(m, (2,), (10, 1))
    assert pooled.layers[1] is m.layers[0]
    assert pooled.input_shape == (10, 1)
    assert strip_input_pooling(pooled).input_shape == (5, 1)
    with pytest.raises(ShapeError):
        with_input_pooling(m, (3,), (10, 1))


# ------------------------------------------------------------------ checkpoints

def test_checkpoint_round_trip_bitwise(tmp_path):
    m = build_model([{"kind": "conv", "kernel": (2, 3), "stride": (1, 2), "padding": (1, 0), "out_channels": 3},
                     {"kind": "avgpool", "kernel": 2}, {"kind": "batchnorm", "momentum": 0.2, "eps": 1e-3},
                     {"kind": "relu"}, {"kind": "flatten"}, {"kind": "fc", "out_features": 3, "bias": False},
                     {"kind": "tanh"}, {"kind": "fc", "out_features": 2}], (6, 8, 2), seed=4)
    m.layers[2].buffers["running_var"] = np.linspace(0.5, 2.0, 3)
    path = tmp_path / "m.mrc"
    save_checkpoint(m, path)
    back = load_checkpoint(str(path))
    assert back.checksum() == m.checksum()
    assert [l.hyperparams() for l in back.layers] == [l.hyperparams() for l in m.layers]
    x = np.random.default_rng(0).standard_normal((3, 6, 8, 2))
    y = np.zeros((3, 2))
    assert mse_loss(back(x), y)[0] == mse_loss(m(x), y)[0]
    assert encode_checkpoint(back) == encode_checkpoint(m)


def test_checkpoint_errors(tmp_path):
    raw = encode_checkpoint(build_model(MINI, (10, 1), seed=0))
    with pytest.raises(BadMagicError):
        decode_checkpoint(encode_dataset(Dataset(np.ones((1, 2, 1)), np.ones((1, 1)))))
    with pytest.raises(TruncatedFileError):
        decode_checkpoint(raw[:-3])
    with pytest.raises(FileIOError):
        load_checkpoint(str(tmp_path / "nope.mrc"))
