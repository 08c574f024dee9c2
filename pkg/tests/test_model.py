"""Architecture construction, shape tracing, forward pass, serialization."""

import numpy as np
import pytest

from uyolo import container
from uyolo.model import UYoloConfig, build_uyolo, forward, shape_trace


def per_layer_param_formula(config):
    """Closed-form trainable parameter count from the layer table."""
    from uyolo.model import DS_CHANNELS, FIRST_CONV_FILTERS

    k = config.first_conv_kernel
    total = FIRST_CONV_FILTERS * config.channels * k * k + FIRST_CONV_FILTERS  # first conv
    total += 2 * FIRST_CONV_FILTERS  # its batchnorm
    for cin, cout in DS_CHANNELS:
        total += cin * 9 + cin + 2 * cin  # depthwise + bn
        total += cout * cin + cout + 2 * cout  # pointwise + bn
    flat = 1024 if config.input_res == 128 else None
    assert flat is not None
    total += config.head_width * flat + config.head_width  # first head linear
    total += 2 * config.head_width  # head batchnorm
    total += config.output_length * config.head_width + config.output_length
    return total


def test_default_flatten_is_1024():
    model = build_uyolo(UYoloConfig())
    trace = shape_trace(model)
    flatten_idx = next(i for i, l in enumerate(model.layers) if l.kind == "flatten")
    assert trace[flatten_idx + 1] == (1024,)


@pytest.mark.parametrize("n,expected", [(5, 375), (4, 350), (1, 275)])
def test_output_lengths(n, expected):
    cfg = UYoloConfig(N=n)
    assert cfg.output_length == expected
    model = build_uyolo(cfg)
    assert shape_trace(model)[-1] == (expected,)


def test_trace_landmarks():
    model = build_uyolo(UYoloConfig())
    trace = shape_trace(model)
    assert trace[1] == (64, 63, 63)  # after first conv
    pools = [i for i, l in enumerate(model.layers) if l.kind == "maxpool"]
    assert trace[pools[0] + 1] == (64, 31, 31)
    assert trace[pools[-1] + 1] == (64, 4, 4)


def test_trace_empty_graph():
    from uyolo.model import ModelGraph

    m = ModelGraph(UYoloConfig(), [])
    assert shape_trace(m) == [(3, 128, 128)]


def test_variant_88_flatten_256():
    cfg = UYoloConfig.for_resolution(88)
    assert cfg.head_width == 256
    model = build_uyolo(cfg)
    trace = shape_trace(model)
    flatten_idx = next(i for i, l in enumerate(model.layers) if l.kind == "flatten")
    assert trace[flatten_idx + 1] == (256,)


def test_variant_256_uses_kernel7():
    cfg = UYoloConfig.for_resolution(256)
    assert cfg.first_conv_kernel == 7
    assert cfg.ds_paddings[:2] == (2, 2)
    model = build_uyolo(cfg)
    assert shape_trace(model)[1] == (64, 125, 125)


def test_collapsing_trace_rejected():
    with pytest.raises(ValueError, match="layer index"):
        build_uyolo(UYoloConfig(input_res=16))


def test_param_count_matches_closed_form():
    cfg = UYoloConfig(N=5)
    model = build_uyolo(cfg)
    expected = per_layer_param_formula(cfg)
    assert model.trainable_parameter_count() == expected
    assert abs(expected - 1.52e6) < 0.01e6  # ~1.52M for the 5-class default


def test_forward_zero_model():
    cfg = UYoloConfig(N=5)
    model = build_uyolo(cfg)
    for name, arr in model.named_parameters():
        if not name.endswith("running_var"):
            model.set_parameter(name, np.zeros_like(arr))
    out = forward(model, np.zeros((3, 128, 128), dtype=np.float32))
    assert out.shape == (375,)
    assert not out.any()


def test_forward_deterministic():
    cfg = UYoloConfig(N=5)
    model = build_uyolo(cfg, seed=3)
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 1, size=(3, 128, 128)).astype(np.float32)
    a = forward(model, img)
    b = forward(model, img)
    assert a.shape == (375,)
    np.testing.assert_array_equal(a, b)


def test_forward_rejects_wrong_resolution():
    model = build_uyolo(UYoloConfig())
    with pytest.raises(ValueError, match="shape"):
        forward(model, np.zeros((3, 64, 64), dtype=np.float32))


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown keys"):
        UYoloConfig.from_dict({"input_res": 128, "bogus": 1})


def test_roundtrip_exact(tmp_path):
    model = build_uyolo(UYoloConfig(N=3), seed=7)
    path = tmp_path / "m.uyv1"
    container.save_model(model, path)
    loaded = container.load_model(path)
    assert loaded.config == model.config
    for (n1, a1), (n2, a2) in zip(model.named_parameters(), loaded.named_parameters()):
        assert n1 == n2
        assert a1.tobytes() == a2.tobytes()


def test_roundtrip_forward_identical(tmp_path):
    model = build_uyolo(UYoloConfig(N=3), seed=1)
    path = tmp_path / "m.uyv1"
    container.save_model(model, path)
    loaded = container.load_model(path)
    img = np.random.default_rng(5).uniform(size=(3, 128, 128)).astype(np.float32)
    np.testing.assert_array_equal(forward(model, img), forward(loaded, img))


def test_corrupted_magic(tmp_path):
    model = build_uyolo(UYoloConfig(N=1), seed=0)
    path = tmp_path / "m.uyv1"
    container.save_model(model, path)
    data = bytearray(path.read_bytes())
    data[:4] = b"NOPE"
    with pytest.raises(container.MagicError):
        container.model_from_bytes(bytes(data))


def test_truncated_blob(tmp_path):
    model = build_uyolo(UYoloConfig(N=1), seed=0)
    path = tmp_path / "m.uyv1"
    container.save_model(model, path)
    data = path.read_bytes()
    with pytest.raises(container.TruncatedError):
        container.model_from_bytes(data[: len(data) // 2])


def test_inconsistent_offsets(tmp_path):
    import json
    import struct

    model = build_uyolo(UYoloConfig(N=1), seed=0)
    path = tmp_path / "m.uyv1"
    container.save_model(model, path)
    data = path.read_bytes()
    hlen = struct.unpack("<I", data[6:10])[0]
    header = json.loads(data[10 : 10 + hlen])
    header["tensors"][0]["shape"] = [1, 2, 3]
    hb = json.dumps(header, separators=(",", ":"), sort_keys=True).encode()
    bad = data[:4] + struct.pack("<HI", 1, len(hb)) + hb + data[10 + hlen :]
    with pytest.raises(container.LayoutError):
        container.model_from_bytes(bad)


def test_sparse_layer_reconstructs_zeros(tmp_path):
    model = build_uyolo(UYoloConfig(N=1), seed=2)
    w = model.layers[0].weight
    w[np.abs(w) < np.quantile(np.abs(w), 0.7)] = 0.0
    path = tmp_path / "m.uyv1"
    container.save_model(model, path, sparse="always")
    loaded = container.load_model(path)
    np.testing.assert_array_equal(loaded.layers[0].weight, w)
    # encoding actually chosen
    import json
    import struct

    data = path.read_bytes()
    hlen = struct.unpack("<I", data[6:10])[0]
    header = json.loads(data[10 : 10 + hlen])
    rec = next(r for r in header["tensors"] if r["name"] == "layers.0.weight")
    assert rec["encoding"] == "bitmap-sparse"
    assert rec["length"] == (w.size + 7) // 8 + np.count_nonzero(w) * 4
