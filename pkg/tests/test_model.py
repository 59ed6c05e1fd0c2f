import numpy as np
import pytest

from meegnet.errors import ConfigError, FormatError, NumericError, ShapeError
from meegnet.model import (KERNEL_SIZES, DetectedInterval, ModelConfig, build, checkpoint_bytes,
                           count_parameters_from_config, detect_intervals, expected_shapes,
                           load_checkpoint, parameter_breakdown, parameter_count,
                           save_checkpoint)

# [PAPER] output shapes per layer, batch axis omitted
PAPER_SHAPES = [(8, 16, 500), (8, 16, 500), (16, 1, 500), (16, 1, 500), (16, 1, 500),
                (16, 1, 125), (16, 1, 125), (16, 1, 125), (16, 1, 125), (16, 1, 125),
                (16, 1, 15), (16, 1, 15), (16,), (16,)]


def test_parameter_count_default():
    model = build()
    assert parameter_count(model) == 6784  # [PAPER]
    assert parameter_breakdown(model) == {
        "conv_temporal": 2000, "depthwise": 256, "separable": 512, "dense": 3856,
        "batch_norm_trainable": 80, "batch_norm_moving": 80}


@pytest.mark.parametrize("k", KERNEL_SIZES)
def test_parameter_count_matches_closed_form(k):
    cfg = ModelConfig(temporal_kernel=k)
    model = build(cfg)
    assert parameter_breakdown(model) == count_parameters_from_config(cfg)
    # [DERIVED] only the temporal conv depends on K
    assert parameter_count(model) == 6784 - 8 * 250 + 8 * k


def test_parameter_count_small_kernel():
    assert parameter_count(build(ModelConfig(temporal_kernel=10))) == 4864


@pytest.mark.parametrize("k", KERNEL_SIZES)
def test_shapes_follow_architecture_table(k):
    model = build(ModelConfig(temporal_kernel=k))
    traced = model.shapes()
    assert [s for _, s in traced] == PAPER_SHAPES
    assert traced == expected_shapes(model.config)
    out = model.forward(np.zeros((3, 1, 16, 500)))
    assert out.shape == (3, 16)


def test_config_rejects_bad_values():
    with pytest.raises(ConfigError):
        ModelConfig(window_samples=400)
    with pytest.raises(ConfigError):
        ModelConfig(pool1=100, pool2=100)
    with pytest.raises(ConfigError):
        ModelConfig(dtype="float16")
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"temporal_kernel": 10, "colour": "red"})


def test_input_shape_checked():
    model = build()
    with pytest.raises(ShapeError):
        model.forward(np.zeros((2, 1, 15, 500)))


def test_nan_input_raises():
    model = build()
    x = np.zeros((2, 1, 16, 500))
    x[1, 0, 3, 7] = np.nan
    with pytest.raises(NumericError):
        model.forward(x)


@pytest.mark.parametrize("k", (250, 125, 10, 1, 2))
@pytest.mark.parametrize("training", (False, True))
def test_fused_front_matches_layered(rng, k, training):
    x = rng.standard_normal((6, 1, 16, 500))
    y = (rng.random((6, 16)) < 0.3).astype(float)
    outs = []
    for fused in (True, False):
        model = build(ModelConfig(temporal_kernel=k), init_seed=3)
        for bn in model.batch_norm_layers():
            bn.buffers["moving_var"] = np.linspace(0.5, 2.0, bn.buffers["moving_var"].size)
        model.use_fused = fused
        model.reseed_dropout(9)
        p = model.forward(x, training=training, cache=True)
        grads = model.backward((p - y) / p.size)
        outs.append((p, grads, {k2: v.copy() for k2, v in model.state().items()}))
    (p1, g1, s1), (p2, g2, s2) = outs
    np.testing.assert_allclose(p1, p2, atol=1e-12)
    for name in g1:
        np.testing.assert_allclose(g1[name], g2[name], atol=1e-11, err_msg=name)
    for name in s1:
        np.testing.assert_allclose(s1[name], s2[name], atol=1e-12, err_msg=name)


def test_predict_is_inference_mode_and_chunked(rng):
    model = build()
    x = rng.standard_normal((7, 1, 16, 500))
    np.testing.assert_allclose(model.predict(x, batch_size=3), model.forward(x), atol=1e-13)
    assert model.predict(np.zeros((0, 1, 16, 500))).shape == (0, 16)


def test_build_is_deterministic():
    a, b = build(init_seed=5), build(init_seed=5)
    assert checkpoint_bytes(a) == checkpoint_bytes(b)
    assert checkpoint_bytes(a) != checkpoint_bytes(build(init_seed=6))


def test_checkpoint_round_trip(tmp_path, rng):
    model = build(ModelConfig(temporal_kernel=50), init_seed=2)
    model.forward(rng.standard_normal((4, 1, 16, 500)), training=True)  # move the BN stats
    path = save_checkpoint(model, tmp_path / "m.ckpt")
    loaded = load_checkpoint(path)
    assert loaded.config == model.config
    assert checkpoint_bytes(loaded) == path.read_bytes()
    x = rng.standard_normal((2, 1, 16, 500))
    np.testing.assert_array_equal(loaded.predict(x), model.predict(x))


def test_checkpoint_corruption_detected(tmp_path):
    raw = checkpoint_bytes(build())
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(raw[:-8])
    with pytest.raises(FormatError, match="expected"):
        load_checkpoint(bad)
    bad.write_bytes(b"garbage" + raw)
    with pytest.raises(FormatError):
        load_checkpoint(bad)


def test_max_norm_constraint():
    model = build(ModelConfig(max_norm_depthwise=0.1, max_norm_dense=0.05))
    model.apply_max_norm()
    k = model.layers[2].params["kernels"]
    assert np.sqrt((k ** 2).sum(axis=2)).max() <= 0.1 + 1e-12
    w = model.layers[12].params["weights"]
    assert np.sqrt((w ** 2).sum(axis=0)).max() <= 0.05 + 1e-12


def test_detect_intervals():
    probs = np.zeros((10, 2))
    probs[2:5, 0] = 0.9
    probs[9, 0] = 0.5
    probs[0, 1] = 0.7
    assert detect_intervals(probs) == [DetectedInterval(0, 2, 5), DetectedInterval(0, 9, 10),
                                       DetectedInterval(1, 0, 1)]
    assert detect_intervals(probs, threshold=0.95) == []
    assert detect_intervals(np.zeros((0, 16))) == []
