"""Network construction, forward contracts, gradient flow, checkpoints."""

import numpy as np
import pytest

from cxrkit.autodiff import Tensor, backward, no_grad, ops
from cxrkit.exceptions import CheckpointError, ConfigError, ShapeError
from cxrkit.model import Model, ModelConfig, build_model, full_scale_config

SMALL = ModelConfig(input_size=16, dense_block_sizes=(1, 1), growth_rate=4,
                    num_abnormality_classes=3, num_spatial_classes=2, seed=7)


def small_batch(seed=3, n=2, size=16):
    return np.random.default_rng(seed).random((n, size, size))


# ---------------------------------------------------------------- construction

def test_same_seed_builds_identical_parameters():
    a = build_model(SMALL)
    b = build_model(SMALL)
    assert np.array_equal(a.parameter_vector(), b.parameter_vector())
    c = build_model(ModelConfig(**{**SMALL.to_dict(), "seed": 8,
                                   "dense_block_sizes": (1, 1),
                                   "decoder_stages": None}))
    assert not np.array_equal(a.parameter_vector(), c.parameter_vector())


def test_dense_block_channel_arithmetic():
    cfg = ModelConfig(input_size=64, dense_block_sizes=(3,), growth_rate=5,
                      num_abnormality_classes=2, num_spatial_classes=2,
                      decoder_stages=())
    m = build_model(cfg)
    c0 = 2 * cfg.growth_rate
    # layer j inside the block sees c0 + j*g input channels
    for j in range(3):
        w = m.params[f"block0.layer{j}.conv.w"]
        assert w.shape == (5, c0 + j * 5, 3, 3)
    assert m.encoder_channels == c0 + 3 * 5
    assert cfg.encoder_channels == m.encoder_channels


def test_transition_halves_channels():
    cfg = ModelConfig(input_size=32, dense_block_sizes=(2, 2), growth_rate=6,
                      num_abnormality_classes=2, num_spatial_classes=2,
                      decoder_stages=())
    m = build_model(cfg)
    pre = 2 * 6 + 2 * 6                       # stem + block 0
    assert m.params["trans0.conv.w"].shape == (pre // 2, pre, 1, 1)


def test_bias_and_bn_initialization():
    m = build_model(SMALL)
    for name, t in m.params.items():
        if name.endswith(".b") or name.endswith(".beta"):
            assert not t.data.any(), name
        if name.endswith(".gamma"):
            assert np.array_equal(t.data, np.ones(t.shape)), name
    for name, arr in m.bn_stats.items():
        expect = np.zeros(arr.shape) if name.endswith(".mean") else np.ones(arr.shape)
        assert np.array_equal(arr, expect), name


def test_he_uniform_bounds():
    m = build_model(SMALL)
    w = m.params["stem.conv.w"].data
    limit = np.sqrt(6.0 / (3 * 9))
    assert np.all(np.abs(w) < limit)
    assert np.abs(w).max() > 0.8 * limit      # actually fills the range


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(dense_block_sizes=())
    with pytest.raises(ConfigError):
        ModelConfig(dense_block_sizes=(2, 0))
    with pytest.raises(ConfigError):
        ModelConfig(growth_rate=0)
    with pytest.raises(ConfigError):
        ModelConfig(num_abnormality_classes=0)
    with pytest.raises(ConfigError):
        ModelConfig(input_size=60)            # not divisible by 2^3
    with pytest.raises(ConfigError):
        ModelConfig(input_size=16, dense_block_sizes=(1, 1),
                    decoder_stages=((2, 8),))  # x2 cannot map grid 4 to 16
    with pytest.raises(ConfigError):
        build_model("not a config")


def test_decoder_stage_resolution():
    auto = SMALL.resolved_decoder_stages()
    assert np.prod([f for f, _ in auto]) * SMALL.encoder_grid == SMALL.input_size
    explicit = ModelConfig(input_size=16, dense_block_sizes=(1, 1),
                           num_abnormality_classes=3, num_spatial_classes=2,
                           decoder_stages=((4, 6),))
    assert explicit.resolved_decoder_stages() == ((4, 6),)
    again = ModelConfig.from_dict(explicit.to_dict())
    assert again == explicit


def test_disabled_decoder_creates_no_decoder_parameters():
    cfg = ModelConfig(input_size=16, dense_block_sizes=(1, 1), growth_rate=4,
                      num_abnormality_classes=3, num_spatial_classes=2,
                      decoder_stages=(), seed=7)
    m = build_model(cfg)
    assert not any(name.startswith("dec") for name in m.params)
    out = m.forward(small_batch())
    assert out.seg_map is None
    # shared trunk is bit-identical to the decoder-carrying build
    full = build_model(SMALL)
    shared = [n for n in m.params if not n.startswith("head.")]
    for n in shared:
        assert np.array_equal(m.params[n].data, full.params[n].data), n


def test_full_scale_geometry():
    cfg = full_scale_config()
    assert len(cfg.dense_block_sizes) == 5
    assert cfg.num_encoder_convs == 121
    assert cfg.encoder_grid == 16
    assert cfg.num_abnormality_classes == 26 and cfg.num_spatial_classes == 9
    build_model(ModelConfig(**{**cfg.to_dict(), "dense_block_sizes": cfg.dense_block_sizes,
                               "decoder_stages": ()}))     # constructible


def test_full_scale_forward_runs_one_image():
    cfg = full_scale_config(growth_rate=4)
    m = build_model(cfg)
    with no_grad():
        out = m.forward(np.random.default_rng(0).random((1, 512, 512)))
    assert out.abnormality_probs.shape == (1, 26)
    assert out.spatial_probs.shape == (1, 9)
    assert out.seg_map.shape == (1, 2, 512, 512)


# ---------------------------------------------------------------- forward

def test_output_shapes_and_range():
    m = build_model(SMALL)
    out = m.forward(small_batch(n=3))
    assert out.abnormality_probs.shape == (3, 3)
    assert out.spatial_probs.shape == (3, 2)
    assert out.seg_map.shape == (3, 2, 16, 16)
    for t in (out.abnormality_probs, out.spatial_probs, out.seg_map):
        assert np.all(t.data > 0) and np.all(t.data < 1)


def test_single_image_is_promoted_to_batch():
    m = build_model(SMALL)
    out = m.forward(small_batch(n=1)[0])
    assert out.abnormality_probs.shape == (1, 3)


def test_wrong_image_size_rejected():
    m = build_model(SMALL)
    with pytest.raises(ShapeError):
        m.forward(np.zeros((2, 8, 8)))
    with pytest.raises(ShapeError):
        m.forward(np.zeros((2, 16, 16, 1)))


def test_zeroed_final_layers_emit_half_everywhere():
    m = build_model(SMALL)
    for name in ("head.abn.w", "head.abn.b", "head.loc.w", "head.loc.b",
                 "dec_out.conv.w", "dec_out.conv.b"):
        m.params[name].data = np.zeros(m.params[name].shape)
    out = m.forward(small_batch())
    assert np.array_equal(out.abnormality_probs.data, np.full((2, 3), 0.5))
    assert np.array_equal(out.spatial_probs.data, np.full((2, 2), 0.5))
    assert np.array_equal(out.seg_map.data, np.full((2, 2, 16, 16), 0.5))


def test_eval_forward_is_pure():
    m = build_model(SMALL)
    x = small_batch()
    stats_before = {k: v.copy() for k, v in m.bn_stats.items()}
    a = m.forward(x)
    b = m.forward(x)
    assert np.array_equal(a.abnormality_probs.data, b.abnormality_probs.data)
    assert np.array_equal(a.seg_map.data, b.seg_map.data)
    for k, v in m.bn_stats.items():
        assert np.array_equal(v, stats_before[k]), k


def test_training_forward_updates_running_stats():
    m = build_model(SMALL)
    before = {k: v.copy() for k, v in m.bn_stats.items()}
    m.forward(small_batch(), training=True)
    changed = [k for k, v in m.bn_stats.items() if not np.array_equal(v, before[k])]
    assert set(changed) == set(m.bn_stats)    # every layer saw the batch


# ---------------------------------------------------------------- gradients

def encoder_param_names(m):
    return [n for n in m.params
            if n.startswith(("stem.", "block", "trans"))]


def test_gradient_reaches_encoder_from_all_heads():
    m = build_model(SMALL)
    out = m.forward(small_batch(n=4), training=True)
    total = ops.add(ops.add(ops.reduce_sum(out.abnormality_probs),
                            ops.reduce_sum(out.spatial_probs)),
                    ops.reduce_sum(out.seg_map))
    backward(total)
    hit = sum(int(np.count_nonzero(m.params[n].grad))
              for n in encoder_param_names(m))
    size = sum(m.params[n].data.size for n in encoder_param_names(m))
    assert hit >= 0.99 * size


@pytest.mark.parametrize("head", ["abnormality_probs", "spatial_probs", "seg_map"])
def test_each_head_alone_reaches_the_stem(head):
    m = build_model(SMALL)
    out = m.forward(small_batch(), training=True)
    backward(ops.reduce_sum(getattr(out, head)))
    g = m.params["stem.conv.w"].grad
    assert g is not None and np.count_nonzero(g)


def test_zero_grad_clears_every_parameter():
    m = build_model(SMALL)
    out = m.forward(small_batch(), training=True)
    backward(ops.reduce_sum(out.abnormality_probs))
    m.zero_grad()
    assert all(t.grad is None for t in m.params.values())


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_roundtrip(tmp_path):
    m = build_model(SMALL)
    m.forward(small_batch(), training=True)   # move running stats off init
    path = tmp_path / "model.ckpt"
    m.save(path)
    loaded = Model.load(path)
    assert loaded.config == m.config
    assert np.array_equal(loaded.parameter_vector(), m.parameter_vector())
    for k in m.bn_stats:
        assert np.array_equal(loaded.bn_stats[k], m.bn_stats[k]), k
    x = small_batch(seed=11)
    assert np.array_equal(loaded.forward(x).abnormality_probs.data,
                          m.forward(x).abnormality_probs.data)


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "c.ckpt"
    p.write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError):
        Model.load(p)


def test_checkpoint_rejects_wrong_version(tmp_path):
    m = build_model(SMALL)
    p = tmp_path / "c.ckpt"
    m.save(p)
    raw = bytearray(p.read_bytes())
    raw[4] = 99
    p.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        Model.load(p)


def test_checkpoint_rejects_truncation_and_trailing_bytes(tmp_path):
    m = build_model(SMALL)
    p = tmp_path / "c.ckpt"
    m.save(p)
    raw = p.read_bytes()
    p.write_bytes(raw[:-16])
    with pytest.raises(CheckpointError):
        Model.load(p)
    p.write_bytes(raw + b"\x00" * 8)
    with pytest.raises(CheckpointError):
        Model.load(p)


def test_loaded_parameters_stay_trainable(tmp_path):
    m = build_model(SMALL)
    p = tmp_path / "c.ckpt"
    m.save(p)
    loaded = Model.load(p)
    out = loaded.forward(small_batch(), training=True)
    backward(ops.reduce_sum(out.abnormality_probs))
    assert loaded.params["head.abn.w"].grad is not None


# ---------------------------------------------------------------- golden run

GOLDEN = {
    "abn": ["0x1.39ee6c0e2e846p-1", "0x1.2bc6b870ef2c8p-1", "0x1.d630fe5739b87p-2"],
    "loc": ["0x1.f193424d42ea6p-2", "0x1.88b8ec78b0220p-2"],
    "seg": ["0x1.46f11dbb7c85dp-1", "0x1.1453da4635cfcp-1"],
    "seg_mean": ["0x1.2ddfdb4597550p-1"],
}


def test_forward_reproduces_committed_reference():
    m = build_model(SMALL)
    with no_grad():
        out = m.forward(small_batch())
    got = {
        "abn": out.abnormality_probs.data[0],
        "loc": out.spatial_probs.data[1],
        "seg": np.array([out.seg_map.data[0, 0, 5, 9],
                         out.seg_map.data[1, 1, 10, 3]]),
        "seg_mean": np.array([out.seg_map.data.mean()]),
    }
    for key, values in GOLDEN.items():
        expect = np.array([float.fromhex(h) for h in values])
        assert np.max(np.abs(got[key] - expect)) < 1e-9, key
