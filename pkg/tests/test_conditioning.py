import numpy as np
import pytest

from idegen.autodiff.gradcheck import run_model_checks
from idegen.autodiff.nn import Init
from idegen.autodiff.rng import Rng
from idegen.autodiff.tensor import Tensor, no_grad
from idegen.cfpm import CrossAttention, TokenGrid, TransformerLayer
from idegen.conditioning import (CondConfig, Conditioner, TextEncoder, TrajectoryEncoder, build_condition,
                                 encode_text, encode_trajectory, exo_update, temporal_fuse,
                                 trajectory_features)
from idegen.errors import ConfigError, DimensionError, NumericError, VocabularyError

C = 8


def _traj(T=5, seed=0):
    r = Rng(seed)
    xy = 20 + np.cumsum(r.normal((T, 2)), axis=0)
    return np.concatenate([xy, r.normal((T, 1))], axis=1)


def _grid(n=5, seed=1):
    return TokenGrid(Tensor(Rng(seed).normal((1, n, C)).astype(np.float32)))


def test_constant_pose_has_zero_deltas_and_identical_rows():
    traj = np.tile([[10.0, 12.0, 0.4]], (6, 1))
    f = trajectory_features(traj, 64)
    assert np.all(f[:, 4:] == 0)
    enc = TrajectoryEncoder(Init(0, "t"), C)
    out = encode_trajectory(enc, traj, 64).data
    assert out.shape == (6, C)
    assert np.all(out == out[0])


def test_translation_changes_only_absolute_features():
    traj = _traj()
    moved = traj + np.array([5.0, -3.0, 0.0])
    a, b = trajectory_features(traj, 64), trajectory_features(moved, 64)
    assert np.allclose(a[:, 2:], b[:, 2:])
    assert not np.allclose(a[:, :2], b[:, :2])


def test_heading_delta_wraps():
    traj = np.array([[0, 0, 3.1], [0, 0, -3.1]])
    assert abs(trajectory_features(traj, 64)[1, 6] - (2 * np.pi - 6.2)) < 1e-5


def test_trajectory_errors():
    with pytest.raises(NumericError):
        trajectory_features(np.array([[0.0, np.nan, 0.0]]), 64)
    with pytest.raises(DimensionError):
        trajectory_features(np.zeros((4, 2)), 64)


def test_temporal_fuse_shape_and_residual():
    y_ego = _grid()
    ca = CrossAttention(Init(0, "f"), C, 2)
    feats = Tensor(Rng(2).normal((4, C)).astype(np.float32))
    assert temporal_fuse(y_ego, feats, ca).shape == (1, 4, 5, C)
    ca.attn.wv.data[...] = 0
    out = temporal_fuse(y_ego, Tensor(np.zeros((4, C), np.float32)), ca).data
    assert np.array_equal(out, np.broadcast_to(y_ego.tokens.data[:, None], out.shape))


def test_temporal_fuse_single_frame():
    out = temporal_fuse(_grid(), Tensor(np.ones((1, C), np.float32)), CrossAttention(Init(0, "f"), C, 2))
    assert out.shape == (1, 1, 5, C)


def test_temporal_fuse_width_mismatch():
    with pytest.raises(DimensionError):
        temporal_fuse(_grid(), Tensor(np.ones((3, C + 1), np.float32)), CrossAttention(Init(0, "f"), C, 2))


def _exo_parts():
    return CrossAttention(Init(0, "q"), C, 2), TransformerLayer(Init(0, "l"), C, 2)


def test_exo_update_shape_and_residual():
    y_exo = _grid(seed=3)
    r_ego = Tensor(Rng(4).normal((1, 3, 5, C)).astype(np.float32))
    ca, layer = _exo_parts()
    assert exo_update(y_exo, r_ego, ca, layer).shape == (1, 3, 5, C)
    ca.attn.wv.data[...] = 0
    layer.attn.wv.data[...] = 0
    layer.fc2.w.data[...] = 0
    out = exo_update(y_exo, r_ego, ca, layer).data
    assert np.allclose(out, np.broadcast_to(y_exo.tokens.data[:, None], out.shape), atol=1e-6)


def test_exo_update_is_per_frame():
    y_exo = _grid(seed=3)
    r = Rng(5).normal((1, 4, 5, C)).astype(np.float32)
    perm = [2, 0, 3, 1]
    ca, layer = _exo_parts()
    with no_grad():
        a = exo_update(y_exo, Tensor(r), ca, layer).data
        b = exo_update(y_exo, Tensor(r[:, perm]), ca, layer).data
    assert np.array_equal(a[:, perm], b)


def test_text_encoder_contract():
    enc = TextEncoder(Init(0, "adu"), 6, 4, C)
    null1, null2 = encode_text(enc, []).data, encode_text(enc, []).data
    assert np.array_equal(null1, null2) and np.array_equal(null1, enc.null.data)
    assert np.allclose(encode_text(enc, [0, 3, 5]).data, encode_text(enc, [3, 0, 5]).data, atol=1e-6)
    assert not np.allclose(encode_text(enc, [0, 3]).data, encode_text(enc, [1, 3]).data)
    with pytest.raises(VocabularyError, match="17"):
        encode_text(enc, [1, 17])


def _small_cond(**kw):
    cfg = CondConfig(S=16, T=3, patch=4, width=C, heads=2, vocab_size=6, text_dim=4, **kw)
    return Conditioner(cfg, seed=0)


def _inputs():
    r = Rng(6)
    return r.random((2, 3, 16, 16)), r.random((2, 3, 16, 16)), _traj(3)[None].repeat(2, 0), [[0, 1], []]


def _encoder(x):
    return Tensor(np.asarray(x, np.float32)[:, :2, ::4, ::4])


def test_bundle_shapes_and_determinism():
    cond = _small_cond()
    exo, ego, traj, tok = _inputs()
    with no_grad():
        a = build_condition(cond, _encoder, exo, ego, traj, tok)
        b = build_condition(cond, _encoder, exo, ego, traj, tok)
    assert a.r_exo.shape == (2, 3, 17, C)
    assert a.t_text.shape == (2, C)
    assert a.z.shape == (2, 2, 4, 4)
    assert np.array_equal(a.context().data, b.context().data)


def test_disabling_ttm_repeats_exo_tokens():
    cond = _small_cond(disable=("ttm",))
    exo, ego, traj, tok = _inputs()
    with no_grad():
        bundle = build_condition(cond, _encoder, exo, ego, traj, tok)
        y_exo, _ = cond.tokens(exo, ego)
    expect = np.broadcast_to(y_exo.tokens.data[:, None], bundle.r_exo.shape)
    assert np.array_equal(bundle.r_exo.data, expect)
    assert cond.ttm is None and not any(t.name.startswith("ttm.") for t in cond.tensors())


def test_ablation_variants_drop_their_modules():
    exo, ego, traj, tok = _inputs()
    no_cfpm = _small_cond(disable=("cfpm",))
    no_adu = _small_cond(disable=("adu",))
    with no_grad():
        b1 = build_condition(no_cfpm, _encoder, exo, ego, traj, tok)
        b2 = build_condition(no_adu, _encoder, exo, ego, traj, tok)
    assert b1.y_cls_exo is None and not any(t.name.startswith("cfpm.") for t in no_cfpm.tensors())
    assert b2.t_text is None and b2.context().shape == (2, 3, 17, C)


@pytest.mark.parametrize("mode,extra", [("traj_condition", 1), ("traj_concat", 2), ("ego_video_feats", 1)])
def test_fuse_modes_add_context_tokens(mode, extra):
    cond = Conditioner(CondConfig(S=32, T=3, patch=8, width=C, heads=2, vocab_size=6, text_dim=4,
                                  fuse_mode=mode), 0)
    r = Rng(7)
    exo, ego = r.random((2, 3, 32, 32)), r.random((2, 3, 32, 32))
    video = r.random((2, 3, 3, 32, 32))
    with no_grad():
        b = build_condition(cond, _encoder, exo, ego, _traj(3)[None].repeat(2, 0), [[0], [1]], ego_video=video)
    assert cond.ttm is None
    assert b.context().shape == (2, 3, 17 + 1 + extra, C)


def test_bad_condition_config():
    with pytest.raises(ConfigError):
        CondConfig(disable=("nope",))
    with pytest.raises(ConfigError):
        CondConfig(fuse_mode="nope")


def test_conditioning_gradients():
    err, _, ok = run_model_checks(names=["model:conditioning"])["model:conditioning"]
    assert ok, err
