import numpy as np
import pytest

from idegen.autodiff import ops
from idegen.autodiff.gradcheck import run_model_checks
from idegen.autodiff.rng import Rng
from idegen.autodiff.tensor import Tensor, no_grad
from idegen.checkpoint import encode_checkpoint
from idegen.errors import DimensionError
from idegen.lfae import (LatentFlowAE, PerceptualNet, Stage1Config, stage1_loss, stage1_terms,
                         train_stage1, warp)
from idegen.worldsim import WorldConfig, generate_clip, generate_dataset, gt_backward_flow, warp_numpy

S = 32


@pytest.fixture(scope="module")
def model():
    return LatentFlowAE(Stage1Config(S=S, c_lat=4, width=4), seed=3)


@pytest.fixture(scope="module")
def frames():
    return Rng(0).random((2, 3, S, S)).astype(np.float32)


def test_encode_shape_determinism_and_zero_frame(model, frames):
    with no_grad():
        z = model.encode(frames[0])
        assert z.shape == (4, S // 4, S // 4)
        assert np.array_equal(z.data, model.encode(frames[0]).data)
        assert np.isfinite(model.encode(np.zeros((3, S, S), np.float32)).data).all()


def test_encode_rejects_wrong_size(model):
    with pytest.raises(DimensionError):
        model.encode(np.zeros((3, S + 4, S + 4), np.float32))


def test_flow_head_ranges(model, frames):
    with no_grad():
        f, m = model.estimate_flow(frames[0], frames[1])
    assert f.shape == (2, S // 4, S // 4) and m.shape == (1, S // 4, S // 4)
    assert np.all(m.data > 0) and np.all(m.data < 1)
    assert np.all(np.abs(f.data) <= model.cfg.flow_scale)


def test_flow_shape_mismatch(model, frames):
    with pytest.raises(DimensionError):
        model.estimate_flow(frames[0], frames)


def test_decode_shape_and_range(model):
    with no_grad():
        out = model.decode(Rng(1).normal((4, S // 4, S // 4)) * 10)
    assert out.shape == (3, S, S)
    assert out.data.min() >= 0 and out.data.max() <= 1


def test_warp_identity_and_annihilation():
    z = Tensor(Rng(2).normal((4, 6, 6)).astype(np.float32))
    zero_f = np.zeros((2, 6, 6), np.float32)
    assert np.array_equal(warp(z, zero_f, np.ones((1, 6, 6), np.float32)).data, z.data)
    assert not warp(z, zero_f, np.zeros((1, 6, 6), np.float32)).data.any()


def test_warp_one_pixel_shift_matches_index_oracle():
    z = Rng(3).normal((2, 8, 8))
    f = np.zeros((2, 8, 8))
    f[0] = 2.0 / 8
    out = warp(Tensor(z), Tensor(f), Tensor(np.ones((1, 8, 8)))).data
    assert np.allclose(out[:, :, :-1], z[:, :, 1:], atol=1e-12)


def test_warp_shape_mismatch():
    with pytest.raises(DimensionError):
        warp(np.zeros((2, 4, 4)), np.zeros((2, 5, 5)), np.ones((1, 4, 4)))


def test_perceptual_distance_zero_on_identical(frames):
    per = PerceptualNet()
    with no_grad():
        assert per.distance(frames, frames).item() == 0.0
        assert per.distance(frames[:1], frames[1:]).item() > 0


def test_stage1_terms_nonnegative_and_lambda_zero(frames):
    m = LatentFlowAE(Stage1Config(S=S, c_lat=4, width=4, lam=0.0), seed=1)
    per = PerceptualNet()
    with no_grad():
        rec, pl = stage1_terms(m, per, frames[:1], frames[1:])
        total = stage1_loss(m, per, frames[:1], frames[1:])
    assert rec.item() >= 0 and pl.item() >= 0
    assert total.item() == rec.item()


def test_perfect_reconstruction_gives_zero_terms(frames):
    per = PerceptualNet()
    target = Tensor(frames[:1])
    with no_grad():
        assert ops.mse(target, target).item() == 0.0
        assert per.distance(target, target).item() == 0.0


def test_ground_truth_flow_beats_zero_flow_on_moving_pairs():
    """Pixel-space objective with an identity codec: substituting the true motion lowers it."""
    per = PerceptualNet()
    cfg = WorldConfig()
    clip, scene = generate_clip(cfg, 4, 4, 0)
    tr = clip.trajectory
    i = np.asarray(clip.exo[0], np.float64)
    j = np.asarray(clip.exo[-1], np.float64)
    f, m = gt_backward_flow(scene, tr[0], tr[-1])

    def loss(rec):
        with no_grad():
            return float(((rec - j) ** 2).mean()) + 0.1 * per.distance(rec[None], j[None]).item()

    assert loss(m * warp_numpy(i, f)) <= loss(i)


def test_model_gradients_match_finite_differences():
    report = run_model_checks(names=["model:lfae"])
    err, tol, ok = report["model:lfae"]
    assert ok, err


def _tiny_run(tmp_path, name, ds):
    saved = {}

    def save(path, model, per):
        saved[path.name] = encode_checkpoint({**model.state_dict(), **per.state_dict()}, {})

    cfg = Stage1Config(S=S, c_lat=4, width=4, iterations=3, batch=2, eval_clips=2)
    train_stage1(ds, cfg, 0, tmp_path / name, save=save)
    return saved["stage1.ckpt"], (tmp_path / name / "train_log.csv").read_bytes()


def test_training_is_bitwise_deterministic(tmp_path):
    ds = generate_dataset(WorldConfig(S=S, T=3, clips=10), 1, tmp_path / "ds")
    a = _tiny_run(tmp_path, "a", ds)
    b = _tiny_run(tmp_path, "b", ds)
    assert a == b


def test_paper_scale_settings_accepted():
    cfg = Stage1Config(S=128, lr=2e-4, batch=100, iterations=120_000)
    LatentFlowAE(cfg, 0)
    with pytest.raises(ValueError):
        Stage1Config(lam=-1.0)


def test_sigmoid_occlusion_starts_mostly_open(model, frames):
    with no_grad():
        _, m = model.estimate_flow(frames[0], frames[0])
    assert float(np.mean(m.data)) > 0.8
