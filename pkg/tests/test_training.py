import json
import math

import numpy as np
import pytest
import torch

from auheat.backbone import NetworkSpec, build_network
from auheat.codec import encode
from auheat.synth import FrameSample, synth_samples
from auheat.topology import au_points, load_topology
from auheat.training import (
    AugmentationConfig, AugParams, FrameDataset, TrainConfig, TrainingDiverged, apply_aug, augment,
    cosine_lr, heatmap_loss, infer, make_targets, predict_trace, resize_sample, sample_aug,
    similarity_matrix, train,
)
from tests.oracles import loss_loop

AUS = (6, 10, 12, 14, 17)
TINY = NetworkSpec(n_out=5, stem_channels=16, channels=32, depth=2)


@pytest.fixture(scope="module")
def samples():
    return [s for _, s in synth_samples(16, AUS, seed=11, size=64)]


def targets_for(sample, topo):
    return encode(au_points(sample.landmarks, topo), sample.label, (16, 16))


# --- loss ---

def test_loss_examples():
    t = torch.rand(1, 1, 2, 2)
    assert heatmap_loss(t, t).item() == 0
    assert heatmap_loss(t + 0.5, t).item() == pytest.approx(1.0)
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 2, 4, 5)), rng.normal(size=(3, 2, 4, 5))
    assert heatmap_loss(torch.from_numpy(a), torch.from_numpy(b)).item() == pytest.approx(loss_loop(a, b), abs=1e-6)
    with pytest.raises(ValueError):
        heatmap_loss(torch.zeros(1, 2, 4, 4), torch.zeros(1, 3, 4, 4))


# --- schedule ---

def test_cosine_restarts_values():
    assert cosine_lr(1e-4, 0) == pytest.approx(1e-4)
    assert cosine_lr(1e-4, 2.5) == pytest.approx(0.5e-4)
    assert cosine_lr(1e-4, 4.999) == pytest.approx(0.0, abs=1e-9)
    assert cosine_lr(1e-4, 5) == pytest.approx(1e-4)  # restart
    assert cosine_lr(1e-4, 1) == pytest.approx(1e-4 * (1 + math.cos(math.pi / 5)) / 2)


def test_cosine_no_restart():
    assert cosine_lr(1e-4, 5, restarts=False) == pytest.approx(0.0)
    assert cosine_lr(1e-4, 9, restarts=False, eta_min=1e-6) == pytest.approx(1e-6)


# --- augmentation ---

def test_identity_draw_unchanged(samples):
    s = samples[0]
    out = apply_aug(s, AugParams())
    assert out == s and out.image is not s.image
    assert sample_aug(AugmentationConfig(enabled=False), np.random.default_rng(0), (64, 64)).is_identity


def test_rotation_maps_landmarks(samples):
    s = samples[1]
    out = apply_aug(s, AugParams(angle=30.0))
    h, w = s.image.shape[:2]
    c = np.array([(w - 1) / 2, (h - 1) / 2])
    # image y runs down, so a positive (counter-clockwise on screen) angle uses this matrix
    t = math.radians(30)
    rot = np.array([[math.cos(t), math.sin(t)], [-math.sin(t), math.cos(t)]])
    np.testing.assert_allclose(out.landmarks, (s.landmarks - c) @ rot.T + c, atol=1e-6)
    np.testing.assert_array_equal(out.label, s.label)


def test_rotation_moves_pixels_consistently():
    img = np.zeros((64, 64, 3), np.uint8)
    img[20, 40] = 255
    lmk = np.zeros((68, 2))
    lmk[0] = (40, 20)
    s = FrameSample(img, lmk, np.zeros(5), AUS, "x")
    out = apply_aug(s, AugParams(angle=25.0, scale=1.1))
    y, x = np.unravel_index(out.image[..., 0].argmax(), (64, 64))
    assert abs(x - out.landmarks[0, 0]) <= 1 and abs(y - out.landmarks[0, 1]) <= 1


def test_similarity_matrix_centre_fixed():
    m = similarity_matrix(17.0, 1.3, (64, 48))
    c = np.array([(48 - 1) / 2, (64 - 1) / 2])
    np.testing.assert_allclose(m[:, :2] @ c + m[:, 2], c)


def test_flip_targets_mirror(samples):
    topo = load_topology(au_ids=AUS)
    for s in samples[:6]:
        out = apply_aug(s, AugParams(flip=True))
        np.testing.assert_allclose(targets_for(out, topo), targets_for(s, topo)[..., ::-1], atol=1e-5)


def test_translation_equivariance(samples):
    topo = load_topology(au_ids=AUS)
    s = samples[2]
    shifted = FrameSample(s.image, s.landmarks + [8.0, 4.0], s.label, s.au_ids, s.id)
    a, b = targets_for(s, topo), targets_for(shifted, topo)
    np.testing.assert_allclose(b[:, 1:, 2:], a[:, :-1, :-2], atol=5e-2)


def test_photometric_and_occlusion(samples):
    s = samples[3]
    out = apply_aug(s, AugParams(brightness=1.2, contrast=0.9, saturation=0.8, occlusion=(5, 6, 10, 12)))
    np.testing.assert_array_equal(out.landmarks, s.landmarks)
    patch = out.image[6:18, 5:15].reshape(-1, 3)
    assert (patch == patch[0]).all()


def test_sample_aug_bounds():
    cfg = AugmentationConfig()
    rng = np.random.default_rng(0)
    draws = [sample_aug(cfg, rng, (100, 80)) for _ in range(500)]
    assert all(-30 <= d.angle <= 30 and 0.8 <= d.scale <= 1.2 for d in draws)
    flips = np.mean([d.flip for d in draws])
    occl = [d.occlusion for d in draws if d.occlusion]
    assert 0.4 < flips < 0.6 and 0.2 < len(occl) / 500 < 0.4
    for x, y, w, h in occl:
        assert 8 <= w <= 24 and 10 <= h <= 30 and x + w <= 80 and y + h <= 100


def test_dataset_rng_keyed_by_epoch_and_index(samples):
    ds = FrameDataset(samples[:4], AugmentationConfig(), seed=3)
    a = ds[2][0].clone()
    assert torch.equal(ds[2][0], a)
    ds.epoch = 1
    assert not torch.equal(ds[2][0], a)
    ds.epoch = 0
    assert torch.equal(ds[2][0], a)


def test_fan_targets():
    lmk = torch.zeros(1, 68, 2, dtype=torch.float64)
    lmk[0, :, 0] = torch.arange(68) % 16 * 4 + 1.5
    lmk[0, :, 1] = 33.5
    t = make_targets(lmk, torch.zeros(1, 5), (16, 16), "landmarks")
    assert t.shape == (1, 68, 16, 16) and t.amax().item() == pytest.approx(1.0)


def test_resize_sample(samples):
    s = samples[0]
    r = resize_sample(s, 32)
    np.testing.assert_allclose(r.landmarks, (s.landmarks + 0.5) / 2 - 0.5)


# --- training ---

def test_zero_epochs_leave_model_untouched(samples):
    m = build_network(TINY, seed=0)
    before = {k: v.clone() for k, v in m.net.state_dict().items()}
    m, run = train(m, samples, TrainConfig(epochs=0))
    assert run["steps"] == 0
    assert all(torch.equal(before[k], v) for k, v in m.net.state_dict().items())


def test_manifest_and_log(tmp_path, samples):
    m = build_network(TINY, seed=0)
    cfg = TrainConfig(epochs=2, batch_size=8, base_lr=1e-3)
    m, run = train(m, samples, cfg, out_dir=tmp_path)
    doc = json.loads((tmp_path / "manifest.json").read_text())
    assert doc["weight_decay"] == 1e-6 and doc["momentum"] == 0.9
    assert doc["schedule"] == {"kind": "cosine_restarts", "period": 5}
    assert doc["config"]["aug"]["flip_prob"] == 0.5 and len(doc["dataset_hash"]) == 16
    lines = (tmp_path / "loss.log").read_text().splitlines()
    assert lines[0] == "step,epoch,lr,loss" and len(lines) == 1 + 4
    assert {p.name for p in tmp_path.glob("*.pt")} == {"epoch000.pt", "epoch001.pt", "final.pt"}


def test_seeded_reproducibility(samples):
    outs = []
    for _ in range(2):
        m = build_network(TINY, seed=0)
        m, _ = train(m, samples, TrainConfig(epochs=1, batch_size=8, base_lr=1e-3, seed=4))
        outs.append(predict_trace(m, samples[:4]).pred)
    np.testing.assert_allclose(outs[0], outs[1], atol=1e-5)


def test_divergence_guard(samples):
    m = build_network(TINY, seed=0)
    with torch.no_grad():
        m.net.head.bias.fill_(float("nan"))
    with pytest.raises(TrainingDiverged) as exc:
        train(m, samples, TrainConfig(epochs=1, batch_size=8))
    assert exc.value.step == 0


def test_channel_mismatch(samples):
    with pytest.raises(ValueError):
        train(build_network(NetworkSpec(n_out=3, stem_channels=16, channels=32, depth=2)), samples, TrainConfig())


def test_overfit_one_sample(samples):
    from auheat.experiment import overfit_one_sample

    losses = overfit_one_sample(samples[0], steps=50)
    assert len(losses) == 50 and losses[-1] <= 0.1 * losses[0]


def test_infer_zero_head_and_determinism(samples):
    m = build_network(TINY, seed=0)
    m.arch.update(au_ids=list(AUS), input_size=64)
    a = infer(m, samples[0].image)
    assert (a.intensity == 0).all() and not a.present.any()
    m2 = build_network(TINY, seed=0, zero_head=False)
    m2.arch.update(au_ids=list(AUS), input_size=64)
    b, c = infer(m2, samples[0].image), infer(m2, samples[0].image)
    np.testing.assert_array_equal(b.intensity, c.intensity)
    with pytest.raises(ValueError):
        infer(m2, np.zeros((10, 10)))
    with pytest.raises(OSError):
        infer(m2, "/nonexistent.png")


def test_infer_crops_non_square(samples):
    m = build_network(TINY, seed=0, zero_head=False)
    m.arch.update(au_ids=list(AUS), input_size=64)
    wide = np.concatenate([np.zeros((64, 16, 3), np.uint8), samples[0].image, np.zeros((64, 16, 3), np.uint8)], 1)
    np.testing.assert_allclose(infer(m, wide).intensity, infer(m, samples[0].image).intensity, atol=1e-6)
    np.testing.assert_allclose(infer(m, wide).location, infer(m, samples[0].image).location + [16, 0])
