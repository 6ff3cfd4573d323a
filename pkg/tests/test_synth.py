import csv

import numpy as np
import pytest
from hypothesis import given, strategies as st

from auheat.synth import (
    MOTION, STEP, TEMPLATE, Identity, LoadStats, SynthFaceParams, canonical_landmarks,
    deformation_matrix, load_real, pose_landmarks, read_landmarks, synth_dataset, synth_frame,
    synth_samples, write_landmarks,
)
from auheat.topology import builtin_topology

AUS = (6, 10, 12, 14, 17)


def test_neutral_face_is_template_under_pose():
    params = SynthFaceParams(au={a: 0.0 for a in AUS}, yaw=12.0, roll=-4.0, scale=1.02, shift=(2, -1))
    s = synth_frame(params, 0, AUS)
    np.testing.assert_allclose(s.landmarks, pose_landmarks(TEMPLATE, params))


def test_au12_displacement():
    ident = Identity()
    lo = canonical_landmarks(SynthFaceParams(au={12: 0.0}, identity=ident))
    hi = canonical_landmarks(SynthFaceParams(au={12: 5.0}, identity=ident))
    d = np.linalg.norm(hi - lo, axis=1)
    assert d[48] == pytest.approx(5 * STEP) and d[54] == pytest.approx(5 * STEP)
    assert np.count_nonzero(d > 1e-12) == 2
    # outward and upward on both corners
    assert hi[48, 0] < lo[48, 0] and hi[54, 0] > lo[54, 0] and hi[48, 1] < lo[48, 1]


def test_deformation_injective():
    ids = builtin_topology().au_ids
    assert np.linalg.matrix_rank(deformation_matrix(ids)) == len(ids)


@pytest.mark.parametrize("au", builtin_topology().au_ids)
def test_peak_displacement_monotone(au):
    peaks = [np.abs(level * MOTION[au]).max() for level in range(6)]
    assert all(b > a for a, b in zip(peaks, peaks[1:]))


def test_motion_is_mirror_symmetric():
    from auheat.topology import LANDMARK_SYMMETRY

    for au, m in MOTION.items():
        mirrored = m[list(LANDMARK_SYMMETRY)] * [-1, 1]
        np.testing.assert_allclose(mirrored, m, atol=1e-12, err_msg=f"AU{au}")


def test_determinism():
    a = synth_samples(6, AUS, seed=5, size=64)
    b = synth_samples(6, AUS, seed=5, size=64)
    assert all(x == y for (_, x), (_, y) in zip(a, b))
    c = synth_samples(6, AUS, seed=6, size=64)
    assert any(x.label.tolist() != y.label.tolist() or not np.array_equal(x.image, y.image)
               for (_, x), (_, y) in zip(a, c))


def test_intensity_changes_image_locally():
    params = dict(identity=Identity(), noise=0.0)
    a = synth_frame(SynthFaceParams(au={12: 0.0}, **params), 0, (12,))
    b = synth_frame(SynthFaceParams(au={12: 4.0}, **params), 0, (12,))
    diff = np.abs(a.image.astype(int) - b.image.astype(int)).sum(axis=2)
    ys, xs = np.nonzero(diff)
    assert len(ys) > 0
    mouth = b.landmarks[48:68]
    assert xs.min() >= mouth[:, 0].min() - 30 and xs.max() <= mouth[:, 0].max() + 30
    assert ys.min() >= mouth[:, 1].min() - 30


def test_landmarks_in_image_and_labels_in_range():
    for _, s in synth_samples(30, AUS, seed=1, size=128):
        assert s.image.shape == (128, 128, 3) and s.image.dtype == np.uint8
        assert (s.landmarks >= 0).all() and (s.landmarks <= 127).all()
        assert ((s.label >= 0) & (s.label <= 5)).all()


def test_params_validated():
    with pytest.raises(ValueError):
        SynthFaceParams(au={12: 6.0})
    with pytest.raises(ValueError):
        SynthFaceParams(au={3: 1.0})


def test_split_and_identities():
    pairs = synth_samples(100, AUS, seed=0, size=32)
    splits = [p for p, _ in pairs]
    assert (splits.count("train"), splits.count("val"), splits.count("test")) == (70, 15, 15)
    idents = {sp: {s.id.split("_id")[1] for p, s in pairs if p == sp} for sp in ("train", "val", "test")}
    assert not idents["train"] & idents["val"] and not idents["train"] & idents["test"]
    assert not idents["val"] & idents["test"]


def test_zero_fraction():
    labels = np.stack([s.label for _, s in synth_samples(400, AUS, seed=2, size=32)])
    n = len(labels)
    # at least 40% zeros per AU, allowing three binomial standard deviations below 0.5
    floor = 0.5 - 3 * np.sqrt(0.25 / n)
    assert floor >= 0.4
    assert ((labels == 0).mean(axis=0) >= floor).all()


def test_dataset_roundtrip(tmp_path):
    man = synth_dataset(12, AUS, seed=4, out_dir=tmp_path, size=64)
    assert len(man.rows) == 12
    header = (tmp_path / "manifest.csv").read_text().splitlines()[0]
    assert header == "frame_path,lmk_path,split," + ",".join(f"au{a}" for a in AUS)
    loaded, stats = load_real(tmp_path / "manifest.csv")
    assert stats == LoadStats(loaded=12)
    originals = [s for _, s in synth_samples(12, AUS, seed=4, size=64)]
    assert loaded == originals
    test_only, _ = load_real(tmp_path / "manifest.csv", split="test")
    assert [s.id for s in test_only] == [s.id for s in originals if s.id.startswith("test")]


def _write_manifest(path, rows, aus=(12,)):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame_path", "lmk_path"] + [f"au{a}" for a in aus])
        w.writerows(rows)


@pytest.fixture
def real_dir(tmp_path):
    s = synth_samples(3, (12,), seed=0, size=32)
    from auheat.synth import write_image

    for i, (_, f) in enumerate(s):
        write_image(tmp_path / f"f{i}.png", f.image)
        write_landmarks(tmp_path / f"f{i}.txt", f.landmarks)
    return tmp_path


def test_load_real_valid(real_dir):
    _write_manifest(real_dir / "m.csv", [[f"f{i}.png", f"f{i}.txt", i] for i in range(3)])
    samples, stats = load_real(real_dir / "m.csv")
    assert len(samples) == 3 and stats.skipped == 0 and stats.clipped == 0


def test_load_real_clips(real_dir, caplog):
    _write_manifest(real_dir / "m.csv", [["f0.png", "f0.txt", 6], ["f1.png", "f1.txt", 2], ["f2.png", "f2.txt", 1]])
    samples, stats = load_real(real_dir / "m.csv")
    assert samples[0].label.tolist() == [5.0] and stats.clipped == 1
    assert "clipped" in caplog.text


def test_load_real_missing_landmarks(real_dir):
    (real_dir / "f1.txt").unlink()
    _write_manifest(real_dir / "m.csv", [[f"f{i}.png", f"f{i}.txt", 1] for i in range(3)])
    samples, stats = load_real(real_dir / "m.csv")
    assert len(samples) == 2 and stats.skipped == 1


def test_load_real_errors(real_dir):
    _write_manifest(real_dir / "m.csv", [["f0.png", "f0.txt", 1], ["f1.png", "f1.txt", "abc"]])
    with pytest.raises(ValueError, match=":3:"):
        load_real(real_dir / "m.csv")
    _write_manifest(real_dir / "m.csv", [["nope.png", "f0.txt", 1]])
    with pytest.raises(FileNotFoundError, match=":2:"):
        load_real(real_dir / "m.csv")
    with pytest.raises(FileNotFoundError):
        load_real(real_dir / "absent.csv")


@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=68, max_size=68))
def test_landmark_file_roundtrip(tmp_path_factory, pts):
    path = tmp_path_factory.mktemp("lmk") / "a.txt"
    write_landmarks(path, pts)
    np.testing.assert_array_equal(read_landmarks(path), np.array(pts))


def test_unwritable_directory(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        synth_dataset(2, AUS, 0, blocker / "sub")
