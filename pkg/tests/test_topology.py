import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from auheat.topology import (
    DEFAULT_AUS, LANDMARK_SYMMETRY, AUSpec, AUTopology, LandmarkError, TopologyError,
    au_points, builtin_topology, flip_remap, format_table, load_topology, out_of_bounds, parse_table,
)

# AU placement table transcribed independently of the bundled data file.
PLACEMENT = {
    1: ([21], [22], [21, 22, 27]),
    2: ([18], [25], []),
    4: ([21], [22], [21, 22, 27]),
    5: ([37, 38], [43, 44], []),
    6: ([1, 41, 31], [15, 46, 35], []),
    9: ([31], [35], [28]),
    10: ([31], [35], [51]),
    12: ([48], [54], []),
    14: ([48], [54], []),
    15: ([48], [54], []),
    17: ([57], [8], []),
    20: ([48], [54], [51]),
    25: ([], [], [61, 64]),
    26: ([], [], [61, 64]),
}

landmarks = arrays(np.float64, (68, 2), elements=st.floats(-50, 300, allow_nan=False))


def test_builtin_matches_table():
    topo = builtin_topology()
    assert topo.au_ids == (1, 2, 4, 5, 6, 9, 10, 12, 14, 15, 17, 20, 25, 26)
    for au, (l, r, c) in PLACEMENT.items():
        s = topo.spec(au)
        assert (list(s.left), list(s.right), list(s.centre)) == (l, r, c)


def test_worked_examples():
    topo = builtin_topology()
    assert topo.spec(12).left == (48,) and topo.spec(12).right == (54,) and topo.spec(12).centre == ()
    assert topo.spec(1).centre == (21, 22, 27)


def test_symmetry_is_involution():
    assert all(LANDMARK_SYMMETRY[LANDMARK_SYMMETRY[i]] == i for i in range(68))
    # a few standard pairs
    assert LANDMARK_SYMMETRY[0] == 16 and LANDMARK_SYMMETRY[36] == 45 and LANDMARK_SYMMETRY[48] == 54
    assert LANDMARK_SYMMETRY[8] == 8 and LANDMARK_SYMMETRY[30] == 30


def test_au_points_examples():
    topo = builtin_topology()
    lmk = np.zeros((68, 2))
    lmk[48], lmk[54] = (80, 160), (176, 160)
    lmk[21], lmk[22], lmk[27] = (100, 90), (140, 90), (120, 100)
    lmk[61], lmk[64] = (118, 170), (118, 186)
    pts = dict(zip(topo.au_ids, au_points(lmk, topo)))
    np.testing.assert_allclose(pts[12], [[80, 160], [176, 160]])
    np.testing.assert_allclose(pts[1][2], [120, 280 / 3])
    np.testing.assert_allclose(pts[25], [[118, 178]])


def test_point_counts_bounded():
    topo = builtin_topology()
    lmk = np.random.default_rng(0).uniform(0, 255, (68, 2))
    for s, p in zip(topo.specs, au_points(lmk, topo)):
        assert len(p) == s.n_points <= 3


def test_channel_order_follows_selection():
    topo = load_topology(au_ids=(17, 6, 12))
    assert topo.au_ids == (17, 6, 12)
    assert [topo.channel(a) for a in (17, 6, 12)] == [0, 1, 2]
    m, mask = topo.cell_matrix()
    assert m.shape == (3, 2, 68) and mask.all()


def test_parse_roundtrip_and_split_centre():
    text = format_table(builtin_topology().specs)
    assert parse_table(text) == list(builtin_topology().specs)
    (s,) = parse_table("25; -; -; 61/64\n")
    assert s.centre == (61, 64) and s.n_points == 2
    lmk = np.arange(136, dtype=float).reshape(68, 2)
    pts = au_points(lmk, AUTopology((s,)))[0]
    np.testing.assert_allclose(pts, lmk[[61, 64]])


@pytest.mark.parametrize("line", [
    "3; -; -; -",          # all empty
    "3; 4; -; -",          # unpaired bilateral
    "3; 70; 71; -",        # out of range
    "3; 4; 5",             # too few fields
    "x; 4; 5; -",
])
def test_parse_rejects(line):
    with pytest.raises(TopologyError):
        parse_table(line)


def test_duplicate_and_bad_symmetry():
    s = AUSpec(12, (48,), (54,))
    with pytest.raises(TopologyError):
        AUTopology((s, s))
    with pytest.raises(TopologyError):
        AUTopology((s,), tuple([1] + list(range(1, 68))))


def test_malformed_landmarks():
    topo = builtin_topology()
    with pytest.raises(LandmarkError):
        au_points(np.zeros((67, 2)), topo)
    bad = np.zeros((68, 2))
    bad[3, 1] = np.nan
    with pytest.raises(LandmarkError):
        au_points(bad, topo)
    with pytest.raises(LandmarkError):
        flip_remap(np.zeros((68, 3)), 256)


def test_out_of_bounds_flagged():
    lmk = np.full((68, 2), 10.0)
    lmk[5] = (-1, 3)
    lmk[6] = (10, 64)
    assert np.flatnonzero(out_of_bounds(lmk, 64, 64)).tolist() == [5, 6]


def test_flip_closure():
    topo = builtin_topology()
    assert all(topo.flip_closed(a) for a in DEFAULT_AUS)
    # the {61, 64} cell mirrors onto {63, 60}, which is not in the table
    assert not topo.flip_closed(25)
    assert topo.point_symmetry(12) == [1, 0]
    assert topo.point_symmetry(1) == [1, 0, 2]


@given(landmarks, st.floats(-40, 40), st.floats(-40, 40))
def test_translation_equivariance(lmk, tx, ty):
    topo = builtin_topology()
    t = np.array([tx, ty])
    for a, b in zip(au_points(lmk + t, topo), au_points(lmk, topo)):
        np.testing.assert_allclose(a, b + t, atol=1e-9)


@given(landmarks, st.integers(32, 512))
def test_double_flip_identity(lmk, width):
    np.testing.assert_allclose(flip_remap(flip_remap(lmk, width), width), lmk, atol=1e-12)


@given(landmarks, st.integers(32, 512))
def test_flip_mirrors_au_points(lmk, width):
    topo = load_topology(au_ids=[a for a in builtin_topology().au_ids if builtin_topology().flip_closed(a)])
    before = au_points(lmk, topo)
    after = au_points(flip_remap(lmk, width, topo), topo)
    for au, p, q in zip(topo.au_ids, before, after):
        mirrored = p.copy()
        mirrored[:, 0] = width - 1 - mirrored[:, 0]
        for c, d in enumerate(topo.point_symmetry(au)):
            np.testing.assert_allclose(q[d], mirrored[c], atol=1e-9)


def test_symmetric_face_is_flip_fixed_point():
    from auheat.synth import TEMPLATE

    # the synthetic template is mirror-symmetric about (256 - 1) / 2
    np.testing.assert_allclose(flip_remap(TEMPLATE, 256), TEMPLATE, atol=1e-9)
