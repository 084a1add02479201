import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from eqddm import data
from eqddm.data import DataTransform, PendulumSpec, Sequence

angles = st.floats(-20, 20, allow_nan=False)


def random_sequence(rng, T=7, J=2, missing=0.2):
    vals = rng.normal(size=(T, 3 * J)) * 10 ** rng.uniform(-3, 3, size=(T, 3 * J))
    vals[rng.random(vals.shape) < missing] = np.nan
    return Sequence.from_values(vals, name="r")


# -- pendulum -----------------------------------------------------------------------


def test_default_length_and_rest_state():
    assert data.simulate_pendulum().T == 410
    seq = data.simulate_pendulum(PendulumSpec(T=50, theta0=0.0, omega0=0.0, length=2.0))
    np.testing.assert_array_equal(seq.values, np.tile([0.0, 0.0, -2.0], (50, 1)))


def test_coordinates_follow_angle_in_yz_plane():
    spec = PendulumSpec(T=60)
    states = data.pendulum_angles(spec)
    seq = data.simulate_pendulum(spec)
    np.testing.assert_array_equal(seq.values[:, 0], 0.0)
    np.testing.assert_allclose(seq.values[:, 1], spec.length * np.sin(states[:, 0]), atol=1e-15)
    np.testing.assert_allclose(seq.values[:, 2], -spec.length * np.cos(states[:, 0]), atol=1e-15)
    np.testing.assert_allclose(np.linalg.norm(seq.values, axis=1), spec.length, atol=1e-12)


@pytest.mark.parametrize("theta0, omega0", [(math.pi / 2, 0.0), (1.0, 0.5), (2.5, -1.0)])
def test_energy_drift(theta0, omega0):
    spec = PendulumSpec(theta0=theta0, omega0=omega0)
    th, om = data.pendulum_angles(spec).T
    g, L = spec.gravity, spec.length
    energy = 0.5 * L**2 * om**2 - g * L * np.cos(th)
    # the swing-from-horizontal start has zero energy, so drift is measured against g L
    drift = np.abs(energy - energy[0]).max() / max(abs(energy[0]), g * L)
    assert drift < 1e-6


def test_rk4_matches_adaptive_reference():
    spec = PendulumSpec(T=100, theta0=1.2, omega0=0.3)
    w2 = spec.gravity / spec.length
    t_eval = np.arange(spec.T) * spec.dt
    ref = solve_ivp(
        lambda _, y: [y[1], -w2 * math.sin(y[0])], (0, t_eval[-1]), [1.2, 0.3], t_eval=t_eval, rtol=1e-12, atol=1e-12
    )
    np.testing.assert_allclose(data.pendulum_angles(spec), ref.y.T, atol=1e-8)


def test_pendulum_noise_needs_rng_and_is_seeded():
    spec = PendulumSpec(T=20, noise=0.01)
    with pytest.raises(ValueError):
        data.simulate_pendulum(spec)
    a = data.simulate_pendulum(spec, np.random.default_rng(3))
    b = data.simulate_pendulum(spec, np.random.default_rng(3))
    np.testing.assert_array_equal(a.values, b.values)
    assert np.abs(a.values - data.simulate_pendulum(PendulumSpec(T=20)).values).max() > 0


@pytest.mark.parametrize(
    "kw", [dict(dt=0.0), dict(length=-1.0), dict(T=1), dict(plane="yy"), dict(plane="xw"), dict(substeps=0)]
)
def test_pendulum_spec_validation(kw):
    with pytest.raises(ValueError):
        PendulumSpec(**kw)


def test_other_plane():
    seq = data.simulate_pendulum(PendulumSpec(T=30, plane="xz"))
    np.testing.assert_array_equal(seq.values[:, 1], 0.0)
    assert np.abs(seq.values[:, 0]).max() > 0.5


# -- splitting --------------------------------------------------------------------------


def test_split_half_examples():
    tr, te = data.split_half(data.simulate_pendulum(), max_lag=2)
    assert (tr.T, te.T) == (205, 205)
    np.testing.assert_array_equal(np.concatenate([tr.values, te.values]), data.simulate_pendulum().values)
    tr, te = data.split_half(Sequence.from_values(np.zeros((3, 3))), max_lag=1)
    assert (tr.T, te.T) == (2, 1)
    tr, te = data.split_half(Sequence.from_values(np.zeros((7, 3))))
    assert (tr.T, te.T) == (4, 3)
    with pytest.raises(ValueError):
        data.split_half(Sequence.from_values(np.zeros((1, 3))))
    with pytest.raises(ValueError):
        data.split_half(Sequence.from_values(np.zeros((4, 3))), max_lag=3)


# -- rotation ----------------------------------------------------------------------------


def test_rotation_identities(rng):
    seq = random_sequence(rng)
    same = data.rotate_sequence(seq, 0.0)
    np.testing.assert_array_equal(same.values, seq.values)
    full = data.rotate_sequence(seq, 2 * math.pi)
    np.testing.assert_allclose(full.filled(), seq.filled(), atol=1e-12 * np.abs(seq.filled()).max())
    np.testing.assert_array_equal(full.mask, seq.mask)


@given(angles, angles, st.integers(0, 2**31 - 1))
def test_rotation_composition(a, b, seed):
    seq = random_sequence(np.random.default_rng(seed), missing=0.0)
    seq = Sequence.from_values(np.clip(seq.values, -10, 10))
    two = data.rotate_sequence(data.rotate_sequence(seq, a), b)
    one = data.rotate_sequence(seq, a + b)
    np.testing.assert_allclose(two.values, one.values, atol=1e-12 * max(1, abs(a) + abs(b)) * 10)


@given(angles, st.integers(0, 2**31 - 1))
def test_rotation_is_isometry(a, seed):
    rng = np.random.default_rng(seed)
    seq = Sequence.from_values(rng.uniform(-5, 5, size=(6, 9)))
    rot = data.rotate_sequence(seq, a)
    for v, w in ((seq.values, rot.values),):
        p, q = v.reshape(6, 3, 3), w.reshape(6, 3, 3)
        dp = np.linalg.norm(p[:, :, None] - p[:, None], axis=-1)
        dq = np.linalg.norm(q[:, :, None] - q[:, None], axis=-1)
        np.testing.assert_allclose(dq, dp, atol=1e-12 * 20)
    np.testing.assert_allclose(rot.values[:, 2::3], seq.values[:, 2::3], atol=0)


def test_rotation_keeps_mask_and_rejects_bad_input(rng):
    seq = random_sequence(rng, missing=0.4)
    rot = data.rotate_sequence(seq, 0.7)
    np.testing.assert_array_equal(rot.mask, seq.mask)
    assert np.isnan(rot.values[~rot.mask]).all()
    with pytest.raises(ValueError):
        data.rotate_sequence(seq, float("inf"))
    with pytest.raises(ValueError):
        data.rotate_sequence(seq, 0.3, axis="x")


def test_rotated_testset():
    seq = data.simulate_pendulum(PendulumSpec(T=20))
    a = data.make_rotated_testset(seq, 10, np.random.default_rng(1))
    b = data.make_rotated_testset(seq, 10, np.random.default_rng(1))
    assert len(a) == 10
    assert [x for x, _ in a] == [x for x, _ in b]
    assert all(0 <= x < 2 * math.pi for x, _ in a)
    assert data.make_rotated_testset(seq, 0, np.random.default_rng(1)) == []


def test_random_mask_fraction():
    seq = Sequence.from_values(np.ones((400, 6)))
    masked = data.random_mask(seq, 0.3, np.random.default_rng(0))
    assert (~masked.mask).sum() == 720
    assert np.isnan(masked.values[~masked.mask]).all()
    again = data.random_mask(masked, 0.5, np.random.default_rng(0))
    assert (~again.mask).sum() == 720 + 840


# -- transform --------------------------------------------------------------------------


def test_transform_maps_into_unit_box_and_inverts(rng):
    seq = data.simulate_pendulum(PendulumSpec(T=80, length=3.0))
    seq = Sequence.from_values(seq.values + [0.5, -1.0, 4.0])
    tr = DataTransform.fit([seq])
    assert tr.center[0] == 0.0 and tr.center[1] == 0.0
    scaled = tr.apply(seq)
    assert np.abs(scaled.values).max() == pytest.approx(1.0)
    np.testing.assert_allclose(tr.invert_values(scaled.values), seq.values, atol=1e-12)
    np.testing.assert_allclose(tr.invert_std(np.ones(3)), tr.scale)
    full = DataTransform.fit([seq], axis=None)
    np.testing.assert_allclose(full.center, seq.values.mean(0), atol=1e-12)


@given(angles)
def test_transform_commutes_with_z_rotation(a):
    seq = data.simulate_pendulum(PendulumSpec(T=40))
    seq = Sequence.from_values(seq.values + [0.0, 0.0, 2.0])
    tr = DataTransform.fit([seq])
    lhs = tr.apply(data.rotate_sequence(seq, a)).values
    rhs = data.rotate_sequence(tr.apply(seq), a).values
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_transform_errors():
    with pytest.raises(ValueError):
        DataTransform.fit([Sequence.from_values(np.full((3, 3), np.nan))])
    with pytest.raises(ValueError):
        DataTransform.fit([Sequence.from_values(np.ones((3, 3)))], axis="w")
    assert DataTransform.fit([Sequence.from_values(np.ones((3, 3)))]).scale == 1.0


# -- CSV ----------------------------------------------------------------------------------


@given(st.integers(0, 2**31 - 1), st.integers(1, 9), st.integers(1, 3))
def test_csv_roundtrip(tmp_path_factory, seed, T, J):
    seq = random_sequence(np.random.default_rng(seed), T=T, J=J)
    path = tmp_path_factory.mktemp("csv") / "seq.csv"
    data.save_csv(seq, path)
    back = data.load_csv(path)
    np.testing.assert_array_equal(back.mask, seq.mask)
    assert back.values[back.mask].tobytes() == seq.values[seq.mask].tobytes()
    assert back.name == "seq"


def test_csv_empty_cell_is_missing(tmp_path):
    path = tmp_path / "a.csv"
    path.write_text("t,j0_x,j0_y,j0_z\n0,1.0,,3\n1,4,5,6\n")
    seq = data.load_csv(path)
    np.testing.assert_array_equal(seq.mask, [[True, False, True], [True, True, True]])


@pytest.mark.parametrize(
    "text, match",
    [
        ("", "empty file"),
        ("t,x,y,z\n0,1,2,3\n", "line 1"),
        ("t,j0_x,j0_y\n0,1,2\n", "line 1"),
        ("t,j0_x,j0_y,j0_z\n0,1,2,3\n1,1,2\n", "line 3"),
        ("t,j0_x,j0_y,j0_z\n0,1,2,3\n1,1,a,3\n", "line 3: non-numeric"),
        ("t,j0_x,j0_y,j0_z\n0,1,nan,3\n", "line 2: non-finite"),
        ("t,j0_x,j0_y,j0_z\n", "no data rows"),
    ],
)
def test_csv_errors(tmp_path, text, match):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    with pytest.raises(data.CSVFormatError, match=match):
        data.load_csv(path)


def test_sequence_validation():
    with pytest.raises(ValueError):
        Sequence(np.zeros((3, 4)), np.ones((3, 4), dtype=bool))
    with pytest.raises(ValueError):
        Sequence(np.zeros((3, 3)), np.ones((2, 3), dtype=bool))
