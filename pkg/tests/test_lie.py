import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from eqddm import lie
from eqddm.lie import Base, DirectSum, Dual, RepSignature, TensorProduct, Trivial

from .oracles import rodrigues


def in_scope_reps(group):
    """Every representation type the model builds, plus the tree node types."""
    b = Base(group)
    return [
        Trivial(group),
        b,
        Dual(b),
        TensorProduct(b, b),
        TensorProduct(b, Dual(b)),
        DirectSum((Trivial(group), b, b)),
        lie.rep_from_signature(group, RepSignature([(2, 0), (3, 1)])),
        lie.rep_from_signature(group, RepSignature([(1, 0), (1, 1), (1, 2)])),
    ]


# -- generators ---------------------------------------------------------------


@pytest.mark.parametrize("n, count", [(2, 1), (3, 3), (4, 6)])
def test_generator_count_and_shape(n, count):
    gens = lie.so_n_generators(n)
    assert len(gens) == count == n * (n - 1) // 2
    for a in gens:
        assert a.shape == (n, n)
        np.testing.assert_array_equal(a, -a.T)
        assert set(np.unique(a)) <= {-1.0, 0.0, 1.0}
        assert np.count_nonzero(a) == 2


@pytest.mark.parametrize("n", [2, 3, 4])
def test_generators_frobenius_orthogonal(n):
    gens = lie.so_n_generators(n)
    gram = np.array([[np.sum(a * b) for b in gens] for a in gens])
    np.testing.assert_allclose(gram, 2 * np.eye(len(gens)))


def test_so2_generator():
    (a,) = lie.so_n_generators(2)
    assert np.array_equal(a, [[0, -1], [1, 0]]) or np.array_equal(a, [[0, 1], [-1, 0]])


@pytest.mark.parametrize("n", [1, 0, -3])
def test_generators_reject_small_n(n):
    with pytest.raises(lie.InvalidDimensionError):
        lie.so_n_generators(n)


def test_so3_generator_order_is_xyz():
    # the rotation axis of A_k is the k-th unit vector (its kernel)
    for k, a in enumerate(lie.so_n_generators(3)):
        e = np.eye(3)[k]
        np.testing.assert_array_equal(a @ e, 0)


# -- exponential map -------------------------------------------------------------


def test_exp_zero_is_identity(so3):
    np.testing.assert_array_equal(lie.exp_map(so3, np.zeros(3)), np.eye(3))


@given(st.floats(-10, 10, allow_nan=False))
def test_exp_z_generator_matches_rodrigues(theta):
    so3 = lie.SO(3)
    R = lie.exp_map(so3, [0.0, 0.0, theta])
    np.testing.assert_allclose(R, rodrigues([0, 0, 1], theta), atol=1e-12)
    c, s = np.cos(theta), np.sin(theta)
    np.testing.assert_allclose(R[:2, :2], [[c, -s], [s, c]], atol=1e-12)


@given(st.lists(st.floats(-4, 4, allow_nan=False), min_size=3, max_size=3))
def test_exp_matches_rodrigues_any_axis(coeffs):
    coeffs = np.array(coeffs)
    angle = np.linalg.norm(coeffs)
    R = lie.exp_map(lie.SO(3), coeffs)
    expected = np.eye(3) if angle == 0 else rodrigues(coeffs, angle)
    np.testing.assert_allclose(R, expected, atol=1e-11)
    # scipy's independent rotation-vector convention agrees as well
    np.testing.assert_allclose(R, Rotation.from_rotvec(coeffs).as_matrix(), atol=1e-11)


def test_exp_random_is_special_orthogonal(so3, rng):
    for _ in range(50):
        R = lie.exp_map(so3, rng.uniform(-np.pi, np.pi, 3))
        assert np.linalg.norm(R.T @ R - np.eye(3)) < 1e-10
        assert abs(np.linalg.det(R) - 1) < 1e-10


def test_exp_wrong_length(so3):
    with pytest.raises(ValueError):
        lie.exp_map(so3, [1.0, 2.0])


# -- sampling ------------------------------------------------------------------------


def test_sampling_is_deterministic(so3):
    a = lie.sample_group_element(so3, np.random.default_rng(7))
    b = lie.sample_group_element(so3, np.random.default_rng(7))
    np.testing.assert_array_equal(a, b)


def test_sample_so3_det_one(so3, rng):
    for _ in range(20):
        assert abs(np.linalg.det(lie.sample_group_element(so3, rng)) - 1) < 1e-10


def test_sample_so2_is_planar_rotation(so2, rng):
    R = lie.sample_group_element(so2, rng)
    assert R.shape == (2, 2)
    np.testing.assert_allclose(R.T @ R, np.eye(2), atol=1e-12)
    assert abs(R[0, 0] - R[1, 1]) < 1e-12 and abs(R[0, 1] + R[1, 0]) < 1e-12


# -- rho / drho ------------------------------------------------------------------------


def test_trivial_rep(so3, rng):
    g = lie.sample_group_element(so3, rng)
    a = lie.sample_algebra_element(so3, rng)
    np.testing.assert_array_equal(lie.rho_of(Trivial(so3), g), np.eye(1))
    np.testing.assert_array_equal(lie.drho_of(Trivial(so3), a), np.zeros((1, 1)))


def test_base_rep(so3, rng):
    np.testing.assert_array_equal(lie.rho_of(Base(so3), np.eye(3)), np.eye(3))
    a = lie.sample_algebra_element(so3, rng)
    np.testing.assert_array_equal(lie.drho_of(Base(so3), a), a)


def test_tensor_product_is_kronecker(so3, rng):
    g = lie.sample_group_element(so3, rng)
    rep = TensorProduct(Base(so3), Base(so3))
    assert rep.size == 9
    np.testing.assert_allclose(lie.rho_of(rep, g), np.kron(g, g), atol=1e-14)


def test_dual_rule(so3, rng):
    g = lie.sample_group_element(so3, rng)
    a = lie.sample_algebra_element(so3, rng)
    rep = TensorProduct(Base(so3), Base(so3))
    np.testing.assert_allclose(lie.rho_of(Dual(rep), g), np.linalg.inv(lie.rho_of(rep, g)).T, atol=1e-12)
    np.testing.assert_allclose(lie.drho_of(Dual(rep), a), -lie.drho_of(rep, a).T, atol=1e-14)


def test_dual_pairing(so3, rng):
    for rep in in_scope_reps(so3):
        g = lie.sample_group_element(so3, rng)
        lhs = lie.rho_of(Dual(rep), g).T @ lie.rho_of(rep, g)
        assert np.linalg.norm(lhs - np.eye(rep.size)) < 1e-8


def test_sizes(so3):
    b, t = Base(so3), Trivial(so3)
    assert t.size == 1 and b.size == 3
    assert DirectSum((b, t, b)).size == 7
    assert TensorProduct(b, TensorProduct(b, b)).size == 27


def test_invalid_group_element(so3):
    with pytest.raises(lie.InvalidElementError):
        lie.rho_of(Base(so3), 2 * np.eye(3))
    with pytest.raises(lie.InvalidElementError):
        lie.rho_of(Base(so3), np.eye(2))


def test_invalid_algebra_element(so3):
    with pytest.raises(lie.InvalidElementError):
        lie.drho_of(Base(so3), np.eye(3))


@pytest.mark.parametrize("group", [lie.SO(2), lie.SO(3)], ids=["so2", "so3"])
def test_homomorphism(group):
    rng = np.random.default_rng(0)
    for rep in in_scope_reps(group):
        for _ in range(50):
            g1 = lie.sample_group_element(group, rng)
            g2 = lie.sample_group_element(group, rng)
            err = np.linalg.norm(rep.rho(g1 @ g2) - rep.rho(g1) @ rep.rho(g2))
            assert err <= 1e-8 * rep.size


@pytest.mark.parametrize("group", [lie.SO(2), lie.SO(3)], ids=["so2", "so3"])
def test_exp_correspondence(group):
    rng = np.random.default_rng(1)
    for rep in in_scope_reps(group):
        for _ in range(50):
            a = lie.sample_algebra_element(group, rng)
            err = np.linalg.norm(rep.rho(lie.expm(a)) - lie.expm(rep.drho(a)))
            assert err <= 1e-7 * rep.size


def test_exp_correspondence_tensor_z(so3):
    a = so3.generators[2]
    rep = TensorProduct(Base(so3), Base(so3))
    assert lie.drho_of(rep, a).shape == (9, 9)
    np.testing.assert_allclose(lie.expm(lie.drho_of(rep, a)), lie.rho_of(rep, lie.expm(a)), atol=1e-8)


# -- signatures -----------------------------------------------------------------------


def test_signature_examples(so3, rng):
    g = lie.sample_group_element(so3, rng)
    scalars = lie.rep_from_signature(so3, RepSignature([(2, 0)]))
    assert scalars.size == 2
    np.testing.assert_allclose(scalars.rho(g), np.eye(2))
    vec = lie.rep_from_signature(so3, RepSignature([(1, 1)]))
    assert vec.size == 3
    np.testing.assert_allclose(vec.rho(g), g)
    assert lie.rep_from_signature(so3, RepSignature([(1, 0), (2, 1)])).size == 7


def test_signature_layout_is_rank_ascending(so3, rng):
    g = lie.sample_group_element(so3, rng)
    sig = RepSignature([(1, 1), (1, 0)])
    assert sig.terms == ((1, 0), (1, 1))
    m = lie.rep_from_signature(so3, sig).rho(g)
    assert m[0, 0] == 1.0
    np.testing.assert_allclose(m[1:, 1:], g)


def test_signature_rejects_negative():
    with pytest.raises(ValueError):
        RepSignature([(-1, 1)])


@pytest.mark.parametrize("text", ["", "1y1", "ax1", "1x", "1x1,,x2"])
def test_signature_parse_errors(text):
    with pytest.raises(ValueError):
        RepSignature.parse(text)


@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 3)), min_size=1, max_size=4))
def test_signature_parse_roundtrip_and_size(terms):
    sig = RepSignature(terms)
    if sig.terms:
        assert RepSignature.parse(str(sig)) == sig
    for n in (2, 3):
        assert sig.size(n) == sum(m * n**r for m, r in terms)
        assert sum(size for _, _, size in sig.blocks(n)) == sig.size(n)
