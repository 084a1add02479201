import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from eqddm import diffcore as dc
from eqddm.diffcore import ParamStore, tensor


def store(**arrays):
    return ParamStore((k, tensor(v, requires_grad=True)) for k, v in arrays.items())


# -- grad --------------------------------------------------------------------------


def test_grad_quadratic():
    ps = store(w=[1.0, 2.0])
    g = dc.grad((ps["w"] * ps["w"]).sum(), ps)
    np.testing.assert_array_equal(g["w"].numpy(), [2.0, 4.0])


def test_grad_constant_is_zero():
    ps = store(w=[1.0, 2.0], b=[[3.0]])
    g = dc.grad(torch.tensor(5.0, dtype=torch.float64), ps)
    assert all(float(v.abs().sum()) == 0 for v in g.values())
    g = dc.grad(ps["w"].sum() * 0 + 1, ps)
    assert float(g["b"].abs().sum()) == 0


def test_grad_rejects_non_scalar():
    ps = store(w=[1.0, 2.0])
    with pytest.raises(ValueError):
        dc.grad(ps["w"] * 2, ps)


def test_grad_is_deterministic():
    ps = store(w=np.linspace(-1, 1, 7))
    f = lambda: torch.logsumexp(torch.sin(ps["w"]) * ps["w"], 0)  # noqa: E731
    a, b = dc.grad(f(), ps), dc.grad(f(), ps)
    assert torch.equal(a["w"], b["w"])


# -- store ------------------------------------------------------------------------------


def test_store_rejects_duplicates_and_float32():
    ps = store(w=[1.0])
    with pytest.raises(KeyError):
        ps.add("w", tensor([2.0]))
    with pytest.raises(TypeError):
        ps.add("v", torch.zeros(2, dtype=torch.float32))


def test_store_load_checks_shapes():
    ps = store(w=[1.0, 2.0])
    with pytest.raises(ValueError):
        ps.load_state_dict({"w": np.zeros(3)})
    with pytest.raises(KeyError):
        ps.load_state_dict({})


# -- adam ----------------------------------------------------------------------------------


def test_adam_zero_gradient_leaves_params():
    ps = store(w=[1.0, -2.0])
    dc.adam_step(ps, {"w": torch.zeros(2, dtype=torch.float64)}, lr=0.1)
    np.testing.assert_array_equal(ps["w"].detach().numpy(), [1.0, -2.0])


@given(st.floats(1e-3, 1e3), st.floats(1e-4, 1e-1))
def test_adam_first_step_is_lr(gval, lr):
    ps = store(w=[0.0, 0.0])
    dc.adam_step(ps, {"w": tensor([gval, -gval])}, lr=lr)
    np.testing.assert_allclose(ps["w"].detach().numpy(), [-lr, lr], rtol=1e-4)


def test_adam_quadratic_bowl():
    ps = store(w=[1.0, -0.5, 0.25])
    for _ in range(500):
        w = ps["w"]
        dc.adam_step(ps, dc.grad((w * w).sum(), ps), lr=1e-2)
    assert float(ps["w"].detach().norm()) < 1e-3


def test_adam_non_finite_names_parameter():
    ps = store(alpha=[1.0], beta=[2.0])
    with pytest.raises(dc.NonFiniteError, match="beta"):
        dc.adam_step(ps, {"alpha": tensor([1.0]), "beta": tensor([np.nan])})
    np.testing.assert_array_equal(ps["alpha"].detach().numpy(), [1.0])


# -- densities --------------------------------------------------------------------------


def test_kl_examples():
    mu, sd = tensor([0.3, -1.0]), tensor([0.5, 2.0])
    assert float(dc.kl_gauss(mu, sd, mu, sd)) == 0.0
    assert float(dc.kl_gauss(tensor([0.0]), tensor([1.0]), tensor([1.0]), tensor([1.0]))) == 0.5
    p = tensor([0.2, 0.8])
    assert float(dc.kl_cat(p, p)) == 0.0


def test_kl_cat_zero_entries():
    assert float(dc.kl_cat(tensor([1.0, 0.0]), tensor([0.5, 0.5]))) == pytest.approx(math.log(2))
    # subnormal mass counts as zero so second derivatives stay finite
    p = tensor([1.0, 1e-310]).requires_grad_(True)
    (g,) = torch.autograd.grad(dc.kl_cat(p, tensor([0.5, 0.5])), p, create_graph=True)
    (h,) = torch.autograd.grad(g.sum(), p)
    assert torch.isfinite(h).all()


def test_gauss_logpdf_matches_scipy():
    from scipy.stats import norm

    x, mu, sd = np.array([0.1, 2.0]), np.array([0.0, 1.0]), np.array([0.5, 3.0])
    val = float(dc.gauss_logpdf(tensor(x), tensor(mu), tensor(sd)))
    assert val == pytest.approx(norm.logpdf(x, mu, sd).sum(), rel=1e-14)


def test_scales_must_be_positive():
    with pytest.raises(ValueError):
        dc.gauss_logpdf(tensor([0.0]), tensor([0.0]), tensor([0.0]))
    with pytest.raises(ValueError):
        dc.kl_gauss(tensor([0.0]), tensor([-1.0]), tensor([0.0]), tensor([1.0]))
    with pytest.raises(ValueError):
        dc.reparam_sample(tensor([0.0]), tensor([0.0]), tensor([1.0]))


finite = st.floats(-5, 5, allow_nan=False)
scale = st.floats(0.05, 5)


@given(st.lists(st.tuples(finite, scale, finite, scale), min_size=1, max_size=5))
def test_kl_gauss_nonnegative_and_closed_form(rows):
    m1, s1, m2, s2 = (np.array(c) for c in zip(*rows))
    val = float(dc.kl_gauss(tensor(m1), tensor(s1), tensor(m2), tensor(s2)))
    ref = np.sum(np.log(s2 / s1) + (s1**2 + (m1 - m2) ** 2) / (2 * s2**2) - 0.5)
    assert val >= -1e-12
    assert val == pytest.approx(ref, rel=1e-9, abs=1e-12)


@given(st.lists(st.floats(0.01, 1), min_size=2, max_size=6), st.integers(0, 1000))
def test_kl_cat_nonnegative(weights, seed):
    p = np.array(weights) / np.sum(weights)
    q = np.random.default_rng(seed).dirichlet(np.ones(len(p)))
    val = float(dc.kl_cat(tensor(p), tensor(q)))
    assert val >= -1e-12
    assert val == pytest.approx(np.sum(p * np.log(p / q)), rel=1e-9, abs=1e-12)


def test_reparam_sample_differentiable():
    mu = tensor([1.0, 2.0], requires_grad=True)
    sd = tensor([0.5, 0.1], requires_grad=True)
    eps = tensor([0.3, -2.0])
    z = dc.reparam_sample(mu, sd, eps)
    gm, gs = torch.autograd.grad(z.sum(), [mu, sd])
    np.testing.assert_array_equal(gm.numpy(), [1.0, 1.0])
    np.testing.assert_array_equal(gs.numpy(), eps.numpy())


OPS = {
    "matmul": lambda a, b: (a.reshape(2, 3) @ b.reshape(3, 2)).sum(),
    "softmax": lambda a, b: (torch.softmax(a, 0) * b).sum(),
    "logsumexp": lambda a, b: torch.logsumexp(a * b, 0),
    "tanh_sigmoid": lambda a, b: (torch.tanh(a) * torch.sigmoid(b)).sum(),
    "softplus": lambda a, b: dc.softplus(a * b).sum(),
    "gauss_logpdf": lambda a, b: dc.gauss_logpdf(a, b, dc.softplus(b) + 0.1),
    "kl_gauss": lambda a, b: dc.kl_gauss(a, dc.softplus(a) + 0.1, b, dc.softplus(b) + 0.1),
    "kl_cat": lambda a, b: dc.kl_cat(torch.softmax(a, 0), torch.softmax(b, 0)),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_ops_match_finite_differences(name):
    fn = OPS[name]
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    for _ in range(20):
        ps = store(a=rng.normal(size=6), b=rng.normal(size=6))
        analytic = dc.grad(fn(ps["a"], ps["b"]), ps)
        numeric = dc.finite_difference_grad(lambda: fn(ps["a"], ps["b"]), ps, h=1e-4)
        errs = dc.gradient_relative_errors(analytic, numeric)
        assert max(errs.values()) < 1e-4, errs


# -- checkpoints -------------------------------------------------------------------


@given(
    st.dictionaries(
        st.text(min_size=1, max_size=8),
        st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), max_size=12),
        max_size=4,
    )
)
def test_checkpoint_roundtrip_bit_exact(tmp_path_factory, data):
    path = tmp_path_factory.mktemp("ck") / "a.ck"
    arrays = {k: np.asarray(v, dtype=float).reshape(-1, 1) if len(v) % 2 else np.asarray(v, dtype=float) for k, v in data.items()}
    dc.save_checkpoint(path, arrays, {"note": "x"})
    out, meta = dc.load_checkpoint(path)
    assert meta == {"note": "x"} and list(out) == list(arrays)
    for k in arrays:
        assert out[k].shape == arrays[k].shape
        assert out[k].tobytes() == arrays[k].tobytes()
    again = path.with_suffix(".b")
    dc.save_checkpoint(again, out, meta)
    assert again.read_bytes() == path.read_bytes()


def test_checkpoint_rejects_bad_files(tmp_path):
    bad = tmp_path / "bad.ck"
    bad.write_bytes(b"NOTACKPT" + b"\0" * 16)
    with pytest.raises(ValueError, match="not an eqddm checkpoint"):
        dc.load_checkpoint(bad)
    good = tmp_path / "good.ck"
    dc.save_checkpoint(good, {"w": np.arange(3.0)})
    good.write_bytes(good.read_bytes() + b"\0")
    with pytest.raises(ValueError, match="trailing"):
        dc.load_checkpoint(good)
