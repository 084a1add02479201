"""Equivariant and invariant layers built from Lie-algebra nullspaces.

A linear map ``W: U_in -> U_out`` commutes with the group action iff
``vec(W)`` is fixed by ``rho_out (x) rho_in^*``.  Differentiating at the
identity turns that into ``C vec(W) = 0`` with ``C`` the generators of the
composite representation stacked row-wise; an orthonormal basis ``Q`` of the
nullspace parameterises every equivariant weight as ``W = reshape(Q c)``.
``vec`` here is row-major (numpy ``reshape``), which is what makes
``rho_out (x) dual(rho_in)`` (rather than the transposed Kronecker order) the
right composite.

Feature vectors are laid out per :class:`~eqddm.lie.RepSignature`: blocks in
ascending rank, copy-major.  Rank-0 channels come first.

Two choices go beyond a plain linear + gate stack:

* ``NormFeatures`` appends the squared norm of every rank>=1 block as an extra
  scalar channel.  For SO(3) the only linear map from vectors to scalars is
  zero, so without it gates and invariant heads fed by vector features could
  only see their biases.
* Gates are extra scalar outputs of the preceding linear layer (one per
  rank>=1 output block), so they are an invariant linear function of the
  layer input's scalar channels plus an invariant bias.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence, Union

import numpy as np
import torch
from torch import nn

from . import lie
from .diffcore import DTYPE
from .lie import MatrixGroup, Representation, RepSignature

SVD_TOL = 1e-7
SVD_FLOOR = 1e-8
# smallest transition scale, in model units
SCALE_FLOOR = 1e-3


class DegenerateLayerError(ValueError):
    """Raised when a layer has neither equivariant weights nor invariant biases."""


class SignatureMismatchError(ValueError):
    pass


# -- nullspace machinery -----------------------------------------------------


def constraint_matrix(rep_in: Representation, rep_out: Representation) -> np.ndarray:
    """Stack ``drho(A_i)`` of ``rep_out (x) rep_in^*`` for every generator, in order."""
    if rep_in.group is not rep_out.group:
        raise ValueError("representations act on different groups")
    hom = lie.TensorProduct(rep_out, lie.Dual(rep_in))
    return np.concatenate([hom.drho(a) for a in rep_in.group.generators], axis=0)


def invariant_constraint(rep: Representation) -> np.ndarray:
    return np.concatenate([rep.drho(a) for a in rep.group.generators], axis=0)


def solve_basis(C: np.ndarray, tol: float = SVD_TOL) -> np.ndarray:
    """Orthonormal basis of ``{v : C v = 0}`` from a dense SVD.

    Singular values below ``tol * sigma_max`` (or below an absolute floor when
    ``C`` vanishes) count as zero.
    """
    C = np.asarray(C, dtype=float)
    m = C.shape[1]
    if C.size == 0:
        return np.eye(m)
    _, s, vt = np.linalg.svd(C, full_matrices=True)
    smax = s[0] if s.size else 0.0
    if smax <= SVD_FLOOR:
        return np.eye(m)
    rank = int(np.sum(s >= tol * smax))
    return vt[rank:].T.copy()


@dataclass(frozen=True, eq=False)
class EquivariantBasis:
    size_in: int
    size_out: int
    Q: np.ndarray
    bias_Q: np.ndarray
    rep_in: Representation | None = None
    rep_out: Representation | None = None

    @property
    def r(self) -> int:
        return self.Q.shape[1]

    @property
    def r_b(self) -> int:
        return self.bias_Q.shape[1]

    def weight(self, coeffs: np.ndarray) -> np.ndarray:
        return (self.Q @ coeffs).reshape(self.size_out, self.size_in)


def project(basis: EquivariantBasis, v0: np.ndarray) -> np.ndarray:
    """Orthogonal projection ``Q Q^T v0`` onto the equivariant subspace."""
    v0 = np.asarray(v0, dtype=float)
    if v0.shape != (basis.size_out * basis.size_in,):
        raise ValueError(f"expected a vector of length {basis.size_out * basis.size_in}, got {v0.shape}")
    return basis.Q @ (basis.Q.T @ v0)


def basis_for(rep_in: Representation, rep_out: Representation, tol: float = SVD_TOL) -> EquivariantBasis:
    """Dense solve on the full composite representation."""
    Q = solve_basis(constraint_matrix(rep_in, rep_out), tol)
    bias_Q = solve_basis(invariant_constraint(rep_out), tol)
    return EquivariantBasis(rep_in.size, rep_out.size, Q, bias_Q, rep_in, rep_out)


@lru_cache(maxsize=None)
def _block_basis(group: MatrixGroup, rank_out: int, rank_in: int) -> np.ndarray:
    Q = solve_basis(constraint_matrix(lie.tensor_power(group, rank_in), lie.tensor_power(group, rank_out)))
    Q.setflags(write=False)
    return Q


@lru_cache(maxsize=None)
def _block_bias(group: MatrixGroup, rank: int) -> np.ndarray:
    Q = solve_basis(invariant_constraint(lie.tensor_power(group, rank)))
    Q.setflags(write=False)
    return Q


def signature_basis(group: MatrixGroup, sig_in: RepSignature, sig_out: RepSignature) -> EquivariantBasis:
    """Basis for maps between signature spaces, solved block pair by block pair.

    ``rho_out (x) rho_in^*`` splits into one summand per (output copy, input
    copy); each summand's nullspace only depends on the two ranks, so it is
    solved once and embedded at the block's position in ``vec(W)``.  The
    columns are orthonormal because different blocks have disjoint support.
    """
    n = group.n
    size_in, size_out = sig_in.size(n), sig_out.size(n)
    cols = []
    for rb, ob, nb in sig_out.blocks(n):
        for ra, oa, na in sig_in.blocks(n):
            qb = _block_basis(group, rb, ra)
            for k in range(qb.shape[1]):
                w = np.zeros((size_out, size_in))
                w[ob : ob + nb, oa : oa + na] = qb[:, k].reshape(nb, na)
                cols.append(w.reshape(-1))
    Q = np.stack(cols, axis=1) if cols else np.zeros((size_out * size_in, 0))
    bcols = []
    for rb, ob, nb in sig_out.blocks(n):
        qb = _block_bias(group, rb)
        for k in range(qb.shape[1]):
            b = np.zeros(size_out)
            b[ob : ob + nb] = qb[:, k]
            bcols.append(b)
    bias_Q = np.stack(bcols, axis=1) if bcols else np.zeros((size_out, 0))
    return EquivariantBasis(
        size_in,
        size_out,
        Q,
        bias_Q,
        lie.rep_from_signature(group, sig_in),
        lie.rep_from_signature(group, sig_out),
    )


def signature_rho(group: MatrixGroup, sig: RepSignature, g: np.ndarray) -> np.ndarray:
    return lie.rep_from_signature(group, sig).rho(g)


# -- nonlinearities ----------------------------------------------------------


def _gate_index(sig: RepSignature, n: int) -> tuple[int, np.ndarray]:
    """(number of scalar channels, gate index for every non-scalar component)."""
    c0 = sig.multiplicity(0)
    idx = []
    for i, (rank, _, size) in enumerate(b for b in sig.blocks(n) if b[0] > 0):
        idx.extend([i] * size)
    return c0, np.asarray(idx, dtype=np.int64)


def n_gates(sig: RepSignature) -> int:
    return sum(m for m, r in sig.terms if r > 0)


def gated_nonlinearity(features: torch.Tensor, gates: torch.Tensor, sig: RepSignature, n: int) -> torch.Tensor:
    """Scalars through ``tanh``; every rank>=1 block scaled by ``sigmoid`` of its gate.

    ``features`` has the canonical layout of ``sig`` on its last axis and
    ``gates`` holds one scalar per rank>=1 block, in block order.
    """
    c0, idx = _gate_index(sig, n)
    if gates.shape[-1] != n_gates(sig):
        raise ValueError(f"expected {n_gates(sig)} gate scalars, got {gates.shape[-1]}")
    if features.shape[-1] != sig.size(n):
        raise ValueError(f"expected {sig.size(n)} features, got {features.shape[-1]}")
    scalars = torch.tanh(features[..., :c0])
    if len(idx) == 0:
        return scalars
    g = torch.sigmoid(gates)[..., torch.as_tensor(idx)]
    return torch.cat([scalars, features[..., c0:] * g], dim=-1)


# -- layer specs ---------------------------------------------------------------


@dataclass(frozen=True)
class Linear:
    """Equivariant linear layer (ELL); an invariant head (ILL) when ``sig_out`` is all rank 0."""

    sig_in: RepSignature
    sig_out: RepSignature


@dataclass(frozen=True)
class Gate:
    """Gated nonlinearity over ``sig``; consumes ``n_gates(sig)`` trailing scalar channels."""

    sig: RepSignature


@dataclass(frozen=True)
class NormFeatures:
    sig: RepSignature


@dataclass(frozen=True)
class PerLag:
    branch: tuple
    n_lags: int


@dataclass(frozen=True)
class AveragePool:
    pass


@dataclass(frozen=True)
class Softmax:
    pass


@dataclass(frozen=True)
class Softplus:
    """``softplus(x) + floor``; the floor keeps predicted scales away from zero."""

    floor: float = 0.0


@dataclass(frozen=True)
class BlockBroadcast:
    """Repeat one scalar per block of ``sig`` over that block's components."""

    sig: RepSignature


LayerSpec = Union[Linear, Gate, NormFeatures, PerLag, AveragePool, Softmax, Softplus, BlockBroadcast]


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    heads: tuple = ()  # optional ((name, layers), ...) applied to the trunk output


def gate_signature(sig: RepSignature) -> RepSignature:
    return sig + RepSignature([(n_gates(sig), 0)])


def norm_signature(sig: RepSignature) -> RepSignature:
    return sig + RepSignature([(n_gates(sig), 0)])


def gated_block(sig_in: RepSignature, sig_out: RepSignature) -> tuple:
    """NormFeatures -> Linear (with gate channels) -> Gate."""
    layers = []
    lin_in = sig_in
    if n_gates(sig_in):
        layers.append(NormFeatures(sig_in))
        lin_in = norm_signature(sig_in)
    layers.append(Linear(lin_in, gate_signature(sig_out)))
    layers.append(Gate(sig_out))
    return tuple(layers)


def invariant_head(sig_in: RepSignature, n_out: int) -> tuple:
    layers = []
    lin_in = sig_in
    if n_gates(sig_in):
        layers.append(NormFeatures(sig_in))
        lin_in = norm_signature(sig_in)
    layers.append(Linear(lin_in, RepSignature([(n_out, 0)])))
    return tuple(layers)


def _in_out(layer, sig):
    """Propagate a signature through one layer spec (``None`` = shape changes freely)."""
    if isinstance(layer, Linear):
        if sig is not None and sig != layer.sig_in:
            raise SignatureMismatchError(f"linear expects {layer.sig_in}, receives {sig}")
        return layer.sig_out
    if isinstance(layer, Gate):
        if sig is not None and sig != gate_signature(layer.sig):
            raise SignatureMismatchError(f"gate expects {gate_signature(layer.sig)}, receives {sig}")
        return layer.sig
    if isinstance(layer, NormFeatures):
        if sig is not None and sig != layer.sig:
            raise SignatureMismatchError(f"norm features expect {layer.sig}, receive {sig}")
        return norm_signature(layer.sig)
    if isinstance(layer, PerLag):
        out = sig
        for sub in layer.branch:
            out = _in_out(sub, out)
        return out
    if isinstance(layer, BlockBroadcast):
        nb = len(layer.sig.blocks(1))
        if sig is not None and sig != RepSignature([(nb, 0)]):
            raise SignatureMismatchError(f"broadcast expects {nb} scalars, receives {sig}")
        return layer.sig
    return sig


def check_spec(spec: NetworkSpec, sig_in: RepSignature | None = None) -> RepSignature:
    sig = sig_in
    for layer in spec.layers:
        sig = _in_out(layer, sig)
    trunk = sig
    for _, layers in spec.heads:
        s = trunk
        for layer in layers:
            s = _in_out(layer, s)
    return trunk


# -- torch modules -------------------------------------------------------------


def _coefficient_variance(basis: EquivariantBasis) -> np.ndarray:
    """Per-coefficient init variance giving unit-variance outputs for unit-variance inputs.

    ``mass[o, k]`` is how much of basis column ``k`` lands in output row ``o``;
    each coefficient gets ``1 / (total mass of the row it mostly feeds)``.  For
    the unconstrained basis this is the usual ``1 / fan_in``.
    """
    mass = (basis.Q.reshape(basis.size_out, basis.size_in, -1) ** 2).sum(axis=1)
    row_total = mass.sum(axis=1)
    return 1.0 / row_total[mass.argmax(axis=0)]


class EquivariantLinear(nn.Module):
    """``x -> W x + b`` with ``W = reshape(Q c)`` and ``b = Q_b c_b``.

    With ``equivariant=False`` the weight and bias are free (the ablation).
    """

    def __init__(
        self,
        group: MatrixGroup,
        sig_in: RepSignature,
        sig_out: RepSignature,
        rng: np.random.Generator,
        equivariant: bool = True,
    ):
        super().__init__()
        n = group.n
        self.sig_in, self.sig_out = sig_in, sig_out
        self.size_in, self.size_out = sig_in.size(n), sig_out.size(n)
        self.equivariant = equivariant
        N = self.size_in * self.size_out
        v0 = rng.normal(0.0, 1.0 / math.sqrt(self.size_in), size=N)
        if equivariant:
            self.basis = signature_basis(group, sig_in, sig_out)
            r, r_b = self.basis.r, self.basis.r_b
            if r == 0 and r_b == 0:
                raise DegenerateLayerError(f"no equivariant weights or biases for {sig_in} -> {sig_out}")
            coeffs = self.basis.Q.T @ v0 * np.sqrt(self.size_in * _coefficient_variance(self.basis)) if r else np.zeros(0)
            self.register_buffer("Q", torch.as_tensor(self.basis.Q, dtype=DTYPE))
            self.register_buffer("bias_Q", torch.as_tensor(self.basis.bias_Q, dtype=DTYPE))
        else:
            self.basis = None
            coeffs, r_b = v0, self.size_out
        self.coeffs = nn.Parameter(torch.as_tensor(coeffs, dtype=DTYPE).clone())
        self.bias = nn.Parameter(torch.zeros(r_b, dtype=DTYPE))

    @property
    def r(self) -> int:
        return self.coeffs.numel()

    def set_projected(self, w0, b0=None) -> None:
        """Load the orthogonal projection of a dense ``(size_out, size_in)`` weight (and bias)."""
        w0 = np.asarray(w0, dtype=float)
        if w0.shape != (self.size_out, self.size_in):
            raise ValueError(f"expected a {self.size_out}x{self.size_in} weight, got {w0.shape}")
        b0 = np.zeros(self.size_out) if b0 is None else np.asarray(b0, dtype=float)
        if self.equivariant:
            coeffs, bias = self.basis.Q.T @ w0.reshape(-1), self.basis.bias_Q.T @ b0
        else:
            coeffs, bias = w0.reshape(-1), b0
        with torch.no_grad():
            self.coeffs.copy_(torch.as_tensor(coeffs, dtype=DTYPE))
            self.bias.copy_(torch.as_tensor(bias, dtype=DTYPE))

    _frozen: tuple[torch.Tensor, torch.Tensor] | None = None

    def freeze(self, on: bool = True) -> None:
        """Cache the effective weight and bias (detached) until unfrozen."""
        self._frozen = None
        if on:
            with torch.no_grad():
                self._frozen = (self.weight().T.contiguous(), self.bias_vector().clone())

    def weight(self) -> torch.Tensor:
        if self.equivariant:
            return (self.Q @ self.coeffs).reshape(self.size_out, self.size_in)
        return self.coeffs.reshape(self.size_out, self.size_in)

    def bias_vector(self) -> torch.Tensor:
        if self.equivariant:
            return self.bias_Q @ self.bias
        return self.bias

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self._frozen is not None:
            wt, b = self._frozen
            return x @ wt + b
        return x @ self.weight().T + self.bias_vector()


class GatedNonlinearity(nn.Module):
    def __init__(self, sig: RepSignature, n: int):
        super().__init__()
        self.sig, self.n = sig, n
        c0 = sig.multiplicity(0)
        k = n_gates(sig)
        # gate channels sit right after the feature scalars in the linear output
        self.feat_idx = torch.as_tensor(list(range(c0)) + list(range(c0 + k, sig.size(n) + k)))
        self.gate_idx = torch.as_tensor(list(range(c0, c0 + k)), dtype=torch.long)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return gated_nonlinearity(h[..., self.feat_idx], h[..., self.gate_idx], self.sig, self.n)


class NormFeatureLayer(nn.Module):
    def __init__(self, sig: RepSignature, n: int):
        super().__init__()
        self.c0 = sig.multiplicity(0)
        _, idx = _gate_index(sig, n)
        self.n_blocks = n_gates(sig)
        self.register_buffer("pool", torch.as_tensor(np.eye(self.n_blocks)[idx], dtype=DTYPE))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        v = x[..., self.c0 :]
        sq = (v * v) @ self.pool
        return torch.cat([x[..., : self.c0], sq, v], dim=-1)


class PerLagModule(nn.Module):
    def __init__(self, branches: Sequence[nn.Module]):
        super().__init__()
        self.branches = nn.ModuleList(branches)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2] != len(self.branches):
            raise ValueError(f"expected {len(self.branches)} lags, got {x.shape[-2]}")
        return torch.stack([b(x[..., i, :]) for i, b in enumerate(self.branches)], dim=-2)


class _Lambda(nn.Module):
    def __init__(self, fn):
        super().__init__()
        self.fn = fn

    def forward(self, x):
        return self.fn(x)


class BroadcastLayer(nn.Module):
    def __init__(self, sig: RepSignature, n: int):
        super().__init__()
        idx = [i for i, (_, _, size) in enumerate(sig.blocks(n)) for _ in range(size)]
        self.idx = torch.as_tensor(idx, dtype=torch.long)

    def forward(self, x):
        return x[..., self.idx]


def _make(layer, group: MatrixGroup, rng: np.random.Generator, equivariant: bool) -> nn.Module:
    n = group.n
    if isinstance(layer, Linear):
        return EquivariantLinear(group, layer.sig_in, layer.sig_out, rng, equivariant)
    if isinstance(layer, Gate):
        return GatedNonlinearity(layer.sig, n)
    if isinstance(layer, NormFeatures):
        return NormFeatureLayer(layer.sig, n)
    if isinstance(layer, PerLag):
        return PerLagModule(
            [nn.Sequential(*[_make(s, group, rng, equivariant) for s in layer.branch]) for _ in range(layer.n_lags)]
        )
    if isinstance(layer, AveragePool):
        return _Lambda(lambda x: x.mean(dim=-2))
    if isinstance(layer, Softmax):
        return _Lambda(lambda x: torch.softmax(x, dim=-1))
    if isinstance(layer, Softplus):
        floor = layer.floor
        return _Lambda(lambda x: torch.nn.functional.softplus(x) + floor)
    if isinstance(layer, BlockBroadcast):
        return BroadcastLayer(layer.sig, n)
    raise TypeError(f"unknown layer spec {layer!r}")


class Network(nn.Module):
    def __init__(self, spec: NetworkSpec, group: MatrixGroup, rng: np.random.Generator, equivariant: bool = True):
        super().__init__()
        check_spec(spec)
        self.spec = spec
        self.trunk = nn.Sequential(*[_make(l, group, rng, equivariant) for l in spec.layers])
        self.head_names = [name for name, _ in spec.heads]
        self.heads = nn.ModuleList(
            [nn.Sequential(*[_make(l, group, rng, equivariant) for l in layers]) for _, layers in spec.heads]
        )

    def forward(self, x: torch.Tensor):
        h = self.trunk(x)
        if not self.heads:
            return h
        return tuple(head(h) for head in self.heads)

    def linear_layers(self) -> list[EquivariantLinear]:
        return [m for m in self.modules() if isinstance(m, EquivariantLinear)]

    def n_free(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_network(
    spec: NetworkSpec, group: MatrixGroup, rng: np.random.Generator, equivariant: bool = True
) -> Network:
    return Network(spec, group, rng, equivariant)


def build_equivariant_linear(
    group: MatrixGroup, sig_in: RepSignature, sig_out: RepSignature, rng: np.random.Generator
) -> EquivariantLinear:
    return EquivariantLinear(group, sig_in, sig_out, rng)


# -- the three network families of the dynamical model -----------------------


def mlp_layers(sig_in: RepSignature, hidden: Sequence[RepSignature]) -> tuple:
    layers, sig = [], sig_in
    for h in hidden:
        layers.extend(gated_block(sig, h))
        sig = h
    return tuple(layers)


def emission_spec(latent: RepSignature, obs: RepSignature, width: int = 2, depth: int = 3) -> NetworkSpec:
    """``z -> x``: ``depth`` gated blocks of ``width`` copies of the latent type, then a linear map."""
    hid = latent.scaled(width)
    layers = mlp_layers(latent, [hid] * depth)
    lin_in = hid
    if obs.multiplicity(0) and n_gates(hid):
        layers += (NormFeatures(hid),)
        lin_in = norm_signature(hid)
    return NetworkSpec(layers + (Linear(lin_in, obs),))


def transition_spec(latent: RepSignature, n_lags: int, width: int = 5) -> NetworkSpec:
    """``z_{t-l} (l in lags) -> (mean, sigma)``: per-lag blocks, pool over lags, shared block, two heads."""
    hid = latent.scaled(width)
    branch = mlp_layers(latent, [hid, hid])
    trunk = (PerLag(branch, n_lags), AveragePool()) + mlp_layers(hid, [hid])
    mean_in = hid
    mean_head: tuple = ()
    if latent.multiplicity(0) and n_gates(hid):
        mean_head = (NormFeatures(hid),)
        mean_in = norm_signature(hid)
    mean_head += (Linear(mean_in, latent),)
    n_blocks = len(latent.blocks(1))
    sigma_head = invariant_head(hid, n_blocks) + (Softplus(SCALE_FLOOR), BlockBroadcast(latent))
    return NetworkSpec(trunk, heads=(("mean", mean_head), ("sigma", sigma_head)))


def switch_spec(latent: RepSignature, n_states: int, width: int = 3) -> NetworkSpec:
    """``z_{t-1} -> simplex``: two gated blocks, invariant head, softmax."""
    hid = latent.scaled(width)
    return NetworkSpec(mlp_layers(latent, [hid, hid]) + invariant_head(hid, n_states) + (Softmax(),))
