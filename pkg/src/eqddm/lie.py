"""Matrix Lie groups and their finite-dimensional real representations.

Representations are small trees (``Base``, ``Dual``, ``DirectSum``,
``TensorProduct``, ``Trivial``) that evaluate eagerly to dense matrices, both
at group elements (``rho``) and at Lie-algebra elements (``drho``).

SO(3) generator order is frozen: ``A[0]`` rotates about x, ``A[1]`` about y,
``A[2]`` about z, with ``(A_k)_ij = -eps_kij`` so that ``expm(theta * A[2])``
is the right-handed rotation by ``theta`` about z.  Every equivariant basis in
this package depends on that order.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import reduce
from typing import Sequence

import numpy as np
import scipy.linalg

GROUP_TOL = 1e-8


class InvalidDimensionError(ValueError):
    pass


class InvalidElementError(ValueError):
    pass


def expm(a: np.ndarray) -> np.ndarray:
    """Matrix exponential (scaling and squaring with a Pade core)."""
    return scipy.linalg.expm(np.asarray(a, dtype=float))


def so_n_generators(n: int) -> list[np.ndarray]:
    """Basis of so(n): n(n-1)/2 antisymmetric matrices with entries in {-1, 0, 1}."""
    if n < 2:
        raise InvalidDimensionError(f"SO(n) needs n >= 2, got {n}")
    if n == 3:
        eps = np.zeros((3, 3, 3))
        for i, j, k in itertools.permutations(range(3)):
            eps[i, j, k] = np.linalg.det(np.eye(3)[[i, j, k]])
        return [-eps[k] for k in range(3)]
    gens = []
    for i, j in itertools.combinations(range(n), 2):
        a = np.zeros((n, n))
        a[j, i] = 1.0
        a[i, j] = -1.0
        gens.append(a)
    return gens


@dataclass(frozen=True, eq=False)
class MatrixGroup:
    n: int
    generators: tuple[np.ndarray, ...]
    name: str = ""

    @property
    def D(self) -> int:
        return len(self.generators)

    def __repr__(self) -> str:
        return self.name or f"MatrixGroup(n={self.n}, D={self.D})"


def SO(n: int) -> MatrixGroup:
    return MatrixGroup(n, tuple(so_n_generators(n)), name=f"SO({n})")


def exp_map(group: MatrixGroup, coeffs: Sequence[float]) -> np.ndarray:
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape != (group.D,):
        raise ValueError(f"expected {group.D} coefficients, got shape {coeffs.shape}")
    a = np.tensordot(coeffs, np.stack(group.generators), axes=1)
    return expm(a)


def sample_group_element(group: MatrixGroup, rng: np.random.Generator) -> np.ndarray:
    """exp of algebra coefficients drawn uniformly on [-pi, pi]^D."""
    return exp_map(group, rng.uniform(-np.pi, np.pi, size=group.D))


def sample_algebra_element(group: MatrixGroup, rng: np.random.Generator, scale: float = np.pi) -> np.ndarray:
    coeffs = rng.uniform(-scale, scale, size=group.D)
    return np.tensordot(coeffs, np.stack(group.generators), axes=1)


def check_group_element(g: np.ndarray, n: int) -> np.ndarray:
    g = np.asarray(g, dtype=float)
    if g.shape != (n, n):
        raise InvalidElementError(f"expected a {n}x{n} group element, got {g.shape}")
    err = np.linalg.norm(g.T @ g - np.eye(n))
    if not err <= GROUP_TOL:
        raise InvalidElementError(f"element is not orthogonal: |R^T R - I|_F = {err:.3g}")
    return g


def check_algebra_element(a: np.ndarray, n: int) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.shape != (n, n):
        raise InvalidElementError(f"expected a {n}x{n} algebra element, got {a.shape}")
    err = np.linalg.norm(a + a.T)
    if not err <= GROUP_TOL * max(1.0, np.linalg.norm(a)):
        raise InvalidElementError(f"element is not antisymmetric: |A + A^T|_F = {err:.3g}")
    return a


# -- representations ---------------------------------------------------------


class Representation:
    group: MatrixGroup

    @property
    def size(self) -> int:
        raise NotImplementedError

    def _rho(self, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _drho(self, a: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def rho(self, g: np.ndarray) -> np.ndarray:
        return self._rho(check_group_element(g, self.group.n))

    def drho(self, a: np.ndarray) -> np.ndarray:
        return self._drho(check_algebra_element(a, self.group.n))

    # operator sugar
    def __add__(self, other: Representation) -> DirectSum:
        return DirectSum((self, other))

    def __mul__(self, other: Representation) -> TensorProduct:
        return TensorProduct(self, other)

    @property
    def T(self) -> Dual:
        return Dual(self)


@dataclass(frozen=True, eq=False)
class Trivial(Representation):
    group: MatrixGroup

    @property
    def size(self) -> int:
        return 1

    def _rho(self, g):
        return np.eye(1)

    def _drho(self, a):
        return np.zeros((1, 1))


@dataclass(frozen=True, eq=False)
class Base(Representation):
    group: MatrixGroup

    @property
    def size(self) -> int:
        return self.group.n

    def _rho(self, g):
        return g

    def _drho(self, a):
        return a


@dataclass(frozen=True, eq=False)
class Dual(Representation):
    rep: Representation

    @property
    def group(self) -> MatrixGroup:
        return self.rep.group

    @property
    def size(self) -> int:
        return self.rep.size

    def _rho(self, g):
        return self.rep._rho(np.linalg.inv(g)).T

    def _drho(self, a):
        return -self.rep._drho(a).T


@dataclass(frozen=True, eq=False)
class DirectSum(Representation):
    reps: tuple[Representation, ...]

    def __post_init__(self):
        if not self.reps:
            raise ValueError("empty direct sum")
        if any(r.group is not self.reps[0].group for r in self.reps):
            raise ValueError("direct sum over different groups")

    @property
    def group(self) -> MatrixGroup:
        return self.reps[0].group

    @property
    def size(self) -> int:
        return sum(r.size for r in self.reps)

    def _rho(self, g):
        return scipy.linalg.block_diag(*[r._rho(g) for r in self.reps])

    def _drho(self, a):
        return scipy.linalg.block_diag(*[r._drho(a) for r in self.reps])


@dataclass(frozen=True, eq=False)
class TensorProduct(Representation):
    left: Representation
    right: Representation

    def __post_init__(self):
        if self.left.group is not self.right.group:
            raise ValueError("tensor product over different groups")

    @property
    def group(self) -> MatrixGroup:
        return self.left.group

    @property
    def size(self) -> int:
        return self.left.size * self.right.size

    def _rho(self, g):
        return np.kron(self.left._rho(g), self.right._rho(g))

    def _drho(self, a):
        da, db = self.left._drho(a), self.right._drho(a)
        return np.kron(da, np.eye(db.shape[0])) + np.kron(np.eye(da.shape[0]), db)


def rho_of(rep: Representation, g: np.ndarray) -> np.ndarray:
    return rep.rho(g)


def drho_of(rep: Representation, a: np.ndarray) -> np.ndarray:
    return rep.drho(a)


def tensor_power(group: MatrixGroup, rank: int) -> Representation:
    """T_rank: the rank-fold tensor power of the base representation (T_0 is trivial)."""
    if rank == 0:
        return Trivial(group)
    return reduce(TensorProduct, [Base(group)] * rank)


# -- signatures --------------------------------------------------------------


@dataclass(frozen=True)
class RepSignature:
    """Feature-space type ``c_0 T_0 + c_1 T_1 + ...`` as (multiplicity, rank) pairs.

    Pairs are normalised to ascending rank with zero multiplicities dropped, so
    two signatures describing the same space compare equal.
    """

    terms: tuple[tuple[int, int], ...]

    def __init__(self, terms):
        acc: dict[int, int] = {}
        for mult, rank in terms:
            mult, rank = int(mult), int(rank)
            if mult < 0 or rank < 0:
                raise ValueError(f"invalid signature term {mult}x{rank}")
            acc[rank] = acc.get(rank, 0) + mult
        object.__setattr__(self, "terms", tuple((acc[r], r) for r in sorted(acc) if acc[r] > 0))

    @classmethod
    def parse(cls, text: str) -> RepSignature:
        """Parse ``"1x0,2x1"`` (multiplicity x rank, comma separated)."""
        terms = []
        for item in text.replace(" ", "").split(","):
            if not item:
                continue
            mult, sep, rank = item.partition("x")
            if not sep or not mult.isdigit() or not rank.isdigit():
                raise ValueError(f"bad signature term {item!r}; expected <mult>x<rank>")
            terms.append((int(mult), int(rank)))
        if not terms:
            raise ValueError(f"empty signature {text!r}")
        return cls(terms)

    def __str__(self) -> str:
        return ",".join(f"{m}x{r}" for m, r in self.terms)

    def multiplicity(self, rank: int) -> int:
        return dict((r, m) for m, r in self.terms).get(rank, 0)

    def size(self, n: int) -> int:
        return sum(m * n**r for m, r in self.terms)

    def blocks(self, n: int) -> list[tuple[int, int, int]]:
        """(rank, offset, size) of every copy, in the canonical rank-ascending order."""
        out, off = [], 0
        for mult, rank in self.terms:
            for _ in range(mult):
                out.append((rank, off, n**rank))
                off += n**rank
        return out

    def scaled(self, factor: int) -> RepSignature:
        return RepSignature([(m * factor, r) for m, r in self.terms])

    def __add__(self, other: RepSignature) -> RepSignature:
        return RepSignature(self.terms + other.terms)

    @property
    def is_invariant(self) -> bool:
        return all(r == 0 for _, r in self.terms)


def rep_from_signature(group: MatrixGroup, sig: RepSignature) -> Representation:
    reps = [tensor_power(group, rank) for mult, rank in sig.terms for _ in range(mult)]
    if len(reps) == 1:
        return reps[0]
    return DirectSum(tuple(reps))
