"""Trajectories: pendulum simulation, CSV I/O, splitting, rotation and scaling.

CSV layout: a header ``t,j0_x,j0_y,j0_z,j1_x,...`` followed by one row per
timestep.  An empty cell is a missing value.  Floats are written with
``repr`` so a save/load round trip is exact.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

AXES = ("x", "y", "z")


class CSVFormatError(ValueError):
    pass


@dataclass
class Sequence:
    values: np.ndarray  # (T, 3D); NaN where unobserved
    mask: np.ndarray  # (T, 3D) bool, True = observed
    name: str = ""
    dt: float = 1.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.shape[1] % 3:
            raise ValueError(f"values must be T x 3D, got {self.values.shape}")
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.values.shape:
            raise ValueError("mask and values differ in shape")

    @classmethod
    def from_values(cls, values, name: str = "", dt: float = 1.0) -> Sequence:
        values = np.asarray(values, dtype=float)
        return cls(values, np.isfinite(values), name, dt)

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def n_joints(self) -> int:
        return self.values.shape[1] // 3

    def filled(self, fill: float = 0.0) -> np.ndarray:
        return np.where(self.mask, self.values, fill)

    def slice(self, start: int, stop: int | None = None) -> Sequence:
        return replace(self, values=self.values[start:stop].copy(), mask=self.mask[start:stop].copy())


@dataclass(frozen=True)
class PendulumSpec:
    T: int = 410
    dt: float = 0.05
    gravity: float = 9.81
    length: float = 1.0
    theta0: float = math.pi / 2
    omega0: float = 0.0
    plane: str = "yz"
    noise: float = 0.0
    substeps: int = 10

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.length > 0:
            raise ValueError("length must be positive")
        if self.T < 2:
            raise ValueError("T must be at least 2")
        if self.substeps < 1:
            raise ValueError("substeps must be at least 1")
        if len(self.plane) != 2 or any(c not in AXES for c in self.plane) or self.plane[0] == self.plane[1]:
            raise ValueError(f"plane must name two distinct axes, got {self.plane!r}")


def _rk4(f, y, h):
    k1 = f(y)
    k2 = f(y + 0.5 * h * k1)
    k3 = f(y + 0.5 * h * k2)
    k4 = f(y + h * k3)
    return y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def pendulum_angles(spec: PendulumSpec) -> np.ndarray:
    """(T, 2) array of (theta, omega) from RK4 with ``substeps`` steps per sample."""
    w2 = spec.gravity / spec.length

    def f(y):
        return np.array([y[1], -w2 * math.sin(y[0])])

    h = spec.dt / spec.substeps
    y = np.array([spec.theta0, spec.omega0], dtype=float)
    out = np.empty((spec.T, 2))
    out[0] = y
    for t in range(1, spec.T):
        for _ in range(spec.substeps):
            y = _rk4(f, y, h)
        out[t] = y
    return out


def pendulum_energy(spec: PendulumSpec, states: np.ndarray) -> np.ndarray:
    """Energy per unit mass, ``L^2 w^2 / 2 - g L cos(theta)``."""
    th, om = states[:, 0], states[:, 1]
    return 0.5 * spec.length**2 * om**2 - spec.gravity * spec.length * np.cos(th)


def simulate_pendulum(spec: PendulumSpec = PendulumSpec(), rng: np.random.Generator | None = None) -> Sequence:
    """Bob coordinates of a planar pendulum pivoted at the origin.

    The swing plane is spanned by ``spec.plane``: the first axis carries
    ``L sin(theta)``, the second ``-L cos(theta)``; the remaining axis stays 0.
    """
    states = pendulum_angles(spec)
    xyz = np.zeros((spec.T, 3))
    i, j = AXES.index(spec.plane[0]), AXES.index(spec.plane[1])
    xyz[:, i] = spec.length * np.sin(states[:, 0])
    xyz[:, j] = -spec.length * np.cos(states[:, 0])
    if spec.noise > 0:
        if rng is None:
            raise ValueError("observation noise needs an rng")
        xyz = xyz + rng.normal(0.0, spec.noise, size=xyz.shape)
    return Sequence.from_values(xyz, name="pendulum", dt=spec.dt)


def split_half(seq: Sequence, max_lag: int = 1) -> tuple[Sequence, Sequence]:
    """First ceil(T/2) steps for training, the rest for testing."""
    if seq.T < 2 or seq.T - math.ceil(seq.T / 2) < 1 or seq.T < 2 * (max_lag + 1) - 1:
        raise ValueError(f"sequence of length {seq.T} is too short to split with max lag {max_lag}")
    cut = math.ceil(seq.T / 2)
    return seq.slice(0, cut), seq.slice(cut)


def rotation_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotate_values(values: np.ndarray, R: np.ndarray) -> np.ndarray:
    T, d = values.shape
    return (values.reshape(T, d // 3, 3) @ R.T).reshape(T, d)


def rotate_sequence(seq: Sequence, angle: float, axis: str = "z") -> Sequence:
    if not math.isfinite(angle):
        raise ValueError("rotation angle must be finite")
    if axis != "z":
        raise ValueError("only rotations about z are supported")
    vals = rotate_values(seq.filled(0.0), rotation_z(angle))
    vals[~seq.mask] = np.nan
    return replace(seq, values=vals, mask=seq.mask.copy(), name=f"{seq.name}@{angle:.6g}")


def rotation_angles(n_angles: int, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(0.0, 2.0 * math.pi, size=n_angles)


def make_rotated_testset(seq: Sequence, n_angles: int, rng: np.random.Generator) -> list[tuple[float, Sequence]]:
    return [(float(a), rotate_sequence(seq, float(a))) for a in rotation_angles(n_angles, rng)]


def random_mask(seq: Sequence, fraction: float, rng: np.random.Generator) -> Sequence:
    """Hide ``fraction`` of the observed entries, chosen uniformly at random."""
    observed = np.flatnonzero(seq.mask)
    hidden = rng.choice(observed, size=int(round(fraction * observed.size)), replace=False)
    mask = seq.mask.copy()
    mask.flat[hidden] = False
    vals = np.where(mask, seq.values, np.nan)
    return replace(seq, values=vals, mask=mask)


# -- scaling -----------------------------------------------------------------


@dataclass(frozen=True)
class DataTransform:
    """``x -> (x - center) / scale`` applied to every joint triple.

    One scalar scale for all axes, so rotations about axes through ``center``
    commute with the transform.
    """

    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    scale: float = 1.0

    @classmethod
    def fit(cls, seqs: list[Sequence], axis: str | None = "z") -> DataTransform:
        """Centroid and max-abs scale of the observed joint positions.

        With ``axis`` set, the center is projected onto that coordinate axis so
        rotations about it (through the origin) still commute with the
        transform.  ``axis=None`` uses the full centroid.
        """
        pts = np.concatenate([_observed_points(s) for s in seqs])
        if len(pts) == 0:
            raise ValueError("no fully observed joint positions to fit a transform")
        center = pts.mean(axis=0)
        if axis is not None:
            if axis not in AXES:
                raise ValueError(f"unknown axis {axis!r}")
            keep = AXES.index(axis)
            center = np.where(np.arange(3) == keep, center, 0.0)
        scale = float(np.abs(pts - center).max())
        if not scale > 0:
            scale = 1.0
        return cls(tuple(float(c) for c in center), scale)

    def apply(self, seq: Sequence) -> Sequence:
        c = np.tile(np.asarray(self.center), seq.n_joints)
        vals = (seq.values - c) / self.scale
        return replace(seq, values=vals, mask=seq.mask.copy())

    def invert_values(self, values: np.ndarray) -> np.ndarray:
        c = np.tile(np.asarray(self.center), values.shape[-1] // 3)
        return values * self.scale + c

    def invert_std(self, std: np.ndarray) -> np.ndarray:
        return std * self.scale


def _observed_points(seq: Sequence) -> np.ndarray:
    T, d = seq.values.shape
    pts = seq.values.reshape(T * d // 3, 3)
    ok = seq.mask.reshape(T * d // 3, 3).all(axis=1)
    return pts[ok]


# -- CSV ---------------------------------------------------------------------


def csv_header(n_joints: int) -> list[str]:
    return ["t"] + [f"j{j}_{a}" for j in range(n_joints) for a in AXES]


def save_csv(seq: Sequence, path: str | Path | io.TextIOBase) -> None:
    rows = [csv_header(seq.n_joints)]
    for t in range(seq.T):
        rows.append([str(t)] + [repr(float(v)) if m else "" for v, m in zip(seq.values[t], seq.mask[t])])
    text = "\n".join(",".join(r) for r in rows) + "\n"
    if isinstance(path, io.TextIOBase):
        path.write(text)
    else:
        Path(path).write_text(text)


def load_csv(path: str | Path, name: str | None = None, dt: float = 1.0) -> Sequence:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CSVFormatError(f"{path}: empty file") from None
        width = len(header)
        if width < 4 or (width - 1) % 3 or header != csv_header((width - 1) // 3):
            raise CSVFormatError(f"{path}: line 1: malformed header {header!r}")
        vals, mask = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise CSVFormatError(f"{path}: line {lineno}: expected {width} fields, found {len(row)}")
            rv, rm = [], []
            for cell in row[1:]:
                cell = cell.strip()
                if cell == "":
                    rv.append(np.nan)
                    rm.append(False)
                    continue
                try:
                    x = float(cell)
                except ValueError:
                    raise CSVFormatError(f"{path}: line {lineno}: non-numeric cell {cell!r}") from None
                if not math.isfinite(x):
                    raise CSVFormatError(f"{path}: line {lineno}: non-finite cell {cell!r}")
                rv.append(x)
                rm.append(True)
            vals.append(rv)
            mask.append(rm)
    if not vals:
        raise CSVFormatError(f"{path}: no data rows")
    return Sequence(np.array(vals), np.array(mask), name=name or path.stem, dt=dt)
