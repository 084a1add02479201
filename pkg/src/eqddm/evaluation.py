"""NRMSE, regular-vs-rotated evaluation tables and plot-series files.

Prediction CSV (long format, one row per timestep and coordinate)::

    t,joint,axis,predicted,truth,observed,q_s0,...,q_s{S-1},pred_std,state

``truth`` is empty where the entry is missing (``observed`` = 0),
``predicted`` / ``pred_std`` are empty during the warm-up steps, ``state`` is
the argmax of the inferred state posterior after seeing ``x_t``.  Values are
in data units.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import ssm
from .data import AXES, DataTransform, Sequence, make_rotated_testset

RESULT_COLUMNS = ("dataset", "variant", "rotation_angle", "nrmse_pct")
BAND_Z = 2.0


def nrmse(pred, truth, mask=None) -> float:
    """``100 * RMSE / (max - min)`` over the observed entries of ``truth``."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    mask = np.isfinite(truth) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != truth.shape:
        raise ValueError("mask shape differs from truth")
    if not mask.any():
        raise ValueError("nrmse needs at least one observed entry")
    t, p = truth[mask], pred[mask]
    if not np.isfinite(p).all():
        raise ValueError("prediction missing at an observed entry")
    rng = float(t.max() - t.min())
    if rng == 0.0:
        raise ValueError("truth is constant; NRMSE range is zero")
    return 100.0 * math.sqrt(float(np.mean((p - t) ** 2))) / rng


# -- predictions in data units ------------------------------------------------


@dataclass
class Prediction:
    """One sequence's rolling prediction mapped back to data units."""

    truth: Sequence
    pred: np.ndarray  # (T, 3D), NaN during warm-up
    pred_std: np.ndarray  # (T, 3D)
    state: np.ndarray  # (T,)
    q_state: np.ndarray  # (T, S)
    warmup: int

    @property
    def name(self) -> str:
        return self.truth.name

    def score(self, mask: np.ndarray | None = None) -> float:
        """NRMSE over observed entries from ``warmup`` on (``mask`` narrows it further)."""
        m = self.truth.mask.copy()
        if mask is not None:
            m &= mask
        m[: self.warmup] = False
        return nrmse(np.where(np.isnan(self.pred), 0.0, self.pred), self.truth.filled(0.0), m)


def predict(
    model: ssm.DynamicalModel, transform: DataTransform, sequences: list[Sequence], steps: int | None = None
) -> list[Prediction]:
    """Rolling prediction on raw sequences; outputs in the sequences' own units."""
    results = ssm.rolling_predict(model, [transform.apply(s) for s in sequences], steps)
    out = []
    for seq, r in zip(sequences, results):
        out.append(
            Prediction(
                seq,
                transform.invert_values(r.pred),
                transform.invert_std(r.pred_std),
                r.states,
                r.q_state,
                r.warmup,
            )
        )
    return out


def save_predictions(pred: Prediction, path: str | Path) -> None:
    seq = pred.truth
    S = pred.q_state.shape[1]
    header = ["t", "joint", "axis", "predicted", "truth", "observed"]
    header += [f"q_s{s}" for s in range(S)] + ["pred_std", "state"]

    def fmt(v):
        return "" if not np.isfinite(v) else repr(float(v))

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for t in range(seq.T):
            q = [repr(float(v)) for v in pred.q_state[t]]
            for c in range(seq.values.shape[1]):
                obs = bool(seq.mask[t, c])
                w.writerow(
                    [t, c // 3, AXES[c % 3], fmt(pred.pred[t, c]), fmt(seq.values[t, c]) if obs else "", int(obs)]
                    + q
                    + [fmt(pred.pred_std[t, c]), int(pred.state[t])]
                )


def load_predictions(path: str | Path, name: str | None = None) -> Prediction:
    """Inverse of :func:`save_predictions`."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no prediction rows")
    need = {"t", "joint", "axis", "truth", "observed", "predicted", "pred_std", "state"}
    missing = need - set(rows[0])
    if missing:
        raise ValueError(f"{path}: missing columns {sorted(missing)}")
    qcols = sorted((c for c in rows[0] if c.startswith("q_s")), key=lambda c: int(c[3:]))
    T = max(int(r["t"]) for r in rows) + 1
    J = max(int(r["joint"]) for r in rows) + 1
    vals = np.full((T, 3 * J), np.nan)
    mask = np.zeros((T, 3 * J), dtype=bool)
    pv, ps = np.full_like(vals, np.nan), np.full_like(vals, np.nan)
    state = np.zeros(T, dtype=np.int64)
    q = np.zeros((T, len(qcols)))
    num = lambda s: float(s) if s != "" else np.nan  # noqa: E731
    for r in rows:
        t, c = int(r["t"]), 3 * int(r["joint"]) + AXES.index(r["axis"])
        mask[t, c] = r["observed"] == "1"
        vals[t, c] = num(r["truth"])
        pv[t, c], ps[t, c] = num(r["predicted"]), num(r["pred_std"])
        state[t] = int(r["state"])
        q[t] = [float(r[k]) for k in qcols]
    warm = np.isnan(pv).all(axis=1)
    warmup = int(np.argmin(warm)) if not warm.all() else T
    return Prediction(Sequence(vals, mask, name or path.stem), pv, ps, state, q, warmup)


# -- regular vs rotated ---------------------------------------------------------


@dataclass
class ResultRow:
    dataset: str
    variant: str
    rotation_angle: str  # "none", a radian value, or "mean"
    nrmse_pct: float


@dataclass
class EvalReport:
    rows: list[ResultRow] = field(default_factory=list)
    predictions: dict[str, list[Prediction]] = field(default_factory=dict)

    def value(self, dataset: str, rotation: str = "none") -> float:
        for r in self.rows:
            if r.dataset == dataset and r.rotation_angle == rotation:
                return r.nrmse_pct
        raise KeyError((dataset, rotation))

    def rotated_values(self, dataset: str) -> list[float]:
        return [r.nrmse_pct for r in self.rows if r.dataset == dataset and r.rotation_angle not in ("none", "mean")]


def format_angle(angle: float) -> str:
    return f"{angle:.6f}"


def evaluate(
    model: ssm.DynamicalModel,
    transform: DataTransform,
    tests: list[Sequence],
    rotated_sets: list[list[tuple[float, Sequence]]] | None = None,
    steps: int | None = None,
) -> EvalReport:
    """Rolling-prediction NRMSE on each test sequence and on its rotated copies.

    Rows per dataset: the regular score (angle ``none``), one row per
    rotation angle and, when there are rotated copies, their ``mean``.
    """
    rotated_sets = rotated_sets or [[] for _ in tests]
    if len(rotated_sets) != len(tests):
        raise ValueError("need one rotated set per test sequence")
    variant = model.config.variant
    report = EvalReport()
    for seq, rot in zip(tests, rotated_sets):
        preds = predict(model, transform, [seq] + [s for _, s in rot], steps)
        report.predictions[seq.name] = preds
        report.rows.append(ResultRow(seq.name, variant, "none", preds[0].score()))
        scores = []
        for (angle, _), p in zip(rot, preds[1:]):
            scores.append(p.score())
            report.rows.append(ResultRow(seq.name, variant, format_angle(angle), scores[-1]))
        if scores:
            report.rows.append(ResultRow(seq.name, variant, "mean", float(np.mean(scores))))
    return report


def rotated_sets_for(tests: list[Sequence], n_angles: int, seed: int) -> list[list[tuple[float, Sequence]]]:
    """Fresh z-rotation angles for every dataset, drawn from one seeded stream."""
    rng = np.random.default_rng(seed)
    return [make_rotated_testset(s, n_angles, rng) if n_angles > 0 else [] for s in tests]


def write_results_csv(rows: Iterable[ResultRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in rows:
            w.writerow([r.dataset, r.variant, r.rotation_angle, repr(float(r.nrmse_pct))])


def results_json(rows: Iterable[ResultRow]) -> str:
    return json.dumps([asdict(r) for r in rows], indent=2)


def format_table(rows: list[ResultRow]) -> str:
    """Fixed-width text table of the result rows."""
    head = ("dataset", "variant", "rotation", "NRMSE %")
    body = [(r.dataset, r.variant, r.rotation_angle, f"{r.nrmse_pct:.3f}") for r in rows]
    widths = [max(len(x[i]) for x in [head] + body) for i in range(4)]
    line = lambda cells: "  ".join(c.ljust(w) if i < 3 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths)))  # noqa: E731
    out = [line(head), "  ".join("-" * w for w in widths)]
    out += [line(b) for b in body]
    return "\n".join(out)


# -- plot series ----------------------------------------------------------------


def plot_series(pred: Prediction, joint: int) -> dict[str, np.ndarray]:
    """Columns of one joint's plot series, all of length T."""
    T = pred.truth.T
    cols: dict[str, np.ndarray] = {"t": np.arange(T, dtype=float)}
    for a, ax in enumerate(AXES):
        c = 3 * joint + a
        truth = np.where(pred.truth.mask[:, c], pred.truth.values[:, c], np.nan)
        p, s = pred.pred[:, c], pred.pred_std[:, c]
        cols[f"truth_{ax}"] = truth
        cols[f"pred_{ax}"] = p
        cols[f"lower_{ax}"] = p - BAND_Z * s
        cols[f"upper_{ax}"] = p + BAND_Z * s
    cols["state"] = pred.state.astype(float)
    return cols


def emit_plot_data(pred: Prediction, out_dir: str | Path, stem: str | None = None) -> list[Path]:
    """One CSV per joint: ``t``, then truth / prediction / band per axis, then ``state``.

    The band is the prediction plus or minus ``BAND_Z`` first-order standard
    deviations.  Empty cells mark missing truth or the warm-up steps.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = stem or pred.name or "prediction"
    paths = []
    for j in range(pred.truth.n_joints):
        cols = plot_series(pred, j)
        path = out_dir / f"{stem}_joint{j}.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(list(cols))
            for t in range(pred.truth.T):
                row = []
                for k, v in cols.items():
                    x = v[t]
                    if k in ("t", "state"):
                        row.append(str(int(x)))
                    else:
                        row.append("" if not np.isfinite(x) else repr(float(x)))
                w.writerow(row)
        paths.append(path)
    return paths
