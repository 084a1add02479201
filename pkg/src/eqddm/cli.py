"""Command-line interface: ``eqddm {basis,simulate,train,predict,evaluate,plot}``.

Configuration precedence for ``train`` (later wins): built-in defaults, then
the ``--config`` file (``key = value`` lines), then ``--set key=value``
options, then the dedicated flags (``--epochs``, ``--lr``, ``--seed``,
``--variant``).

Exit codes: 0 success, 1 runtime failure (missing file, bad data, shape
mismatch, divergence), 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__, data, equivariant, evaluation, lie, ssm
from .diffcore import NonFiniteError

log = logging.getLogger("eqddm")

GROUPS = {"so2": 2, "so3": 3}


class UsageError(Exception):
    """Bad flag values caught after argparse; reported with exit code 2."""


def _signature(text: str) -> lie.RepSignature:
    try:
        return lie.RepSignature.parse(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def _positive_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not (v > 0 and math.isfinite(v)):
        raise argparse.ArgumentTypeError(f"must be a positive number, got {text}")
    return v


def _nonneg_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _fraction(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 <= v < 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1), got {v}")
    return v


# -- basis ----------------------------------------------------------------------


def _matrix_rows(m: np.ndarray) -> list[str]:
    return [",".join(repr(float(v)) for v in row) for row in np.atleast_2d(m)]


def cmd_basis(args) -> int:
    """Report ``r``, ``r_b`` and every basis element.

    Each weight element is a ``size_out x size_in`` block of comma-separated
    rows (row-major, ``repr`` precision) after a ``weight k`` line; each bias
    element is one comma-separated row after a ``bias k`` line.
    """
    group = lie.SO(GROUPS[args.group])
    basis = equivariant.signature_basis(group, args.in_sig, args.out_sig)
    lines = [
        f"group {group}  in {args.in_sig} (size {basis.size_in})  out {args.out_sig} (size {basis.size_out})",
        f"r = {basis.r}",
        f"r_b = {basis.r_b}",
    ]
    for k in range(basis.r):
        lines.append(f"weight {k}")
        lines.extend(_matrix_rows(basis.weight(np.eye(basis.r)[k])))
    for k in range(basis.r_b):
        lines.append(f"bias {k}")
        lines.extend(_matrix_rows(basis.bias_Q[:, k]))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(f"r = {basis.r}\nr_b = {basis.r_b}\nwrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


# -- simulate -------------------------------------------------------------------


def cmd_simulate(args) -> int:
    try:
        spec = data.PendulumSpec(
            T=args.T,
            dt=args.dt,
            gravity=args.gravity,
            length=args.length,
            theta0=args.theta0,
            omega0=args.omega0,
            plane=args.plane,
            noise=args.noise,
            substeps=args.substeps,
        )
    except ValueError as e:
        raise UsageError(str(e)) from None
    rng = np.random.default_rng(args.seed)
    seq = data.simulate_pendulum(spec, rng)
    if args.split == "half":
        if args.out in (None, "-"):
            raise UsageError("--split half needs --out to name the output files")
        train, test = data.split_half(seq, args.max_lag)
        out = Path(args.out)
        data.save_csv(seq, out)
        paths = [out.with_name(f"{out.stem}_train.csv"), out.with_name(f"{out.stem}_test.csv")]
        data.save_csv(train, paths[0])
        data.save_csv(test, paths[1])
        print(f"wrote {out} ({seq.T} rows), {paths[0]} ({train.T}), {paths[1]} ({test.T})")
    elif args.out in (None, "-"):
        data.save_csv(seq, sys.stdout)
    else:
        data.save_csv(seq, args.out)
        print(f"wrote {args.out} ({seq.T} rows)")
    return 0


# -- train ----------------------------------------------------------------------


def build_config(args) -> ssm.ModelConfig:
    values: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        values.update(ssm.ModelConfig.parse_text(path.read_text(), str(path)))
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        values[key.strip()] = ssm.ModelConfig.parse_value(key.strip(), value)
    for key in ("epochs", "lr", "seed", "variant"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    return ssm.ModelConfig(**values)


def _load_sequences(paths: list[str]) -> list[data.Sequence]:
    seqs = []
    for p in paths:
        if not Path(p).exists():
            raise FileNotFoundError(f"data file not found: {p}")
        seqs.append(data.load_csv(p))
    return seqs


def cmd_train(args) -> int:
    config = build_config(args)
    seqs = _load_sequences(args.train)
    transform = data.DataTransform.fit(seqs, axis=args.center_axis)
    scaled = [transform.apply(s) for s in seqs]
    t0 = time.perf_counter()

    def progress(epoch, res):
        if args.log_every and (epoch % args.log_every == 0 or epoch == config.epochs - 1):
            log.info(
                "epoch %5d  loss %.4f  recon %.4f  kl_s %.4f  kl_z %.4f",
                epoch,
                res.loss.item(),
                res.recon,
                res.kl_discrete,
                res.kl_continuous,
            )

    result = ssm.train(config, scaled, progress=progress)
    ssm.save_model(args.checkpoint, result.model, transform, result.variational)
    if args.trace:
        smooth = result.smoothed_trace
        with open(args.trace, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "loss", "smoothed"])
            for i, (v, s) in enumerate(zip(result.trace, smooth)):
                w.writerow([i, repr(v), repr(float(s))])
    final = f"{result.trace[-1]:.4f}" if result.trace else "n/a"
    print(
        f"trained {config.variant} model ({result.model.n_free()} free parameters) "
        f"for {config.epochs} epochs in {time.perf_counter() - t0:.1f}s; final loss {final}; "
        f"wrote {args.checkpoint}"
    )
    return 0


# -- predict ----------------------------------------------------------------------


def _load_checkpoint(path: str, config_path: str | None = None):
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    config = ssm.ModelConfig.load(config_path) if config_path else None
    return ssm.load_model(path, config)


def cmd_predict(args) -> int:
    model, transform = _load_checkpoint(args.checkpoint, args.config)
    (seq,) = _load_sequences([args.test])
    if args.drop:
        seq = data.random_mask(seq, args.drop, np.random.default_rng(args.seed))
    (pred,) = evaluation.predict(model, transform, [seq], args.steps)
    evaluation.save_predictions(pred, args.out)
    msg = f"wrote {args.out} ({seq.T} steps)"
    if seq.mask[pred.warmup :].any():
        msg += f"; NRMSE {pred.score():.3f}%"
    print(msg)
    return 0


# -- evaluate -----------------------------------------------------------------------


def cmd_evaluate(args) -> int:
    model, transform = _load_checkpoint(args.checkpoint, args.config)
    tests = _load_sequences(args.test)
    rotated = evaluation.rotated_sets_for(tests, args.rotate, args.seed)
    report = evaluation.evaluate(model, transform, tests, rotated, args.steps)
    if args.out:
        evaluation.write_results_csv(report.rows, args.out)
    if args.predictions_dir:
        out = Path(args.predictions_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, preds in report.predictions.items():
            labels = ["none"] + [evaluation.format_angle(a) for a, _ in rotated[[t.name for t in tests].index(name)]]
            for label, p in zip(labels, preds):
                suffix = "" if label == "none" else f"_rot{label}"
                evaluation.save_predictions(p, out / f"{name}{suffix}_pred.csv")
    if args.json:
        print(evaluation.results_json(report.rows))
    else:
        print(evaluation.format_table(report.rows))
    return 0


# -- plot -------------------------------------------------------------------------


def cmd_plot(args) -> int:
    from . import plotting

    formats = tuple(f.strip().lower() for f in args.format.split(",") if f.strip())
    bad = [f for f in formats if f not in plotting.FORMATS]
    if bad or not formats:
        raise UsageError(f"--format must list some of {plotting.FORMATS}, got {args.format!r}")
    for path in args.predictions:
        if not Path(path).exists():
            raise FileNotFoundError(f"prediction file not found: {path}")
        pred = evaluation.load_predictions(path)
        stem = Path(path).stem
        written = evaluation.emit_plot_data(pred, args.out_dir, stem)
        written += plotting.plot_prediction(pred, args.out_dir, stem, formats)
        for p in written:
            print(f"wrote {p}")
    return 0


# -- parser -------------------------------------------------------------------------


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eqddm",
        description="SO(3)-equivariant switching state-space model: bases, simulation, training, evaluation.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("basis", help="solve an equivariant linear-map basis")
    p.add_argument("--group", choices=sorted(GROUPS), default="so3")
    p.add_argument("--in-sig", type=_signature, required=True, help='input signature, e.g. "1x0,2x1"')
    p.add_argument("--out-sig", type=_signature, required=True, help="output signature")
    p.add_argument("--out", help="write the full report here instead of stdout")
    p.set_defaults(func=cmd_basis)

    d = data.PendulumSpec()
    p = sub.add_parser("simulate", help="simulate a planar pendulum to CSV")
    p.add_argument("--T", type=int, default=d.T)
    p.add_argument("--dt", type=_positive_float, default=d.dt)
    p.add_argument("--gravity", type=float, default=d.gravity)
    p.add_argument("--length", type=_positive_float, default=d.length)
    p.add_argument("--theta0", type=float, default=d.theta0)
    p.add_argument("--omega0", type=float, default=d.omega0)
    p.add_argument("--plane", default=d.plane, help="two axes spanning the swing plane (default yz)")
    p.add_argument("--noise", type=float, default=d.noise, help="observation noise std")
    p.add_argument("--substeps", type=int, default=d.substeps, help="RK4 substeps per sample")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", choices=["none", "half"], default="none", help="also write _train/_test halves")
    p.add_argument("--max-lag", type=int, default=2, help="largest model lag (split length check)")
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="fit the model to training CSVs")
    p.add_argument("--train", nargs="+", required=True, help="training CSV file(s)")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--epochs", type=_nonneg_int)
    p.add_argument("--lr", type=_positive_float)
    p.add_argument("--seed", type=int)
    p.add_argument("--variant", choices=ssm.VARIANTS)
    p.add_argument("--center-axis", choices=list(data.AXES), default="z", help="axis the data center is kept on")
    p.add_argument("--checkpoint", required=True, help="output checkpoint path")
    p.add_argument("--trace", help="write the loss trace CSV here")
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="rolling prediction on one test CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="override the stored config (shapes must match)")
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True, help="prediction CSV path")
    p.add_argument("--steps", type=_nonneg_int, help="Newton iterations per step")
    p.add_argument("--drop", type=_fraction, default=0.0, help="hide this fraction of entries at random")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="NRMSE on test CSVs and their z-rotated copies")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="override the stored config (shapes must match)")
    p.add_argument("--test", nargs="+", required=True)
    p.add_argument("--rotate", type=_nonneg_int, default=10, help="rotated copies per test sequence")
    p.add_argument("--seed", type=int, default=0, help="seed for the rotation angles")
    p.add_argument("--steps", type=_nonneg_int)
    p.add_argument("--out", help="results CSV path")
    p.add_argument("--predictions-dir", help="write every prediction CSV here")
    p.add_argument("--json", action="store_true", help="print JSON instead of a table")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot", help="plot series and figures from prediction CSVs")
    p.add_argument("predictions", nargs="+", help="prediction CSV file(s)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--format", default="svg", help="comma-separated: svg, png, pdf")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except UsageError as e:
        parser.error(str(e))
    except (
        FileNotFoundError,
        ssm.ConfigError,
        data.CSVFormatError,
        NonFiniteError,
        ValueError,
        KeyError,
    ) as e:
        print(f"eqddm {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
