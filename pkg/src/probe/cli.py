"""Command-line front end: ``probe <subcommand> --data --config --out``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
import torch

from probe.config import RunReport, TrainConfig
from probe.data import Dataset, ingest_csv
from probe.errors import DataError

EXIT_OK, EXIT_FAILED_CHECK, EXIT_VALIDATION, EXIT_NUMERIC = 0, 1, 2, 3
GRID_POINTS = 401


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


# -- output helpers ----------------------------------------------------------------

def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(v if isinstance(v, str) else repr(float(v)) for v in row) + "\n")


def _finish(out: Path, model_dict: dict, report: RunReport) -> int:
    from probe.plotting import loss_plot
    _write_json(out / "model.json", model_dict)
    (out / "metrics.jsonl").write_text("".join(line + "\n" for line in report.metrics_lines()),
                                       encoding="utf-8")
    _write_json(out / "report.json", report.to_dict())
    if report.losses:
        loss_plot(out / "loss.svg", report.losses)
    return EXIT_OK if all(c["pass"] for c in report.checks) else EXIT_FAILED_CHECK


def _reference(path) -> tuple[np.ndarray, np.ndarray] | None:
    """Two-column reference density CSV: grid value, density."""
    if path is None:
        return None
    ref = ingest_csv(path)
    arr = ref.numeric()
    if arr.shape[1] < 2:
        raise DataError(f"{path}: reference needs two numeric columns (x, density)")
    order = np.argsort(arr[:, 0])
    return arr[order, 0], arr[order, 1]


def _density_series(x, phi, ref, label="estimate"):
    series = [(x, phi, label)]
    if ref is not None:
        series.append((ref[0], ref[1], "reference"))
    return series


def _compare_to_reference(report: RunReport, ref, density_fn) -> None:
    from probe.verify.oracles import compare_densities
    if ref is None:
        return
    est = np.maximum(density_fn(ref[0]), 0.0)
    cmp = compare_densities(np.maximum(ref[1], 0.0), est, ref[0])
    report.extra["reference"] = cmp.metrics()


# -- subcommands ------------------------------------------------------------------

def _fit1d(data: Dataset, config: TrainConfig, out: Path, ref) -> int:
    from probe import flow1d
    from probe.plotting import line_plot
    cols = config.data.get("inputs")
    net, report = flow1d.train_1d(data.select(cols) if cols else data, config)
    lo, hi = net.mean - 6 * net.std, net.mean + 6 * net.std
    est = flow1d.density_grid(net, lo, hi, GRID_POINTS)
    est.to_csv(out / "density.csv")
    _compare_to_reference(report, ref, lambda x: flow1d.density(net, x))
    line_plot(out / "density.svg", _density_series(est.grid, est.phi, ref), "density", "x", "phi")
    return _finish(out, net.to_dict(), report)


def _fitnd(data: Dataset, config: TrainConfig, out: Path, ref) -> int:
    from probe import flownd
    from probe.plotting import line_plot
    cols = config.data.get("inputs") or data.numeric_names()
    mode = config.model.get("mode", flownd.GLOBAL)
    net, report = flownd.train_nd(data, config, mode=mode, columns=cols)
    x = data.numeric(cols)
    if net.n == 2:
        axes = [np.linspace(m - 5 * s, m + 5 * s, 121) for m, s in zip(x.mean(0), x.std(0))]
        g0, g1 = np.meshgrid(*axes, indexing="ij")
        pts = np.column_stack([g0.ravel(), g1.ravel()])
        phi = np.exp(flownd.log_density(net, pts))
        _write_csv(out / "density.csv", [*cols, "phi"],
                   (np.column_stack([pts, phi])).tolist())
        marginal = np.trapezoid(phi.reshape(g0.shape), axes[1], axis=1)
        line_plot(out / "density.svg", _density_series(axes[0], marginal, ref, "marginal"),
                  f"marginal of {cols[0]}", cols[0], "phi")
    else:
        phi = np.exp(flownd.log_density(net, x))
        _write_csv(out / "density.csv", [*cols, "phi"], np.column_stack([x, phi]).tolist())
        order = np.argsort(x[:, 0])
        line_plot(out / "density.svg", [(x[order, 0], phi[order], "phi at samples")],
                  "density at data points", cols[0], "phi")
    return _finish(out, net.to_dict(), report)


def _fit_conditional(data: Dataset, config: TrainConfig, out: Path, ref) -> int:
    from probe import flownd
    from probe.plotting import line_plot
    inputs, targets = config.data.get("inputs"), config.data.get("targets")
    if not inputs or not targets:
        names = data.numeric_names()
        inputs, targets = inputs or names[:1], targets or names[1:2]
    cnet, report = flownd.train_conditional(data, config, inputs, targets)
    x, t = data.numeric(inputs), data.numeric(targets)
    rows, series = [], []
    if t.shape[1] == 1 and x.shape[1] == 1:
        grid = np.linspace(t.min() - t.std(), t.max() + t.std(), GRID_POINTS)
        for q in (0.1, 0.5, 0.9):
            xv = float(np.quantile(x[:, 0], q))
            phi = flownd.conditional_density_on_grid(cnet, [xv], grid)
            rows.extend([xv, tv, p] for tv, p in zip(grid, phi))
            series.append((grid, phi, f"{inputs[0]}={xv:.3g}"))
        _write_csv(out / "density.csv", [inputs[0], targets[0], "phi"], rows)
        line_plot(out / "density.svg", series, "conditional density", targets[0], "phi")
    else:
        phi = np.exp(flownd.conditional_log_density(cnet, x, t))
        _write_csv(out / "density.csv", [*inputs, *targets, "phi"],
                   np.column_stack([x, t, phi]).tolist())
    return _finish(out, cnet.to_dict(), report)


def _classify(data: Dataset, config: TrainConfig, out: Path, ref) -> int:
    from probe import heads
    label = config.data.get("label") or next(
        (n for n in data.names if data.kinds[n] == "categorical"), data.names[-1])
    clf, report = heads.train_classifier(data, config, label=label)
    features = list(config.data.get("inputs") or [c for c in data.names if c != label])
    probs = clf.probabilities(data.numeric(features))
    pred = [str(clf.classes[i]) for i in probs.argmax(1)]
    rows = [[str(y), p, *pr] for y, p, pr in zip(data.column(label), pred, probs)]
    _write_csv(out / "predictions.csv",
               ["label", "predicted", *[f"p_{c}" for c in clf.classes]], rows)
    return _finish(out, clf.to_dict(), report)


def _regress(data: Dataset, config: TrainConfig, out: Path, ref) -> int:
    from probe import heads
    from probe.plotting import line_plot
    names = data.numeric_names()
    inputs = config.data.get("inputs") or names[:-1]
    targets = config.data.get("targets") or names[-1:]
    mode = config.model.get("mode", heads.FULL)
    head, report = heads.train_regression(data, config, inputs, targets, mode=mode)
    x = data.numeric(inputs)
    mu, _ = head.predict(x)
    sd = head.sigma(x)
    _write_csv(out / "predictions.csv",
               [*inputs, *[f"mu_{t}" for t in targets], *[f"sigma_{t}" for t in targets]],
               np.column_stack([x, mu, sd]).tolist())
    order = np.argsort(x[:, 0])
    xs = x[order, 0]
    line_plot(out / "density.svg",
              [(xs, mu[order, 0], "mean"), (xs, mu[order, 0] + sd[order, 0], "mean + sigma"),
               (xs, mu[order, 0] - sd[order, 0], "mean - sigma")],
              f"predicted {targets[0]}", inputs[0], targets[0])
    return _finish(out, head.to_dict(), report)


def _estimate_params(data: Dataset, config: TrainConfig, out: Path, ref) -> int:
    from probe import heads
    from probe.plotting import line_plot
    from probe.verify.oracles import closed_form_mle_gaussian
    cols = config.data.get("inputs")
    d = data.select(cols) if cols else data
    family = heads.ParametricFamily(config.model.get("family", "gaussian1d"))
    report = RunReport("estimate-params", config.to_dict())
    theta = heads.estimate_params(d, family, config, report)
    x = d.numeric()[:, 0]
    mean, var = closed_form_mle_gaussian(x)
    report.extra["closed_form"] = {"mean": mean, "variance": var}
    report.extra["estimate"] = {"mean": float(theta[0]), "variance": float(np.exp(2 * theta[1]))}
    scale = family.scale(theta)
    grid = np.linspace(theta[0] - 5 * scale, theta[0] + 5 * scale, GRID_POINTS) \
        if scale > 0 else np.array([theta[0] - 1, theta[0], theta[0] + 1])
    phi = np.exp(family.log_density(grid, theta))
    _write_csv(out / "density.csv", ["x", "phi"], np.column_stack([grid, phi]).tolist())
    _compare_to_reference(report, ref, lambda g: np.exp(family.log_density(g, theta)))
    line_plot(out / "density.svg", _density_series(grid, phi, ref), "fitted density", "x", "phi")
    model = {"family": family.tag, "theta": theta.tolist(),
             "mean": float(theta[0]), "variance": float(np.exp(2 * theta[1]))}
    return _finish(out, model, report)


def _evolve(data: Dataset, config: TrainConfig, out: Path, ref) -> int:
    from probe import timeevo
    from probe.plotting import line_plot
    mode = config.model.get("mode", timeevo.GLOBAL)
    cols = config.data.get("inputs")
    model, report = timeevo.train_time_model(data.select(cols) if cols else data, config, mode)
    x = (data.numeric(cols) if cols else data.numeric())
    xs = model.scale_data(x[:1])
    traj = timeevo.evolve_nonlinear(model, timeevo.InputAssignment.draw(
        xs, model.n, np.random.default_rng(config.seed)).a0)
    traj.to_csv(out / "trajectory.csv")
    if model.m == 1:
        grid = np.linspace(x[:, 0].min(), x[:, 0].max(), 201)
        phi = timeevo.recover_input_density(model, model.scale_data(grid[:, None])) \
            * model.data_jacobian()
        _write_csv(out / "density.csv", ["x", "phi"], np.column_stack([grid, phi]).tolist())
        line_plot(out / "density.svg", _density_series(grid, phi, ref), "recovered density",
                  "x", "phi")
    else:
        nodes = [(traj.times, traj.states[0, :, i], f"node {i}") for i in range(model.n)]
        line_plot(out / "density.svg", nodes, "trajectory", "t", "a")
    return _finish(out, model.to_dict(), report)


COMMANDS = {"fit1d": _fit1d, "fitnd": _fitnd, "fit-conditional": _fit_conditional,
            "classify": _classify, "regress": _regress, "estimate-params": _estimate_params,
            "evolve": _evolve}


def _verify(args) -> int:
    from probe.verify import run_suites
    results = [r.to_dict() for r in run_suites(args.suite, args.seed or 0)]
    args.out.mkdir(parents=True, exist_ok=True)
    _write_json(args.out / "verification.json", results)
    for r in results:
        print(f"{'PASS' if r['pass'] else 'FAIL'} {r['check']} {r['metric']}={r['value']:.3g}")
    return EXIT_OK if all(r["pass"] for r in results) else EXIT_FAILED_CHECK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="probe", description="Density estimation under normalization constraints.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--data", required=True, type=Path, help="input CSV with header")
        p.add_argument("--config", required=True, type=Path, help="JSON training config")
        p.add_argument("--out", required=True, type=Path, help="output directory")
        p.add_argument("--seed", type=int, help="overrides config seed")
        p.add_argument("--ref", type=Path, help="reference density CSV (x, density)")
    v = sub.add_parser("verify")
    v.add_argument("--suite", default="all")
    v.add_argument("--out", required=True, type=Path)
    v.add_argument("--seed", type=int)
    v.add_argument("--data", type=Path, help="unused; accepted for a uniform grammar")
    v.add_argument("--config", type=Path, help="unused; accepted for a uniform grammar")
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_num_threads(1)
    if args.command == "verify":
        return _verify(args)
    config = TrainConfig.from_json(args.config)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    data = ingest_csv(args.data, config.data.get("schema"))
    if len(data) == 0:
        raise DataError(f"{args.data}: no data rows")
    args.out.mkdir(parents=True, exist_ok=True)
    return COMMANDS[args.command](data, config, args.out, _reference(args.ref))


def main(argv=None) -> int:
    try:
        code = run(argv)
    except ValueError as exc:
        print(f"probe: error: {exc}", file=sys.stderr)
        code = EXIT_VALIDATION
    except ArithmeticError as exc:
        print(f"probe: numeric failure: {exc}", file=sys.stderr)
        code = EXIT_NUMERIC
    return code


if __name__ == "__main__":
    sys.exit(main())
