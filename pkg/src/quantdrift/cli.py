"""Command-line front end.

    quantdrift generate --config run.json
    quantdrift recover  --config run.json [--data d.csv --meta d.json]
    quantdrift predict  --config run.json
    quantdrift sweep    --config run.json
    quantdrift audit    --config run.json --samples s.csv --meta s.json
    quantdrift mitigate --config run.json [--method reweight --model-marginal m.csv]
    quantdrift lyapunov --family tent --r 2 --x0 0.3

Outputs go to ``--out``, else the config's ``output_dir``, else
``$QUANTDRIFT_OUTPUT``, else the working directory. Exit status is 0 on
success, 2 on invalid input and 1 on runtime failure.
"""
import argparse
import csv
import datetime
from fractions import Fraction
import json
import os
import sys

import numpy as np

from . import __version__
from .config import OUTPUT_ENV, load_config
from .devkernel import KernelConfig
from .errors import ConfigError, DomainError, IncompatibleBinsError, IngestError
from .io import (
    fmt,
    ingest_trajectories,
    read_marginal,
    read_quantities,
    write_dataset,
    write_json,
    write_marginal,
    write_plot_data,
    write_quantities,
    write_weights,
)
from .mitigation import (
    compute_reweight,
    decoder_matrix,
    init_pairing,
    inverse_prior,
    latin_hypercube,
    mean_tv_to_prior,
    swap_optimize,
)
from .prediction import drift_report, prepare, sigma_sweep, tv_distance
from .recovery import (
    BinnedMarginal,
    binned_posteriors,
    build_reference_grid,
    histogram_marginal,
    point_estimates,
    recover_pendulum_energy,
)
from .systems import (
    FamilyConfig,
    QuantityPrior,
    curate_pendulum_dataset,
    lyapunov_closed_form,
    lyapunov_finite,
    sample_dataset,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError("", message)


def _out_dir(args, run=None):
    d = args.out or (run.output_dir if run is not None else None) or os.environ.get(OUTPUT_ENV, ".")
    os.makedirs(d, exist_ok=True)
    return d


def _dataset(run):
    if run.family.kind == "pendulum":
        return curate_pendulum_dataset(run.family, run.prior, run.counts.dataset_size, run.seed)
    return sample_dataset(run.family, run.prior, run.counts.dataset_size, run.seed)


def _load_dataset(run, args):
    if getattr(args, "data", None):
        if not args.meta:
            raise ConfigError("--meta", "required with --data")
        ds = ingest_trajectories(args.data, args.meta, family=run.family, prior=run.prior)
        quant = os.path.splitext(args.data)[0] + "_quantities.csv"
        if os.path.exists(quant):
            from dataclasses import replace

            ds = replace(ds, quantities=read_quantities(quant))
        return ds
    return _dataset(run)


def _recover(run, dataset, grid=None):
    """Per-trajectory point recoveries and binned rows for any family."""
    prior = run.prior
    if run.family.kind == "pendulum":
        energy = recover_pendulum_energy(dataset.values, run.family)
        rows = np.zeros((energy.size, prior.bins))
        rows[np.arange(energy.size), prior.bin_of(energy)] = 1.0
        return {"energy": energy}, rows, histogram_marginal(energy, prior)
    grid = grid or build_reference_grid(run.family, prior, run.counts.grid_resolution,
                                        normalization=dataset.normalization)
    xn = grid.normalization.normalize(dataset.values)
    rows = binned_posteriors(grid, xn, prior, rule=run.recovery_rule)
    mode, mean = point_estimates(grid, xn, prior)
    point = {"mode": mode, "mean": mean}
    mass = rows.mean(axis=0)
    return point, rows, BinnedMarginal(prior.edges, mass / mass.sum())


def _write_report(path, report):
    with open(path, "w") as f:
        f.write(report.to_json())


def _run_info(path, command, run=None):
    doc = {"command": command, "version": __version__,
           "created": datetime.datetime.now(datetime.timezone.utc).isoformat()}
    if run is not None:
        doc["seeds"] = list(run.seeds)
    write_json(path, doc)


def cmd_generate(args):
    run = load_config(args.config)
    out = _out_dir(args, run)
    paths = write_dataset(out, _dataset(run))
    for p in paths.values():
        print(p)


def cmd_recover(args):
    run = load_config(args.config)
    out = _out_dir(args, run)
    ds = _load_dataset(run, args)
    point, rows, marginal = _recover(run, ds)
    path = os.path.join(out, "recoveries.csv")
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        keys = list(point)
        w.writerow(["traj_id"] + keys + [f"p{b}" for b in range(rows.shape[1])])
        for i in range(rows.shape[0]):
            vals = [fmt(point[k][i]) for k in keys]
            w.writerow([i] + vals + [fmt(v) for v in rows[i]])
    write_marginal(os.path.join(out, "marginal.csv"), marginal)
    print(f"tv(data, prior) = {tv_distance(marginal, BinnedMarginal.from_prior(run.prior)):.6f}")


def cmd_predict(args):
    run = load_config(args.config)
    out = _out_dir(args, run)
    report = drift_report(run.family, run.prior, run.kernel, run.recovery_rule,
                          run.counts.dataset_size, run.counts.samples_per_row,
                          run.counts.grid_resolution, run.seed, run.n_jobs,
                          config_doc=run.to_dict())
    _write_report(os.path.join(out, "drift_report.json"), report)
    write_plot_data(os.path.join(out, "plot_data.csv"),
                    {"prior": report.prior, "data": report.data_marginal,
                     "predicted": report.predicted_marginal})
    _run_info(os.path.join(out, "run_info.json"), "predict", run)
    print(f"tv_data_prior = {report.tv_data_prior:.6f}")
    print(f"tv_pred_prior = {report.tv_pred_prior:.6f}")
    print(f"tv_pred_data  = {report.tv_pred_data:.6f}")


def cmd_sweep(args):
    run = load_config(args.config)
    out = _out_dir(args, run)
    reports = sigma_sweep(run.family, run.prior, run.kernel, run.sweep, run.recovery_rule,
                          run.counts.dataset_size, run.counts.samples_per_row,
                          run.counts.grid_resolution, run.seed, run.n_jobs,
                          config_doc=run.to_dict())
    with open(os.path.join(out, "sweep_summary.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["sigma", "tv_data_prior", "tv_pred_prior", "tv_pred_data"])
        for r in reports:
            _write_report(os.path.join(out, f"drift_report_sigma_{fmt(r.sigma)}.json"), r)
            w.writerow([fmt(r.sigma), fmt(r.tv_data_prior), fmt(r.tv_pred_prior), fmt(r.tv_pred_data)])
    _run_info(os.path.join(out, "run_info.json"), "sweep", run)
    print(f"{'sigma':>8} {'TV(data,prior)':>15} {'TV(pred,prior)':>15} {'TV(pred,data)':>14}")
    for r in reports:
        print(f"{r.sigma:>8.4f} {r.tv_data_prior:>15.4f} {r.tv_pred_prior:>15.4f} {r.tv_pred_data:>14.4f}")


def cmd_audit(args):
    run = load_config(args.config)
    out = _out_dir(args, run)
    samples = ingest_trajectories(args.samples, args.meta, family=run.family, prior=run.prior)
    data = _load_dataset(run, args)
    if run.family.kind != "pendulum":
        samples = _with_normalization(samples, data.normalization)
    grid = None
    if run.family.kind != "pendulum":
        grid = build_reference_grid(run.family, run.prior, run.counts.grid_resolution,
                                    normalization=data.normalization)
    _, _, model = _recover(run, samples, grid)
    _, _, data_m = _recover(run, data, grid)
    prior_m = BinnedMarginal.from_prior(run.prior)
    doc = {
        "samples": len(samples),
        "bin_edges": [float(e) for e in run.prior.edges],
        "model_marginal": [float(m) for m in model.mass],
        "data_marginal": [float(m) for m in data_m.mass],
        "tv_model_prior": tv_distance(model, prior_m),
        "tv_model_data": tv_distance(model, data_m),
        "tv_data_prior": tv_distance(data_m, prior_m),
    }
    write_json(os.path.join(out, "audit.json"), doc)
    write_marginal(os.path.join(out, "model_marginal.csv"), model)
    print(f"tv(model, prior) = {doc['tv_model_prior']:.6f}")
    print(f"tv(model, data)  = {doc['tv_model_data']:.6f}")


def _with_normalization(ds, norm):
    from dataclasses import replace

    return replace(ds, normalization=norm)


def cmd_mitigate(args):
    run = load_config(args.config)
    out = _out_dir(args, run)
    method = args.method or run.mitigation.method
    mc = run.mitigation
    if method == "reweight":
        if not args.model_marginal:
            raise ConfigError("--model-marginal", "reweighting needs the model's marginal CSV")
        model = read_marginal(args.model_marginal)
        ds = _load_dataset(run, args)
        if ds.quantities is None:
            raise ConfigError("--data", "reweighting needs per-trajectory quantities")
        plan = compute_reweight(ds.quantities, run.prior, model, mc.weight_floor)
        write_weights(os.path.join(out, "weights.csv"), plan)
        write_marginal(os.path.join(out, "inverse_prior.csv"), inverse_prior(model, mc.floor_fraction))
        print(f"wrote {len(plan.weights)} weights ({plan.out_of_range} recoveries clamped)")
        return
    if run.family.kind == "pendulum":
        raise DomainError("the coordinate-transform pairing uses grid posteriors; "
                          "use a synthetic family")
    from dataclasses import replace

    small = replace(run, counts=replace(run.counts, dataset_size=mc.support_size))
    ds = _load_dataset(small, args)
    _, nu, _ = _recover(small, ds)
    N = nu.shape[0]
    support = latin_hypercube(N, ds.horizon * ds.dim, run.seed)
    sigma = run.kernel.sigma if mc.code_sigma is None else mc.code_sigma
    M = decoder_matrix(support, replace(run.kernel, sigma=sigma), mc.k_dec,
                       mc.perturbations_per_code, run.seed)
    start = init_pairing(nu, run.prior, support, run.seed)
    best = swap_optimize(M, nu, run.prior, start, mc.max_iters, run.seed)
    doc = best.to_dict()
    doc["k_dec"] = M.k_dec
    doc["tau"] = M.tau
    doc["mean_tv_initial"] = mean_tv_to_prior(M, start, nu, run.prior)
    doc["mean_tv_final"] = mean_tv_to_prior(M, best, nu, run.prior)
    write_json(os.path.join(out, "pairing.json"), doc)
    np.savetxt(os.path.join(out, "codes.csv"), support.codes, delimiter=",", fmt="%r")
    print(f"objective {best.trace[0]:.6g} -> {best.objective:.6g}; "
          f"mean TV {doc['mean_tv_initial']:.4f} -> {doc['mean_tv_final']:.4f}")


def cmd_lyapunov(args):
    fam = FamilyConfig(args.family, horizon=args.horizon)
    # decimal inputs are read exactly so tent orbits are iterated without rounding
    r = Fraction(args.r)
    x0 = None if args.x0 is None else Fraction(args.x0)
    if x0 is None and fam.kind == "tent":
        x0 = Fraction(fam.x0)
    finite = lyapunov_finite(fam, r, x0, args.horizon)
    closed = lyapunov_closed_form(fam, float(r))
    print(f"lambda_H = {finite!r}")
    print(f"closed_form = {closed!r}" if closed is not None else "closed_form = none")


def _decimal(text):
    try:
        return str(Fraction(text))
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")


def build_parser():
    p = _Parser(prog="quantdrift", description="Predict, measure and mitigate quantity drift.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def with_config(name, func, help):
        s = sub.add_parser(name, help=help)
        s.add_argument("--config", required=True, help="JSON run configuration")
        s.add_argument("--out", help="output directory")
        s.set_defaults(func=func)
        return s

    with_config("generate", cmd_generate, "sample or curate a training dataset")
    s = with_config("recover", cmd_recover, "recover quantities and the data marginal")
    s.add_argument("--data", help="trajectory CSV (default: generate from config)")
    s.add_argument("--meta", help="metadata JSON for --data")
    with_config("predict", cmd_predict, "write a drift report for the configured sigma")
    with_config("sweep", cmd_sweep, "drift reports over the sigma sweep")
    s = with_config("audit", cmd_audit, "measure drift of externally generated samples")
    s.add_argument("--samples", required=True, help="sample trajectory CSV")
    s.add_argument("--meta", required=True, help="metadata JSON for the samples")
    s.add_argument("--data", help="training trajectory CSV (default: generate from config)")
    s = with_config("mitigate", cmd_mitigate, "reweighting plan or coordinate-transform pairing")
    s.add_argument("--method", choices=("reweight", "transform"))
    s.add_argument("--model-marginal", help="marginal CSV of the current model (reweight)")
    s.add_argument("--data", help="training trajectory CSV")
    s.add_argument("--meta", help="metadata JSON for --data")
    s = sub.add_parser("lyapunov", help="finite-horizon and closed-form Lyapunov exponents")
    s.add_argument("--family", required=True, choices=("sinusoid", "tent", "logistic"))
    s.add_argument("--r", required=True, type=_decimal)
    s.add_argument("--x0", type=_decimal, default=None)
    s.add_argument("--horizon", type=int, default=64)
    s.set_defaults(func=cmd_lyapunov)
    return p


def main(argv=None):
    """Run one command; returns the exit status."""
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except (ConfigError, IngestError, DomainError, IncompatibleBinsError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure of a library call
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


run_command = main


if __name__ == "__main__":
    sys.exit(main())
