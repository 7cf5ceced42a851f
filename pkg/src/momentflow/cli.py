"""``moment-flow`` command line interface."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import colora, filtered, formats, galerkin, harness, pde_ref, pretrain

log = logging.getLogger("momentflow")


def _config(args):
    if getattr(args, "config", None):
        cfg = harness.ExperimentConfig.load(args.config)
    else:
        make = (harness.paper_config if getattr(args, "paper_scale", False)
                else harness.desk_config)
        cfg = make(getattr(args, "pde", None) or "burgers")
    if getattr(args, "out", None) and args.command == "run":
        cfg.output_dir = args.out
    return harness.apply_output_override(cfg)


def _load_ckpt(path, pde=None):
    model, hyper, extra = colora.load_checkpoint(path)
    pde = pde or extra.get("pde")
    if pde is None:
        pde = "burgers" if model.input_dim == 1 else "vlasov"
    return model, hyper, pde


def _colloc(pde, spec):
    if pde == "burgers":
        return galerkin.CollocationSet.equidistant_1d(spec[0])
    if len(spec) == 1:
        spec = [spec[0], spec[0]]
    return galerkin.CollocationSet.equidistant_2d(spec[0], spec[1])


def _default_colloc(pde):
    return [128] if pde == "burgers" else [16, 16]


def _initial_belief(hyper, mu):
    if hyper is None:
        raise SystemExit("checkpoint has no hyper-network; cannot form the "
                         "initial belief")
    return colora.hyper_eval(hyper, 0.0, mu)


def cmd_gen_data(args):
    cfg = _config(args)
    out = Path(args.out or Path(cfg.output_dir) / "data")
    ds = pde_ref.generate_training_set(cfg.data_config(), workers=args.workers)
    ds.save(out)
    print(f"wrote {len(ds)} entries to {out}")


def cmd_pretrain(args):
    cfg = _config(args)
    ds = pde_ref.TrainingDataset.load(args.data)
    tc = cfg.train_config()
    if args.epochs is not None:
        tc.epochs = args.epochs

    def show(row):
        print(f"{row['epoch']:d} {row['loss']:.10g} {row['wall_time']:.3f}",
              flush=True)

    model, hyper, hist = pretrain.train(ds, tc, progress=show)
    colora.save_checkpoint(args.out, model, hyper,
                           {"pde": ds.pde, "train": tc.to_dict()})
    print(f"wrote checkpoint {args.out}")


def cmd_solve_ng(args):
    model, hyper, pde = _load_ckpt(args.ckpt, args.pde)
    colloc = _colloc(pde, args.collocation or _default_colloc(pde))
    theta0 = _initial_belief(hyper, args.mu).mean
    K = int(round(args.t_end / args.dt))
    traj = galerkin.ng_solve(model, theta0, args.mu, args.dt, K, colloc,
                             galerkin.get_pde(pde), args.lam)
    formats.write_blob(args.out, traj)
    print(f"wrote {K + 1} weight vectors to {args.out}")


def _write_fields(out, pde, model, states_or_run, times, dt, args, kind):
    pts = pde_ref.grid_points(pde, tuple(args.eval_grid or
                                         ([256] if pde == "burgers" else [64, 64])))
    for t in times:
        k = int(round(t / dt))
        if kind == "fng":
            s = filtered.summarize_belief(model, states_or_run[k].belief, pts,
                                          args.samples, args.seed, args.level)
            name = f"fields_t{harness.time_tag(t)}.txt"
        else:
            f = filtered.evaluate_fields(model, states_or_run.weights_at(k), pts)
            s = filtered.FieldSummary.from_samples(pts, f, args.level)
            name = f"fields_M{states_or_run.M}_t{harness.time_tag(t)}.txt"
        harness.write_summary(out / name, pde, s)


def _times(args):
    if args.times:
        times = args.times
    else:
        times = [args.t_end]
    for t in times:
        if not 0 <= t <= args.t_end + 1e-12:
            raise SystemExit(f"time {t} outside [0, {args.t_end}]")
    return times


def cmd_solve_fng(args):
    model, hyper, pde = _load_ckpt(args.ckpt, args.pde)
    colloc = _colloc(pde, args.collocation or _default_colloc(pde))
    K = int(round(args.t_end / args.dt))
    states = filtered.fng_solve(model, _initial_belief(hyper, args.mu), args.mu,
                                args.dt, K, args.integrator, colloc,
                                galerkin.get_pde(pde), args.lam)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    formats.write_blob(out / "moments.ngfd", filtered.moments_to_array(states))
    _write_fields(out, pde, model, states, _times(args), args.dt, args, "fng")
    print(f"wrote belief trajectory and field tables to {out}")


def cmd_ensemble(args):
    model, hyper, pde = _load_ckpt(args.ckpt, args.pde)
    colloc = _colloc(pde, args.collocation or _default_colloc(pde))
    K = int(round(args.t_end / args.dt))
    run = filtered.ensemble_solve(model, _initial_belief(hyper, args.mu),
                                  args.mu, args.dt, K, args.members, args.seed,
                                  colloc, galerkin.get_pde(pde), args.lam,
                                  workers=args.workers,
                                  integrator=args.integrator)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    formats.write_blob(out / f"members_M{run.M}.ngfd", run.members)
    _write_fields(out, pde, model, run, _times(args), args.dt, args, "ensemble")
    print(f"wrote {run.M} member trajectories to {out}")


def cmd_compare(args):
    fng = {t: harness.read_summary(Path(args.fng) / f"fields_t{harness.time_tag(t)}.txt")
           for t in args.times}
    ens = {t: harness.read_summary(
        Path(args.ensemble) / f"fields_M{args.members}_t{harness.time_tag(t)}.txt")
        for t in args.times}
    report = harness.compare(fng, ens, args.times)
    if args.out:
        formats.write_json(args.out, report.to_dict())
    for i, t in enumerate(report.times):
        print(f"t={t:g} mean_rel_l2={report.mean_rel_l2[i]:.4g} "
              f"width_rel_diff={report.width_rel_diff[i]:.4g} "
              f"overlap={report.overlap[i]:.4g} "
              f"var_corr={report.var_correlation[i]:.4g}")


def cmd_bench(args):
    cfg = _config(args)
    if args.workers:
        cfg.bench.workers = args.workers
    model, hyper, _ = _load_ckpt(args.ckpt, cfg.pde)
    table = harness.bench(cfg, model, hyper)
    if args.out:
        formats.write_json(args.out, table)
    print(f"fng median {table['fng']['median']:.4g} s")
    for M, v in table["ensemble"].items():
        print(f"ensemble M={M} median {v['median']:.4g} s "
              f"speedup {table['speedup'][M]:.3g}")


def cmd_export(args):
    files = harness.export_plot_data(args.run, args.times, args.out)
    for f in files:
        print(f)


def cmd_run(args):
    cfg = _config(args)
    stages = args.stages or harness.STAGES
    root = harness.run_pipeline(cfg, resume=not args.no_resume, stages=stages)
    print(f"artifacts in {root}")


def build_parser():
    p = argparse.ArgumentParser(prog="moment-flow",
                                description="Filtered Neural Galerkin pipeline")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def cfg_args(sp):
        sp.add_argument("--config", help="experiment configuration (JSON)")
        sp.add_argument("--pde", choices=["burgers", "vlasov"])
        sp.add_argument("--paper-scale", action="store_true",
                        help="use full-scale defaults instead of desk scale")

    def online_args(sp):
        sp.add_argument("--ckpt", required=True)
        sp.add_argument("--pde", choices=["burgers", "vlasov"])
        sp.add_argument("--mu", type=float, required=True)
        sp.add_argument("--t-end", type=float, required=True)
        sp.add_argument("--dt", type=float, required=True)
        sp.add_argument("--lam", type=float, default=None)
        sp.add_argument("--collocation", type=int, nargs="+")
        sp.add_argument("--out", required=True)

    def field_args(sp):
        sp.add_argument("--times", type=float, nargs="+")
        sp.add_argument("--eval-grid", type=int, nargs="+")
        sp.add_argument("--level", type=float, default=0.95)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--integrator", choices=filtered.INTEGRATORS,
                        default="rk4")

    sp = sub.add_parser("gen-data", help="solve reference trajectories")
    cfg_args(sp)
    sp.add_argument("--out")
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("pretrain", help="train CoLoRA and hyper-network")
    cfg_args(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--epochs", type=int)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("solve-ng", help="deterministic Neural Galerkin solve")
    online_args(sp)
    sp.set_defaults(func=cmd_solve_ng)

    sp = sub.add_parser("solve-fng", help="filtered mean/covariance solve")
    online_args(sp)
    field_args(sp)
    sp.add_argument("--samples", type=int, default=100)
    sp.set_defaults(func=cmd_solve_fng)

    sp = sub.add_parser("ensemble", help="ensemble of Neural Galerkin solves")
    online_args(sp)
    field_args(sp)
    sp.add_argument("--members", type=int, required=True)
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_ensemble)

    sp = sub.add_parser("compare", help="compare filtered and ensemble fields")
    sp.add_argument("--fng", required=True, help="solve-fng output directory")
    sp.add_argument("--ensemble", required=True, help="ensemble output directory")
    sp.add_argument("--members", type=int, required=True)
    sp.add_argument("--times", type=float, nargs="+", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("bench", help="runtime of filtered solve vs ensembles")
    cfg_args(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--workers", type=int)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("export", help="write plot tables from a run directory")
    sp.add_argument("--run", required=True)
    sp.add_argument("--times", type=float, nargs="+")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_export)

    sp = sub.add_parser("run", help="full pipeline (resumable)")
    cfg_args(sp)
    sp.add_argument("--out", help="artifact directory")
    sp.add_argument("--no-resume", action="store_true")
    sp.add_argument("--stages", nargs="+", choices=harness.STAGES)
    sp.set_defaults(func=cmd_run)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (harness.ConfigError, harness.StageError, formats.FormatError,
            FileNotFoundError, ValueError) as exc:
        print(f"moment-flow: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
