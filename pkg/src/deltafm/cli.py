"""Command-line entry point: ``deltafm train|sample|eval|sweep|oracle-check|plot``.

Exit codes: 0 success, 2 config/usage error, 3 runtime or numeric failure
(including corrupt checkpoints and a failed oracle check), 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from deltafm import config as config_mod
from deltafm import data as data_mod
from deltafm import experiments, oracle, plots, sampler
from deltafm import model as model_mod
from deltafm.objective import MeanTrajectory, mean_trajectory_of, optimal_velocity_shift

log = logging.getLogger("deltafm")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_IO = 0, 2, 3, 4
LAMBDA_SWEEP = [0.0, 0.001, 0.01, 0.05, 0.1, 0.15]
NFE_SWEEP = [10, 25, 50, 100, 250]
BATCH_SWEEP = [256, 512, 1024]
LOSS_COLUMNS = ["iteration", "fm_term", "contrastive_term", "total"]


class UsageError(Exception):
    pass


# -- helpers -------------------------------------------------------------------

def _load_config(args) -> config_mod.RunConfig:
    path = getattr(args, "config", None)
    cfg = config_mod.load(path) if path else config_mod.RunConfig()
    overrides = list(getattr(args, "set", None) or [])
    for flag, key in (("seed", "train.seed"), ("lam", "objective.lambda"), ("iterations", "train.iterations"),
                      ("batch_size", "train.batch_size")):
        val = getattr(args, flag, None)
        if val is not None:
            overrides.append(f"{key}={val}")
    if getattr(args, "output_dir", None):
        overrides.append(f'output_dir="{args.output_dir}"')
    return config_mod.with_overrides(cfg, overrides) if overrides else cfg


def write_loss_csv(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOSS_COLUMNS)
        w.writeheader()
        for r in history:
            w.writerow({k: (r[k] if k == "iteration" else repr(float(r[k]))) for k in LOSS_COLUMNS})


def read_loss_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != LOSS_COLUMNS:
            raise ValueError(f"{path}: expected columns {','.join(LOSS_COLUMNS)}")
        return [{"iteration": int(r["iteration"]), **{k: float(r[k]) for k in LOSS_COLUMNS[1:]}} for r in reader]


def _write_rows(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def _parse_class(text):
    if text.lower() in ("null", "none"):
        return None
    return int(text)


def _guidance_from_args(args, cfg, cloud):
    if args.guidance == "off":
        return sampler.OFF
    lam = args.lam if args.lam is not None else cfg.objective.lam
    t_hat = None
    if args.guidance in ("hat", "tilde"):
        if args.t_hat:
            t_hat = MeanTrajectory(np.array([float(v) for v in args.t_hat.split(",")]))
        elif cloud is not None:
            t_hat = mean_trajectory_of(cloud.points)
        else:
            raise UsageError(f"--guidance {args.guidance} needs --t-hat or --config to define the mean trajectory")
    return sampler.GuidanceConfig(True, args.w, args.sigma_low, args.sigma_high, lam, t_hat,
                                  experiments.GUIDANCE_MODES[args.guidance])


def _sampler_from_args(args, cfg):
    base = experiments.sampler_config(cfg)
    diffusion = args.diffusion if args.diffusion is not None else base.diffusion_scale
    if isinstance(diffusion, str) and diffusion not in ("sigma", "zero"):
        diffusion = float(diffusion)
    return sampler.SamplerConfig(args.sampler or base.kind, args.nfe if args.nfe is not None else base.nfe,
                                 diffusion, args.sample_seed if args.sample_seed is not None else base.seed)


def _out_dir(cfg, args):
    out = Path(getattr(args, "out_dir", None) or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- subcommands -----------------------------------------------------------------

def cmd_train(args):
    cfg = _load_config(args)
    out = _out_dir(cfg, args)
    model, history, _, _ = experiments.run_training(cfg)
    model_mod.save(model, out / "model.dfm")
    write_loss_csv(out / "loss.csv", history)
    config_mod.save(cfg, out / "config.toml")
    print(f"checkpoint {out / 'model.dfm'} sha256={experiments.digest(model)}")
    print(f"final fm_term={history[-1]['fm_term']:.6f} total={history[-1]['total']:.6f}" if history else "no iterations")
    return EXIT_OK


def cmd_sample(args):
    model = model_mod.load(args.checkpoint)
    cfg = _load_config(args)
    cloud = experiments.build_dataset(cfg)[0] if args.config else None
    scfg = _sampler_from_args(args, cfg)
    guidance = _guidance_from_args(args, cfg, cloud)
    y = _parse_class(args.cls)
    label = model.null_class if y is None else y
    if label > model.null_class or label < 0:
        raise UsageError(f"class {label} out of range for a model with {model.num_classes} classes")
    xs = sampler.sample(model, args.n, y, scfg, guidance)
    data_mod.save_csv(args.out, xs, np.full(args.n, label))
    print(f"wrote {args.n} samples to {args.out}")
    if args.trajectories:
        eps = np.random.default_rng(scfg.seed).standard_normal((args.n, model.input_dim))
        classes = range(model.num_classes) if args.all_classes else [label]
        runs = [(c, sampler.trajectory(model, eps, c, scfg, guidance, record_every=args.record_every))
                for c in classes]
        sampler.write_trajectories_csv(args.trajectories, runs)
        print(f"wrote trajectories to {args.trajectories}")
    return EXIT_OK


def cmd_eval(args):
    cfg = _load_config(args)
    cloud, spec = experiments.build_dataset(cfg)
    if args.oracle:
        if spec is None:
            raise UsageError("--oracle needs a synthetic dataset")
        model = data_mod.OracleModel(spec)
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint or --oracle")
        model = model_mod.load(args.checkpoint)
        if model.input_dim != cloud.dim:
            raise ValueError(f"checkpoint dimension {model.input_dim} does not match data dimension {cloud.dim}")
        if model.num_classes != cloud.num_classes:
            raise ValueError(f"checkpoint has {model.num_classes} classes, data has {cloud.num_classes}")
    report = experiments.evaluate_config(model, cfg, spec, cloud, nfe=args.nfe)
    out = _out_dir(cfg, args)
    (out / "metrics.txt").write_text(report.to_text())
    _write_rows(out / "metrics.csv", report.rows())
    sys.stdout.write(report.to_text())
    return EXIT_OK


def cmd_sweep(args):
    cfg = _load_config(args)
    defaults = {"lambda": LAMBDA_SWEEP, "nfe": NFE_SWEEP, "batch_size": BATCH_SWEEP}
    values = defaults[args.axis] if args.values is None else args.values
    if not values:
        raise UsageError("sweep needs at least one value")
    out = _out_dir(cfg, args)
    rows = []
    for seed in args.seeds:
        seeded = config_mod.with_overrides(cfg, [f"train.seed={seed}", f"model.seed={seed}"])
        if args.axis == "nfe":
            cloud, spec = experiments.build_dataset(seeded)
            if args.checkpoint:
                model, dig = model_mod.load(args.checkpoint), ""
            else:
                model, _, cloud, spec = experiments.run_training(seeded)
                dig = experiments.digest(model)
            for v in values:
                rep = experiments.evaluate_config(model, seeded, spec, cloud, nfe=int(v))
                rows.append(experiments.SweepRow("nfe", int(v), seed, rep, dig).as_dict())
                log.info("seed %d nfe %s: w2=%.4f", seed, v, rep.wasserstein2)
            continue
        for v in values:
            key = "objective.lambda" if args.axis == "lambda" else "train.batch_size"
            run = config_mod.with_overrides(seeded, [f"{key}={int(v) if args.axis == 'batch_size' else v}"])
            model, _, cloud, spec = experiments.run_training(run)
            rep = experiments.evaluate_config(model, run, spec, cloud)
            rows.append(experiments.SweepRow(args.axis, v, seed, rep, experiments.digest(model)).as_dict())
            log.info("seed %d %s=%s: w2=%.4f", seed, args.axis, v, rep.wasserstein2)
    _write_rows(out / "sweep.csv", rows)
    print(f"wrote {len(rows)} rows to {out / 'sweep.csv'}")
    return EXIT_OK


def _corrupted_shift(v_fm, t_hat, lam):
    return (np.asarray(v_fm) - lam * np.asarray(t_hat)) / (1.0 + lam)


def cmd_oracle_check(args):
    cfg = _load_config(args)
    if cfg.data.name != "two_gaussians":
        raise UsageError("oracle-check needs the builtin two_gaussians dataset")
    shift = _corrupted_shift if args.corrupt_shift else optimal_velocity_shift
    report = oracle.run(tuple(args.lambdas), args.probes, seed=cfg.data.seed, shift=shift,
                        separation=cfg.data.separation, scale=cfg.data.scale)
    for i, p in enumerate(report.probes):
        print(f"probe {i:3d} class={p.y} t={p.t:.3f} lambda={p.lam:g} rel_err={p.rel_error:.3e}")
    for name, (ok, err) in report.consistency.items():
        print(f"{name}: {'ok' if ok else 'FAIL'} max_err={err:.3e}")
    verdict = "PASS" if report.passed else "FAIL"
    print(f"{verdict} max_rel_error={report.max_rel_error:.3e} tolerance={report.tolerance}")
    return EXIT_OK if report.passed else EXIT_RUNTIME


def cmd_plot(args):
    kind = args.kind
    if kind == "loss_curves":
        svg = plots.loss_curves(read_loss_csv(args.inputs[0]))
    else:
        data = data_mod.load_csv(args.data) if args.data else None
        trajs = [sampler.read_trajectories_csv(p) for p in args.inputs]
        if kind == "flows":
            svg = plots.flows(trajs[0], data)
        elif kind == "panels":
            if len(trajs) != 2:
                raise UsageError("panels needs two trajectory dumps: FM first, contrastive second")
            svg = plots.panels(trajs[0], trajs[1], data)
        else:
            svg = plots.denoise_strip(trajs[0])
    Path(args.out).write_text(svg)
    print(f"wrote {args.out}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------

def _add_config_flags(p, required=False):
    p.add_argument("--config", required=required, help="run-config TOML file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. train.seed=3")
    p.add_argument("--output-dir", help=f"output directory (default: config or ${config_mod.OUTPUT_ENV})")


def build_parser():
    parser = argparse.ArgumentParser(prog="deltafm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a velocity field")
    _add_config_flags(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw samples from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    _add_config_flags(p)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--class", dest="cls", default="0", help="class index or 'null'")
    p.add_argument("--sampler", choices=sampler.SAMPLER_KINDS)
    p.add_argument("--nfe", type=int, default=50)
    p.add_argument("--diffusion", help="'sigma', 'zero' or a constant")
    p.add_argument("--sample-seed", type=int)
    p.add_argument("--guidance", choices=["off", "standard", "hat", "tilde"], default="off")
    p.add_argument("--w", type=float, default=1.0)
    p.add_argument("--sigma-low", type=float, default=0.0)
    p.add_argument("--sigma-high", type=float, default=1.0)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--t-hat", help="data mean as comma-separated values")
    p.add_argument("--out", default="samples.csv")
    p.add_argument("--trajectories", help="also write a trajectory dump to this CSV")
    p.add_argument("--all-classes", action="store_true", help="dump trajectories for every class")
    p.add_argument("--record-every", type=int, default=5)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="compute metrics for a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--oracle", action="store_true", help="evaluate the analytic optimal field instead")
    _add_config_flags(p)
    p.add_argument("--nfe", type=int)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train/evaluate across lambda, nfe or batch size")
    _add_config_flags(p)
    p.add_argument("--axis", choices=["lambda", "nfe", "batch_size"], required=True)
    p.add_argument("--values", type=float, nargs="*")
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--checkpoint", help="reuse this checkpoint for an nfe sweep")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("oracle-check", help="brute-force check of the contrastive closed form")
    _add_config_flags(p)
    p.add_argument("--lambdas", type=float, nargs="+", default=[0.05, 0.5])
    p.add_argument("--probes", type=int, default=50)
    p.add_argument("--corrupt-shift", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_oracle_check)

    p = sub.add_parser("plot", help="render an SVG figure")
    p.add_argument("--kind", choices=["flows", "panels", "denoise_strip", "loss_curves"], required=True)
    p.add_argument("inputs", nargs="+", help="trajectory dump(s) or loss.csv")
    p.add_argument("--data", help="data CSV for density shading")
    p.add_argument("--out", default="figure.svg")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (config_mod.ConfigError, UsageError) as exc:
        print(f"deltafm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except model_mod.CheckpointError as exc:
        print(f"deltafm: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        name = exc.filename or ""
        print(f"deltafm: error: {exc.strerror or exc}{': ' + str(name) if name else ''}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, FloatingPointError, ArithmeticError) as exc:
        print(f"deltafm: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
