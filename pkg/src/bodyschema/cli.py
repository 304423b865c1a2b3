"""Command-line front end: ``bodyschema <command> [options]``.

Exit codes: 0 success, 1 computational failure (divergence, behind-camera,
sampling budget exhausted), 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import experiments as ex
from .baseline import (TrainHistory, checkpoint_json, dyn_dataset_to_csv, error_table_csv,
                       load_checkpoint)
from .camera import BehindCameraError
from .config import ExperimentConfig, load_experiment
from .keypoints import SamplingError, dataset_to_csv, load_dataset
from .kinematics import DimensionError
from .outputs import atomic_write, csv_text, header_lines, read_csv, update_sidecar
from .regression import RegressionConfig, regress, write_regression_report
from .scene import ConfigError

log = logging.getLogger("bodyschema")

TIMING_FILE = "placing_timing.csv"


class UsageError(Exception):
    pass


class Run:
    """Loaded configuration plus the output bookkeeping of one command."""

    def __init__(self, args):
        overrides = {}
        if args.seed is not None:
            overrides["master_seed"] = args.seed
        self.cfg: ExperimentConfig = load_experiment(args.config, overrides)
        self.out = Path(args.out) if args.out else self.cfg.output
        self.dry_run = args.dry_run
        self.written: list[str] = []
        self.volatile: set[str] = set()

    @property
    def header(self) -> list[str]:
        return header_lines(self.cfg.master_seed, self.cfg.config_hash())

    def meta(self) -> dict:
        return {"tool": f"bodyschema {__version__}", "master_seed": self.cfg.master_seed,
                "config_sha256": self.cfg.config_hash()}

    def write(self, name: str, text: str, volatile: bool = False) -> None:
        atomic_write(self.out / name, text)
        self.written.append(name)
        if volatile:
            self.volatile.add(name)
        log.info("wrote %s", self.out / name)

    def write_csv(self, name: str, columns, rows, volatile: bool = False) -> None:
        self.write(name, csv_text(columns, rows, self.header), volatile)

    def finish(self) -> int:
        if self.written:
            update_sidecar(self.out, self.written, self.cfg.master_seed, self.cfg.config_hash(),
                           self.volatile)
        return 0

    def plan(self, files) -> int:
        print(f"config ok ({self.cfg.config_hash()}); would write to {self.out}:")
        for f in files:
            print(f"  {f}")
        return 0


# -- gen-data -----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    run = Run(args)
    cfg = run.cfg
    presets = ["recovery", "sim", "hardware", "dynamics"] if args.preset == "all" else [args.preset]
    files = []
    for p in presets:
        if p == "recovery":
            files += [f"obs_{o}_s{s}{sfx}.csv" for o in cfg.objects for s in cfg.seeds
                      for sfx in ("", "_noisy")]
        elif p in ("sim", "hardware"):
            files += [f"{p}_s{s}.csv" for s in cfg.seeds]
        else:
            files += [f"dyn_{v}.csv" for v in ex.BASELINE_VARIANTS]
    if run.dry_run:
        return run.plan(files)
    for p in presets:
        if p == "recovery":
            for obj in cfg.objects:
                for seed in cfg.seeds:
                    for noisy in (False, True):
                        ds = ex.observation_dataset(cfg, obj, seed, 0, noisy, tag="recovery")
                        ds.metadata.update(run.meta())
                        run.write(f"obs_{obj}_s{seed}{'_noisy' if noisy else ''}.csv", dataset_to_csv(ds))
        elif p in ("sim", "hardware"):
            make = ex.sim_protocol_dataset if p == "sim" else ex.hardware_protocol_dataset
            for seed in cfg.seeds:
                ds = make(cfg, seed)
                ds.metadata.update(run.meta())
                run.write(f"{p}_s{seed}.csv", dataset_to_csv(ds))
        else:
            for v in ex.BASELINE_VARIANTS:
                data = ex.baseline_data(cfg, v)
                data.metadata.update({**run.meta(), "variant": v})
                run.write(f"dyn_{v}.csv", dyn_dataset_to_csv(data))
    return run.finish()


# -- regress ------------------------------------------------------------------

def cmd_regress(args) -> int:
    run = Run(args)
    cfg = run.cfg
    if args.dataset:
        path = Path(args.dataset)
        if not path.is_file():
            raise FileNotFoundError(f"dataset file not found: {path}")
        if run.dry_run:
            return run.plan(["regression.yaml", "loss_history.csv"])
        ds = load_dataset(path)
        obj = args.object or ds.metadata.get("object")
        truth = cfg.phi_true(obj, int(ds.metadata.get("grasp", 0))) if obj in cfg.objects else None
        rcfg = RegressionConfig(**{**cfg.regression.__dict__})
        res = regress(ds, cfg.camera, cfg.chain, rcfg)
        write_regression_report(res, run.out, truth, "\n".join(run.header + [f"dataset={path.name}"]))
        run.written += ["regression.yaml", "loss_history.csv"]
        print(f"converged={res.converged} steps={res.steps_taken} loss={res.final_loss:.6g}")
        return run.finish()

    if args.preset == "recovery":
        if run.dry_run:
            return run.plan(["recovery.csv", "recovery_curve.csv"])
        runs = ex.run_recovery(cfg, noisy=args.noisy)
        rows, curve = [], []
        for r in runs:
            rows.append([r.obj, r.seed, r.steps, r.final_mse, r.result.steps_taken, r.result.final_loss])
            losses = [r.result.initial_loss] + r.result.loss_history
            for i, (loss, mse) in enumerate(zip(losses, r.result.phi_mse(r.truth))):
                curve.append([r.obj, r.seed, i, loss, mse])
        run.write_csv("recovery.csv", ["object", "seed", "steps_to_target", "final_phi_mse_m2",
                                       "steps_taken", "final_loss"], rows)
        run.write_csv("recovery_curve.csv", ["object", "seed", "step", "loss", "phi_mse_m2"], curve)
        worst = max((r.steps for r in runs if r.steps is not None), default=None)
        print(f"{sum(r.steps is not None for r in runs)}/{len(runs)} runs reached "
              f"{ex.RECOVERY_TARGET:g} m^2; slowest after {worst} steps")
    else:
        if run.dry_run:
            return run.plan(["regrasp.csv"])
        rows = []
        for r in ex.run_regrasp(cfg, args.object):
            rows.append([r.obj, r.seed, r.grasp, r.warm_steps, r.cold_steps,
                         float(np.max(np.linalg.norm(r.warm.phi - r.truth, axis=1))),
                         float(np.max(np.linalg.norm(r.cold.phi - r.truth, axis=1)))])
        run.write_csv("regrasp.csv", ["object", "seed", "grasp", "warm_steps", "cold_steps",
                                      "warm_max_error_m", "cold_max_error_m"], rows)
    return run.finish()


# -- mpc ------------------------------------------------------------------------

def _load_fits(cfg: ExperimentConfig, models_dir) -> dict[str, ex.BaselineFit]:
    d = Path(models_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"model directory not found: {d}")
    fits = {}
    for v in ex.BASELINE_VARIANTS:
        path = d / f"mlp_{v}.json"
        if path.is_file():
            fits[v] = ex.BaselineFit(v, load_checkpoint(path), TrainHistory(),
                                     ex.baseline_detector(cfg, v, 0, noisy=False), float("nan"))
    if not fits:
        raise FileNotFoundError(f"no mlp_<variant>.json checkpoints in {d}")
    return fits


def cmd_mpc(args) -> int:
    run = Run(args)
    cfg = run.cfg
    if not cfg.tasks:
        raise ConfigError("the configuration defines no placing tasks")
    files = ["placing.csv", "placing_summary.csv", TIMING_FILE]
    if run.dry_run:
        if args.models:
            _load_fits(cfg, args.models)
        return run.plan(files)
    runs = ex.run_placing(cfg, args.phi)
    if args.models:
        for fit in _load_fits(cfg, args.models).values():
            runs += ex.run_placing_baseline(cfg, fit)
    rows = [[r.model_id, r.report.task_id, r.report.seed, r.report.grasp_id, r.report.rmse_px,
             r.report.predicted_rmse_px, r.report.steps] for r in runs]
    run.write_csv("placing.csv", ["model_id", "task_id", "seed", "grasp_id", "rmse_px",
                                  "predicted_rmse_px", "steps"], rows)
    summary = []
    for mid in dict.fromkeys(r.model_id for r in runs):
        for task in cfg.tasks:
            vals = [r.report.rmse_px for r in runs if r.model_id == mid and r.report.task_id == task.task_id]
            mean, std = ex.summarize(vals)
            summary.append([mid, task.task_id, len(vals), mean, std])
            print(f"{mid:>10} {task.task_id}: {mean:.3f} ({std:.3f}) px over {len(vals)} runs")
    run.write_csv("placing_summary.csv", ["model_id", "task_id", "n", "mean_rmse_px", "std_rmse_px"],
                  summary)
    run.write_csv(TIMING_FILE, ["model_id", "task_id", "seed", "grasp_id", "wall_time_s"],
                  [[r.model_id, r.report.task_id, r.report.seed, r.report.grasp_id, r.wall_time]
                   for r in runs], volatile=True)
    return run.finish()


# -- train-dyn --------------------------------------------------------------------

def cmd_train_dyn(args) -> int:
    run = Run(args)
    variants = args.variants.split(",") if args.variants else list(ex.BASELINE_VARIANTS)
    unknown = [v for v in variants if v not in ex.BASELINE_VARIANTS]
    if unknown:
        raise UsageError(f"unknown baseline variant(s) {unknown}; choose from {list(ex.BASELINE_VARIANTS)}")
    if args.epochs is not None and args.epochs < 1:
        raise UsageError("--epochs must be at least 1")
    files = [f for v in variants for f in (f"mlp_{v}.json", f"training_{v}.csv")] + ["baselines.csv"]
    if run.dry_run:
        return run.plan(files)
    fits = ex.train_baselines(run.cfg, variants, args.epochs)
    rows = []
    for v, fit in fits.items():
        dims, off = ex.BASELINE_VARIANTS[v]
        run.write(f"mlp_{v}.json", checkpoint_json(fit.model, {**run.meta(), "variant": v}))
        h = fit.history
        run.write_csv(f"training_{v}.csv", ["epoch", "train_nmse", "test_nmse"],
                      list(zip(h.epochs, h.train_nmse, h.test_nmse)))
        rows.append([v, dims, fit.detector.off_object_px, fit.test_nmse])
        print(f"baseline {v}: test NMSE {fit.test_nmse:.4f}")
    run.write_csv("baselines.csv", ["model_id", "dims", "off_object_px", "test_nmse"], rows)
    return run.finish()


# -- eval-horizon -------------------------------------------------------------------

def cmd_eval_horizon(args) -> int:
    run = Run(args)
    cfg = run.cfg
    fits = _load_fits(cfg, args.models)
    if run.dry_run:
        return run.plan(["horizon_task.csv", "horizon_random.csv"])
    seed = cfg.seeds[0]
    phi = ex.regressed_phi(cfg, seed, 0, noisy=True)
    placing = ex.run_placing(cfg, "noisy", grasps=[0])
    for name, (starts, seqs) in (("task", ex.task_sequences(placing, cfg)),
                                 ("random", ex.random_sequences(cfg))):
        rows = ex.run_horizon(cfg, fits, phi, starts, seqs)
        run.write(f"horizon_{name}.csv",
                  error_table_csv(rows, "\n".join(run.header + [f"sequences={name} n={len(seqs)}"])))
    return run.finish()


# -- report --------------------------------------------------------------------------

REPORT_INPUTS = ("placing_summary.csv", "recovery.csv", "regrasp.csv", "baselines.csv",
                 "horizon_task.csv", "horizon_random.csv")


def _cell(mean, std) -> str:
    return f"{float(mean):.2f} ({float(std):.2f})"


def cmd_report(args) -> int:
    src = Path(args.results or args.out or "results")
    if not src.is_dir():
        raise FileNotFoundError(f"results directory not found: {src}")
    present = [n for n in REPORT_INPUTS if (src / n).is_file()]
    if not present:
        raise UsageError(f"no result files in {src}; expected one of {', '.join(REPORT_INPUTS)}")
    out = Path(args.out) if args.out else src
    side = src / "metadata.json"
    meta = json.loads(side.read_text(encoding="utf-8")) if side.is_file() else {}
    header = header_lines(meta.get("master_seed", ""), meta.get("config_sha256", ""))
    md = [f"<!-- {line} -->" for line in header] + ["", "# Results summary", ""]
    long_rows = []

    if "placing_summary.csv" in present:
        _, rows = read_csv(src / "placing_summary.csv")
        tasks = list(dict.fromkeys(r["task_id"] for r in rows))
        models = list(dict.fromkeys(r["model_id"] for r in rows))
        md += ["## Placing: final keypoint RMSE [px], mean (std)", "",
               "| Method | " + " | ".join(tasks) + " |", "|---" * (len(tasks) + 1) + "|"]
        for m in models:
            label = "Ours (kinematic)" if m == "kinematic" else f"Baseline {m}"
            cells = {r["task_id"]: _cell(r["mean_rmse_px"], r["std_rmse_px"]) for r in rows if r["model_id"] == m}
            md.append(f"| {label} | " + " | ".join(cells.get(t, "") for t in tasks) + " |")
            for r in rows:
                if r["model_id"] == m:
                    long_rows += [["placing", m, r["task_id"], "mean_rmse_px", r["mean_rmse_px"]],
                                  ["placing", m, r["task_id"], "std_rmse_px", r["std_rmse_px"]]]
        md.append("")

    if "recovery.csv" in present:
        _, rows = read_csv(src / "recovery.csv")
        md += ["## Ground-truth recovery", "", "| Object | runs | reached target | steps mean (max) |",
               "|---|---|---|---|"]
        for obj in dict.fromkeys(r["object"] for r in rows):
            steps = [int(r["steps_to_target"]) for r in rows if r["object"] == obj and r["steps_to_target"]]
            n = sum(r["object"] == obj for r in rows)
            mean = f"{np.mean(steps):.1f} ({max(steps)})" if steps else "n/a"
            md.append(f"| {obj} | {n} | {len(steps)} | {mean} |")
            long_rows += [["recovery", obj, "", "runs", n], ["recovery", obj, "", "reached", len(steps)]]
            if steps:
                long_rows += [["recovery", obj, "", "mean_steps", format(float(np.mean(steps)), ".17g")],
                              ["recovery", obj, "", "max_steps", max(steps)]]
        md.append("")

    if "regrasp.csv" in present:
        _, rows = read_csv(src / "regrasp.csv")
        md += ["## Re-grasp adaptation", "", "| Grasp | warm steps | cold steps | warm < cold |",
               "|---|---|---|---|"]
        for g in dict.fromkeys(r["grasp"] for r in rows):
            sel = [r for r in rows if r["grasp"] == g]
            warm = [int(r["warm_steps"]) for r in sel if r["warm_steps"]]
            cold = [int(r["cold_steps"]) for r in sel if r["cold_steps"]]
            faster = sum(1 for r in sel if r["warm_steps"] and r["cold_steps"]
                         and int(r["warm_steps"]) < int(r["cold_steps"]))
            md.append(f"| {g} | {np.mean(warm):.1f} | {np.mean(cold):.1f} | {faster}/{len(sel)} |")
            long_rows += [["regrasp", "", g, "warm_mean_steps", format(float(np.mean(warm)), ".17g")],
                          ["regrasp", "", g, "cold_mean_steps", format(float(np.mean(cold)), ".17g")],
                          ["regrasp", "", g, "warm_faster", faster]]
        md.append("")

    if "baselines.csv" in present:
        _, rows = read_csv(src / "baselines.csv")
        md += ["## Baseline training", "", "| Model | dims | off-object [px] | test NMSE |",
               "|---|---|---|---|"]
        for r in rows:
            md.append(f"| {r['model_id']} | {r['dims']} | {float(r['off_object_px']):g} | "
                      f"{float(r['test_nmse']):.4f} |")
            long_rows.append(["baseline", r["model_id"], "", "test_nmse", r["test_nmse"]])
        md.append("")

    for name in ("task", "random"):
        fname = f"horizon_{name}.csv"
        if fname not in present:
            continue
        _, rows = read_csv(src / fname)
        last = max(int(r["step"]) for r in rows)
        md += [f"## Prediction error at step {last} ({name} sequences) [px]", "",
               "| Model | mean (std) |", "|---|---|"]
        for r in rows:
            if int(r["step"]) == last:
                md.append(f"| {r['model_id']} | {_cell(r['mean_err_px'], r['std_err_px'])} |")
                long_rows.append([f"horizon_{name}", r["model_id"], last, "mean_err_px", r["mean_err_px"]])
        md.append("")

    if args.dry_run:
        print(f"would write summary.md and summary.csv to {out}")
        return 0
    atomic_write(out / "summary.md", "\n".join(md).rstrip("\n") + "\n")
    atomic_write(out / "summary.csv", csv_text(["section", "model", "key", "metric", "value"],
                                               long_rows, header))
    print(f"wrote {out / 'summary.md'}")
    return 0


# -- entry point -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment YAML (default: the packaged scene)")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", help="output directory (default: the config's output)")
    common.add_argument("--dry-run", action="store_true", help="validate and list outputs only")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="bodyschema", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"bodyschema {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write observation and dynamics datasets")
    g.add_argument("--preset", choices=["recovery", "sim", "hardware", "dynamics", "all"],
                   default="recovery")
    g.set_defaults(func=cmd_gen_data)

    r = sub.add_parser("regress", parents=[common], help="regress virtual joints")
    r.add_argument("--dataset", help="observation CSV to regress on")
    r.add_argument("--object", help="object whose ground truth scores the result")
    r.add_argument("--preset", choices=["recovery", "regrasp"], default="recovery")
    r.add_argument("--noisy", action="store_true", help="recovery from noisy observations")
    r.set_defaults(func=cmd_regress)

    m = sub.add_parser("mpc", parents=[common], help="run the placing tasks")
    m.add_argument("--phi", choices=list(ex.PHI_SOURCES), default="noisy",
                   help="virtual joints from noisy or noiseless regression, or the ground truth")
    m.add_argument("--models", help="directory of baseline checkpoints to run as well")
    m.set_defaults(func=cmd_mpc)

    t = sub.add_parser("train-dyn", parents=[common], help="train the MLP dynamics baselines")
    t.add_argument("--variants", help="comma-separated subset of a,b,c,d")
    t.add_argument("--epochs", type=int)
    t.set_defaults(func=cmd_train_dyn)

    e = sub.add_parser("eval-horizon", parents=[common], help="long-horizon prediction error curves")
    e.add_argument("--models", required=True, help="directory of baseline checkpoints")
    e.set_defaults(func=cmd_eval_horizon)

    rep = sub.add_parser("report", parents=[common], help="summarize a results directory")
    rep.add_argument("--results", help="results directory (default: --out)")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (BehindCameraError, FloatingPointError, SamplingError) as e:
        print(f"bodyschema {args.command}: computation failed: {e}", file=sys.stderr)
        return 1
    except (UsageError, ConfigError, FileNotFoundError, DimensionError, ValueError,
            KeyError, yaml.YAMLError) as e:
        print(f"bodyschema {args.command}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
