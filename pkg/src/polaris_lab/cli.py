"""Command-line experiment runner.

Each subcommand writes CSV files (header always present, reals with 17
significant digits) into ``--out``. Work is split into independent
(grid point, seed) units; with ``--workers N`` they run on a process pool and
are merged back in submission order, so output bytes do not depend on
scheduling.

Exit codes: 0 success, 2 configuration error, 3 a required run diverged.
"""

from __future__ import annotations

import argparse
import functools
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import theoremlab as tl
from .config import ExperimentConfig, build_model, build_noise_schedule, load_config
from .errors import ConfigError
from .guidance import CosineDecay, Fixed, PolarisRobust, RandomUniform, Replay
from .metrics import fidelity_row
from .oracle import Condition, perturbed
from .param import SPACES, max_pairwise_deviation
from .pipeline import invert, roundtrip, sample
from .records import write_csv, write_svg
from .restore import LinearMeasurement, RestoreConfig, run_restoration, task_operator
from .schedule import subsample

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3
METRIC_COLUMNS = ("mse", "psnr", "ssim")


# -- shared helpers --------------------------------------------------------------


@functools.lru_cache(maxsize=8)
def _model(cfg: ExperimentConfig):
    return build_model(cfg)


@functools.lru_cache(maxsize=8)
def _schedule(cfg: ExperimentConfig):
    return build_noise_schedule(cfg)


def _tmap(cfg: ExperimentConfig, steps: int):
    return subsample(_schedule(cfg), steps, offset=cfg.steps_offset)


def _cond(cfg: ExperimentConfig) -> Condition:
    return Condition.component(cfg.condition)


def _instance(cfg: ExperimentConfig, seed: int):
    """Ground truth and a fresh prediction oracle for one seeded instance."""
    model = _model(cfg)
    x0 = model.sample(np.random.default_rng([seed, 0]), _cond(cfg))
    return model, x0


def _oracle(cfg: ExperimentConfig, seed: int, noise: float | None = None):
    noise = cfg.prediction_noise if noise is None else noise
    return perturbed(_model(cfg), noise, seed)


def _roundtrip_row(cfg, x0, seed, policy, steps, order=None):
    cond = _cond(cfg)
    oracle = _oracle(cfg, seed)
    x_hat, inv, smp = roundtrip(
        x0, oracle, cond, cond, policy, _schedule(cfg), _tmap(cfg, steps),
        space=cfg.space, order=order or cfg.replay_order,
    )
    row = fidelity_row(x0, x_hat, _model(cfg).shape)
    row["diverged"] = int(inv.diverged or smp.diverged or not np.all(np.isfinite(x_hat)))
    return row, inv


def _seeds(cfg: ExperimentConfig, count: int) -> range:
    return range(cfg.seed_base, cfg.seed_base + count)


def _run_units(fn, cfg, units, workers: int):
    if workers <= 1 or len(units) <= 1:
        return [fn(cfg, u) for u in units]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, [cfg] * len(units), units, chunksize=max(1, len(units) // (4 * workers))))


def _summary(rows, keys):
    groups: dict = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r)
    out = []
    for key in sorted(groups, key=lambda k: tuple((str(type(v)), v) for v in k)):
        g = groups[key]
        mse = np.array([r["mse"] for r in g], dtype=np.float64)
        row = dict(zip(keys, key))
        row.update(
            n=len(g),
            mean_mse=float(np.mean(mse)),
            std_mse=float(np.std(mse)),
            mean_psnr=float(np.mean([r["psnr"] for r in g])),
            mean_ssim=float(np.mean([r["ssim"] for r in g])),
            diverged=int(sum(r.get("diverged", 0) for r in g)),
        )
        out.append(row)
    return out


SUMMARY_TAIL = ("n", "mean_mse", "std_mse", "mean_psnr", "mean_ssim", "diverged")


def _required_diverged(rows, predicate) -> bool:
    return any(r.get("diverged") for r in rows if predicate(r))


# -- roundtrip ----------------------------------------------------------------------


def _roundtrip_unit(cfg, unit):
    method, steps, seed = unit
    _, x0 = _instance(cfg, seed)
    policy = PolarisRobust(cfg.omega0, cfg.guard) if method == "polaris" else Fixed(cfg.fixed_omega)
    row, _ = _roundtrip_row(cfg, x0, seed, policy, steps)
    return {"method": method, "T": steps, "seed": seed, **row}


def cmd_roundtrip(cfg, out: Path, workers=1, svg=False) -> int:
    """Robust dynamic scale vs a fixed scale across the step grid."""
    units = [(m, t, s) for m in ("polaris", "fixed") for t in cfg.steps for s in _seeds(cfg, cfg.seeds)]
    rows = _run_units(_roundtrip_unit, cfg, units, workers)
    cols = ("method", "T", "seed") + METRIC_COLUMNS + ("diverged",)
    write_csv(out / "roundtrip_runs.csv", cols, rows)
    summ = _summary(rows, ("method", "T"))
    write_csv(out / "roundtrip_summary.csv", ("method", "T") + SUMMARY_TAIL, summ)
    if svg:
        series = {
            m: ([r["T"] for r in summ if r["method"] == m], [r["mean_mse"] for r in summ if r["method"] == m])
            for m in ("polaris", "fixed")
        }
        write_svg(out / "roundtrip_mse.svg", series, title="reconstruction error", xlabel="steps", ylabel="mean MSE", logy=True)
    return EXIT_DIVERGED if _required_diverged(rows, lambda r: r["method"] == "polaris") else EXIT_OK


# -- omega0 ablation ----------------------------------------------------------------


def _omega0_unit(cfg, unit):
    omega0, seed = unit
    _, x0 = _instance(cfg, seed)
    row, _ = _roundtrip_row(cfg, x0, seed, PolarisRobust(omega0, cfg.guard), cfg.ablation_steps)
    return {"omega0": omega0, "seed": seed, **row}


def omega0_spread(summary) -> dict:
    means = np.array([r["mean_mse"] for r in summary])
    ssims = np.array([r["mean_ssim"] for r in summary])
    grand = float(np.mean(means))
    spread = float(np.max(means) - np.min(means))
    return {
        "grand_mean_mse": grand,
        "mse_spread": spread,
        "relative_spread": spread / grand if grand > 0 else 0.0,
        "ssim_spread": float(np.max(ssims) - np.min(ssims)),
    }


def cmd_ablate_omega0(cfg, out: Path, workers=1, svg=False) -> int:
    """Sensitivity of reconstruction to the initial scale."""
    units = [(float(w), s) for w in cfg.omega0_grid for s in _seeds(cfg, cfg.ablation_seeds)]
    rows = _run_units(_omega0_unit, cfg, units, workers)
    write_csv(out / "ablate_omega0_runs.csv", ("omega0", "seed") + METRIC_COLUMNS + ("diverged",), rows)
    summ = _summary(rows, ("omega0",))
    write_csv(out / "ablate_omega0_summary.csv", ("omega0",) + SUMMARY_TAIL, summ)
    spread = omega0_spread(summ)
    write_csv(out / "ablate_omega0_spread.csv", tuple(spread), [spread])
    if svg:
        write_svg(out / "ablate_omega0.svg", {"mean MSE": ([r["omega0"] for r in summ], [r["mean_mse"] for r in summ])},
                  title="initial scale ablation", xlabel="omega0", ylabel="mean MSE")
    return EXIT_DIVERGED if _required_diverged(rows, lambda r: True) else EXIT_OK


# -- random omega -------------------------------------------------------------------


def _random_unit(cfg, unit):
    method, seed = unit
    _, x0 = _instance(cfg, seed)
    if method == "polaris":
        policy = PolarisRobust(cfg.omega0, cfg.guard)
    else:
        policy = RandomUniform(cfg.random_lo, cfg.random_hi, seed=seed)
    row, inv = _roundtrip_row(cfg, x0, seed, policy, cfg.ablation_steps)
    w = np.asarray(inv.omegas.omegas)
    return {"method": method, "seed": seed, **row, "omega_min": float(w.min()), "omega_max": float(w.max())}


def cmd_random_omega(cfg, out: Path, workers=1, svg=False) -> int:
    """Robust dynamic scale vs scales drawn uniformly at random."""
    units = [(m, s) for m in ("polaris", "random") for s in _seeds(cfg, cfg.ablation_seeds)]
    rows = _run_units(_random_unit, cfg, units, workers)
    cols = ("method", "seed") + METRIC_COLUMNS + ("diverged", "omega_min", "omega_max")
    write_csv(out / "random_omega_runs.csv", cols, rows)
    write_csv(out / "random_omega_summary.csv", ("method",) + SUMMARY_TAIL, _summary(rows, ("method",)))
    return EXIT_DIVERGED if _required_diverged(rows, lambda r: r["method"] == "polaris") else EXIT_OK


# -- scheduler ablation -----------------------------------------------------------------

SCHEDULES = ("forward", "reverse", "cosine", "fixed")


def _scheduler_unit(cfg, unit):
    steps, seed = unit
    _, x0 = _instance(cfg, seed)
    cond = _cond(cfg)
    sched, tmap = _schedule(cfg), _tmap(cfg, steps)
    inv = invert(x0, _oracle(cfg, seed), cond, PolarisRobust(cfg.omega0, cfg.guard), sched, tmap, space=cfg.space)
    rows = []
    for name in SCHEDULES:
        if name in ("forward", "reverse"):
            if inv.diverged:
                x_hat, diverged = np.full_like(x0, np.nan), 1
            else:
                oracle = _oracle(cfg, seed)
                oracle.calls = 2 * steps
                smp = sample(inv.final, oracle, cond, inv.omegas, sched, tmap, space=cfg.space, order=name)
                x_hat, diverged = smp.final, int(smp.diverged)
            row = fidelity_row(x0, x_hat, _model(cfg).shape)
            row["diverged"] = diverged
        else:
            policy = CosineDecay(1.0, 0.0) if name == "cosine" else Fixed(1.0)
            row, _ = _roundtrip_row(cfg, x0, seed, policy, steps, order="forward")
        rows.append({"schedule": name, "T": steps, "seed": seed, **row})
    return rows


def cmd_schedulers(cfg, out: Path, workers=1, svg=False) -> int:
    """Forward and reverse replay, cosine decay and a unit fixed scale."""
    units = [(t, s) for t in cfg.steps for s in _seeds(cfg, cfg.seeds)]
    rows = [r for chunk in _run_units(_scheduler_unit, cfg, units, workers) for r in chunk]
    rows.sort(key=lambda r: (SCHEDULES.index(r["schedule"]), r["T"], r["seed"]))
    write_csv(out / "schedulers_runs.csv", ("schedule", "T", "seed") + METRIC_COLUMNS + ("diverged",), rows)
    summ = _summary(rows, ("schedule", "T"))
    summ.sort(key=lambda r: (SCHEDULES.index(r["schedule"]), r["T"]))
    write_csv(out / "schedulers_summary.csv", ("schedule", "T") + SUMMARY_TAIL, summ)
    # one row per T, one column per schedule
    table = []
    for t in cfg.steps:
        row = {"T": t}
        row.update({s: next(r["mean_mse"] for r in summ if r["schedule"] == s and r["T"] == t) for s in SCHEDULES})
        table.append(row)
    write_csv(out / "schedulers_table.csv", ("T",) + SCHEDULES, table)
    return EXIT_DIVERGED if _required_diverged(rows, lambda r: r["schedule"] in ("forward", "reverse")) else EXIT_OK


# -- theorems ----------------------------------------------------------------------------


def _trace_unit(cfg, seed):
    _, x0 = _instance(cfg, seed)
    inv = invert(x0, _oracle(cfg, seed), _cond(cfg), PolarisRobust(cfg.omega0, cfg.guard),
                 _schedule(cfg), _tmap(cfg, cfg.trace_steps), space=cfg.space)
    return [(seed, *r) for r in tl.magnitude_ratio_trace(inv)]


def cmd_theorems(cfg, out: Path, workers=1, svg=False) -> int:
    """Error-growth sweeps for both scale rules and the history-term trace."""
    ts = np.logspace(np.log10(cfg.t_min), np.log10(cfg.t_max), cfg.points)
    case1 = tl.PerturbationCase.draw(cfg.dim, cfg.exact_noise, cfg.seed_base)
    curve1 = tl.exact_error_curve(case1, ts)
    write_csv(out / "exact_rule_error.csv", ("t", "error"), curve1)

    ss = np.logspace(np.log10(cfg.noise_min), np.log10(cfg.noise_max), cfg.points)
    case2 = tl.RobustCase.draw(cfg.dim, cfg.seed_base, separation=2.0 * cfg.eta)
    curve2 = tl.robust_error_curve(case2, ss, cfg.eta)
    write_csv(out / "robust_rule_error.csv", ("noise", "delta_norm", "error"), curve2)

    case_c = tl.PerturbationCase.draw(cfg.dim, cfg.contrast_noise, cfg.seed_base)
    con = tl.contrast(case_c, case2, ts, cfg.contrast_noise)
    fits = [
        {"name": "exact_slope", "value": tl.fit_slope(*zip(*curve1))},
        {"name": "robust_slope", "value": tl.fit_slope([r[0] for r in curve2], [r[2] for r in curve2])},
        {"name": "contrast_exact_max", "value": con["exact_max"]},
        {"name": "contrast_robust", "value": con["robust"]},
        {"name": "contrast_ratio", "value": con["ratio"]},
    ]

    traces = _run_units(_trace_unit, cfg, list(_seeds(cfg, cfg.trace_seeds)), workers)
    trace_rows = [r for chunk in traces for r in chunk]
    write_csv(out / "magnitude_trace.csv", ("seed", "step", "a_norm", "hist_norm", "ratio2"), trace_rows)
    if trace_rows:
        arr = np.array([r[2:] for r in trace_rows], dtype=np.float64)
        fits += [
            {"name": "trace_mean_a_norm", "value": float(arr[:, 0].mean())},
            {"name": "trace_mean_hist_norm", "value": float(arr[:, 1].mean())},
            {"name": "trace_mean_ratio2", "value": float(arr[:, 2].mean())},
            {"name": "trace_median_ratio2", "value": float(np.median(arr[:, 2]))},
        ]
    write_csv(out / "theorems_summary.csv", ("name", "value"), fits)
    if svg:
        write_svg(out / "exact_rule.svg", {"|E| exact": tuple(zip(*curve1))}, title="exact rule error",
                  xlabel="t", ylabel="|E|", logx=True, logy=True)
        write_svg(out / "robust_rule.svg", {"|E| robust": ([r[0] for r in curve2], [r[2] for r in curve2])},
                  title="robust rule error", xlabel="noise", ylabel="|E|", logx=True, logy=True)
    return EXIT_OK


# -- restoration -----------------------------------------------------------------------------


def restore_shape(cfg, task):
    """Colorisation works on a three-channel copy of the configured grid."""
    h, w = cfg.shape[-2:]
    return (3, h, w) if task == "colorize" else (h, w)


@functools.lru_cache(maxsize=8)
def _restore_model(cfg, shape):
    return build_model(cfg.with_overrides(shape=shape, components=()))


def _restore_unit(cfg, unit):
    task, method, policy_name, seed = unit
    shape = restore_shape(cfg, task)
    model = _restore_model(cfg, shape)
    cond = _cond(cfg)
    x_true = model.sample(np.random.default_rng([seed, 0]), cond)
    A = task_operator(task, shape)
    meas = LinearMeasurement.build(A, x_true=x_true, noise_sigma=cfg.measurement_noise,
                                   rng=np.random.default_rng([seed, 1]))
    policy = PolarisRobust(cfg.omega0, cfg.guard) if policy_name == "polaris" else Fixed(cfg.baseline_omega)
    rc = RestoreConfig(method, eta=cfg.restore_eta, lam=cfg.restore_lambda)
    oracle = perturbed(model, cfg.prediction_noise, seed)
    _, row = run_restoration(meas, rc, policy, oracle, _schedule(cfg), _tmap(cfg, cfg.restore_steps), seed,
                             x_true=x_true, cond=cond, task=task)
    row["policy"] = policy_name
    return row


def cmd_restore(cfg, out: Path, workers=1, svg=False) -> int:
    """Linear restoration tasks under fixed and dynamic scales."""
    if cfg.components:
        raise ConfigError("restoration builds grid models; remove [component.*] sections", key="component")
    units = [
        (task, m, p, s)
        for task in cfg.tasks
        for m in cfg.methods
        for p in ("fixed", "polaris")
        for s in _seeds(cfg, cfg.restore_seeds)
    ]
    for task in cfg.tasks:
        task_operator(task, restore_shape(cfg, task))
    for m in cfg.methods:
        RestoreConfig(m)
    rows = _run_units(_restore_unit, cfg, units, workers)
    cols = ("task", "method", "policy", "seed") + METRIC_COLUMNS + ("diverged",)
    write_csv(out / "restore_runs.csv", cols, rows)
    write_csv(out / "restore_summary.csv", ("task", "method", "policy") + SUMMARY_TAIL,
              _summary(rows, ("task", "method", "policy")))
    write_csv(out / "restore_policy_summary.csv", ("policy",) + SUMMARY_TAIL, _summary(rows, ("policy",)))
    return EXIT_DIVERGED if _required_diverged(rows, lambda r: r["policy"] == "polaris") else EXIT_OK


# -- invariance ---------------------------------------------------------------------------------


def _invariance_unit(cfg, seed):
    model = _model(cfg)
    x0 = model.sample(np.random.default_rng([seed, 0]), _cond(cfg))
    sched, tmap = _schedule(cfg), _tmap(cfg, cfg.invariance_steps)
    rows = []
    for label, make in (("fixed", lambda: Fixed(cfg.invariance_omega)), ("polaris", lambda: PolarisRobust(cfg.omega0, cfg.guard))):
        runs, omegas = {}, {}
        for space in SPACES:
            _, inv, smp = roundtrip(x0, model, _cond(cfg), _cond(cfg), make(), sched, tmap, space=space)
            runs[space] = np.concatenate([inv.states, smp.states[1:]])
            omegas[space] = inv.omegas.omegas
        ref = runs["noise"]
        for space in SPACES:
            cur = runs[space]
            n = min(len(ref), len(cur))
            scale = np.maximum(np.linalg.norm(ref[:n], axis=1), np.linalg.norm(cur[:n], axis=1))
            dev = np.linalg.norm(ref[:n] - cur[:n], axis=1) / np.where(scale > 0, scale, 1.0)
            for step in range(len(omegas[space])):
                rows.append({"instance": seed, "policy": label, "space": space, "step": step,
                             "omega": omegas[space][step], "deviation": float(dev[step + 1]) if step + 1 < n else float("nan")})
        rows.append({"instance": seed, "policy": label, "space": "max_pairwise", "step": -1, "omega": float("nan"),
                     "deviation": max_pairwise_deviation(runs) if len({len(r) for r in runs.values()}) == 1 else float("nan")})
    return rows


def cmd_invariance(cfg, out: Path, workers=1, svg=False) -> int:
    """Fixed-scale and dynamic-scale trajectories across noise, score and velocity spaces."""
    chunks = _run_units(_invariance_unit, cfg, list(_seeds(cfg, cfg.invariance_instances)), workers)
    rows = [r for c in chunks for r in c]
    write_csv(out / "invariance.csv", ("instance", "policy", "space", "step", "omega", "deviation"), rows)
    summary = []
    for label in ("fixed", "polaris"):
        devs = [r["deviation"] for r in rows if r["policy"] == label and r["space"] == "max_pairwise"]
        summary.append({"policy": label, "instances": len(devs), "max_deviation": float(np.nanmax(devs))})
    write_csv(out / "invariance_summary.csv", ("policy", "instances", "max_deviation"), summary)
    return EXIT_OK


COMMANDS = {
    "roundtrip": cmd_roundtrip,
    "ablate-omega0": cmd_ablate_omega0,
    "random-omega": cmd_random_omega,
    "schedulers": cmd_schedulers,
    "theorems": cmd_theorems,
    "restore": cmd_restore,
    "invariance": cmd_invariance,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="polaris-lab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or name).strip().splitlines()[0])
        p.add_argument("--config", type=Path, help="INI file with experiment settings")
        p.add_argument("--out", type=Path, default=Path("results"), help="output directory (default: results)")
        p.add_argument("--seed", type=int, help="base seed, overrides [experiment] seed_base")
        p.add_argument("--workers", type=int, default=1, help="worker processes (default: 1)")
        p.add_argument("--svg", action="store_true", help="also write SVG charts")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_overrides(seed_base=args.seed)
        if args.workers < 1:
            raise ConfigError("must be >= 1", key="workers")
        return COMMANDS[args.command](cfg, args.out, workers=args.workers, svg=args.svg)
    except ConfigError as exc:
        print(f"polaris-lab: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
