"""Command-line entry point: simulate, calibrate, train, evaluate, report.

Exit codes: 0 on success, 1 for usage or configuration errors, 2 for runtime failures.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import harness, metrics
from .agents import load_agent, save_agent
from .dynamics import N_CATEGORIES, PoliticsCategory
from .environment import RecEnv
from .storage import ContainerError

log = logging.getLogger("polarsim")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common() -> argparse.ArgumentParser:
    # SUPPRESS defaults so the flags work before or after the subcommand
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="YAML or JSON config file")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="root seed (run.seed)")
    p.add_argument("--outdir", type=Path, default=argparse.SUPPRESS, help="output directory (run.outdir)")
    p.add_argument("--workers", type=int, default=argparse.SUPPRESS, help="collector workers (run.workers)")
    p.add_argument("--set", dest="overrides", action="append", default=argparse.SUPPRESS,
                   metavar="KEY=VALUE", help="override a config key; repeatable")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS, help="log progress")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    epilog = "config keys:\n" + cfgmod.describe_keys()
    parser = _Parser(
        prog="polarsim",
        description="Recommender-system polarization simulator.",
        parents=[common],
        epilog=epilog,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        return sub.add_parser(name, help=help_, description=help_, parents=[common], epilog=epilog,
                              formatter_class=argparse.RawDescriptionHelpFormatter)

    experiments = sorted(cfgmod.PRESETS)
    p = add("simulate", "print one verbose episode trace")
    p.add_argument("--experiment", choices=experiments, help="experiment preset")
    p.add_argument("--checkpoint", type=Path, help="agent checkpoint to act with")
    p.add_argument("--steps", type=int, help="episode length cap (default env.user_lifespan)")

    p = add("calibrate", "survival curve, shift profile and click-probability grid")
    p.add_argument("--figures", action="store_true", help="also render PNG figures (needs matplotlib)")

    p = add("train", "train an experiment preset and write its checkpoint")
    p.add_argument("--experiment", choices=experiments, help="experiment preset")
    p.add_argument("--budget", type=int, help="training episodes (run.budget_episodes)")

    p = add("evaluate", "evaluate an agent on the fixed population")
    p.add_argument("--checkpoint", type=Path, help="agent checkpoint")
    p.add_argument("--experiment", choices=experiments, help="experiment preset (heuristic agents)")

    p = add("report", "merge evaluation summaries of several runs")
    p.add_argument("run_dirs", nargs="+", type=Path, help="run directories holding eval_summary.csv")
    p.add_argument("--figures", action="store_true", help="also render PNG figures (needs matplotlib)")
    return parser


def resolve_config(args, preset=None, base: dict | None = None) -> dict:
    overrides = {}
    for text in getattr(args, "overrides", None) or []:
        key, value = cfgmod.parse_override(text)
        overrides[key] = value
    for flag, key in (("seed", "run.seed"), ("outdir", "run.outdir"), ("workers", "run.workers")):
        if hasattr(args, flag):
            overrides[key] = str(getattr(args, flag))
    if getattr(args, "budget", None) is not None:
        overrides["run.budget_episodes"] = args.budget
    file_values = dict(base or {})
    if hasattr(args, "config"):
        file_values.update(cfgmod.load_file(args.config))
    return cfgmod.resolve(file_values, overrides, preset)


def _outdir(flat: dict) -> Path:
    out = Path(flat["run.outdir"])
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_json(out / "config.resolved.json", flat)
    return out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    base, agent = None, None
    if args.checkpoint is not None:
        agent, meta = load_agent(args.checkpoint)
        base = meta.get("run_config") or None
    flat = resolve_config(args, args.experiment, base)
    if args.steps is not None:
        flat["env.user_lifespan"] = args.steps
    exp = harness.experiment_from_flat(flat)
    if agent is None:
        agent = harness.make_agent(exp)
    rng = harness.stream(exp.seed, harness.STREAM_EVAL, 3)
    env = RecEnv(exp.env, rng)
    obs = env.reset()
    agent.reset_slots(np.array([0]), 1)
    u = env.user
    print(f"# user belief={u.belief:.6f} pf={u.polarization_factor:.6f} om={u.open_mindedness:.6f}")
    print("step\taction\tbias\tp_click\tclicked\treward\tbelief\tshift\tengagement\tsatisfaction")
    done = False
    while not done:
        action = int(agent.act(obs[None], rng, greedy=True)[0])
        res = env.step(action)
        info = res.info
        agent.record(np.array([0]), np.array([action]), np.array([info["clicked"]]))
        print(f"{info['step_index']}\t{PoliticsCategory(action).label}\t{info['bias']:.6f}\t"
              f"{info['click_probability']:.6f}\t{int(info['clicked'])}\t{res.reward:g}\t"
              f"{info['user_belief']:.6f}\t{info['belief_shift']:.6f}\t"
              f"{env.user.engagement:.6f}\t{env.user.satisfaction:.6f}")
        obs, done = res.observation, res.done
    end = "attrited" if not env.user.alive else "lifespan reached"
    print(f"# {end} after {env.step_index} steps")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    flat = resolve_config(args)
    exp = harness.experiment_from_flat(flat)
    out = _outdir(flat)
    alive = harness.calibrate_attrition(exp)
    metrics.write_csv(out / "survival.csv", ["step", "alive_fraction"], enumerate(alive))
    grid = harness.shift_profile(exp)
    metrics.write_csv(
        out / "shift_profile.csv", ["user_category", "content_category", "mean_shift"],
        ((k, j, grid[k, j]) for k in range(N_CATEGORIES) for j in range(N_CATEGORIES)),
    )
    axis, probs = harness.click_prob_grid(exp)
    metrics.write_csv(
        out / "click_prob_grid.csv", ["user_belief", "content_bias", "click_probability"],
        ((axis[i], axis[j], probs[i, j]) for i in range(len(axis)) for j in range(len(axis))),
    )
    labels = [c.label for c in PoliticsCategory]
    specs = {
        "survival": metrics.plot_spec("Users remaining under random recommendations", "survival.csv",
                                      "line", {"x": "step", "y": "alive_fraction"}),
        "shift_profile": metrics.plot_spec("Mean belief shift by user and content category",
                                           "shift_profile.csv", "bar",
                                           {"facet": "user_category", "x": "content_category", "y": "mean_shift"},
                                           labels=labels),
        "click_prob_grid": metrics.plot_spec("Click probability", "click_prob_grid.csv", "heatmap",
                                             {"x": "content_bias", "y": "user_belief", "color": "click_probability"}),
    }
    for name, spec in specs.items():
        metrics.write_json(out / "plots" / f"{name}.json", spec)
    first = next((t for t, a in enumerate(alive) if a < 1.0), None)
    empty = next((t for t, a in enumerate(alive) if a == 0.0), None)
    print(f"first attrition at step {first}; no users left at step {empty}")
    if args.figures:
        _render([out])
    return EXIT_OK


def cmd_train(args) -> int:
    flat = resolve_config(args, args.experiment)
    exp = harness.experiment_from_flat(flat)
    out = _outdir(flat)
    exp.outdir = out

    def progress(episodes, curve):
        log.info("episode %d ctr %.3f mean|shift| %.3f", episodes, curve.ctr[-1], curve.mean_abs_shift[-1])

    result = harness.train(exp, progress=progress)
    metrics.write_training_curve(out / "training_curve.csv", result.curve)
    save_agent(out / "checkpoints" / "final.ckpt", result.agent, flat)
    print(f"{exp.name}: {result.episodes} episodes, {result.env_steps} steps, "
          f"{result.train_steps} updates")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    base, agent = None, None
    if args.checkpoint is not None:
        if not args.checkpoint.exists():
            raise UsageError(f"checkpoint {args.checkpoint} not found")
        agent, meta = load_agent(args.checkpoint)
        base = meta.get("run_config") or None
    elif args.experiment is None:
        raise UsageError("evaluate needs --checkpoint or --experiment")
    flat = resolve_config(args, args.experiment, base)
    exp = harness.experiment_from_flat(flat)
    if agent is None:
        if exp.agent.kind in ("dqn", "tabular"):
            raise UsageError(f"agent.kind={exp.agent.kind} needs a trained --checkpoint")
        agent = harness.make_agent(exp)
    out = _outdir(flat)

    snapshot = out / "population.snapshot"
    population = None
    if snapshot.exists():
        pop, seed = metrics.load_population(snapshot)
        if seed != exp.eval_seed or len(pop) != exp.eval_population:
            log.warning("population snapshot (seed %s, %d users) does not match the config; regenerating",
                        seed, len(pop))
        else:
            population = pop
    if population is None:
        population = harness.generate_population(exp)
        metrics.save_population(snapshot, population, exp.eval_seed)

    report = harness.evaluate(agent, exp, population)
    curve_csv = out / "training_curve.csv"
    curve = None
    if curve_csv.exists():
        rows = metrics.read_csv(curve_csv)
        curve = harness.TrainingCurve(
            [int(r["episode_window"]) for r in rows],
            [float(r["ctr"]) for r in rows],
            [float(r["mean_abs_shift"]) for r in rows],
        )
    metrics.export_report(report, out, bins=exp.hist_bins, stride=exp.trajectory_stride, curve=curve)
    print(f"{report.agent_name}: ctr {report.ctr:.4f} attrition {report.attrition_rate:.4f}")
    return EXIT_OK


def cmd_report(args) -> int:
    rows = []
    for d in args.run_dirs:
        path = d / "eval_summary.csv"
        if not path.exists():
            raise UsageError(f"{path} not found")
        for r in metrics.read_csv(path):
            rows.append(metrics.SummaryRow(r["agent"], float(r["ctr"]), float(r["attrition_rate"])))
    flat = resolve_config(args)
    out = _outdir(flat)
    metrics.write_summary(out / "comparison.csv", rows)
    metrics.write_json(out / "plots" / "comparison.json", metrics.plot_spec(
        "CTR and attrition by agent", "comparison.csv", "bar",
        {"x": "agent", "y": ["ctr", "attrition_rate"]},
    ))
    names = metrics.disambiguate([r.agent for r in rows])
    width = max(len(n) for n in names)
    print(f"{'agent':<{width}}  {'ctr':>6}  {'attrition':>9}")
    for n, r in zip(names, rows):
        print(f"{n:<{width}}  {r.ctr:6.3f}  {r.attrition_rate:9.3f}")
    if args.figures:
        _render([*dict.fromkeys(args.run_dirs), out])
    return EXIT_OK


def _render(dirs) -> None:
    from . import plots
    for d in dirs:
        for png in plots.render_run(d):
            print(f"wrote {png}")


COMMANDS = {
    "simulate": cmd_simulate,
    "calibrate": cmd_calibrate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, cfgmod.ConfigError) as exc:
        print(f"polarsim: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ContainerError, OSError, RuntimeError, ValueError) as exc:
        print(f"polarsim: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
