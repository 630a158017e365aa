"""Command-line driver: ``mgpg <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checks, mdp
from .config import ConfigError, load_experiment, load_scenario
from .harness import (Arm, ExperimentSpec, Protocol, default_experiment, emit_plot_data,
                      episodes_to_converge, run_campaign, training_stream)
from .learner import LearnerConfig, mgpg_train, vanilla_pg_train
from .policy import save_params
from .scenario import ScenarioSpec, generate_realization

GRAD_TOL = 1e-5
META_TOL = 1e-4


def _write_jsonl(path: Path, rows) -> None:
    with open(path, "w") as f:
        for r in rows:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def cmd_gen_scenario(args) -> int:
    spec = load_scenario(args.config) if args.config else ScenarioSpec()
    real = generate_realization(spec, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_jsonl(out, real.to_records())
    print(f"realization seed={args.seed}: {len(real.users)} users, "
          f"{real.num_requesting} requesting -> {out}")
    return 0


def _experiment(args) -> ExperimentSpec:
    return load_experiment(args.spec) if args.spec else default_experiment()


def cmd_train(args) -> int:
    spec = _experiment(args)
    arms = {a.name: a for a in spec.arms}
    if args.arm not in arms:
        raise ConfigError("arm", f"unknown arm {args.arm!r}; have {sorted(arms)}")
    arm: Arm = arms[args.arm]
    if args.episodes is not None:
        arm.learner.episodes = args.episodes
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train = mgpg_train if arm.algorithm == "mgpg" else vanilla_pg_train
    with open(out / "metrics.jsonl", "w") as f:
        sink = lambda rec: f.write(json.dumps(rec, sort_keys=True) + "\n")
        params, metrics = train(training_stream(spec.scenario, spec.protocol, args.seed),
                                arm.learner, args.seed, on_episode=sink)
    save_params(params, out / "policy.txt")
    ep, detected = episodes_to_converge(metrics.utility, spec.convergence_window,
                                        spec.convergence_fraction)
    tail = float(np.mean(metrics.utility[-spec.convergence_window:])) if metrics.utility else 0.0
    print(f"{arm.name} seed={args.seed}: final-window utility {tail:.4f}, "
          f"converged at episode {ep}{'' if detected else ' (not detected)'}, "
          f"eta {metrics.eta[-1] if metrics.eta else arm.learner.eta_init:.4f}")
    return 0


def cmd_campaign(args) -> int:
    spec = _experiment(args)
    if args.out:
        spec.output_dir = args.out
    report = run_campaign(spec, workers=args.workers)
    out = spec.resolved_output_dir()
    paths = emit_plot_data(report, out)
    for arm, s in report.summary().items():
        print(f"{arm}: runs={s['runs']} final={s['final_mean']:.4f}+-{s['final_stderr']:.4f} "
              f"median_converge={s['median_episodes_to_converge']:.1f} "
              f"P(final>=0.5)={s['fraction_at_least_half']:.3f} "
              f"sec/episode={s['seconds_per_episode']:.5f}")
    for f in report.failures:
        print(f"FAILED {f['arm']} seed={f['seed']}: {f['error']}")
    print("wrote " + ", ".join(p.name for p in paths) + f" to {out}")
    return 1 if report.failures else 0


def cmd_gradcheck(args) -> int:
    g = checks.run_policy_gradcheck(args.seed, args.configs, args.coords)
    m = checks.run_meta_gradcheck(args.seed, args.meta_configs)
    print(f"policy_objective_grad max rel error {g:.3e} (tol {GRAD_TOL:g}) "
          f"{'ok' if g < GRAD_TOL else 'FAIL'}")
    print(f"meta_grad max rel error {m:.3e} (tol {META_TOL:g}) "
          f"{'ok' if m < META_TOL else 'FAIL'}")
    return 0 if g < GRAD_TOL and m < META_TOL else 1


def cmd_oracle_check(args) -> int:
    if args.clusters == 2:
        spec = checks.desk_scenario()
    else:
        spec = checks.tiny_scenario(args.clusters, 10 * args.clusters, 60.0 + 15.0 * args.clusters)
    config = checks.desk_learner(args.episodes)
    rows = checks.oracle_check(range(args.seed, args.seed + args.seeds), config, spec)
    for r in rows:
        print(f"seed {r.seed}: optimal {r.optimal:.4f} learned {r.learned:.4f} "
              f"{'within 5%' if r.within else 'short'}  {r.trajectory}")
    frac = float(np.mean([r.within for r in rows]))
    print(f"within 5% of optimum: {frac:.0%} of {len(rows)} seeds (need 80%)")
    return 0 if frac >= 0.8 else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mgpg", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-scenario", help="draw one realization and write it as JSON lines")
    s.add_argument("--config", help="scenario YAML (default: built-in scenario)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="realization.jsonl")
    s.set_defaults(func=cmd_gen_scenario)

    s = sub.add_parser("train", help="train one arm for one seed")
    s.add_argument("--spec", help="experiment YAML (default: built-in campaign)")
    s.add_argument("--arm", default="mgpg")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--episodes", type=int)
    s.add_argument("--out", default="out/train")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("campaign", help="run every (arm, seed) and write CSV summaries")
    s.add_argument("--spec", help="experiment YAML (default: built-in campaign)")
    s.add_argument("--out", help="override output_dir")
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_campaign)

    s = sub.add_parser("gradcheck", help="finite-difference checks of both gradients")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--configs", type=int, default=100)
    s.add_argument("--coords", type=int, default=64)
    s.add_argument("--meta-configs", type=int, default=50)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("oracle-check", help="compare learned tours with exhaustive optimum")
    s.add_argument("--clusters", type=int, default=2)
    s.add_argument("--seeds", type=int, default=20)
    s.add_argument("--seed", type=int, default=0, help="first seed")
    s.add_argument("--episodes", type=int, default=2000)
    s.set_defaults(func=cmd_oracle_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"mgpg: error: config {exc}", file=sys.stderr)
        return 2
    except mdp.InstanceTooLarge as exc:
        print(f"mgpg: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
