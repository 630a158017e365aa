"""Multi-seed training campaigns and plot-ready exports."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import mdp
from .learner import LearnerConfig, RunMetrics, config_to_dict, mgpg_train, vanilla_pg_train
from .policy import SoftmaxPolicy
from .scenario import Realization, ScenarioSpec, generate_realization, trajectory_schedule

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "MGPG_OUTPUT_ROOT"
CDF_THRESHOLDS = tuple(round(0.01 * i, 2) for i in range(101))


class NonReproducible(RuntimeError):
    pass


@dataclass
class Arm:
    name: str
    algorithm: str  # "mgpg" or "pg"
    learner: LearnerConfig


@dataclass
class Protocol:
    """Which realization ids each run trains on and is scored on.

    ``unseen``: seed ``s`` trains on ids ``train_base + s*train_per_seed + j``
    (cycled per episode) and is scored on ``heldout``, which must not overlap
    any training id.  ``fixed``: seed ``s`` trains and is scored on id
    ``train_base + s``.
    """

    kind: str = "unseen"
    train_per_seed: int = 4
    train_base: int = 0
    heldout: list = field(default_factory=lambda: list(range(100000, 100010)))

    def __post_init__(self):
        if self.kind not in ("unseen", "fixed"):
            raise ValueError(f"protocol kind must be 'unseen' or 'fixed', got {self.kind!r}")
        if int(self.train_per_seed) < 1:
            raise ValueError("train_per_seed must be >= 1")

    def train_ids(self, seed: int) -> list[int]:
        if self.kind == "fixed":
            return [self.train_base + seed]
        n = int(self.train_per_seed)
        return [self.train_base + seed * n + j for j in range(n)]

    def eval_ids(self, seed: int) -> list[int]:
        if self.kind == "fixed":
            return self.train_ids(seed)
        return [int(h) for h in self.heldout]


@dataclass
class ExperimentSpec:
    scenario: ScenarioSpec
    arms: list
    seeds: list
    protocol: Protocol = field(default_factory=Protocol)
    eval_mode: str = "greedy"
    eval_rollouts: int = 1
    convergence_window: int = 50
    convergence_fraction: float = 0.95
    output_dir: str = "out"
    workers: int = 1

    def validate(self) -> None:
        if not self.seeds:
            raise ValueError("need at least one seed")
        if not self.arms:
            raise ValueError("need at least one arm")
        names = [a.name for a in self.arms]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate arm names {names}")
        if self.protocol.kind == "unseen":
            if not self.protocol.heldout:
                raise ValueError("unseen protocol needs held-out realizations")
            train = {i for s in self.seeds for i in self.protocol.train_ids(s)}
            clash = train & {int(h) for h in self.protocol.heldout}
            if clash:
                raise ValueError(f"held-out realizations overlap training ids: {sorted(clash)[:5]}")

    def resolved_output_dir(self) -> Path:
        root = os.environ.get(OUTPUT_ROOT_ENV)
        out = Path(self.output_dir)
        return Path(root) / out if root and not out.is_absolute() else out


@dataclass
class RunResult:
    arm: str
    seed: int
    metrics: RunMetrics
    final_utility: float
    eval_utilities: list
    snapshot: list  # greedy visits on the first evaluation realization
    seconds_per_episode: float


@dataclass
class CampaignReport:
    arms: list
    seeds: list
    runs: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    snapshot_realization: int | None = None

    def runs_for(self, arm: str) -> list[RunResult]:
        return [r for r in self.runs if r.arm == arm]

    def summary(self) -> dict:
        out = {}
        for arm in self.arms:
            rs = self.runs_for(arm)
            finals = np.array([r.final_utility for r in rs])
            etc = [r.metrics.episodes_to_converge for r in rs]
            out[arm] = {
                "runs": len(rs),
                "final_mean": float(finals.mean()) if len(rs) else math.nan,
                "final_stderr": _stderr(finals),
                "median_episodes_to_converge": float(np.median(etc)) if rs else math.nan,
                "fraction_at_least_half": float(np.mean(finals >= 0.5)) if len(rs) else math.nan,
                "seconds_per_episode": float(np.mean([r.seconds_per_episode for r in rs])) if rs else math.nan,
            }
        return out

    def paired(self, arm_a: str, arm_b: str) -> list[tuple[int, float, float, float]]:
        """(seed, final_a, final_b, final_a - final_b) for seeds both arms completed."""
        a = {r.seed: r.final_utility for r in self.runs_for(arm_a)}
        b = {r.seed: r.final_utility for r in self.runs_for(arm_b)}
        return [(s, a[s], b[s], a[s] - b[s]) for s in self.seeds if s in a and s in b]


def _stderr(x) -> float:
    x = np.asarray(x, dtype=float)
    if x.size < 2:
        return 0.0
    return float(x.std(ddof=1) / math.sqrt(x.size))


def episodes_to_converge(series, window: int = 50, fraction: float = 0.95) -> tuple[int, bool]:
    """First episode whose trailing-window mean reaches ``fraction`` of the final-window mean.

    Returns ``(episode, detected)``; with no earlier crossing the budget itself
    is returned and ``detected`` is False.
    """
    x = np.asarray(series, dtype=float)
    n = x.size
    if n == 0:
        return 0, False
    w = max(1, min(int(window), n))
    c = np.concatenate([[0.0], np.cumsum(x)])
    trailing = (c[w:] - c[:-w]) / w  # trailing[j] is the mean of episodes j+1 .. j+w
    target = fraction * trailing[-1]
    hit = np.flatnonzero(trailing >= target - 1e-12 * abs(target))
    first = int(hit[0]) + w
    return first, first < n


_CACHE: dict = {}


def _realization(scenario: ScenarioSpec, rid: int) -> Realization:
    key = (json.dumps(scenario.to_dict(), sort_keys=True), int(rid))
    if key not in _CACHE:
        if len(_CACHE) > 4096:
            _CACHE.clear()
        _CACHE[key] = generate_realization(scenario, int(rid))
    return _CACHE[key]


def training_stream(scenario: ScenarioSpec, protocol: Protocol, seed: int):
    ids = protocol.train_ids(seed)
    return lambda i: _realization(scenario, ids[i % len(ids)])


def evaluate(params, realization: Realization, mode: str = "greedy", rollouts: int = 1,
             seed: int = 0) -> float:
    policy = SoftmaxPolicy(params)
    if mode == "greedy":
        return mdp.rollout(realization, policy, None, greedy=True).total_utility
    rng = np.random.default_rng(seed)
    return float(np.mean([mdp.rollout(realization, policy, rng).total_utility
                          for _ in range(max(1, rollouts))]))


def run_one(spec: ExperimentSpec, arm: Arm, seed: int) -> RunResult:
    stream = training_stream(spec.scenario, spec.protocol, seed)
    train = mgpg_train if arm.algorithm == "mgpg" else vanilla_pg_train
    t0 = time.perf_counter()
    params, metrics = train(stream, arm.learner, seed)
    elapsed = time.perf_counter() - t0
    metrics.episodes_to_converge, metrics.converged = episodes_to_converge(
        metrics.utility, spec.convergence_window, spec.convergence_fraction)
    eval_ids = spec.protocol.eval_ids(seed)
    utils = [evaluate(params, _realization(spec.scenario, rid), spec.eval_mode,
                      spec.eval_rollouts, seed) for rid in eval_ids]
    metrics.final_utility = float(np.mean(utils))
    snap_r = _realization(spec.scenario, eval_ids[0])
    traj = mdp.rollout(snap_r, SoftmaxPolicy(params), None, greedy=True).trajectory()
    snapshot = [(v.cluster, v.arrival_s, v.departure_s, len(v.served_ids))
                for v in trajectory_schedule(snap_r, traj)]
    per_ep = elapsed / max(1, arm.learner.episodes)
    return RunResult(arm.name, seed, metrics, metrics.final_utility, utils, snapshot, per_ep)


def _run_task(task):
    spec, arm, seed = task
    try:
        return run_one(spec, arm, seed)
    except Exception as exc:  # a failed run is reported, the campaign goes on
        return (arm.name, seed, f"{type(exc).__name__}: {exc}", traceback.format_exc())


def check_reproducible(scenario: ScenarioSpec, rid: int) -> None:
    a = generate_realization(scenario, rid).fingerprint()
    b = generate_realization(scenario, rid).fingerprint()
    if a != b:
        raise NonReproducible(f"realization {rid} differs between two draws with the same seed")


def run_campaign(spec: ExperimentSpec, workers: int | None = None) -> CampaignReport:
    spec.validate()
    check_reproducible(spec.scenario, spec.protocol.train_ids(spec.seeds[0])[0])
    tasks = [(spec, arm, s) for arm in spec.arms for s in spec.seeds]
    workers = spec.workers if workers is None else workers
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_task, tasks))
    else:
        results = [_run_task(t) for t in tasks]
    report = CampaignReport([a.name for a in spec.arms], list(spec.seeds))
    report.snapshot_realization = spec.protocol.eval_ids(spec.seeds[0])[0]
    for res in results:
        if isinstance(res, RunResult):
            report.runs.append(res)
        else:
            log.warning("run %s/seed %s failed: %s", res[0], res[1], res[2])
            report.failures.append({"arm": res[0], "seed": res[1], "error": res[2]})
    order = {a: i for i, a in enumerate(report.arms)}
    report.runs.sort(key=lambda r: (order[r.arm], r.seed))
    return report


def _fmt(x) -> str:
    if isinstance(x, float):
        if math.isnan(x):
            return "nan"
        return format(x, ".12g")
    return str(x)


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    path.write_text(buf.getvalue())


def emit_plot_data(report: CampaignReport, out_dir, fmt: str = "csv") -> list[Path]:
    """Write convergence, CDF, discount-trace and trajectory files; returns their paths."""
    if fmt != "csv":
        raise ValueError(f"unsupported format {fmt!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    conv_rows, eta_rows, cdf_rows = [], [], []
    for arm in report.arms:
        rs = report.runs_for(arm)
        if not rs:
            continue
        U = np.array([r.metrics.utility for r in rs], dtype=float)
        E = np.array([r.metrics.eta for r in rs], dtype=float)
        for i in range(U.shape[1]):
            conv_rows.append((i + 1, arm, float(U[:, i].mean()), _stderr(U[:, i])))
            eta_rows.append((i + 1, arm, float(E[:, i].mean()), _stderr(E[:, i])))
        finals = np.array([r.final_utility for r in rs])
        for t in CDF_THRESHOLDS:
            cdf_rows.append((t, arm, float(np.mean(finals <= t + 1e-12))))

    paths = [out / "convergence.csv", out / "cdf.csv", out / "eta_trace.csv",
             out / "trajectory_snapshot.txt"]
    _write_csv(paths[0], ["episode", "arm", "mean", "stderr"], conv_rows)
    _write_csv(paths[1], ["threshold", "arm", "fraction"], cdf_rows)
    _write_csv(paths[2], ["episode", "arm", "eta_mean", "eta_stderr"], eta_rows)

    lines = [f"# greedy trajectories on realization {report.snapshot_realization}",
             "# arm seed: cluster@arrival_s-departure_s(+served) ..."]
    for r in report.runs:
        legs = " ".join(f"{c}@{a:.2f}-{d:.2f}(+{n})" for c, a, d, n in r.snapshot)
        lines.append(f"{r.arm} {r.seed}: {legs or '(stays home)'}  "
                     f"utility={_fmt(r.eval_utilities[0])}")
    paths[3].write_text("\n".join(lines) + "\n")

    summary = report.summary()
    srows = [(arm, s["runs"], s["final_mean"], s["final_stderr"], s["median_episodes_to_converge"],
              s["fraction_at_least_half"]) for arm, s in summary.items()]
    p = out / "summary.csv"
    _write_csv(p, ["arm", "runs", "final_mean", "final_stderr", "median_episodes_to_converge",
                   "fraction_at_least_half"], srows)
    paths.append(p)
    if len(report.arms) >= 2:
        p = out / "paired.csv"
        a, b = report.arms[0], report.arms[1]
        _write_csv(p, ["seed", f"final_{a}", f"final_{b}", "delta"], report.paired(a, b))
        paths.append(p)
    p = out / "metrics.jsonl"
    with open(p, "w") as f:
        for r in report.runs:
            for rec in r.metrics.to_records():
                f.write(json.dumps({"arm": r.arm, "seed": r.seed, **rec}, sort_keys=True) + "\n")
    paths.append(p)
    return paths


def spec_to_dict(spec: ExperimentSpec) -> dict:
    return {
        "scenario": spec.scenario.to_dict(),
        "arms": [{"name": a.name, "algorithm": a.algorithm, "learner": config_to_dict(a.learner)}
                 for a in spec.arms],
        "seeds": list(spec.seeds),
        "protocol": {"kind": spec.protocol.kind, "train_per_seed": spec.protocol.train_per_seed,
                     "train_base": spec.protocol.train_base, "heldout": list(spec.protocol.heldout)},
        "evaluation": {"mode": spec.eval_mode, "rollouts": spec.eval_rollouts},
        "convergence": {"window": spec.convergence_window, "fraction": spec.convergence_fraction},
        "output_dir": spec.output_dir, "workers": spec.workers,
    }


def default_experiment(seeds=range(1000, 1030), episodes: int = 1000,
                       output_dir: str = "out") -> ExperimentSpec:
    """Six clusters, 100 users; MGPG against PG sharing step size and initial discount."""
    mgpg_cfg = LearnerConfig(policy_step=0.5, meta_step=0.1, eta_init=0.999, episodes=episodes)
    pg_cfg = LearnerConfig(policy_step=0.5, meta_step=0.0, eta_init=0.999, episodes=episodes)
    return ExperimentSpec(ScenarioSpec(), [Arm("mgpg", "mgpg", mgpg_cfg), Arm("pg", "pg", pg_cfg)],
                          list(seeds), Protocol(), output_dir=output_dir)
