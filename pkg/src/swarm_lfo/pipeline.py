"""End-to-end stages: demonstrate, infer, train, evaluate."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .config import PipelineConfig
from .dynamics import Controller, NUM_CONTROLLERS, TeamState, build_library, observe_team, step_team
from .evaluation import (
    AccuracyReport,
    MetricsReport,
    fit_switch_rate,
    imitation_accuracy,
    inference_accuracy,
    mission_result,
    RandomPolicy,
)
from .imm import ImmTrace, run_imm, transition_matrix
from .policy import Dataset, ImitatorPolicy, MlpParams, TrainReport, train
from .scenario import (
    ExpertPolicy,
    MissionLog,
    circle_placement,
    derive_seed,
    rollout,
    stream,
)


def simulate_expert(cfg: PipelineConfig, episodes: int | None = None, stage: str = "demo") -> MissionLog:
    n = cfg.episodes.demo if episodes is None else episodes
    sc = cfg.scenario_config
    return rollout(sc, ExpertPolicy(sc), cfg.seed, n, stage)


def infer(cfg: PipelineConfig, log: MissionLog, backend: str | None = None) -> ImmTrace:
    """IMM over the logged team measurements, parameterized from the logged ê."""
    sc = cfg.scenario_config
    library = build_library(sc.library)
    goals, scales = log.controller_params(sc)
    T = transition_matrix(NUM_CONTROLLERS, cfg.imm.self_prob)
    return run_imm(log.z, library, T, log.dt, sc.noise, goals, scales, sc.defender_speed, backend)


def attack_accuracy(log: MissionLog, trace: ImmTrace) -> AccuracyReport:
    keep = log.episode >= 0
    return inference_accuracy(log.labels[keep], trace.map_labels[keep])


def train_variant(cfg: PipelineConfig, dataset: Dataset) -> tuple[MlpParams, TrainReport]:
    rng = stream(cfg.seed, f"train/{dataset.variant}")
    return train(dataset, cfg.training, rng, cfg.arena)


# ---------------------------------------------------------------------------
# standalone switching test


@dataclass
class DemoTrace:
    seed: int
    true_labels: np.ndarray
    map_labels: np.ndarray
    mu: np.ndarray

    @property
    def accuracy(self) -> float:
        return float(np.mean(self.true_labels == self.map_labels))

    def late_accuracy(self) -> float:
        """Accuracy over the second half of every sojourn interval."""
        lab = self.true_labels
        starts = np.r_[0, np.flatnonzero(lab[1:] != lab[:-1]) + 1]
        ends = np.r_[starts[1:], lab.size]
        mask = np.zeros(lab.size, dtype=bool)
        for s, e in zip(starts, ends):
            mask[s + (e - s) // 2:e] = True
        return float(np.mean(lab[mask] == self.map_labels[mask]))


def switching_demo(cfg: PipelineConfig, run: int = 0) -> DemoTrace:
    """Team switching among all behaviors at Poisson instants, then filtered."""
    sc = cfg.scenario_config
    d = cfg.infer_demo
    noise = replace(sc.noise, process_std=d.process_std)
    library = build_library(sc.library)
    rng = stream(cfg.seed, "infer-demo", run)
    K = d.steps
    labels = np.empty(K, dtype=np.int64)
    cid = int(rng.integers(1, NUM_CONTROLLERS + 1))
    for k in range(K):
        if k and rng.random() < 1.0 / d.mean_sojourn:
            cid = int(rng.choice([c for c in range(1, NUM_CONTROLLERS + 1) if c != cid]))
        labels[k] = cid
    kinds, adjs, d2s, thetas, gains = library.packed()
    goals = library.default_goals()
    pts = circle_placement(sc.library.num_robots, sc.library.circle_radius) + 0.05 * rng.standard_normal(
        (sc.library.num_robots, 2))
    x = TeamState(sc.arena.clamp(pts.ravel()))
    z = np.empty((K, x.positions.size))
    for k in range(K):
        z[k] = observe_team(x, noise, rng)
        j = library.position(labels[k])
        u = kernels.team_velocity(x.planar(), kinds[j], adjs[j], d2s[j], thetas[j], gains[j], goals[j],
                                  sc.defender_speed).ravel()
        x = step_team(x, u, sc.dt, noise, rng, sc.arena)
    T = transition_matrix(NUM_CONTROLLERS, cfg.imm.self_prob)
    trace = run_imm(z, library, T, sc.dt, noise, vmax=sc.defender_speed)
    return DemoTrace(run, labels, trace.map_labels, trace.mu)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class Evaluation:
    report: MetricsReport
    logs: dict[str, MissionLog]


def evaluate(cfg: PipelineConfig, params_gt: MlpParams, params_imm: MlpParams,
             episodes: int | None = None) -> Evaluation:
    """Paired-seed missions for the expert, both imitators and the random baseline."""
    n = cfg.episodes.eval if episodes is None else episodes
    sc = cfg.scenario_config
    report = MetricsReport()
    logs = {"F": rollout(sc, ExpertPolicy(sc), cfg.seed, n, "eval")}
    rate = fit_switch_rate(logs["F"].labels, sc.dt)
    report.random_rate = rate
    policies = {
        "PHI_GT": ImitatorPolicy(params_gt, sc.arena),
        "PHI_IMM": ImitatorPolicy(params_imm, sc.arena),
        "PHI_RAND": RandomPolicy(rate, derive_seed(cfg.seed, "eval/random"), sc.dt),
    }
    for name, pol in policies.items():
        logs[name] = rollout(sc, pol, cfg.seed, n, "eval")
    for name, log in logs.items():
        report.missions[name] = mission_result(name, log)
    for name in ("PHI_GT", "PHI_IMM"):
        report.imitation[name] = imitation_accuracy(policies[name], logs["F"])
    return Evaluation(report, logs)


def controller_names() -> list[str]:
    return [c.name for c in Controller]
