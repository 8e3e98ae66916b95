"""Metrics: inference/imitation accuracy, mission performance, random baseline."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import Controller, NUM_CONTROLLERS

WILSON_Z = 1.959963984540054  # two-sided 95%


@dataclass
class AccuracyReport:
    """Overall and per-behavior agreement; per-behavior keyed by controller id."""

    overall: float
    total: int
    matches: int
    counts: dict[int, int]
    correct: dict[int, int]

    def per_behavior(self) -> dict[int, float]:
        return {c: (self.correct[c] / n if n else float("nan")) for c, n in self.counts.items()}


def _accuracy(reference, predicted) -> AccuracyReport:
    ref = np.asarray(reference, dtype=np.int64).ravel()
    pred = np.asarray(predicted, dtype=np.int64).ravel()
    if ref.shape != pred.shape:
        raise ValueError(f"length mismatch: {ref.size} vs {pred.size}")
    if ref.size == 0:
        raise ValueError("empty label sequence")
    hit = ref == pred
    ids = range(1, NUM_CONTROLLERS + 1)
    counts = {c: int(np.sum(ref == c)) for c in ids}
    correct = {c: int(np.sum(hit & (ref == c))) for c in ids}
    return AccuracyReport(float(hit.mean()), int(ref.size), int(hit.sum()), counts, correct)


def inference_accuracy(true_labels, map_labels) -> AccuracyReport:
    """Fraction of steps where the MAP controller equals the one actually run."""
    return _accuracy(true_labels, map_labels)


def replay_policy(policy, log, robot_state=None) -> np.ndarray:
    """Feed every logged step through ``policy`` in order; returns its choices.

    Stateful policies see the full sequence (warm-up included) so their
    internal memory evolves exactly as it would have online. Policies that
    act on measurements are fed the logged z, the rest the true state.
    """
    if robot_state is None:
        robot_state = log.z if getattr(policy, "observes", "true") == "measured" else log.x_true
    states = robot_state
    batch = getattr(policy, "predict_batch", None)
    if batch is not None:
        return np.asarray(batch(states, log.e_meas), dtype=np.int64)
    policy.reset()
    return np.array([int(policy(states[k], log.e_meas[k])) for k in range(log.num_steps)], dtype=np.int64)


def imitation_accuracy(policy, log) -> AccuracyReport:
    """Off-policy agreement with the expert's logged decisions (attack steps only)."""
    if log.labels is None or log.e_meas is None:
        raise ValueError("log lacks expert decisions or measurements")
    pred = replay_policy(policy, log)
    keep = log.episode >= 0
    return _accuracy(log.labels[keep], pred[keep])


def mission_performance(log) -> float:
    """Thwarted attacks over initiated attacks."""
    n = len(log.attacks)
    if n == 0:
        raise ValueError("no attacks were initiated")
    return sum(a.outcome == "thwarted" for a in log.attacks) / n


def wilson_interval(successes: int, trials: int, z: float = WILSON_Z) -> tuple[float, float]:
    if trials <= 0:
        raise ValueError("need at least one trial")
    p = successes / trials
    denom = 1.0 + z * z / trials
    mid = (p + z * z / (2 * trials)) / denom
    half = z * math.sqrt(p * (1 - p) / trials + z * z / (4 * trials * trials)) / denom
    return max(0.0, mid - half), min(1.0, mid + half)


@dataclass
class MissionResult:
    policy: str
    thwarted: int
    attacks: int

    @property
    def performance(self) -> float:
        return self.thwarted / self.attacks

    @property
    def ci(self) -> tuple[float, float]:
        return wilson_interval(self.thwarted, self.attacks)


def mission_result(name: str, log) -> MissionResult:
    mission_performance(log)  # validates
    return MissionResult(name, sum(a.outcome == "thwarted" for a in log.attacks), len(log.attacks))


# ---------------------------------------------------------------------------
# random baseline


class RandomPolicy:
    """Switches to a uniformly drawn controller at exponential intervals.

    Time advances by ``dt`` per call, so the policy plugs into a rollout like
    any other selector.
    """

    def __init__(self, rate: float, seed: int, dt: float):
        if not rate > 0:
            raise ValueError("switch rate must be > 0")
        self.rate, self.seed, self.dt = float(rate), int(seed), float(dt)
        self.reset()

    def reset(self) -> None:
        self.rng = np.random.default_rng(self.seed)
        self.time = 0.0
        self.current = self.draw()
        self.next_switch = self.rng.exponential(1.0 / self.rate)

    def draw(self) -> Controller:
        return Controller(int(self.rng.integers(1, NUM_CONTROLLERS + 1)))

    def __call__(self, x=None, e_meas=None) -> Controller:
        while self.time >= self.next_switch:
            self.current = self.draw()
            self.next_switch += self.rng.exponential(1.0 / self.rate)
        self.time += self.dt
        return self.current


def switch_intervals(labels, dt: float) -> np.ndarray:
    lab = np.asarray(labels).ravel()
    switches = np.flatnonzero(lab[1:] != lab[:-1]) + 1
    return np.diff(switches) * dt


def fit_switch_rate(labels, dt: float) -> float:
    """Maximum-likelihood exponential rate from the gaps between switches."""
    gaps = switch_intervals(labels, dt)
    if gaps.size == 0:
        raise ValueError("need at least two controller switches to fit a rate")
    return 1.0 / float(gaps.mean())


def fit_random_policy(log, seed: int) -> RandomPolicy:
    return RandomPolicy(fit_switch_rate(log.labels, log.dt), seed, log.dt)


# ---------------------------------------------------------------------------
# report


@dataclass
class MetricsReport:
    inference: AccuracyReport | None = None
    learning: dict[str, dict[str, float]] = field(default_factory=dict)  # variant -> train/validation
    imitation: dict[str, AccuracyReport] = field(default_factory=dict)
    missions: dict[str, MissionResult] = field(default_factory=dict)
    random_rate: float | None = None

    def validate(self) -> None:
        reps = ([self.inference] if self.inference else []) + list(self.imitation.values())
        for rep in reps:
            assert 0.0 <= rep.overall <= 1.0
            assert all(rep.correct[c] <= rep.counts[c] for c in rep.counts)
        for m in self.missions.values():
            assert 0 <= m.thwarted <= m.attacks

    def to_text(self) -> str:
        buf = io.StringIO()
        if self.inference is not None:
            buf.write(f"inference accuracy: {self.inference.overall:.4f} ({self.inference.matches}/{self.inference.total})\n")
            for c, acc in self.inference.per_behavior().items():
                buf.write(f"  {Controller(c).name:<16} {acc:.4f} ({self.inference.correct[c]}/{self.inference.counts[c]})\n")
        for variant, acc in self.learning.items():
            buf.write(f"learning accuracy [{variant}]: train {acc['train']:.4f} validation {acc['validation']:.4f}\n")
        for name, rep in self.imitation.items():
            buf.write(f"imitation accuracy [{name}]: {rep.overall:.4f}\n")
            for c, acc in rep.per_behavior().items():
                buf.write(f"  {Controller(c).name:<16} {acc:.4f} ({rep.correct[c]}/{rep.counts[c]})\n")
        if self.random_rate is not None:
            buf.write(f"random baseline switch rate: {self.random_rate:.6g} 1/s\n")
        for name, m in self.missions.items():
            lo, hi = m.ci
            buf.write(f"mission performance [{name}]: {m.performance:.4f} ({m.thwarted}/{m.attacks}) 95% CI [{lo:.4f}, {hi:.4f}]\n")
        return buf.getvalue()


def accuracy_csv(reports: dict[str, AccuracyReport]) -> str:
    buf = io.StringIO()
    buf.write("source,behavior,id,occurrences,correct,accuracy\n")
    for name, rep in reports.items():
        for c, acc in rep.per_behavior().items():
            buf.write(f"{name},{Controller(c).name},{c},{rep.counts[c]},{rep.correct[c]},{acc:.17g}\n")
        buf.write(f"{name},OVERALL,0,{rep.total},{rep.matches},{rep.overall:.17g}\n")
    return buf.getvalue()


def missions_csv(missions: dict[str, MissionResult]) -> str:
    buf = io.StringIO()
    buf.write("policy,thwarted,attacks,performance,ci_low,ci_high\n")
    for name, m in missions.items():
        lo, hi = m.ci
        buf.write(f"{name},{m.thwarted},{m.attacks},{m.performance:.17g},{lo:.17g},{hi:.17g}\n")
    return buf.getvalue()
