"""Perimeter-defense world: intruder FSMs, the rule-based expert and rollouts."""

from __future__ import annotations

import copy
import enum
import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .dynamics import (
    Arena,
    Controller,
    ControllerLibrary,
    LibraryConfig,
    NoiseModel,
    NUM_CONTROLLERS,
    TeamState,
    build_library,
    circle_placement,
    observe_team,
    pairwise_distances,
    step_team,
)
from . import kernels


class IntruderMode(enum.IntEnum):
    LOITER = 0
    ATTACK = 1
    RETREAT = 2


@dataclass(frozen=True)
class Geometry:
    center: tuple[float, float] = (0.0, 0.0)
    protected_radius: float = 0.2
    inner_radius: float = 0.6    # r_r
    outer_radius: float = 1.0    # r_R
    spawn_inner: float = 1.1
    spawn_outer: float = 1.4
    capture_radius: float = 0.2  # epsilon_d

    def validate(self, arena: Arena) -> None:
        if not 0 < self.protected_radius < self.inner_radius < self.outer_radius:
            raise ValueError("need 0 < protected_radius < inner_radius < outer_radius")
        if not self.outer_radius < self.spawn_inner < self.spawn_outer:
            raise ValueError("spawn annulus must lie outside outer_radius")
        if not self.capture_radius > 0:
            raise ValueError("capture_radius must be > 0")
        cx, cy = self.center
        if abs(cx) + self.spawn_outer > arena.half_width:
            raise ValueError("spawn annulus exceeds the arena width")
        if abs(cy) + self.spawn_inner > arena.half_height and arena.half_height - abs(cy) <= 0:
            raise ValueError("spawn annulus does not intersect the arena")

    def spawn_half_angle(self, arena: Arena) -> float:
        """Half-width of the two spawn lobes (around 0 and pi) inside the arena."""
        room = arena.half_height - abs(self.center[1])
        return math.asin(min(1.0, room / self.spawn_outer))

    def distances(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float).reshape(-1, 2)
        return np.hypot(p[:, 0] - self.center[0], p[:, 1] - self.center[1])


@dataclass(frozen=True)
class ScenarioConfig:
    arena: Arena = Arena()
    geometry: Geometry = Geometry()
    library: LibraryConfig = LibraryConfig()
    noise: NoiseModel = NoiseModel()
    dt: float = 0.05
    num_intruders: int = 3
    attack_rate: float = 0.05
    intruder_speed: float = 0.1
    loiter_speed: float = 0.05
    retreat_speed: float = 0.1
    defender_speed: float = 0.2
    tight_circle_radius: float = 0.25
    contraction_tol: float = 0.05
    contraction_timeout: float = 3.0
    star_standoff: float = 0.3
    wedge_standoff: float = 0.6

    def validate(self) -> None:
        self.geometry.validate(self.arena)
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if self.num_intruders < 1:
            raise ValueError("need at least one intruder")
        for name in ("attack_rate", "intruder_speed", "loiter_speed", "retreat_speed",
                     "defender_speed", "tight_circle_radius", "contraction_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.contraction_timeout < 0:
            raise ValueError("contraction_timeout must be >= 0")


# ---------------------------------------------------------------------------
# seeds


def derive_seed(master: int, stage: str, episode: int = 0) -> int:
    """Stable 64-bit seed from (master seed, stage name, episode id)."""
    h = hashlib.sha256(f"{int(master)}|{stage}|{int(episode)}".encode()).digest()
    return int.from_bytes(h[:8], "little")


def stream(master: int, stage: str, episode: int = 0) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, stage, episode))


# ---------------------------------------------------------------------------
# intruders


@dataclass
class Intruder:
    position: np.ndarray
    mode: IntruderMode = IntruderMode.LOITER
    target: np.ndarray | None = None  # retreat target or loiter waypoint
    attack_id: int = -1


@dataclass
class EnvState:
    intruders: list[Intruder]

    def positions(self) -> np.ndarray:
        return np.concatenate([it.position for it in self.intruders])

    def modes(self) -> np.ndarray:
        return np.array([int(it.mode) for it in self.intruders])


class Event(enum.Enum):
    REPELLED = "repelled"
    BREACH = "breach"
    RETURNED = "returned"


def sample_spawn(rng: np.random.Generator, geometry: Geometry, arena: Arena, lobe: int | None = None) -> np.ndarray:
    """Uniform point in the spawn region (annulus sector pair inside the arena)."""
    phimax = geometry.spawn_half_angle(arena)
    if lobe is None:
        lobe = int(rng.integers(2))
    r = math.sqrt(rng.uniform(geometry.spawn_inner ** 2, geometry.spawn_outer ** 2))
    phi = rng.uniform(-phimax, phimax) + lobe * math.pi
    return np.array(geometry.center) + r * np.array([math.cos(phi), math.sin(phi)])


def _polar(point, geometry: Geometry):
    d = np.asarray(point) - np.array(geometry.center)
    r = math.hypot(d[0], d[1])
    phi = math.atan2(d[1], d[0])
    lobe = 0 if abs(phi) <= math.pi / 2 else 1
    rel = phi - lobe * math.pi
    rel = (rel + math.pi) % (2 * math.pi) - math.pi
    return r, rel, lobe


def in_spawn_region(point, geometry: Geometry, arena: Arena, tol: float = 1e-9) -> bool:
    r, rel, _ = _polar(point, geometry)
    return (geometry.spawn_inner - tol <= r <= geometry.spawn_outer + tol
            and abs(rel) <= geometry.spawn_half_angle(arena) + tol)


def _loiter_move(it: Intruder, geometry: Geometry, arena: Arena, speed: float, dt: float,
                 rng: np.random.Generator) -> None:
    # straight-line motion in (radius, angle) keeps the loiterer inside its lobe
    r, rel, lobe = _polar(it.position, geometry)
    if it.target is None:
        it.target = sample_spawn(rng, geometry, arena, lobe)
    rw, relw, _ = _polar(it.target, geometry)
    dr = rw - r
    darc = (relw - rel) * r
    dist = math.hypot(dr, darc)
    step = speed * dt
    if dist <= step:
        it.position = it.target.copy()
        it.target = sample_spawn(rng, geometry, arena, lobe)
        return
    frac = step / dist
    r += frac * dr
    rel += frac * (relw - rel)
    phi = rel + lobe * math.pi
    it.position = np.array(geometry.center) + r * np.array([math.cos(phi), math.sin(phi)])


def _move_toward(pos: np.ndarray, goal, step: float) -> tuple[np.ndarray, bool]:
    d = np.asarray(goal, dtype=float) - pos
    dist = math.hypot(d[0], d[1])
    if dist <= step:
        return np.array(goal, dtype=float), True
    return pos + d * (step / dist), False


def intruder_step(env: EnvState, defenders, cfg: ScenarioConfig, rng: np.random.Generator):
    """Advance every intruder one step; returns the new state and its events.

    Events are ``(Event, intruder index, attack id)`` tuples. A capture is
    checked before a breach, so an attacker that is caught on the step it
    would have entered the protected region counts as repelled.
    """
    g, arena, dt = cfg.geometry, cfg.arena, cfg.dt
    out = EnvState([copy.copy(it) for it in env.intruders])
    dpos = np.asarray(defenders, dtype=float).reshape(-1, 2)
    center = np.array(g.center)
    events = []
    for idx, it in enumerate(out.intruders):
        if it.mode is IntruderMode.LOITER:
            _loiter_move(it, g, arena, cfg.loiter_speed, dt, rng)
        elif it.mode is IntruderMode.ATTACK:
            it.position, _ = _move_toward(it.position, center, cfg.intruder_speed * dt)
            gap = np.min(np.hypot(*(dpos - it.position).T))
            if gap < g.capture_radius:
                events.append((Event.REPELLED, idx, it.attack_id))
                it.mode = IntruderMode.RETREAT
                it.target = sample_spawn(rng, g, arena)
            elif g.distances(it.position)[0] < g.protected_radius:
                events.append((Event.BREACH, idx, it.attack_id))
                it.mode = IntruderMode.LOITER
                it.position = sample_spawn(rng, g, arena)
                it.target = None
                it.attack_id = -1
        else:
            it.position, arrived = _move_toward(it.position, it.target, cfg.retreat_speed * dt)
            if arrived:
                events.append((Event.RETURNED, idx, it.attack_id))
                it.mode = IntruderMode.LOITER
                it.target = None
                it.attack_id = -1
    return out, events


def initial_env(cfg: ScenarioConfig, rng: np.random.Generator) -> EnvState:
    return EnvState([Intruder(sample_spawn(rng, cfg.geometry, cfg.arena)) for _ in range(cfg.num_intruders)])


class AttackSchedule:
    """Poisson attack initiations; each picks a uniform number of loiterers."""

    def __init__(self, rng: np.random.Generator, rate: float, start: float = 0.0):
        if not rate > 0:
            raise ValueError("attack rate must be > 0")
        self.rate = rate
        self.rng = rng
        self.next_time = start + rng.exponential(1.0 / rate)

    def draw_subset(self, available) -> list[int]:
        available = list(available)
        size = int(self.rng.integers(1, len(available) + 1))
        return sorted(int(i) for i in self.rng.choice(available, size=size, replace=False))

    def advance(self) -> None:
        self.next_time += self.rng.exponential(1.0 / self.rate)


def schedule_attacks(rng: np.random.Generator, rate: float, num_intruders: int, count: int):
    """``count`` (time, subset) events, assuming every intruder is loitering."""
    sched = AttackSchedule(rng, rate)
    events = []
    for _ in range(count):
        t = sched.next_time
        events.append((t, sched.draw_subset(range(num_intruders))))
        sched.advance()
    return events


# ---------------------------------------------------------------------------
# expert policy


def threat_counts(e_meas, geometry: Geometry):
    d = geometry.distances(e_meas)
    inner = int(np.sum(d < geometry.inner_radius))
    mid = int(np.sum((d >= geometry.inner_radius) & (d < geometry.outer_radius)))
    return inner, mid, d


def _unit(v, fallback=(1.0, 0.0)) -> np.ndarray:
    n = math.hypot(v[0], v[1])
    if n < 1e-9:
        return np.array(fallback, dtype=float)
    return np.asarray(v, dtype=float) / n


def runtime_params(e_meas, cfg: ScenarioConfig) -> tuple[np.ndarray, np.ndarray]:
    """Goal point and separation scale of each controller for one step.

    Everything is a function of the environment measurement only, so the
    expert, the imitators and the estimator all parameterize the library the
    same way. Rows follow canonical label order.
    """
    g = cfg.geometry
    center = np.array(g.center, dtype=float)
    pts = np.asarray(e_meas, dtype=float).reshape(-1, 2)
    inner, _, d = threat_counts(pts, g)
    nearest = int(np.argmin(d))
    toward_nearest = _unit(pts[nearest] - center)
    mid = np.flatnonzero((d >= g.inner_radius) & (d < g.outer_radius))
    if mid.size:
        dirs = np.array([_unit(pts[i] - center) for i in mid])
        star_dir = dirs[np.argmin(d[mid])]
        wedge_dir = _unit(dirs.sum(axis=0), fallback=star_dir)
    else:
        star_dir = wedge_dir = toward_nearest

    circle_r = cfg.library.circle_radius
    scale_circle = 1.0
    if inner >= 2:
        scale_circle = cfg.tight_circle_radius / circle_r
        circle_r = cfg.tight_circle_radius

    goals = np.empty((NUM_CONTROLLERS, 2))
    goals[Controller.CYCLIC_PURSUIT.index] = center
    goals[Controller.LEADER_FOLLOWER.index] = pts[nearest]
    goals[Controller.CIRCLE.index] = center + circle_r * toward_nearest
    goals[Controller.WEDGE.index] = center + cfg.wedge_standoff * wedge_dir
    goals[Controller.STAR.index] = center + cfg.star_standoff * star_dir
    scales = np.ones(NUM_CONTROLLERS)
    scales[Controller.CIRCLE.index] = scale_circle
    return goals, scales


@dataclass(frozen=True)
class PhaseState:
    """Memory of the contract-then-pursue maneuver."""

    contraction_steps: int = -1
    pursuing: bool = False


def _contracted(x, cfg: ScenarioConfig) -> bool:
    n = cfg.library.num_robots
    target = pairwise_distances(circle_placement(n, cfg.tight_circle_radius))
    pos = np.asarray(x, dtype=float).reshape(-1, 2)
    err = np.abs(pairwise_distances(pos) - target)
    return bool(np.all(err < cfg.contraction_tol))


def expert_policy(x, e_meas, cfg: ScenarioConfig, phase: PhaseState = PhaseState()):
    """Rule table over intruder ranges; returns ``(controller, new phase)``."""
    inner, mid, _ = threat_counts(e_meas, cfg.geometry)
    if inner >= 2:
        steps = phase.contraction_steps + 1
        pursuing = (phase.pursuing or _contracted(x, cfg)
                    or steps * cfg.dt >= cfg.contraction_timeout - 1e-12)
        nxt = PhaseState(steps, pursuing)
        return (Controller.CYCLIC_PURSUIT if pursuing else Controller.CIRCLE), nxt
    rest = PhaseState()
    if inner == 1:
        return Controller.LEADER_FOLLOWER, rest
    if mid == 1:
        return Controller.STAR, rest
    if mid >= 2:
        return Controller.WEDGE, rest
    return Controller.CIRCLE, rest


class Policy(Protocol):
    """Controller selector. The expert sees the true team state; a policy
    whose ``observes`` attribute is ``"measured"`` gets the measurement z."""

    def reset(self) -> None: ...

    def __call__(self, x: np.ndarray, e_meas: np.ndarray) -> Controller: ...


class ExpertPolicy:
    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.phase = PhaseState()

    def reset(self) -> None:
        self.phase = PhaseState()

    def __call__(self, x, e_meas) -> Controller:
        cid, self.phase = expert_policy(x, e_meas, self.cfg, self.phase)
        return cid


class FunctionPolicy:
    """Memoryless policy from a plain ``(x, e_meas) -> controller`` callable."""

    def __init__(self, fn: Callable):
        self.fn = fn

    def reset(self) -> None:
        pass

    def __call__(self, x, e_meas) -> Controller:
        return Controller(self.fn(x, e_meas))


# ---------------------------------------------------------------------------
# mission rollout


@dataclass
class Attack:
    id: int
    start_step: int
    members: tuple[int, ...]
    repelled: set = field(default_factory=set)
    outcome: str | None = None   # "thwarted" | "breached"
    end_step: int | None = None


@dataclass
class MissionLog:
    dt: float
    x_true: np.ndarray
    z: np.ndarray
    e_true: np.ndarray
    e_meas: np.ndarray
    labels: np.ndarray           # controller id the team ran at each step
    intruder_modes: np.ndarray
    intruder_attacks: np.ndarray
    episode: np.ndarray          # -1 before the first attack
    attacks: list[Attack]

    @property
    def num_steps(self) -> int:
        return len(self.labels)

    @property
    def episode_starts(self) -> list[int]:
        return [a.start_step for a in self.attacks]

    @property
    def num_episodes(self) -> int:
        return len(self.attacks)

    def controller_params(self, cfg: ScenarioConfig) -> tuple[np.ndarray, np.ndarray]:
        """Per-step goals (K, M, 2) and scales (K, M) from the logged measurements."""
        K = self.num_steps
        goals = np.empty((K, NUM_CONTROLLERS, 2))
        scales = np.empty((K, NUM_CONTROLLERS))
        for k in range(K):
            goals[k], scales[k] = runtime_params(self.e_meas[k], cfg)
        return goals, scales


class _Streams:
    def __init__(self, master: int, stage: str, episode: int):
        self.schedule = stream(master, f"{stage}/schedule", episode)
        self.intruders = stream(master, f"{stage}/intruders", episode)
        self.noise = stream(master, f"{stage}/noise", episode)


def initial_team(cfg: ScenarioConfig, rng: np.random.Generator) -> TeamState:
    n = cfg.library.num_robots
    pts = circle_placement(n, cfg.library.circle_radius) + np.array(cfg.geometry.center)
    pts = pts + 0.01 * rng.standard_normal(pts.shape)
    return TeamState(cfg.arena.clamp(pts.ravel()))


def rollout(cfg: ScenarioConfig, policy: Policy, seed: int, num_episodes: int,
            stage: str = "mission", library: ControllerLibrary | None = None,
            max_steps: int | None = None) -> MissionLog:
    """Closed-loop mission until ``num_episodes`` attacks have started and resolved.

    Random streams are re-derived from ``(seed, stage, episode)`` at every
    attack initiation, so different policies see the same per-episode draws.
    """
    cfg.validate()
    if num_episodes < 1:
        raise ValueError("num_episodes must be >= 1")
    library = library or build_library(cfg.library)
    kinds, adjs, d2s, thetas, gains = library.packed()
    if max_steps is None:
        max_steps = int(50 * num_episodes / (cfg.attack_rate * cfg.dt)) + 100_000
    noise, dt = cfg.noise, cfg.dt
    measured = getattr(policy, "observes", "true") == "measured"
    policy.reset()

    st = _Streams(seed, stage, -1)
    x = initial_team(cfg, st.noise)
    env = initial_env(cfg, st.intruders)
    sched = AttackSchedule(st.schedule, cfg.attack_rate)
    attacks: list[Attack] = []
    by_id: dict[int, Attack] = {}
    episode = -1

    rec = {k: [] for k in ("x", "z", "e", "em", "lab", "mode", "att", "ep")}
    k = 0
    while True:
        t = k * dt
        if len(attacks) < num_episodes and t >= sched.next_time:
            loiterers = [i for i, it in enumerate(env.intruders) if it.mode is IntruderMode.LOITER]
            if loiterers:
                episode = len(attacks)
                st = _Streams(seed, stage, episode)
                sched.rng = st.schedule
                members = sched.draw_subset(loiterers)
                atk = Attack(episode, k, tuple(members))
                attacks.append(atk)
                by_id[atk.id] = atk
                for i in members:
                    it = env.intruders[i]
                    it.mode, it.attack_id, it.target = IntruderMode.ATTACK, atk.id, None
            sched.advance()

        e = env.positions()
        e_meas = e + noise.env_meas_std * st.noise.standard_normal(e.size) if noise.env_meas_std > 0 else e.copy()
        z = observe_team(x, noise, st.noise)
        cid = Controller(policy(z if measured else x.positions, e_meas))
        rec["x"].append(x.positions)
        rec["z"].append(z)
        rec["e"].append(e)
        rec["em"].append(e_meas)
        rec["lab"].append(int(cid))
        rec["mode"].append(env.modes())
        rec["att"].append([it.attack_id for it in env.intruders])
        rec["ep"].append(episode)

        goals, scales = runtime_params(e_meas, cfg)
        j = library.position(cid)
        u = kernels.team_velocity(
            x.planar(), kinds[j], adjs[j], d2s[j] * scales[cid.index] ** 2, thetas[j], gains[j],
            goals[cid.index], cfg.defender_speed,
        ).ravel()
        x = step_team(x, u, dt, noise, st.noise, cfg.arena)
        env, events = intruder_step(env, x.positions, cfg, st.intruders)
        for kind, idx, aid in events:
            atk = by_id.get(aid)
            if atk is None or atk.outcome is not None:
                continue
            if kind is Event.BREACH:
                atk.outcome, atk.end_step = "breached", k
            elif kind is Event.REPELLED:
                atk.repelled.add(idx)
                if atk.repelled.issuperset(atk.members):
                    atk.outcome, atk.end_step = "thwarted", k
        k += 1
        if len(attacks) == num_episodes and all(a.outcome is not None for a in attacks):
            break
        if k >= max_steps:
            raise RuntimeError(f"mission did not finish within {max_steps} steps")

    return MissionLog(
        dt=dt,
        x_true=np.array(rec["x"]),
        z=np.array(rec["z"]),
        e_true=np.array(rec["e"]),
        e_meas=np.array(rec["em"]),
        labels=np.array(rec["lab"], dtype=np.int64),
        intruder_modes=np.array(rec["mode"], dtype=np.int64),
        intruder_attacks=np.array(rec["att"], dtype=np.int64),
        episode=np.array(rec["ep"], dtype=np.int64),
        attacks=attacks,
    )


def run_mission(cfg: ScenarioConfig, seed: int, num_episodes: int, stage: str = "mission",
                expert: Policy | None = None) -> MissionLog:
    """Expert rollout (the rule-based policy unless another is supplied)."""
    return rollout(cfg, expert or ExpertPolicy(cfg), seed, num_episodes, stage)


def run_mission_with_imitator(cfg: ScenarioConfig, policy: Policy, seed: int, num_episodes: int,
                              stage: str = "mission") -> MissionLog:
    """Same rollout machinery with a learned (or any other) controller selector."""
    return rollout(cfg, policy, seed, num_episodes, stage)
