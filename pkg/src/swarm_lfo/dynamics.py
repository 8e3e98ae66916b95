"""Controller library and discrete-time team dynamics.

Positions are stacked as ``[x1, y1, x2, y2, ...]``; robot index 0 is the
leader wherever a goal term exists.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import kernels

ROTATIONAL = 0
WEIGHTED = 1


class Controller(enum.IntEnum):
    """Canonical behavior labels; ``value - 1`` is the array index."""

    CYCLIC_PURSUIT = 1
    LEADER_FOLLOWER = 2
    CIRCLE = 3
    WEDGE = 4
    STAR = 5

    @property
    def index(self) -> int:
        return self.value - 1

    @classmethod
    def from_index(cls, idx: int) -> "Controller":
        return cls(int(idx) + 1)


NUM_CONTROLLERS = len(Controller)


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


@dataclass(frozen=True)
class Arena:
    half_width: float = 1.6
    half_height: float = 1.0

    @property
    def half_extents(self) -> np.ndarray:
        return np.array([self.half_width, self.half_height])

    def clamp(self, positions: np.ndarray) -> np.ndarray:
        """Clamp stacked planar positions into the arena rectangle."""
        p = np.asarray(positions, dtype=float).reshape(-1, 2)
        p = np.clip(p, -self.half_extents, self.half_extents)
        return p.reshape(np.shape(positions))


@dataclass(frozen=True)
class TeamState:
    positions: np.ndarray
    time_index: int = 0

    def __post_init__(self):
        p = np.asarray(self.positions, dtype=float).ravel()
        if p.size < 2 or p.size % 2:
            raise DimensionError(f"team state needs 2N coordinates, got {p.size}")
        object.__setattr__(self, "positions", p)

    @property
    def num_robots(self) -> int:
        return self.positions.size // 2

    def planar(self) -> np.ndarray:
        return self.positions.reshape(-1, 2)


@dataclass(frozen=True)
class NoiseModel:
    process_std: float = 0.0225
    state_meas_std: float = 0.01
    env_meas_std: float = 0.01

    def __post_init__(self):
        for name in ("process_std", "state_meas_std", "env_meas_std"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be a finite value >= 0, got {v}")


@dataclass(frozen=True)
class ControllerSpec:
    """One coordinated behavior.

    ``separation[i, j]`` holds the desired distance on edge (i, j) for the
    consensus-type controllers (unused for cyclic pursuit). ``goal`` is the
    default cycle center / leader goal; the mission overrides it every step.
    """

    id: Controller
    neighbors: tuple[tuple[int, ...], ...]
    separation: np.ndarray
    goal: np.ndarray = field(default_factory=lambda: np.zeros(2))
    radius: float = 0.0

    def __post_init__(self):
        n = len(self.neighbors)
        sep = np.asarray(self.separation, dtype=float)
        if sep.shape != (n, n):
            raise DimensionError(f"separation table must be {n}x{n}, got {sep.shape}")
        for i, nbrs in enumerate(self.neighbors):
            for j in nbrs:
                if j == i:
                    raise ValueError(f"{self.id.name}: self-loop at robot {i}")
                if not 0 <= j < n:
                    raise DimensionError(f"{self.id.name}: neighbor {j} out of range")
                if self.kind == WEIGHTED and not sep[i, j] > 0:
                    raise ValueError(f"{self.id.name}: separation on edge ({i},{j}) must be > 0")
                if self.kind == WEIGHTED and i in self.neighbors[j] and sep[i, j] != sep[j, i]:
                    raise ValueError(f"{self.id.name}: separation not symmetric on ({i},{j})")
        if self.id is Controller.CYCLIC_PURSUIT and not self.radius > 0:
            raise ValueError("cyclic pursuit radius must be > 0")
        object.__setattr__(self, "separation", sep)
        object.__setattr__(self, "goal", np.asarray(self.goal, dtype=float).reshape(2))

    @property
    def num_robots(self) -> int:
        return len(self.neighbors)

    @property
    def kind(self) -> int:
        return ROTATIONAL if self.id is Controller.CYCLIC_PURSUIT else WEIGHTED

    @property
    def theta(self) -> float:
        # the cycle "angle" is 2 r sin(pi/N), used as given
        if self.kind != ROTATIONAL:
            return 0.0
        return 2.0 * self.radius * math.sin(math.pi / self.num_robots)

    def adjacency(self) -> np.ndarray:
        n = self.num_robots
        adj = np.zeros((n, n))
        for i, nbrs in enumerate(self.neighbors):
            adj[i, list(nbrs)] = 1.0
        return adj

    def gains(self) -> np.ndarray:
        g = np.zeros(self.num_robots)
        if self.kind == ROTATIONAL:
            g[:] = 1.0
        else:
            g[0] = 1.0
        return g


@dataclass(frozen=True)
class ControllerLibrary:
    controllers: tuple[ControllerSpec, ...]

    def __post_init__(self):
        ids = [c.id for c in self.controllers]
        if len(set(ids)) != len(ids):
            raise ValueError("controller ids must be unique")
        sizes = {c.num_robots for c in self.controllers}
        if len(sizes) > 1:
            raise DimensionError(f"controllers disagree on team size: {sorted(sizes)}")
        # packed arrays for the kernels
        object.__setattr__(self, "_kinds", np.array([c.kind for c in self.controllers], dtype=np.int64))
        object.__setattr__(self, "_adjs", np.stack([c.adjacency() for c in self.controllers]))
        object.__setattr__(self, "_delta2s", np.stack([c.separation ** 2 for c in self.controllers]))
        object.__setattr__(self, "_thetas", np.array([c.theta for c in self.controllers]))
        object.__setattr__(self, "_gains", np.stack([c.gains() for c in self.controllers]))

    def __len__(self) -> int:
        return len(self.controllers)

    def __getitem__(self, cid) -> ControllerSpec:
        for c in self.controllers:
            if c.id == cid:
                return c
        raise KeyError(f"controller {cid!r} not in library")

    @property
    def ids(self) -> list[Controller]:
        return [c.id for c in self.controllers]

    @property
    def num_robots(self) -> int:
        return self.controllers[0].num_robots

    def position(self, cid) -> int:
        """Position of ``cid`` within this library's order."""
        return self.ids.index(Controller(cid))

    def packed(self):
        """(kinds, adjacencies, squared separations, thetas, gains) arrays."""
        return self._kinds, self._adjs, self._delta2s, self._thetas, self._gains

    def default_goals(self) -> np.ndarray:
        return np.stack([c.goal for c in self.controllers])

    def permuted(self, order: Sequence[int]) -> "ControllerLibrary":
        return ControllerLibrary(tuple(self.controllers[i] for i in order))


def rotation(theta: float) -> np.ndarray:
    """2x2 counter-clockwise rotation matrix."""
    if not math.isfinite(theta):
        raise ValueError("rotation angle must be finite")
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def _as_controller(library: ControllerLibrary, cid) -> ControllerSpec:
    try:
        return library[Controller(cid)]
    except (ValueError, KeyError):
        raise ValueError(f"unknown controller id {cid!r}") from None


def evaluate_controller(library: ControllerLibrary, cid, x, goal=None, scale: float = 1.0,
                        vmax: float = math.inf) -> np.ndarray:
    """Stacked velocity command of controller ``cid`` at team state ``x``.

    ``goal`` overrides the spec's cycle center / leader goal, ``scale``
    multiplies every desired separation. Saturation only applies when
    ``vmax`` is finite.
    """
    spec = _as_controller(library, cid)
    pos = x.positions if isinstance(x, TeamState) else np.asarray(x, dtype=float).ravel()
    if pos.size != 2 * spec.num_robots:
        raise DimensionError(
            f"state has {pos.size // 2} robots, controller graph has {spec.num_robots}"
        )
    g = spec.goal if goal is None else np.asarray(goal, dtype=float)
    u = kernels.team_velocity(
        pos.reshape(-1, 2), spec.kind, spec.adjacency(), spec.separation ** 2 * scale ** 2,
        spec.theta, spec.gains(), g, vmax,
    )
    return u.ravel()


def saturate(u: np.ndarray, vmax: float) -> np.ndarray:
    """Cap each robot's speed at ``vmax``."""
    v = np.asarray(u, dtype=float).reshape(-1, 2)
    speed = np.linalg.norm(v, axis=1)
    scale = np.where(speed > vmax, vmax / np.where(speed > 0, speed, 1.0), 1.0)
    return (v * scale[:, None]).ravel()


def step_team(x: TeamState, u, dt: float, noise: NoiseModel, rng: np.random.Generator,
              arena: Arena | None = None) -> TeamState:
    """Forward-Euler step ``x + dt u + v`` with Gaussian process noise."""
    if not dt > 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    u = np.asarray(u, dtype=float).ravel()
    if u.shape != x.positions.shape:
        raise DimensionError(f"velocity has {u.size} entries, state has {x.positions.size}")
    if not np.all(np.isfinite(u)):
        raise NumericError("non-finite velocity command")
    nxt = x.positions + dt * u
    if noise.process_std > 0:
        nxt = nxt + noise.process_std * rng.standard_normal(nxt.size)
    if arena is not None:
        nxt = arena.clamp(nxt)
    return TeamState(nxt, x.time_index + 1)


def observe_team(x: TeamState, noise: NoiseModel, rng: np.random.Generator) -> np.ndarray:
    """Position measurement ``z = x + w``."""
    z = x.positions.copy()
    if noise.state_meas_std > 0:
        z += noise.state_meas_std * rng.standard_normal(z.size)
    return z


# ---------------------------------------------------------------------------
# library construction


def circle_placement(n: int, radius: float) -> np.ndarray:
    ang = 2.0 * np.pi * np.arange(n) / n
    return radius * np.column_stack((np.cos(ang), np.sin(ang)))


def star_placement(n: int, arm: float) -> np.ndarray:
    """Leader at the hub, the others evenly spread on arms of length ``arm``."""
    pts = np.zeros((n, 2))
    if n > 1:
        ang = 2.0 * np.pi * np.arange(n - 1) / (n - 1)
        pts[1:] = arm * np.column_stack((np.cos(ang), np.sin(ang)))
    return pts


def wedge_placement(n: int, spacing: float, half_angle: float) -> np.ndarray:
    """Leader at the apex, followers alternating left/right down the two legs."""
    pts = np.zeros((n, 2))
    for k in range(1, n):
        rank = (k + 1) // 2
        side = 1.0 if k % 2 else -1.0
        pts[k] = (-rank * spacing * math.cos(half_angle), side * rank * spacing * math.sin(half_angle))
    return pts


def pairwise_distances(points: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - points[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def complete_graph(n: int) -> tuple[tuple[int, ...], ...]:
    return tuple(tuple(j for j in range(n) if j != i) for i in range(n))


def line_graph(n: int) -> tuple[tuple[int, ...], ...]:
    return tuple(tuple(j for j in (i - 1, i + 1) if 0 <= j < n) for i in range(n))


def directed_cycle(n: int) -> tuple[tuple[int, ...], ...]:
    if n == 1:
        return ((),)
    return tuple(((i + 1) % n,) for i in range(n))


@dataclass(frozen=True)
class LibraryConfig:
    num_robots: int = 5
    cycle_radius: float = 0.3
    follower_separation: float = 0.2
    circle_radius: float = 0.35
    wedge_spacing: float = 0.2
    wedge_half_angle: float = math.radians(35.0)
    star_arm: float = 0.22

    @classmethod
    def from_mapping(cls, cfg: Mapping) -> "LibraryConfig":
        unknown = set(cfg) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown library keys: {sorted(unknown)}")
        return replace(cls(), **dict(cfg))


def build_library(config: LibraryConfig | Mapping | None = None) -> ControllerLibrary:
    """The five canonical controllers in label order."""
    if config is None:
        config = LibraryConfig()
    elif not isinstance(config, LibraryConfig):
        config = LibraryConfig.from_mapping(config)
    n = int(config.num_robots)
    if n < 1:
        raise ValueError("need at least one robot")
    for name in ("cycle_radius", "follower_separation", "circle_radius", "wedge_spacing", "star_arm"):
        if not getattr(config, name) > 0:
            raise ValueError(f"{name} must be > 0")
    if not 0 < config.wedge_half_angle < math.pi / 2:
        raise ValueError("wedge_half_angle must be in (0, pi/2)")

    def formation(cid, pts):
        sep = pairwise_distances(pts)
        return ControllerSpec(cid, complete_graph(n), sep)

    line = line_graph(n)
    lf_sep = np.zeros((n, n))
    for i, nbrs in enumerate(line):
        lf_sep[i, list(nbrs)] = config.follower_separation
    return ControllerLibrary((
        ControllerSpec(Controller.CYCLIC_PURSUIT, directed_cycle(n), np.zeros((n, n)),
                       radius=config.cycle_radius),
        ControllerSpec(Controller.LEADER_FOLLOWER, line, lf_sep),
        formation(Controller.CIRCLE, circle_placement(n, config.circle_radius)),
        formation(Controller.WEDGE, wedge_placement(n, config.wedge_spacing, config.wedge_half_angle)),
        formation(Controller.STAR, star_placement(n, config.star_arm)),
    ))
