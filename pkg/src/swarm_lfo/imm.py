"""Interacting-multiple-model estimator over the controller library.

Transition convention: ``T[j, i] = P(mode_k = j | mode_{k-1} = i)``, so
columns sum to one. Mixing weights are stored as ``W[i, j] = mu_{i|j}``.

Each mode's filter is an EKF whose dynamics are
``x+ = x + dt * f_j(x)`` with ``f_j`` the saturated controller velocity.
Jacobians come from central finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import kernels
from ._accel import use_numba
from .dynamics import Controller, ControllerLibrary, NoiseModel

FD_STEP = 1e-5


class DegeneratePriorError(ValueError):
    """A mode has zero predicted probability mass."""


class ConditioningError(ArithmeticError):
    """Innovation covariance could not be factored."""


def transition_matrix(num_modes: int, self_prob: float = 0.95) -> np.ndarray:
    """Sticky uniform switching: ``self_prob`` on the diagonal."""
    if num_modes == 1:
        return np.ones((1, 1))
    if not 0.0 <= self_prob <= 1.0:
        raise ValueError("self-transition probability must be in [0, 1]")
    off = (1.0 - self_prob) / (num_modes - 1)
    T = np.full((num_modes, num_modes), off)
    np.fill_diagonal(T, self_prob)
    return T


def check_transition(T) -> np.ndarray:
    T = np.asarray(T, dtype=float)
    if T.ndim != 2 or T.shape[0] != T.shape[1]:
        raise ValueError(f"transition matrix must be square, got {T.shape}")
    if np.any(T < 0) or np.any(T > 1):
        raise ValueError("transition probabilities must lie in [0, 1]")
    if not np.allclose(T.sum(axis=0), 1.0, rtol=0, atol=1e-12):
        raise ValueError("transition matrix columns must sum to 1")
    return T


@dataclass
class ModeFilterState:
    estimate: np.ndarray
    covariance: np.ndarray


@dataclass
class ImmState:
    per_mode: list[ModeFilterState]
    mu: np.ndarray
    fused_estimate: np.ndarray
    fused_covariance: np.ndarray


@dataclass
class ImmOutput:
    map_mode: Controller
    mu: np.ndarray
    estimate: np.ndarray
    covariance: np.ndarray


def symmetrize(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


def mixing_weights(mu, T) -> tuple[np.ndarray, np.ndarray]:
    """Mixing matrix ``W[i, j] = mu_{i|j}`` and predicted masses ``cbar``."""
    mu = np.asarray(mu, dtype=float)
    T = np.asarray(T, dtype=float)
    cbar = T @ mu
    if np.any(cbar <= 0):
        bad = np.flatnonzero(cbar <= 0).tolist()
        raise DegeneratePriorError(f"modes {bad} have zero predicted probability")
    W = T.T * mu[:, None] / cbar[None, :]
    return W, cbar


def mix_estimates(per_mode: Sequence[ModeFilterState], mixing) -> list[ModeFilterState]:
    """Mixed initial conditions for each mode filter."""
    W = np.asarray(mixing, dtype=float)
    xs = np.stack([m.estimate for m in per_mode])
    if W.shape != (len(per_mode), len(per_mode)):
        raise ValueError(f"mixing matrix shape {W.shape} does not match {len(per_mode)} modes")
    out = []
    for j in range(len(per_mode)):
        x0 = W[:, j] @ xs
        P0 = np.zeros_like(per_mode[0].covariance)
        for i, m in enumerate(per_mode):
            d = m.estimate - x0
            P0 += W[i, j] * (m.covariance + np.outer(d, d))
        out.append(ModeFilterState(x0, symmetrize(P0)))
    return out


def fd_jacobian(drift: Callable, x: np.ndarray, step: float = FD_STEP):
    """``drift(x)`` and its central-difference Jacobian in one batched call."""
    D = x.size
    pts = np.empty((2 * D + 1, D))
    pts[0] = x
    pts[1:D + 1] = x + step * np.eye(D)
    pts[D + 1:] = x - step * np.eye(D)
    vals = np.asarray(drift(pts), dtype=float).reshape(2 * D + 1, D)
    J = ((vals[1:D + 1] - vals[D + 1:]) / (2.0 * step)).T
    return vals[0], J


def ekf_mode_update(x0, P0, drift: Callable, z, dt: float, noise: NoiseModel,
                    fd_step: float = FD_STEP):
    """One EKF predict/update cycle for a single mode.

    ``drift`` maps a batch of stacked states (B, D) to velocities (B, D).
    Returns the posterior mean, covariance and the log-likelihood of the
    innovation.
    """
    x0 = np.asarray(x0, dtype=float)
    P0 = np.asarray(P0, dtype=float)
    z = np.asarray(z, dtype=float)
    D = x0.size
    if z.shape != (D,):
        raise ValueError(f"measurement has shape {z.shape}, expected ({D},)")
    eye = np.eye(D)
    f0, J = fd_jacobian(drift, x0, fd_step)
    xp = x0 + dt * f0
    A = eye + dt * J
    Pp = A @ P0 @ A.T + noise.process_std ** 2 * eye
    S = symmetrize(Pp + noise.state_meas_std ** 2 * eye)
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise ConditioningError("innovation covariance is not positive definite") from exc
    nu = z - xp
    Sinv_nu = np.linalg.solve(L.T, np.linalg.solve(L, nu))
    G = np.linalg.solve(L.T, np.linalg.solve(L, Pp)).T
    x = xp + G @ nu
    P = symmetrize((eye - G) @ Pp)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    loglik = -0.5 * (nu @ Sinv_nu + logdet + D * kernels.LOG_2PI)
    return x, P, float(loglik)


def update_mode_probabilities(likelihoods, mu_prev, T, *, log_space: bool = False) -> np.ndarray:
    """Posterior mode probabilities ``mu_j ~ L_j * cbar_j``.

    With ``log_space`` the inputs are log-likelihoods; the maximum is
    subtracted before exponentiating. If every term vanishes the result
    falls back to uniform.
    """
    lik = np.asarray(likelihoods, dtype=float)
    cbar = np.asarray(T, dtype=float) @ np.asarray(mu_prev, dtype=float)
    if log_space:
        top = np.max(lik)
        if not math.isfinite(top):
            return np.full(lik.size, 1.0 / lik.size)
        w = np.exp(lik - top) * cbar
    else:
        if np.any(lik < 0):
            raise ValueError("likelihoods must be non-negative")
        w = lik * cbar
    tot = w.sum()
    if not (tot > 0) or not math.isfinite(tot):
        return np.full(lik.size, 1.0 / lik.size)
    return w / tot


def combine_estimates(estimates, covariances, mu) -> tuple[np.ndarray, np.ndarray]:
    xs = np.asarray(estimates, dtype=float)
    Ps = np.asarray(covariances, dtype=float)
    mu = np.asarray(mu, dtype=float)
    x = mu @ xs
    d = xs - x
    P = np.einsum("j,jab->ab", mu, Ps) + np.einsum("j,ja,jb->ab", mu, d, d)
    return x, symmetrize(P)


def map_controller(mu, library: ControllerLibrary | None = None) -> Controller:
    """Most probable mode; ties go to the lowest position."""
    idx = int(np.argmax(np.asarray(mu)))
    if library is None:
        return Controller.from_index(idx)
    return library.ids[idx]


def init_imm(z0, num_modes: int, noise: NoiseModel) -> ImmState:
    """Every mode anchored on the first measurement, uniform probabilities."""
    z0 = np.asarray(z0, dtype=float)
    P = noise.state_meas_std ** 2 * np.eye(z0.size)
    if noise.state_meas_std == 0:
        P = 1e-12 * np.eye(z0.size)
    per_mode = [ModeFilterState(z0.copy(), P.copy()) for _ in range(num_modes)]
    mu = np.full(num_modes, 1.0 / num_modes)
    return ImmState(per_mode, mu, z0.copy(), P.copy())


def mode_drift(library: ControllerLibrary, pos: int, goal=None, scale: float = 1.0,
               vmax: float = math.inf) -> Callable:
    """Batched drift function of the controller at library position ``pos``."""
    kinds, adjs, d2s, thetas, gains = library.packed()
    spec = library.controllers[pos]
    g = spec.goal if goal is None else np.asarray(goal, dtype=float)
    n = library.num_robots
    delta2 = d2s[pos] * scale ** 2

    def drift(X):
        X = np.asarray(X, dtype=float)
        u = kernels.team_velocity_np(X.reshape(X.shape[:-1] + (n, 2)), kinds[pos], adjs[pos],
                                     delta2, thetas[pos], gains[pos], g, vmax)
        return u.reshape(X.shape)

    return drift


def imm_step(state: ImmState, z, library: ControllerLibrary, T, dt: float, noise: NoiseModel,
             goals=None, scales=None, vmax: float = math.inf) -> tuple[ImmState, ImmOutput]:
    """Interaction, per-mode filtering, probability update and combination.

    ``goals`` (M, 2) and ``scales`` (M,) parameterize the dynamics that
    carried the team from the previous step to this one.
    """
    M = len(library)
    if goals is None:
        goals = library.default_goals()
    if scales is None:
        scales = np.ones(M)
    W, _ = mixing_weights(state.mu, T)
    mixed = mix_estimates(state.per_mode, W)
    per_mode, logliks = [], np.empty(M)
    for j, m in enumerate(mixed):
        drift = mode_drift(library, j, goals[j], scales[j], vmax)
        x, P, logliks[j] = ekf_mode_update(m.estimate, m.covariance, drift, z, dt, noise)
        per_mode.append(ModeFilterState(x, P))
    mu = update_mode_probabilities(logliks, state.mu, T, log_space=True)
    x, P = combine_estimates([m.estimate for m in per_mode], [m.covariance for m in per_mode], mu)
    new = ImmState(per_mode, mu, x, P)
    return new, ImmOutput(map_controller(mu, library), mu, x, P)


@dataclass
class ImmTrace:
    """Per-step IMM outputs for a measurement sequence."""

    mu: np.ndarray            # (K, M), columns in library order
    estimates: np.ndarray     # (K, D) fused estimates
    variances: np.ndarray     # (K, D) fused covariance diagonals
    map_labels: np.ndarray    # (K,) controller ids


def run_imm(z, library: ControllerLibrary, T, dt: float, noise: NoiseModel, goals=None,
            scales=None, vmax: float = math.inf, backend: str | None = None) -> ImmTrace:
    """Filter a whole measurement sequence.

    ``goals`` is (K, M, 2) and ``scales`` (K, M); entry k describes the
    dynamics applied between steps k and k+1. ``backend`` is ``"numba"``,
    ``"numpy"`` or None (numba when available).
    """
    z = np.ascontiguousarray(z, dtype=float)
    K, D = z.shape
    M = len(library)
    T = check_transition(T)
    if goals is None:
        goals = np.broadcast_to(library.default_goals(), (K, M, 2))
    if scales is None:
        scales = np.ones((K, M))
    goals = np.ascontiguousarray(goals, dtype=float)
    scales = np.ascontiguousarray(scales, dtype=float)
    if backend is None:
        backend = "numba" if use_numba() else "numpy"
    state = init_imm(z[0], M, noise)
    if backend == "numba":
        if not use_numba():
            raise RuntimeError("numba backend requested but numba is disabled")
        kinds, adjs, d2s, thetas, gains = library.packed()
        xs = np.stack([m.estimate for m in state.per_mode])
        Ps = np.stack([m.covariance for m in state.per_mode])
        try:
            mu, est, var, _, _, _, ok = kernels.imm_run_nb(
                z, goals, scales, xs, Ps, state.mu, T, kinds, adjs, d2s, thetas, gains,
                float(vmax), float(dt), noise.process_std ** 2, noise.state_meas_std ** 2, FD_STEP,
            )
        except np.linalg.LinAlgError as exc:
            raise ConditioningError("innovation covariance is not positive definite") from exc
        if not ok.all():
            raise DegeneratePriorError(f"zero predicted mode mass at step {int(np.argmin(ok))}")
    elif backend == "numpy":
        mu = np.empty((K, M))
        est = np.empty((K, D))
        var = np.empty((K, D))
        mu[0], est[0], var[0] = state.mu, state.fused_estimate, np.diag(state.fused_covariance)
        for k in range(1, K):
            state, _ = imm_step(state, z[k], library, T, dt, noise, goals[k - 1], scales[k - 1], vmax)
            mu[k], est[k], var[k] = state.mu, state.fused_estimate, np.diag(state.fused_covariance)
    else:
        raise ValueError(f"unknown backend {backend!r}")
    ids = np.array([int(c) for c in library.ids])
    return ImmTrace(mu, est, var, ids[np.argmax(mu, axis=1)])
