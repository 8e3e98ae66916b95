"""Hot numeric kernels: team velocity fields and the IMM filter loop.

Every kernel has two implementations with identical math:

* ``*_nb`` -- explicit loops compiled with numba (the default path),
* ``*_np`` -- vectorized numpy, used when numba is disabled.

Controllers are passed in packed-array form so the jitted code never touches
Python objects:

``kind``    0 = rotational consensus (cyclic pursuit), 1 = weighted consensus
``adj``     (N, N) 0/1 adjacency, ``adj[i, j] = 1`` when j is a neighbor of i
``delta2``  (N, N) squared desired separations (already scaled)
``theta``   rotation angle for kind 0
``gain``    (N,) gain of each robot's goal term
``goal``    (2,) goal point shared by every robot with nonzero gain
"""

import math

import numpy as np

from ._accel import njit, use_numba

LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# team velocity


@njit(cache=True)
def team_velocity_nb(x, kind, adj, delta2, theta, gain, goal, vmax):
    n = x.shape[0]
    u = np.zeros((n, 2))
    c = math.cos(theta)
    s = math.sin(theta)
    for i in range(n):
        ux = 0.0
        uy = 0.0
        for j in range(n):
            if adj[i, j] == 0.0:
                continue
            dx = x[j, 0] - x[i, 0]
            dy = x[j, 1] - x[i, 1]
            if kind == 0:
                ux += c * dx - s * dy
                uy += s * dx + c * dy
            else:
                w = dx * dx + dy * dy - delta2[i, j]
                ux += w * dx
                uy += w * dy
        ux += gain[i] * (goal[0] - x[i, 0])
        uy += gain[i] * (goal[1] - x[i, 1])
        speed = math.sqrt(ux * ux + uy * uy)
        if speed > vmax:
            ux *= vmax / speed
            uy *= vmax / speed
        u[i, 0] = ux
        u[i, 1] = uy
    return u


def team_velocity_np(x, kind, adj, delta2, theta, gain, goal, vmax):
    """Batched over any leading axes: ``x`` is (..., N, 2)."""
    x = np.asarray(x, dtype=float)
    diff = x[..., None, :, :] - x[..., :, None, :]  # [..., i, j] = x_j - x_i
    if kind == 0:
        c, s = math.cos(theta), math.sin(theta)
        rot = np.stack(
            (c * diff[..., 0] - s * diff[..., 1], s * diff[..., 0] + c * diff[..., 1]),
            axis=-1,
        )
        u = np.einsum("ij,...ijk->...ik", adj, rot)
    else:
        w = adj * (np.einsum("...ijk,...ijk->...ij", diff, diff) - delta2)
        u = np.einsum("...ij,...ijk->...ik", w, diff)
    u = u + gain[:, None] * (np.asarray(goal, dtype=float) - x)
    if np.isfinite(vmax):
        speed = np.sqrt(np.einsum("...k,...k->...", u, u))
        scale = np.where(speed > vmax, vmax / np.where(speed > 0, speed, 1.0), 1.0)
        u = u * scale[..., None]
    return u


def team_velocity(x, kind, adj, delta2, theta, gain, goal, vmax=np.inf):
    """Velocity of every robot, ``x`` of shape (N, 2)."""
    x = np.ascontiguousarray(x, dtype=float)
    if use_numba() and x.ndim == 2:
        return team_velocity_nb(
            x, int(kind), adj, delta2, float(theta), gain,
            np.ascontiguousarray(goal, dtype=float), float(vmax),
        )
    return team_velocity_np(x, kind, adj, delta2, theta, gain, goal, vmax)


# ---------------------------------------------------------------------------
# IMM over a whole measurement sequence


@njit(cache=True)
def _drift_flat(xf, n, kind, adj, delta2, theta, gain, goal, vmax):
    return team_velocity_nb(xf.reshape(n, 2), kind, adj, delta2, theta, gain, goal, vmax).ravel()


@njit(cache=True)
def imm_run_nb(z, goals, scales, xs, Ps, mu, T, kinds, adjs, delta2s, thetas, gains,
               vmax, dt, q, r, fd_step):
    """Run the IMM over ``z[1:]``; ``xs, Ps, mu`` is the state after ``z[0]``.

    ``goals[k]`` / ``scales[k]`` parameterize the dynamics from step k to k+1.
    Returns per-step mode probabilities, fused estimates, fused covariance
    diagonals and the final per-mode state.
    """
    K, D = z.shape
    M = mu.shape[0]
    n = D // 2
    xs = xs.copy()
    Ps = Ps.copy()
    mu = mu.copy()
    out_mu = np.zeros((K, M))
    out_x = np.zeros((K, D))
    out_pdiag = np.zeros((K, D))
    eye = np.eye(D)
    ok = np.ones(K, dtype=np.bool_)

    # step 0 outputs from the initial state
    out_mu[0] = mu
    for j in range(M):
        out_x[0] += mu[j] * xs[j]
    for j in range(M):
        d = xs[j] - out_x[0]
        for a in range(D):
            out_pdiag[0, a] += mu[j] * (Ps[j, a, a] + d[a] * d[a])

    x0 = np.zeros((M, D))
    P0 = np.zeros((M, D, D))
    loglik = np.zeros(M)
    cbar = np.zeros(M)
    J = np.zeros((D, D))

    for k in range(1, K):
        # interaction
        for j in range(M):
            c = 0.0
            for i in range(M):
                c += T[j, i] * mu[i]
            cbar[j] = c
        for j in range(M):
            if cbar[j] <= 0.0:
                ok[k] = False
                continue
            x0[j] = 0.0
            for i in range(M):
                w = T[j, i] * mu[i] / cbar[j]
                x0[j] += w * xs[i]
            P0[j] = 0.0
            for i in range(M):
                w = T[j, i] * mu[i] / cbar[j]
                d = xs[i] - x0[j]
                P0[j] += w * (Ps[i] + np.outer(d, d))

        # filtering
        goal_prev = goals[k - 1]
        scale_prev = scales[k - 1]
        for j in range(M):
            kind = kinds[j]
            d2 = delta2s[j] * (scale_prev[j] * scale_prev[j])
            f0 = _drift_flat(x0[j], n, kind, adjs[j], d2, thetas[j], gains[j], goal_prev[j], vmax)
            xp = x0[j] + dt * f0
            for c in range(D):
                xa = x0[j].copy()
                xb = x0[j].copy()
                xa[c] += fd_step
                xb[c] -= fd_step
                fa = _drift_flat(xa, n, kind, adjs[j], d2, thetas[j], gains[j], goal_prev[j], vmax)
                fb = _drift_flat(xb, n, kind, adjs[j], d2, thetas[j], gains[j], goal_prev[j], vmax)
                for a in range(D):
                    J[a, c] = (fa[a] - fb[a]) / (2.0 * fd_step)
            A = eye + dt * J
            Pp = A @ P0[j] @ A.T + q * eye
            S = Pp + r * eye
            S = 0.5 * (S + S.T)
            L = np.linalg.cholesky(S)
            nu = z[k] - xp
            # S^-1 nu and S^-1 Pp through the Cholesky factor
            Sinv_nu = np.linalg.solve(L.T, np.linalg.solve(L, nu))
            Sinv_Pp = np.linalg.solve(L.T, np.linalg.solve(L, Pp))
            G = Sinv_Pp.T
            xs[j] = xp + G @ nu
            Pn = (eye - G) @ Pp
            Ps[j] = 0.5 * (Pn + Pn.T)
            logdet = 0.0
            for a in range(D):
                logdet += 2.0 * math.log(L[a, a])
            loglik[j] = -0.5 * (nu @ Sinv_nu + logdet + D * LOG_2PI)

        # mode probabilities
        lmax = loglik[0]
        for j in range(1, M):
            if loglik[j] > lmax:
                lmax = loglik[j]
        tot = 0.0
        for j in range(M):
            mu[j] = math.exp(loglik[j] - lmax) * cbar[j]
            tot += mu[j]
        if not (tot > 0.0) or not math.isfinite(tot):
            for j in range(M):
                mu[j] = 1.0 / M
        else:
            for j in range(M):
                mu[j] /= tot

        # combination
        out_mu[k] = mu
        for j in range(M):
            out_x[k] += mu[j] * xs[j]
        for j in range(M):
            d = xs[j] - out_x[k]
            for a in range(D):
                out_pdiag[k, a] += mu[j] * (Ps[j, a, a] + d[a] * d[a])

    return out_mu, out_x, out_pdiag, xs, Ps, mu, ok
