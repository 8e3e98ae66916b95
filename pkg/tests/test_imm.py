import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from swarm_lfo._accel import use_numba
from swarm_lfo.dynamics import (
    Controller,
    ControllerLibrary,
    ControllerSpec,
    NoiseModel,
    TeamState,
    build_library,
    circle_placement,
    evaluate_controller,
    observe_team,
    step_team,
)
from swarm_lfo.imm import (
    ConditioningError,
    DegeneratePriorError,
    ModeFilterState,
    check_transition,
    combine_estimates,
    ekf_mode_update,
    fd_jacobian,
    imm_step,
    init_imm,
    map_controller,
    mix_estimates,
    mixing_weights,
    mode_drift,
    run_imm,
    transition_matrix,
    update_mode_probabilities,
)

BACKENDS = ["numba", "numpy"] if use_numba() else ["numpy"]


# ---------------------------------------------------------------------------
# transition model


def test_default_transition_matrix():
    T = transition_matrix(5)
    np.testing.assert_allclose(np.diag(T), 0.95)
    np.testing.assert_allclose(T[~np.eye(5, dtype=bool)], 0.05 / 4)
    np.testing.assert_allclose(T.sum(axis=0), 1.0, atol=1e-12)


def test_bad_transition_rejected():
    with pytest.raises(ValueError):
        check_transition(np.array([[0.9, 0.2], [0.2, 0.8]]))
    with pytest.raises(ValueError):
        check_transition(np.array([[1.2, 0.0], [-0.2, 1.0]]))


# ---------------------------------------------------------------------------
# mixing


def test_mixing_single_mode():
    W, c = mixing_weights([1.0], [[1.0]])
    assert W[0, 0] == 1.0 and c[0] == 1.0


def test_mixing_identity_transition():
    W, _ = mixing_weights([0.3, 0.5, 0.2], np.eye(3))
    np.testing.assert_array_equal(W, np.eye(3))


def test_mixing_two_mode_hand_values():
    mu = np.array([0.8, 0.2])
    T = np.array([[0.9, 0.1], [0.1, 0.9]])
    W, c = mixing_weights(mu, T)
    # scalar oracle
    c1 = T[0, 0] * mu[0] + T[0, 1] * mu[1]
    assert c[0] == pytest.approx(0.74, abs=1e-15) and c[0] == pytest.approx(c1, abs=1e-15)
    assert W[0, 0] == pytest.approx(0.72 / 0.74, abs=1e-15)
    assert W[1, 0] == pytest.approx(0.02 / 0.74, abs=1e-15)
    np.testing.assert_allclose(W.sum(axis=0), 1.0, atol=1e-15)


def test_mixing_zero_mass_is_degenerate():
    with pytest.raises(DegeneratePriorError):
        mixing_weights([1.0, 0.0], np.eye(2))


@given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=6), st.floats(0.05, 0.99))
def test_mixing_columns_sum_to_one(raw, p):
    mu = np.array(raw) / np.sum(raw)
    W, _ = mixing_weights(mu, transition_matrix(len(mu), p))
    np.testing.assert_allclose(W.sum(axis=0), 1.0, atol=1e-12)
    assert np.all(W >= 0)


def test_mix_estimates_examples():
    same = [ModeFilterState(np.array([1.0, 2.0]), np.eye(2)) for _ in range(3)]
    W, _ = mixing_weights([0.2, 0.3, 0.5], transition_matrix(3))
    for m in mix_estimates(same, W):
        np.testing.assert_allclose(m.estimate, [1.0, 2.0], rtol=0, atol=1e-15)
        np.testing.assert_allclose(m.covariance, np.eye(2), atol=1e-15)
    modes = [ModeFilterState(np.array([0.0]), np.eye(1)), ModeFilterState(np.array([2.0]), 3 * np.eye(1))]
    ident = mix_estimates(modes, np.eye(2))
    assert ident[0].estimate[0] == 0.0 and ident[1].covariance[0, 0] == 3.0
    half = np.full((2, 2), 0.5)
    modes = [ModeFilterState(np.array([0.0]), np.eye(1)), ModeFilterState(np.array([2.0]), np.eye(1))]
    out = mix_estimates(modes, half)
    assert out[0].estimate[0] == pytest.approx(1.0)
    assert out[0].covariance[0, 0] == pytest.approx(2.0)


# ---------------------------------------------------------------------------
# EKF


def _textbook_kf_scalar(x0, P0, a, q, r, z):
    xp = a * x0
    Pp = a * P0 * a + q
    K = Pp / (Pp + r)
    return xp + K * (z - xp), (1 - K) * Pp, Pp


def test_ekf_scalar_linear_mode():
    drift = lambda X: -X
    noise = NoiseModel(math.sqrt(0.01), math.sqrt(0.04), 0.0)
    x, P, ll = ekf_mode_update([1.0], [[1.0]], drift, [0.8], 0.1, noise)
    xr, Pr, Pp = _textbook_kf_scalar(1.0, 1.0, 0.9, 0.01, 0.04, 0.8)
    assert Pp == pytest.approx(0.82)
    assert x[0] == pytest.approx(xr, abs=1e-9)
    assert x[0] == pytest.approx(0.9 - (0.82 / 0.86) * 0.1, abs=1e-9)
    assert x[0] == pytest.approx(0.80465, abs=1e-5)
    assert P[0, 0] == pytest.approx(Pr, abs=1e-9)
    S = 0.86
    assert ll == pytest.approx(-0.5 * (0.01 / S + math.log(2 * math.pi * S)), abs=1e-9)


def test_ekf_uninformative_measurement():
    drift = lambda X: -X
    noise = NoiseModel(0.1, 1e6, 0.0)
    x, P, ll = ekf_mode_update([1.0], [[1.0]], drift, [50.0], 0.1, noise)
    assert x[0] == pytest.approx(0.9, abs=1e-6)
    assert math.isfinite(ll)


def test_ekf_zero_controller_maximal_likelihood_at_prediction():
    drift = lambda X: np.zeros_like(X)
    noise = NoiseModel(0.0, 0.01, 0.0)
    x0 = np.array([0.3, -0.1])
    x, P, ll = ekf_mode_update(x0, 0.01 * np.eye(2), drift, x0, 0.05, noise)
    np.testing.assert_array_equal(x, x0)
    for dz in ([0.01, 0], [0, -0.02], [0.001, 0.001]):
        _, _, other = ekf_mode_update(x0, 0.01 * np.eye(2), drift, x0 + dz, 0.05, noise)
        assert other < ll


def test_ekf_conditioning_error():
    drift = lambda X: np.zeros_like(X)
    with pytest.raises(ConditioningError):
        ekf_mode_update([0.0], [[-5.0]], drift, [0.0], 0.1, NoiseModel(0.0, 0.0, 0.0))


def test_fd_jacobian_matches_refined_step():
    lib = build_library()
    rng = np.random.default_rng(2)
    for j in range(5):
        drift = mode_drift(lib, j, goal=rng.uniform(-0.5, 0.5, 2))
        for _ in range(5):
            x = rng.uniform(-1, 1, 10)
            _, J = fd_jacobian(drift, x)
            _, Jr = fd_jacobian(drift, x, step=1e-6)
            assert np.linalg.norm(J - Jr) <= 1e-4 * max(np.linalg.norm(Jr), 1e-12)


# ---------------------------------------------------------------------------
# probabilities, combination, MAP


def test_probability_update_examples():
    T = transition_matrix(3)
    np.testing.assert_allclose(update_mode_probabilities([1.0, 1.0, 1.0], np.full(3, 1 / 3), T), 1 / 3)
    T2 = np.array([[0.9, 0.1], [0.1, 0.9]])
    np.testing.assert_allclose(update_mode_probabilities([2.0, 1.0], [0.5, 0.5], T2), [2 / 3, 1 / 3])
    np.testing.assert_array_equal(update_mode_probabilities([5.0, 0.0], [0.3, 0.7], T2), [1.0, 0.0])


def test_probability_update_underflow_handling():
    T = transition_matrix(3)
    mu = update_mode_probabilities([-2000.0, -2001.0, -2005.0], np.full(3, 1 / 3), T, log_space=True)
    ref = np.exp([0.0, -1.0, -5.0])
    np.testing.assert_allclose(mu, ref / ref.sum(), atol=1e-12)
    np.testing.assert_allclose(update_mode_probabilities([0.0, 0.0, 0.0], np.full(3, 1 / 3), T), 1 / 3)
    mu = update_mode_probabilities([-np.inf] * 3, np.full(3, 1 / 3), T, log_space=True)
    np.testing.assert_allclose(mu, 1 / 3)


def test_combine_examples():
    xs = [np.array([0.0]), np.array([2.0])]
    Ps = [np.eye(1), np.eye(1)]
    x, P = combine_estimates(xs, Ps, [0.5, 0.5])
    assert x[0] == pytest.approx(1.0) and P[0, 0] == pytest.approx(2.0)
    x, P = combine_estimates(xs, [np.eye(1), 4 * np.eye(1)], [0.0, 1.0])
    assert x[0] == 2.0 and P[0, 0] == 4.0
    x, P = combine_estimates([np.array([1.5])] * 2, [np.eye(1) * 3] * 2, [0.4, 0.6])
    assert x[0] == pytest.approx(1.5, abs=1e-15) and P[0, 0] == pytest.approx(3.0, abs=1e-15)


def test_map_controller_examples():
    assert map_controller([0.2, 0.5, 0.1, 0.1, 0.1]) is Controller.LEADER_FOLLOWER
    assert map_controller(np.full(5, 0.2)) is Controller.CYCLIC_PURSUIT


@given(st.lists(st.floats(0.001, 10.0), min_size=5, max_size=5), st.floats(0.01, 100.0))
def test_map_scale_invariance(raw, c):
    raw = np.array(raw)
    assert map_controller(raw / raw.sum()) == map_controller(c * raw / (c * raw).sum())


# ---------------------------------------------------------------------------
# whole filter


def _simulate(cid_seq, noise, seed, goals=None):
    lib = build_library()
    rng = np.random.default_rng(seed)
    x = TeamState((circle_placement(5, 0.35) + 0.05 * rng.standard_normal((5, 2))).ravel())
    zs = []
    for cid in cid_seq:
        zs.append(observe_team(x, noise, rng))
        u = evaluate_controller(lib, cid, x, goal=None if goals is None else goals[cid.index], vmax=0.2)
        x = step_team(x, u, 0.05, noise, rng)
    return lib, np.array(zs)


def _standalone_ekf(z, drift, dt, q, r, h=1e-5):
    """Plain EKF with its own difference loop (no batched helper)."""
    D = z.shape[1]
    x = z[0].copy()
    P = r * np.eye(D)
    out = [(x.copy(), P.copy())]
    for k in range(1, len(z)):
        f0 = drift(x[None])[0]
        J = np.empty((D, D))
        for c in range(D):
            e = np.zeros(D)
            e[c] = h
            J[:, c] = (drift((x + e)[None])[0] - drift((x - e)[None])[0]) / (2 * h)
        A = np.eye(D) + dt * J
        xp = x + dt * f0
        Pp = A @ P @ A.T + q * np.eye(D)
        S = Pp + r * np.eye(D)
        K = Pp @ np.linalg.inv(S)
        x = xp + K @ (z[k] - xp)
        P = (np.eye(D) - K) @ Pp
        P = 0.5 * (P + P.T)
        out.append((x.copy(), P.copy()))
    return out


@pytest.mark.parametrize("backend", BACKENDS)
def test_single_mode_matches_standalone_ekf(backend):
    noise = NoiseModel(0.002, 0.01, 0.0)
    lib5, z = _simulate([Controller.WEDGE] * 300, noise, 4)
    lib1 = ControllerLibrary((lib5[Controller.WEDGE],))
    trace = run_imm(z, lib1, np.ones((1, 1)), 0.05, noise, vmax=0.2, backend=backend)
    ref = _standalone_ekf(z, mode_drift(lib1, 0, vmax=0.2), 0.05, noise.process_std ** 2, noise.state_meas_std ** 2)
    est = np.array([r[0] for r in ref])
    var = np.array([np.diag(r[1]) for r in ref])
    assert np.max(np.abs(trace.estimates - est) / np.maximum(np.abs(est), 1e-12)) < 1e-10
    assert np.max(np.abs(trace.variances - var) / var) < 1e-10
    np.testing.assert_array_equal(trace.mu, 1.0)


@pytest.mark.parametrize("cid", list(Controller))
def test_constant_mode_is_identified(cid):
    noise = NoiseModel(0.002, 0.01, 0.0)
    goals = np.array([[0.0, 0.0], [0.3, 0.2], [0.1, 0.0], [0.2, -0.1], [0.0, 0.15]])
    lib, z = _simulate([cid] * 200, noise, 10 + int(cid), goals)
    K = len(z)
    trace = run_imm(z, lib, transition_matrix(5), 0.05, noise,
                    goals=np.broadcast_to(goals, (K, 5, 2)), vmax=0.2)
    assert np.any(trace.mu[:51, cid.index] > 0.95)
    assert np.mean(trace.map_labels[50:] == int(cid)) >= 0.9


@pytest.mark.skipif(not use_numba(), reason="numba disabled")
def test_backends_agree():
    noise = NoiseModel(0.01, 0.01, 0.0)
    seq = [Controller.CIRCLE] * 60 + [Controller.STAR] * 60 + [Controller.CYCLIC_PURSUIT] * 60
    lib, z = _simulate(seq, noise, 1)
    a = run_imm(z, lib, transition_matrix(5), 0.05, noise, vmax=0.2, backend="numba")
    b = run_imm(z, lib, transition_matrix(5), 0.05, noise, vmax=0.2, backend="numpy")
    np.testing.assert_allclose(a.mu, b.mu, atol=1e-9)
    np.testing.assert_allclose(a.estimates, b.estimates, atol=1e-10)
    np.testing.assert_array_equal(a.map_labels, b.map_labels)


def test_permutation_equivariance():
    noise = NoiseModel(0.01, 0.01, 0.0)
    seq = [Controller.WEDGE] * 80 + [Controller.LEADER_FOLLOWER] * 80
    lib, z = _simulate(seq, noise, 6)
    K = len(z)
    rng = np.random.default_rng(0)
    goals = rng.uniform(-0.3, 0.3, (K, 5, 2))
    T = np.array([[0.9, 0.02, 0.03, 0.04, 0.05],
                  [0.03, 0.9, 0.02, 0.02, 0.01],
                  [0.03, 0.03, 0.9, 0.02, 0.02],
                  [0.02, 0.03, 0.03, 0.9, 0.02],
                  [0.02, 0.02, 0.02, 0.02, 0.9]])
    order = [3, 0, 4, 2, 1]
    ref = run_imm(z, lib, T, 0.05, noise, goals=goals, vmax=0.2)
    perm = run_imm(z, lib.permuted(order), T[np.ix_(order, order)], 0.05, noise, goals=goals[:, order], vmax=0.2)
    np.testing.assert_allclose(perm.mu, ref.mu[:, order], atol=1e-10)
    np.testing.assert_allclose(perm.estimates, ref.estimates, atol=1e-10)
    # step 0 is a uniform tie, resolved by library position
    np.testing.assert_array_equal(perm.map_labels[1:], ref.map_labels[1:])


def test_identical_modes_follow_markov_prior():
    base = build_library()[Controller.CIRCLE]
    lib = ControllerLibrary(tuple(
        ControllerSpec(cid, base.neighbors, base.separation) for cid in (Controller.CIRCLE, Controller.WEDGE, Controller.STAR)
    ))
    noise = NoiseModel(0.01, 0.01, 0.0)
    _, z = _simulate([Controller.CIRCLE] * 100, noise, 2)
    T = np.array([[0.8, 0.1, 0.3], [0.15, 0.7, 0.2], [0.05, 0.2, 0.5]])
    state = init_imm(z[0], 3, noise)
    state.mu = np.array([0.6, 0.3, 0.1])
    prior = state.mu.copy()
    for k in range(1, len(z)):
        state, out = imm_step(state, z[k], lib, T, 0.05, noise, vmax=0.2)
        prior = T @ prior
        np.testing.assert_allclose(out.mu, prior, atol=1e-9)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_per_step_invariants(seed):
    rng = np.random.default_rng(seed)
    seq = [Controller(int(c)) for c in np.repeat(rng.integers(1, 6, 4), 15)]
    noise = NoiseModel(0.01, 0.01, 0.0)
    lib, z = _simulate(seq, noise, seed)
    T = transition_matrix(5)
    state = init_imm(z[0], 5, noise)
    for k in range(1, len(z)):
        state, out = imm_step(state, z[k], lib, T, 0.05, noise, vmax=0.2)
        assert abs(out.mu.sum() - 1) < 1e-9 and np.all(out.mu >= 0)
        assert out.map_mode.index == int(np.argmax(out.mu))
        for P in [m.covariance for m in state.per_mode] + [out.covariance]:
            assert np.max(np.abs(P - P.T)) < 1e-9
            assert np.min(np.linalg.eigvalsh(P)) >= -1e-9
