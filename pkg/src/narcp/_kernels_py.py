"""Pure-numpy implementations of the hot kernels.

These are the reference versions; ``_kernels.pyx`` mirrors them loop for loop.
"""
import math

import numpy as np

TWO_PI = 2.0 * math.pi
EPS64 = np.finfo(np.float64).eps


def wrap_angle(x):
    """Wrap angles into [-pi, pi)."""
    r = np.mod(np.asarray(x, dtype=np.float64) + math.pi, TWO_PI)
    r = np.where(r >= TWO_PI, r - TWO_PI, r)
    return r - math.pi


def unicycle_advance(px, py, heading, speed, turn_rate, speed_delta, dt, v_min, v_max):
    """One unicycle step for flat, equally shaped arrays.

    Heading and speed are updated first, the position is then moved with the
    new values. Returns ``(px, py, heading, speed)`` as new arrays.
    """
    h = wrap_angle(heading + turn_rate * dt)
    v = np.clip(speed + speed_delta * dt, v_min, v_max)
    return px + v * np.cos(h) * dt, py + v * np.sin(h) * dt, h, v


def gae(rewards, values, dones, gamma, lam):
    """Generalized advantage estimation over a ``(T, N)`` rollout.

    ``values`` has shape ``(T + 1, N)``; the last row is the bootstrap value.
    ``dones[t]`` marks that the episode ended after step ``t``.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    last = np.zeros(rewards.shape[1:], dtype=np.float64)
    for t in range(T - 1, -1, -1):
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * values[t + 1] * nonterminal - values[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
    return adv


def value_iteration(P, R, terminal, gamma, tol, max_iter):
    """Bellman optimality iteration on Q.

    Returns ``(Q, iterations, residual, converged)``. The stopping threshold is
    ``tol`` unless float64 resolution at the current value scale is coarser.
    """
    P = np.asarray(P, dtype=np.float64)
    R = np.asarray(R, dtype=np.float64)
    live = 1.0 - np.asarray(terminal, dtype=np.float64)
    n_states, n_actions = R.shape
    Q = np.zeros((n_states, n_actions))
    residual = math.inf
    for it in range(1, max_iter + 1):
        V = Q.max(axis=1) * live
        Q_new = R + gamma * (P @ V)
        residual = float(np.max(np.abs(Q_new - Q)))
        Q = Q_new
        scale = float(np.max(np.abs(Q)))
        if residual <= max(tol, 8.0 * EPS64 * scale):
            return Q, it, residual, True
    return Q, max_iter, residual, False
