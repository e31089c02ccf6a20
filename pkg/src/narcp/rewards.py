"""Dense candidate rewards, per-step z-score normalization and diagnostics."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import sim
from .sim import SimBatch, SimState, ScenarioConfig

C_DIR = 0.05
C_DIST = 0.2
EPSILON0 = 1e-5
KAPPA_BAND = (1e-3, 1e-2)

_EPS = np.finfo(np.float64).eps


class VarianceBoundError(AssertionError):
    """Var(R_D) exceeded D^2/4 on some batch; this is never supposed to happen."""


class RewardError(ValueError):
    pass


def batch_dense_rewards(b: SimBatch, config: ScenarioConfig, task: str | None = None) -> np.ndarray:
    """Dense reward of every candidate action for every env, shape ``(n, A)``.

    Rewards are the decrease of the task's tracking error over one lookahead
    step, so an action that leaves the geometry unchanged earns zero.
    """
    task = task or config.task
    g0 = sim.batch_geometry(b)
    nxt = sim.batch_peek_all(b, config, task)
    n, a = nxt.px.shape
    g1 = sim.batch_geometry(SimBatch(**{k: v.reshape(-1) for k, v in vars(nxt).items()}))
    e1 = g1["e_dir"].reshape(n, a)
    d1 = np.abs(g1["distance_error"]).reshape(n, a)
    e0 = g0["e_dir"][:, None]
    d0 = np.abs(g0["distance_error"])[:, None]
    r = np.zeros((n, a))
    if task in ("direction", "integrated"):
        r = r + C_DIR * (e0 - e1)
    if task in ("distance", "integrated"):
        r = r + C_DIST * (d0 - d1)
    return r


def dense_reward(state: SimState, action, task: str, config: ScenarioConfig) -> float:
    if task != config.task:
        config = replace(config, task=task)
    idx = sim._check_action(task, action)
    return float(batch_dense_rewards(sim.to_batch(state), config, task)[0, idx])


def variance_bound_slack(r_d: np.ndarray) -> np.ndarray:
    scale = np.max(np.abs(r_d), axis=-1)
    return (4 * _EPS * scale) ** 2


def check_variance_bound(r_d: np.ndarray) -> None:
    """Raise unless Var <= D^2/4 on every row (up to float64 rounding)."""
    r_d = np.atleast_2d(r_d)
    var = r_d.var(axis=-1)
    diam = r_d.max(axis=-1) - r_d.min(axis=-1)
    bound = diam * diam / 4.0
    bad = var > bound * (1 + 1e-12) + variance_bound_slack(r_d)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise VarianceBoundError(f"Var(R_D)={var[i]!r} > D^2/4={bound[i]!r} for batch {r_d[i].tolist()}")


def normalize_rewards(r_d: np.ndarray, eps0: float = EPSILON0):
    """Z-score rewards along the last axis with population statistics.

    Returns ``(r_n, mu, sigma)``.
    """
    r_d = np.asarray(r_d, dtype=np.float64)
    mu = r_d.mean(axis=-1, keepdims=True)
    # second pass removes the rounding error of the first mean, which 1/eps0 would amplify
    mu = mu + (r_d - mu).mean(axis=-1, keepdims=True)
    sigma = np.sqrt(((r_d - mu) ** 2).mean(axis=-1, keepdims=True))
    r_n = (r_d - mu) / (sigma + eps0)
    return r_n, mu[..., 0], sigma[..., 0]


@dataclass(frozen=True)
class RewardBatch:
    state_ref: int
    per_candidate_R_D: np.ndarray
    mu_D: float
    sigma_D: float
    per_candidate_R_N: np.ndarray
    diameter_D: float
    epsilon0: float = EPSILON0

    def to_record(self) -> dict:
        return {
            "r_d": [float(x) for x in self.per_candidate_R_D],
            "mu": float(self.mu_D),
            "sigma": float(self.sigma_D),
            "r_n": [float(x) for x in self.per_candidate_R_N],
            "diameter": float(self.diameter_D),
        }


def batch_from_rewards(r_d, state_ref: int = 0, eps0: float = EPSILON0) -> RewardBatch:
    r_d = np.asarray(r_d, dtype=np.float64)
    if r_d.ndim != 1 or r_d.shape[0] < 2:
        raise RewardError("need at least two candidate rewards")
    check_variance_bound(r_d)
    r_n, mu, sigma = normalize_rewards(r_d, eps0)
    return RewardBatch(state_ref, r_d, float(mu), float(sigma), r_n,
                       float(r_d.max() - r_d.min()), eps0)


def reward_batch(state: SimState, candidates, task: str, config: ScenarioConfig,
                 eps0: float = EPSILON0) -> RewardBatch:
    if len(candidates) < 2:
        raise RewardError("reward statistics need at least two candidates")
    if task != config.task:
        config = replace(config, task=task)
    all_r = batch_dense_rewards(sim.to_batch(state), config, task)[0]
    space = sim.action_space(task)
    idx = [space.index(a.surface) for a in candidates.actions]
    return batch_from_rewards(all_r[idx], state.step_index, eps0)


@dataclass(frozen=True)
class ShapingPotential:
    phi_value: float
    gamma: float
    epsilon0: float = EPSILON0


def potential(batch: RewardBatch, gamma: float) -> ShapingPotential:
    if not 0 <= gamma < 1:
        raise RewardError(f"gamma must lie in [0, 1), got {gamma}")
    phi = batch.mu_D / ((batch.sigma_D + batch.epsilon0) * (1 - gamma))
    return ShapingPotential(phi, gamma, batch.epsilon0)


def decomposition_residual(batch_t: RewardBatch, batch_t1: RewardBatch, action_index: int,
                           gamma: float, shared_sigma: bool = False) -> float:
    """R_N minus the scaled-reward-plus-shaping form, evaluated literally.

    With ``shared_sigma`` the next-step potential reuses step ``t``'s sigma.
    """
    eps0 = batch_t.epsilon0
    sig_t = batch_t.sigma_D
    phi_t = potential(batch_t, gamma).phi_value
    if shared_sigma:
        phi_t1 = batch_t1.mu_D / ((sig_t + eps0) * (1 - gamma))
    else:
        phi_t1 = potential(batch_t1, gamma).phi_value
    rebuilt = batch_t.per_candidate_R_D[action_index] / (sig_t + eps0) + gamma * phi_t1 - phi_t
    return float(batch_t.per_candidate_R_N[action_index] - rebuilt)


@dataclass
class DiagnosticsReport:
    diameters: np.ndarray
    variances: np.ndarray
    fraction_in_band: float
    bound_holds: bool
    band: tuple[float, float] = KAPPA_BAND

    def histogram(self, bins=None):
        if bins is None:
            bins = np.logspace(-5, -1, 9)
        counts, edges = np.histogram(np.clip(self.diameters, bins[0], bins[-1]), bins=bins)
        return counts, edges


def diameter_diagnostic(batches) -> DiagnosticsReport:
    """Diameter band occupancy plus the Var <= D^2/4 check on every batch."""
    if isinstance(batches, np.ndarray):
        r = np.atleast_2d(batches)
    else:
        batches = list(batches)
        if not batches:
            raise RewardError("need at least one batch")
        r = np.stack([np.asarray(b.per_candidate_R_D) for b in batches])
    check_variance_bound(r)
    diam = r.max(axis=1) - r.min(axis=1)
    lo, hi = KAPPA_BAND
    return DiagnosticsReport(
        diameters=diam,
        variances=r.var(axis=1),
        fraction_in_band=float(np.mean((diam >= lo) & (diam <= hi))),
        bound_holds=True,
    )
