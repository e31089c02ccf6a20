"""Exhaustive tabular checks of optimal-policy preservation.

Two claims are tested by solving small MDPs exactly:

* adding ``gamma * phi(s') - phi(s)`` to the reward leaves the optimal
  argmax sets unchanged, for any state potential ``phi``;
* per-state z-scoring of candidate rewards does the same when every state
  shares one (mean, std) pair, and generally does not otherwise.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels, rewards, sim
from .sim import ScenarioConfig

VI_TOL = 1e-10
VI_MAX_ITER = 100_000
ARGMAX_TOL = 1e-9


class NonConvergenceError(RuntimeError):
    pass


class OracleError(ValueError):
    pass


@dataclass
class TabularMDP:
    P: np.ndarray  # (S, A, S)
    R: np.ndarray  # (S, A), expected immediate reward
    gamma: float
    terminal: np.ndarray = None

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64)
        self.R = np.asarray(self.R, dtype=np.float64)
        S, A = self.R.shape
        if self.P.shape != (S, A, S):
            raise OracleError(f"transition tensor shape {self.P.shape} does not match rewards {self.R.shape}")
        if np.any(self.P < 0) or np.max(np.abs(self.P.sum(axis=2) - 1.0)) > 1e-12:
            raise OracleError("transition rows must be probability vectors")
        if not 0 <= self.gamma < 1:
            raise OracleError("gamma must lie in [0, 1)")
        if self.terminal is None:
            self.terminal = np.zeros(S, dtype=bool)
        self.terminal = np.asarray(self.terminal, dtype=bool)

    @property
    def n_states(self):
        return self.R.shape[0]

    @property
    def n_actions(self):
        return self.R.shape[1]

    def with_rewards(self, R) -> "TabularMDP":
        return replace(self, R=np.asarray(R, dtype=np.float64))

    def to_json(self) -> dict:
        return {"P": self.P.tolist(), "R": self.R.tolist(), "gamma": self.gamma,
                "terminal": self.terminal.astype(int).tolist()}

    @classmethod
    def from_json(cls, d) -> "TabularMDP":
        return cls(np.array(d["P"]), np.array(d["R"]), float(d["gamma"]), np.array(d["terminal"], dtype=bool))


@dataclass
class QTable:
    Q: np.ndarray
    converged: bool
    iterations: int
    residual: float


def value_iteration(mdp: TabularMDP, tol: float = VI_TOL, max_iter: int = VI_MAX_ITER) -> QTable:
    Q, it, res, ok = kernels.value_iteration(mdp.P, mdp.R, mdp.terminal.astype(np.float64),
                                             mdp.gamma, tol, max_iter)
    if not ok:
        raise NonConvergenceError(f"value iteration hit {max_iter} iterations, residual {res:.3e}")
    return QTable(np.asarray(Q), True, int(it), float(res))


def argmax_sets(Q: np.ndarray, tol: float = ARGMAX_TOL) -> list[frozenset]:
    best = Q.max(axis=1, keepdims=True)
    return [frozenset(np.flatnonzero(row).tolist()) for row in (Q >= best - tol)]


def random_mdp(rng: np.random.Generator, max_states: int = 20, max_actions: int = 5) -> TabularMDP:
    S = int(rng.integers(2, max_states + 1))
    A = int(rng.integers(2, max_actions + 1))
    P = rng.dirichlet(np.full(S, 0.5), size=(S, A))
    P /= P.sum(axis=2, keepdims=True)
    R = rng.uniform(-1.0, 1.0, size=(S, A))
    gamma = float(rng.uniform(0.5, 0.95))
    return TabularMDP(P, R, gamma)


# ---------------------------------------------------------------------------
# potential-based shaping


def shaping_term(phi_s: np.ndarray, expected_phi_next: np.ndarray, gamma: float) -> np.ndarray:
    """F(s, a) = gamma * E[phi(s')] - phi(s), shaped ``(S, A)``."""
    return gamma * expected_phi_next - phi_s[:, None]


@dataclass
class InvarianceReport:
    agreement: np.ndarray  # per-state bool
    value_error: float
    q_original: QTable
    q_transformed: QTable
    details: dict = field(default_factory=dict)

    @property
    def agreement_rate(self) -> float:
        return float(np.mean(self.agreement))

    @property
    def all_agree(self) -> bool:
        return bool(np.all(self.agreement))


def shaping_invariance_check(mdp: TabularMDP, phi) -> InvarianceReport:
    """Solve the MDP with and without shaping and compare policies and values.

    Terminal states get ``phi = 0``. The expected theory is
    ``Q_shaped(s, a) = Q(s, a) - phi(s)``.
    """
    phi = np.where(mdp.terminal, 0.0, np.asarray(phi, dtype=np.float64))
    exp_next = mdp.P @ phi
    shaped = mdp.with_rewards(mdp.R + shaping_term(phi, exp_next, mdp.gamma))
    q = value_iteration(mdp)
    qs = value_iteration(shaped)
    sets_q, sets_s = argmax_sets(q.Q), argmax_sets(qs.Q)
    agreement = np.array([a == b for a, b in zip(sets_q, sets_s)])
    value_error = float(np.max(np.abs(qs.Q - (q.Q - phi[:, None]))))
    return InvarianceReport(agreement, value_error, q, qs)


def shaping_value_tolerance(mdp: TabularMDP, phi) -> float:
    scale = max(1.0, float(np.max(np.abs(phi))), float(np.max(np.abs(mdp.R))) / (1 - mdp.gamma))
    return 1e-8 * scale


# ---------------------------------------------------------------------------
# per-state normalization


def normalized_rewards(R: np.ndarray, eps0: float = rewards.EPSILON0) -> np.ndarray:
    r_n, _, _ = rewards.normalize_rewards(R, eps0)
    return r_n


def normalization_invariance_check(mdp: TabularMDP, eps0: float = rewards.EPSILON0) -> InvarianceReport:
    """Treat each state's row of ``R`` as its candidate rewards and z-score it.

    Reports per-state argmax agreement and, when every state shares one
    (mean, std), the deviation of ``Q_N`` from ``(Q_D - mean / (1 - gamma)) / (std + eps0)``.
    """
    R = mdp.R
    _, mu, sigma = rewards.normalize_rewards(R, eps0)
    q_d = value_iteration(mdp)
    q_n = value_iteration(mdp.with_rewards(normalized_rewards(R, eps0)))
    agreement = np.array([a == b for a, b in zip(argmax_sets(q_d.Q), argmax_sets(q_n.Q))])
    uniform = bool(np.ptp(mu) <= 1e-12 * max(1.0, np.max(np.abs(mu))) and np.ptp(sigma) <= 1e-12 * np.max(sigma))
    value_error = float("nan")
    if uniform and not np.any(mdp.terminal):
        m, s = float(mu.mean()), float(sigma.mean())
        predicted = (q_d.Q - m / (1 - mdp.gamma)) / (s + eps0)
        value_error = float(np.max(np.abs(q_n.Q - predicted)))
    return InvarianceReport(agreement, value_error, q_d, q_n,
                            {"uniform": uniform, "mu": mu, "sigma": sigma})


def uniform_regime_mdp(rng: np.random.Generator, max_states: int = 20, max_actions: int = 5) -> TabularMDP:
    """Random MDP whose every state has identical candidate-reward mean and std."""
    base = random_mdp(rng, max_states, max_actions)
    S, A = base.R.shape
    mu_bar = float(rng.uniform(-1.0, 1.0))
    sigma_bar = float(rng.uniform(0.5, 2.0))
    z = rng.standard_normal(A)
    z = (z - z.mean()) / z.std()
    R = np.stack([mu_bar + sigma_bar * rng.permutation(z) for _ in range(S)])
    return base.with_rewards(R)


GADGET_THRESHOLDS = (0.5, 3.0, 8.5, 20.0, 60.0, 200.0)


def sigma_spread_mdp(spread: float, gamma: float = 0.9, sigma_low: float = 0.01,
                     thresholds=GADGET_THRESHOLDS) -> TabularMDP:
    """Adversarial family for the state-dependent (mean, std) regime.

    Each gadget is a choice state and two absorbing states with candidate
    rewards ``+-sigma_low`` and ``+-spread * sigma_low``. The choice state pays
    a bonus ``b`` for heading to the low-spread state. Raw rewards prefer the
    high-spread branch once ``gamma * sigma_low * (spread - 1) / (1 - gamma) > b``;
    normalized rewards nearly equalize the two branches and keep the bonus,
    so disagreements grow with ``spread``.
    """
    g = len(thresholds)
    S = 3 * g
    P = np.zeros((S, 2, S))
    R = np.zeros((S, 2))
    unit = gamma * sigma_low / (1 - gamma)
    for i, c in enumerate(thresholds):
        choice, low, high = 3 * i, 3 * i + 1, 3 * i + 2
        P[choice, 0, low] = 1.0
        P[choice, 1, high] = 1.0
        R[choice] = (c * unit, 0.0)
        for st, sig in ((low, sigma_low), (high, spread * sigma_low)):
            P[st, :, st] = 1.0
            R[st] = (sig, -sig)
    return TabularMDP(P, R, gamma)


def spread_sweep(spreads=(1.0, 10.0, 100.0)) -> list[tuple[float, float]]:
    """Disagreement rate for each spread of the adversarial family."""
    out = []
    for s in spreads:
        rep = normalization_invariance_check(sigma_spread_mdp(s))
        out.append((float(s), 1.0 - rep.agreement_rate))
    return out


# ---------------------------------------------------------------------------
# bridge to the simulator


def discretized_pursuit_mdp(config: ScenarioConfig | None = None, n_bearing: int = 5, n_distance: int = 4,
                            samples_per_cell: int = 9, gamma: float = 0.9) -> TabularMDP:
    """Coarse bearing-error x range-error MDP for the direction task.

    Rewards are the simulator's dense rewards at each cell's centre state;
    transitions are the empirical cell-to-cell frequencies of one step from a
    grid of states inside the cell.
    """
    if n_bearing * n_distance > 20:
        raise OracleError(f"grid {n_bearing}x{n_distance} exceeds 20 states")
    config = config or ScenarioConfig(task="direction")
    config = replace(config, task="direction", target_speed=0.0, target_strategy=sim.TargetStrategy())
    d_star = config.target_distance_d_star
    b_edges = np.linspace(-np.pi, np.pi, n_bearing + 1)
    d_edges = np.linspace(-0.5 * d_star, 0.5 * d_star, n_distance + 1)
    A = len(sim.DIRECTION_ACTIONS)
    S = n_bearing * n_distance

    def states_for(bearings, derrs):
        dist = d_star + derrs
        return sim.SimBatch(
            px=np.zeros(len(bearings)), py=np.zeros(len(bearings)), heading=np.zeros(len(bearings)),
            speed=np.full(len(bearings), 2.0), tx=dist * np.cos(bearings), ty=dist * np.sin(bearings),
            theading=np.zeros(len(bearings)), tspeed=np.zeros(len(bearings)),
            d_star=np.full(len(bearings), d_star), step_index=np.zeros(len(bearings), dtype=np.int64))

    def cell_of(b: sim.SimBatch):
        g = sim.batch_geometry(b)
        bi = np.clip(np.searchsorted(b_edges, g["bearing"], side="right") - 1, 0, n_bearing - 1)
        di = np.clip(np.searchsorted(d_edges, g["distance_error"], side="right") - 1, 0, n_distance - 1)
        return bi * n_distance + di

    P = np.zeros((S, A, S))
    R = np.zeros((S, A))
    k = int(np.sqrt(samples_per_cell))
    for bi in range(n_bearing):
        for di in range(n_distance):
            s = bi * n_distance + di
            centre = states_for(np.array([(b_edges[bi] + b_edges[bi + 1]) / 2]),
                                np.array([(d_edges[di] + d_edges[di + 1]) / 2]))
            R[s] = rewards.batch_dense_rewards(centre, config, "direction")[0]
            fb = (np.arange(k) + 0.5) / k
            bb, dd = np.meshgrid(b_edges[bi] + fb * (b_edges[bi + 1] - b_edges[bi]),
                                 d_edges[di] + fb * (d_edges[di + 1] - d_edges[di]))
            grid = states_for(bb.ravel(), dd.ravel())
            for a in range(A):
                nxt = sim.batch_step(grid, np.full(grid.n, a), config)
                counts = np.bincount(cell_of(nxt), minlength=S)
                P[s, a] = counts / counts.sum()
    return TabularMDP(P, R, gamma)


# ---------------------------------------------------------------------------
# battery


@dataclass
class BatteryResult:
    rows: list  # (instance id, regime, agreement rate, value error)
    failures: list  # serializable failing instances
    sweep: list
    monotone: bool

    @property
    def passed(self) -> bool:
        return not self.failures and self.monotone


def run_battery(seed: int = 0, n_instances: int = 100) -> BatteryResult:
    """Shaping (random potentials) and uniform-regime normalization batteries plus the spread sweep."""
    rng = np.random.default_rng(seed)
    rows, failures = [], []
    for i in range(n_instances):
        mdp = random_mdp(rng)
        phi = rng.normal(0.0, 10.0, size=mdp.n_states)
        if i % 10 == 9:
            phi = np.full(mdp.n_states, 1e6)
        rep = shaping_invariance_check(mdp, phi)
        tol = shaping_value_tolerance(mdp, phi)
        rows.append((f"shaping-{i}", "shaping", rep.agreement_rate, rep.value_error))
        if not rep.all_agree or rep.value_error > tol:
            failures.append({"id": f"shaping-{i}", "kind": "shaping", "mdp": mdp.to_json(),
                             "phi": phi.tolist(), "agreement_rate": rep.agreement_rate,
                             "value_error": rep.value_error, "tolerance": tol})
    for i in range(n_instances):
        mdp = uniform_regime_mdp(rng)
        rep = normalization_invariance_check(mdp)
        rows.append((f"uniform-{i}", "uniform", rep.agreement_rate, rep.value_error))
        if not rep.all_agree or not rep.value_error <= 1e-8:
            failures.append({"id": f"uniform-{i}", "kind": "uniform", "mdp": mdp.to_json(),
                             "agreement_rate": rep.agreement_rate, "value_error": rep.value_error,
                             "tolerance": 1e-8})
    sweep = spread_sweep()
    for s, rate in sweep:
        rows.append((f"spread-{s:g}", "general", 1.0 - rate, float("nan")))
    rates = [r for _, r in sweep]
    monotone = all(b >= a for a, b in zip(rates, rates[1:]))
    return BatteryResult(rows, failures, sweep, monotone)


def replay_failure(record: dict) -> bool:
    """Re-run a serialized failing instance; True if it still fails."""
    mdp = TabularMDP.from_json(record["mdp"])
    if record["kind"] == "shaping":
        phi = np.array(record["phi"])
        rep = shaping_invariance_check(mdp, phi)
        return not rep.all_agree or rep.value_error > record["tolerance"]
    rep = normalization_invariance_check(mdp)
    return not rep.all_agree or not rep.value_error <= record["tolerance"]


def dump_failures(path, failures) -> None:
    with open(path, "w") as fh:
        json.dump(failures, fh)
