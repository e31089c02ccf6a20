"""Rollouts, advantage estimation, the combined clipped-PPO loss and updates.

Loss per minibatch::

    L = -mean(min(rho * A, clip(rho, 1 - eps, 1 + eps) * A))
        - alpha_e * mean(entropy of behaviour policy)
        + alpha_c * mean(KL(joint top-k || full top-k))

``rho`` is taken on the joint (behaviour) policy. The top-k target is frozen
when the rollout is collected, so no gradient reaches the sub-task branch
through it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import kernels, rewards, sim
from .observation import batch_policy_inputs, render_text
from .policy import NumericalError, PolicyParams, batch_sample, log_softmax, scorer, topk_order
from .sim import ConfigError, ScenarioConfig, SimBatch, from_batch

N_DIST = len(sim.DISTANCE_ACTIONS)


@dataclass(frozen=True)
class TrainerConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_epsilon: float = 0.2
    alpha_entropy: float = 0.01
    alpha_consistency: float = 0.1
    k_topk: int = 5
    rollout_length: int = 2048
    minibatch: int = 256
    ppo_epochs: int = 4
    step_size: float = 3e-4
    adam_betas: tuple[float, float] = (0.9, 0.999)
    seeds: tuple[int, ...] = (0,)
    n_envs: int = 16
    n_updates: int = 500
    use_nar: bool = True
    normalize_advantages: bool = False
    epsilon0: float = rewards.EPSILON0
    init_scale: float = 0.1
    critic_step_size: float = 1e-3
    checkpoint_every: int = 100
    log_steps_every: int = 50

    def __post_init__(self):
        if not 0 <= self.gamma < 1:
            raise ConfigError("gamma", "must lie in [0, 1)")
        if not 0 <= self.gae_lambda <= 1:
            raise ConfigError("gae_lambda", "must lie in [0, 1]")
        if not self.clip_epsilon > 0:
            raise ConfigError("clip_epsilon", "must be > 0")
        if self.k_topk < 1 or self.k_topk > len(sim.action_space("integrated")):
            raise ConfigError("k_topk", "must lie in [1, 15]")
        if self.n_envs < 1 or self.rollout_length % self.n_envs:
            raise ConfigError("rollout_length", "must be a positive multiple of n_envs")
        if self.minibatch < 1 or self.minibatch > self.rollout_length:
            raise ConfigError("minibatch", "must lie in [1, rollout_length]")
        for name in ("ppo_epochs", "n_updates"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        if not self.step_size > 0:
            raise ConfigError("step_size", "must be > 0")
        if len(self.adam_betas) != 2 or not all(0 <= b < 1 for b in self.adam_betas):
            raise ConfigError("adam_betas", "need two decay rates in [0, 1)")
        if not self.epsilon0 > 0:
            raise ConfigError("epsilon0", "must be > 0")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainerConfig":
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"trainer.{key}", "unknown trainer key")
        kw = dict(data)
        for key in ("adam_betas", "seeds"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["adam_betas"] = list(self.adam_betas)
        out["seeds"] = list(self.seeds)
        return out


# ---------------------------------------------------------------------------
# critic


class Critic:
    """Tanh MLP state-value estimate trained by squared error on returns."""

    def __init__(self, rng: np.random.Generator, n_in: int = 13, hidden: int = 32):
        self.n_in, self.hidden = n_in, hidden
        self.vector = np.zeros(n_in * hidden + hidden + hidden + 1)
        self._W1[...] = rng.standard_normal((n_in, hidden)) / math.sqrt(n_in)

    @property
    def _W1(self):
        return self.vector[: self.n_in * self.hidden].reshape(self.n_in, self.hidden)

    def _split(self, vec):
        a = self.n_in * self.hidden
        return (vec[:a].reshape(self.n_in, self.hidden), vec[a:a + self.hidden],
                vec[a + self.hidden:a + 2 * self.hidden], vec[-1:])

    def __call__(self, X):
        W1, b1, w2, b2 = self._split(self.vector)
        return np.tanh(X @ W1 + b1) @ w2 + b2[0]

    def loss_and_grad(self, X, targets):
        W1, b1, w2, b2 = self._split(self.vector)
        H = np.tanh(X @ W1 + b1)
        v = H @ w2 + b2[0]
        diff = v - targets
        n = X.shape[0]
        g_v = diff / n
        grad = np.zeros_like(self.vector)
        gW1, gb1, gw2, gb2 = self._split(grad)
        gw2[...] = H.T @ g_v
        gb2[...] = g_v.sum()
        dA = np.outer(g_v, w2) * (1 - H * H)
        gW1[...] = X.T @ dA
        gb1[...] = dA.sum(axis=0)
        return 0.5 * float(np.mean(diff * diff)), grad


# ---------------------------------------------------------------------------
# adaptive-moment optimizer


class Adam:
    def __init__(self, size: int, step_size: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.step_size = step_size
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def state(self):
        return self.m.copy(), self.v.copy(), self.t

    def update(self, vector: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """Return the updated parameter vector. Non-finite gradients abort."""
        if grad.shape != vector.shape:
            raise ValueError("gradient shape does not match parameters")
        if not np.all(np.isfinite(grad)):
            raise NumericalError("non-finite gradient; update aborted")
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        m_hat = self.m / (1 - self.b1 ** self.t)
        v_hat = self.v / (1 - self.b2 ** self.t)
        return vector - self.step_size * m_hat / (np.sqrt(v_hat) + self.eps)


def update(params: PolicyParams, gradient: np.ndarray, opt: Adam) -> PolicyParams:
    return PolicyParams(opt.update(params.vector, gradient), params.n_in, params.hidden, params.vocab)


# ---------------------------------------------------------------------------
# advantages


def compute_gae(rewards_, values, dones, gamma: float, lam: float, normalize: bool = False):
    """Advantages and returns for a ``(T, N)`` rollout; ``values`` is ``(T+1, N)``."""
    rewards_ = np.asarray(rewards_, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if rewards_.ndim == 1:
        adv, ret = compute_gae(rewards_[:, None], values[:, None],
                               np.asarray(dones)[:, None], gamma, lam, normalize)
        return adv[:, 0], ret[:, 0]
    adv = kernels.gae(rewards_, values, np.asarray(dones, dtype=np.float64), gamma, lam)
    ret = adv + values[:-1]
    if normalize:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return adv, ret


# ---------------------------------------------------------------------------
# behaviour policy


def behaviour_logits(params: PolicyParams, views: dict, task: str):
    """Log-probabilities of the behaviour policy's factors.

    Returns a list of ``(log_probs, scorer_cache, view_task)`` factors: one for
    a sub-task, two (direction, distance) for the integrated task.
    """
    tasks = ("direction", "distance") if task == "integrated" else (task,)
    out = []
    for t in tasks:
        s, _, cache = scorer(t).forward(params, views[t])
        out.append((log_softmax(s), cache, t))
    return out


def joint_topk_target(lp_dir: np.ndarray, lp_dist: np.ndarray, k: int):
    """Top-k composite indices and renormalized joint log-probabilities."""
    joint = (lp_dir[:, :, None] + lp_dist[:, None, :]).reshape(lp_dir.shape[0], -1)
    idx = topk_order(joint, k)
    sel = np.take_along_axis(joint, idx, axis=1)
    return idx, log_softmax(sel)


# ---------------------------------------------------------------------------
# environments and rollouts


class VecEnv:
    """``n`` independent simulators with per-env generators and auto-reset."""

    def __init__(self, config: ScenarioConfig, n: int, seed: int):
        self.config = config
        self.rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]
        parts = [sim.spawn(config, r, 1) for r in self.rngs]
        self.colors = [sim.draw_color(config, r) for r in self.rngs]
        self.batch = SimBatch(**{f.name: np.concatenate([getattr(p, f.name) for p in parts])
                                 for f in fields(SimBatch)})

    @property
    def n(self):
        return self.batch.n

    def step(self, actions) -> np.ndarray:
        self.batch = sim.batch_step(self.batch, actions, self.config)
        done = self.batch.step_index >= self.config.episode_length
        for i in np.flatnonzero(done):
            self.batch.put(i, sim.spawn(self.config, self.rngs[i], 1))
            self.colors[i] = sim.draw_color(self.config, self.rngs[i])
        return done


@dataclass
class Rollout:
    task: str
    views: dict  # view task -> (T, N, 13)
    actions: np.ndarray
    old_logp: np.ndarray
    rewards: np.ndarray
    values: np.ndarray  # (T + 1, N)
    dones: np.ndarray
    r_d: np.ndarray
    r_n: np.ndarray
    e_dir: np.ndarray
    d_err: np.ndarray
    target_idx: np.ndarray | None = None
    target_logp: np.ndarray | None = None
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None
    log_records: list = field(default_factory=list)

    def __len__(self):
        return self.actions.size


def collect_rollout(env: VecEnv, params: PolicyParams, critic: Critic, cfg: TrainerConfig,
                    rng: np.random.Generator, log_env: int | None = None) -> Rollout:
    """Step every env ``rollout_length / n_envs`` times under the behaviour policy.

    The stored step reward is the chosen candidate's normalized reward, or its
    raw dense reward when NAR is disabled.
    """
    task = env.config.task
    T, N = cfg.rollout_length // env.n, env.n
    view_tasks = ("direction", "distance", "integrated") if task == "integrated" else (task,)
    views = {t: np.zeros((T, N, 13)) for t in view_tasks}
    n_act = len(sim.action_space(task))
    actions = np.zeros((T, N), dtype=np.int64)
    old_logp = np.zeros((T, N))
    rew = np.zeros((T, N))
    values = np.zeros((T + 1, N))
    dones = np.zeros((T, N))
    r_d_all = np.zeros((T, N, n_act))
    r_n_all = np.zeros((T, N, n_act))
    e_dir = np.zeros((T, N))
    d_err = np.zeros((T, N))
    k = cfg.k_topk
    t_idx = np.zeros((T, N, k), dtype=np.int64) if task == "integrated" else None
    t_lp = np.zeros((T, N, k)) if task == "integrated" else None
    records = []
    for t in range(T):
        b = env.batch
        geom = sim.batch_geometry(b)
        v_all = batch_policy_inputs(b, geom)
        for vt in view_tasks:
            views[vt][t] = v_all[vt]
        r_d = rewards.batch_dense_rewards(b, env.config)
        rewards.check_variance_bound(r_d)
        r_n, _, _ = rewards.normalize_rewards(r_d, cfg.epsilon0)
        factors = behaviour_logits(params, v_all, task)
        if task == "integrated":
            lp1, lp2 = factors[0][0], factors[1][0]
            a1 = batch_sample(np.exp(lp1), rng)
            a2 = batch_sample(np.exp(lp2), rng)
            a = a1 * N_DIST + a2
            lp = lp1[np.arange(N), a1] + lp2[np.arange(N), a2]
            t_idx[t], t_lp[t] = joint_topk_target(lp1, lp2, k)
        else:
            lp_all = factors[0][0]
            a = batch_sample(np.exp(lp_all), rng)
            lp = lp_all[np.arange(N), a]
        actions[t] = a
        old_logp[t] = lp
        chosen = r_n if cfg.use_nar else r_d
        rew[t] = chosen[np.arange(N), a]
        values[t] = critic(v_all[task])
        r_d_all[t], r_n_all[t] = r_d, r_n
        e_dir[t] = geom["e_dir"]
        d_err[t] = geom["distance_error"]
        if log_env is not None:
            i = log_env
            st = from_batch(b, i, color=env.colors[i])
            records.append({
                "step": int(b.step_index[i]),
                "obs_text": render_text(st, task=task),
                "candidates": list(sim.action_space(task)),
                "r_d": r_d[i].tolist(),
                "r_n": r_n[i].tolist(),
                "mu": float(r_d[i].mean()),
                "sigma": float(r_d[i].std()),
                "diameter": float(r_d[i].max() - r_d[i].min()),
                "chosen": sim.action_space(task)[a[i]],
                "reward": float(rew[t, i]),
                "log_prob": float(lp[i]),
                "e_dir": float(geom["e_dir"][i]),
                "d_err": float(geom["distance_error"][i]),
            })
        dones[t] = env.step(a)
    values[T] = critic(batch_policy_inputs(env.batch)[task])
    return Rollout(task, views, actions, old_logp, rew, values, dones, r_d_all, r_n_all,
                   e_dir, d_err, t_idx, t_lp, log_records=records)


# ---------------------------------------------------------------------------
# loss


@dataclass
class Minibatch:
    task: str
    views: dict  # view task -> (B, 13)
    actions: np.ndarray
    old_logp: np.ndarray
    advantages: np.ndarray
    target_idx: np.ndarray | None = None
    target_logp: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __len__(self):
        return self.actions.shape[0]


def minibatch_from_rollout(ro: Rollout, idx: np.ndarray) -> Minibatch:
    flat = lambda x: x.reshape(-1, *x.shape[2:])[idx]
    return Minibatch(
        task=ro.task,
        views={k: flat(v) for k, v in ro.views.items()},
        actions=flat(ro.actions),
        old_logp=flat(ro.old_logp),
        advantages=flat(ro.advantages),
        target_idx=None if ro.target_idx is None else flat(ro.target_idx),
        target_logp=None if ro.target_logp is None else flat(ro.target_logp),
        returns=None if ro.returns is None else flat(ro.returns),
    )


@dataclass
class LossResult:
    loss: float
    grad: np.ndarray
    terms: dict


def _entropy_and_grad(lp: np.ndarray):
    p = np.exp(lp)
    H = -(p * lp).sum(axis=-1)
    dH = -p * (lp + H[:, None])
    return H, dH


def total_loss(mb: Minibatch, params: PolicyParams, cfg: TrainerConfig,
               include=("ppo", "entropy", "consistency")) -> LossResult:
    """Combined loss and its exact gradient with respect to ``params.vector``."""
    B = len(mb)
    if B == 0:
        raise ValueError("empty minibatch")
    rows = np.arange(B)
    factors = behaviour_logits(params, mb.views, mb.task)
    if mb.task == "integrated":
        sub_actions = (mb.actions // N_DIST, mb.actions % N_DIST)
    else:
        sub_actions = (mb.actions,)
    logp = sum(f[0][rows, a] for f, a in zip(factors, sub_actions))
    ratio = np.exp(logp - mb.old_logp)
    A = mb.advantages
    eps = cfg.clip_epsilon
    surr1 = ratio * A
    surr2 = np.clip(ratio, 1 - eps, 1 + eps) * A
    l_ppo = -float(np.mean(np.minimum(surr1, surr2)))
    g_logp = np.where(surr1 <= surr2, -surr1, 0.0) / B
    if "ppo" not in include:
        g_logp = np.zeros(B)

    grad = np.zeros_like(params.vector)
    entropy = np.zeros(B)
    for (lp, cache, vt), a in zip(factors, sub_actions):
        p = np.exp(lp)
        onehot = np.zeros_like(lp)
        onehot[rows, a] = 1.0
        g_s = g_logp[:, None] * (onehot - p)
        H, dH = _entropy_and_grad(lp)
        entropy += H
        if "entropy" in include:
            g_s = g_s - cfg.alpha_entropy * dH / B
        grad += scorer(vt).backward(params, cache, g_s)
    l_ent = float(np.mean(entropy))

    l_con = 0.0
    if mb.task == "integrated" and mb.target_idx is not None:
        sc = scorer("integrated")
        s_full, _, cache = sc.forward(params, mb.views["integrated"])
        s_k = np.take_along_axis(s_full, mb.target_idx, axis=1)
        lq = log_softmax(s_k)
        p_t = np.exp(mb.target_logp)
        kl = np.sum(p_t * (mb.target_logp - lq), axis=1)
        l_con = float(np.mean(kl))
        if "consistency" in include and cfg.alpha_consistency != 0.0:
            g_k = cfg.alpha_consistency * (np.exp(lq) - p_t) / B
            g_full = np.zeros_like(s_full)
            np.put_along_axis(g_full, mb.target_idx, g_k, axis=1)
            grad += sc.backward(params, cache, g_full)

    terms = {"l_ppo": l_ppo, "l_entropy": l_ent, "l_consistency": l_con}
    for name, val in terms.items():
        if not math.isfinite(val):
            raise NumericalError(f"non-finite loss term {name}")
    loss = 0.0
    if "ppo" in include:
        loss += l_ppo
    if "entropy" in include:
        loss -= cfg.alpha_entropy * l_ent
    if "consistency" in include:
        loss += cfg.alpha_consistency * l_con
    return LossResult(loss, grad, terms)


def gradient_check(params: PolicyParams, mb: Minibatch, cfg: TrainerConfig, n_params: int = 200,
                   h: float = 1e-5, rng: np.random.Generator | None = None,
                   include=("ppo", "entropy", "consistency")) -> float:
    """Max relative error of central differences against the analytic gradient."""
    rng = rng or np.random.default_rng(0)
    g = total_loss(mb, params, cfg, include).grad
    idx = rng.choice(params.parameter_count, size=min(n_params, params.parameter_count), replace=False)
    worst = 0.0
    q = params.copy()
    for i in idx:
        orig = q.vector[i]
        q.vector[i] = orig + h
        lp = total_loss(mb, q, cfg, include).loss
        q.vector[i] = orig - h
        lm = total_loss(mb, q, cfg, include).loss
        q.vector[i] = orig
        fd = (lp - lm) / (2 * h)
        worst = max(worst, abs(fd - g[i]) / max(abs(g[i]), 1e-8))
    return worst


def candidate_logprob_grads(params: PolicyParams, x: np.ndarray, task: str) -> np.ndarray:
    """Rows are grad log pi(a_i | s) for every candidate ``i`` at one state."""
    sc = scorer(task)
    s, _, cache = sc.forward(params, x[None])
    p = np.exp(log_softmax(s))
    A = s.shape[1]
    out = np.zeros((A, params.parameter_count))
    for i in range(A):
        g_s = -p.copy()
        g_s[0, i] += 1.0
        out[i] = sc.backward(params, cache, g_s)
    return out


def estimator_linearity_check(params: PolicyParams, X: np.ndarray, r_d: np.ndarray, task: str,
                              eps0: float = rewards.EPSILON0) -> dict:
    """Check g(R_N) = (g(R_D) - mu * sum_i grad log pi_i) / (sigma + eps0) per state.

    ``g(R) = sum_i R_i grad log pi(a_i | s)`` over the candidate set.
    """
    residual = 0.0
    ratios = []
    for x, rd in zip(X, r_d):
        J = candidate_logprob_grads(params, x, task)
        r_n, mu, sigma = rewards.normalize_rewards(rd, eps0)
        g_n = r_n @ J
        g_d = rd @ J
        rebuilt = (g_d - mu * J.sum(axis=0)) / (sigma + eps0)
        scale = max(1.0, float(np.max(np.abs(g_n))))
        residual = max(residual, float(np.max(np.abs(g_n - rebuilt))) / scale)
        centered = (rd - mu) @ J
        nc = np.linalg.norm(centered)
        if nc > 0:
            ratios.append((np.linalg.norm(g_n) / nc, 1.0 / (sigma + eps0)))
    return {"residual": residual, "ratios": ratios}


# ---------------------------------------------------------------------------
# training loop


@dataclass
class UpdateRecord:
    update: int
    mean_reward: float
    l_ppo: float
    l_entropy: float
    l_consistency: float
    grad_norm: float


@dataclass
class TrainResult:
    params: PolicyParams
    critic: Critic
    records: list
    rollout_logs: list


def ppo_update(ro: Rollout, params: PolicyParams, critic: Critic, opt: Adam, copt: Adam,
               cfg: TrainerConfig, rng: np.random.Generator):
    """PPO epochs over one rollout. Returns new params and averaged loss terms."""
    n = len(ro)
    sums = {"l_ppo": 0.0, "l_entropy": 0.0, "l_consistency": 0.0, "grad_norm": 0.0}
    count = 0
    for _ in range(cfg.ppo_epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.minibatch):
            mb = minibatch_from_rollout(ro, perm[start:start + cfg.minibatch])
            res = total_loss(mb, params, cfg)
            params = update(params, res.grad, opt)
            _, cg = critic.loss_and_grad(mb.views[ro.task], mb.returns)
            critic.vector = copt.update(critic.vector, cg)
            for key in ("l_ppo", "l_entropy", "l_consistency"):
                sums[key] += res.terms[key]
            sums["grad_norm"] += float(np.linalg.norm(res.grad))
            count += 1
    return params, {k: v / count for k, v in sums.items()}


def train(scenario: ScenarioConfig, cfg: TrainerConfig, seed: int, on_update=None,
          params: PolicyParams | None = None) -> TrainResult:
    """Run ``cfg.n_updates`` PPO updates on ``scenario`` from ``seed``."""
    root = np.random.SeedSequence(seed)
    init_ss, env_ss, act_ss, perm_ss = root.spawn(4)
    init_rng = np.random.default_rng(init_ss)
    params = params.copy() if params is not None else PolicyParams.init(init_rng, cfg.init_scale)
    critic = Critic(init_rng)
    env = VecEnv(scenario, cfg.n_envs, int(env_ss.generate_state(1)[0]))
    act_rng = np.random.default_rng(act_ss)
    perm_rng = np.random.default_rng(perm_ss)
    opt = Adam(params.parameter_count, cfg.step_size, cfg.adam_betas)
    copt = Adam(critic.vector.shape[0], cfg.critic_step_size, cfg.adam_betas)
    records, logs = [], []
    for u in range(cfg.n_updates):
        log_env = 0 if cfg.log_steps_every and u % cfg.log_steps_every == 0 else None
        ro = collect_rollout(env, params, critic, cfg, act_rng, log_env=log_env)
        ro.advantages, ro.returns = compute_gae(ro.rewards, ro.values, ro.dones, cfg.gamma,
                                                cfg.gae_lambda, cfg.normalize_advantages)
        params, terms = ppo_update(ro, params, critic, opt, copt, cfg, perm_rng)
        rec = UpdateRecord(u, float(ro.rewards.mean()), terms["l_ppo"], terms["l_entropy"],
                           terms["l_consistency"], terms["grad_norm"])
        records.append(rec)
        for r in ro.log_records:
            r["update"] = u
        logs.extend(ro.log_records)
        if on_update is not None:
            on_update(u, params, critic, rec)
    return TrainResult(params, critic, records, logs)
