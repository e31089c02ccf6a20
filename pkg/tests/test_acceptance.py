"""Acceptance gate: one test per criterion, each at its stated tolerance.

A PASS/FAIL line per criterion is printed in the terminal summary.
"""
import time
from dataclasses import replace

import numpy as np
import pytest

from conftest import record_criterion
from narcp import cli, harness, optim, oracle, policy, rewards, sim
from narcp.policy import PolicyParams
from narcp.sim import ScenarioConfig, TargetStrategy

DIRECTION = ScenarioConfig(task="direction")
INTEGRATED = ScenarioConfig(task="integrated")
N_SEEDS_NAR = 5
N_UPDATES_NAR = 500
CP_SEEDS = (0, 1, 2)
CP_UPDATES = 200
EVAL_EPISODES = 32


def random_reward_batches(rng, n):
    """Candidate-reward batches spanning the scales the simulator produces and beyond."""
    for _ in range(n):
        k = int(rng.choice([3, 5, 15]))
        scale = 10 ** rng.uniform(-5, 0)
        yield rng.normal(rng.normal(0, scale), scale, size=k)


def test_c01_normalization_identities():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    n = 10_000
    var_ok = var_applicable = mean_ok = argmax_ok = 0
    worst_var = 1.0
    for r in random_reward_batches(rng, n):
        r_n, _, sigma = rewards.normalize_rewards(r)
        if sigma > 10 * rewards.EPSILON0:
            var_applicable += 1
            v = r_n.var()
            worst_var = min(worst_var, v)
            var_ok += 1 - 1e-6 <= v <= 1
        mean_ok += abs(r_n.mean()) <= 1e-12
        argmax_ok += int(np.argmax(r_n)) == int(np.argmax(r))
    elapsed = time.perf_counter() - t0
    passed = var_ok == var_applicable and mean_ok == n and argmax_ok == n and elapsed < 10
    record_criterion(1, passed, f"Var(R_N) in [1-1e-6,1]: {var_ok}/{var_applicable} (min {worst_var:.6f}); "
                                f"|mean|<=1e-12: {mean_ok}/{n}; argmax kept: {argmax_ok}/{n}; {elapsed:.1f}s")
    assert mean_ok == n and argmax_ok == n and elapsed < 10
    assert var_ok == var_applicable, (
        f"Var(R_N) = (sigma/(sigma+eps0))^2 falls below 1-1e-6 for sigma < ~20; min observed {worst_var}")


def test_c02_variance_bound():
    checked = 0
    scenarios = [replace(DIRECTION, task=t) for t in sim.TASKS] + [
        replace(INTEGRATED, randomize_distance=True, target_strategy=TargetStrategy("circular"))]
    for scen in scenarios:
        for controller in ("scripted", "random"):
            _, recs = harness.evaluate(None, scen, 8, controller=controller)
            batch = np.array([r["r_d"] for r in recs])
            rewards.check_variance_bound(batch)
            checked += len(batch)
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        a, b = rng.normal(size=2) * 10 ** rng.uniform(-4, 0)
        r = np.array([a, b])
        worst = max(worst, abs(r.var() - (a - b) ** 2 / 4) / ((a - b) ** 2 / 4))
    passed = worst <= 1e-12
    record_criterion(2, passed, f"{checked} rollout batches within Var <= D^2/4 (also asserted inline in every "
                                f"training/eval step); two-point tightness rel err {worst:.1e}")
    assert passed


def test_c03_shaping_invariance():
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    agree = 0
    worst_res = 0.0
    for i in range(100):
        m = oracle.random_mdp(rng)
        phi = rng.normal(0, 10, m.n_states)
        rep = oracle.shaping_invariance_check(m, phi)
        agree += rep.all_agree
        worst_res = max(worst_res, rep.q_original.residual, rep.q_transformed.residual)
    elapsed = time.perf_counter() - t0
    passed = agree == 100 and worst_res <= 1e-10 and elapsed < 60
    record_criterion(3, passed, f"argmax sets identical {agree}/100; max VI residual {worst_res:.1e}; {elapsed:.2f}s")
    assert passed


def test_c04_normalization_invariance():
    rng = np.random.default_rng(4)
    t0 = time.perf_counter()
    agree = 0
    worst = 0.0
    for _ in range(100):
        rep = oracle.normalization_invariance_check(oracle.uniform_regime_mdp(rng))
        agree += rep.all_agree
        worst = max(worst, rep.value_error)
    sweep = oracle.spread_sweep()
    rates = [r for _, r in sweep]
    monotone = all(b >= a for a, b in zip(rates, rates[1:]))
    elapsed = time.perf_counter() - t0
    passed = agree == 100 and worst <= 1e-8 and monotone and elapsed < 60
    record_criterion(4, passed, f"uniform regime {agree}/100, max |Q_N - affine(Q_D)| {worst:.1e}; "
                                f"general-regime disagreement {[round(r, 4) for r in rates]} over spreads "
                                f"{[s for s, _ in sweep]}; {elapsed:.2f}s")
    assert passed


def test_c05_gradient_fidelity():
    t0 = time.perf_counter()
    cfg = optim.TrainerConfig(rollout_length=128, n_envs=8, minibatch=32)
    worst = 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        params = PolicyParams.init(rng, 1.0)
        env = optim.VecEnv(INTEGRATED, cfg.n_envs, seed)
        ro = optim.collect_rollout(env, params, optim.Critic(rng), cfg, rng)
        ro.advantages, ro.returns = optim.compute_gae(ro.rewards, ro.values, ro.dones, cfg.gamma, cfg.gae_lambda)
        mb = optim.minibatch_from_rollout(ro, rng.choice(len(ro), cfg.minibatch, replace=False))
        mb.old_logp = mb.old_logp + rng.normal(0, 0.1, len(mb))  # ratios away from 1
        worst = max(worst, optim.gradient_check(params, mb, cfg, n_params=200, rng=rng))
    rng = np.random.default_rng(11)
    lin = 0.0
    for task in sim.TASKS:
        params = PolicyParams.init(rng, 1.0)
        b = sim.spawn(replace(DIRECTION, task=task), rng, 8)
        X = optim.batch_policy_inputs(b)[task]
        lin = max(lin, optim.estimator_linearity_check(params, X, rewards.batch_dense_rewards(
            b, replace(DIRECTION, task=task)), task)["residual"])
    elapsed = time.perf_counter() - t0
    passed = worst <= 1e-4 and lin <= 1e-9 and elapsed < 30
    record_criterion(5, passed, f"FD max rel err {worst:.2e} (200 params x 5 minibatches); "
                                f"linearity residual {lin:.1e}; {elapsed:.1f}s")
    assert passed


def test_c06_consistency_distillation():
    t0 = time.perf_counter()
    cfg = optim.TrainerConfig(rollout_length=256, n_envs=16, minibatch=256, alpha_consistency=1.0, step_size=0.01)
    rng = np.random.default_rng(0)
    params = PolicyParams.init(rng, 1.0)
    env = optim.VecEnv(INTEGRATED, cfg.n_envs, 0)
    ro = optim.collect_rollout(env, params, optim.Critic(rng), cfg, rng)
    ro.advantages = np.zeros_like(ro.rewards)
    mb = optim.minibatch_from_rollout(ro, np.arange(len(ro)))  # top-k targets frozen at collection
    opt = optim.Adam(params.parameter_count, cfg.step_size)
    history = []
    for _ in range(200):
        res = optim.total_loss(mb, params, cfg, include=("consistency",))
        history.append(res.terms["l_consistency"])
        params = optim.update(params, res.grad, opt)
    final = optim.total_loss(mb, params, cfg, include=("consistency",)).terms["l_consistency"]
    nonneg = min(history + [final]) >= 0
    p = rng.dirichlet(np.ones(15), size=1000)
    self_kl = float(np.max(np.abs(policy.kl_divergence(np.log(p), np.log(p)))))
    elapsed = time.perf_counter() - t0
    passed = final <= 1e-6 and nonneg and self_kl <= 1e-12 and elapsed < 10
    record_criterion(6, passed, f"L_consistency {history[0]:.3e} -> {final:.3e} in 200 updates; KL>=0 "
                                f"{nonneg}; max |KL(p||p)| {self_kl:.0e}; {elapsed:.1f}s")
    assert passed


@pytest.fixture(scope="module")
def nar_runs():
    """Direction training, matched seeds, with and without reward normalization."""
    out = {}
    for use_nar in (True, False):
        cfg = optim.TrainerConfig(n_updates=N_UPDATES_NAR, use_nar=use_nar, log_steps_every=0)
        t0 = time.perf_counter()
        runs = []
        for seed in range(N_SEEDS_NAR):
            res = optim.train(DIRECTION, cfg, seed)
            rep, _ = harness.evaluate(res.params, DIRECTION, EVAL_EPISODES, seed=100 + seed, log_steps=False)
            runs.append((rep, [r.grad_norm for r in res.records]))
        out[use_nar] = (runs, time.perf_counter() - t0)
    return out


@pytest.mark.slow
def test_c07_nar_ablation(nar_runs):
    (nar, t_nar), (raw, t_raw) = nar_runs[True], nar_runs[False]
    g_nar = [r.general_rate for r, _ in nar]
    g_raw = [r.general_rate for r, _ in raw]
    p_nar = [r.precise_rate for r, _ in nar]
    p_raw = [r.precise_rate for r, _ in raw]
    m_nar, m_raw = float(np.median(g_nar)), float(np.median(g_raw))
    passed = m_nar - m_raw >= 0.20 and m_nar >= 0.70 and t_nar <= 900 and t_raw <= 900
    record_criterion(7, passed, f"median general_rate NAR {m_nar:.3f} vs raw {m_raw:.3f} (gap "
                                f"{100 * (m_nar - m_raw):.1f}pp, need >=20); median precise_rate NAR "
                                f"{np.median(p_nar):.3f} vs raw {np.median(p_raw):.3f}; per-seed general NAR "
                                f"{[round(g, 3) for g in g_nar]} raw {[round(g, 3) for g in g_raw]}; arm times "
                                f"{t_nar:.0f}s/{t_raw:.0f}s")
    assert m_nar >= 0.70 and t_nar <= 900 and t_raw <= 900
    assert m_nar - m_raw >= 0.20, f"NAR {g_nar} vs raw {g_raw}"


@pytest.mark.slow
def test_c08_cp_ablation():
    bias = {}
    times = {}
    for alpha_c in (0.1, 0.0):
        cfg = optim.TrainerConfig(n_updates=CP_UPDATES, alpha_consistency=alpha_c, log_steps_every=0)
        t0 = time.perf_counter()
        vals = []
        for seed in CP_SEEDS:
            res = optim.train(INTEGRATED, cfg, seed)
            rep, _ = harness.evaluate(res.params, INTEGRATED, EVAL_EPISODES, seed=100 + seed, log_steps=False)
            vals.append(rep.policy_bias)
        bias[alpha_c] = vals
        times[alpha_c] = time.perf_counter() - t0
    with_cp, without = float(np.median(bias[0.1])), float(np.median(bias[0.0]))
    passed = with_cp <= without / 10 and max(times.values()) <= 1200
    record_criterion(8, passed, f"median policy bias with CP {with_cp:.4g} vs without {without:.4g} "
                                f"(ratio {with_cp / without:.3f}, need <=0.1); {len(CP_SEEDS)} seeds x "
                                f"{CP_UPDATES} updates; per-seed {[round(b, 4) for b in bias[0.1]]} vs "
                                f"{[round(b, 4) for b in bias[0.0]]}; arm times {times[0.1]:.0f}s/{times[0.0]:.0f}s")
    assert passed


@pytest.mark.slow
def test_c09_gradient_norm_ordering(nar_runs):
    wins = total = 0
    for (_, g_n), (_, g_r) in zip(nar_runs[True][0], nar_runs[False][0]):
        wins += int(np.sum(np.array(g_n) > np.array(g_r)))
        total += len(g_n)
    frac = wins / total
    passed = frac >= 0.95
    record_criterion(9, passed, f"normalized > raw gradient norm at {wins}/{total} updates ({100 * frac:.2f}%), "
                                f"paired same-seed direction runs")
    assert passed


def test_c10_determinism(tmp_path):
    smoke = str(__import__("pathlib").Path(__file__).resolve().parents[1] / "configs" / "smoke.yaml")
    cfg = tmp_path / "short.yaml"
    cfg.write_text("scenario:\n  task: direction\ntrainer:\n  n_updates: 20\n  checkpoint_every: 20\n"
                   "eval:\n  episodes: 4\n")
    same = {}
    for label, argv in (
        ("train", ["train", "--config", str(cfg)]),
        ("train-smoke", ["train", "--config", smoke, "--no-nar"]),
        ("eval", ["eval", "--config", str(cfg), "--checkpoint", "{train}/final.ckpt"]),
        ("generalize", ["generalize", "--config", str(cfg), "--checkpoint", "{train}/final.ckpt", "--episodes", "2"]),
        ("oracle", ["oracle"]),
        ("diag", ["diag", "--config", smoke]),
    ):
        blobs = []
        for rep in ("a", "b"):
            out = tmp_path / f"{label}-{rep}"
            args = [a.replace("{train}", str(tmp_path / f"train-{rep}")) for a in argv]
            assert cli.main(args + ["--out", str(out)]) == 0
            blobs.append((out / "metrics.csv").read_bytes())
        same[label] = blobs[0] == blobs[1]
    passed = all(same.values())
    record_criterion(10, passed, "metrics.csv byte-identical on rerun: " +
                     ", ".join(f"{k}={'yes' if v else 'NO'}" for k, v in same.items()))
    assert passed
