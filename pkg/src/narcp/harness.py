"""Evaluation, generalization suites, diagnostics and artifact writers."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import optim, rewards, sim
from .observation import batch_policy_inputs, render_text
from .optim import TrainerConfig, VecEnv, behaviour_logits, joint_topk_target
from .policy import PolicyParams, kl_divergence, log_softmax, scorer
from .sim import ScenarioConfig, TargetStrategy, from_batch

WARMUP_STEPS = 20
CONTROLLERS = ("policy", "scripted", "random")


@dataclass(frozen=True)
class MetricThresholds:
    dir_precise: float = 0.141
    dir_general: float = 0.707
    dist_precise: float = 0.1
    dist_general: float = 1.0
    int_precise: float = 0.241
    int_general: float = 1.707

    def __post_init__(self):
        pairs = [(self.dir_precise, self.dir_general), (self.dist_precise, self.dist_general),
                 (self.int_precise, self.int_general)]
        if any(p >= g for p, g in pairs):
            raise ValueError("precise bound must be tighter than general bound")

    def bounds(self, task: str) -> tuple[float, float]:
        if task == "direction":
            return self.dir_precise, self.dir_general
        if task == "distance":
            return self.dist_precise, self.dist_general
        return self.int_precise, self.int_general


THRESHOLDS = MetricThresholds()


def zone_error(task: str, e_dir, d_err) -> np.ndarray:
    """Scalar tracking error compared against the zone bounds of ``task``."""
    e_dir = np.asarray(e_dir, dtype=np.float64)
    d_abs = np.abs(np.asarray(d_err, dtype=np.float64))
    if task == "direction":
        return e_dir
    if task == "distance":
        return d_abs
    return e_dir + d_abs


def zone_rates(task: str, e_dir, d_err, thresholds: MetricThresholds = THRESHOLDS) -> tuple[float, float]:
    """``(general_rate, precise_rate)`` over the given steps."""
    err = zone_error(task, e_dir, d_err)
    if err.size == 0:
        return 0.0, 0.0
    precise, general = thresholds.bounds(task)
    n = err.size
    return int(np.count_nonzero(err <= general)) / n, int(np.count_nonzero(err <= precise)) / n


@dataclass
class EvalReport:
    label: str
    task: str
    general_rate: float
    precise_rate: float
    policy_bias: float | None
    reward_curve: list = field(default_factory=list)
    seeds: tuple = ()
    n_steps: int = 0

    def __post_init__(self):
        if not 0 <= self.precise_rate <= self.general_rate <= 1:
            raise ValueError("rates must satisfy 0 <= precise <= general <= 1")
        if self.policy_bias is not None and not self.policy_bias >= 0:
            raise ValueError("policy bias must be >= 0")

    def to_dict(self) -> dict:
        return {"label": self.label, "task": self.task, "general_rate": self.general_rate,
                "precise_rate": self.precise_rate, "policy_bias": self.policy_bias,
                "reward_curve": list(self.reward_curve), "seeds": list(self.seeds),
                "n_steps": self.n_steps}


def _policy_act(params: PolicyParams, views: dict, task: str, k: int):
    """Greedy action, its log-probability and the per-state policy bias (or None)."""
    n = views[task].shape[0]
    rows = np.arange(n)
    if task != "integrated":
        lp = behaviour_logits(params, views, task)[0][0]
        a = lp.argmax(axis=1)
        return a, lp[rows, a], None
    (lp1, _, _), (lp2, _, _) = behaviour_logits(params, views, task)
    idx, target_lp = joint_topk_target(lp1, lp2, k)
    s_full, _, _ = scorer("integrated").forward(params, views["integrated"])
    full_lp = log_softmax(np.take_along_axis(s_full, idx, axis=1))
    bias = np.maximum(kl_divergence(target_lp, full_lp), 0.0)
    j = full_lp.argmax(axis=1)
    return idx[rows, j], full_lp[rows, j], bias


def evaluate(params: PolicyParams | None, scenario: ScenarioConfig, episodes: int = 32, k: int = 5,
             seed: int = 0, controller: str = "policy", thresholds: MetricThresholds = THRESHOLDS,
             label: str | None = None, log_steps: bool = True, warmup: int = WARMUP_STEPS):
    """Run ``episodes`` full episodes side by side and score zone occupancy.

    Every env is scored on the state it acts in; the first ``warmup`` steps of
    each episode are excluded. Returns ``(EvalReport, step_records)``.
    """
    if controller not in CONTROLLERS:
        raise ValueError(f"controller must be one of {CONTROLLERS}")
    if controller == "policy" and params is None:
        raise ValueError("policy controller needs parameters")
    task = scenario.task
    space = sim.action_space(task)
    env = VecEnv(scenario, episodes, seed)
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(2)[1])
    rows = np.arange(episodes)
    e_all, d_all, biases, curve, records = [], [], [], [], []
    for _ in range(scenario.episode_length):
        b = env.batch
        geom = sim.batch_geometry(b)
        r_d = rewards.batch_dense_rewards(b, scenario)
        rewards.check_variance_bound(r_d)
        r_n, mu, sigma = rewards.normalize_rewards(r_d)
        bias = None
        if controller == "policy":
            a, lp, bias = _policy_act(params, batch_policy_inputs(b, geom), task, k)
        elif controller == "scripted":
            a = r_d.argmax(axis=1)
            lp = np.zeros(episodes)
        else:
            a = rng.integers(len(space), size=episodes)
            lp = np.full(episodes, -np.log(len(space)))
        scored = b.step_index >= warmup
        e_all.append(geom["e_dir"][scored])
        d_all.append(geom["distance_error"][scored])
        if bias is not None:
            biases.append(bias[scored])
        curve.append(float(r_d[rows, a].mean()))
        if log_steps:
            for i in range(episodes):
                st = from_batch(b, i, color=env.colors[i])
                records.append({
                    "episode": i,
                    "step": int(b.step_index[i]),
                    "obs_text": render_text(st, task=task),
                    "candidates": list(space),
                    "r_d": r_d[i].tolist(),
                    "r_n": r_n[i].tolist(),
                    "mu": float(mu[i]),
                    "sigma": float(sigma[i]),
                    "diameter": float(r_d[i].max() - r_d[i].min()),
                    "chosen": space[a[i]],
                    "log_prob": float(lp[i]),
                    "e_dir": float(geom["e_dir"][i]),
                    "d_err": float(geom["distance_error"][i]),
                })
        env.step(a)
    e_all, d_all = np.concatenate(e_all), np.concatenate(d_all)
    general, precise = zone_rates(task, e_all, d_all, thresholds)
    policy_bias = float(np.mean(np.concatenate(biases))) if biases else None
    report = EvalReport(label or f"{task}/{controller}", task, general, precise, policy_bias,
                        curve, (seed,), int(e_all.size))
    return report, records


def reaggregate(records, task: str, thresholds: MetricThresholds = THRESHOLDS,
                warmup: int = WARMUP_STEPS) -> tuple[float, float]:
    """Recompute ``(general_rate, precise_rate)`` from step records alone."""
    kept = [r for r in records if r["step"] >= warmup]
    return zone_rates(task, [r["e_dir"] for r in kept], [r["d_err"] for r in kept], thresholds)


def generalization_scenarios(base: ScenarioConfig) -> list[tuple[str, ScenarioConfig]]:
    circular = TargetStrategy(kind="circular", circular_radius=base.target_strategy.circular_radius,
                              angular_rate=base.target_strategy.angular_rate)
    return [
        ("randomized-distance", replace(base, randomize_distance=True)),
        ("circular-target", replace(base, target_strategy=circular)),
        ("composite-shift", replace(base, randomize_distance=True, target_strategy=circular,
                                    nuisance_color="random")),
    ]


def generalize(params: PolicyParams, base: ScenarioConfig, episodes: int = 32, k: int = 5,
               seed: int = 0) -> list[tuple[EvalReport, list]]:
    out = []
    for name, scen in generalization_scenarios(base):
        out.append(evaluate(params, scen, episodes, k, seed, label=name))
    return out


# ---------------------------------------------------------------------------
# diagnostics


@dataclass
class DiagResult:
    diagnostics: rewards.DiagnosticsReport
    grad_norm_raw: list
    grad_norm_normalized: list
    linearity_residual: float

    @property
    def grad_ordering_fraction(self) -> float:
        a, b = np.array(self.grad_norm_normalized), np.array(self.grad_norm_raw)
        return float(np.mean(a > b)) if a.size else 0.0


def diag(scenario: ScenarioConfig, cfg: TrainerConfig, seed: int = 0, episodes: int = 16,
         n_updates: int = 20) -> DiagResult:
    """Fixed-policy diameter census plus paired raw/normalized gradient-norm traces.

    The fixed policy is the scripted controller that picks the best dense
    reward, which keeps the rollout near the tracking regime the agent trains for.
    """
    _, recs = evaluate(None, scenario, episodes, cfg.k_topk, seed, controller="scripted")
    r_d = np.array([r["r_d"] for r in recs])
    report = rewards.diameter_diagnostic(r_d)
    traces = {}
    for nar in (False, True):
        c = replace(cfg, use_nar=nar, n_updates=n_updates, log_steps_every=0)
        traces[nar] = [rec.grad_norm for rec in optim.train(scenario, c, seed).records]
    params = PolicyParams.init(np.random.default_rng(seed), cfg.init_scale)
    b = VecEnv(scenario, 8, seed).batch
    views = batch_policy_inputs(b)[scenario.task]
    lin = optim.estimator_linearity_check(params, views, rewards.batch_dense_rewards(b, scenario),
                                          scenario.task, cfg.epsilon0)
    return DiagResult(report, traces[False], traces[True], lin["residual"])


# ---------------------------------------------------------------------------
# artifact writers

METRIC_FIELDS = ("update", "mean_reward", "l_ppo", "l_entropy", "l_consistency", "grad_norm")


def metrics_csv(records) -> str:
    """Deterministic CSV text: floats are written with ``repr`` (shortest round-trip)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for r in records:
        w.writerow([r.update] + [repr(float(getattr(r, f))) for f in METRIC_FIELDS[1:]])
    return buf.getvalue()


def write_jsonl(path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True))
            fh.write("\n")


def read_jsonl(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _pct(x):
    return f"{100 * x:.2f}"


def report_table(rows) -> str:
    """Fixed-width summary table, one row per ``(method, EvalReport)``."""
    head = ("Task", "Method", "General Rate %", "Precise Rate %", "Policy Bias")
    body = []
    for method, rep in rows:
        bias = "n/a" if rep.policy_bias is None else f"{rep.policy_bias:.4g}"
        body.append((rep.label, method, _pct(rep.general_rate), _pct(rep.precise_rate), bias))
    widths = [max(len(r[i]) for r in [head] + body) for i in range(len(head))]
    line = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
    rule = "  ".join("-" * w for w in widths)
    return "\n".join([line(head), rule] + [line(r) for r in body]) + "\n"


def svg_line_plot(ys, title: str = "", width: int = 480, height: int = 240, pad: int = 32) -> str:
    """Minimal static SVG polyline of ``ys`` against their index."""
    ys = np.asarray(ys, dtype=np.float64)
    lo, hi = (float(ys.min()), float(ys.max())) if ys.size else (0.0, 1.0)
    if hi == lo:
        hi = lo + 1.0
    n = max(len(ys) - 1, 1)
    xs = pad + (width - 2 * pad) * np.arange(len(ys)) / n
    py = height - pad - (height - 2 * pad) * (ys - lo) / (hi - lo)
    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, py))
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">\n'
        f'<rect width="{width}" height="{height}" fill="white"/>\n'
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>\n'
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>\n'
        f'<text x="{width / 2:.0f}" y="{pad / 2:.0f}" text-anchor="middle" font-size="12">{title}</text>\n'
        f'<text x="2" y="{pad + 4}" font-size="10">{hi:.3g}</text>\n'
        f'<text x="2" y="{height - pad}" font-size="10">{lo:.3g}</text>\n'
        f'<polyline fill="none" stroke="steelblue" stroke-width="1.5" points="{pts}"/>\n'
        "</svg>\n"
    )
