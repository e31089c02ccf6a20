"""``narcp`` command-line entry point.

Exit codes: 0 success, 1 assertion or oracle failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import harness, oracle, optim
from .policy import (
    CheckpointError,
    PolicyParams,
    architecture_fingerprint,
    load_checkpoint,
    save_checkpoint,
)
from .rewards import VarianceBoundError
from .sim import ConfigError, ScenarioConfig

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
SECTIONS = ("scenario", "trainer", "eval", "diag")


@dataclass(frozen=True)
class EvalSettings:
    episodes: int = 32
    seed: int = 0


@dataclass(frozen=True)
class DiagSettings:
    episodes: int = 16
    updates: int = 20


@dataclass
class RunConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    trainer: optim.TrainerConfig = field(default_factory=optim.TrainerConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)
    diag: DiagSettings = field(default_factory=DiagSettings)

    def to_dict(self) -> dict:
        return {"scenario": self.scenario.to_dict(), "trainer": self.trainer.to_dict(),
                "eval": vars(self.eval).copy(), "diag": vars(self.diag).copy()}


def _settings(cls, section: str, data: dict):
    known = set(cls.__dataclass_fields__)
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"{section}.{key}", "unknown key")
        if not isinstance(value, int) or isinstance(value, bool) or value < (0 if key == "seed" else 1):
            raise ConfigError(f"{section}.{key}", "must be a positive integer")
    return cls(**data)


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError("config", f"invalid YAML: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config", "top level must be a mapping")
    for key in data:
        if key not in SECTIONS:
            raise ConfigError(key, f"unknown section (expected one of {SECTIONS})")
    try:
        return RunConfig(
            scenario=ScenarioConfig.from_dict(data.get("scenario") or {}),
            trainer=optim.TrainerConfig.from_dict(data.get("trainer") or {}),
            eval=_settings(EvalSettings, "eval", data.get("eval") or {}),
            diag=_settings(DiagSettings, "diag", data.get("diag") or {}),
        )
    except TypeError as exc:
        raise ConfigError("config", str(exc)) from None


def apply_flags(cfg: RunConfig, args) -> RunConfig:
    tr = cfg.trainer
    if getattr(args, "seed", None) is not None:
        tr = replace(tr, seeds=(args.seed,))
        cfg = replace(cfg, eval=replace(cfg.eval, seed=args.seed))
    if getattr(args, "no_nar", False):
        tr = replace(tr, use_nar=False)
    if getattr(args, "no_cp", False):
        tr = replace(tr, alpha_consistency=0.0)
    if getattr(args, "k", None) is not None:
        tr = replace(tr, k_topk=args.k)
    if getattr(args, "episodes", None) is not None:
        if args.episodes < 1:
            raise ConfigError("episodes", "must be >= 1")
        cfg = replace(cfg, eval=replace(cfg.eval, episodes=args.episodes))
    return replace(cfg, trainer=tr)


def _write(path: Path, text: str) -> None:
    path.write_text(text)


def _rows_csv(header, rows) -> str:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(x) if isinstance(x, float) else str(x) for x in row))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(cfg: RunConfig, out: Path) -> int:
    scen, tr = cfg.scenario, cfg.trainer
    method = ("NAR" if tr.use_nar else "raw") + ("+CP" if tr.alpha_consistency > 0 else "")
    rows = []
    for seed in tr.seeds:
        run_dir = out if len(tr.seeds) == 1 else out / f"seed_{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)

        def on_update(u, params, critic, rec, run_dir=run_dir):
            if tr.checkpoint_every and (u + 1) % tr.checkpoint_every == 0:
                save_checkpoint(run_dir / f"checkpoint_{u + 1:04d}.ckpt", params,
                                architecture_fingerprint(scen.task, params), critic.vector)

        res = optim.train(scen, tr, seed, on_update=on_update)
        save_checkpoint(run_dir / "final.ckpt", res.params, architecture_fingerprint(scen.task, res.params),
                        res.critic.vector)
        _write(run_dir / "metrics.csv", harness.metrics_csv(res.records))
        harness.write_jsonl(run_dir / "steps.jsonl", res.rollout_logs)
        _write(run_dir / "reward_curve.svg",
               harness.svg_line_plot([r.mean_reward for r in res.records], "mean step reward"))
        rep, _ = harness.evaluate(res.params, scen, cfg.eval.episodes, tr.k_topk, cfg.eval.seed,
                                  label=scen.task, log_steps=False)
        rep.reward_curve = [r.mean_reward for r in res.records]
        rep.seeds = (seed,)
        _write(run_dir / "report.txt", harness.report_table([(method, rep)]))
        rows.append((method, rep))
    (out / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    if len(rows) > 1:
        _write(out / "report.txt", harness.report_table(rows))
    print(harness.report_table(rows), end="")
    return EXIT_OK


def _load_params(path, task):
    probe = PolicyParams.zeros()
    params, _ = load_checkpoint(path, architecture_fingerprint(task, probe))
    return params


def _eval_outputs(out: Path, reps_records, method: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    all_records = []
    for rep, recs in reps_records:
        rows.append((rep.label, rep.general_rate, rep.precise_rate,
                     "" if rep.policy_bias is None else rep.policy_bias, rep.n_steps))
        for r in recs:
            r["scenario"] = rep.label
        all_records.extend(recs)
    _write(out / "metrics.csv", _rows_csv(("label", "general_rate", "precise_rate", "policy_bias", "n_steps"),
                                          rows))
    harness.write_jsonl(out / "steps.jsonl", all_records)
    with open(out / "eval.json", "w") as fh:
        json.dump([rep.to_dict() for rep, _ in reps_records], fh, indent=1, sort_keys=True)
    table = harness.report_table([(method, rep) for rep, _ in reps_records])
    _write(out / "report.txt", table)
    print(table, end="")


def cmd_eval(cfg: RunConfig, out: Path, checkpoint: str) -> int:
    params = _load_params(checkpoint, cfg.scenario.task)
    rep = harness.evaluate(params, cfg.scenario, cfg.eval.episodes, cfg.trainer.k_topk, cfg.eval.seed,
                           label=cfg.scenario.task)
    _eval_outputs(out, [rep], Path(checkpoint).name)
    return EXIT_OK


def cmd_generalize(cfg: RunConfig, out: Path, checkpoint: str) -> int:
    params = _load_params(checkpoint, cfg.scenario.task)
    reps = harness.generalize(params, cfg.scenario, cfg.eval.episodes, cfg.trainer.k_topk, cfg.eval.seed)
    _eval_outputs(out, reps, Path(checkpoint).name)
    return EXIT_OK


def cmd_oracle(out: Path, seed: int, replay: str | None) -> int:
    out.mkdir(parents=True, exist_ok=True)
    if replay is not None:
        try:
            with open(replay) as fh:
                failures = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError("replay", f"cannot load {replay}: {exc}") from None
        still = [f["id"] for f in failures if oracle.replay_failure(f)]
        print(f"replayed {len(failures)} instance(s); {len(still)} still failing: {', '.join(still)}")
        return EXIT_FAIL if still else EXIT_OK
    res = oracle.run_battery(seed)
    _write(out / "metrics.csv", _rows_csv(("instance", "regime", "agreement_rate", "value_error"), res.rows))
    lines = [f"shaping + uniform instances: {sum(r[1] != 'general' for r in res.rows)}",
             f"failing instances: {len(res.failures)}"]
    lines += [f"spread {s:g}: disagreement rate {d:.4f}" for s, d in res.sweep]
    lines.append(f"disagreement monotone in spread: {res.monotone}")
    _write(out / "report.txt", "\n".join(lines) + "\n")
    print("\n".join(lines))
    if res.failures:
        path = out / "failures.json"
        oracle.dump_failures(path, res.failures)
        print(f"failing instances written to {path}", file=sys.stderr)
    return EXIT_OK if res.passed else EXIT_FAIL


def cmd_diag(cfg: RunConfig, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.trainer.seeds[0]
    res = harness.diag(cfg.scenario, cfg.trainer, seed, cfg.diag.episodes, cfg.diag.updates)
    rows = [(i, a, b) for i, (a, b) in enumerate(zip(res.grad_norm_raw, res.grad_norm_normalized))]
    _write(out / "metrics.csv", _rows_csv(("update", "grad_norm_raw", "grad_norm_normalized"), rows))
    counts, edges = res.diagnostics.histogram()
    lines = ["reward diameter histogram (clipped to the outer bins):"]
    lines += [f"  [{lo:.0e}, {hi:.0e}): {c}" for lo, hi, c in zip(edges[:-1], edges[1:], counts)]
    lines += [
        f"steps: {res.diagnostics.diameters.size}",
        f"fraction of diameters in [1e-3, 1e-2]: {res.diagnostics.fraction_in_band:.4f}",
        f"variance bound held on every batch: {res.diagnostics.bound_holds}",
        f"normalized > raw gradient norm at {res.grad_ordering_fraction:.4f} of updates",
        f"estimator linearity residual: {res.linearity_residual:.3e}",
    ]
    _write(out / "report.txt", "\n".join(lines) + "\n")
    _write(out / "grad_norms.svg", harness.svg_line_plot(np.log10(res.grad_norm_normalized) -
                                                         np.log10(res.grad_norm_raw),
                                                         "log10 grad norm ratio (normalized / raw)"))
    print("\n".join(lines))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="narcp", description="Pursuit-tracking policy lab.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default):
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--out", default=out_default, help="output directory")
        sp.add_argument("--seed", type=int, help="override the run seed")

    sp = sub.add_parser("train", help="PPO training with optional ablations")
    common(sp, "runs/train")
    sp.add_argument("--no-nar", action="store_true", help="train on raw dense rewards")
    sp.add_argument("--no-cp", action="store_true", help="disable the consistency term")
    sp.add_argument("--k", type=int, help="top-k support size")
    sp.add_argument("--episodes", type=int, help="episodes for the post-training evaluation")

    for name, help_ in (("eval", "greedy evaluation of a checkpoint"),
                        ("generalize", "evaluate a checkpoint on shifted scenarios")):
        sp = sub.add_parser(name, help=help_)
        common(sp, f"runs/{name}")
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--episodes", type=int)
        sp.add_argument("--k", type=int)

    sp = sub.add_parser("oracle", help="tabular invariance battery")
    common(sp, "runs/oracle")
    sp.add_argument("--replay", help="re-run serialized failing instances")

    sp = sub.add_parser("diag", help="reward-scale and gradient-norm diagnostics")
    common(sp, "runs/diag")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    try:
        if args.command == "oracle":
            return cmd_oracle(out, 0 if args.seed is None else args.seed, args.replay)
        cfg = apply_flags(load_config(args.config), args)
        if args.command == "train":
            return cmd_train(cfg, out)
        if args.command == "eval":
            return cmd_eval(cfg, out, args.checkpoint)
        if args.command == "generalize":
            return cmd_generalize(cfg, out, args.checkpoint)
        return cmd_diag(cfg, out)
    except (ConfigError, CheckpointError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (VarianceBoundError, oracle.NonConvergenceError) as exc:
        print(f"assertion failure: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
