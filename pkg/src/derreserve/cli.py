"""Command-line entry point: powerflow, train, eval and reproduce.

Exit codes: 0 success, 1 usage or input error, 2 numerical failure,
3 acceptance failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import hashlib
import io
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import acceptance as acc
from . import allocators as alloc
from .ddpg import AgentConfig, TrainingDivergence, infer, train
from .environment import EnvConfig, InfeasibleStateError, ReserveState
from .feeder import BUILTIN_IEEE34, FeederError, load_feeder
from .neural import load_mlp, save_mlp
from .powerflow import average_voltage_deviation, solve, write_voltage_csv

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_ACCEPTANCE = 0, 1, 2, 3
RUNNING_MEAN_WINDOW = 50
CHECKPOINT_EVERY = 100


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    feeder: str = BUILTIN_IEEE34
    env: EnvConfig = field(default_factory=EnvConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    out: Path = Path("runs")

    def config_hash(self) -> str:
        blob = json.dumps({"feeder": self.feeder, "env": asdict(self.env), "agent": asdict(self.agent)},
                          sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def comment(self) -> str:
        return f"seed={self.agent.seed} config_hash={self.config_hash()} version={__version__}"


# ---------------------------------------------------------------- configuration


def _parse_value(text: str, default):
    text = text.strip()
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if text.lower() == "none":
        return None
    if isinstance(default, str):
        return text
    if isinstance(default, tuple) or "," in text:
        return tuple(float(t) if "." in t or "e" in t.lower() else int(t)
                     for t in (s.strip() for s in text.split(",")) if t)
    if isinstance(default, int):
        return int(text)
    num = float(text)
    return int(num) if default is None and num.is_integer() and "." not in text else num


def _apply_section(cls, section, base):
    known = {f.name: f for f in dataclasses.fields(cls)}
    values = {}
    for key, raw in section.items():
        if key not in known:
            raise UsageError(f"unknown {cls.__name__} field {key!r}")
        try:
            values[key] = _parse_value(raw, getattr(base, key))
        except ValueError as exc:
            raise UsageError(f"bad value for {key}: {exc}") from None
    try:
        return dataclasses.replace(base, **values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {cls.__name__}: {exc}") from None


def load_run_config(path: str | None) -> RunConfig:
    """Read an INI file with optional [run], [env] and [agent] sections."""
    cfg = RunConfig()
    if path is None:
        return cfg
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    except configparser.Error as exc:
        raise UsageError(f"malformed config {path}: {exc}") from None
    for name in parser.sections():
        if name not in ("run", "env", "agent"):
            raise UsageError(f"unknown config section [{name}]")
    if parser.has_section("env"):
        cfg.env = _apply_section(EnvConfig, parser["env"], cfg.env)
    if parser.has_section("agent"):
        cfg.agent = _apply_section(AgentConfig, parser["agent"], cfg.agent)
    if parser.has_section("run"):
        run = parser["run"]
        cfg.feeder = run.get("feeder", cfg.feeder)
        cfg.out = Path(run.get("out", str(cfg.out)))
    return cfg


def resolve(args) -> RunConfig:
    cfg = load_run_config(getattr(args, "config", None))
    if getattr(args, "feeder", None):
        cfg.feeder = args.feeder
    if getattr(args, "out", None):
        cfg.out = Path(args.out)
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "episodes", None) is not None:
        overrides["episodes"] = args.episodes
    if overrides:
        try:
            cfg.agent = dataclasses.replace(cfg.agent, **overrides)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    return cfg


def _load_model(cfg: RunConfig):
    try:
        return load_feeder(cfg.feeder)
    except FileNotFoundError:
        raise UsageError(f"feeder file not found: {cfg.feeder}") from None
    except FeederError as exc:
        raise UsageError(f"cannot parse feeder {cfg.feeder}: {exc}") from None


def _write_csv(path: Path, header, rows, comment: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------- subcommands


def cmd_powerflow(cfg: RunConfig) -> int:
    model = _load_model(cfg)
    cfg.out.mkdir(parents=True, exist_ok=True)
    sol = solve(model)
    write_voltage_csv(sol, cfg.out / "voltages.csv", cfg.comment())
    avd = average_voltage_deviation(sol) if sol.converged else float("nan")
    _write_csv(cfg.out / "summary.csv", ["metric", "value"],
               [["converged", int(sol.converged)], ["iterations", sol.iterations],
                ["max_mismatch_kva", f"{sol.max_mismatch:.6e}"],
                ["total_loss_kw", f"{sol.total_loss_kw:.6f}"], ["avd_pct", f"{100 * avd:.6f}"]],
               cfg.comment())
    if not sol.converged:
        print(f"power flow did not converge after {sol.iterations} iterations "
              f"(max mismatch {sol.max_mismatch:.3e} kVA)", file=sys.stderr)
        return EXIT_NUMERICAL
    print(f"converged in {sol.iterations} iterations, mismatch {sol.max_mismatch:.2e} kVA")
    print(f"total loss {sol.total_loss_kw:.3f} kW, AVD {100 * avd:.3f}%")
    return EXIT_OK


LOG_FIELDS = ("episode", "total_reward", "cost_term", "violation_term", "loss_term",
              "voltage_term", "noise_std", "critic_loss", "actor_objective")


def reward_log_csv(log, comment: str) -> str:
    buf = io.StringIO()
    buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_FIELDS)
    for row in log:
        w.writerow([row[k] if k == "episode" else repr(float(row[k])) for k in LOG_FIELDS])
    return buf.getvalue()


def running_mean(values, window: int = RUNNING_MEAN_WINDOW) -> np.ndarray:
    """Trailing mean; the first ``window - 1`` entries average what is available."""
    v = np.asarray(values, dtype=float)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def save_agent(agent, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for name, net in agent.nets().items():
        save_mlp(net, directory / f"{name}.mlp")


def cmd_train(cfg: RunConfig) -> int:
    model = _load_model(cfg)
    cfg.out.mkdir(parents=True, exist_ok=True)
    ckpt = cfg.out / "checkpoints"

    def on_progress(ep, row, agent):
        # periodic checkpoints survive a later divergence
        if (ep + 1) % CHECKPOINT_EVERY == 0 and agent.all_finite():
            save_agent(agent, ckpt)

    status = EXIT_OK
    try:
        result = train(cfg.env, cfg.agent, model, progress=on_progress)
        log, agent = result.log, result.agent
        save_agent(agent, ckpt)
        extra = {"updates": result.updates, "reward_shift": result.reward_shift,
                 "reward_scale": result.reward_scale}
    except TrainingDivergence as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        if exc.agent is not None:
            save_agent(exc.agent, cfg.out / "diverged")
        log, status, extra = exc.log or [], EXIT_NUMERICAL, {"diverged": str(exc)}

    (cfg.out / "reward_log.csv").write_text(reward_log_csv(log, cfg.comment()))
    rewards = [row["total_reward"] for row in log]
    _write_csv(cfg.out / "running_mean.csv", ["episode", f"running_mean_{RUNNING_MEAN_WINDOW}"],
               [[k, repr(float(m))] for k, m in enumerate(running_mean(rewards))], cfg.comment())
    manifest = {"version": __version__, "seed": cfg.agent.seed, "config_hash": cfg.config_hash(),
                "feeder": cfg.feeder, "episodes_logged": len(log),
                "env": asdict(cfg.env), "agent": asdict(cfg.agent), **extra}
    (cfg.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=list))
    if rewards:
        rm = running_mean(rewards)
        print(f"trained {len(log)} episodes; running mean {rm[min(len(rm), RUNNING_MEAN_WINDOW) - 1]:.4f}"
              f" -> {rm[-1]:.4f}")
    return status


def _env_from_manifest(data: dict) -> EnvConfig:
    return EnvConfig(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in data.items()})


def load_checkpoint(path: Path):
    """Actor, the EnvConfig it was trained under, and the training manifest (may be empty)."""
    path = Path(path)
    root = path if (path / "manifest.json").exists() else path.parent
    actor_file = path / "actor.mlp" if path.is_dir() else path
    if path.is_dir() and not actor_file.exists():
        actor_file = path / "checkpoints" / "actor.mlp"
    if not actor_file.exists():
        raise UsageError(f"no actor checkpoint under {path}")
    env, manifest = EnvConfig(), {}
    if (root / "manifest.json").exists():
        manifest = json.loads((root / "manifest.json").read_text())
        env = _env_from_manifest(manifest["env"])
    try:
        return load_mlp(actor_file), env, manifest
    except (ValueError, IndexError) as exc:
        raise UsageError(f"unreadable checkpoint {actor_file}: {exc}") from None


def _custom_state(args) -> ReserveState:
    if args.r_max is None or args.prices is None or args.r_tot is None:
        raise UsageError("--case custom needs --r-max, --prices and --r-tot")
    try:
        return ReserveState(np.array(args.r_max), np.array(args.prices), args.r_tot)
    except InfeasibleStateError as exc:
        raise UsageError(f"infeasible state: {exc}") from None


def evaluate_cases(actor, env_config, model, states: dict, jobs: int = 1):
    allocators = {
        "proposed (ddpg)": lambda st: infer(actor, st, env_config),
        "capacity-based": alloc.capacity_based,
        "greedy oracle": alloc.greedy_cost_oracle,
    }
    return alloc.compare(allocators, states, model, env_config, jobs=jobs)


def cmd_eval(cfg: RunConfig, checkpoint: str, case: str, args=None, jobs: int = 1) -> int:
    model = _load_model(cfg)
    actor, env_config, manifest = load_checkpoint(Path(checkpoint))
    if case == "custom":
        states = {"custom": _custom_state(args)}
    else:
        states = {case: alloc.CASES[case]}
    cfg.out.mkdir(parents=True, exist_ok=True)
    rows = evaluate_cases(actor, env_config, model, states, jobs)
    name = f"comparison_{case}.csv"
    comment = (f"seed={manifest.get('seed', 'unknown')} config_hash={manifest.get('config_hash', 'unknown')}"
               f" version={__version__}")
    (cfg.out / name).write_text(alloc.comparison_csv(rows, comment))
    print(alloc.comparison_text(rows))
    if not all(r.converged for r in rows):
        print("power flow did not converge for at least one allocation", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_reproduce(cfg: RunConfig, jobs: int = 1) -> int:
    model = _load_model(cfg)
    root = cfg.out
    first = dataclasses.replace(cfg, out=root / "train")
    second = dataclasses.replace(cfg, out=root / "train_repeat")
    for run in (first, second):
        status = cmd_train(run)
        if status != EXIT_OK:
            return status
    actor, env_config, _ = load_checkpoint(first.out)
    log_a = (first.out / "reward_log.csv").read_text()
    log_b = (second.out / "reward_log.csv").read_text()
    rewards = _read_rewards(first.out / "reward_log.csv")

    eval_dir = root / "eval"
    eval_dir.mkdir(parents=True, exist_ok=True)
    rows = evaluate_cases(actor, env_config, model, dict(alloc.CASES), jobs)
    (eval_dir / "comparison.csv").write_text(alloc.comparison_csv(rows, cfg.comment()))
    print(alloc.comparison_text(rows))

    results = [
        acc.capacity_reproduction(),
        acc.trc_arithmetic(),
        acc.oracle_bracketing(),
        acc.learning(rewards, actor, env_config),
        acc.powerflow_fidelity(model, actor, env_config),
        acc.gradient_integrity(seed=cfg.agent.seed),
        acc.ddpg_mechanics(seed=cfg.agent.seed),
        acc.inference_latency(actor, env_config),
        acc.determinism(log_a, log_b),
    ]
    report = "\n".join(r.report() for r in results)
    summary = f"{sum(r.passed for r in results)}/{len(results)} criteria passed"
    (root / "acceptance_report.txt").write_text(f"# {cfg.comment()}\n{report}\n{summary}\n")
    print(report)
    print(summary)
    return EXIT_OK if all(r.passed for r in results) else EXIT_ACCEPTANCE


def _read_rewards(path: Path) -> list[float]:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return [float(row["total_reward"]) for row in csv.DictReader(lines)]


# ---------------------------------------------------------------- argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="derreserve", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--feeder", help=f"feeder file or {BUILTIN_IEEE34} (default)")
        sp.add_argument("--config", help="INI file with [run], [env] and [agent] sections")
        sp.add_argument("--seed", type=int, help="training seed")
        sp.add_argument("--out", help="output directory")

    sp = sub.add_parser("powerflow", help="solve the base case and write voltages")
    common(sp)
    sp = sub.add_parser("train", help="train the DDPG allocator")
    common(sp)
    sp.add_argument("--episodes", type=int)
    sp = sub.add_parser("eval", help="compare a trained policy with the baselines")
    common(sp)
    sp.add_argument("--checkpoint", required=True, help="train output directory or actor file")
    sp.add_argument("--case", choices=("I", "II", "custom"), default="I")
    sp.add_argument("--r-max", type=float, nargs="+", help="custom case: available reserve per DER (kW)")
    sp.add_argument("--prices", type=float, nargs="+", help="custom case: bid price per DER (cents/kWh)")
    sp.add_argument("--r-tot", type=float, help="custom case: requested reserve (kW)")
    sp.add_argument("--jobs", type=int, default=1)
    sp = sub.add_parser("reproduce", help="train, evaluate and check every acceptance criterion")
    common(sp)
    sp.add_argument("--episodes", type=int)
    sp.add_argument("--jobs", type=int, default=1)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args)
        if args.command == "powerflow":
            return cmd_powerflow(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.case, args, jobs=args.jobs)
        return cmd_reproduce(cfg, jobs=args.jobs)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
