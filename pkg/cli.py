#!/usr/bin/env python3
"""
edac-lab command line
Dataset generation, training, evaluation, analysis and the validation
batteries, driven by a JSON RunConfig with flag overrides (flags win).

Exit codes: 0 success, 1 usage, 2 config/validation, 3 numerical failure.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

import config
from algorithms import NumericalFailure, TrainConfig, init_trainer, load_policy, load_trainer, make_actor, \
    save_policy, save_trainer, train_step
from analysis import (
    action_distance_hist, mean_pairwise_cos_sim, min_pairwise_cos_sim, penalty_report, write_action_dist_csv,
    write_cossim_csv, write_penalty_csv,
)
from autodiff import NonFiniteError
from checks import SUITES, run_suite
from datagen import (
    TIERS, DatasetError, DatasetMeta, ReferenceCache, UnknownTierError, collect, get_reference_run, load, meta_path,
    save,
)
from env import AnchorError, UnknownEnvironmentError, evaluate_returns, make_env, normalized_score, uniform_actor
from nn import CheckpointError, DimensionError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

class EnvSection(BaseModel):
    model_config = ConfigDict(extra="forbid")
    name: str = "pointmass1d"


class DataSection(BaseModel):
    model_config = ConfigDict(extra="forbid")
    tier: str = "medium"
    n: int = Field(config.DATASET_SIZE, ge=1)
    seed: int = 0
    path: Optional[str] = None
    reference_seed: int = 0
    reference_steps: int = Field(config.REFERENCE_STEPS, ge=1)


class EvalSection(BaseModel):
    model_config = ConfigDict(extra="forbid")
    episodes: int = Field(config.EVAL_EPISODES, ge=1)
    seed: int = 0


class OutputSection(BaseModel):
    model_config = ConfigDict(extra="forbid")
    dir: str = config.OUTPUT_DIR


class RunConfig(BaseModel):
    """Everything one command needs; unknown keys are rejected"""
    model_config = ConfigDict(extra="forbid")

    env: EnvSection = Field(default_factory=EnvSection)
    data: DataSection = Field(default_factory=DataSection)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalSection = Field(default_factory=EvalSection)
    output: OutputSection = Field(default_factory=OutputSection)

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json", by_alias=True), sort_keys=True, indent=2)


class EvalReport(BaseModel):
    """JSON printed by `eval`"""
    model_config = ConfigDict(extra="forbid")

    env: str
    checkpoint: str
    seed: int
    episodes: int
    mean_return: float
    normalized_score: float
    returns: List[float]


def load_run_config(path: Optional[str], overrides: Dict[str, Dict[str, Any]]) -> RunConfig:
    """JSON file (optional) with per-section flag overrides layered on top"""
    raw: Dict[str, Any] = {}
    if path:
        raw = json.loads(Path(path).read_text())
        if not isinstance(raw, dict):
            raise ValueError(f"{path}: run config must be a JSON object")
    for section, values in overrides.items():
        present = {k: v for k, v in values.items() if v is not None}
        if present:
            raw.setdefault(section, {})
            raw[section].update(present)
    return RunConfig.model_validate(raw)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def dataset_path(cfg: RunConfig) -> Path:
    if cfg.data.path:
        return Path(cfg.data.path)
    env_name = make_env(cfg.env.name).name
    return Path(config.DATA_DIR) / f"{env_name}-{cfg.data.tier}.odrl"


def behavior_policy_path(data: Path, name: str) -> Path:
    return data.with_name(f"{data.stem}.{name}.ckpt")


def cmd_gen_data(cfg: RunConfig) -> int:
    spec = make_env(cfg.env.name)
    tier = cfg.data.tier
    if tier not in TIERS:
        raise UnknownTierError(tier)
    out = dataset_path(cfg)
    cache = ReferenceCache(out.parent / ".reference")
    reference = get_reference_run(spec, cfg.data.reference_seed, cache, steps=cfg.data.reference_steps)
    dataset = collect(spec, tier, cfg.data.n, cfg.data.seed, reference)
    save(dataset, out)
    for name in dataset.behavior_policies:
        save_policy(getattr(reference, name), behavior_policy_path(out, name))

    scores = {name: getattr(reference, f"{name}_score") for name in dataset.behavior_policies}
    detail = ", ".join(f"{name} score {score:.1f}" for name, score in scores.items()) or "uniform behavior"
    print(f"{spec.name}/{tier}: {len(dataset)} transitions -> {out} "
          f"(mean reward {dataset.mean_reward():.4f}; {detail}; "
          f"anchors random {reference.anchors.random_ref:.3f} expert {reference.anchors.expert_ref:.3f})")
    return EXIT_OK


def run_directory(cfg: RunConfig, data: Path) -> Path:
    t = cfg.train
    return Path(cfg.output.dir) / f"{data.stem}-{t.algorithm}-N{t.ensemble_size}-seed{t.seed}"


def checkpoint_name(step: int) -> str:
    return f"ckpt-{step:08d}.ckpt"


def cmd_train(cfg: RunConfig) -> int:
    data = dataset_path(cfg)
    dataset = load(data)
    run_dir = run_directory(cfg, data)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(cfg.to_json())

    t = cfg.train
    state = init_trainer(t, dataset.spec.state_dim, dataset.spec.action_dim)
    logger.info(f"🚀 Training {t.algorithm} (N={t.ensemble_size}, eta={t.eta}) on {data} for {t.total_steps} steps")
    last_good: Optional[Path] = None
    with (run_dir / "metrics.jsonl").open("w") as metrics_file:
        try:
            while state.step < t.total_steps:
                state, metrics = train_step(state, dataset)
                if state.step % t.log_every == 0:
                    metrics_file.write(metrics.model_dump_json() + "\n")
                    logger.info(f"📈 step {state.step}: q_loss={metrics.q_loss:.4f} "
                                f"policy_loss={metrics.policy_loss:.4f} beta={metrics.beta:.4f}")
                if state.step % t.checkpoint_every == 0 or state.step == t.total_steps:
                    last_good = save_trainer(state, run_dir / checkpoint_name(state.step))
        except (NumericalFailure, NonFiniteError) as exc:
            kept = last_good or "none"
            logger.error(f"❌ {exc}; last good checkpoint: {kept}")
            return EXIT_NUMERICAL
    logger.info(f"✅ Training done: {run_dir}")
    return EXIT_OK


def read_meta(data: Path) -> DatasetMeta:
    sidecar = meta_path(data)
    if not sidecar.exists():
        raise FileNotFoundError(f"dataset sidecar not found: {sidecar}")
    return DatasetMeta.model_validate_json(sidecar.read_text())


def cmd_eval(cfg: RunConfig, checkpoint: Optional[str], random_agent: bool) -> int:
    meta = read_meta(dataset_path(cfg))
    spec = meta.env
    if random_agent:
        actor, label = uniform_actor(spec), "random"
    else:
        if not checkpoint:
            raise FileNotFoundError("eval needs --checkpoint or --random")
        actor, label = make_actor(load_policy(checkpoint)), str(checkpoint)
    returns = evaluate_returns(spec, actor, cfg.eval.episodes, cfg.eval.seed)
    mean_return = float(np.mean(returns))
    report = EvalReport(
        env=spec.name, checkpoint=label, seed=cfg.eval.seed, episodes=len(returns),
        mean_return=mean_return, normalized_score=normalized_score(mean_return, meta.anchors),
        returns=[float(r) for r in returns],
    )
    print(report.model_dump_json(indent=2))
    return EXIT_OK


def cmd_check(suite: str) -> int:
    results = run_suite(suite)
    for result in results:
        print(result.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERICAL


def checkpoint_series(run_dir: Optional[str], checkpoints: Sequence[str]) -> List[Path]:
    paths = [Path(c) for c in checkpoints]
    if run_dir:
        paths += sorted(Path(run_dir).glob("ckpt-*.ckpt"))
    if not paths:
        raise FileNotFoundError("analyze needs --checkpoints or a --run-dir holding ckpt-*.ckpt files")
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise FileNotFoundError(f"checkpoints not found: {', '.join(missing)}")
    return paths


def cmd_analyze(cfg: RunConfig, run_dir: Optional[str], checkpoints: Sequence[str], out: Optional[str],
                behavior: Optional[str], batch: int, bins: int) -> int:
    data = dataset_path(cfg)
    dataset = load(data)
    paths = checkpoint_series(run_dir, checkpoints)
    if behavior is None and dataset.behavior_policies:
        behavior = str(behavior_policy_path(data, dataset.behavior_policies[0]))
    behavior_policy = load_policy(behavior) if behavior else None
    if behavior_policy is None:
        logger.info("ℹ️ No behavior policy; dataset actions stand in for behavior samples")

    seed = cfg.eval.seed
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(dataset), size=batch)
    states, actions = dataset.states[idx], dataset.actions[idx]

    penalties, cossims, last = [], [], None
    for path in paths:
        state = load_trainer(path)
        penalties.append((state.step, penalty_report(state.ensemble, dataset, behavior_policy, batch, seed)))
        cossims.append((state.step, min_pairwise_cos_sim(state.ensemble, states, actions),
                        mean_pairwise_cos_sim(state.ensemble, states, actions)))
        last = state
        logger.info(f"📈 Analyzed {path.name} (step {state.step})")

    out_dir = Path(out) if out else (Path(run_dir) if run_dir else paths[-1].parent)
    write_penalty_csv(out_dir / "penalty_report.csv", penalties)
    write_cossim_csv(out_dir / "cossim.csv", cossims)
    write_action_dist_csv(out_dir / "action_dist.csv", action_distance_hist(last.policy, dataset, bins, seed))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="JSON RunConfig file; flags override its values")
    parser.add_argument("--print-config", action="store_true", help="print the merged config and exit")
    parser.add_argument("--env", dest="env_name")
    parser.add_argument("--data", dest="data_path", help="dataset file (.odrl)")
    parser.add_argument("--tier")
    parser.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="edac-lab", description="Offline RL with diversified critic ensembles")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = sub.add_parser("gen-data", help="generate an offline dataset tier")
    _add_common(gen)
    gen.add_argument("--n", type=int)
    gen.add_argument("--out", help="output directory")
    gen.add_argument("--reference-seed", type=int)
    gen.add_argument("--reference-steps", type=int)

    train = sub.add_parser("train", help="train an agent on a dataset")
    _add_common(train)
    train.add_argument("--algo", dest="algorithm")
    train.add_argument("--N", dest="N", type=int)
    train.add_argument("--eta", type=float)
    train.add_argument("--beta", help="'auto' or a fixed temperature")
    train.add_argument("--gamma", type=float)
    train.add_argument("--rho", type=float)
    train.add_argument("--lr-q", type=float)
    train.add_argument("--lr-policy", type=float)
    train.add_argument("--batch-size", type=int)
    train.add_argument("--steps", dest="total_steps", type=int)
    train.add_argument("--checkpoint-every", type=int)
    train.add_argument("--log-every", type=int)
    train.add_argument("--hidden-width", type=int)
    train.add_argument("--hidden-layers", type=int)
    train.add_argument("--out", help="parent directory of the run directory")

    ev = sub.add_parser("eval", help="evaluate a policy checkpoint")
    _add_common(ev)
    ev.add_argument("--checkpoint")
    ev.add_argument("--episodes", type=int)
    ev.add_argument("--random", action="store_true", help="evaluate the uniform-random agent")

    check = sub.add_parser("check", help="run the validation batteries")
    check.add_argument("suite", choices=SUITES)

    analyze = sub.add_parser("analyze", help="write penalty, cosine-similarity and action-distance CSVs")
    _add_common(analyze)
    analyze.add_argument("--run-dir")
    analyze.add_argument("--checkpoints", nargs="*", default=[])
    analyze.add_argument("--behavior", help="behavior policy checkpoint (default: from the dataset sidecar)")
    analyze.add_argument("--out", help="directory for the CSV files (default: the run directory)")
    analyze.add_argument("--batch", type=int, default=config.ANALYSIS_BATCH)
    analyze.add_argument("--bins", type=int, default=config.HISTOGRAM_BINS)
    return parser


def _beta(value: Optional[str]):
    if value is None or value == "auto":
        return value
    try:
        return float(value)
    except ValueError:
        raise UsageError(f"--beta must be 'auto' or a number, got '{value}'") from None


def overrides_from(args: argparse.Namespace) -> Dict[str, Dict[str, Any]]:
    get = lambda name: getattr(args, name, None)
    command = args.command
    overrides: Dict[str, Dict[str, Any]] = {
        "env": {"name": get("env_name")},
        "data": {"tier": get("tier"), "path": get("data_path")},
    }
    if command == "gen-data":
        overrides["data"].update(n=get("n"), seed=get("seed"), reference_seed=get("reference_seed"),
                                 reference_steps=get("reference_steps"))
    elif command == "train":
        overrides["train"] = {
            "algorithm": get("algorithm"), "N": get("N"), "eta": get("eta"), "beta": _beta(get("beta")),
            "gamma": get("gamma"), "rho": get("rho"), "lr_q": get("lr_q"), "lr_policy": get("lr_policy"),
            "batch_size": get("batch_size"), "total_steps": get("total_steps"), "seed": get("seed"),
            "checkpoint_every": get("checkpoint_every"), "log_every": get("log_every"),
            "hidden_width": get("hidden_width"), "hidden_layers": get("hidden_layers"),
        }
        overrides["output"] = {"dir": get("out")}
    elif command in ("eval", "analyze"):
        overrides["eval"] = {"episodes": get("episodes"), "seed": get("seed")}
    return overrides


def dispatch(args: argparse.Namespace) -> int:
    if args.command == "check":
        return cmd_check(args.suite)
    cfg = load_run_config(args.config, overrides_from(args))
    if args.command == "gen-data" and args.out and not cfg.data.path:
        cfg.data.path = str(Path(args.out) / f"{make_env(cfg.env.name).name}-{cfg.data.tier}.odrl")
    if args.print_config:
        print(cfg.to_json())
        return EXIT_OK
    if args.command == "gen-data":
        return cmd_gen_data(cfg)
    if args.command == "train":
        return cmd_train(cfg)
    if args.command == "eval":
        return cmd_eval(cfg, args.checkpoint, args.random)
    return cmd_analyze(cfg, args.run_dir, args.checkpoints, args.out, args.behavior, args.batch, args.bins)


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=config.LOG_LEVEL, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        return dispatch(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (NumericalFailure, NonFiniteError) as exc:
        logger.error(f"❌ Numerical failure: {exc}")
        return EXIT_NUMERICAL
    except ValidationError as exc:
        logger.error(f"❌ Invalid configuration: {exc}")
        return EXIT_CONFIG
    except (DatasetError, UnknownEnvironmentError, AnchorError, CheckpointError, DimensionError,
            FileNotFoundError, json.JSONDecodeError, ValueError) as exc:
        logger.error(f"❌ {exc}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
