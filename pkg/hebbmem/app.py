#=========================================================
# Command-line entry point: train, eval, baselines, config
#=========================================================

from __future__ import annotations

# ---------------- Standard Library ----------------
import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

# ---------------- Third-Party ----------------
import numpy as np
from rich.console import Console
from rich.table import Table

# ---------------- Local Imports ----------------
from . import __version__
from . import autodiff as ad
from .checkpoint import load_model
from .concentration.agents import (
    exact_optimal_flips,
    expected_random_flips,
    optimal_agent_flips,
    optimal_flip_bounds,
    random_agent_flips,
)
from .concentration.ppo import evaluate_agent, load_policy, ppo_train
from .config import PRESETS, TASKS, ExperimentConfig, export_preset, resolve_config
from .conversion import convert_demo, layer_fidelity, load_converted
from .diagnostics import GRADCHECK_TOLERANCE, run_gradcheck_suite
from .errors import ArgumentError, CheckpointError, ConfigError, HebbmemError, NumericError
from .export import FLIP_COUNTS_HEADER, OOD_HEADER, write_csv
from .logs import setup_logging
from .manifest import check_run_task, write_manifest
from .model import layer_rates, run_batch
from .paths import resolve_output_dir
from .tasks import dump_episodes, evaluate_accuracy, gen_batch, gen_episodes, ood_protocol, stream_rng
from .training import CHECKPOINT_NAME, train_association

logger = logging.getLogger(__name__)

#=========================================================
# Configuration
#=========================================================
DEFAULT_LENGTHS = "1..10"
DEFAULT_BASELINE_GAMES = 10_000
CONVERTED_NAME = "converted.hmem"
RATE_BATCH = 64


def parse_lengths(text: str) -> list[int]:
    """'1..10' (inclusive) or '1,3,5'."""
    try:
        if ".." in text:
            lo, hi = (int(part) for part in text.split("..", 1))
            lengths = list(range(lo, hi + 1))
        else:
            lengths = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a range like 1..10 or a list like 1,2,5, got {text!r}")
    if not lengths or min(lengths) < 1:
        raise argparse.ArgumentTypeError(f"lengths must be positive integers, got {text!r}")
    return lengths


#=========================================================
# Parser
#=========================================================
def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--task", choices=TASKS, default="assoc", help="experiment to run")
    common.add_argument("--preset", choices=sorted(PRESETS), default=None,
                        help="hyperparameter preset (default: $HEBBMEM_PRESET, user config, else desk)")
    common.add_argument("--seed", type=int, default=None, help="master seed")
    common.add_argument("--config", type=Path, default=None, help="YAML config file")
    common.add_argument("--out", type=Path, default=None, help="output directory")
    common.add_argument("--override", action="append", default=[], metavar="SECTION.FIELD=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--iterations", type=int, default=None, help="shorthand for train/ppo iterations")
    common.add_argument("--pairs", type=int, default=None, help="card pairs for the card game")
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hebbmem", description="Spiking networks with Hebbian memory.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="debug logging")
    parser.add_argument("-q", "--quiet", action="count", default=0, help="warnings only")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common_options()

    train = sub.add_parser("train", parents=[common], help="train a model and write metrics and checkpoints")
    train.set_defaults(handler=cmd_train)

    evaluate = sub.add_parser("eval", parents=[common], help="evaluate a saved checkpoint")
    evaluate.add_argument("--checkpoint", type=Path, default=None, help="checkpoint (default: <out>/checkpoint.hmem)")
    evaluate.add_argument("--lengths", type=parse_lengths, default=None, help="test lengths for --task ood")
    evaluate.add_argument("--episodes", type=int, default=None, help="episodes (or held-out inputs) to evaluate")
    evaluate.add_argument("--games", type=int, default=None, help="games to play for --task rl")
    evaluate.add_argument("--dump-episodes", type=Path, default=None, metavar="PATH",
                          help="write the evaluated episodes as CSV (--task assoc)")
    evaluate.set_defaults(handler=cmd_eval)

    baselines = sub.add_parser("baselines", parents=[common], help="random and memory-perfect card-game agents")
    baselines.add_argument("--games", type=int, default=DEFAULT_BASELINE_GAMES, help="games per agent")
    baselines.set_defaults(handler=cmd_baselines)

    config = sub.add_parser("config", parents=[common], help="print a resolved preset as YAML")
    config.set_defaults(handler=cmd_config)
    return parser


def _resolve(args: argparse.Namespace, task: Optional[str] = None) -> ExperimentConfig:
    overrides = list(args.override)
    if args.iterations is not None:
        overrides += [f"train.iterations={args.iterations}", f"ppo.iterations={args.iterations}"]
    return resolve_config(task or args.task, args.preset, args.seed, args.config, overrides, args.pairs)


def _command_line(args: argparse.Namespace) -> str:
    return " ".join(["hebbmem", *args.argv])


#=========================================================
# Output helpers
#=========================================================
def _summary(**fields) -> None:
    # One machine-readable line on stdout
    print(" ".join(f"{k}={v}" for k, v in fields.items()))


def _rates_table(title: str, rates: dict[str, float]) -> Table:
    table = Table(title=title)
    table.add_column("layer")
    table.add_column("spikes / neuron / step", justify="right")
    for name, rate in rates.items():
        table.add_row(name, f"{rate:.4f}")
    return table


def _write_flip_counts(out_dir: Path, flips: np.ndarray) -> Path:
    return write_csv(out_dir / "flip_counts.csv", FLIP_COUNTS_HEADER, enumerate(int(f) for f in flips))


#=========================================================
# train
#=========================================================
def cmd_train(args: argparse.Namespace) -> int:
    cfg = _resolve(args)
    out_dir = resolve_output_dir(cfg.task, cfg.seed, args.out)
    write_manifest(out_dir, cfg, _command_line(args))
    logger.info("training %s (preset=%s, seed=%d) into %s", cfg.task, cfg.preset, cfg.seed, out_dir)

    if cfg.task in ("assoc", "ood"):
        result = train_association(cfg.train, cfg.model, cfg.assoc, out_dir)
        accuracy = evaluate_accuracy(result.params, cfg.model, cfg.assoc, cfg.train.eval_episodes)
        _summary(task=cfg.task, accuracy=f"{accuracy:.4f}")
    elif cfg.task == "rl":
        result = ppo_train(cfg.ppo, cfg.model, out_dir)
        evaluation = evaluate_agent(result.params, result.model_config, cfg.ppo, cfg.ppo.eval_games)
        _write_flip_counts(out_dir, evaluation.flips)
        _summary(task="rl", mean_flips=f"{evaluation.mean_flips:.3f}")
    elif cfg.task == "convert-demo":
        demo = convert_demo(cfg.seed, config=cfg.conversion, out_dir=out_dir)
        _summary(
            task="convert-demo",
            fidelity=",".join(f"{r:.4f}" for r in demo.fidelity),
            thresholds=",".join(f"{t:.4f}" for t in demo.thresholds),
        )
    else:
        return _gradcheck(cfg.seed)
    return 0


def _gradcheck(seed: int) -> int:
    errors = run_gradcheck_suite(seed)
    table = Table(title="gradient check")
    table.add_column("case")
    table.add_column("relative error", justify="right")
    table.add_column("ok", justify="center")
    for name, err in errors.items():
        table.add_row(name, f"{err:.2e}", "yes" if err <= GRADCHECK_TOLERANCE else "NO")
    Console().print(table)
    worst = max(errors.values())
    _summary(task="gradcheck", max_error=f"{worst:.3e}")
    if worst > GRADCHECK_TOLERANCE:
        logger.error("gradient check failed: max relative error %.3e > %.0e", worst, GRADCHECK_TOLERANCE)
        return 1
    return 0


#=========================================================
# eval
#=========================================================
def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _resolve(args)
    if cfg.task == "gradcheck":
        return _gradcheck(cfg.seed)
    if args.dump_episodes is not None and cfg.task != "assoc":
        raise ArgumentError("--dump-episodes applies to --task assoc only")
    out_dir = resolve_output_dir(cfg.task, cfg.seed, args.out)
    default_name = CONVERTED_NAME if cfg.task == "convert-demo" else CHECKPOINT_NAME
    path = args.checkpoint or out_dir / default_name
    if not Path(path).is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    if args.checkpoint is None:
        check_run_task(out_dir, cfg.task, cfg.seed)
    console = Console()

    if cfg.task in ("assoc", "ood"):
        params, model_config, metadata = load_model(path)
        logger.info("loaded %s (iteration %s)", path, metadata.get("iteration", "?"))
        if cfg.task == "ood":
            lengths = args.lengths or parse_lengths(DEFAULT_LENGTHS)
            curve = ood_protocol(params, model_config, cfg.assoc, lengths, n_episodes=args.episodes or 2000)
            csv_path = write_csv(out_dir / "ood_curve.csv", OOD_HEADER, curve.items())
            logger.info("wrote %s", csv_path)
            for n, accuracy in curve.items():
                _summary(task="ood", n_test=n, accuracy=f"{accuracy:.4f}")
        else:
            episodes = args.episodes or cfg.train.eval_episodes
            accuracy = evaluate_accuracy(params, model_config, cfg.assoc, episodes)
            if args.dump_episodes is not None:
                # same stream evaluate_accuracy draws from
                n_test = cfg.assoc.n_test
                evaluated = gen_episodes(cfg.assoc, stream_rng(cfg.assoc.seed, "test", n_test), episodes, n_test)
                logger.info("wrote %s", dump_episodes(args.dump_episodes, evaluated))
            _summary(task="assoc", accuracy=f"{accuracy:.4f}")
        with ad.no_grad():
            batch = gen_batch(cfg.assoc, stream_rng(cfg.seed, "test"), RATE_BATCH)
            rates = layer_rates(run_batch(params, model_config, batch).rasters)
        console.print(_rates_table("mean firing rates", rates))

    elif cfg.task == "rl":
        params, model_config, ppo_config, _ = load_policy(path)
        games = args.games or ppo_config.eval_games
        evaluation = evaluate_agent(params, model_config, ppo_config, games, seed=cfg.seed)
        _write_flip_counts(out_dir, evaluation.flips)
        _summary(task="rl", mean_flips=f"{evaluation.mean_flips:.3f}", truncated=evaluation.truncated)

    else:
        net, thresholds, conversion = load_converted(path)
        n_inputs = args.episodes or 200
        heldout = stream_rng(cfg.seed, "heldout").random((n_inputs, net.layer_sizes[0]))
        fidelity = layer_fidelity(net, thresholds, heldout, conversion)
        _summary(task="convert-demo", fidelity=",".join(f"{r:.4f}" for r in fidelity))
    return 0


#=========================================================
# baselines
#=========================================================
def cmd_baselines(args: argparse.Namespace) -> int:
    cfg = _resolve(args, task="rl")
    n_pairs = cfg.ppo.n_pairs
    if args.games < 1:
        raise ArgumentError(f"--games must be at least 1, got {args.games}")
    out_dir = resolve_output_dir("baselines", cfg.seed, args.out)
    write_manifest(out_dir, cfg, _command_line(args), {"n_pairs": n_pairs, "games": args.games})

    random_flips = random_agent_flips(n_pairs, args.games, stream_rng(cfg.seed, "env", 1))
    optimal_flips = optimal_agent_flips(n_pairs, args.games, stream_rng(cfg.seed, "env", 2))
    write_csv(out_dir / "baseline_random.csv", FLIP_COUNTS_HEADER, enumerate(int(f) for f in random_flips))
    write_csv(out_dir / "baseline_optimal.csv", FLIP_COUNTS_HEADER, enumerate(int(f) for f in optimal_flips))

    lo, hi = optimal_flip_bounds(n_pairs)
    table = Table(title=f"Concentration, {n_pairs} pairs, {args.games} games")
    table.add_column("agent")
    table.add_column("mean flips", justify="right")
    table.add_column("std", justify="right")
    table.add_column("min", justify="right")
    table.add_column("max", justify="right")
    table.add_column("expected", justify="right")
    table.add_row("random", f"{random_flips.mean():.3f}", f"{random_flips.std():.3f}",
                  str(random_flips.min()), str(random_flips.max()), str(expected_random_flips(n_pairs)))
    table.add_row("memory-perfect", f"{optimal_flips.mean():.3f}", f"{optimal_flips.std():.3f}",
                  str(optimal_flips.min()), str(optimal_flips.max()), f"{float(exact_optimal_flips(n_pairs)):.3f}")
    Console().print(table)
    if optimal_flips.min() < lo or optimal_flips.max() > hi:
        logger.warning("memory-perfect games left the [%d, %d] flip range", lo, hi)

    _summary(task="baselines", pairs=n_pairs, random=f"{random_flips.mean():.3f}",
             optimal=f"{optimal_flips.mean():.3f}")
    return 0


#=========================================================
# config
#=========================================================
def cmd_config(args: argparse.Namespace) -> int:
    cfg = _resolve(args)
    sys.stdout.write(export_preset(cfg.task, cfg.preset))
    return 0


#=========================================================
# Entry Point
#=========================================================
def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    args.argv = argv
    setup_logging(args.verbose - args.quiet)

    try:
        return args.handler(args)
    except (ConfigError, ArgumentError) as e:
        logger.error("%s", e)
        return 2
    except (CheckpointError, NumericError) as e:
        logger.error("%s", e)
        return 1
    except HebbmemError as e:
        logger.error("%s", e)
        return 1
    except KeyboardInterrupt:
        logger.warning("interrupted; the last checkpoint on disk is intact")
        return 130


if __name__ == "__main__":
    sys.exit(main())
