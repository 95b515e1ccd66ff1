import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv

from numerics import ContractViolation, LabError
from settings import ConfigError, load_config
from experiment_runner import ExperimentRunner

load_dotenv()

logger = logging.getLogger("longclip")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


class UsageError(LabError):
    """Invalid flag combination"""


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file; flags override it")
    parser.add_argument("--log-level", default=None,
                        help="logging level (default: $LONGCLIP_LOG_LEVEL or INFO)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="longclip-lab",
                                     description="Long-caption dual-encoder experiments at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a seeded synthetic corpus")
    _common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--n", type=int, help="number of scenes")
    p.add_argument("--out", default=None, help="dataset path (default paths.dataset)")
    p.add_argument("--vocab", default=None, help="vocabulary path (default: vocab.txt beside the dataset)")

    p = sub.add_parser("stretch", help="stretch a checkpoint's positional table")
    _common(p)
    p.add_argument("--mode", choices=["linear", "kps"])
    p.add_argument("--ratio", type=float)
    p.add_argument("--keep", type=int)
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train one variant")
    _common(p)
    p.add_argument("--variant")
    p.add_argument("--data", default=None)
    p.add_argument("--vocab", default=None)
    p.add_argument("--init", default=None, help="checkpoint to start from (default: fresh model)")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--k", type=int, help="principal components kept for coarse features")

    for name, helptext in (("eval-retrieval", "Recall@K for long and short captions"),
                           ("probe-length", "R@1 as a function of caption length")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--data", default=None, help="evaluation set (default paths.eval_dataset)")
        p.add_argument("--vocab", default=None)
        p.add_argument("--out", required=True)
    p.add_argument("--lengths", default=None, help="comma-separated word counts, 'full' allowed")
    p.add_argument("--plot", default=None, help="also write an HTML chart here")
    p.add_argument("--tag", default=None)

    p = sub.add_parser("eval-classify", help="prompt-ensembled zero-shot classification")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--n-per-class", type=int)

    p = sub.add_parser("ablation-suite", help="pretrain once, fine-tune every variant, tabulate")
    _common(p)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--n", type=int, help="training scenes")
    p.add_argument("--seed", type=int)
    return parser


def _parse_lengths(text: Optional[str]) -> Optional[List[Any]]:
    if text is None:
        return None
    lengths: List[Any] = []
    for item in text.split(","):
        item = item.strip()
        if item == "full":
            lengths.append(item)
        elif item.isdigit():
            lengths.append(int(item))
        else:
            raise UsageError(f"--lengths: {item!r} is neither an integer nor 'full'")
    return lengths


def config_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Flags mapped onto dotted config keys; unset flags are None and ignored."""
    def get(name: str) -> Any:
        return getattr(args, name, None)

    overrides = {
        "stretch.mode": get("mode"),
        "stretch.ratio": get("ratio"),
        "stretch.keep": get("keep"),
        "train.variant": get("variant"),
        "train.epochs": get("epochs"),
        "train.learning_rate": get("lr"),
        "train.batch_size": get("batch_size"),
        "loss.alpha_loss": get("alpha"),
        "loss.k_components": get("k"),
        "eval.n_per_class": get("n_per_class"),
        "eval.probe_lengths": _parse_lengths(get("lengths")),
    }
    if args.command in ("gen-data", "ablation-suite"):
        overrides["data.seed"] = get("seed")
        overrides["data.n_scenes"] = get("n")
    elif args.command == "train":
        overrides["train.seed"] = get("seed")
    return overrides


def dispatch(runner: ExperimentRunner, args: argparse.Namespace) -> Dict[str, str]:
    paths = runner.config.paths
    command = args.command
    if command == "gen-data":
        return runner.gen_data(args.out or paths.dataset, args.vocab)
    if command == "stretch":
        return runner.stretch(args.in_path, args.out)
    if command == "train":
        return runner.train(args.data or paths.dataset, args.vocab or paths.vocab, args.out, args.init)
    if command == "eval-retrieval":
        return runner.eval_retrieval(args.ckpt, args.data or paths.eval_dataset, args.vocab or paths.vocab, args.out)
    if command == "eval-classify":
        return runner.eval_classify(args.ckpt, args.vocab or paths.vocab, args.out)
    if command == "probe-length":
        return runner.probe_length(args.ckpt, args.data or paths.eval_dataset, args.vocab or paths.vocab,
                                   args.out, plot=args.plot, tag=args.tag)
    if command == "ablation-suite":
        return runner.ablation_suite(args.out_dir)
    raise UsageError(f"unknown command {command!r}")


def configure_logging(level: Optional[str]) -> None:
    name = (level or os.getenv("LONGCLIP_LOG_LEVEL", "INFO")).upper()
    logging.basicConfig(level=getattr(logging, name, logging.INFO), format=LOG_FORMAT, force=True)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    configure_logging(args.log_level)

    try:
        config = load_config(args.config, config_overrides(args))
        artifacts = dispatch(ExperimentRunner(config), args)
    except (ConfigError, ContractViolation, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except LabError as e:
        logger.exception("%s failed", args.command)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILED

    missing = [p for p in artifacts.values() if not Path(p).exists()]
    if missing:
        print(f"error: artifacts not written: {missing}", file=sys.stderr)
        return EXIT_FAILED
    print(json.dumps(artifacts, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
