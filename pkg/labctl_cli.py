import argparse
import json
import sys
from typing import Callable, Dict, List, Optional

from loguru import logger
from pydantic import ValidationError

from evalstats import write_accuracy_csv
from labctl import RECIPES, REGIMES, ConfigError, ExperimentConfig, Lab, env_defaults, load_config, run_recipe
from worldgen import build_world, render_corpus, write_world

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_VALIDATION = 2

TRAIN_STAGES = ["base", "target", "lit", "inverter_multi", "inverter_single", "foreign", "extended_lit"]


def parse_layers(text: str) -> List[int]:
    """"1,2,3" -> [1, 2, 3]."""
    try:
        layers = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"Invalid layer list: {text!r}")
    if not layers:
        raise argparse.ArgumentTypeError("Layer list is empty")
    return layers


class UsageError(Exception):
    """Raised by the parser instead of exiting."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


class LabCLI:
    def __init__(self):
        self.commands: Dict[str, Callable[[argparse.Namespace, ExperimentConfig], None]] = {
            "gen-world": self.gen_world,
            "train": self.train,
            "invert": self.invert,
            "probe": self.probe,
            "eval": self.evaluate,
            "report": self.report,
            "recipe": self.recipe,
        }
        self.parser = self.build_parser()

    def build_parser(self) -> argparse.ArgumentParser:
        common = _Parser(add_help=False)
        common.add_argument("--config", metavar="PATH", help="TOML experiment config")
        common.add_argument("--seed", type=int, help="master seed")
        common.add_argument("--out", metavar="DIR", help="run directory")
        common.add_argument("--layers", type=parse_layers, metavar="LIST", help="source layers, e.g. 1,2,3,4")
        common.add_argument("--mode", choices=REGIMES, default="plain", help="world regime")
        common.add_argument("--force", action="store_true", help="rebuild artifacts with a stale fingerprint")
        common.add_argument("--log-level", help="loguru level (default LABCTL_LOG_LEVEL or INFO)")

        parser = _Parser(prog="labctl", description="Activation verbalization lab")
        sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
        sub.add_parser("gen-world", parents=[common], help="generate a world, its personas and documents")
        train = sub.add_parser("train", parents=[common], help="train (or reuse) one model")
        train.add_argument("stage", choices=TRAIN_STAGES)
        sub.add_parser("invert", parents=[common], help="reconstruct held-out excerpts with both inverters")
        sub.add_parser("probe", parents=[common], help="train and score attribute probes on a regime")
        sub.add_parser("eval", parents=[common], help="zero-shot, patchscope and decoder accuracy on a regime")
        report = sub.add_parser("report", parents=[common], help="write report.json for an evaluated recipe")
        report.add_argument("name", choices=RECIPES)
        recipe = sub.add_parser("recipe", parents=[common], help="run a recipe end to end")
        recipe.add_argument("name", choices=RECIPES)
        return parser

    def configure_logging(self, level: Optional[str]) -> None:
        logger.remove()
        logger.add(sys.stderr, level=(level or env_defaults()["log_level"]).upper())

    def load(self, args: argparse.Namespace) -> ExperimentConfig:
        overrides = {"seed": args.seed, "out_dir": args.out, "source_layers": args.layers}
        if args.command in ("recipe", "report"):
            overrides["recipe"] = args.name
        return load_config(args.config, **overrides)

    def gen_world(self, args: argparse.Namespace, config: ExperimentConfig) -> None:
        cfg = config.world
        world, personas = build_world(config.seed, args.mode, cfg.n_personas, cfg.labels_per_attribute)
        documents = render_corpus(personas, cfg.n_bios, cfg.n_interviews, config.seed)
        paths = write_world(f"{config.out_dir}/world", world, personas, documents, name=args.mode)
        for path in paths:
            print(path)

    def train(self, args: argparse.Namespace, config: ExperimentConfig) -> None:
        lab = Lab(config, args.force)
        builders = {
            "base": lab.base,
            "target": lambda: lab.target(args.mode),
            "lit": lab.lit,
            "inverter_multi": lambda: lab.inverter("multi"),
            "inverter_single": lambda: lab.inverter("single"),
            "foreign": lab.foreign,
            "extended_lit": lab.extended_lit,
        }
        with lab.locked():
            model = builders[args.stage]()
        print(f"{model.model_id}\t{model.provenance}")

    def invert(self, args: argparse.Namespace, config: ExperimentConfig) -> None:
        lab = Lab(config, args.force)
        with lab.locked():
            scores = lab.inversion_holdout(lab.run_dir / "inversion")
        for kind, score in sorted(scores.items()):
            print(f"{kind}\t{score:.2f}")

    def probe(self, args: argparse.Namespace, config: ExperimentConfig) -> None:
        lab = Lab(config, args.force)
        layers = args.layers or [config.lit_layer()]
        rows = []
        out = lab.run_dir / f"probe_{args.mode}"
        with lab.locked():
            for layer in layers:
                layer_rows, _ = lab.probe_regime(args.mode, layer, out)
                rows += [(method, task, layer, acc, n) for method, task, col, acc, n in layer_rows if col != "average"]
        path = write_accuracy_csv(out / "accuracy.csv", rows, config.fingerprint(), config.seed)
        print(path)

    def evaluate(self, args: argparse.Namespace, config: ExperimentConfig) -> None:
        lab = Lab(config, args.force)
        with lab.locked():
            rows, _ = lab.evaluate_regime(args.mode, config.source_layers())
        path = write_accuracy_csv(lab.run_dir / f"eval_{args.mode}" / "accuracy.csv", rows, config.fingerprint(), config.seed)
        print(path)

    def report(self, args: argparse.Namespace, config: ExperimentConfig) -> None:
        lab = Lab(config, args.force)
        results_path = lab.run_dir / args.name / "results.json"
        if not results_path.exists():
            raise FileNotFoundError(f"No results for {args.name} in {lab.run_dir}; run the recipe first")
        with lab.locked():
            # cached evaluation; registers the stage fingerprints the report records
            report = lab.report(args.name, lab.evaluate(args.name))
        print(json.dumps(report.acceptance, sort_keys=True, indent=2))

    def recipe(self, args: argparse.Namespace, config: ExperimentConfig) -> None:
        report = run_recipe(config, args.force)
        print(f"{report.recipe}\t{report.fingerprint}")
        print(json.dumps(report.acceptance, sort_keys=True, indent=2))

    def run(self, argv: Optional[List[str]] = None) -> int:
        try:
            args = self.parser.parse_args(argv)
        except UsageError as e:
            print(f"labctl: error: {e}", file=sys.stderr)
            return EXIT_VALIDATION
        except SystemExit as e:
            # --help
            return EXIT_OK if not e.code else EXIT_VALIDATION
        self.configure_logging(args.log_level)
        try:
            config = self.load(args)
            self.commands[args.command](args, config)
        except (ConfigError, ValidationError) as e:
            logger.error("invalid configuration: {}", e)
            return EXIT_VALIDATION
        except Exception as e:
            logger.exception("labctl {} failed: {}", args.command, e)
            return EXIT_RUNTIME
        return EXIT_OK


def main() -> None:
    sys.exit(LabCLI().run())


if __name__ == "__main__":
    main()
