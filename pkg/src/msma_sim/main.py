import sys
import argparse
import logging
from pathlib import Path

from .errors import ConfigError, MsmaError
from .evaluation import evaluate_frames
from .fusion import EgoModel
from .harness import RunSpec, export_labels, run, run_matrix
from .network import TopologyKind
from .settings import Settings, load_settings

# Setup Logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

DEFAULT_CONFIG = "config.yaml"
SCENARIO_SUFFIXES = (".json", ".yaml", ".yml")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _settings(path):
    if path is None:
        if Path(DEFAULT_CONFIG).exists():
            return load_settings(DEFAULT_CONFIG)
        logger.info(f"No {DEFAULT_CONFIG} found, using built-in settings")
        return Settings()
    return load_settings(path)


def _scenario_files(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise ConfigError(f"scenario directory not found: {directory}")
    files = sorted(p for p in directory.iterdir() if p.suffix in SCENARIO_SUFFIXES)
    if not files:
        raise ConfigError(f"no scenario documents in {directory}")
    return files


def cmd_simulate(args, settings):
    spec = RunSpec(
        scenario=Path(args.scenario),
        ego_model=EgoModel.parse(args.ego),
        topology=TopologyKind.parse(args.topology),
        seed=args.seed,
        out_dir=Path(args.out),
        log_frames=args.log_frames,
        log_messages=args.log_messages,
    )
    run(spec, settings)


def cmd_matrix(args, settings):
    matrix = run_matrix(_scenario_files(args.scenarios), args.seeds, settings, out_dir=args.out)
    print(matrix.format_table())


def cmd_export_labels(args, settings):
    export_labels(Path(args.scenario), Path(args.out), settings)


def cmd_eval(args, settings):
    metrics = evaluate_frames(Path(args.frames), settings.evaluation)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        metrics.write_json(out / "metrics.json", {"frames": str(args.frames),
                                                  "evaluation": settings.evaluation.to_dict()})
        metrics.write_csv(out / "metrics.csv")
    for label, ap in sorted(metrics.per_class_ap.items()):
        print(f"{label:<12} {'n/a' if ap is None else f'{ap:.4f}'}")
    print(f"{'mAP':<12} {'n/a' if metrics.mean_ap is None else f'{metrics.mean_ap:.4f}'}")


def build_parser():
    parser = argparse.ArgumentParser(description="Multi-sensor multi-agent tracking simulator")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help=f"Path to settings file (default: {DEFAULT_CONFIG})")
    common.add_argument("--verbose", action="store_true", help="Debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="Run one scenario")
    p.add_argument("--scenario", required=True, help="Scenario document")
    p.add_argument("--ego", choices=["local", "track-fusion", "ddf"], default="local")
    p.add_argument("--topology", choices=["none", "minor", "major"], default="none")
    p.add_argument("--seed", type=int, default=None, help="Override the scenario seed")
    p.add_argument("--out", required=True, help="Output directory")
    p.add_argument("--log-frames", action="store_true", help="Write frames.ndjson")
    p.add_argument("--log-messages", action="store_true", help="Write messages.ndjson")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("matrix", parents=[common], help="Every ego model x topology over scenarios and seeds")
    p.add_argument("--scenarios", required=True, help="Directory of scenario documents")
    p.add_argument("--seeds", type=int, default=10, help="Seeds per scenario")
    p.add_argument("--out", required=True, help="Output directory")
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("export-labels", parents=[common], help="Depth images and visibility labels")
    p.add_argument("--scenario", required=True, help="Scenario document")
    p.add_argument("--out", required=True, help="Output directory")
    p.set_defaults(func=cmd_export_labels)

    p = sub.add_parser("eval", parents=[common], help="Re-score a stored frame log")
    p.add_argument("--frames", required=True, help="frames.ndjson from simulate --log-frames")
    p.add_argument("--out", default=None, help="Optional output directory for metrics")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    try:
        settings = _settings(args.config)
        args.func(args, settings)
    except (ConfigError, FileNotFoundError) as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except (MsmaError, OSError) as e:
        logger.error(f"Run failed: {e}")
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
