import argparse
import logging
import os
import sys
from typing import List, Optional

from dotenv import load_dotenv
from numpy.linalg import LinAlgError
from pydantic import ValidationError

from src.xcoreg.errors import VolumeFormatError, XCoRegError
from src.xcoreg.pipeline import cmd_evaluate, cmd_register, cmd_synth, register_many

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


def setup_logging(level: str = "INFO", log_file: Optional[str] = None):
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stdout)]
    if log_file:
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(
        level=getattr(logging, level.upper()),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=handlers,
        force=True,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Groupwise multimodal image registration")
    parser.add_argument(
        "--log-level",
        type=str,
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Logging level (default: INFO)",
    )
    parser.add_argument("--log-file", type=str, default=None, help="Also write the log to this file")
    parser.add_argument("--seed", type=int, default=None, help="Override the seed (else XCOREG_SEED, else manifest)")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="Generate a synthetic case")
    synth.add_argument("spec", help="Synthesis spec JSON")
    synth.add_argument("--out", required=True, help="Output directory (created if missing)")

    register = sub.add_parser("register", help="Register the volumes of one or more manifests")
    register.add_argument("manifests", nargs="+", help="Case manifest JSON files")
    register.add_argument("--config", default=None, help="Registration config JSON")
    register.add_argument("--out", default=None, help="Run directory (single manifest only)")
    register.add_argument("--method", default=None, help="Metric key overriding the config")
    register.add_argument("--jobs", type=int, default=1, help="Parallel processes across manifests")

    evaluate = sub.add_parser("evaluate", help="Score estimated transforms against the ground truth")
    evaluate.add_argument("manifest", help="Case manifest JSON")
    evaluate.add_argument("--estimated", default=None, help="Run directory; omit to score the initial misalignment")
    evaluate.add_argument("--report", default=None, help="Report CSV (default: report.csv next to the manifest)")
    evaluate.add_argument("--no-pdf", action="store_true", help="Skip the PDF summary")
    return parser


def _seed(args) -> Optional[int]:
    if args.seed is not None:
        return args.seed
    env_seed = os.getenv("XCOREG_SEED")
    return int(env_seed) if env_seed else None


def run(args) -> None:
    seed = _seed(args)
    if args.command == "synth":
        cmd_synth(args.spec, args.out, seed=seed)
    elif args.command == "register":
        if args.out and len(args.manifests) > 1:
            raise ValueError("--out applies to a single manifest")
        if args.out:
            cmd_register(args.manifests[0], args.config, args.out, args.method, seed)
        else:
            register_many(args.manifests, args.config, args.method, seed, jobs=args.jobs)
    elif args.command == "evaluate":
        cmd_evaluate(args.manifest, args.estimated, args.report, pdf=not args.no_pdf)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)

    setup_logging(args.log_level, args.log_file)
    logger = logging.getLogger(__name__)

    load_dotenv()

    try:
        run(args)
    except LinAlgError as e:
        logger.error(f"Numerical failure: {e}")
        return EXIT_NUMERICAL
    except (ValidationError, ValueError) as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_USAGE
    except (OSError, VolumeFormatError) as e:
        logger.error(f"I/O failure: {e}")
        return EXIT_IO
    except XCoRegError as e:
        logger.error(f"Numerical failure: {e}")
        return EXIT_NUMERICAL
    except KeyboardInterrupt:
        logger.info("Stopped by user")
        return 130
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
