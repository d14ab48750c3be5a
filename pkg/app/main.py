import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv
from pydantic import ValidationError

from app.models.config_models import RunConfig
from app.models.report_models import ErrorResponse
from app.services.errors import BemError, SolverError
from app.services.run_service import EXIT_OK, EXIT_THRESHOLD, BemRunService
from app.services.settings import log_level

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)

EXIT_INPUT = 2

COMMANDS = {
    "solve": "solve",
    "verify": "verify",
    "measure-study": "measure_study",
    "operator-dump": "operator_dump",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mixed-bem",
        description="Galerkin boundary-element solver for mixed Dirichlet-Neumann Helmholtz/Poisson problems",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Log at DEBUG level")
    sub = parser.add_subparsers(dest="command", required=True)

    helps = {
        "solve": "Solve one mixed problem and evaluate it at the probe points",
        "verify": "Run the jump-relation suite, manufactured closure and radiation checks",
        "measure-study": "Mollify a measure source and follow the approximating solutions",
        "operator-dump": "Write S, K, K*, D and the mass matrices as binary dumps",
    }
    for name, text in helps.items():
        cmd = sub.add_parser(name, help=text)
        cmd.add_argument("--config", required=True, help="Path to the run configuration JSON")
        cmd.add_argument("--output-dir", default=None, help="Overrides output_dir from the config")
        cmd.add_argument("--threads", type=int, default=None, help="Overrides BEM_THREADS")

    sub.add_parser("schema", help="Print the JSON schema of the run configuration")
    return parser


def configure_logging(verbose: bool = False) -> None:
    level = logging.DEBUG if verbose else getattr(logging, log_level(), logging.INFO)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)


def _report_error(error: ErrorResponse, output_dir: Optional[Path]) -> None:
    payload = error.model_dump_json(indent=2)
    if output_dir is not None:
        output_dir.mkdir(parents=True, exist_ok=True)
        (output_dir / "error.json").write_text(payload)
    print(payload, file=sys.stderr)


def run(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, run one command and return its exit code."""
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)

    if args.command == "schema":
        print(json.dumps(RunConfig.model_json_schema(), indent=2))
        return EXIT_OK

    output_dir: Optional[Path] = Path(args.output_dir) if args.output_dir else None
    service = None
    try:
        config = RunConfig.from_file(args.config)
        if args.output_dir:
            config = config.model_copy(update={"output_dir": args.output_dir})
        output_dir = Path(config.output_dir)
        service = BemRunService(config, threads=args.threads)
        code = getattr(service, COMMANDS[args.command])()
    except ValidationError as e:
        logger.error(f"Invalid configuration {args.config}: {e.error_count()} error(s)")
        _report_error(
            ErrorResponse(
                error="Validation error",
                message=f"{args.config} does not match the run configuration schema",
                details={"errors": json.loads(e.json(include_url=False))},
            ),
            output_dir,
        )
        return EXIT_INPUT
    except SolverError as e:
        logger.error(f"Solve failed: {e}")
        details = {"condition_estimate": getattr(e, "condition_estimate", None)}
        _report_error(ErrorResponse(error=type(e).__name__, message=str(e), details=details), output_dir)
        code = EXIT_THRESHOLD
    except (ValueError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        details = None
        if isinstance(e, BemError) and getattr(e, "element_index", None) is not None:
            details = {"element_index": e.element_index}
        _report_error(ErrorResponse(error=type(e).__name__, message=str(e), details=details), output_dir)
        code = EXIT_INPUT

    if service is not None:
        service.write_manifest(args.command, code)
    logger.info(f"{args.command} finished with exit code {code}")
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
