"""
Command line entry point:

    python cli.py simulate <scenario> --config <path> --out <dir> --seed <u64> --workers <n> [--profile ci|fast|paper]
    python cli.py simulate --from-manifest <runs/x/manifest.json> --out <dir>

Exit codes: 0 ok, 1 configuration, 2 runtime failure, 3 abort budget exceeded.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import ValidationError

from config import configure_logging, get_settings, resolve_workers
from errors import ConfigError, SimulationError
from scenarios import load_manifest, replay_manifest, run_scenario
from schemas import SCENARIO_NAMES, Scenario

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="simulate", description="Two-phase spinor condensate metrology simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    simulate = sub.add_parser("simulate", help="Run one scenario")
    simulate.add_argument("scenario", nargs="?", choices=SCENARIO_NAMES)
    simulate.add_argument("--config", help="JSON file with scenario parameters")
    simulate.add_argument("--out", help="Output directory")
    simulate.add_argument("--seed", type=int, help="Master seed (unsigned 64-bit)")
    simulate.add_argument("--workers", type=int, help="Worker processes (overrides SIM_WORKERS)")
    simulate.add_argument("--profile", choices=("ci", "fast", "paper"), help="Default sizes")
    simulate.add_argument("--from-manifest", dest="manifest", help="Replay the run recorded in a manifest")
    simulate.add_argument("--log-level", help="Logging level (overrides SIM_LOG_LEVEL)")
    return parser


def read_config(path: Optional[str]) -> Dict[str, Any]:
    """A config file holds either a bare parameter block or a full scenario (``{"params": {...}, "seed": ...}``)."""
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"Cannot read config {path}: {e}")
    if not isinstance(data, dict):
        raise ConfigError(f"Config {path} must hold a JSON object")
    if "params" in data:
        return data
    return {"params": data}


def build_scenario(args: argparse.Namespace) -> Scenario:
    if not args.scenario:
        raise ConfigError("A scenario name is required unless --from-manifest is given")
    settings = get_settings()
    data = read_config(args.config)
    data.setdefault("profile", settings.profile)
    data.setdefault("out_dir", str(Path(settings.output_dir) / args.scenario))
    data["name"] = args.scenario
    if args.out:
        data["out_dir"] = args.out
    if args.seed is not None:
        data["seed"] = args.seed
    if args.profile:
        data["profile"] = args.profile
    data["workers"] = resolve_workers(args.workers if args.workers is not None else data.get("workers"))
    return Scenario.model_validate(data)


def simulate(args: argparse.Namespace) -> int:
    if args.manifest:
        manifest = load_manifest(args.manifest)
        out_dir = args.out or str(Path(args.manifest).parent / "replay")
        _, mismatched = replay_manifest(manifest, out_dir, resolve_workers(args.workers))
        if mismatched:
            logger.error(f"Replay of {manifest.scenario} is not bit-identical: {', '.join(mismatched)}")
            return EXIT_RUNTIME
        logger.info(f"Replay of {manifest.scenario} matches the recorded checksums")
        return EXIT_OK
    manifest, result = run_scenario(build_scenario(args))
    print(json.dumps(result.summary, indent=2, sort_keys=True, default=float))
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return simulate(args)
    except SimulationError as e:
        logger.error(f"{type(e).__name__}: {e}")
        if e.diagnostics:
            logger.error(f"Diagnostics: {e.diagnostics}")
        return e.exit_code
    except (ValidationError, json.JSONDecodeError) as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
