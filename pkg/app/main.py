import argparse
import sys
from pathlib import Path
from typing import Optional

from cli.commands import COMMANDS, execute


def _seed(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vdw-coherence",
        description="Hahn-echo coherence of spin qubits in layered materials and heterostructures.",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", type=Path, help="TOML run configuration")
    parser.add_argument("--out", type=Path, help="output directory (default: runs/<command>)")
    parser.add_argument("--threads", type=int, default=1, help="worker threads")
    parser.add_argument("--seed", type=_seed, help="master seed, overrides ensemble.master_seed")
    parser.add_argument("--name", help="material to describe (materials command)")
    parser.add_argument("--verbose", action="store_true", help="also log to stderr")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    out_dir = args.out
    if out_dir is None and args.command != "materials":
        out_dir = Path("runs") / args.command
    if args.threads < 1:
        print("--threads must be at least 1", file=sys.stderr)
        return 2

    result = execute(
        args.command,
        config_path=args.config,
        out_dir=out_dir,
        threads=args.threads,
        seed=args.seed,
        verbose=args.verbose,
        name=args.name,
    )
    stream = sys.stdout if result.success else sys.stderr
    print(result.message, file=stream)
    if result.details:
        print(result.details, file=stream)
    return result.exit_code


if __name__ == "__main__":
    raise SystemExit(main())
