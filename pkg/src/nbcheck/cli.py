"""Command-line entry point: flag parsing, notebook discovery, process exit.

Exit codes: 0 all cells passed or were skipped, 1 any failure or error,
2 usage or configuration problems.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import runner, sanitizer as sanitizer_mod
from .kernel_client import DEFAULT_KERNEL_NAME

ENV_DEFAULT_KERNEL = "NBCHECK_DEFAULT_KERNEL"
ENV_CELL_TIMEOUT = "NBCHECK_CELL_TIMEOUT"
ENV_STARTUP_TIMEOUT = "NBCHECK_STARTUP_TIMEOUT"


class PathNotFound(Exception):
    """An input path does not exist."""


def discover_notebooks(paths) -> list[Path]:
    """Expand files and directories into the sorted, de-duplicated list of
    notebooks to validate.

    Files are taken as given; directories are walked recursively for
    ``*.ipynb``, skipping anything under an ``.ipynb_checkpoints`` directory.
    """
    found: list[Path] = []
    for raw in paths:
        path = Path(raw)
        if not path.exists():
            raise PathNotFound(f"path does not exist: {path}")
        if path.is_dir():
            for candidate in path.rglob("*.ipynb"):
                if ".ipynb_checkpoints" in candidate.parts:
                    continue
                found.append(candidate)
        else:
            found.append(path)
    found.sort(key=str)
    unique: list[Path] = []
    seen: set[str] = set()
    for path in found:
        marker = str(path.resolve())
        if marker not in seen:
            seen.add(marker)
            unique.append(path)
    return unique


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nbcheck",
        description=(
            "Re-execute every code cell of the given Jupyter notebooks on a live "
            "kernel and verify the computed outputs against the outputs saved in "
            "the file, reporting each cell as a test."
        ),
    )
    parser.add_argument("paths", nargs="*", metavar="PATH", help="notebook files or directories")
    mode = parser.add_mutually_exclusive_group()
    mode.add_argument(
        "--nbval", action="store_true", help="strict mode: check all output unless a cell opts out"
    )
    mode.add_argument(
        "--nbval-lax",
        action="store_true",
        help="lax mode: only require error-free execution unless a cell opts in",
    )
    parser.add_argument("--sanitize-with", metavar="FILE", help="regex sanitize file applied to both sides")
    parser.add_argument("--kernel", metavar="NAME", help="kernel to use, overriding notebook metadata")
    parser.add_argument(
        "--default-kernel",
        metavar="NAME",
        help=f"kernel when the notebook names none (default {DEFAULT_KERNEL_NAME}, env {ENV_DEFAULT_KERNEL})",
    )
    parser.add_argument(
        "--cell-timeout",
        type=float,
        metavar="SECONDS",
        help=f"per-cell execution deadline (default 300, env {ENV_CELL_TIMEOUT})",
    )
    parser.add_argument(
        "--startup-timeout",
        type=float,
        metavar="SECONDS",
        help=f"kernel startup deadline (default 60, env {ENV_STARTUP_TIMEOUT})",
    )
    parser.add_argument("--jobs", type=int, default=1, metavar="N", help="notebooks validated in parallel")
    parser.add_argument(
        "--compare-images", action="store_true", help="also compare PNG/JPEG payloads byte-exact"
    )
    parser.add_argument("--junit-xml", metavar="FILE", help="write a JUnit XML report to FILE")
    parser.add_argument("-v", "--verbose", action="store_true", help="one report line per cell")
    return parser


def _env_float(name: str, fallback: float) -> float:
    raw = os.environ.get(name)
    if raw is None:
        return fallback
    try:
        return float(raw)
    except ValueError:
        raise ValueError(f"environment variable {name} is not a number: {raw!r}") from None


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    if args.nbval_lax:
        mode = "lax"
    else:
        mode = "strict"
        if not args.nbval:
            print("nbcheck: no mode flag given, defaulting to --nbval (strict)", file=sys.stderr)

    try:
        cell_timeout = args.cell_timeout if args.cell_timeout is not None else _env_float(ENV_CELL_TIMEOUT, 300.0)
        startup_timeout = (
            args.startup_timeout if args.startup_timeout is not None else _env_float(ENV_STARTUP_TIMEOUT, 60.0)
        )
        config = runner.RunConfig(
            mode=mode,
            sanitizer_path=Path(args.sanitize_with) if args.sanitize_with else None,
            kernel_override=args.kernel,
            default_kernel=args.default_kernel
            or os.environ.get(ENV_DEFAULT_KERNEL)
            or DEFAULT_KERNEL_NAME,
            cell_timeout=cell_timeout,
            startup_timeout=startup_timeout,
            jobs=args.jobs,
            compare_images=args.compare_images,
            verbose=args.verbose,
        )
    except ValueError as exc:
        print(f"nbcheck: {exc}", file=sys.stderr)
        return 2

    if config.sanitizer_path is not None:
        try:
            sanitizer = sanitizer_mod.parse_sanitizer_file(
                config.sanitizer_path.read_text(encoding="utf-8")
            )
        except OSError as exc:
            print(f"nbcheck: cannot read sanitize file: {exc}", file=sys.stderr)
            return 2
        except sanitizer_mod.ConfigError as exc:
            print(f"nbcheck: invalid sanitize file: {exc}", file=sys.stderr)
            return 2
    else:
        sanitizer = sanitizer_mod.EMPTY

    try:
        notebooks = discover_notebooks(args.paths)
    except PathNotFound as exc:
        print(f"nbcheck: {exc}", file=sys.stderr)
        return 2

    results = runner.run_paths(notebooks, config, sanitizer)
    print(runner.emit_console_report(results, verbose=config.verbose))

    if args.junit_xml:
        try:
            Path(args.junit_xml).write_bytes(runner.emit_junit_xml(results))
        except OSError as exc:
            print(f"nbcheck: cannot write JUnit XML: {exc}", file=sys.stderr)
            return 2

    return runner.exit_code(results)


if __name__ == "__main__":
    sys.exit(main())
