"""Per-notebook validation orchestration and report emission.

One fresh kernel per notebook, cells executed strictly in document order.
Notebooks may be validated in parallel (``jobs``), cells never are. A
timeout or kernel death aborts the rest of that notebook: later cells are
reported as errors and not executed, because their inputs are suspect.
"""

from __future__ import annotations

import time
import xml.etree.ElementTree as ET
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

from . import kernel_client, sanitizer as sanitizer_mod
from .comparator import (
    ERROR_STATUS,
    FAIL,
    PASS,
    SKIP,
    CellVerdict,
    CheckPolicy,
    compare_cell,
    decide_check_policy,
)
from .notebook_model import (
    CODE,
    ConflictingDirectives,
    MalformedDocument,
    UnsupportedFormat,
    comment_prefix_for,
    extract_directives,
    parse_notebook,
)

_STATUS_WORDS = {PASS: "PASSED", FAIL: "FAILED", SKIP: "SKIPPED", ERROR_STATUS: "ERRORED"}
_PROGRESS_CHARS = {PASS: ".", FAIL: "F", SKIP: "s", ERROR_STATUS: "E"}


@dataclass(frozen=True)
class RunConfig:
    mode: str = "strict"
    sanitizer_path: Path | None = None
    kernel_override: str | None = None
    default_kernel: str = kernel_client.DEFAULT_KERNEL_NAME
    cell_timeout: float = 300.0
    startup_timeout: float = 60.0
    jobs: int = 1
    compare_images: bool = False
    verbose: bool = False

    def __post_init__(self):
        if self.mode not in ("strict", "lax"):
            raise ValueError(f"mode must be 'strict' or 'lax', not {self.mode!r}")
        if self.jobs < 1:
            raise ValueError("jobs must be at least 1")
        if self.cell_timeout <= 0 or self.startup_timeout <= 0:
            raise ValueError("timeouts must be positive")


@dataclass(frozen=True)
class Counts:
    passed: int = 0
    failed: int = 0
    skipped: int = 0
    errored: int = 0


def _tally(verdicts: list[CellVerdict]) -> Counts:
    return Counts(
        passed=sum(v.status == PASS for v in verdicts),
        failed=sum(v.status == FAIL for v in verdicts),
        skipped=sum(v.status == SKIP for v in verdicts),
        errored=sum(v.status == ERROR_STATUS for v in verdicts),
    )


@dataclass(frozen=True)
class NotebookResult:
    path: Path
    verdicts: tuple[CellVerdict, ...]
    counts: Counts
    wall_time: float
    file_error: str | None = None


def _load_sanitizer(config: RunConfig) -> sanitizer_mod.SanitizerConfig:
    if config.sanitizer_path is None:
        return sanitizer_mod.EMPTY
    return sanitizer_mod.parse_sanitizer_file(
        Path(config.sanitizer_path).read_text(encoding="utf-8")
    )


def validate_notebook(
    path: Path | str,
    config: RunConfig,
    sanitizer: sanitizer_mod.SanitizerConfig | None = None,
) -> NotebookResult:
    """Re-execute one notebook on a fresh kernel and judge every code cell.

    Whole-file problems (unparseable file, unknown kernel, startup failure)
    produce a result with ``file_error`` set and no verdicts.
    """
    start = time.monotonic()
    path = Path(path)
    if sanitizer is None:
        sanitizer = _load_sanitizer(config)

    def file_failure(message: str) -> NotebookResult:
        return NotebookResult(path, (), Counts(), time.monotonic() - start, file_error=message)

    try:
        raw = path.read_bytes()
    except OSError as exc:
        return file_failure(f"cannot read file: {exc}")
    try:
        doc = parse_notebook(raw)
    except (MalformedDocument, UnsupportedFormat) as exc:
        return file_failure(str(exc))

    kernel_name = config.kernel_override or doc.kernel_name or config.default_kernel
    try:
        spec = kernel_client.resolve_kernelspec(kernel_name, default=config.default_kernel)
    except kernel_client.KernelNotFound as exc:
        return file_failure(str(exc))
    try:
        handle = kernel_client.start_kernel(spec, config.startup_timeout)
    except (kernel_client.SpawnFailure, kernel_client.StartupTimeout) as exc:
        return file_failure(f"kernel failed to start: {exc}")

    comment_prefix = comment_prefix_for(doc.language or spec.language)
    verdicts: list[CellVerdict] = []
    abort_reason: str | None = None
    try:
        for cell in doc.cells:
            if cell.kind != CODE:
                continue
            if abort_reason is not None:
                verdicts.append(
                    CellVerdict(ERROR_STATUS, cell.index, None, f"not executed: {abort_reason}", 0.0)
                )
                continue
            try:
                directives = extract_directives(cell, comment_prefix)
            except ConflictingDirectives as exc:
                verdicts.append(CellVerdict(ERROR_STATUS, cell.index, None, str(exc), 0.0))
                continue
            policy = decide_check_policy(config.mode, directives)
            if policy is CheckPolicy.SKIP:
                verdicts.append(CellVerdict(SKIP, cell.index, None, "skipped by marker", 0.0))
                continue
            outcome = handle.execute(cell.source, config.cell_timeout)
            # Whether an expected exception's type is compared depends on
            # whether this cell's output would have been checked at all.
            plain = replace(directives, raises_exception=False, skip=False)
            check_error_name = decide_check_policy(config.mode, plain) is CheckPolicy.CHECK_OUTPUT
            verdicts.append(
                compare_cell(
                    cell.outputs,
                    outcome,
                    policy,
                    sanitizer,
                    config.compare_images,
                    cell_index=cell.index,
                    check_error_name=check_error_name,
                )
            )
            if outcome.status == kernel_client.STATUS_TIMEOUT:
                abort_reason = f"cell {cell.index} timed out"
            elif outcome.status == kernel_client.STATUS_KERNEL_DIED:
                abort_reason = f"the kernel died while executing cell {cell.index}"
    finally:
        handle.shutdown()

    return NotebookResult(path, tuple(verdicts), _tally(verdicts), time.monotonic() - start)


def run_paths(
    paths: list[Path],
    config: RunConfig,
    sanitizer: sanitizer_mod.SanitizerConfig | None = None,
) -> list[NotebookResult]:
    """Validate many notebooks, up to ``jobs`` at a time, in stable order."""
    if sanitizer is None:
        sanitizer = _load_sanitizer(config)
    if config.jobs == 1 or len(paths) <= 1:
        return [validate_notebook(path, config, sanitizer) for path in paths]
    with ThreadPoolExecutor(max_workers=config.jobs) as pool:
        return list(pool.map(lambda p: validate_notebook(p, config, sanitizer), paths))


def _stem(path: Path) -> str:
    return path.stem


def emit_console_report(results: list[NotebookResult], verbose: bool = False) -> str:
    """Human-readable run report: per-cell (or per-file) lines, a summary
    line, and the diff of every failed cell beneath the summary."""
    lines: list[str] = []
    if not results:
        lines.append("no notebooks collected")

    passed = failed = skipped = errored = 0
    total_time = 0.0
    for result in results:
        total_time += result.wall_time
        stem = _stem(result.path)
        if result.file_error is not None:
            errored += 1
            lines.append(f"{stem}::ipynb ERRORED: {result.file_error}")
            continue
        counts = result.counts
        passed += counts.passed
        failed += counts.failed
        skipped += counts.skipped
        errored += counts.errored
        if verbose:
            for verdict in result.verdicts:
                lines.append(f"{stem}::ipynb::Cell {verdict.cell_index} {_STATUS_WORDS[verdict.status]}")
        else:
            progress = "".join(_PROGRESS_CHARS[v.status] for v in result.verdicts)
            lines.append(f"{stem}::ipynb {progress}")

    summary = [f"{passed} passed"]
    if failed:
        summary.append(f"{failed} failed")
    if skipped:
        summary.append(f"{skipped} skipped")
    if errored:
        summary.append(f"{errored} errored")
    lines.append(f"{', '.join(summary)} in {total_time:.2f}s")

    for result in results:
        stem = _stem(result.path)
        for verdict in result.verdicts:
            if verdict.status == FAIL:
                lines.append("")
                lines.append(f"FAILED {stem}::ipynb::Cell {verdict.cell_index}: {verdict.reason}")
                if verdict.diff:
                    lines.append(verdict.diff)
            elif verdict.status == ERROR_STATUS:
                lines.append("")
                lines.append(f"ERRORED {stem}::ipynb::Cell {verdict.cell_index}: {verdict.reason}")
    return "\n".join(lines)


def _xml_safe(text: str) -> str:
    """Strip characters XML 1.0 cannot carry (arbitrary cell output may
    contain control bytes)."""
    return "".join(
        ch for ch in text if ch in "\t\n\r" or 0x20 <= ord(ch) <= 0xD7FF or 0xE000 <= ord(ch) <= 0xFFFD
    )


def emit_junit_xml(results: list[NotebookResult]) -> bytes:
    """JUnit XML: one testsuite per notebook, one testcase per code cell."""
    root = ET.Element("testsuites")
    for result in results:
        stem = _stem(result.path)
        suite = ET.SubElement(root, "testsuite", name=stem, time=f"{result.wall_time:.3f}")
        if result.file_error is not None:
            suite.set("tests", "1")
            suite.set("failures", "0")
            suite.set("errors", "1")
            suite.set("skipped", "0")
            case = ET.SubElement(suite, "testcase", classname=stem, name=str(result.path))
            ET.SubElement(case, "error", message=_xml_safe(result.file_error))
            continue
        counts = result.counts
        suite.set("tests", str(len(result.verdicts)))
        suite.set("failures", str(counts.failed))
        suite.set("errors", str(counts.errored))
        suite.set("skipped", str(counts.skipped))
        for verdict in result.verdicts:
            case = ET.SubElement(
                suite,
                "testcase",
                classname=stem,
                name=f"Cell {verdict.cell_index}",
                time=f"{verdict.duration:.3f}",
            )
            if verdict.status == FAIL:
                failure = ET.SubElement(case, "failure", message=_xml_safe(verdict.reason))
                failure.text = _xml_safe(verdict.diff or verdict.reason)
            elif verdict.status == SKIP:
                ET.SubElement(case, "skipped", message=_xml_safe(verdict.reason))
            elif verdict.status == ERROR_STATUS:
                ET.SubElement(case, "error", message=_xml_safe(verdict.reason))
    return ET.tostring(root, encoding="utf-8", xml_declaration=True)


def exit_code(results: list[NotebookResult]) -> int:
    """0 when every verdict is pass or skip and no file errored, else 1.

    Exit code 2 is reserved for usage and configuration errors, raised by the
    CLI layer before any notebook runs.
    """
    for result in results:
        if result.file_error is not None:
            return 1
        if any(v.status in (FAIL, ERROR_STATUS) for v in result.verdicts):
            return 1
    return 0
