"""Output normalization, check-policy resolution, comparison, diff rendering.

Everything here is pure: the runner decides what to execute, this module
decides what "same output" means. Text is compared after newline
normalization, per-line trailing-whitespace stripping and sanitizer
substitution on both sides; images are compared byte-exact and only when
image comparison is enabled.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from difflib import SequenceMatcher
from enum import Enum

from . import sanitizer as sanitizer_mod
from .notebook_model import DISPLAY_DATA, ERROR, EXECUTE_RESULT, STREAM, CellOutput

PASS = "pass"
FAIL = "fail"
SKIP = "skip"
ERROR_STATUS = "error"

STREAM_STDOUT = "stream_stdout"
STREAM_STDERR = "stream_stderr"
TEXT_RESULT = "text_result"
ERROR_NAME = "error_name"
IMAGE_PNG = "image_png"
IMAGE_JPEG = "image_jpeg"

_IMAGE_KINDS = (IMAGE_PNG, IMAGE_JPEG)


class CheckPolicy(Enum):
    SKIP = "skip"
    EXECUTE_ONLY = "execute_only"
    CHECK_OUTPUT = "check_output"
    EXPECT_EXCEPTION = "expect_exception"


@dataclass(frozen=True)
class NormalizedOutput:
    kind: str
    payload: str | bytes


@dataclass(frozen=True)
class CellVerdict:
    """Per-cell test result. ``diff`` is set only for output-mismatch fails."""

    status: str
    cell_index: int
    diff: str | None
    reason: str
    duration: float


def decide_check_policy(mode: str, directives) -> CheckPolicy:
    """Resolve run mode plus cell markers into a single check policy.

    Skip wins over everything, an expected exception over output checking.
    Strict mode checks output unless ignored; lax mode checks only when asked.
    """
    if directives.skip:
        return CheckPolicy.SKIP
    if directives.raises_exception:
        return CheckPolicy.EXPECT_EXCEPTION
    if mode == "strict":
        return CheckPolicy.EXECUTE_ONLY if directives.ignore_output else CheckPolicy.CHECK_OUTPUT
    return CheckPolicy.CHECK_OUTPUT if directives.check_output else CheckPolicy.EXECUTE_ONLY


def _normalize_text(text: str) -> str:
    text = text.replace("\r\n", "\n").replace("\r", "\n")
    return "\n".join(line.rstrip() for line in text.split("\n"))


def normalize_outputs(
    outputs: list[CellOutput] | tuple[CellOutput, ...], compare_images: bool = False
) -> list[NormalizedOutput]:
    """Reduce raw outputs to the comparable sequence.

    Adjacent same-name streams are concatenated before normalization so kernel
    chunking cannot affect comparison. Rich outputs contribute their
    text/plain payload (and image payloads only when ``compare_images``);
    errors contribute the exception name; anything without a comparable
    payload is dropped.
    """
    normalized: list[NormalizedOutput] = []
    stream_name: str | None = None
    stream_chunks: list[str] = []

    def flush_stream() -> None:
        nonlocal stream_name, stream_chunks
        if stream_name is not None:
            text = "".join(stream_chunks)
            if text:
                normalized.append(NormalizedOutput(f"stream_{stream_name}", _normalize_text(text)))
        stream_name = None
        stream_chunks = []

    for out in outputs:
        if out.variant == STREAM:
            if out.stream_name != stream_name:
                flush_stream()
                stream_name = out.stream_name
            stream_chunks.append(out.text or "")
            continue
        flush_stream()
        if out.variant in (EXECUTE_RESULT, DISPLAY_DATA):
            if out.text is not None:
                normalized.append(NormalizedOutput(TEXT_RESULT, _normalize_text(out.text)))
            if compare_images:
                if out.image_png is not None:
                    normalized.append(NormalizedOutput(IMAGE_PNG, out.image_png))
                if out.image_jpeg is not None:
                    normalized.append(NormalizedOutput(IMAGE_JPEG, out.image_jpeg))
        elif out.variant == ERROR:
            normalized.append(NormalizedOutput(ERROR_NAME, out.ename or ""))
        # unknown variants: nothing comparable, dropped
    flush_stream()
    return normalized


def _sanitize(seq: list[NormalizedOutput], config: sanitizer_mod.SanitizerConfig) -> list[NormalizedOutput]:
    return [
        out if out.kind in _IMAGE_KINDS
        else NormalizedOutput(out.kind, sanitizer_mod.apply(config, out.payload))
        for out in seq
    ]


def _flatten(seq: list[NormalizedOutput]) -> list[str]:
    """Render a normalized sequence as diffable lines.

    Each output gets a kind banner so mismatches that differ only in kind
    still produce visible +/- lines; images become a single note line with
    byte count and digest.
    """
    lines: list[str] = []
    for out in seq:
        if out.kind in _IMAGE_KINDS:
            digest = hashlib.sha256(out.payload).hexdigest()[:12]
            lines.append(f"[{out.kind}: {len(out.payload)} bytes, sha256={digest}]")
        else:
            lines.append(f"[{out.kind}]")
            lines.extend(out.payload.split("\n"))
    return lines


def render_diff(
    saved_normalized: list[NormalizedOutput], computed_normalized: list[NormalizedOutput]
) -> str:
    """Line diff between two normalized sequences.

    Lines only in the saved output are prefixed ``-``, lines only in the
    computed output ``+``, shared context is unprefixed.
    """
    saved_lines = _flatten(saved_normalized)
    computed_lines = _flatten(computed_normalized)
    rendered: list[str] = []
    matcher = SequenceMatcher(a=saved_lines, b=computed_lines, autojunk=False)
    for op, a_start, a_end, b_start, b_end in matcher.get_opcodes():
        if op == "equal":
            rendered.extend(saved_lines[a_start:a_end])
            continue
        if op in ("delete", "replace"):
            rendered.extend("-" + line for line in saved_lines[a_start:a_end])
        if op in ("insert", "replace"):
            rendered.extend("+" + line for line in computed_lines[b_start:b_end])
    return "\n".join(rendered)


def _first_error_name(outputs) -> str | None:
    for out in outputs:
        if out.variant == ERROR:
            return out.ename
    return None


def compare_cell(
    saved,
    computed,
    policy: CheckPolicy,
    sanitizer: sanitizer_mod.SanitizerConfig = sanitizer_mod.EMPTY,
    compare_images: bool = False,
    *,
    cell_index: int = 0,
    check_error_name: bool = True,
) -> CellVerdict:
    """Judge one executed cell against its saved outputs under ``policy``.

    ``saved`` is the cell's stored output list, ``computed`` the
    :class:`~nbcheck.kernel_client.ExecutionOutcome` of re-running it.
    ``check_error_name`` controls whether an expected exception's type name is
    compared against a saved error output (on when the cell's output would
    otherwise be checked). Timeouts and kernel death become error verdicts;
    everything else is pass or fail.
    """
    if policy is CheckPolicy.SKIP:
        raise ValueError("skip cells are handled before execution")
    duration = computed.duration

    if computed.status == "timeout":
        return CellVerdict(ERROR_STATUS, cell_index, None, "execution timed out", duration)
    if computed.status == "kernel_died":
        return CellVerdict(ERROR_STATUS, cell_index, None, "kernel died while executing the cell", duration)

    if policy is CheckPolicy.EXPECT_EXCEPTION:
        if computed.status != "error":
            return CellVerdict(
                FAIL, cell_index, None, "expected an exception but the cell ran without error", duration
            )
        if check_error_name:
            saved_name = _first_error_name(saved)
            computed_name = computed.ename or _first_error_name(computed.outputs)
            if saved_name is not None and computed_name != saved_name:
                return CellVerdict(
                    FAIL,
                    cell_index,
                    None,
                    f"expected exception {saved_name}, cell raised {computed_name}",
                    duration,
                )
        return CellVerdict(PASS, cell_index, None, "", duration)

    if computed.status == "error":
        detail = computed.ename or "an exception"
        if computed.evalue:
            detail += f": {computed.evalue}"
        return CellVerdict(FAIL, cell_index, None, f"cell raised {detail}", duration)

    if policy is CheckPolicy.EXECUTE_ONLY:
        return CellVerdict(PASS, cell_index, None, "", duration)

    saved_seq = _sanitize(normalize_outputs(saved, compare_images), sanitizer)
    computed_seq = _sanitize(normalize_outputs(computed.outputs, compare_images), sanitizer)
    if saved_seq == computed_seq:
        return CellVerdict(PASS, cell_index, None, "", duration)
    diff = render_diff(saved_seq, computed_seq)
    return CellVerdict(FAIL, cell_index, diff, "output differs from saved output", duration)
