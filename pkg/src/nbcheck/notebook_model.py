"""Data model for Jupyter notebook files (nbformat 4.x) and per-cell markers.

The parser is deliberately strict about the keys the validator consumes
(cell types, output shapes, the format version) and deliberately loose about
everything else: unknown metadata is ignored and unknown output types are
carried through opaquely so future nbformat additions do not break parsing.
"""

from __future__ import annotations

import base64
import binascii
import json
import re
from dataclasses import dataclass

CODE = "code"
MARKDOWN = "markdown"
RAW = "raw"
_CELL_KINDS = (CODE, MARKDOWN, RAW)

STREAM = "stream"
EXECUTE_RESULT = "execute_result"
DISPLAY_DATA = "display_data"
ERROR = "error"
KNOWN_OUTPUT_VARIANTS = (STREAM, EXECUTE_RESULT, DISPLAY_DATA, ERROR)

_TAG_FLAGS = {
    "nbval-check-output": "check_output",
    "nbval-ignore-output": "ignore_output",
    "nbval-skip": "skip",
    "nbval-raises-exception": "raises_exception",
    "raises-exception": "raises_exception",
}

_COMMENT_FLAGS = {
    "NBVAL_CHECK_OUTPUT": "check_output",
    "NBVAL_IGNORE_OUTPUT": "ignore_output",
    "NBVAL_SKIP": "skip",
    "NBVAL_RAISES_EXCEPTION": "raises_exception",
}

# Languages whose line comments do not start with '#'. Everything common in
# notebooks (python, julia, R, bash) uses '#', which is also the fallback.
_COMMENT_PREFIXES = {"matlab": "%", "octave": "%", "erlang": "%"}


class MalformedDocument(ValueError):
    """The file is not valid JSON or violates the nbformat 4 layout."""


class UnsupportedFormat(ValueError):
    """The file declares an nbformat major version other than 4."""


class ConflictingDirectives(ValueError):
    """A cell requests both output checking and output ignoring."""


@dataclass(frozen=True)
class CellOutput:
    """One stored or freshly computed cell output.

    ``variant`` is the nbformat ``output_type``. For the four known variants
    the matching fields are populated; anything else is preserved verbatim in
    ``raw`` and never compared.
    """

    variant: str
    stream_name: str | None = None
    text: str | None = None
    image_png: bytes | None = None
    image_jpeg: bytes | None = None
    ename: str | None = None
    evalue: str | None = None
    traceback: tuple[str, ...] = ()
    raw: dict | None = None


@dataclass(frozen=True)
class Cell:
    """A notebook cell. ``index`` numbers code cells densely from 0; it is -1
    for markdown/raw cells, which never become test units."""

    kind: str
    source: str
    execution_count: int | None = None
    outputs: tuple[CellOutput, ...] = ()
    tags: tuple[str, ...] = ()
    index: int = -1


@dataclass(frozen=True)
class NotebookDocument:
    format_major: int
    format_minor: int
    kernel_name: str | None
    language: str | None
    cells: tuple[Cell, ...]

    def code_cells(self) -> tuple[Cell, ...]:
        return tuple(c for c in self.cells if c.kind == CODE)


@dataclass(frozen=True)
class CellDirectives:
    """Per-cell validation markers resolved from tags and comment lines."""

    check_output: bool = False
    ignore_output: bool = False
    skip: bool = False
    raises_exception: bool = False


def comment_prefix_for(language: str | None) -> str:
    """Line-comment prefix for a notebook language (defaults to '#')."""
    return _COMMENT_PREFIXES.get((language or "").lower(), "#")


def _is_int(value: object) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _join_lines(value: object, what: str) -> str:
    """Normalize nbformat's string-or-list-of-strings fields to one string."""
    if isinstance(value, str):
        return value
    if isinstance(value, list) and all(isinstance(item, str) for item in value):
        return "".join(value)
    raise MalformedDocument(f"{what} must be a string or a list of strings")


def _decode_image(value: object, what: str) -> bytes:
    b64 = _join_lines(value, what)
    try:
        return base64.b64decode(b64.encode("ascii"), validate=False)
    except (binascii.Error, ValueError, UnicodeEncodeError) as exc:
        raise MalformedDocument(f"{what} is not valid base64: {exc}") from None


def _parse_output(obj: object, where: str) -> CellOutput:
    if not isinstance(obj, dict):
        raise MalformedDocument(f"{where}: output is not an object")
    variant = obj.get("output_type")
    if not isinstance(variant, str):
        raise MalformedDocument(f"{where}: output_type missing or not a string")

    if variant == STREAM:
        name = obj.get("name")
        if name not in ("stdout", "stderr"):
            raise MalformedDocument(f"{where}: stream name must be stdout or stderr")
        if "text" not in obj:
            raise MalformedDocument(f"{where}: stream output has no text")
        return CellOutput(
            variant=STREAM,
            stream_name=name,
            text=_join_lines(obj["text"], f"{where}: stream text"),
        )

    if variant in (EXECUTE_RESULT, DISPLAY_DATA):
        data = obj.get("data")
        if not isinstance(data, dict):
            raise MalformedDocument(f"{where}: {variant} has no data object")
        text = None
        if "text/plain" in data:
            text = _join_lines(data["text/plain"], f"{where}: text/plain")
        png = _decode_image(data["image/png"], f"{where}: image/png") if "image/png" in data else None
        jpeg = _decode_image(data["image/jpeg"], f"{where}: image/jpeg") if "image/jpeg" in data else None
        return CellOutput(variant=variant, text=text, image_png=png, image_jpeg=jpeg)

    if variant == ERROR:
        ename, evalue = obj.get("ename"), obj.get("evalue")
        tb = obj.get("traceback")
        if not isinstance(ename, str) or not isinstance(evalue, str):
            raise MalformedDocument(f"{where}: error output needs ename and evalue strings")
        if not isinstance(tb, list) or not all(isinstance(line, str) for line in tb):
            raise MalformedDocument(f"{where}: error traceback must be a list of strings")
        return CellOutput(variant=ERROR, ename=ename, evalue=evalue, traceback=tuple(tb))

    # Forward compatibility: keep unknown variants around, compare nothing.
    return CellOutput(variant=variant, raw=obj)


def _parse_cell(obj: object, position: int, code_index: int) -> Cell:
    where = f"cells[{position}]"
    if not isinstance(obj, dict):
        raise MalformedDocument(f"{where}: cell is not an object")
    kind = obj.get("cell_type")
    if kind not in _CELL_KINDS:
        raise MalformedDocument(f"{where}: unknown cell_type {kind!r}")
    if "source" not in obj:
        raise MalformedDocument(f"{where}: cell has no source")
    source = _join_lines(obj["source"], f"{where}: source")

    metadata = obj.get("metadata")
    tags: tuple[str, ...] = ()
    if isinstance(metadata, dict) and "tags" in metadata:
        raw_tags = metadata["tags"]
        if not isinstance(raw_tags, list) or not all(isinstance(t, str) for t in raw_tags):
            raise MalformedDocument(f"{where}: metadata.tags must be a list of strings")
        tags = tuple(raw_tags)

    if kind != CODE:
        return Cell(kind=kind, source=source, tags=tags)

    execution_count = obj.get("execution_count")
    if execution_count is not None:
        if not _is_int(execution_count) or execution_count < 0:
            raise MalformedDocument(f"{where}: execution_count must be a non-negative integer or null")
    raw_outputs = obj.get("outputs")
    if not isinstance(raw_outputs, list):
        raise MalformedDocument(f"{where}: code cell has no outputs list")
    outputs = tuple(
        _parse_output(out, f"{where}.outputs[{i}]") for i, out in enumerate(raw_outputs)
    )
    return Cell(
        kind=CODE,
        source=source,
        execution_count=execution_count,
        outputs=outputs,
        tags=tags,
        index=code_index,
    )


def parse_notebook(raw: bytes) -> NotebookDocument:
    """Parse the bytes of an ``.ipynb`` file into a :class:`NotebookDocument`.

    Raises :class:`MalformedDocument` for anything that is not a structurally
    valid nbformat-4 notebook and :class:`UnsupportedFormat` for other major
    versions. Cell order is preserved exactly; string-or-list source and text
    fields are joined verbatim.
    """
    try:
        data = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedDocument(f"not a UTF-8 JSON document: {exc}") from None
    if not isinstance(data, dict):
        raise MalformedDocument("top-level JSON value is not an object")
    for key in ("nbformat", "nbformat_minor", "metadata", "cells"):
        if key not in data:
            raise MalformedDocument(f"missing required key {key!r}")

    major = data["nbformat"]
    if not _is_int(major):
        raise MalformedDocument("nbformat is not an integer")
    if major != 4:
        raise UnsupportedFormat(f"nbformat {major} is not supported (expected 4)")
    minor = data["nbformat_minor"]
    if not _is_int(minor) or minor < 0:
        raise MalformedDocument("nbformat_minor is not a non-negative integer")

    metadata = data["metadata"]
    if not isinstance(metadata, dict):
        raise MalformedDocument("metadata is not an object")
    kernel_name = None
    language = None
    kernelspec = metadata.get("kernelspec")
    if isinstance(kernelspec, dict):
        if isinstance(kernelspec.get("name"), str):
            kernel_name = kernelspec["name"]
        if isinstance(kernelspec.get("language"), str):
            language = kernelspec["language"]
    if language is None:
        language_info = metadata.get("language_info")
        if isinstance(language_info, dict) and isinstance(language_info.get("name"), str):
            language = language_info["name"]

    raw_cells = data["cells"]
    if not isinstance(raw_cells, list):
        raise MalformedDocument("cells is not a list")
    cells = []
    code_index = 0
    for position, obj in enumerate(raw_cells):
        cell = _parse_cell(obj, position, code_index)
        if cell.kind == CODE:
            code_index += 1
        cells.append(cell)

    return NotebookDocument(
        format_major=major,
        format_minor=minor,
        kernel_name=kernel_name,
        language=language,
        cells=tuple(cells),
    )


def extract_directives(cell: Cell, comment_prefix: str = "#") -> CellDirectives:
    """Resolve validation markers for a code cell.

    A flag is set when the matching tag appears in the cell's tags or when the
    matching uppercase token appears as a whole word on a comment line (a line
    whose first non-whitespace characters are ``comment_prefix``).
    """
    flags = {name: False for name in ("check_output", "ignore_output", "skip", "raises_exception")}
    for tag in cell.tags:
        flag = _TAG_FLAGS.get(tag)
        if flag:
            flags[flag] = True
    for line in cell.source.split("\n"):
        stripped = line.lstrip()
        if not stripped.startswith(comment_prefix):
            continue
        body = stripped[len(comment_prefix):]
        for token, flag in _COMMENT_FLAGS.items():
            if re.search(rf"\b{token}\b", body):
                flags[flag] = True
    if flags["check_output"] and flags["ignore_output"]:
        raise ConflictingDirectives(
            f"cell {cell.index} requests both output checking and output ignoring"
        )
    return CellDirectives(**flags)


def _encode_image(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii") + "\n"


def _serialize_output(out: CellOutput) -> dict:
    if out.variant == STREAM:
        return {"output_type": STREAM, "name": out.stream_name, "text": out.text}
    if out.variant in (EXECUTE_RESULT, DISPLAY_DATA):
        data: dict = {}
        if out.text is not None:
            data["text/plain"] = out.text
        if out.image_png is not None:
            data["image/png"] = _encode_image(out.image_png)
        if out.image_jpeg is not None:
            data["image/jpeg"] = _encode_image(out.image_jpeg)
        obj: dict = {"output_type": out.variant, "data": data, "metadata": {}}
        if out.variant == EXECUTE_RESULT:
            obj["execution_count"] = None
        return obj
    if out.variant == ERROR:
        return {
            "output_type": ERROR,
            "ename": out.ename,
            "evalue": out.evalue,
            "traceback": list(out.traceback),
        }
    return dict(out.raw or {"output_type": out.variant})


def serialize_notebook(doc: NotebookDocument) -> bytes:
    """Serialize a document back to ``.ipynb`` bytes.

    The output re-parses to an equal document; byte-level formatting of the
    original file is not preserved.
    """
    metadata: dict = {}
    if doc.kernel_name is not None:
        kernelspec = {"name": doc.kernel_name}
        if doc.language is not None:
            kernelspec["language"] = doc.language
        metadata["kernelspec"] = kernelspec
    elif doc.language is not None:
        metadata["language_info"] = {"name": doc.language}

    cells = []
    for position, cell in enumerate(doc.cells):
        obj: dict = {"cell_type": cell.kind, "source": cell.source, "metadata": {}}
        if cell.tags:
            obj["metadata"]["tags"] = list(cell.tags)
        if doc.format_minor >= 5:
            obj["id"] = f"cell-{position}"
        if cell.kind == CODE:
            obj["execution_count"] = cell.execution_count
            obj["outputs"] = [_serialize_output(out) for out in cell.outputs]
        cells.append(obj)

    document = {
        "nbformat": doc.format_major,
        "nbformat_minor": doc.format_minor,
        "metadata": metadata,
        "cells": cells,
    }
    return json.dumps(document, ensure_ascii=False, indent=1).encode("utf-8")
