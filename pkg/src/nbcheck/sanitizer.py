"""Regex-based output scrubbing, applied to both sides of a comparison.

Sanitize files are INI-style::

    [timestamps]
    regex: \\d{2}:\\d{2}:\\d{2}
    replace: TIMESTAMP

Each section contributes one rule; rules run in file order over the whole
output text, replacing every non-overlapping match. Replacements are literal
text (no group interpolation).
"""

from __future__ import annotations

import re
from dataclasses import dataclass


class ConfigError(ValueError):
    """The sanitize file is syntactically or semantically invalid."""


@dataclass(frozen=True)
class SanitizerRule:
    label: str
    pattern: re.Pattern[str]
    replacement: str


@dataclass(frozen=True)
class SanitizerConfig:
    rules: tuple[SanitizerRule, ...] = ()


EMPTY = SanitizerConfig()

_SECTION_RE = re.compile(r"^\[(?P<label>[^\]]+)\]\s*$")
_KEY_RE = re.compile(r"^(?P<key>regex|replace)\s*:\s?(?P<value>.*)$")


def parse_sanitizer_file(text: str) -> SanitizerConfig:
    """Parse sanitize-file text into an ordered :class:`SanitizerConfig`.

    Blank lines and lines starting with ``#`` are ignored. Every section must
    define both ``regex:`` and ``replace:``; errors name the offending section
    and line.
    """
    rules: list[SanitizerRule] = []
    label: str | None = None
    label_line = 0
    pending: dict[str, str] = {}

    def finish_section() -> None:
        if label is None:
            return
        if "regex" not in pending:
            raise ConfigError(f"section [{label}] (line {label_line}): missing regex")
        if "replace" not in pending:
            raise ConfigError(f"section [{label}] (line {label_line}): missing replace")
        try:
            pattern = re.compile(pending["regex"])
        except re.error as exc:
            raise ConfigError(f"section [{label}]: cannot compile regex: {exc}") from None
        rules.append(SanitizerRule(label=label, pattern=pattern, replacement=pending["replace"]))

    for lineno, line in enumerate(text.split("\n"), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        section = _SECTION_RE.match(stripped)
        if section:
            finish_section()
            label = section.group("label").strip()
            label_line = lineno
            pending = {}
            continue
        entry = _KEY_RE.match(line.strip())
        if entry is None:
            raise ConfigError(f"line {lineno}: expected a [section], regex: or replace: line")
        if label is None:
            raise ConfigError(f"line {lineno}: {entry.group('key')} outside any [section]")
        if entry.group("key") in pending:
            raise ConfigError(f"section [{label}] (line {lineno}): duplicate {entry.group('key')}")
        pending[entry.group("key")] = entry.group("value")
    finish_section()

    return SanitizerConfig(rules=tuple(rules))


def apply(config: SanitizerConfig, text: str) -> str:
    """Run every rule over ``text`` in order; later rules see earlier output."""
    for rule in config.rules:
        # A callable replacement side-steps re.sub's backslash escapes, so the
        # replacement stays literal.
        text = rule.pattern.sub(lambda _match, _r=rule.replacement: _r, text)
    return text
