"""Shared fixtures: a session-wide kernelspec registration and the notebook
fixtures most test modules validate against.

The suite is hermetic: it registers the bundled mini Python kernel (a real
child-process kernel speaking the wire protocol) under the name ``python3``
via JUPYTER_PATH, so no system Jupyter installation is required and an
existing one is shadowed for reproducibility.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import pytest

from support import builders

SUPPORT_DIR = Path(__file__).parent / "support"
MINIKERNEL = SUPPORT_DIR / "minikernel.py"
REPO_ROOT = Path(__file__).parent.parent
SHIPPED_SANITIZER = REPO_ROOT / "docs" / "sanitizers" / "common.cfg"

# The stale saved timestamp used by the failing-timestamp fixtures.
STALE_ASCTIME = "'Thu Dec 12 10:01:25 2019'"


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "acceptance(label): ties a test to one acceptance criterion"
    )


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    report = yield
    if report.when == "call":
        marker = item.get_closest_marker("acceptance")
        if marker is not None:
            word = "PASS" if report.passed else "FAIL"
            line = f"[acceptance] {marker.args[0]}: {word}"
            terminal = item.config.pluginmanager.get_plugin("terminalreporter")
            if terminal is not None:
                terminal.write_line(line)
            else:
                print(line)
    return report


@pytest.fixture(scope="session", autouse=True)
def registered_kernel(tmp_path_factory) -> Path:
    """Register the bundled mini kernel as 'python3' for the whole session."""
    data_dir = tmp_path_factory.mktemp("jupyter-data")
    kernel_dir = data_dir / "kernels" / "python3"
    kernel_dir.mkdir(parents=True)
    (kernel_dir / "kernel.json").write_text(
        json.dumps(
            {
                "argv": [sys.executable, str(MINIKERNEL), "{connection_file}"],
                "display_name": "Mini Python",
                "language": "python",
            },
            indent=2,
        )
    )
    previous = os.environ.get("JUPYTER_PATH")
    os.environ["JUPYTER_PATH"] = str(data_dir)
    yield data_dir
    if previous is None:
        os.environ.pop("JUPYTER_PATH", None)
    else:
        os.environ["JUPYTER_PATH"] = previous


@pytest.fixture(scope="session")
def quick_config():
    from nbcheck.runner import RunConfig

    return RunConfig(cell_timeout=60, startup_timeout=60)


@pytest.fixture(scope="session")
def passing_notebook(registered_kernel, tmp_path_factory) -> Path:
    """Ten deterministic code cells whose saved outputs come from one
    reference execution."""
    sources = [
        "print('Hello World')",
        "40 + 2",
        "'py' + 'test'",
        "sorted([3, 1, 2])",
        "len('notebook')",
        "x = 10",
        "x * 4",
        "print('total:')\n21 * 2",
        "'-'.join(['a', 'b', 'c'])",
        "{'k': 1}['k']",
    ]
    doc = builders.document(
        [builders.markdown_cell("# Deterministic fixture")]
        + [builders.code_cell(source) for source in sources]
    )
    path = tmp_path_factory.mktemp("fixtures") / "passing.ipynb"
    builders.write_notebook(path, doc)
    builders.store_reference_outputs(path)
    return path


@pytest.fixture(scope="session")
def timestamp_notebook(registered_kernel, tmp_path_factory) -> Path:
    """One passing cell plus a time.asctime() cell with a stale saved output."""
    doc = builders.document(
        [
            builders.code_cell("print('ok')", outputs=[builders.stream("ok\n")]),
            builders.code_cell(
                "import time\ntime.asctime()",
                outputs=[builders.text_result(STALE_ASCTIME)],
            ),
        ]
    )
    path = tmp_path_factory.mktemp("fixtures") / "timestamp.ipynb"
    return builders.write_notebook(path, doc)


@pytest.fixture(scope="session")
def marker_notebook(registered_kernel, tmp_path_factory) -> Path:
    """Eight cells exercising every directive in both syntaxes.

    Saved outputs are deliberately stale ('999') where the difference between
    checking and not checking output must show.
    """
    stale = [builders.text_result("999")]
    doc = builders.document(
        [
            builders.code_cell("40 + 2", outputs=stale),
            builders.code_cell("1 + 1", outputs=stale, tags=["nbval-check-output"]),
            builders.code_cell("# NBVAL_CHECK_OUTPUT\n2 + 2", outputs=stale),
            builders.code_cell("3 + 3", outputs=stale, tags=["nbval-ignore-output"]),
            builders.code_cell("# NBVAL_IGNORE_OUTPUT\n4 + 4", outputs=stale),
            builders.code_cell("raise RuntimeError('must not run')", tags=["nbval-skip"]),
            builders.code_cell("# NBVAL_SKIP\nraise RuntimeError('must not run')"),
            builders.code_cell(
                "1 / 0",
                outputs=[builders.error_output("ZeroDivisionError", "division by zero")],
                tags=["raises-exception"],
            ),
        ]
    )
    path = tmp_path_factory.mktemp("fixtures") / "markers.ipynb"
    return builders.write_notebook(path, doc)


@pytest.fixture(scope="session")
def image_notebooks(registered_kernel, tmp_path_factory) -> tuple[Path, Path]:
    """Two notebooks identical except for the saved 1-pixel PNG payload.

    The cell computes a red pixel; the first notebook saved red, the second
    saved green.
    """
    directory = tmp_path_factory.mktemp("fixtures")
    matching = directory / "pixel-red.ipynb"
    builders.write_notebook(
        matching,
        builders.document(
            [builders.code_cell(builders.PIXEL_CELL_SOURCE)],
        ),
    )
    builders.store_reference_outputs(matching)

    saved = builders.document(
        [
            builders.code_cell(
                builders.PIXEL_CELL_SOURCE,
                outputs=[builders.text_result("Pixel", png=builders.tiny_png((0, 255, 0)))],
                execution_count=1,
            )
        ],
    )
    differing = directory / "pixel-green.ipynb"
    builders.write_notebook(differing, saved)
    return matching, differing
