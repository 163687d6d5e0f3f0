"""nbcheck: re-execute Jupyter notebooks and verify their stored outputs."""

from .comparator import CellVerdict, CheckPolicy, NormalizedOutput, compare_cell, decide_check_policy
from .kernel_client import ExecutionOutcome, KernelHandle, KernelSpec, start_kernel
from .notebook_model import (
    Cell,
    CellDirectives,
    CellOutput,
    NotebookDocument,
    extract_directives,
    parse_notebook,
    serialize_notebook,
)
from .runner import NotebookResult, RunConfig, validate_notebook
from .sanitizer import SanitizerConfig, SanitizerRule, parse_sanitizer_file

__version__ = "0.1.0"

__all__ = [
    "Cell",
    "CellDirectives",
    "CellOutput",
    "CellVerdict",
    "CheckPolicy",
    "ExecutionOutcome",
    "KernelHandle",
    "KernelSpec",
    "NormalizedOutput",
    "NotebookDocument",
    "NotebookResult",
    "RunConfig",
    "SanitizerConfig",
    "SanitizerRule",
    "compare_cell",
    "decide_check_policy",
    "extract_directives",
    "parse_notebook",
    "parse_sanitizer_file",
    "serialize_notebook",
    "start_kernel",
    "validate_notebook",
    "__version__",
]
