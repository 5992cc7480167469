"""Pinned sandbox child scripts: headless chart renderer and element tracer.

Both scripts honor the same invocation contract:
    <interpreter> <script> --code-file <path> --out <path> --trace-out <path>
exiting 0 on success, or 1 with a single JSON error object on stdout.
"""

from pathlib import Path

__version__ = "0.1.0"


def render_script_path() -> str:
    return str(Path(__file__).with_name("render_chart.py"))


def trace_script_path() -> str:
    return str(Path(__file__).with_name("trace_chart.py"))
