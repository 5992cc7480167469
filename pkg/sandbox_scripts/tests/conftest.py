from __future__ import annotations

import json
import os
import subprocess
import sys
from pathlib import Path

import pytest

import sandbox_scripts


def run_script(script: str, code: str, workdir: Path, timeout: float = 60.0):
    """Invoke a sandbox script exactly as the orchestrator contract specifies."""
    code_file = workdir / "code.py"
    code_file.write_text(code, encoding="utf-8")
    out = workdir / "out.png"
    trace_out = workdir / "trace.json"
    proc = subprocess.run(
        [
            sys.executable, script,
            "--code-file", str(code_file),
            "--out", str(out),
            "--trace-out", str(trace_out),
        ],
        cwd=str(workdir),
        env=dict(os.environ, MPLBACKEND="Agg"),
        capture_output=True,
        text=True,
        timeout=timeout,
    )
    return proc, out, trace_out


def run_render(code: str, workdir: Path):
    return run_script(sandbox_scripts.render_script_path(), code, workdir)


def run_trace(code: str, workdir: Path):
    proc, _out, trace_out = run_script(sandbox_scripts.trace_script_path(), code, workdir)
    record = json.loads(trace_out.read_text(encoding="utf-8")) if proc.returncode == 0 else None
    return proc, record


@pytest.fixture
def workdir(tmp_path):
    counter = [0]

    def make() -> Path:
        counter[0] += 1
        path = tmp_path / f"w{counter[0]:02d}"
        path.mkdir()
        return path

    return make
