"""Isolated child-process execution of untrusted chart code.

Each render owns a fresh workdir and child process; the orchestrator enforces
the timeout (the child script never does) and caps global render parallelism.
Failures are values, not exceptions: the structured error the child prints on
stdout becomes a ``RenderOutcome`` with status Failure.

Child invocation contract:
    <interpreter> <script> --code-file <path> --out <path> --trace-out <path>
exit 0 on success; exit 1 with one JSON object on stdout:
    {"error_class": "...", "message": "...", "traceback": "..."}
"""

from __future__ import annotations

import json
import logging
import os
import re
import subprocess
import sys
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from .images import ChartImage

log = logging.getLogger(__name__)

DEFAULT_PARALLELISM = 4
GRACE_PERIOD_MS = 500
MIN_TIMEOUT_MS = 1000

CODE_FILENAME = "code.py"
OUTPUT_FILENAME = "out.png"
TRACE_FILENAME = "trace.json"
STDERR_FILENAME = "stderr.txt"


class SandboxError(Exception):
    """Orchestrator-level failure (not a property of the rendered code)."""


class SandboxUnavailable(SandboxError):
    pass


class WorkdirConflict(SandboxError):
    pass


@dataclass(frozen=True)
class RenderOutcome:
    """Result of one sandboxed execution: a decoded raster or a structured failure."""

    status: str  # "Success" | "Failure"
    image: ChartImage | None = None
    error_class: str = ""
    message: str = ""
    duration_ms: int = 0

    def __post_init__(self) -> None:
        if self.status not in ("Success", "Failure"):
            raise ValueError(f"bad status '{self.status}'")
        if self.status == "Success" and self.image is None:
            raise ValueError("Success outcomes carry an image")
        if self.status == "Failure" and not self.error_class:
            raise ValueError("Failure outcomes carry an error class")

    @property
    def ok(self) -> bool:
        return self.status == "Success"

    def summary(self) -> dict:
        info: dict = {"status": self.status, "duration_ms": self.duration_ms}
        if self.ok:
            info["width"] = self.image.width
            info["height"] = self.image.height
        else:
            info["error_class"] = self.error_class
            info["message"] = self.message
        return info


@dataclass(frozen=True)
class ElementTrace:
    """Low-level chart structure harvested from the constructed figure objects."""

    texts: tuple[str, ...]
    type_tags: frozenset[str]
    rows: int
    cols: int
    n_axes: int
    colors: frozenset[int]

    def __post_init__(self) -> None:
        if self.rows < 1 or self.cols < 1 or self.n_axes < 1:
            raise ValueError("layout dimensions must be >= 1")
        if self.n_axes > self.rows * self.cols:
            raise ValueError("n_axes exceeds the subplot grid")

    @property
    def layout(self) -> tuple[int, int, int]:
        return (self.rows, self.cols, self.n_axes)

    @classmethod
    def from_trace_json(cls, raw: str) -> "ElementTrace":
        record = json.loads(raw)
        layout = record["layout"]
        colors = frozenset(int(c.lstrip("#"), 16) for c in record["colors"])
        return cls(
            texts=tuple(record["texts"]),
            type_tags=frozenset(record["type_tags"]),
            rows=int(layout["rows"]),
            cols=int(layout["cols"]),
            n_axes=int(layout["n_axes"]),
            colors=colors,
        )


_SHOW_CALL = re.compile(r"\b(plt|pyplot)\s*\.\s*show\s*\(\s*\)")


def rewrite_show_calls(code: str, out_path: str) -> str:
    """Replace interactive display calls with a save to the expected output path."""
    replacement_count = 0

    def _replace(match: re.Match) -> str:
        nonlocal replacement_count
        replacement_count += 1
        return f'{match.group(1)}.savefig(r"{out_path}")'

    rewritten = _SHOW_CALL.sub(_replace, code)
    if replacement_count:
        log.info("rewrote %d interactive show call(s) to savefig", replacement_count)
    return rewritten


def _default_script(name: str) -> str:
    try:
        import sandbox_scripts
    except ImportError as exc:
        raise SandboxUnavailable(
            "sandbox runner scripts are not installed; pass explicit script paths "
            "or install the sandbox-scripts package"
        ) from exc
    if name == "render":
        return sandbox_scripts.render_script_path()
    return sandbox_scripts.trace_script_path()


@dataclass(frozen=True)
class _ChildRun:
    returncode: int
    stdout: str
    timed_out: bool
    duration_ms: int
    out_path: Path
    trace_path: Path


class SandboxOrchestrator:
    """Runs the pinned renderer/tracer scripts against generated code."""

    def __init__(
        self,
        *,
        render_script: str | Path | None = None,
        trace_script: str | Path | None = None,
        interpreter: str | None = None,
        parallelism: int = DEFAULT_PARALLELISM,
    ) -> None:
        if parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        self._render_script = str(render_script) if render_script else None
        self._trace_script = str(trace_script) if trace_script else None
        self._interpreter = interpreter or sys.executable
        self._slots = threading.BoundedSemaphore(parallelism)
        self._live: set[subprocess.Popen] = set()
        self._live_lock = threading.Lock()

    def render(self, code: str, timeout_ms: int, workdir: str | Path) -> RenderOutcome:
        """Execute code in a fresh child and decode the raster it produced."""
        script = self._render_script or _default_script("render")
        run = self._run_child(script, code, timeout_ms, workdir)
        failure = self._failure_outcome(run, timeout_ms)
        if failure is not None:
            return failure
        if not run.out_path.exists():
            return RenderOutcome(
                status="Failure",
                error_class="MissingOutput",
                message="child exited 0 without producing a raster",
                duration_ms=run.duration_ms,
            )
        try:
            image = ChartImage.from_file(run.out_path)
        except Exception as exc:  # PIL raises assorted decode errors
            return RenderOutcome(
                status="Failure",
                error_class="UndecodableOutput",
                message=str(exc),
                duration_ms=run.duration_ms,
            )
        return RenderOutcome(status="Success", image=image, duration_ms=run.duration_ms)

    def trace_elements(
        self, code: str, timeout_ms: int, workdir: str | Path
    ) -> ElementTrace | RenderOutcome:
        """Harvest texts/types/layout/colors, or propagate the failure outcome."""
        script = self._trace_script or _default_script("trace")
        run = self._run_child(script, code, timeout_ms, workdir)
        failure = self._failure_outcome(run, timeout_ms)
        if failure is not None:
            return failure
        if not run.trace_path.exists():
            return RenderOutcome(
                status="Failure",
                error_class="MissingTrace",
                message="tracer exited 0 without writing a trace record",
                duration_ms=run.duration_ms,
            )
        return ElementTrace.from_trace_json(run.trace_path.read_text(encoding="utf-8"))

    def shutdown(self) -> None:
        """Terminate any children still running (used on interrupt)."""
        with self._live_lock:
            procs = list(self._live)
        for proc in procs:
            try:
                proc.kill()
            except OSError:
                pass

    def _run_child(
        self, script: str, code: str, timeout_ms: int, workdir: str | Path
    ) -> _ChildRun:
        if timeout_ms < MIN_TIMEOUT_MS:
            raise ValueError(f"timeout must be >= {MIN_TIMEOUT_MS} ms")
        workdir = Path(workdir)
        if not workdir.is_dir():
            raise WorkdirConflict(f"workdir {workdir} does not exist")
        if any(workdir.iterdir()):
            raise WorkdirConflict(f"workdir {workdir} is not empty")

        out_path = workdir / OUTPUT_FILENAME
        trace_path = workdir / TRACE_FILENAME
        code_path = workdir / CODE_FILENAME
        code_path.write_text(rewrite_show_calls(code, str(out_path)), encoding="utf-8")

        cmd = [
            self._interpreter,
            script,
            "--code-file", str(code_path),
            "--out", str(out_path),
            "--trace-out", str(trace_path),
        ]
        env = dict(os.environ, MPLBACKEND="Agg")
        started = time.monotonic()
        with self._slots:
            try:
                proc = subprocess.Popen(
                    cmd,
                    cwd=str(workdir),
                    env=env,
                    stdout=subprocess.PIPE,
                    stderr=subprocess.PIPE,
                    text=True,
                )
            except OSError as exc:
                raise SandboxUnavailable(f"cannot launch interpreter: {exc}") from exc
            with self._live_lock:
                self._live.add(proc)
            timed_out = False
            try:
                try:
                    stdout, stderr = proc.communicate(timeout=timeout_ms / 1000.0)
                except subprocess.TimeoutExpired:
                    timed_out = True
                    stdout, stderr = self._reap_after_timeout(proc)
            finally:
                with self._live_lock:
                    self._live.discard(proc)

        duration_ms = max(0, int((time.monotonic() - started) * 1000))
        (workdir / STDERR_FILENAME).write_text(stderr or "", encoding="utf-8")
        return _ChildRun(
            returncode=proc.returncode if proc.returncode is not None else -1,
            stdout=stdout or "",
            timed_out=timed_out,
            duration_ms=duration_ms,
            out_path=out_path,
            trace_path=trace_path,
        )

    def _reap_after_timeout(self, proc: subprocess.Popen) -> tuple[str, str]:
        proc.terminate()
        try:
            return proc.communicate(timeout=GRACE_PERIOD_MS / 1000.0)
        except subprocess.TimeoutExpired:
            proc.kill()
            return proc.communicate()

    @staticmethod
    def _failure_outcome(run: _ChildRun, timeout_ms: int) -> RenderOutcome | None:
        if run.timed_out:
            return RenderOutcome(
                status="Failure",
                error_class="Timeout",
                message=f"child exceeded {timeout_ms} ms",
                duration_ms=run.duration_ms,
            )
        if run.returncode == 0:
            return None
        try:
            error = json.loads(run.stdout.strip())
            error_class = str(error["error_class"])
            message = str(error.get("message", ""))
        except (ValueError, KeyError, TypeError, AttributeError):
            error_class = "SandboxProtocolError"
            message = (
                f"exit {run.returncode} without a JSON error object: {run.stdout[:200]!r}"
            )
        return RenderOutcome(
            status="Failure",
            error_class=error_class,
            message=message,
            duration_ms=run.duration_ms,
        )
