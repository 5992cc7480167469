"""Two-stage chart-to-code refinement loop.

Stage 1 turns the reference chart into a structured description and initial
code; Stage 2 repeatedly describes the visual difference between the current
render and the reference, asks for revised code, and accepts a candidate only
when its aggregated discrepancy strictly decreases.

Convergence counter semantics: the counter resets to zero on every accepted
update and increments on every non-improving iteration; refinement stops when
it reaches the threshold, i.e. after K consecutive iterations without
improvement. (The alternative reading - counting consecutive improvements -
would stop the loop exactly while it is still making progress, so it is not
used; see the project README.)
"""

from __future__ import annotations

import logging
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

from .gateway import ChatRequest, ModelGateway, extract_code_block
from .images import ChartImage
from .metrics import (
    AggregationWeights,
    DiscrepancyScore,
    EmbeddingProvider,
    aggregate,
    compute_metrics,
)
from .prompt_library import (
    render_description_prompt,
    render_difference_prompt,
    render_initial_code_prompt,
    render_refine_prompt,
)
from .sandbox import RenderOutcome
from .transcript import Transcript

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 3
DEFAULT_MAX_DEBUG = 3
DEFAULT_ITERATION_CAP = 15
DEFAULT_RENDER_TIMEOUT_MS = 30000

# Worst-possible score assigned when Stage 1 never produces a rendering.
FAILED_SESSION_SCORE = DiscrepancyScore(1.0)

TERMINATION_CONVERGED = "converged"
TERMINATION_ITERATION_CAP = "iteration_cap"
TERMINATION_STAGE1_FAILED = "stage1_render_failed"


class SessionStateError(RuntimeError):
    """A step was requested on a session that cannot advance."""


def build_debug_prompt(error_message: str, code: str) -> str:
    """Repair request carrying the error message and the faulty script."""
    return (
        "The following Python script failed to execute.\n\n"
        f"Error message: {error_message}\n\n"
        "Script:\n"
        f"{code}\n\n"
        "Please fix the bug and provide the complete corrected Python script."
    )


@dataclass
class ConvergenceState:
    """Counter of consecutive non-improving iterations against a stop threshold."""

    threshold: int = DEFAULT_THRESHOLD
    counter: int = 0

    def __post_init__(self) -> None:
        if self.threshold < 1:
            raise ValueError("threshold must be >= 1")
        if not 0 <= self.counter <= self.threshold:
            raise ValueError("counter must stay within [0, threshold]")

    @property
    def reached(self) -> bool:
        return self.counter >= self.threshold

    def mark_accepted(self) -> None:
        self.counter = 0

    def mark_rejected(self) -> None:
        self.counter = min(self.counter + 1, self.threshold)


@dataclass(frozen=True)
class IterationRecord:
    index: int
    difference: str
    candidate_code: str
    render: RenderOutcome
    candidate_score: DiscrepancyScore | None
    accepted: bool
    debug_attempts: int

    def __post_init__(self) -> None:
        if self.index < 1:
            raise ValueError("iteration index starts at 1")
        if self.debug_attempts < 0:
            raise ValueError("debug_attempts must be >= 0")
        if self.accepted and (not self.render.ok or self.candidate_score is None):
            raise ValueError("accepted iterations require a successful scored render")


@dataclass
class RefinementSession:
    """Full pipeline state for one item."""

    item_id: str
    reference: ChartImage
    description: str = ""
    best_code: str = ""
    best_image: ChartImage | None = None
    best_score: DiscrepancyScore = FAILED_SESSION_SCORE
    history: list[IterationRecord] = field(default_factory=list)
    convergence: ConvergenceState = field(default_factory=ConvergenceState)
    transcript: Transcript = field(default_factory=Transcript)
    failed: bool = False
    termination_reason: str | None = None

    @property
    def iterations(self) -> int:
        return len(self.history)


class RefinementEngine:
    """Wires the gateway, sandbox renderer, and metrics into the two stages.

    ``renderer`` is anything exposing ``render(code, timeout_ms, workdir)``;
    one engine advances a session strictly sequentially, while separate
    sessions may run in parallel engines sharing the gateway and renderer.
    """

    def __init__(
        self,
        gateway: ModelGateway,
        renderer,
        *,
        weights: AggregationWeights | None = None,
        providers: tuple[EmbeddingProvider, ...] = (),
        threshold: int = DEFAULT_THRESHOLD,
        max_debug: int = DEFAULT_MAX_DEBUG,
        iteration_cap: int = DEFAULT_ITERATION_CAP,
        render_timeout_ms: int = DEFAULT_RENDER_TIMEOUT_MS,
        work_root: str | Path | None = None,
        transcript_dir: str | Path | None = None,
        output_dir: str | Path | None = None,
    ) -> None:
        if threshold < 1:
            raise ValueError("threshold must be >= 1")
        if max_debug < 0:
            raise ValueError("max_debug must be >= 0")
        if iteration_cap < 1:
            raise ValueError("iteration_cap must be >= 1")
        self.gateway = gateway
        self.renderer = renderer
        self.weights = weights or AggregationWeights()
        self.providers = providers
        self.threshold = threshold
        self.max_debug = max_debug
        self.iteration_cap = iteration_cap
        self.render_timeout_ms = render_timeout_ms
        self._work_root = Path(work_root) if work_root else None
        self._transcript_dir = Path(transcript_dir) if transcript_dir else None
        self._output_dir = Path(output_dir) if output_dir else None
        self._workdir_seq = 0

    # -- Stage 1 ---------------------------------------------------------

    def run_stage1(self, reference: ChartImage, item_id: str = "item") -> RefinementSession:
        """Describe the reference, generate initial code, render it.

        A session that exhausts the debug loop without rendering is returned
        in the failed state with the sentinel worst score; no exception.
        """
        transcript_path = (
            self._transcript_dir / f"{item_id}.jsonl" if self._transcript_dir else None
        )
        session = RefinementSession(
            item_id=item_id,
            reference=reference,
            convergence=ConvergenceState(threshold=self.threshold),
            transcript=Transcript(transcript_path),
        )
        described = self.gateway.complete(
            ChatRequest("describer", render_description_prompt(), (reference,)),
            session.transcript,
        )
        session.description = described.text
        coded = self.gateway.complete(
            ChatRequest("coder", render_initial_code_prompt(session.description), (reference,)),
            session.transcript,
        )
        code = extract_code_block(coded.text)
        code, outcome, _attempts = self.try_render_with_debug(code, session)
        session.best_code = code
        if outcome.ok:
            session.best_image = outcome.image
            session.best_score = self._score(outcome.image, session)
        else:
            session.failed = True
            session.best_score = FAILED_SESSION_SCORE
            log.warning("item %s: stage 1 never rendered (%s)", item_id, outcome.error_class)
        return session

    # -- Stage 2 ---------------------------------------------------------

    def step(self, session: RefinementSession) -> IterationRecord:
        """One refinement iteration: difference, candidate, render, accept/reject."""
        if session.failed:
            raise SessionStateError("cannot step a failed session")
        if session.convergence.reached:
            raise SessionStateError("session already converged")

        images = (session.reference, session.best_image)
        differed = self.gateway.complete(
            ChatRequest("differ", render_difference_prompt(), images),
            session.transcript,
        )
        difference = differed.text
        refine_prompt = render_refine_prompt(
            code=session.best_code,
            difference=difference,
            description=session.description,
        )
        refined = self.gateway.complete(
            ChatRequest("refiner", refine_prompt, images), session.transcript
        )
        candidate_code = extract_code_block(refined.text)
        candidate_code, outcome, attempts = self.try_render_with_debug(candidate_code, session)

        candidate_score: DiscrepancyScore | None = None
        accepted = False
        if outcome.ok:
            candidate_score = self._score(outcome.image, session)
            accepted = candidate_score.value < session.best_score.value
        if accepted:
            session.best_code = candidate_code
            session.best_image = outcome.image
            session.best_score = candidate_score
            session.convergence.mark_accepted()
        else:
            session.convergence.mark_rejected()

        record = IterationRecord(
            index=len(session.history) + 1,
            difference=difference,
            candidate_code=candidate_code,
            render=outcome,
            candidate_score=candidate_score,
            accepted=accepted,
            debug_attempts=attempts,
        )
        session.history.append(record)
        session.transcript.record(
            "decision",
            {
                "iteration": record.index,
                "accepted": accepted,
                "candidate_score": candidate_score.value if candidate_score else None,
                "best_score": session.best_score.value,
                "counter": session.convergence.counter,
            },
        )
        return record

    def run_stage2(self, session: RefinementSession) -> str:
        """Iterate until the convergence counter reaches the threshold.

        Returns the best code seen; a hard iteration cap guards against
        pathological oscillation and is recorded as its own termination reason.
        """
        if session.failed:
            session.termination_reason = TERMINATION_STAGE1_FAILED
        else:
            while not session.convergence.reached and session.iterations < self.iteration_cap:
                self.step(session)
            session.termination_reason = (
                TERMINATION_CONVERGED
                if session.convergence.reached
                else TERMINATION_ITERATION_CAP
            )
        session.transcript.record(
            "termination",
            {
                "reason": session.termination_reason,
                "iterations": session.iterations,
                "best_score": session.best_score.value,
                "failed": session.failed,
            },
        )
        self._write_final_artifacts(session)
        return session.best_code

    def run_item(self, reference: ChartImage, item_id: str = "item") -> RefinementSession:
        """Convenience wrapper: Stage 1 followed by Stage 2."""
        session = self.run_stage1(reference, item_id)
        self.run_stage2(session)
        return session

    # -- Debug loop -------------------------------------------------------

    def try_render_with_debug(
        self, code: str, session: RefinementSession
    ) -> tuple[str, RenderOutcome, int]:
        """Render, sending failures to the debugger role up to max_debug times.

        Returns the last attempted code, its outcome, and the attempt count;
        never touches the session's best fields.
        """
        if not code or not code.strip():
            raise ValueError("code must be non-empty")
        outcome = self._render(code, session)
        attempts = 0
        while not outcome.ok and attempts < self.max_debug:
            prompt = build_debug_prompt(outcome.message or outcome.error_class, code)
            fixed = self.gateway.complete(
                ChatRequest("debugger", prompt, ()), session.transcript
            )
            code = extract_code_block(fixed.text)
            attempts += 1
            outcome = self._render(code, session)
        return code, outcome, attempts

    # -- internals --------------------------------------------------------

    def _render(self, code: str, session: RefinementSession) -> RenderOutcome:
        outcome = self.renderer.render(code, self.render_timeout_ms, self._fresh_workdir(session))
        session.transcript.record("render", outcome.summary())
        return outcome

    def _score(self, image: ChartImage, session: RefinementSession) -> DiscrepancyScore:
        vector = compute_metrics(image, session.reference, self.providers)
        session.transcript.record("metrics", vector.as_dict())
        return aggregate(vector, self.weights)

    def _fresh_workdir(self, session: RefinementSession) -> Path:
        if self._work_root is None:
            self._work_root = Path(tempfile.mkdtemp(prefix="chartir-work-"))
        base = self._work_root / session.item_id
        base.mkdir(parents=True, exist_ok=True)
        self._workdir_seq += 1
        return Path(tempfile.mkdtemp(prefix=f"render-{self._workdir_seq:04d}-", dir=base))

    def _write_final_artifacts(self, session: RefinementSession) -> None:
        if self._output_dir is None:
            return
        item_dir = self._output_dir / session.item_id
        item_dir.mkdir(parents=True, exist_ok=True)
        (item_dir / "final.py").write_text(session.best_code, encoding="utf-8")
        if session.best_image is not None:
            session.best_image.save_png(item_dir / "final.png")
