from __future__ import annotations

import numpy as np
import pytest

from chartir.gateway import MockBackend, MockPlaybook, ModelGateway, PlaybookEntry
from chartir.images import ChartImage
from chartir.sandbox import RenderOutcome

# Deterministic five-line chart scripts used as gold code across the suite.
# They end in an interactive show call on purpose: benchmark gold code does,
# and the orchestrator must rewrite it.
GOLD_PIE = """\
import matplotlib.pyplot as plt
fig, ax = plt.subplots(figsize=(4, 4))
ax.pie([35, 40, 25], labels=["Alpha", "Beta", "Gamma"], colors=["#FF6B6B", "#4ECDC4", "#FFE66D"])
ax.set_title("Market Share")
plt.show()
"""

GOLD_BAR = """\
import matplotlib.pyplot as plt
fig, ax = plt.subplots(figsize=(4, 3))
ax.bar(["Q1", "Q2", "Q3", "Q4"], [3, 7, 5, 9], color="#2E86AB")
ax.set_title("Revenue")
ax.set_ylabel("MUSD")
plt.show()
"""

GOLD_LINE = """\
import matplotlib.pyplot as plt
fig, ax = plt.subplots(figsize=(4, 3))
ax.plot([0, 1, 2, 3, 4], [1, 3, 2, 5, 4], color="#D7263D", marker="o")
ax.set_title("Trend")
ax.set_xlabel("Day")
plt.show()
"""

GOLD_SCRIPTS = {"pie": GOLD_PIE, "bar": GOLD_BAR, "line": GOLD_LINE}


def random_image(rng: np.random.Generator, width: int, height: int) -> ChartImage:
    return ChartImage(rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8))


def blend_toward(target: ChartImage, noise: ChartImage, alpha: float) -> ChartImage:
    """alpha=0 reproduces the target exactly; alpha=1 is pure noise."""
    mixed = (1.0 - alpha) * target.pixels.astype(np.float64) + alpha * noise.pixels.astype(
        np.float64
    )
    return ChartImage(np.clip(np.round(mixed), 0, 255).astype(np.uint8))


def fenced(code: str) -> str:
    return f"```python\n{code}\n```"


def make_gateway(entries: list[tuple[str, str]]) -> ModelGateway:
    playbook = MockPlaybook([PlaybookEntry(role, text) for role, text in entries])
    return ModelGateway(MockBackend(playbook))


class StubRenderer:
    """In-process renderer substitute: code text selects a canned outcome."""

    def __init__(self, images: dict[str, ChartImage], failing: set[str] | None = None) -> None:
        self.images = images
        self.failing = failing or set()
        self.calls: list[str] = []

    def render(self, code: str, timeout_ms: int, workdir) -> RenderOutcome:
        self.calls.append(code)
        key = code.strip()
        if key in self.failing or key not in self.images:
            return RenderOutcome(
                status="Failure",
                error_class="NameError",
                message=f"name '{key}' is not defined",
            )
        return RenderOutcome(status="Success", image=self.images[key])


@pytest.fixture(scope="session")
def orchestrator():
    from chartir.sandbox import SandboxOrchestrator

    return SandboxOrchestrator()


@pytest.fixture
def fresh_workdir(tmp_path):
    counter = [0]

    def make():
        counter[0] += 1
        path = tmp_path / f"work-{counter[0]:03d}"
        path.mkdir()
        return path

    return make
