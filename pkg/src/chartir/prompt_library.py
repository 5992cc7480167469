"""Fixed prompt templates and placeholder substitution.

The template bodies live as UTF-8 data files under ``prompts/`` (one file per
template id) and are verified against pinned sha256 digests on first load.
Substitution is single-pass: payloads are spliced between template segments
and never re-scanned, so payloads containing placeholder-like text pass
through untouched.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

TEMPLATE_IDS = (
    "describe_chart",
    "initial_code",
    "describe_difference",
    "refine_code",
    "judge",
    "code_to_description",
)

PLACEHOLDER_NAMES = ("description", "code", "difference")

_PLACEHOLDER = re.compile(r"\{(description|code|difference)\}")


class PromptError(ValueError):
    """Base class for prompt-library failures."""


class EmptySlot(PromptError):
    """A required payload was blank."""

    def __init__(self, name: str) -> None:
        super().__init__(f"payload for slot '{name}' is blank")
        self.name = name


class EmptyDescription(EmptySlot):
    """The chart description payload was blank."""

    def __init__(self) -> None:
        super().__init__("description")


class TemplateCorrupted(PromptError):
    """A template file does not match its pinned digest."""


@dataclass(frozen=True)
class PromptTemplate:
    """One fixed template: id plus body with zero or more named placeholders."""

    id: str
    body: str

    @property
    def placeholders(self) -> tuple[str, ...]:
        return tuple(m.group(1) for m in _PLACEHOLDER.finditer(self.body))

    def fill(self, **payloads: str) -> str:
        """Splice payloads into the body in template order, single-pass.

        Raises EmptySlot for a blank payload and ValueError when the payload
        names do not match the template's placeholders exactly.
        """
        expected = self.placeholders
        if sorted(payloads) != sorted(expected):
            raise ValueError(
                f"template '{self.id}' expects slots {sorted(expected)}, "
                f"got {sorted(payloads)}"
            )
        pieces: list[str] = []
        cursor = 0
        for match in _PLACEHOLDER.finditer(self.body):
            name = match.group(1)
            value = payloads[name]
            if not value or not value.strip():
                raise EmptySlot(name)
            pieces.append(self.body[cursor : match.start()])
            pieces.append(value)
            cursor = match.end()
        pieces.append(self.body[cursor:])
        return "".join(pieces)


def _prompts_dir():
    return resources.files("chartir") / "prompts"


@lru_cache(maxsize=1)
def _load_templates() -> dict[str, PromptTemplate]:
    """Read all template files, verifying each against its pinned digest."""
    root = _prompts_dir()
    digests = json.loads((root / "digests.json").read_text(encoding="utf-8"))
    templates: dict[str, PromptTemplate] = {}
    for template_id in TEMPLATE_IDS:
        raw = (root / f"{template_id}.txt").read_bytes()
        actual = hashlib.sha256(raw).hexdigest()
        expected = digests.get(template_id)
        if actual != expected:
            raise TemplateCorrupted(
                f"template '{template_id}' digest mismatch: "
                f"expected {expected}, got {actual}"
            )
        body = raw.decode("utf-8")
        names = [m.group(1) for m in _PLACEHOLDER.finditer(body)]
        if len(names) != len(set(names)):
            raise TemplateCorrupted(
                f"template '{template_id}' repeats a placeholder: {names}"
            )
        templates[template_id] = PromptTemplate(id=template_id, body=body)
    return templates


def get_template(template_id: str) -> PromptTemplate:
    if template_id not in TEMPLATE_IDS:
        raise KeyError(f"unknown template id '{template_id}'")
    return _load_templates()[template_id]


def render_description_prompt() -> str:
    """Analysis prompt asking for the eight structured aspects of a chart."""
    return get_template("describe_chart").body


def render_initial_code_prompt(description: str) -> str:
    """Code-generation prompt with the chart description spliced in."""
    if not description or not description.strip():
        raise EmptyDescription()
    return get_template("initial_code").fill(description=description)


def render_difference_prompt() -> str:
    """Two-image comparison prompt covering the six difference aspects."""
    return get_template("describe_difference").body


def render_refine_prompt(code: str, difference: str, description: str) -> str:
    """Refinement prompt filled with current code, difference, and description."""
    return get_template("refine_code").fill(
        code=code, difference=difference, description=description
    )


def render_judge_prompt() -> str:
    """Similarity-rating prompt with the fixed ``Rating: [[n]]`` format."""
    return get_template("judge").body


def render_code_description_prompt(code: str) -> str:
    """Code-analysis prompt ending with the script to describe."""
    return get_template("code_to_description").fill(code=code)
