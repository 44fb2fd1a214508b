"""Prompt templates and rendering.

Template bodies live as plain text files (one per template id) with literal
``{}`` placeholders. The packaged defaults can be overridden file-by-file from
a directory.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .segmentation import Passage

PLACEHOLDER = "{}"
SUMMARY_JOINER = "\n\n"
PASSAGE_JOINER = "\n"


class TemplateId(str, enum.Enum):
    CHUNK_SUMMARY = "chunk_summary"
    CHUNK_SUMMARY_WITH_CITATIONS = "chunk_summary_with_citations"
    MERGE_PLAIN = "merge_plain"
    MERGE_WITH_CITATIONS = "merge_with_citations"
    MERGE_SUPPORT = "merge_support"
    MERGE_SUPPORT_WITH_CITATIONS = "merge_support_with_citations"

    @property
    def arity(self) -> int:
        if self in (TemplateId.MERGE_SUPPORT, TemplateId.MERGE_SUPPORT_WITH_CITATIONS):
            return 2
        return 1


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    id: TemplateId
    body: str

    def __post_init__(self):
        found = self.body.count(PLACEHOLDER)
        if found != self.id.arity:
            raise PromptError(
                f"template {self.id.value}: expected {self.id.arity} placeholder(s), found {found}"
            )


def render(template: PromptTemplate, slots: list[str]) -> str:
    if len(slots) != template.id.arity:
        raise PromptError(
            f"template {template.id.value} takes {template.id.arity} slot(s), got {len(slots)}"
        )
    # split on the literal placeholder so braces inside slots are never reinterpreted
    parts = template.body.split(PLACEHOLDER)
    out = [parts[0]]
    for slot, tail in zip(slots, parts[1:]):
        out.append(slot)
        out.append(tail)
    return "".join(out)


def _read_default(tid: TemplateId) -> str:
    text = resources.files("cahm.prompts").joinpath(f"{tid.value}.txt").read_text(encoding="utf-8")
    return text.rstrip("\n")


def load_templates(prompt_dir: str | Path | None = None) -> dict[TemplateId, PromptTemplate]:
    """Packaged defaults, with any ``<id>.txt`` found in ``prompt_dir`` taking precedence."""
    templates = {}
    override = Path(prompt_dir) if prompt_dir else None
    if override is not None and not override.is_dir():
        raise PromptError(f"prompt directory not found: {override}")
    for tid in TemplateId:
        path = override / f"{tid.value}.txt" if override else None
        if path is not None and path.is_file():
            body = path.read_text(encoding="utf-8").rstrip("\n")
        else:
            body = _read_default(tid)
        templates[tid] = PromptTemplate(tid, body)
    return templates


def label_passages_block(passages: list[Passage]) -> str:
    """Render passages as ``<text> [<label>]`` lines in list order."""
    seen = set()
    lines = []
    for p in passages:
        if p.label in seen:
            raise PromptError(f"duplicate passage label {p.label}")
        seen.add(p.label)
        lines.append(f"{p.text.strip()} [{p.label}]")
    return PASSAGE_JOINER.join(lines)


def plain_passages_block(passages: list[Passage]) -> str:
    return PASSAGE_JOINER.join(p.text.strip() for p in passages if p.text.strip())
