"""Structured multimodal prompts and context-budget accounting.

Four prompt families are built here: zero-shot, k-shot in-context learning,
text-only majority-vote aggregation, and in-context-ensemble aggregation,
plus the evaluator-judge prompt.  Builders are pure: equal inputs produce
equal message lists.  Budget estimation is a pure function of the message
list and a backend's cost model; callers enforce it before any network call.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Iterator

from .corpus import Demo, FrameRef, Sop, render_sop
from .ioutil import canonical_json_bytes, sha256_hex

if TYPE_CHECKING:  # pragma: no cover
    from .backends import BackendProfile
    from .pipeline import PseudoLabel

PURPOSES = ("zero_shot", "icl", "ensemble_vote", "ice", "judge")
ROLES = ("system", "user", "assistant")

# Fixed block headers inside judge prompts. The deterministic mock judge
# locates the two SOPs through these, so they are builder-owned rather than
# template text.
JUDGE_GOLD_HEADER = "=== GOLD STANDARD SOP ==="
JUDGE_PRED_HEADER = "=== PREDICTED SOP ==="

SOP_FORMAT_REMINDER = (
    "Your previous reply could not be parsed. Reply again with only the "
    "procedure as numbered steps, one step per line, in the form \"N. action\"."
)
JUDGE_FORMAT_REMINDER = (
    "Your previous reply could not be parsed. Reply again with exactly three "
    "lines: PRECISION: <m>/<p>, RECALL: <m>/<g>, ORDER: <o>/<m>."
)


class PromptError(Exception):
    pass


class MissingGold(PromptError):
    def __init__(self, demo_id: str):
        super().__init__(f"example demo {demo_id!r} has no gold SOP")
        self.demo_id = demo_id


class MixedDemoIds(PromptError):
    pass


class TooFewLabels(PromptError):
    pass


class EmptyLabels(PromptError):
    pass


class TemplateError(PromptError):
    pass


# --- message structure ---------------------------------------------------


@dataclass(frozen=True)
class Segment:
    kind: str
    text: str = ""
    image: FrameRef | None = None

    def __post_init__(self):
        if self.kind == "text":
            if self.image is not None:
                raise ValueError("text segment must not carry an image")
        elif self.kind == "image":
            if self.image is None or self.text:
                raise ValueError("image segment must carry exactly an image")
        else:
            raise ValueError(f"unknown segment kind {self.kind!r}")


def text_segment(text: str) -> Segment:
    return Segment(kind="text", text=text)


def image_segment(frame: FrameRef) -> Segment:
    return Segment(kind="image", image=frame)


@dataclass(frozen=True)
class Message:
    role: str
    segments: tuple[Segment, ...]

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")


@dataclass(frozen=True)
class MessageList:
    purpose: str
    messages: tuple[Message, ...]

    def __post_init__(self):
        if self.purpose not in PURPOSES:
            raise ValueError(f"unknown purpose {self.purpose!r}")
        if not any(m.role == "user" for m in self.messages):
            raise ValueError("a MessageList needs at least one user message")

    def iter_segments(self) -> Iterator[Segment]:
        for message in self.messages:
            yield from message.segments

    def image_segments(self) -> list[Segment]:
        return [s for s in self.iter_segments() if s.kind == "image"]

    def text_chars(self) -> int:
        return sum(len(s.text) for s in self.iter_segments() if s.kind == "text")

    def full_text(self) -> str:
        return "\n".join(s.text for s in self.iter_segments() if s.kind == "text")

    def with_followup(self, assistant_text: str, user_text: str) -> "MessageList":
        """Append an assistant turn and a user turn (format-reminder retries)."""
        extra = (
            Message("assistant", (text_segment(assistant_text),)),
            Message("user", (text_segment(user_text),)),
        )
        return MessageList(self.purpose, self.messages + extra)

    def to_json_dict(self, uri_base: Path | str | None = None) -> dict:
        """Snapshot form; image uris are relativized to ``uri_base`` if given."""
        base = Path(uri_base) if uri_base is not None else None

        def seg_dict(seg: Segment) -> dict:
            if seg.kind == "text":
                return {"kind": "text", "text": seg.text}
            uri = seg.image.uri
            if base is not None:
                try:
                    uri = str(Path(uri).relative_to(base))
                except ValueError:
                    pass
            return {"kind": "image", "image_uri": uri}

        return {
            "purpose": self.purpose,
            "messages": [
                {"role": m.role, "segments": [seg_dict(s) for s in m.segments]}
                for m in self.messages
            ],
        }


# --- templates -----------------------------------------------------------

TEMPLATE_NAMES = (
    "system_sop",
    "icl_example_header",
    "test_header",
    "ensemble_vote_instructions",
    "ice_instructions",
    "judge_instructions",
)

_PLACEHOLDER_RE = re.compile(r"\{\{(\w+)\}\}")


def render_template(template: str, **values) -> str:
    """Substitute ``{{name}}`` placeholders; unknown placeholders are an error."""

    def sub(match: re.Match) -> str:
        name = match.group(1)
        if name not in values:
            raise TemplateError(f"template references unknown placeholder {{{{{name}}}}}")
        return str(values[name])

    return _PLACEHOLDER_RE.sub(sub, template)


@dataclass(frozen=True)
class TemplateSet:
    system_sop: str
    icl_example_header: str
    test_header: str
    ensemble_vote_instructions: str
    ice_instructions: str
    judge_instructions: str

    @classmethod
    def load_dir(cls, path: Path | str) -> "TemplateSet":
        path = Path(path)
        values = {}
        for name in TEMPLATE_NAMES:
            tfile = path / f"{name}.txt"
            if not tfile.is_file():
                raise TemplateError(f"missing template file {tfile}")
            values[name] = tfile.read_text(encoding="utf-8")
        return cls(**values)

    @classmethod
    def defaults(cls) -> "TemplateSet":
        values = {}
        for name in TEMPLATE_NAMES:
            ref = resources.files("ice_sop") / "templates" / f"{name}.txt"
            values[name] = ref.read_text(encoding="utf-8")
        return cls(**values)

    def sha256(self) -> str:
        payload = [(name, getattr(self, name)) for name in TEMPLATE_NAMES]
        return sha256_hex(canonical_json_bytes(payload))


# --- prompt builders -------------------------------------------------------


def _frames_as_segments(demo: Demo) -> list[Segment]:
    return [image_segment(f) for f in demo.frames]


def _test_block(test: Demo, templates: TemplateSet) -> list[Segment]:
    header = render_template(templates.test_header, frame_count=len(test.frames))
    return [text_segment(header)] + _frames_as_segments(test)


def build_zero_shot_prompt(demo: Demo, templates: TemplateSet) -> MessageList:
    """Raw visual input only: instructions plus the demo's key frames."""
    return MessageList(
        purpose="zero_shot",
        messages=(
            Message("system", (text_segment(templates.system_sop),)),
            Message("user", tuple(_test_block(demo, templates))),
        ),
    )


def build_icl_prompt(examples: Iterable[Demo], test: Demo, templates: TemplateSet) -> MessageList:
    """Worked examples (frames + gold SOP) followed by the test frames.

    With zero examples the content is identical to the zero-shot prompt
    apart from the purpose tag.
    """
    examples = list(examples)
    segments: list[Segment] = []
    total = len(examples)
    for i, example in enumerate(examples, start=1):
        if example.gold is None:
            raise MissingGold(example.id)
        header = render_template(templates.icl_example_header, index=i, total=total)
        segments.append(text_segment(header))
        segments.extend(_frames_as_segments(example))
        segments.append(text_segment(render_sop(example.gold)))
    segments.extend(_test_block(test, templates))
    return MessageList(
        purpose="icl",
        messages=(
            Message("system", (text_segment(templates.system_sop),)),
            Message("user", tuple(segments)),
        ),
    )


def _candidate_blocks(labels: list["PseudoLabel"]) -> list[Segment]:
    # Deterministic order, anonymous headings: provenance must not leak into
    # the prompt, so candidates are numbered only.
    ordered = sorted(labels, key=lambda lab: (lab.source[0], tuple(lab.source[1])))
    return [
        text_segment(f"Candidate {i}:\n{render_sop(lab.sop)}")
        for i, lab in enumerate(ordered, start=1)
    ]


def _require_single_demo(labels: list["PseudoLabel"], expected_id: str | None = None) -> str:
    ids = {lab.demo_id for lab in labels}
    if expected_id is not None:
        ids.add(expected_id)
    if len(ids) != 1:
        raise MixedDemoIds(f"labels span multiple demos: {sorted(ids)}")
    return next(iter(ids))


def build_ensemble_vote_prompt(labels: list["PseudoLabel"], templates: TemplateSet) -> MessageList:
    """Text-only majority-vote prompt over candidate SOPs (no images)."""
    if len(labels) < 2:
        raise TooFewLabels(f"majority voting needs at least 2 labels, got {len(labels)}")
    _require_single_demo(labels)
    instructions = render_template(templates.ensemble_vote_instructions, count=len(labels))
    segments = [text_segment(instructions)] + _candidate_blocks(labels)
    return MessageList(
        purpose="ensemble_vote",
        messages=(Message("user", tuple(segments)),),
    )


def build_ice_prompt(test: Demo, labels: list["PseudoLabel"], templates: TemplateSet) -> MessageList:
    """Candidate SOPs as priors, then the test frames last."""
    if not labels:
        raise EmptyLabels("in-context ensemble needs at least one candidate label")
    _require_single_demo(labels, expected_id=test.id)
    instructions = render_template(templates.ice_instructions, count=len(labels))
    segments = [text_segment(instructions)] + _candidate_blocks(labels)
    segments.extend(_frames_as_segments(test))
    return MessageList(
        purpose="ice",
        messages=(Message("user", tuple(segments)),),
    )


def build_judge_prompt(pred: Sop, gold: Sop, templates: TemplateSet) -> MessageList:
    """Scoring prompt: instructions, gold block, prediction block."""
    segments = (
        text_segment(templates.judge_instructions),
        text_segment(f"{JUDGE_GOLD_HEADER}\n{render_sop(gold)}"),
        text_segment(f"{JUDGE_PRED_HEADER}\n{render_sop(pred)}"),
    )
    return MessageList(purpose="judge", messages=(Message("user", segments),))


# --- budgets ---------------------------------------------------------------


@dataclass(frozen=True)
class CostModel:
    """Vendor-neutral input-cost estimate for image-bearing chat prompts.

    Text costs ``chars_per_token`` characters per token; each image costs a
    base amount plus a per-tile amount for every ``image_tile_px`` square it
    spans. Conservative defaults; override per profile for a closer fit.
    """

    chars_per_token: float = 4.0
    image_base_tokens: int = 85
    image_tile_tokens: int = 170
    image_tile_px: int = 512

    def tokens_per_image(self, width_px: int, height_px: int) -> int:
        tiles = math.ceil(width_px / self.image_tile_px) * math.ceil(height_px / self.image_tile_px)
        return self.image_base_tokens + self.image_tile_tokens * tiles


@dataclass(frozen=True)
class BudgetReport:
    image_count: int
    estimated_input_tokens: int
    limit_images: int
    limit_tokens: int
    within_budget: bool


def estimate_budget(prompt: MessageList, profile: "BackendProfile") -> BudgetReport:
    """Estimate prompt cost against a profile's context limits. Pure."""
    cost = profile.cost_model
    images = prompt.image_segments()
    image_tokens = sum(cost.tokens_per_image(s.image.width_px, s.image.height_px) for s in images)
    text_tokens = math.ceil(prompt.text_chars() / cost.chars_per_token)
    total = text_tokens + image_tokens
    return BudgetReport(
        image_count=len(images),
        estimated_input_tokens=total,
        limit_images=profile.limit_images,
        limit_tokens=profile.limit_tokens,
        within_budget=len(images) <= profile.limit_images and total <= profile.limit_tokens,
    )
