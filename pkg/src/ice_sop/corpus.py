"""Demonstration corpus: loading, gold-SOP parsing, splitting, batching.

A corpus root holds one directory per recorded workflow ("demo").  Each demo
directory contains the ordered key frames of a screen recording (either
directly or under a ``frames/`` subdirectory) plus, optionally, exactly one
gold SOP text file.  Frame order is the lexicographic order of the image
filenames, which are expected to be zero-padded.

Everything here is a pure value producer: loading the same tree twice gives
equal corpora, and the train/test split is driven by a pinned xorshift64
generator feeding a Fisher-Yates shuffle, so the same (ids, fraction, seed)
always produces the same split regardless of platform or Python version.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

from PIL import Image

from .ioutil import dump_json

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}
DEFAULT_GOLD_GLOB = "SOP*.txt"


class CorpusError(Exception):
    """Base class for corpus-layer failures."""


class UnreadableRoot(CorpusError):
    pass


class DemoWithNoFrames(CorpusError):
    def __init__(self, demo_id: str):
        super().__init__(f"demo {demo_id!r} contains no frame images")
        self.demo_id = demo_id


class GoldParseFailure(CorpusError):
    def __init__(self, demo_id: str, detail: str):
        super().__init__(f"gold SOP for demo {demo_id!r}: {detail}")
        self.demo_id = demo_id
        self.detail = detail


class NoStepsFound(CorpusError):
    pass


class CorpusTooSmall(CorpusError):
    pass


# --- step / SOP values -------------------------------------------------

# Line-start markers recognized by the parser. The numbered forms require a
# separator followed by whitespace (or end of line) so decimals inside a
# sentence ("3.5 volts") never split a step.
_STEP_WORD_RE = re.compile(r"^\s*step\s+(\d+)\s*[.:)](?:\s+(?P<text>.*))?\s*$", re.IGNORECASE)
_NUMBER_RE = re.compile(r"^\s*(\d+)\s*[.)](?:\s+(?P<text>.*))?\s*$")
_BULLET_RE = re.compile(r"^\s*[-*](?:\s+(?P<text>.*))?\s*$")
_MARKER_RES = (_STEP_WORD_RE, _NUMBER_RE, _BULLET_RE)


def _match_marker(line: str):
    for pat in _MARKER_RES:
        m = pat.match(line)
        if m:
            return m
    return None


def _strip_markers(text: str) -> str:
    """Strip leading list markers repeatedly ("1. - foo" -> "foo")."""
    text = text.strip()
    while text:
        m = _match_marker(text)
        if m is None:
            return text
        text = (m.group("text") or "").strip()
    return text


def has_leading_marker(text: str) -> bool:
    return _match_marker(text) is not None


@dataclass(frozen=True)
class Step:
    ordinal: int
    text: str

    def __post_init__(self):
        if self.ordinal < 1:
            raise ValueError(f"step ordinal must be >= 1, got {self.ordinal}")
        if not self.text or self.text != self.text.strip():
            raise ValueError(f"step text must be non-empty and stripped: {self.text!r}")
        if has_leading_marker(self.text):
            raise ValueError(f"step text must not start with a list marker: {self.text!r}")


@dataclass(frozen=True)
class Sop:
    """An ordered, non-empty list of workflow steps."""

    steps: tuple[Step, ...]

    def __post_init__(self):
        if not self.steps:
            raise ValueError("a Sop must contain at least one step")
        for i, step in enumerate(self.steps, start=1):
            if step.ordinal != i:
                raise ValueError(f"step ordinals must be contiguous from 1, got {step.ordinal} at position {i}")

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def step_texts(self) -> tuple[str, ...]:
        return tuple(s.text for s in self.steps)

    @classmethod
    def from_texts(cls, texts) -> "Sop":
        return cls(tuple(Step(i, t) for i, t in enumerate(texts, start=1)))


def parse_sop(text: str) -> Sop:
    """Split free text into steps.

    Numbered markers ("1.", "2)", "Step 3:") and bullets ("-", "*") at line
    starts open a new step; unmarked lines attach to the preceding step
    (joined with a single space), or open the first step when nothing
    precedes them.  Original numbering is ignored: ordinals are reassigned
    1..n in encounter order.

    Raises NoStepsFound when no step can be recovered (blank input, or
    markers with no text at all).
    """
    collected: list[str] = []
    for raw_line in text.splitlines():
        line = raw_line.strip()
        if not line:
            continue
        m = _match_marker(line)
        if m is not None:
            collected.append(_strip_markers(line))
        elif collected:
            collected[-1] = (collected[-1] + " " + line).strip()
        else:
            collected.append(line)
    texts = [t for t in collected if t]
    if not texts:
        raise NoStepsFound("no steps and no non-blank content found")
    return Sop.from_texts(texts)


def render_sop(sop: Sop) -> str:
    """Canonical "N. text" rendering; parse_sop(render_sop(s)) keeps step texts."""
    return "\n".join(f"{s.ordinal}. {s.text}" for s in sop.steps)


# --- frames and demos --------------------------------------------------


@dataclass(frozen=True)
class FrameRef:
    demo_id: str
    index: int
    uri: str
    width_px: int
    height_px: int

    def __post_init__(self):
        if self.index < 0:
            raise ValueError("frame index must be >= 0")
        if self.width_px <= 0 or self.height_px <= 0:
            raise ValueError("frame dimensions must be positive")


@dataclass
class Demo:
    id: str
    frames: tuple[FrameRef, ...]
    gold: Sop | None = None
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.frames:
            raise DemoWithNoFrames(self.id)
        indices = [f.index for f in self.frames]
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise ValueError(f"frame indices of demo {self.id!r} must be strictly increasing")


Corpus = dict[str, Demo]


def _image_size(path: Path) -> tuple[int, int]:
    with Image.open(path) as im:
        return im.size


def load_corpus(root: Path | str, gold_glob: str = DEFAULT_GOLD_GLOB) -> Corpus:
    """Load every demo subdirectory of ``root``, sorted by id.

    Layout per demo: ``<root>/<demo-id>/frames/<NNNN>.png|jpg`` (a flat demo
    directory without the ``frames/`` level is also accepted) plus at most
    one gold SOP file matching ``gold_glob``.  Demos without a gold file get
    ``gold=None``; more than one match is an error.
    """
    root = Path(root)
    if not root.is_dir():
        raise UnreadableRoot(f"corpus root {root} is not a readable directory")

    corpus: Corpus = {}
    for demo_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        demo_id = demo_dir.name
        frames_dir = demo_dir / "frames"
        scan_dir = frames_dir if frames_dir.is_dir() else demo_dir
        image_paths = sorted(
            p for p in scan_dir.iterdir()
            if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
        )
        if not image_paths:
            raise DemoWithNoFrames(demo_id)

        frames = []
        for idx, path in enumerate(image_paths):
            try:
                width, height = _image_size(path)
            except OSError as exc:
                raise CorpusError(f"unreadable frame {path}: {exc}") from exc
            frames.append(FrameRef(demo_id, idx, str(path), width, height))

        gold = None
        gold_paths = sorted(demo_dir.glob(gold_glob))
        if len(gold_paths) > 1:
            names = ", ".join(p.name for p in gold_paths)
            raise GoldParseFailure(demo_id, f"multiple gold SOP files: {names}")
        if gold_paths:
            try:
                gold = parse_sop(gold_paths[0].read_text(encoding="utf-8"))
            except NoStepsFound as exc:
                raise GoldParseFailure(demo_id, str(exc)) from exc

        corpus[demo_id] = Demo(
            id=demo_id,
            frames=tuple(frames),
            gold=gold,
            meta={"path": str(demo_dir)},
        )
    return corpus


# --- split and batches -------------------------------------------------

_MASK64 = (1 << 64) - 1
# The all-zero state is a fixed point of xorshift, so seed 0 is remapped.
_ZERO_SEED_SUBSTITUTE = 0x9E3779B97F4A7C15


class XorShift64:
    """Pinned 64-bit xorshift generator.

    Update equations (all arithmetic mod 2**64):

        x ^= x << 13
        x ^= x >> 7
        x ^= x << 17

    Used to drive the Fisher-Yates shuffle behind corpus splitting so that
    splits are reproducible across languages and runtimes.
    """

    def __init__(self, seed: int):
        self.state = (seed & _MASK64) or _ZERO_SEED_SUBSTITUTE

    def next_u64(self) -> int:
        x = self.state
        x ^= (x << 13) & _MASK64
        x ^= x >> 7
        x ^= (x << 17) & _MASK64
        self.state = x
        return x


def _fisher_yates(items: list[str], rng: XorShift64) -> list[str]:
    out = list(items)
    for i in range(len(out) - 1, 0, -1):
        j = rng.next_u64() % (i + 1)
        out[i], out[j] = out[j], out[i]
    return out


@dataclass(frozen=True)
class Split:
    seed: int
    train_fraction: float
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]

    def to_json(self) -> str:
        return dump_json({
            "seed": self.seed,
            "train_fraction": self.train_fraction,
            "train_ids": list(self.train_ids),
            "test_ids": list(self.test_ids),
        })

    @classmethod
    def from_json_dict(cls, data: dict) -> "Split":
        return cls(
            seed=data["seed"],
            train_fraction=data["train_fraction"],
            train_ids=tuple(data["train_ids"]),
            test_ids=tuple(data["test_ids"]),
        )


@dataclass(frozen=True)
class Batch:
    index: int
    demo_ids: tuple[str, ...]

    def __post_init__(self):
        if self.index < 1:
            raise ValueError("batch index is 1-based")

    def __len__(self) -> int:
        return len(self.demo_ids)


def split_corpus(corpus: Corpus, train_fraction: float, seed: int) -> Split:
    """Deterministically split a corpus into train/test id lists.

    Sorted ids are shuffled with Fisher-Yates driven by :class:`XorShift64`;
    the first ``k = round_half_up(train_fraction * n)`` shuffled ids become
    the training set (0.3 * 724 = 217.2 -> 217).
    """
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    if len(corpus) < 2:
        raise CorpusTooSmall(f"need at least 2 demos to split, got {len(corpus)}")

    ids = sorted(corpus)
    shuffled = _fisher_yates(ids, XorShift64(seed))
    k = int(math.floor(train_fraction * len(ids) + 0.5))
    return Split(
        seed=seed,
        train_fraction=train_fraction,
        train_ids=tuple(shuffled[:k]),
        test_ids=tuple(shuffled[k:]),
    )


def make_batches(train_ids, batch_size: int) -> list[Batch]:
    """Chunk train ids in order; the final batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    ids = list(train_ids)
    return [
        Batch(index=i + 1, demo_ids=tuple(ids[i * batch_size:(i + 1) * batch_size]))
        for i in range(math.ceil(len(ids) / batch_size))
    ]


def batches_to_json(batch_size: int, batches: list[Batch]) -> str:
    return dump_json({
        "batch_size": batch_size,
        "batches": [list(b.demo_ids) for b in batches],
    })


def downsample_frames(frames, cap: int) -> tuple[FrameRef, ...]:
    """Reduce an ordered frame list to at most ``cap`` frames.

    When over the cap, keeps frames at positions floor(k*(n-1)/(cap-1)) for
    k = 0..cap-1, which always retains the first and last frame and
    preserves order.  ``cap == 1`` keeps only the first frame.
    """
    if cap < 1:
        raise ValueError("cap must be >= 1")
    frames = tuple(frames)
    if not frames:
        raise ValueError("frames must be non-empty")
    n = len(frames)
    if n <= cap:
        return frames
    if cap == 1:
        return (frames[0],)
    return tuple(frames[(k * (n - 1)) // (cap - 1)] for k in range(cap))
