"""Prompt grammar, byte-level tokenizer, sequence layout and the hybrid attention mask.

Canonical prompt::

    [TAG] <SUBTAG> <img><|image_1|></img> <img><|image_2|></img> instruction

Tags are optional. Prompts may also place the two image placeholders inline
inside free text (``Fuse the <img><|image_1|></img> and ...``).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from ditfuse import kernels


class PromptError(ValueError):
    pass


class InvalidTagCombination(PromptError):
    pass


class UnknownTag(PromptError):
    pass


class MissingPlaceholder(PromptError):
    pass


class MalformedImageWrapper(PromptError):
    pass


class DuplicatePlaceholder(PromptError):
    pass


TASK_SUBTAGS: dict[str, tuple[str, ...]] = {
    "FUSION": ("MULTI-MODALITIES", "MULTI-EXPOSURE", "MULTI-FOCUS"),
    "CONTROL": ("LIGHT++", "LIGHT+", "LIGHT-", "LIGHT--", "CONTRAST+", "CONTRAST-"),
    "SEG": (),
}
ALL_SUBTAGS = tuple(s for subs in TASK_SUBTAGS.values() for s in subs)

IMG_OPEN, IMG_CLOSE = "<img>", "</img>"
IMAGE_1, IMAGE_2 = "<|image_1|>", "<|image_2|>"
NULL, TIME, PAD = "<|null|>", "<|time|>", "<|pad|>"
SLOT_1 = IMG_OPEN + IMAGE_1 + IMG_CLOSE
SLOT_2 = IMG_OPEN + IMAGE_2 + IMG_CLOSE

SPECIAL_TOKENS: tuple[str, ...] = (
    *(f"[{t}]" for t in TASK_SUBTAGS),
    *(f"<{s}>" for s in ALL_SUBTAGS),
    IMG_OPEN,
    IMG_CLOSE,
    IMAGE_1,
    IMAGE_2,
    NULL,
    TIME,
    PAD,
)
VOCAB_FILE = "vocab_v1.txt"
N_BYTES = 256


def load_vocab_file() -> tuple[str, ...]:
    text = resources.files("ditfuse").joinpath(VOCAB_FILE).read_text(encoding="utf-8")
    return tuple(line for line in text.split("\n") if line)


def write_vocab_file(path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(SPECIAL_TOKENS) + "\n")


SPECIAL_IDS = {tok: N_BYTES + i for i, tok in enumerate(SPECIAL_TOKENS)}
ID_TO_SPECIAL = {i: tok for tok, i in SPECIAL_IDS.items()}
VOCAB_SIZE = N_BYTES + len(SPECIAL_TOKENS)
NULL_ID, TIME_ID, PAD_ID = SPECIAL_IDS[NULL], SPECIAL_IDS[TIME], SPECIAL_IDS[PAD]
IMG_OPEN_ID, IMG_CLOSE_ID = SPECIAL_IDS[IMG_OPEN], SPECIAL_IDS[IMG_CLOSE]
IMAGE_IDS = (SPECIAL_IDS[IMAGE_1], SPECIAL_IDS[IMAGE_2])
WRAPPER_IDS = frozenset({IMG_OPEN_ID, IMG_CLOSE_ID, *IMAGE_IDS})

# longest first so that e.g. <LIGHT++> wins over <LIGHT+>
_SPECIAL_RE = re.compile("|".join(re.escape(t) for t in sorted(SPECIAL_TOKENS, key=len, reverse=True)))


# ---------------------------------------------------------------- grammar


@dataclass(frozen=True)
class PromptAST:
    task: str | None = None
    subtask: str | None = None
    instruction: str = ""
    # True when the placeholders live inside ``instruction`` instead of the canonical slot block
    inline_images: bool = False

    def validate(self) -> None:
        if self.task is None:
            if self.subtask is not None:
                raise InvalidTagCombination(f"subtag <{self.subtask}> without a task tag")
        elif self.task not in TASK_SUBTAGS:
            raise UnknownTag(f"[{self.task}]")
        elif self.subtask is None:
            if self.task == "CONTROL":
                raise InvalidTagCombination("[CONTROL] requires a subtag")
        elif self.subtask not in TASK_SUBTAGS[self.task]:
            raise InvalidTagCombination(f"[{self.task}] does not take <{self.subtask}>")
        if self.instruction != self.instruction.strip():
            raise PromptError("instruction must not carry leading/trailing whitespace")
        if self.inline_images:
            _check_slots(self.instruction)
        elif _SPECIAL_RE.search(self.instruction):
            raise PromptError("instruction contains special tokens")


def _check_slots(text: str) -> None:
    for ph, slot in ((IMAGE_1, SLOT_1), (IMAGE_2, SLOT_2)):
        n = text.count(ph)
        if n == 0:
            raise MissingPlaceholder(ph)
        if n > 1:
            raise DuplicatePlaceholder(ph)
        if text.count(slot) != 1:
            raise MalformedImageWrapper(f"{ph} must appear as {slot}")
    if text.index(IMAGE_1) > text.index(IMAGE_2):
        raise PromptError("image placeholders out of order")
    stray = text.replace(SLOT_1, "").replace(SLOT_2, "")
    if IMG_OPEN in stray or IMG_CLOSE in stray:
        raise MalformedImageWrapper("unpaired image wrapper")


def render_prompt(ast: PromptAST) -> str:
    ast.validate()
    parts = []
    if ast.task:
        parts.append(f"[{ast.task}]")
    if ast.subtask:
        parts.append(f"<{ast.subtask}>")
    if not ast.inline_images:
        parts += [SLOT_1, SLOT_2]
    if ast.instruction:
        parts.append(ast.instruction)
    return " ".join(parts)


_LEAD_TASK = re.compile(r"\[([^\]\s]*)\]")
_LEAD_SUB = re.compile(r"<([A-Z][A-Z+\-]*)>")


def parse_prompt(s: str) -> PromptAST:
    """Parse a prompt; leading tags are recognised greedily, the rest is the instruction."""
    rest = s.strip()
    task = subtask = None
    m = _LEAD_TASK.match(rest)
    if m:
        if m.group(1) not in TASK_SUBTAGS:
            raise UnknownTag(m.group(0))
        task = m.group(1)
        rest = rest[m.end() :].lstrip()
    m = _LEAD_SUB.match(rest)
    if m:
        if m.group(1) not in ALL_SUBTAGS:
            raise UnknownTag(m.group(0))
        subtask = m.group(1)
        rest = rest[m.end() :].lstrip()
    _check_slots(rest)
    block = SLOT_1 + " " + SLOT_2
    if rest == block or rest.startswith(block + " "):
        ast = PromptAST(task, subtask, rest[len(block) :].strip(), inline_images=False)
    else:
        ast = PromptAST(task, subtask, rest, inline_images=True)
    ast.validate()
    return ast


def base_template(instruction: str) -> str:
    """Wrap a bare instruction in the canonical placeholder skeleton."""
    return " ".join(p for p in (SLOT_1, SLOT_2, instruction.strip()) if p)


# ---------------------------------------------------------------- tokenizer


def tokenize(s: str) -> np.ndarray:
    ids: list[int] = []
    pos = 0
    for m in _SPECIAL_RE.finditer(s):
        ids.extend(s[pos : m.start()].encode("utf-8"))
        ids.append(SPECIAL_IDS[m.group(0)])
        pos = m.end()
    ids.extend(s[pos:].encode("utf-8"))
    return np.asarray(ids, dtype=np.int64)


def detokenize(ids) -> str:
    out = bytearray()
    chunks: list[str] = []
    for i in np.asarray(ids, dtype=np.int64).tolist():
        if i < N_BYTES:
            out.append(i)
            continue
        chunks.append(out.decode("utf-8"))
        out = bytearray()
        chunks.append(ID_TO_SPECIAL[i])
    chunks.append(out.decode("utf-8"))
    return "".join(chunks)


# ---------------------------------------------------------------- layout and mask


@dataclass(frozen=True)
class Segment:
    kind: str  # "text" | "cond" | "noisy" | "time"
    start: int
    end: int
    index: int | None = None  # condition image number for "cond"

    @property
    def is_image(self) -> bool:
        return self.kind in ("cond", "noisy")


@dataclass
class SequenceLayout:
    segments: list[Segment]
    length: int
    # token id at text positions, -1 at image/time positions
    ids: np.ndarray = field(repr=False)

    def spans(self, kind: str) -> list[Segment]:
        return [s for s in self.segments if s.kind == kind]

    @property
    def image_spans(self) -> list[Segment]:
        return [s for s in self.segments if s.is_image]

    @property
    def noisy(self) -> Segment:
        return self.spans("noisy")[0]

    @property
    def time_pos(self) -> int:
        return self.spans("time")[0].start

    def cond(self, idx: int) -> Segment:
        return next(s for s in self.segments if s.kind == "cond" and s.index == idx)

    def validate(self) -> None:
        pos = 0
        for s in self.segments:
            if s.start != pos or s.end <= s.start:
                raise ValueError(f"segments not contiguous at {s}")
            pos = s.end
        if pos != self.length or self.ids.shape != (self.length,):
            raise ValueError("segments do not cover the sequence")
        if len(self.spans("noisy")) != 1 or self.segments[-1].kind != "time" or self.segments[-1].end != self.length:
            raise ValueError("layout must hold one noisy span and end with the timestep slot")


def assemble_sequence(tokens, cond_lens: tuple[int, int], noisy_len: int) -> SequenceLayout:
    """Expand image placeholders into condition-image spans and append the noisy image and timestep."""
    tokens = [int(t) for t in np.asarray(tokens).tolist()]
    for ph in IMAGE_IDS:
        n = tokens.count(ph)
        if n == 0:
            raise MissingPlaceholder(ID_TO_SPECIAL[ph])
        if n > 1:
            raise DuplicatePlaceholder(ID_TO_SPECIAL[ph])
    segments: list[Segment] = []
    ids: list[int] = []
    text_start = 0

    def close_text():
        if len(ids) > text_start:
            segments.append(Segment("text", text_start, len(ids)))

    def add_image(kind, n, index=None):
        nonlocal text_start
        close_text()
        segments.append(Segment(kind, len(ids), len(ids) + n, index))
        ids.extend([-1] * n)
        text_start = len(ids)

    for i, tok in enumerate(tokens):
        if tok in IMAGE_IDS:
            if not ids or ids[-1] != IMG_OPEN_ID:
                ids.append(IMG_OPEN_ID)
            idx = IMAGE_IDS.index(tok)
            add_image("cond", cond_lens[idx], idx)
            if i + 1 >= len(tokens) or tokens[i + 1] != IMG_CLOSE_ID:
                ids.append(IMG_CLOSE_ID)
            continue
        ids.append(tok)
    ids.append(IMG_OPEN_ID)
    add_image("noisy", noisy_len)
    ids.append(IMG_CLOSE_ID)
    close_text()
    segments.append(Segment("time", len(ids), len(ids) + 1))
    ids.append(-1)
    layout = SequenceLayout(segments, len(ids), np.asarray(ids, dtype=np.int64))
    layout.validate()
    return layout


def build_attention_mask(layout: SequenceLayout, impl=None) -> np.ndarray:
    """Visible iff the key precedes the query or both sit in the same image span."""
    spans = layout.image_spans
    return kernels.span_mask(layout.length, [s.start for s in spans], [s.end for s in spans], impl=impl)
