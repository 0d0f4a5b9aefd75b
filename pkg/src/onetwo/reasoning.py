"""Structured reasoning text: content type, template grammar, lossless parse.

Three surface forms, all single-spaced word sequences over the closed
vocabulary:

  FULL  "scene : oil bottle at c2 . tomato at e4 . plan : pour the oil
         bottle . ... done : 1 2 . next : pour the egg ."
  PICK  "i need to pick up the red apple , which is red , at b4 ."
  TERM  "Task Finished ."

History is serialized as 1-based plan indices, so parsing needs no lookup
tables beyond the plan section itself.  A next step may also be a recovery
directive ("regrasp the oil bottle") or an ask directive ("ask which one
would you like : a or b or c"), and the terminal flag is exactly the
next step "Task Finished".
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

TERMINAL_TEXT = "Task Finished"
ASK_PREFIX = "ask "
REGRASP_PREFIX = "regrasp the "

_SECTION_WORDS = ("scene", "plan", "done", "next")
_CELL_RE = re.compile(r"^[a-f][1-6]$")
_PICK_RE = re.compile(
    r"^i need to pick up the (?P<name>[a-z ]+?) , which is (?P<color>[a-z]+) , at (?P<cell>[a-f][1-6])$"
)


class ParseError(ValueError):
    pass


@dataclass(frozen=True)
class ReasoningContent:
    scene: str
    plan: tuple[str, ...]
    history: tuple[str, ...]
    next_step: str
    terminal: bool = False

    def with_next(self, next_step: str) -> "ReasoningContent":
        return replace(self, next_step=next_step, terminal=next_step == TERMINAL_TEXT)


def make_full(scene_entries: list[tuple[str, str]], plan: list[str], done: int,
              next_step: str) -> ReasoningContent:
    """Build canonical FULL-form content from (name, cell) scene entries."""
    scene = " . ".join(f"{name} at {cell}" for name, cell in scene_entries)
    return ReasoningContent(
        scene=scene,
        plan=tuple(plan),
        history=tuple(plan[:done]),
        next_step=next_step,
        terminal=next_step == TERMINAL_TEXT,
    )


def make_pick(name: str, color: str, cell: str) -> ReasoningContent:
    sentence = f"i need to pick up the {name} , which is {color} , at {cell}"
    return ReasoningContent(
        scene=sentence,
        plan=(f"pick up the {name}",),
        history=(),
        next_step=f"pick up the {name}",
        terminal=False,
    )


def make_terminal() -> ReasoningContent:
    return ReasoningContent(scene="", plan=(), history=(), next_step=TERMINAL_TEXT,
                            terminal=True)


def ask_step(question: str) -> str:
    return ASK_PREFIX + question


def is_ask(next_step: str) -> bool:
    return next_step.startswith(ASK_PREFIX)


def question_of(next_step: str) -> str:
    if not is_ask(next_step):
        raise ValueError("not an ask directive")
    return next_step[len(ASK_PREFIX):]


def regrasp_step(name: str) -> str:
    return REGRASP_PREFIX + name


def _is_pick(content: ReasoningContent) -> bool:
    m = _PICK_RE.match(content.scene)
    if not m:
        return False
    name = m.group("name")
    return (content.plan == (f"pick up the {name}",)
            and content.history == ()
            and content.next_step == f"pick up the {name}"
            and not content.terminal)


def serialize(content: ReasoningContent) -> str:
    """Canonical text for a content; inverse of parse."""
    if content.terminal and not content.plan:
        return f"{TERMINAL_TEXT} ."
    if _is_pick(content):
        return f"{content.scene} ."
    if not content.plan:
        raise ValueError("non-terminal content needs a plan")
    if content.history != tuple(content.plan[:len(content.history)]):
        raise ValueError("history must be a prefix of the plan")
    done = "none" if not content.history else " ".join(
        str(i + 1) for i in range(len(content.history)))
    parts = [
        "scene :", content.scene, ".",
        "plan :", " . ".join(content.plan), ".",
        "done :", done, ".",
        "next :", content.next_step, ".",
    ]
    return " ".join(parts)


def _split_sections(words: list[str]) -> dict[str, list[str]]:
    marks = []
    for i, w in enumerate(words):
        if w in _SECTION_WORDS and i + 1 < len(words) and words[i + 1] == ":":
            if not marks or marks[-1][0] != w:
                marks.append((w, i))
    if [m[0] for m in marks] != list(_SECTION_WORDS):
        raise ParseError(f"expected sections {_SECTION_WORDS}, got {[m[0] for m in marks]}")
    out = {}
    for (name, start), (_, end) in zip(marks, marks[1:] + [("", len(words))]):
        out[name] = words[start + 2:end]
    return out


def _strip_dot(words: list[str], section: str) -> list[str]:
    if not words or words[-1] != ".":
        raise ParseError(f"section {section!r} must end with '.'")
    return words[:-1]


def _split_on_dots(words: list[str]) -> list[list[str]]:
    items, cur = [], []
    for w in words:
        if w == ".":
            if not cur:
                raise ParseError("empty item")
            items.append(cur)
            cur = []
        else:
            cur.append(w)
    if cur:
        items.append(cur)
    return items


def parse(text: str) -> ReasoningContent:
    """Parse any of the three forms back into content.

    Raises ParseError on malformed text; serialize(parse(t)) == t holds for
    every text this module can emit.
    """
    if text == f"{TERMINAL_TEXT} .":
        return make_terminal()
    stripped = text[:-2] if text.endswith(" .") else None
    if stripped is not None:
        m = _PICK_RE.match(stripped)
        if m:
            content = make_pick(m.group("name"), m.group("color"), m.group("cell"))
            if serialize(content) != text:
                raise ParseError("non-canonical pick sentence")
            return content
    words = text.split(" ")
    if any(w == "" for w in words):
        raise ParseError("text is not single-spaced")
    sections = _split_sections(words)

    scene_words = _strip_dot(sections["scene"], "scene")
    scene_entries = _split_on_dots(scene_words)
    for entry in scene_entries:
        if len(entry) < 3 or entry[-2] != "at" or not _CELL_RE.match(entry[-1]):
            raise ParseError(f"bad scene entry: {' '.join(entry)!r}")
    scene = " . ".join(" ".join(e) for e in scene_entries)

    plan_words = _strip_dot(sections["plan"], "plan")
    plan = tuple(" ".join(p) for p in _split_on_dots(plan_words))
    if not plan:
        raise ParseError("empty plan")

    done_words = _strip_dot(sections["done"], "done")
    if done_words == ["none"]:
        history: tuple[str, ...] = ()
    else:
        try:
            nums = [int(w) for w in done_words]
        except ValueError as exc:
            raise ParseError(f"bad done list: {done_words}") from exc
        if nums != list(range(1, len(nums) + 1)) or len(nums) > len(plan):
            raise ParseError(f"done list must be 1..k within plan: {nums}")
        history = tuple(plan[:len(nums)])

    next_words = _strip_dot(sections["next"], "next")
    if not next_words:
        raise ParseError("empty next step")
    next_step = " ".join(next_words)
    return ReasoningContent(scene=scene, plan=plan, history=history,
                            next_step=next_step,
                            terminal=next_step == TERMINAL_TEXT)


def parse_plan(text: str) -> tuple[str, ...]:
    """Parse a bare ordered-plan text: 'plan : a . b . c .'"""
    words = text.split(" ")
    if words[:2] != ["plan", ":"]:
        raise ParseError("plan text must start with 'plan :'")
    body = _strip_dot(words[2:], "plan")
    return tuple(" ".join(p) for p in _split_on_dots(body))


def serialize_plan(steps: list[str]) -> str:
    if not steps:
        raise ValueError("empty plan")
    return "plan : " + " . ".join(steps) + " ."
