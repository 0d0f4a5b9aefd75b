"""Closed word-level vocabulary and deterministic prefix assembly.

The policy conditions on a single token stream: two rasters as patch
placeholders, the instruction plus any spliced dialogue, and the latest
reasoning text. This module owns that layout and the vocabulary that
makes it closed: every word the grammar or catalog can produce has a
fixed id, and anything else is a hard error rather than a fallback.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .catalog import Catalog, default_catalog
from .reasoning import ReasoningContent, serialize
from .refs import (CELLS, DISH_NOUNS, DISH_STYLES, NAME_TEMPLATES, PROXIMITY,
                   RELATIONS, SEMANTIC_TEMPLATES)

VOCAB_VERSION = 1
VOCAB_CAP = 1024

SPECIALS = ("[BOR]", "[BOA]", "[EOS]", "[PAD]", "[SEP]", "[IMG]", "[HUM]")
BOR_ID, BOA_ID, EOS_ID, PAD_ID, SEP_ID, IMG_ID, HUM_ID = range(7)

IMAGE_TOKENS = 36            # 6x6 grid of 8x8 patches per raster
PATCH_DIM = 8 * 8 * 3
MAX_PREFIX = 512

# Grammar scaffolding that never appears in catalog text fields.
_CORE_WORDS = (
    "scene", "plan", "done", "next", ":", ".", ",", "none", "at",
    "i", "need", "to", "is", "Task", "Finished",
    "ask", "regrasp", "wait", "want", "object",
)
_COUNTER_WORDS = tuple(str(n) for n in range(1, 13))


class CodecError(ValueError):
    pass


class PrefixOverflowError(CodecError):
    pass


@dataclass(frozen=True)
class Vocab:
    """Immutable token table; ids are positions, specials first."""

    tokens: tuple[str, ...]
    version: int = VOCAB_VERSION

    def __post_init__(self):
        if self.tokens[: len(SPECIALS)] != SPECIALS:
            raise CodecError("special tokens must occupy ids 0-6")
        if len(self.tokens) > VOCAB_CAP:
            raise CodecError(f"vocab size {len(self.tokens)} exceeds {VOCAB_CAP}")
        index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            raise CodecError("duplicate token in vocab")
        object.__setattr__(self, "_index", index)

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def hash(self) -> str:
        payload = f"v{self.version}:" + "\x00".join(self.tokens)
        return hashlib.sha1(payload.encode()).hexdigest()

    def id(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise CodecError(f"unknown word {token!r}") from None

    def token(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.tokens):
            raise CodecError(f"token id {token_id} out of range")
        return self.tokens[token_id]

    def to_json(self) -> str:
        return json.dumps({"version": self.version, "tokens": list(self.tokens)})

    @classmethod
    def from_json(cls, text: str) -> "Vocab":
        raw = json.loads(text)
        return cls(tokens=tuple(raw["tokens"]), version=raw["version"])


def _template_words(templates: Iterable[str]) -> set[str]:
    words: set[str] = set()
    for tpl in templates:
        words.update(w for w in tpl.replace("{}", " ").split() if w)
    return words


def build_vocab(catalog: Catalog | None = None) -> Vocab:
    """Deterministic vocabulary: specials, then sorted words from the
    catalog texts, reference templates, grammar scaffolding, grid cells,
    and plan-counter digits."""
    catalog = catalog or default_catalog()
    words: set[str] = set(_CORE_WORDS)
    words.update(_COUNTER_WORDS)
    words.update(CELLS)
    words.update(_template_words(NAME_TEMPLATES))
    words.update(_template_words(SEMANTIC_TEMPLATES))
    words.update(_template_words(RELATIONS))
    words.update(_template_words((PROXIMITY,)))
    words.update(DISH_STYLES)
    words.update(DISH_NOUNS)
    words.add("make")
    for entry in catalog.objects.values():
        words.update(entry.name.split(" "))
        words.add(entry.color)
        words.add(entry.size)
        words.add(entry.shape)
        for tag in entry.tags:
            words.update(tag.split(" "))
    for task in catalog.tasks.values():
        if task.instruction:
            words.update(task.instruction.split(" "))
        if task.interaction:
            words.update(_interaction_words(task.interaction))
    return Vocab(tokens=SPECIALS + tuple(sorted(words)))


def _interaction_words(value) -> set[str]:
    # Only multi-word fields are human-visible text; bare ids stay out.
    words: set[str] = set()
    if isinstance(value, str):
        if " " in value:
            words.update(value.split(" "))
    elif isinstance(value, dict):
        for item in value.values():
            words.update(_interaction_words(item))
    elif isinstance(value, (list, tuple)):
        for item in value:
            words.update(_interaction_words(item))
    return words


def encode(vocab: Vocab, text: str) -> list[int]:
    if text == "":
        return []
    ids = []
    for word in text.split(" "):
        if word.startswith("["):
            raise CodecError(f"control token {word!r} not allowed in text")
        ids.append(vocab.id(word))
    return ids


def decode(vocab: Vocab, ids: Sequence[int]) -> str:
    return " ".join(vocab.token(i) for i in ids)


def patchify(image: np.ndarray) -> np.ndarray:
    """(48, 48, 3) raster to (36, 192) row-major patch matrix, float32.

    Accepts stored uint8 rasters or live float renders in [0, 1]; both
    land on the same [0, 1] scale.
    """
    if image.shape != (48, 48, 3):
        raise CodecError(f"expected (48, 48, 3) raster, got {image.shape}")
    if np.issubdtype(image.dtype, np.integer):
        image = image.astype(np.float32) / 255.0
    grid = image.astype(np.float32).reshape(6, 8, 6, 8, 3)
    return grid.transpose(0, 2, 1, 3, 4).reshape(IMAGE_TOKENS, PATCH_DIM)


@dataclass(frozen=True, eq=False)
class Prefix:
    """Assembled conditioning stream.

    ids holds the placeholder/text tokens; patches carries the pixel
    content for the leading 72 [IMG] slots, current raster first. The
    decision slot is the position right after the final [SEP], i.e.
    len(ids): whatever token the model writes there picks its mode.
    """

    ids: tuple[int, ...]
    patches: np.ndarray
    decision_slot: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "decision_slot", len(self.ids))

    @property
    def length(self) -> int:
        return len(self.ids)


def assemble_prefix(vocab: Vocab, obs, ref_obs, instruction: str,
                    log_texts: Sequence[str] = (),
                    reasoning: "ReasoningContent | str | None" = None,
                    max_len: int = MAX_PREFIX) -> Prefix:
    """Layout: [IMG]x36 current, [IMG]x36 reference, [SEP], instruction
    with each dialogue entry spliced as [HUM] + its words, [SEP],
    reasoning words, [SEP]. Length is capped; overflow raises rather
    than truncates."""
    if isinstance(reasoning, ReasoningContent):
        reasoning = serialize(reasoning)
    ids: list[int] = [IMG_ID] * (2 * IMAGE_TOKENS)
    ids.append(SEP_ID)
    ids.extend(encode(vocab, instruction))
    for entry in log_texts:
        ids.append(HUM_ID)
        ids.extend(encode(vocab, entry))
    ids.append(SEP_ID)
    ids.extend(encode(vocab, reasoning or ""))
    ids.append(SEP_ID)
    if len(ids) > max_len:
        raise PrefixOverflowError(f"prefix length {len(ids)} exceeds {max_len}")
    current = getattr(obs, "image", obs)
    reference = getattr(ref_obs, "image", ref_obs)
    patches = np.concatenate([patchify(current), patchify(reference)])
    return Prefix(ids=tuple(ids), patches=patches)
