"""Referring expressions and spatial predicates over table layouts.

Shared by task binding, the synthetic vision-language generator and the
tests that audit uniqueness by brute force.  Positions live in [0, 1]^2 with
y growing toward the table front; the 6x6 cell grid is aligned with the
image patch grid so a cell word corresponds to one patch.
"""
from __future__ import annotations

import numpy as np

from .catalog import Catalog, ObjectEntry

REF_TYPES = ("name", "spatial", "attribute", "semantic")
RELATIONS = ("left of", "right of", "behind", "in front of")
PROXIMITY = "closest to"

# world-mechanic markers, never usable as referring expressions
MECHANIC_TAGS = ("receives", "cooks")

# each ordering reads naturally as "<size> <color> <shape>"
ATTR_COMBOS = (
    ("color",), ("size",), ("shape",),
    ("color", "shape"), ("size", "color"), ("size", "shape"),
    ("size", "color", "shape"),
)
_ATTR_ORDER = ("size", "color", "shape")

NAME_TEMPLATES = ("pick up the {}", "give me the {}")
SEMANTIC_TEMPLATES = ("pick up the object for {}", "give me something for {}",
                      "find the thing for {}")

# high-level goal phrases for synthetic plan data: "make the {style} {noun}"
DISH_STYLES = ("simple", "hearty", "fresh", "sweet", "golden",
               "morning", "evening", "rustic")
DISH_NOUNS = ("scramble", "stew", "salad", "platter", "medley",
              "bake", "bowl", "spread")

CELL_COLS = "abcdef"
CELLS = tuple(f"{c}{r}" for c in CELL_COLS for r in range(1, 7))


def cell_of(pos) -> str:
    """Grid cell word for a position, e.g. (0.1, 0.9) -> 'a6'."""
    col = min(5, int(float(pos[0]) * 6.0))
    row = min(5, int(float(pos[1]) * 6.0))
    return f"{CELL_COLS[col]}{row + 1}"


def cell_center(cell: str) -> tuple[float, float]:
    col = CELL_COLS.index(cell[0])
    row = int(cell[1]) - 1
    return ((col + 0.5) / 6.0, (row + 0.5) / 6.0)


def relation_holds(rel: str, a, b, gap: float = 0.05, band: float = 0.28) -> bool:
    dx = float(a[0]) - float(b[0])
    dy = float(a[1]) - float(b[1])
    if rel == "left of":
        return dx <= -gap and abs(dy) <= band
    if rel == "right of":
        return dx >= gap and abs(dy) <= band
    if rel == "behind":
        return dy <= -gap and abs(dx) <= band
    if rel == "in front of":
        return dy >= gap and abs(dx) <= band
    raise ValueError(f"unknown relation {rel!r}")


def _closest_to(anchor: str, positions: dict[str, tuple]) -> str:
    others = [oid for oid in positions if oid != anchor]
    ap = np.asarray(positions[anchor], dtype=float)
    return min(others, key=lambda oid: float(np.linalg.norm(np.asarray(positions[oid]) - ap)))


def satisfiers(ref: dict, entries: dict[str, ObjectEntry], positions: dict[str, tuple]) -> list[str]:
    """All object ids matching a reference predicate (exhaustive audit)."""
    kind = ref["type"]
    out = []
    for oid, entry in entries.items():
        if kind == "name":
            ok = entry.name == ref["name"]
        elif kind == "attribute":
            ok = all(getattr(entry, a) == v for a, v in zip(ref["attrs"], ref["values"]))
        elif kind == "semantic":
            ok = ref["tag"] in entry.tags
        elif kind == "spatial":
            if oid == ref["anchor"]:
                ok = False
            elif ref["rel"] == PROXIMITY:
                ok = oid == _closest_to(ref["anchor"], positions)
            else:
                ok = relation_holds(ref["rel"], positions[oid], positions[ref["anchor"]])
        else:
            raise ValueError(f"unknown reference type {kind!r}")
        if ok:
            out.append(oid)
    return out


def phrase_for(ref: dict, entries: dict[str, ObjectEntry], template: int = 0) -> str:
    kind = ref["type"]
    if kind == "name":
        return NAME_TEMPLATES[template].format(ref["name"])
    if kind == "attribute":
        return f"pick up the {' '.join(ref['values'])} object"
    if kind == "semantic":
        return SEMANTIC_TEMPLATES[template].format(ref["tag"])
    if kind == "spatial":
        anchor = entries[ref["anchor"]].name
        return f"pick up the object {ref['rel']} the {anchor}"
    raise ValueError(f"unknown reference type {kind!r}")


def candidate_refs(target: str, entries: dict[str, ObjectEntry], positions: dict[str, tuple],
                   ref_type: str) -> list[dict]:
    """Every expression of one type that uniquely picks out the target."""
    tgt = entries[target]
    cands: list[dict] = []
    if ref_type == "name":
        cands = [{"type": "name", "name": tgt.name}]
    elif ref_type == "attribute":
        for combo in ATTR_COMBOS:
            attrs = tuple(a for a in _ATTR_ORDER if a in combo)
            cands.append({"type": "attribute", "attrs": attrs,
                          "values": tuple(getattr(tgt, a) for a in attrs)})
    elif ref_type == "semantic":
        cands = [{"type": "semantic", "tag": t} for t in tgt.tags if t not in MECHANIC_TAGS]
    elif ref_type == "spatial":
        for anchor in entries:
            if anchor == target:
                continue
            for rel in RELATIONS:
                if relation_holds(rel, positions[target], positions[anchor]):
                    cands.append({"type": "spatial", "rel": rel, "anchor": anchor})
            if _closest_to(anchor, positions) == target:
                cands.append({"type": "spatial", "rel": PROXIMITY, "anchor": anchor})
    else:
        raise ValueError(f"unknown reference type {ref_type!r}")
    unique = []
    for ref in cands:
        if satisfiers(ref, entries, positions) == [target]:
            ref = dict(ref)
            ref["target"] = target
            unique.append(ref)
    return unique


def expression_pool(target: str, entries: dict[str, ObjectEntry],
                    positions: dict[str, tuple], ref_type: str) -> list[dict]:
    """Unique expressions of one type crossed with their phrase templates.

    Every returned dict carries a distinct "text"; the underlying reference
    may repeat across templates (two name phrasings of one object are two
    instruction-reasoning pairs).
    """
    n_templates = {"name": len(NAME_TEMPLATES), "semantic": len(SEMANTIC_TEMPLATES)}.get(ref_type, 1)
    pool = []
    for ref in candidate_refs(target, entries, positions, ref_type):
        for t in range(n_templates):
            expr = dict(ref)
            expr["text"] = phrase_for(ref, entries, template=t)
            pool.append(expr)
    return pool


def sample_reference(rng: np.random.Generator, entries: dict[str, ObjectEntry],
                     positions: dict[str, tuple], ref_type: str | None = None) -> dict:
    """Draw (target, expression) with a guaranteed unique satisfier.

    Raises LookupError when the layout admits no unique expression of the
    requested type for any target.
    """
    order = list(REF_TYPES) if ref_type is None else [ref_type]
    targets = sorted(entries)
    rng.shuffle(targets)
    for rt in order:
        for target in targets:
            options = candidate_refs(target, entries, positions, rt)
            if options:
                ref = options[int(rng.integers(len(options)))]
                ref["text"] = phrase_for(ref, entries)
                return ref
    raise LookupError(f"no unique reference of type {ref_type!r} in layout")
