"""Object and task catalog.

The catalog ships as a YAML file inside the package: a drawing palette, a
list of object entries (category, color, shape, size, tags, split) and the
task definitions that the world instantiates by id.
"""
from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, field

import yaml

SHAPES = ("circle", "square", "triangle", "diamond", "ring", "cross")
SIZES = ("small", "medium", "large")
SPLITS = ("stage", "robot", "vl", "novel")
TASK_KINDS = ("long_horizon", "grounding", "ambiguous", "interactive", "recovery_probe")


@dataclass(frozen=True)
class ObjectEntry:
    id: str
    name: str
    category: str
    color: str
    shape: str
    size: str
    tags: tuple[str, ...]
    split: str


@dataclass(frozen=True)
class TaskSpec:
    id: str
    kind: str
    instruction: str | None
    objects: tuple[str, ...]
    layout: str
    goal: tuple[dict, ...]
    forbidden: tuple[dict, ...] = ()
    hazard: float = 0.0
    tick_cap: int = 2000
    pool: str | None = None
    pool_size: int = 4
    interaction: dict | None = None
    initial_plan_swap: dict | None = None


@dataclass
class Catalog:
    version: int
    palette: dict[str, tuple[int, int, int]]
    objects: dict[str, ObjectEntry]
    tasks: dict[str, TaskSpec]
    _by_split: dict[str, list[str]] = field(default_factory=dict)

    def object(self, obj_id: str) -> ObjectEntry:
        return self.objects[obj_id]

    def task(self, task_id: str) -> TaskSpec:
        if task_id not in self.tasks:
            raise KeyError(f"unknown task id: {task_id!r}")
        return self.tasks[task_id]

    def split_ids(self, split: str) -> list[str]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return list(self._by_split.get(split, []))


def _check_text(text: str, where: str) -> str:
    # Vocabulary building splits on single spaces; reject anything that would
    # not round-trip through the word codec.
    if text != " ".join(text.split(" ")) or "  " in text or text.strip() != text:
        raise ValueError(f"{where}: text not single-spaced: {text!r}")
    return text


def _parse_object(raw: dict, palette: dict) -> ObjectEntry:
    entry = ObjectEntry(
        id=raw["id"],
        name=_check_text(raw["name"], raw["id"]),
        category=raw["category"],
        color=raw["color"],
        shape=raw["shape"],
        size=raw["size"],
        tags=tuple(_check_text(t, raw["id"]) for t in raw.get("tags", [])),
        split=raw["split"],
    )
    if entry.color not in palette:
        raise ValueError(f"{entry.id}: color {entry.color!r} not in palette")
    if entry.shape not in SHAPES:
        raise ValueError(f"{entry.id}: unknown shape {entry.shape!r}")
    if entry.size not in SIZES:
        raise ValueError(f"{entry.id}: unknown size {entry.size!r}")
    if entry.split not in SPLITS:
        raise ValueError(f"{entry.id}: unknown split {entry.split!r}")
    return entry


def _parse_task(raw: dict) -> TaskSpec:
    kind = raw["kind"]
    if kind not in TASK_KINDS:
        raise ValueError(f"task {raw['id']}: unknown kind {kind!r}")
    instruction = raw.get("instruction")
    if instruction is not None:
        _check_text(instruction, f"task {raw['id']}")
    interaction = raw.get("interaction")
    if interaction:
        for key in ("intervention", "question"):
            if key in interaction:
                _check_text(interaction[key], f"task {raw['id']} interaction")
    return TaskSpec(
        id=raw["id"],
        kind=kind,
        instruction=instruction,
        objects=tuple(raw.get("objects", [])),
        layout=raw.get("layout", "random"),
        goal=tuple(raw["goal"]),
        forbidden=tuple(raw.get("forbidden", [])),
        hazard=float(raw.get("hazard", 0.0)),
        tick_cap=int(raw.get("tick_cap", 2000)),
        pool=raw.get("pool"),
        pool_size=int(raw.get("pool_size", 4)),
        interaction=interaction,
        initial_plan_swap=raw.get("initial_plan_swap"),
    )


def load_catalog(path: str | None = None) -> Catalog:
    """Load the packaged catalog, or one from an explicit path."""
    if path is None:
        text = (
            importlib.resources.files("onetwo").joinpath("data/catalog.yaml").read_text()
        )
    else:
        with open(path) as fh:
            text = fh.read()
    raw = yaml.safe_load(text)
    palette = {k: tuple(v) for k, v in raw["palette"].items()}
    objects: dict[str, ObjectEntry] = {}
    names: set[str] = set()
    for obj_raw in raw["objects"]:
        entry = _parse_object(obj_raw, palette)
        if entry.id in objects:
            raise ValueError(f"duplicate object id {entry.id!r}")
        if entry.name in names:
            raise ValueError(f"duplicate object name {entry.name!r}")
        names.add(entry.name)
        objects[entry.id] = entry
    tasks: dict[str, TaskSpec] = {}
    for task_raw in raw["tasks"]:
        task = _parse_task(task_raw)
        for oid in task.objects:
            if oid not in objects:
                raise ValueError(f"task {task.id}: unknown object {oid!r}")
        tasks[task.id] = task
    cat = Catalog(version=int(raw["version"]), palette=palette, objects=objects, tasks=tasks)
    for entry in objects.values():
        cat._by_split.setdefault(entry.split, []).append(entry.id)
    return cat


_cached: Catalog | None = None


def default_catalog() -> Catalog:
    """Packaged catalog, loaded once per process."""
    global _cached
    if _cached is None:
        _cached = load_catalog()
    return _cached
