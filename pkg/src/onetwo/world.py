"""GridKitchen: a deterministic 2-D tabletop world.

The table is the unit square; a single gripper moves in bounded per-tick
steps and opens or closes its jaws.  Objects are flat colored shapes; at
most one can be held.  Task progress that matters for the recipes (what has
been poured into what) lives in hidden per-object facts that the renderer
never reads, so the raster alone does not identify the task stage.

One tick is 0.05 s of simulated time.  All randomness flows through the
generator stored on the state, so reset/step/render are pure functions of
(state, action) given a seed.
"""
from __future__ import annotations

import copy
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import refs
from .catalog import Catalog, TaskSpec, default_catalog

TICK_SECONDS = 0.05
IMAGE_SIZE = 48
SPLASH_TICKS = 8             # pour flash outlasts a full decide period, so
                             # the next decision point still sees it

BACKGROUND = (208, 206, 200)
GRIPPER_COLOR = (25, 25, 28)

_SIZE_PX = {"small": 2, "medium": 3, "large": 4}


@dataclass
class WorldParams:
    grasp_radius: float = 0.06
    grasp_thresh: float = 0.3
    pour_radius: float = 0.08
    pour_dwell: int = 6
    place_radius: float = 0.09
    min_dist: float = 0.12
    reset_attempts: int = 1000
    max_step: float = 0.05
    max_grip_step: float = 0.2
    slip_delay: int = 4
    home: tuple[float, float] = (0.5, 0.88)


ACTION_LOW = np.array([-0.05, -0.05, -0.2])
ACTION_HIGH = np.array([0.05, 0.05, 0.2])


def clamp_action(action) -> np.ndarray:
    a = np.asarray(action, dtype=np.float64).reshape(3)
    return np.clip(a, ACTION_LOW, ACTION_HIGH)


@dataclass
class ObjectState:
    id: str
    position: np.ndarray
    color: str
    held: bool = False
    hidden: dict = field(default_factory=dict)


@dataclass
class BoundTask:
    """Task spec resolved against one seed: concrete instruction and goal."""

    task_id: str
    kind: str
    instruction: str
    goal: tuple[dict, ...]
    forbidden: tuple[dict, ...]
    hazard: float
    tick_cap: int
    target: str | None = None
    reference: dict | None = None
    interaction: dict | None = None
    initial_plan_swap: dict | None = None
    cook_ticks: int | None = None


@dataclass
class WorldState:
    tick: int
    gripper: np.ndarray          # (x, y, aperture)
    objects: dict[str, ObjectState]
    held: str | None
    bound: BoundTask
    rng: np.random.Generator
    slip_at: int | None = None   # scheduled one-shot slip tick
    slip_done: bool = False
    dwell: int = 0
    dwell_dest: str | None = None

    def object_ids(self) -> list[str]:
        return list(self.objects)


@dataclass
class Observation:
    image: np.ndarray            # (48, 48, 3) float32 in [0, 1]
    proprio: np.ndarray          # (x, y, aperture) float64
    tick: int


class LayoutError(RuntimeError):
    pass


def _task_rng(task_id: str, seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([zlib.crc32(task_id.encode()), seed]))


def _sample_positions(rng, n: int, min_dist: float, attempts: int, lo=0.10, hi=0.90,
                      avoid: tuple[float, float] | None = None) -> list[np.ndarray]:
    for _ in range(attempts):
        pts = rng.uniform(lo, hi, size=(n, 2))
        d = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
        d[np.arange(n), np.arange(n)] = 1.0
        if d.min() < min_dist:
            continue
        if avoid is not None and np.linalg.norm(pts - np.asarray(avoid), axis=1).min() < 0.10:
            continue
        return [pts[i].copy() for i in range(n)]
    raise LayoutError(f"no layout with spacing {min_dist} after {attempts} attempts")


def _bind(catalog: Catalog, task: TaskSpec, seed: int, rng, hazard_override) -> tuple[BoundTask, list[str], dict]:
    """Resolve pools, targets and the interaction choice for one seed."""
    extra: dict = {}
    object_ids = list(task.objects)
    instruction = task.instruction
    target = None
    reference = None
    goal = [dict(g) for g in task.goal]
    if task.kind == "grounding" and task.pool:
        pool = sorted(catalog.split_ids(task.pool))
        idx = rng.choice(len(pool), size=task.pool_size, replace=False)
        object_ids = [pool[int(i)] for i in idx]
        extra["needs_reference"] = True
    interaction = copy.deepcopy(task.interaction) if task.interaction else None
    if interaction and "answer_options" in interaction:
        options = interaction["answer_options"]
        chosen = options[int(rng.integers(len(options)))]
        interaction["chosen"] = chosen
        for g in goal:
            if g.get("kind") == "placed_choice":
                g["chosen"] = chosen
    cook_ticks = None
    for g in goal:
        if g.get("kind") == "cooked":
            cook_ticks = int(g["ticks"])
    bound = BoundTask(
        task_id=task.id,
        kind=task.kind,
        instruction=instruction or "",
        goal=tuple(goal),
        forbidden=task.forbidden,
        hazard=task.hazard if hazard_override is None else float(hazard_override),
        tick_cap=task.tick_cap,
        target=target,
        reference=reference,
        interaction=interaction,
        initial_plan_swap=task.initial_plan_swap,
        cook_ticks=cook_ticks,
    )
    return bound, object_ids, extra


def reset(task: TaskSpec | str, seed: int, params: WorldParams | None = None,
          catalog: Catalog | None = None, hazard: float | None = None) -> WorldState:
    """Build the initial state for (task, seed).

    Layouts are rejection-sampled to the minimum spacing; the mirrored
    layout places each pair exactly symmetric about x = 0.5.
    """
    catalog = catalog or default_catalog()
    if isinstance(task, str):
        task = catalog.task(task)
    params = params or WorldParams()
    rng = _task_rng(task.id, seed)
    bound, object_ids, extra = _bind(catalog, task, seed, rng, hazard)

    if task.layout == "mirrored":
        positions = {}
        pairs = [object_ids[i:i + 2] for i in range(0, len(object_ids), 2)]
        rows = 0.28 + rng.permutation(len(pairs)) * 0.22
        for (left_id, right_id), row in zip(pairs, rows):
            half = rng.uniform(0.18, 0.30)
            y = float(row + rng.uniform(-0.03, 0.03))
            positions[left_id] = np.array([0.5 - half, y])
            positions[right_id] = np.array([0.5 + half, y])
    else:
        min_dist = max(0.30, params.min_dist) if task.layout == "spread" else params.min_dist
        pts = _sample_positions(rng, len(object_ids), min_dist, params.reset_attempts,
                                avoid=params.home)
        positions = dict(zip(object_ids, pts))

    objects = {}
    for oid in object_ids:
        entry = catalog.object(oid)
        objects[oid] = ObjectState(id=oid, position=positions[oid], color=entry.color)

    if extra.get("needs_reference"):
        entries = {oid: catalog.object(oid) for oid in object_ids}
        pos = {oid: tuple(objects[oid].position) for oid in object_ids}
        ref_type = refs.REF_TYPES[int(rng.integers(len(refs.REF_TYPES)))]
        try:
            ref = refs.sample_reference(rng, entries, pos, ref_type)
        except LookupError:
            ref = refs.sample_reference(rng, entries, pos, None)
        bound.target = ref["target"]
        bound.reference = ref
        bound.instruction = ref["text"]
        bound.goal = tuple(
            {"kind": "held", "object": ref["target"]} if g.get("kind") == "held_target" else g
            for g in bound.goal
        )

    gripper = np.array([params.home[0], params.home[1], 1.0])
    return WorldState(tick=0, gripper=gripper, objects=objects, held=None,
                      bound=bound, rng=rng)


def step(state: WorldState, action, params: WorldParams | None = None) -> tuple[WorldState, list[dict]]:
    """Advance one tick.  Returns (new state, events stamped with the new tick)."""
    params = params or WorldParams()
    state = copy.deepcopy(state)
    a = clamp_action(action)
    events: list[dict] = []
    new_tick = state.tick + 1

    prev_ap = float(state.gripper[2])
    state.gripper[0] = float(np.clip(state.gripper[0] + a[0], 0.0, 1.0))
    state.gripper[1] = float(np.clip(state.gripper[1] + a[1], 0.0, 1.0))
    state.gripper[2] = float(np.clip(prev_ap + a[2], 0.0, 1.0))
    ap = float(state.gripper[2])
    gpos = state.gripper[:2]

    if state.held is not None:
        state.objects[state.held].position = gpos.copy()

    thresh = params.grasp_thresh
    if state.held is None and prev_ap >= thresh > ap:
        best, best_d = None, params.grasp_radius
        for oid, obj in state.objects.items():
            if "receives" in _entry_tags(oid):
                continue
            d = float(np.linalg.norm(obj.position - gpos))
            if d <= best_d:
                best, best_d = oid, d
        if best is not None:
            state.held = best
            state.objects[best].held = True
            state.objects[best].position = gpos.copy()
            events.append({"tick": new_tick, "kind": "grasp", "object": best})
            if (state.bound.hazard > 0.0 and not state.slip_done
                    and float(state.rng.random()) < state.bound.hazard):
                state.slip_at = new_tick + params.slip_delay

    elif state.held is not None and prev_ap < thresh <= ap:
        dropped = state.held
        state.objects[dropped].held = False
        state.held = None
        events.append({"tick": new_tick, "kind": "release", "object": dropped})

    if state.slip_at is not None and new_tick >= state.slip_at:
        if state.held is not None:
            slipped = state.held
            obj = state.objects[slipped]
            obj.held = False
            state.held = None
            angle = float(state.rng.uniform(0.0, 2.0 * np.pi))
            dist = float(state.rng.uniform(0.05, 0.09))
            obj.position = np.clip(obj.position + dist * np.array([np.cos(angle), np.sin(angle)]),
                                   0.05, 0.95)
            state.slip_done = True
            events.append({"tick": new_tick, "kind": "slip", "object": slipped})
        state.slip_at = None

    # Pouring: keep a held object inside a receiver's radius for pour_dwell
    # consecutive ticks.  The counter keeps running while you stay, so
    # overstaying pours again - a second pour spoils the recipe.
    poured = False
    if state.held is not None:
        held_obj = state.objects[state.held]
        near = None
        for oid, obj in state.objects.items():
            if oid != state.held and "receives" in _entry_tags(oid):
                if float(np.linalg.norm(obj.position - held_obj.position)) <= params.pour_radius:
                    near = oid
                    break
        if near is not None:
            if state.dwell_dest != near:
                state.dwell, state.dwell_dest = 0, near
            state.dwell += 1
            if state.dwell >= params.pour_dwell:
                dest = state.objects[near]
                key = f"poured:{state.held}"
                dest.hidden[key] = dest.hidden.get(key, 0) + 1
                dest.hidden["last_pour_tick"] = new_tick
                dest.hidden["splash_until"] = new_tick + SPLASH_TICKS
                events.append({"tick": new_tick, "kind": "pour", "object": state.held,
                               "dest": near, "count": dest.hidden[key]})
                state.dwell = 0
                poured = True
        else:
            state.dwell, state.dwell_dest = 0, None
    else:
        state.dwell, state.dwell_dest = 0, None

    _refresh_receivers(state, new_tick, events)
    state.tick = new_tick
    return state, events


def _refresh_receivers(state: WorldState, new_tick: int, events: list[dict]) -> None:
    """Repaint receiver colors: cook stages, plus a short splash on pours."""
    bound = state.bound
    cook_dest = None
    if bound.cook_ticks is not None:
        cook_dest = next(g["dest"] for g in bound.goal if g.get("kind") == "cooked")
    for oid, obj in state.objects.items():
        if "receives" not in _entry_tags(oid):
            continue
        color = default_catalog().object(oid).color
        if oid == cook_dest:
            color = _cook_color(state, obj, color, new_tick, events)
        if obj.hidden.get("splash_until", 0) > new_tick:
            color = "amber"
        obj.color = color


def _cook_color(state: WorldState, dest: ObjectState, base: str, new_tick: int,
                events: list[dict]) -> str:
    bound = state.bound
    if dest.hidden.get("cooked"):
        return "hot"
    pours_ok = all(
        dest.hidden.get(f"poured:{g['object']}", 0) == 1
        for g in bound.goal if g.get("kind") == "pour" and g.get("dest") == dest.id
    )
    last = dest.hidden.get("last_pour_tick")
    if not pours_ok or last is None:
        return base
    elapsed = new_tick - last
    if elapsed >= bound.cook_ticks:
        dest.hidden["cooked"] = True
        events.append({"tick": new_tick, "kind": "cooked", "dest": dest.id})
        return "hot"
    # busy light for the whole cooking span, deliberately far from the splash
    # flash so the two receiver states stay separable in pixels
    return "indigo"


_tag_cache: dict[str, tuple[str, ...]] = {}


def _entry_tags(oid: str) -> tuple[str, ...]:
    if oid not in _tag_cache:
        _tag_cache[oid] = default_catalog().object(oid).tags
    return _tag_cache[oid]


# ---------------------------------------------------------------------------
# Goal evaluation


def _predicate(state: WorldState, g: dict, params: WorldParams) -> bool:
    kind = g["kind"]
    if kind == "pour":
        dest = state.objects[g["dest"]]
        return dest.hidden.get(f"poured:{g['object']}", 0) == 1
    if kind == "cooked":
        return bool(state.objects[g["dest"]].hidden.get("cooked", False))
    if kind == "held":
        return state.objects[g["object"]].held
    if kind == "held_any":
        return any(state.objects[o].held for o in g["objects"])
    if kind in ("placed", "placed_choice"):
        obj_id = g["chosen"] if kind == "placed_choice" else g["object"]
        obj = state.objects[obj_id]
        dest = state.objects[g["dest"]]
        radius = float(g.get("radius", params.place_radius))
        return (not obj.held
                and float(np.linalg.norm(obj.position - dest.position)) <= radius)
    raise ValueError(f"unknown goal predicate {kind!r}")


def _forbidden_hit(state: WorldState, f: dict) -> bool:
    if f["kind"] == "poured_any":
        total = 0
        for obj in state.objects.values():
            total += obj.hidden.get(f"poured:{f['object']}", 0)
        return total > 0
    raise ValueError(f"unknown forbidden predicate {f['kind']!r}")


def oracle_progress(state: WorldState, params: WorldParams | None = None) -> tuple[int, bool]:
    """(longest satisfied goal prefix, all goals met and nothing forbidden)."""
    params = params or WorldParams()
    completed = 0
    for g in state.bound.goal:
        if _predicate(state, g, params):
            completed += 1
        else:
            break
    done = all(_predicate(state, g, params) for g in state.bound.goal)
    if done and any(_forbidden_hit(state, f) for f in state.bound.forbidden):
        done = False
    return completed, done


# ---------------------------------------------------------------------------
# Rendering


def _px(v: float) -> int:
    return int(round(float(v) * (IMAGE_SIZE - 1)))


def _shape_mask(shape: str, cx: int, cy: int, r: int) -> np.ndarray:
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
    dx, dy = xx - cx, yy - cy
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= r
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= r + 1
    if shape == "ring":
        dd = dx * dx + dy * dy
        inner = max(1, r - 1)
        return (dd <= (r + 1) * (r + 1)) & (dd >= inner * inner)
    if shape == "triangle":
        return (dy >= -r) & (dy <= r) & (np.abs(dx) * 2 <= dy + r)
    if shape == "cross":
        arm = max(1, r // 2)
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    raise ValueError(f"unknown shape {shape!r}")


def render(state: WorldState, catalog: Catalog | None = None) -> np.ndarray:
    """Rasterize visible fields only: positions, colors, shapes, the gripper.

    Returns float32 (48, 48, 3) in [0, 1]; values are always uint8/255 so
    stored rasters round-trip bit-exactly.
    """
    catalog = catalog or default_catalog()
    canvas = np.empty((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.uint8)
    canvas[:, :] = BACKGROUND
    palette = catalog.palette

    def draw(oid: str) -> None:
        obj = state.objects[oid]
        entry = catalog.object(oid)
        mask = _shape_mask(entry.shape, _px(obj.position[0]), _px(obj.position[1]),
                           _SIZE_PX[entry.size])
        canvas[mask] = palette[obj.color]

    order = sorted(state.objects, key=lambda o: (0 if "receives" in _entry_tags(o) else 1, o))
    for oid in order:
        if oid != state.held:
            draw(oid)
    if state.held is not None:
        draw(state.held)

    gx, gy, ap = _px(state.gripper[0]), _px(state.gripper[1]), float(state.gripper[2])
    gap = 1 + int(round(ap * 4.0))
    for jaw_x in (gx - gap, gx + gap):
        x0, x1 = max(0, jaw_x), min(IMAGE_SIZE, jaw_x + 2)
        y0, y1 = max(0, gy - 3), min(IMAGE_SIZE, gy + 4)
        if x0 < x1 and y0 < y1:
            canvas[y0:y1, x0:x1] = GRIPPER_COLOR
    bar_y = max(0, gy - 4)
    bx0, bx1 = max(0, gx - gap), min(IMAGE_SIZE, gx + gap + 2)
    canvas[bar_y, bx0:bx1] = GRIPPER_COLOR

    return canvas.astype(np.float32) / np.float32(255.0)


def observe(state: WorldState, catalog: Catalog | None = None) -> Observation:
    return Observation(image=render(state, catalog),
                       proprio=state.gripper.astype(np.float64).copy(),
                       tick=state.tick)
