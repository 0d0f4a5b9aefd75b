"""Scripted demonstrator: drives the world to task success and records episodes.

The expert alternates reasoning spans and acting spans.  A reasoning span is
a fixed-width idle window (the world keeps ticking, actions are zero) opened
at tick 0 and at every trigger: a goal-step completion, a grasp slip, or the
arrival of a human log entry.  The acting span that follows executes the
reasoning's next step with a proportional controller until the next trigger.
Episodes that do not end in success raise instead of returning.
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass

import numpy as np

from . import reasoning, refs
from .catalog import Catalog, TaskSpec, default_catalog
from .episodes import Episode, Interval
from .world import WorldParams, oracle_progress, render, reset, step

EXPERT_VERSION = "expert-1"

_DIP_RE = re.compile(r"^dip the (?P<name>[a-z ]+?) into the (?P<dest>[a-z ]+)$")

_TERMINAL_KINDS = ("long_horizon", "interactive", "recovery_probe")


@dataclass(frozen=True)
class DemoConfig:
    reasoning_width: int = 4     # idle ticks per reasoning span
    answer_delay: int = 8        # ticks from question post to scripted answer
    approach_tol: float = 0.015
    settle_tol: float = 0.01
    clear_dist: float = 0.13     # how far to park an obstructing object
    max_ticks: int = 2000


class ExpertError(RuntimeError):
    pass


class _Triggered(Exception):
    """Internal control flow: an event that opens a reasoning span fired."""


def _config_hash(payload: dict) -> str:
    return hashlib.sha1(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:12]


def answer_text(catalog: Catalog, object_id: str) -> str:
    return f"i want the {catalog.object(object_id).name}"


class _Demo:
    def __init__(self, task: TaskSpec, seed: int, hazard: float | None,
                 choice: str | None, params: WorldParams, catalog: Catalog,
                 config: DemoConfig):
        self.catalog = catalog
        self.params = params
        self.config = config
        self.seed = seed
        self.state = reset(task, seed, params=params, catalog=catalog, hazard=hazard)
        bound = self.state.bound
        self.kind = bound.kind

        if choice is not None and bound.interaction and "answer_options" in bound.interaction:
            if choice not in bound.interaction["answer_options"]:
                raise ExpertError(f"choice {choice!r} not an answer option")
            bound.interaction["chosen"] = choice
            bound.goal = tuple(
                {**g, "chosen": choice} if g.get("kind") == "placed_choice" else g
                for g in bound.goal
            )
        self.choice = choice
        if bound.interaction and "chosen" in bound.interaction:
            self.choice = bound.interaction["chosen"]

        self.pick_target: str | None = bound.target
        for g in bound.goal:
            if g.get("kind") == "held" and self.pick_target is None:
                self.pick_target = g["object"]
            if g.get("kind") == "held_any":
                options = list(g["objects"])
                if choice is not None:
                    if choice not in options:
                        raise ExpertError(f"choice {choice!r} not in {options}")
                    self.pick_target = choice
                else:
                    self.pick_target = options[0]
                self.choice = self.pick_target

        self.names = {catalog.object(oid).name: oid for oid in self.state.objects}
        self.origins = {oid: obj.position.copy() for oid, obj in self.state.objects.items()}
        self.plan = self._initial_plan()

        self.actions: list[np.ndarray] = []
        self.proprio = [self.state.gripper.astype(np.float64).copy()]
        self.frames = [self._frame()]
        self.events: list[dict] = []
        self.log: list[dict] = []
        self.intervals: list[Interval] = []
        self.prefix = 0
        self.placed_count = 0
        self.pending: str | None = None
        self.pending_intervention = False
        self.pending_answer = False
        self.intervention_sent = False
        self.answer_at: int | None = None
        self.slipped: str | None = None

    # -- trace recording ----------------------------------------------------

    def _frame(self) -> np.ndarray:
        return np.round(render(self.state, self.catalog) * 255.0).astype(np.uint8)

    def _apply(self, action) -> None:
        cap = min(self.state.bound.tick_cap, self.config.max_ticks)
        if self.state.tick + 1 > cap:
            raise ExpertError(f"{self.state.bound.task_id}: no success within {cap} ticks")
        self.actions.append(np.asarray(action, dtype=np.float64))
        self.state, evs = step(self.state, action, self.params)
        self.proprio.append(self.state.gripper.astype(np.float64).copy())
        self.frames.append(self._frame())
        self.events.extend(evs)
        tick = self.state.tick

        trigger = None
        for e in evs:
            if e["kind"] == "slip":
                self.slipped = e["object"]
                trigger = "slip"
        prefix, _ = oracle_progress(self.state, self.params)
        if prefix < self.prefix:
            raise ExpertError(f"goal prefix regressed at tick {tick}")
        if prefix > self.prefix:
            self.prefix = prefix
            trigger = "completion"
            inter = self.state.bound.interaction
            if (inter and not self.intervention_sent
                    and prefix == int(inter.get("trigger_step", -1))):
                self._post_log("human", inter["intervention"], tick)
                self.intervention_sent = True
                self.pending_intervention = True
        if self.answer_at is not None and tick >= self.answer_at:
            chosen = self.state.bound.interaction["chosen"]
            self._post_log("human", answer_text(self.catalog, chosen), tick)
            self.answer_at = None
            self.pending_answer = True
            trigger = trigger or "human"
        if trigger is not None:
            self.pending = trigger
            raise _Triggered

    def _post_log(self, source: str, text: str, tick: int) -> None:
        self.log.append({"tick": tick, "order": len(self.log), "source": source, "text": text})

    # -- reasoning ----------------------------------------------------------

    def _initial_plan(self) -> list[str]:
        bound = self.state.bound
        name = lambda oid: self.catalog.object(oid).name
        if self.kind == "ambiguous":
            return [bound.instruction]
        if self.kind in ("grounding",):
            return []
        plan = []
        for g in bound.goal:
            if g["kind"] == "pour":
                plan.append(f"pour the {name(g['object'])}")
            elif g["kind"] == "cooked":
                plan.append("wait for cooking")
            elif g["kind"] == "placed":
                plan.append(f"dip the {name(g['object'])} into the {name(g['dest'])}")
            elif g["kind"] == "placed_choice":
                continue  # enters the plan only after the human asks for it
            else:
                raise ExpertError(f"no plan step for goal {g['kind']!r}")
        swap = bound.initial_plan_swap
        if swap:
            plan[int(swap["step"]) - 1] = f"pour the {name(swap['object'])}"
        return plan

    def _scene_entries(self) -> list[tuple[str, str]]:
        return [(self.catalog.object(oid).name, refs.cell_of(obj.position))
                for oid, obj in self.state.objects.items()]

    def _compose(self, trigger: str) -> reasoning.ReasoningContent:
        bound = self.state.bound
        name = lambda oid: self.catalog.object(oid).name
        if self.kind == "grounding":
            entry = self.catalog.object(self.pick_target)
            cell = refs.cell_of(self.state.objects[self.pick_target].position)
            return reasoning.make_pick(entry.name, entry.color, cell)
        if self.kind == "ambiguous":
            return reasoning.make_full(self._scene_entries(), self.plan, 0,
                                       bound.instruction)

        will_ask = False
        if self.pending_intervention:
            self.pending_intervention = False
            inter = bound.interaction
            if inter and "question" in inter:
                dest = next(g["dest"] for g in bound.goal if g["kind"] == "placed_choice")
                self.plan.append(f"dip a vegetable into the {name(dest)}")
                will_ask = True
            # swap-style interventions only correct a future plan step
            swap = bound.initial_plan_swap
            if swap and not will_ask:
                right = next(g["object"] for g in bound.goal if g["kind"] == "pour"
                             and g["object"] != swap["object"]
                             and f"pour the {name(g['object'])}" not in self.plan)
                self.plan[int(swap["step"]) - 1] = f"pour the {name(right)}"
        if self.pending_answer:
            self.pending_answer = False
            chosen = bound.interaction["chosen"]
            dest = next(g["dest"] for g in bound.goal if g["kind"] == "placed_choice")
            self.plan[-1] = f"dip the {name(chosen)} into the {name(dest)}"

        _, done = oracle_progress(self.state, self.params)
        if done:
            return reasoning.make_terminal()
        if will_ask:
            next_step = reasoning.ask_step(bound.interaction["question"])
        elif trigger == "slip":
            next_step = reasoning.regrasp_step(name(self.slipped))
        else:
            next_step = self.plan[self.prefix]
        return reasoning.make_full(self._scene_entries(), self.plan, self.prefix, next_step)

    def _push_reasoning(self, content: reasoning.ReasoningContent, trigger: str) -> None:
        start = self.state.tick
        log_seen = len(self.log)
        if reasoning.is_ask(content.next_step):
            question = reasoning.question_of(content.next_step)
            self._post_log("robot", question, start)
            self.answer_at = start + self.config.answer_delay
        self.intervals.append(Interval("reasoning", start, start + self.config.reasoning_width,
                                       reasoning.serialize(content), log_seen, trigger))
        try:
            for _ in range(self.config.reasoning_width):
                self._apply(np.zeros(3))
        except _Triggered:
            raise ExpertError(f"world event inside the reasoning span at tick {self.state.tick}")

    # -- motion primitives ---------------------------------------------------

    def _goto(self, target_xy, tol: float, grip: float = 0.0) -> None:
        guard = 0
        while True:
            delta = np.asarray(target_xy, dtype=np.float64) - self.state.gripper[:2]
            ap = self.state.gripper[2]
            grip_step = float(np.clip(grip - ap, -0.2, 0.2)) if grip >= 0 else 0.0
            if float(np.linalg.norm(delta)) <= tol and abs(grip_step) < 1e-9:
                return
            move = np.clip(delta, -self.params.max_step, self.params.max_step)
            self._apply([move[0], move[1], grip_step])
            guard += 1
            if guard > 400:
                raise ExpertError("goto did not converge")

    def _clear_spot(self, around: np.ndarray, avoid_ids: set[str]) -> np.ndarray:
        for radius in (self.config.clear_dist, self.config.clear_dist + 0.06):
            for k in range(8):
                ang = k * np.pi / 4.0
                cand = np.clip(around + radius * np.array([np.cos(ang), np.sin(ang)]),
                               0.07, 0.93)
                dists = [float(np.linalg.norm(cand - obj.position))
                         for oid, obj in self.state.objects.items() if oid not in avoid_ids]
                if not dists or min(dists) >= 0.10:
                    return cand
        raise ExpertError("no clear spot to park an object")

    def _release(self) -> None:
        guard = 0
        while self.state.held is not None:
            self._apply([0.0, 0.0, 0.2])
            guard += 1
            if guard > 8:
                raise ExpertError("release did not open")

    def _stash(self) -> None:
        held = self.state.held
        if held is None:
            return
        spot = self.origins[held]
        blockers = [oid for oid, obj in self.state.objects.items()
                    if oid != held and float(np.linalg.norm(obj.position - spot)) < 0.10]
        if blockers:
            spot = self._clear_spot(spot, {held})
        self._goto(spot, self.config.settle_tol, grip=-1.0)
        self._release()

    def _fetch(self, oid: str) -> None:
        for _ in range(3):
            if self.state.held == oid:
                return
            if self.state.held is not None:
                self._stash()
            self._goto(self.state.objects[oid].position, self.config.approach_tol, grip=1.0)
            while self.state.held is None and self.state.gripper[2] > 0.0:
                self._apply([0.0, 0.0, -0.2])
            if self.state.held is None:
                raise ExpertError(f"close at {oid} grasped nothing")
            if self.state.held == oid:
                return
            # a displaced neighbor sits closer than the target: park it away
            wrong = self.state.held
            spot = self._clear_spot(self.state.objects[oid].position, {wrong})
            self._goto(spot, self.config.settle_tol, grip=-1.0)
            self._release()
        raise ExpertError(f"could not grasp {oid}")

    def _idle_until_trigger(self, guard: int) -> None:
        for _ in range(guard):
            self._apply(np.zeros(3))
        raise ExpertError("expected a trigger while idling")

    # -- directive execution -------------------------------------------------

    def _pour_dest(self, oid: str) -> str:
        for g in self.state.bound.goal:
            if g["kind"] == "pour" and g["object"] == oid:
                return g["dest"]
        # a swapped-in bottle is not in the goal; pour where the others go
        return next(g["dest"] for g in self.state.bound.goal if g["kind"] == "pour")

    def _exec_pour(self, oid: str) -> None:
        self._fetch(oid)
        dest = self.state.objects[self._pour_dest(oid)]
        self._goto(dest.position, self.config.settle_tol, grip=-1.0)
        self._idle_until_trigger(self.params.pour_dwell + 4)

    def _exec_dip(self, oid: str, dest_id: str) -> None:
        self._fetch(oid)
        offset = np.array([-0.03, 0.0]) if self.placed_count == 0 else np.array([0.03, 0.0])
        self._goto(self.state.objects[dest_id].position + offset,
                   self.config.settle_tol, grip=-1.0)
        self.placed_count += 1
        self._release()
        raise ExpertError("release did not complete the dip step")

    def _dispatch(self, directive: str) -> None:
        if reasoning.is_ask(directive):
            self._idle_until_trigger(self.config.answer_delay + 4)
        if directive == "wait for cooking":
            self._stash()
            self._idle_until_trigger(self.config.max_ticks)
        if directive.startswith(reasoning.REGRASP_PREFIX):
            name = directive[len(reasoning.REGRASP_PREFIX):]
            self._fetch(self.names[name])
            self._dispatch(self.plan[self.prefix])
            return
        if directive.startswith("pour the "):
            self._exec_pour(self.names[directive[len("pour the "):]])
        m = _DIP_RE.match(directive)
        if m:
            self._exec_dip(self.names[m.group("name")], self.names[m.group("dest")])
        if directive.startswith("pick up the "):
            self._fetch(self.names[directive[len("pick up the "):]])
            raise ExpertError("grasp did not complete the pick step")
        if self.kind == "ambiguous" and directive == self.state.bound.instruction:
            self._fetch(self.pick_target)
            raise ExpertError("grasp did not complete the pick step")
        raise ExpertError(f"no executor for directive {directive!r}")

    def _act(self, directive: str) -> str:
        start = self.state.tick
        log_seen = len(self.log)
        try:
            self._dispatch(directive)
        except _Triggered:
            self.pending, trigger = None, self.pending
            self.intervals.append(Interval("acting", start, self.state.tick,
                                           directive, log_seen))
            return trigger
        raise ExpertError(f"directive {directive!r} finished without a trigger")

    # -- top level ------------------------------------------------------------

    def run(self) -> Episode:
        trigger = "start"
        while True:
            content = self._compose(trigger)
            self._push_reasoning(content, trigger)
            if content.terminal:
                break
            trigger = self._act(content.next_step)
            if self.kind not in _TERMINAL_KINDS:
                _, done = oracle_progress(self.state, self.params)
                if done:
                    break
        progress, success = oracle_progress(self.state, self.params)
        if not success:
            raise ExpertError(f"{self.state.bound.task_id}: demo ended unsuccessful")
        provenance = {
            "expert_version": EXPERT_VERSION,
            "config": asdict(self.config),
            "config_hash": _config_hash(asdict(self.config)),
        }
        episode = Episode(
            task_id=self.state.bound.task_id,
            seed=self.seed,
            hazard=self.state.bound.hazard,
            choice=self.choice,
            instruction=self.state.bound.instruction,
            intervals=tuple(self.intervals),
            actions=np.stack(self.actions) if self.actions else np.zeros((0, 3)),
            proprio=np.stack(self.proprio),
            frames=self.frames,
            events=tuple(self.events),
            log=tuple(self.log),
            success=success,
            progress=progress,
            provenance=provenance,
        )
        episode.check()
        return episode


def demonstrate(task: TaskSpec | str, seed: int, *, hazard: float | None = None,
                choice: str | None = None, params: WorldParams | None = None,
                catalog: Catalog | None = None, config: DemoConfig | None = None) -> Episode:
    """Run the scripted expert on (task, seed) and return the recorded episode."""
    catalog = catalog or default_catalog()
    if isinstance(task, str):
        task = catalog.task(task)
    return _Demo(task, seed, hazard, choice, params or WorldParams(),
                 catalog, config or DemoConfig()).run()


# ---------------------------------------------------------------------------
# Grounding annotations

ANNOTATION_COUNTS = {
    "single_env": (("name", 2), ("attribute", 3), ("semantic", 3), ("spatial", 3)),
    "open_world": (("name", 2), ("attribute", 5), ("semantic", 5), ("spatial", 5)),
}


def annotation_pairs(entries, positions, target: str, layout: str,
                     rng: np.random.Generator) -> list[tuple[str, str]]:
    """(instruction, pick reasoning) pairs for one layout and target.

    All instructions are distinct texts; the reasoning side is the same pick
    sentence throughout.  Raises LookupError when a type cannot meet its
    quota, so callers can resample the layout.
    """
    tgt = entries[target]
    pick = reasoning.serialize(reasoning.make_pick(tgt.name, tgt.color,
                                                   refs.cell_of(positions[target])))
    pairs = []
    seen = set()
    for ref_type, count in ANNOTATION_COUNTS[layout]:
        pool = refs.expression_pool(target, entries, positions, ref_type)
        texts = sorted({p["text"] for p in pool} - seen)
        if len(texts) < count:
            raise LookupError(f"only {len(texts)} unique {ref_type} expressions, need {count}")
        picked = [texts[int(i)] for i in rng.choice(len(texts), size=count, replace=False)]
        for text in picked:
            seen.add(text)
            pairs.append((text, pick))
    return pairs


def annotate_grounding(episode: Episode, layout: str = "single_env",
                       catalog: Catalog | None = None,
                       params: WorldParams | None = None) -> list[tuple[str, str]]:
    """Re-derive the episode's initial layout and annotate its pick target."""
    catalog = catalog or default_catalog()
    state = reset(episode.task_id, episode.seed, params=params, catalog=catalog,
                  hazard=episode.hazard)
    target = state.bound.target
    if target is None:
        target = next(g["object"] for g in state.bound.goal if g.get("kind") == "held")
    entries = {oid: catalog.object(oid) for oid in state.objects}
    positions = {oid: tuple(obj.position) for oid, obj in state.objects.items()}
    rng = np.random.default_rng(np.random.SeedSequence([episode.seed, 17]))
    return annotation_pairs(entries, positions, target, layout, rng)
