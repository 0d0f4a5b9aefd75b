"""Adaptive mode switching at rollout time.

Every fourth world tick the policy writes one restricted token: reasoning
pauses the world, regenerates the structured text, and refreshes the
reference image before deciding again; acting samples an action chunk into
a temporal ensemble buffer. Every tick executes the buffer's exponentially
weighted average, so overlapping chunks blend instead of fighting. Human
text is queued and spliced into the dialogue log at the next prefix
assembly, and a per-call ledger prices both modes in abstract token units.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .catalog import Catalog, TaskSpec, default_catalog
from .expert import answer_text
from .model import Policy, forward, sample_actions
from .reasoning import ParseError, ReasoningContent, is_ask, parse, question_of
from .samples import denormalize_actions, proprio_history
from .textcodec import BOA_ID, BOR_ID, EOS_ID, Prefix, Vocab, assemble_prefix, decode
from .world import WorldParams, oracle_progress, render, reset, step

DECIDE_EVERY = 4
TICK_CAP = 2000
MAX_REASON_TOKENS = 256
ENSEMBLE_DECAY = 0.3

# Per-call price: fixed dispatch charge, a per-prefix-token term, and a
# heavily weighted per-generated-token term. Generation dominates, so an
# acting call is nearly flat in prefix length while a reasoning call grows
# with every word it writes.
COST_CALL = 160.0
COST_PREFIX = 1.0
COST_GEN = 40.0
MODES = ("reasoning", "acting")

ACTION_DIM = 3


class HumanScriptError(RuntimeError):
    """An operator event that the session cannot accept."""


@dataclass(frozen=True)
class HumanEvent:
    """One queued piece of operator text.

    Interventions are always welcome; answers are only valid while a robot
    question is pending.
    """

    tick: int
    kind: str
    text: str

    def __post_init__(self) -> None:
        if self.kind not in ("intervention", "answer"):
            raise ValueError(f"unknown human event kind {self.kind!r}")
        if not self.text.strip():
            raise ValueError("human event text is empty")


@dataclass(frozen=True)
class ScriptedHuman:
    """Deterministic stand-in operator for offline rollouts.

    Fixed events fire once their tick arrives. The reactive fields mirror
    the demonstration protocol: an intervention posts when the scored goal
    prefix reaches ``trigger_step``, and a question gets its answer a fixed
    number of ticks after it was asked. When ``answer`` is None the text is
    derived from the episode's bound choice, which ``choice`` may override.
    """

    events: tuple[HumanEvent, ...] = ()
    answer: str | None = None
    answers_question: bool = True
    answer_delay: int = 8
    intervention: str | None = None
    trigger_step: int = -1
    choice: str | None = None

    @classmethod
    def from_task(cls, task: TaskSpec | str, catalog: Catalog | None = None,
                  choice: str | None = None, answer_delay: int = 8) -> "ScriptedHuman":
        catalog = catalog or default_catalog()
        if isinstance(task, str):
            task = catalog.task(task)
        inter = task.interaction or {}
        return cls(
            answers_question="answer_options" in inter,
            answer_delay=answer_delay,
            intervention=inter.get("intervention"),
            trigger_step=int(inter.get("trigger_step", -1)),
            choice=choice,
        )


@dataclass(frozen=True)
class RunConfig:
    decide_every: int = DECIDE_EVERY
    tick_cap: int = TICK_CAP
    max_reason_tokens: int = MAX_REASON_TOKENS
    temperature: float = 0.0
    ensemble_decay: float = ENSEMBLE_DECAY
    pause_world: bool = True
    # world ticks one reasoning costs when the world is not paused; matches
    # the zero-action spans the policy was trained on
    reason_ticks: int = 4
    # a failed or repeated reasoning may retry this many times per boundary
    # before an action is forced, so a paused world can never stall forever
    max_reasonings_per_decide: int = 2
    mode: str = "unified"

    def __post_init__(self) -> None:
        if self.mode not in ("unified", "flat"):
            raise ValueError(f"unknown run mode {self.mode!r}")
        if self.decide_every < 1:
            raise ValueError("decide_every must be positive")


@dataclass(eq=False)
class Params:
    """A trained policy plus the vocabulary it was trained with."""

    model: Policy
    vocab: Vocab


@dataclass(eq=False)
class SessionState:
    """Mutable rollout state threaded through the mode-switch loop."""

    instruction: str = ""
    log: list = field(default_factory=list)
    reasoning: ReasoningContent | None = None
    ref_image: np.ndarray | None = None
    tick: int = 0
    buffer: list = field(default_factory=list)
    costs: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    proprio_log: list = field(default_factory=list)
    pending_question: str | None = None
    question_tick: int | None = None
    parse_failures: int = 0
    truncations: int = 0
    hold_ticks: int = 0
    forced_acts: int = 0
    calls: int = 0

    def log_texts(self) -> tuple[str, ...]:
        return tuple(entry["text"] for entry in self.log)


def _plain(value):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _record(session: SessionState, kind: str, **fields) -> None:
    session.trace.append({"kind": kind, "tick": session.tick, **_plain(fields)})


def cost_model(mode: str, prefix_tokens: int, generated_tokens: int) -> float:
    """Price of one policy call, in abstract units."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if prefix_tokens < 0 or generated_tokens < 0:
        raise ValueError("token counts must be nonnegative")
    if prefix_tokens == 0 and generated_tokens == 0:
        return 0.0
    return COST_CALL + COST_PREFIX * prefix_tokens + COST_GEN * generated_tokens


def _charge(session: SessionState, mode: str, prefix_tokens: int,
            generated_tokens: int) -> None:
    entry = {
        "mode": mode,
        "prefix_tokens": int(prefix_tokens),
        "generated_tokens": int(generated_tokens),
        "cost_units": cost_model(mode, prefix_tokens, generated_tokens),
    }
    session.costs.append({"tick": session.tick, **entry})
    _record(session, "cost", **entry)


def _call_seed(seed: int, call_index: int) -> int:
    return int(np.random.SeedSequence([seed, call_index]).generate_state(1)[0])


def build_prefix(params: Params, session: SessionState, obs: np.ndarray) -> Prefix:
    ref = session.ref_image if session.ref_image is not None else obs
    return assemble_prefix(params.vocab, obs, ref, session.instruction,
                           session.log_texts(), session.reasoning)


def decide(params: Params, session: SessionState, obs: np.ndarray) -> int:
    """Restricted argmax over the two mode tokens; acting wins exact ties."""
    prefix = build_prefix(params, session, obs)
    with torch.no_grad():
        logits, _, _ = forward(params.model, prefix)
    return BOA_ID if float(logits[BOA_ID]) >= float(logits[BOR_ID]) else BOR_ID


def reason(params: Params, session: SessionState, obs: np.ndarray, seed: int,
           config: RunConfig = RunConfig()) -> ReasoningContent | None:
    """Generate reasoning text, parse it, and adopt it on success.

    Greedy decoding unless config.temperature > 0. Returns None when
    generation truncates or fails the grammar; the session keeps its
    previous reasoning and reference image in that case, and the counters
    plus trace say which way it went. The call is charged either way.
    """
    prefix = build_prefix(params, session, obs)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    ids = [BOR_ID]
    truncated = True
    with torch.no_grad():
        for _ in range(config.max_reason_tokens):
            _, text_logits, _ = forward(params.model, prefix, suffix_ids=tuple(ids))
            logits = text_logits[prefix.decision_slot - 1 + len(ids)]
            if config.temperature > 0.0:
                probs = torch.softmax(logits.double() / config.temperature, dim=-1)
                probs = probs.numpy()
                nxt = int(rng.choice(probs.shape[0], p=probs / probs.sum()))
            else:
                nxt = int(torch.argmax(logits))
            if nxt == EOS_ID:
                truncated = False
                break
            ids.append(nxt)
    generated = len(ids) + (0 if truncated else 1)
    _charge(session, "reasoning", prefix.length, generated)
    text = decode(params.vocab, ids[1:])
    if truncated:
        session.truncations += 1
        _record(session, "reasoning", ok=False, truncated=True, text=text,
                terminal=False)
        return None
    try:
        content = parse(text)
    except ParseError:
        session.parse_failures += 1
        _record(session, "reasoning", ok=False, truncated=False, text=text,
                terminal=False)
        return None
    session.reasoning = content
    session.ref_image = obs
    _record(session, "reasoning", ok=True, truncated=False, text=text,
            terminal=content.terminal)
    return content


def act(params: Params, session: SessionState, obs: np.ndarray,
        proprio: np.ndarray, seed: int, prefix: Prefix | None = None) -> np.ndarray:
    """Sample one action chunk into the ensemble buffer, in physical units."""
    if prefix is None:
        prefix = build_prefix(params, session, obs)
    chunk = denormalize_actions(sample_actions(params.model, prefix, proprio, seed))
    session.buffer.append((session.tick, chunk))
    _charge(session, "acting", prefix.length, 1)
    digest = hashlib.sha1(np.ascontiguousarray(chunk).tobytes()).hexdigest()[:16]
    _record(session, "chunk", digest=digest)
    return chunk


def prune_buffer(session: SessionState) -> None:
    """Drop chunks whose prediction windows no longer cover the current tick."""
    session.buffer = [(t0, c) for t0, c in session.buffer
                      if t0 <= session.tick < t0 + len(c)]


def ensemble_action(session: SessionState, tick: int,
                    decay: float = ENSEMBLE_DECAY) -> np.ndarray:
    """Weighted average of every buffered prediction for this tick.

    Weights are exp(-decay * age) with age in ticks since the chunk was
    generated, so the newest chunk always counts most. With nothing in
    coverage the gripper holds still and the tick is logged as a hold.
    """
    num = np.zeros(ACTION_DIM, dtype=np.float64)
    den = 0.0
    for t0, chunk in session.buffer:
        if t0 <= tick < t0 + len(chunk):
            w = float(np.exp(-decay * (tick - t0)))
            num += w * np.asarray(chunk[tick - t0], dtype=np.float64)
            den += w
    if den == 0.0:
        session.hold_ticks += 1
        _record(session, "hold")
        return np.zeros(ACTION_DIM, dtype=np.float64)
    return num / den


@dataclass(eq=False)
class RolloutTrace:
    """Structured record stream of one rollout, one JSON object per line."""

    task_id: str
    seed: int
    records: list

    def by_kind(self, kind: str) -> list[dict]:
        return [r for r in self.records if r["kind"] == kind]

    @property
    def end(self) -> dict:
        return self.records[-1]

    def write(self, path) -> Path:
        path = Path(path)
        lines = [json.dumps(r, sort_keys=True, separators=(",", ":"))
                 for r in self.records]
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "RolloutTrace":
        records = [json.loads(line)
                   for line in Path(path).read_text().splitlines() if line]
        if not records or records[0]["kind"] != "header":
            raise ValueError(f"not a rollout trace: {path}")
        head = records[0]
        return cls(task_id=head["task_id"], seed=head["seed"], records=records)


def _bind_choice(state, choice: str | None) -> None:
    # mirror the demonstration override: replace the seed-bound choice and
    # rebind the goals that score it
    if choice is None:
        return
    inter = state.bound.interaction
    if not inter or "answer_options" not in inter:
        raise HumanScriptError("choice given for a task with no answer options")
    if choice not in inter["answer_options"]:
        raise HumanScriptError(f"choice {choice!r} not among the answer options")
    inter["chosen"] = choice
    state.bound.goal = tuple(
        {**g, "chosen": choice} if g.get("kind") == "placed_choice" else g
        for g in state.bound.goal
    )


def run_episode(params: Params, task: TaskSpec | str, seed: int,
                human_script: ScriptedHuman | Sequence[HumanEvent] = (),
                config: RunConfig | None = None, *,
                world_params: WorldParams | None = None,
                catalog: Catalog | None = None,
                hazard: float | None = None,
                event_source: Callable[[SessionState], Iterable[HumanEvent]] | None = None,
                ) -> RolloutTrace:
    """Roll the policy out in the simulator until terminal reasoning or the
    tick cap; an acting decision never ends an episode.

    ``human_script`` supplies operator text offline; ``event_source`` is
    polled at every decision boundary (and right after a question posts)
    so a live operator can inject the same events online. Queued text is
    applied at the next prefix assembly, never mid-call.
    """
    config = config or RunConfig()
    catalog = catalog or default_catalog()
    wp = world_params or WorldParams()
    human = (human_script if isinstance(human_script, ScriptedHuman)
             else ScriptedHuman(events=tuple(human_script)))

    state = reset(task, seed, params=wp, catalog=catalog, hazard=hazard)
    _bind_choice(state, human.choice)
    session = SessionState(instruction=state.bound.instruction)
    obs = render(state, catalog)
    if config.mode == "unified":
        session.ref_image = obs
    session.proprio_log.append(np.asarray(state.gripper, dtype=np.float64).copy())
    progress, done = oracle_progress(state, wp)
    pending = list(human.events)
    sent_intervention = False
    end_reason = None

    _record(session, "header", task_id=state.bound.task_id, seed=seed,
            instruction=state.bound.instruction, progress=progress,
            done=bool(done), target=state.bound.target,
            reference=state.bound.reference, config=asdict(config))

    def next_seed() -> int:
        session.calls += 1
        return _call_seed(seed, session.calls)

    def post_human(event: HumanEvent) -> None:
        if event.kind == "answer":
            if session.pending_question is None:
                raise HumanScriptError(
                    f"answer at tick {session.tick} with no pending question")
            session.pending_question = None
            session.question_tick = None
        session.log.append({"tick": session.tick, "order": len(session.log),
                            "source": "human", "text": event.text})
        _record(session, "human", event=event.kind, text=event.text)

    def poll_events() -> None:
        nonlocal pending, sent_intervention
        due = [e for e in pending if e.tick <= session.tick]
        pending = [e for e in pending if e.tick > session.tick]
        for event in due:
            post_human(event)
        if (human.intervention is not None and not sent_intervention
                and human.trigger_step >= 0 and progress >= human.trigger_step):
            sent_intervention = True
            post_human(HumanEvent(session.tick, "intervention", human.intervention))
        if (session.pending_question is not None
                and session.question_tick is not None
                and session.tick >= session.question_tick + human.answer_delay):
            text = human.answer
            if text is None and human.answers_question:
                chosen = (state.bound.interaction or {}).get("chosen")
                text = answer_text(catalog, chosen) if chosen else None
            if text is not None:
                post_human(HumanEvent(session.tick, "answer", text))
        if event_source is not None:
            for event in event_source(session):
                post_human(event)

    def world_tick(action: np.ndarray) -> None:
        nonlocal state, obs, progress, done
        state, events = step(state, action, wp)
        obs = render(state, catalog)
        session.proprio_log.append(np.asarray(state.gripper, dtype=np.float64).copy())
        session.tick = state.tick
        for event in events:
            _record(session, "world", event=event)
        prev = (progress, done)
        progress, done = oracle_progress(state, wp)
        if (progress, done) != prev:
            _record(session, "progress", progress=progress, done=bool(done))

    def take_action() -> None:
        stacked = np.stack(session.proprio_log)
        prop = proprio_history(stacked, session.tick, params.model.cfg.proprio_lags)
        act(params, session, obs, prop, next_seed())

    def decision_phase() -> bool:
        # returns True when terminal reasoning ends the episode
        reasonings = 0
        while True:
            choice = decide(params, session, obs)
            _record(session, "decision",
                    choice="[BOR]" if choice == BOR_ID else "[BOA]")
            if choice == BOA_ID:
                break
            if reasonings >= config.max_reasonings_per_decide:
                session.forced_acts += 1
                _record(session, "forced_act")
                break
            content = reason(params, session, obs, next_seed(), config)
            reasonings += 1
            if content is None:
                continue
            if not config.pause_world:
                # the policy trained on reasoning spans of zero-action ticks;
                # burn the same span here and re-reference the end of it
                for _ in range(config.reason_ticks):
                    if session.tick >= config.tick_cap:
                        break
                    prune_buffer(session)
                    world_tick(ensemble_action(session, session.tick,
                                               config.ensemble_decay))
                session.ref_image = obs
            if is_ask(content.next_step):
                question = question_of(content.next_step)
                session.pending_question = question
                session.question_tick = session.tick
                session.log.append({"tick": session.tick,
                                    "order": len(session.log),
                                    "source": "robot", "text": question})
                _record(session, "question", text=question)
                poll_events()
            if content.terminal:
                return True
        take_action()
        return False

    while True:
        if session.tick >= config.tick_cap:
            end_reason = "timeout"
            break
        if session.tick % config.decide_every == 0:
            poll_events()
            if config.mode == "flat":
                take_action()
            elif decision_phase():
                end_reason = "terminal"
                break
        prune_buffer(session)
        world_tick(ensemble_action(session, session.tick, config.ensemble_decay))

    _record(session, "end", reason=end_reason, progress=progress,
            done=bool(done), parse_failures=session.parse_failures,
            truncations=session.truncations, hold_ticks=session.hold_ticks,
            forced_acts=session.forced_acts,
            total_cost=float(sum(c["cost_units"] for c in session.costs)))
    return RolloutTrace(task_id=state.bound.task_id, seed=seed,
                        records=session.trace)


def traces_equal(a: RolloutTrace, b: RolloutTrace) -> bool:
    return a.records == b.records


def reasoning_share(trace: RolloutTrace) -> float:
    """Fraction of total rollout cost spent on reasoning calls."""
    costs = trace.by_kind("cost")
    total = sum(c["cost_units"] for c in costs)
    if total == 0.0:
        return 0.0
    spent = sum(c["cost_units"] for c in costs if c["mode"] == "reasoning")
    return spent / total
