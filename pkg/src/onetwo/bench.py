"""Evaluation harness: seeded trial suites, baselines and trace metrics.

Every method in a comparison consumes the same (task, seed) list, every
statistic is reported with its trial count and seeds, and the whole report
can be rebuilt from the stored rollout traces alone.  Baselines:

  flat         same network, reasoning-free conditioning, mode "flat"
  dual_system  a reasoning generator queried out of band whose next-step
               command arrives ``latency`` ticks after the query, driving a
               separate command-conditioned acting policy
  oracle       the scripted expert, replayed as an upper bound
"""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .catalog import Catalog, default_catalog
from .expert import answer_text, demonstrate
from .infer import (DECIDE_EVERY, HumanEvent, Params, RolloutTrace, RunConfig,
                    ScriptedHuman, SessionState, _bind_choice, _call_seed,
                    _record, act, ensemble_action, prune_buffer, reason,
                    run_episode)
from .model import sample_actions
from .reasoning import is_ask, parse, question_of
from .samples import (P_ACT, P_AFTER, denormalize_actions,
                      make_training_samples, proprio_history)
from .textcodec import assemble_prefix
from .train import CheckpointError, load_checkpoint
from .world import WorldParams, oracle_progress, render, reset, step

METHOD_KINDS = ("unified", "flat", "dual_system", "oracle")

# Rollout budgets for scoring runs.  The cooking task carries a long dwell,
# everything else finishes far under the default.
EVAL_TICK_CAPS = {"recipe3": 1200, "recipe_basic": 320, "mix_interrupt": 320}
DEFAULT_EVAL_CAP = 240

_PICK_STEP = "pick up the "


@dataclass(frozen=True)
class MethodSpec:
    """One column of a comparison.

    ``checkpoint`` is the policy weights; dual_system additionally needs
    ``command_checkpoint`` for its acting half and a delivery ``latency``
    in ticks.  The oracle kind takes no weights at all.
    """

    kind: str
    checkpoint: str | None = None
    command_checkpoint: str | None = None
    latency: int = 8
    temperature: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in METHOD_KINDS:
            raise ValueError(f"unknown method kind {self.kind!r}")
        if self.kind != "oracle" and not self.checkpoint:
            raise ValueError(f"{self.kind} method needs a checkpoint")
        if self.kind == "dual_system" and not self.command_checkpoint:
            raise ValueError("dual_system needs a command checkpoint")
        if self.latency < 0:
            raise ValueError("latency must be >= 0")


@dataclass
class SuiteConfig:
    methods: dict[str, MethodSpec]
    tasks: tuple[str, ...]
    trials: int
    seed_base: int = 1000
    hazard: float | None = None
    tick_cap: int | None = None      # None: per-task defaults above
    workers: int = 1

    def __post_init__(self) -> None:
        self.tasks = tuple(self.tasks)
        if self.trials < 0:
            raise ValueError("trials must be >= 0")

    def seeds(self) -> list[int]:
        return [self.seed_base + i for i in range(self.trials)]


@dataclass
class Report:
    """Trial statistics, every cell carrying (n, seeds).

    success      (method, task) -> rate cell
    grounding    (method, reference type) -> rate cell
    decisions    method -> reasoning-onset precision/recall vs trace moments
    fields       method -> parsed done-list length vs logged progress
    compliance   method -> executed pick target vs reasoned pick target
    cost_shares  (method, task) -> cost totals and reasoning share
    action_mse   method -> held-out first-step error, filled separately
    skipped      methods dropped with the reason (missing weights etc.)
    """

    success: dict = field(default_factory=dict)
    grounding: dict = field(default_factory=dict)
    decisions: dict = field(default_factory=dict)
    fields: dict = field(default_factory=dict)
    compliance: dict = field(default_factory=dict)
    cost_shares: dict = field(default_factory=dict)
    action_mse: dict = field(default_factory=dict)
    skipped: tuple = ()


@dataclass
class SuiteResult:
    report: Report
    traces: dict    # (method, task, seed) -> RolloutTrace


# ---------------------------------------------------------------------------
# dual-system baseline


def dual_system_episode(two: Params, one: Params, task, seed: int, latency: int,
                        human_script: ScriptedHuman = ScriptedHuman(),
                        config: RunConfig | None = None, *,
                        world_params: WorldParams | None = None,
                        catalog: Catalog | None = None,
                        hazard: float | None = None) -> RolloutTrace:
    """Roll out the two-network baseline.

    The reasoning half is queried at a decision boundary whenever it is
    idle; its next-step command lands ``latency`` ticks later and the
    acting half conditions on whatever command was delivered last.  The
    world never pauses, so stale commands are the price of latency.
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
    session.ref_image = obs
    session.proprio_log.append(np.asarray(state.gripper, dtype=np.float64).copy())
    progress, done = oracle_progress(state, wp)
    pending_events = list(human.events)
    sent_intervention = False
    command: str | None = None
    in_flight: tuple[int, object] | None = None   # (deliver tick, content)
    end_reason = None

    header_config = {**asdict(config), "mode": "dual_system",
                     "latency": int(latency)}
    _record(session, "header", task_id=state.bound.task_id, seed=seed,
            instruction=state.bound.instruction, progress=progress,
            done=bool(done), target=state.bound.target,
            reference=state.bound.reference, config=header_config)

    def next_seed() -> int:
        session.calls += 1
        return _call_seed(seed, session.calls)

    def post_human(event) -> None:
        if event.kind == "answer":
            session.pending_question = None
            session.question_tick = None
        session.log.append({"tick": session.tick, "order": len(session.log),
                            "source": "human", "text": event.text})
        _record(session, "human", event=event.kind, text=event.text)

    def poll_events() -> None:
        nonlocal pending_events, sent_intervention
        due = [e for e in pending_events if e.tick <= session.tick]
        pending_events = [e for e in pending_events if e.tick > session.tick]
        for event in due:
            post_human(event)
        if (human.intervention is not None and not sent_intervention
                and human.trigger_step >= 0 and progress >= human.trigger_step):
            sent_intervention = True
            post_human(HumanEvent(session.tick, "intervention",
                                  human.intervention))
        if (session.pending_question is not None
                and session.question_tick is not None
                and session.tick >= session.question_tick + human.answer_delay):
            text = human.answer
            if text is None and human.answers_question:
                chosen = (state.bound.interaction or {}).get("chosen")
                if chosen:
                    text = answer_text(catalog, chosen)
            if text is not None:
                post_human(HumanEvent(session.tick, "answer", text))

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

    def query() -> None:
        nonlocal in_flight
        content = reason(two, session, obs, next_seed(), config)
        if content is not None:
            in_flight = (session.tick + max(0, int(latency)), content)
            _record(session, "dispatch", deliver_tick=in_flight[0])

    def deliver_if_due():
        nonlocal in_flight, command
        if in_flight is None or session.tick < in_flight[0]:
            return None
        content = in_flight[1]
        in_flight = None
        command = content.next_step
        _record(session, "command", text=command, terminal=content.terminal)
        if is_ask(command):
            question = question_of(command)
            session.pending_question = question
            session.question_tick = session.tick
            session.log.append({"tick": session.tick, "order": len(session.log),
                                "source": "robot", "text": question})
            _record(session, "question", text=question)
            poll_events()
        return content

    while True:
        if session.tick >= config.tick_cap:
            end_reason = "timeout"
            break
        content = deliver_if_due()
        if content is not None and content.terminal:
            end_reason = "terminal"
            break
        if session.tick % config.decide_every == 0:
            poll_events()
            if in_flight is None and session.pending_question is None:
                query()
                content = deliver_if_due()
                if content is not None and content.terminal:
                    end_reason = "terminal"
                    break
            if (command is not None and not is_ask(command)
                    and session.pending_question is None):
                stacked = np.stack(session.proprio_log)
                prop = proprio_history(stacked, session.tick,
                                       one.model.cfg.proprio_lags)
                prefix = assemble_prefix(one.vocab, obs, obs, command)
                act(one, session, obs, prop, next_seed(), prefix=prefix)
        prune_buffer(session)
        world_tick(ensemble_action(session, session.tick, config.ensemble_decay))

    _record(session, "end", reason=end_reason, progress=progress,
            done=bool(done), parse_failures=session.parse_failures,
            truncations=session.truncations, hold_ticks=session.hold_ticks,
            forced_acts=session.forced_acts,
            total_cost=float(sum(c["cost_units"] for c in session.costs)))
    return RolloutTrace(task_id=state.bound.task_id, seed=seed,
                        records=session.trace)


# ---------------------------------------------------------------------------
# expert oracle


def oracle_trace(task, seed: int, *, hazard: float | None = None,
                 catalog: Catalog | None = None,
                 world_params: WorldParams | None = None) -> RolloutTrace:
    """Replay the scripted expert and wrap the outcome in trace records."""
    catalog = catalog or default_catalog()
    ep = demonstrate(task, seed, hazard=hazard, catalog=catalog,
                     params=world_params)
    state = reset(task, seed, params=world_params, catalog=catalog,
                  hazard=hazard)
    records = [{"kind": "header", "tick": 0, "task_id": ep.task_id,
                "seed": seed, "instruction": ep.instruction,
                "progress": 0, "done": False,
                "target": state.bound.target,
                "reference": state.bound.reference,
                "config": {"mode": "oracle", "decide_every": DECIDE_EVERY}}]
    for event in ep.events:
        records.append({"kind": "world", "tick": int(event["tick"]),
                        "event": dict(event)})
    records.append({"kind": "end", "tick": ep.length,
                    "reason": "terminal" if ep.success else "timeout",
                    "progress": int(ep.progress), "done": bool(ep.success),
                    "parse_failures": 0, "truncations": 0, "hold_ticks": 0,
                    "forced_acts": 0, "total_cost": 0.0})
    return RolloutTrace(task_id=ep.task_id, seed=seed, records=records)


# ---------------------------------------------------------------------------
# report construction (pure function of traces)


def _snap(tick: int, every: int) -> int:
    return int(math.ceil(tick / every) * every)


def _progress_at(trace: RolloutTrace, tick: int) -> int:
    p = int(trace.records[0].get("progress", 0))
    for r in trace.by_kind("progress"):
        if r["tick"] <= tick:
            p = int(r["progress"])
    return p


def trace_moments(trace: RolloutTrace) -> dict[int, str]:
    """Ticks where fresh reasoning is warranted, snapped to the decision
    grid: the start, every progress change, every slip, every operator
    message.  Collisions keep the highest-priority class."""
    every = int(trace.records[0].get("config", {}).get("decide_every",
                                                       DECIDE_EVERY))
    rank = {"error": 3, "human": 2, "progress": 1, "start": 0}
    moments: dict[int, str] = {0: "start"}

    def put(tick: int, cls: str) -> None:
        b = _snap(tick, every)
        if b not in moments or rank[cls] > rank[moments[b]]:
            moments[b] = cls

    for r in trace.by_kind("progress"):
        put(r["tick"], "progress")
    for r in trace.by_kind("world"):
        if r["event"]["kind"] == "slip":
            put(r["tick"], "error")
    for r in trace.by_kind("human"):
        put(r["tick"], "human")
    return moments


def _decision_stats(traces: list[RolloutTrace]) -> dict | None:
    hits = {"start": 0, "progress": 0, "error": 0, "human": 0}
    totals = {"start": 0, "progress": 0, "error": 0, "human": 0}
    bor_total = 0
    bor_matched = 0
    saw_decisions = False
    for trace in traces:
        decisions = trace.by_kind("decision")
        if not decisions:
            continue
        saw_decisions = True
        every = int(trace.records[0].get("config", {}).get("decide_every",
                                                           DECIDE_EVERY))
        bor_ticks = [r["tick"] for r in decisions if r["choice"] == "[BOR]"]
        moments = trace_moments(trace)
        for boundary, cls in moments.items():
            totals[cls] += 1
            if any(abs(b - boundary) <= every for b in bor_ticks):
                hits[cls] += 1
        for b in bor_ticks:
            bor_total += 1
            if any(abs(b - boundary) <= every for boundary in moments):
                bor_matched += 1
    if not saw_decisions:
        return None
    n_moments = sum(totals.values())
    n_hits = sum(hits.values())
    out = {
        "n_moments": n_moments,
        "recall": n_hits / n_moments if n_moments else 0.0,
        "n_bor": bor_total,
        "precision": bor_matched / bor_total if bor_total else 0.0,
    }
    for cls in totals:
        out[f"n_{cls}"] = totals[cls]
        out[f"recall_{cls}"] = hits[cls] / totals[cls] if totals[cls] else 0.0
    return out


def _reasoned_pick(trace: RolloutTrace, before: int,
                   names: dict[str, str]) -> str | None:
    last = None
    for r in trace.by_kind("reasoning"):
        if not r["ok"] or r["tick"] > before:
            continue
        step_text = parse(r["text"]).next_step
        if step_text.startswith(_PICK_STEP):
            name = step_text[len(_PICK_STEP):]
            if name in names:
                last = names[name]
    return last


def _first_grasp(trace: RolloutTrace) -> tuple[int, str] | None:
    for r in trace.by_kind("world"):
        if r["event"]["kind"] == "grasp":
            return int(r["tick"]), str(r["event"]["object"])
    return None


def build_report(traces: dict, skipped: tuple = (),
                 catalog: Catalog | None = None) -> Report:
    """Assemble the full Report from stored traces, nothing else."""
    catalog = catalog or default_catalog()
    names = {entry.name: oid for oid, entry in catalog.objects.items()}
    report = Report(skipped=tuple(skipped))

    by_cell: dict[tuple[str, str], list[tuple[int, RolloutTrace]]] = {}
    for (method, task, seed), trace in sorted(traces.items()):
        by_cell.setdefault((method, task), []).append((seed, trace))

    for (method, task), items in by_cell.items():
        seeds = [s for s, _ in items]
        ends = [t.end for _, t in items]
        wins = sum(bool(e["done"]) for e in ends)
        report.success[(method, task)] = {
            "n": len(items), "seeds": seeds, "successes": wins,
            "rate": wins / len(items),
            "completed_steps": [int(e["progress"]) for e in ends],
            "mean_ticks": float(np.mean([e["tick"] for e in ends])),
        }
        total = [float(e["total_cost"]) for e in ends]
        shares = []
        for _, t in items:
            costs = t.by_kind("cost")
            spent = sum(c["cost_units"] for c in costs)
            reasoned = sum(c["cost_units"] for c in costs
                           if c["mode"] == "reasoning")
            shares.append(reasoned / spent if spent else 0.0)
        report.cost_shares[(method, task)] = {
            "n": len(items), "seeds": seeds,
            "mean_total_cost": float(np.mean(total)),
            "mean_reasoning_share": float(np.mean(shares)),
        }

    methods = sorted({m for m, _ in by_cell})
    for method in methods:
        rows = [(task, seed, trace) for (m, task), items in by_cell.items()
                if m == method for seed, trace in items]

        # grounding splits by how the instruction refers to the target
        for task, seed, trace in rows:
            ref = trace.records[0].get("reference")
            if not ref:
                continue
            cell = report.grounding.setdefault(
                (method, ref["type"]),
                {"n": 0, "seeds": [], "successes": 0, "rate": 0.0})
            cell["n"] += 1
            cell["seeds"].append(seed)
            cell["successes"] += bool(trace.end["done"])
        for key, cell in report.grounding.items():
            if key[0] == method and cell["n"]:
                cell["rate"] = cell["successes"] / cell["n"]

        stats = _decision_stats([t for _, _, t in rows])
        if stats is not None:
            report.decisions[method] = stats

        checked = matched = 0
        for task, seed, trace in rows:
            for r in trace.by_kind("reasoning"):
                if not r["ok"]:
                    continue
                content = parse(r["text"])
                checked += 1
                matched += (len(content.history)
                            == _progress_at(trace, r["tick"]))
        if checked:
            report.fields[method] = {"n": checked, "matches": matched,
                                     "accuracy": matched / checked}

        comp_n = comp_match = 0
        for task, seed, trace in rows:
            if catalog.task(trace.task_id).kind != "grounding":
                continue
            grasp = _first_grasp(trace)
            if grasp is None:
                continue
            want = _reasoned_pick(trace, grasp[0], names)
            if want is None:
                continue
            comp_n += 1
            comp_match += (want == grasp[1])
        if comp_n:
            report.compliance[method] = {"n": comp_n, "matches": comp_match,
                                         "rate": comp_match / comp_n}
    return report


# ---------------------------------------------------------------------------
# suite driver


def _load_methods(config: SuiteConfig):
    loaded: dict[str, tuple] = {}
    skipped: list[tuple[str, str]] = []

    def load(path: str) -> Params:
        model, vocab, _ = load_checkpoint(path)
        return Params(model, vocab)

    for name, spec in config.methods.items():
        try:
            if spec.kind == "oracle":
                loaded[name] = (spec, None, None)
            elif spec.kind == "dual_system":
                for p in (spec.checkpoint, spec.command_checkpoint):
                    if not Path(p).exists():
                        raise CheckpointError(f"missing checkpoint {p}")
                loaded[name] = (spec, load(spec.checkpoint),
                                load(spec.command_checkpoint))
            else:
                if not Path(spec.checkpoint).exists():
                    raise CheckpointError(f"missing checkpoint {spec.checkpoint}")
                loaded[name] = (spec, load(spec.checkpoint), None)
        except CheckpointError as exc:
            skipped.append((name, str(exc)))
    return loaded, skipped


def _trial_config(spec: MethodSpec, task: str, cap: int | None) -> RunConfig:
    tick_cap = cap if cap is not None else EVAL_TICK_CAPS.get(task,
                                                              DEFAULT_EVAL_CAP)
    mode = "flat" if spec.kind == "flat" else "unified"
    return RunConfig(tick_cap=tick_cap, temperature=spec.temperature,
                     mode=mode)


def _run_trial(entry, task: str, seed: int, config: SuiteConfig,
               catalog: Catalog) -> RolloutTrace:
    spec, params, cmd_params = entry
    if spec.kind == "oracle":
        return oracle_trace(task, seed, hazard=config.hazard, catalog=catalog)
    rc = _trial_config(spec, task, config.tick_cap)
    human = ScriptedHuman.from_task(task, catalog)
    if spec.kind == "dual_system":
        return dual_system_episode(params, cmd_params, task, seed,
                                   spec.latency, human, rc,
                                   catalog=catalog, hazard=config.hazard)
    return run_episode(params, task, seed, human, rc,
                       catalog=catalog, hazard=config.hazard)


def run_suite(config: SuiteConfig, catalog: Catalog | None = None) -> SuiteResult:
    """Run every (method, task, trial seed) cell and score from the traces.

    Methods whose weights are missing are listed in the report and skipped;
    everything else runs on the identical seed list.
    """
    catalog = catalog or default_catalog()
    loaded, skipped = _load_methods(config)
    plan = [(name, task, seed)
            for name in loaded
            for task in config.tasks
            for seed in config.seeds()]
    traces: dict[tuple[str, str, int], RolloutTrace] = {}
    if config.workers > 1 and plan:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            futures = {key: pool.submit(_run_trial, loaded[key[0]], key[1],
                                        key[2], config, catalog)
                       for key in plan}
        for key, future in futures.items():
            traces[key] = future.result()
    else:
        for key in plan:
            traces[key] = _run_trial(loaded[key[0]], key[1], key[2],
                                     config, catalog)
    report = build_report(traces, skipped=tuple(skipped), catalog=catalog)
    return SuiteResult(report=report, traces=traces)


# ---------------------------------------------------------------------------
# ambiguity counts


def _tail_ge(k: int, n: int, p: float) -> float:
    if k <= 0:
        return 1.0
    if p <= 0.0:
        return 0.0
    if p >= 1.0:
        return 1.0
    return sum(math.comb(n, i) * p ** i * (1.0 - p) ** (n - i)
               for i in range(k, n + 1))


def _bisect_p(fn, lo: float = 0.0, hi: float = 1.0, iters: int = 80) -> float:
    # fn is increasing; find its root in [lo, hi]
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if fn(mid) < 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def binomial_ci(k: int, n: int, conf: float = 0.95) -> tuple[float, float]:
    """Exact two-sided confidence interval for a binomial proportion."""
    if not 0 <= k <= n or n <= 0:
        raise ValueError(f"bad counts k={k} n={n}")
    if not 0.0 < conf < 1.0:
        raise ValueError("conf must be in (0, 1)")
    alpha = 1.0 - conf
    lo = 0.0 if k == 0 else _bisect_p(lambda p: _tail_ge(k, n, p) - alpha / 2)
    hi = (1.0 if k == n
          else _bisect_p(lambda p: _tail_ge(k + 1, n, p) - (1.0 - alpha / 2)))
    return (lo, hi)


def run_multimodality(params: Params, task_id: str, n_trials: int,
                      seed_base: int = 3000, temperature: float = 1.0,
                      seeds=None, catalog: Catalog | None = None,
                      tick_cap: int = DEFAULT_EVAL_CAP) -> dict:
    """Count which of the two mirrored goal objects gets grasped first.

    Trials that never grasp a goal object land in the "none" bucket so the
    three counts always sum to the trial count.
    """
    catalog = catalog or default_catalog()
    task = catalog.task(task_id)
    goal_objects: set[str] = set()
    for g in task.goal:
        if g.get("kind") == "held_any":
            goal_objects.update(g["objects"])
    if not goal_objects:
        raise ValueError(f"task {task_id!r} has no either-side goal")
    seeds = (tuple(seeds) if seeds is not None
             else tuple(range(seed_base, seed_base + n_trials)))
    counts = {"left": 0, "right": 0, "none": 0}
    rc = RunConfig(temperature=temperature, tick_cap=tick_cap)
    for seed in seeds:
        trace = run_episode(params, task_id, seed, config=rc, catalog=catalog)
        side = "none"
        for r in trace.by_kind("world"):
            event = r["event"]
            if event["kind"] == "grasp" and event["object"] in goal_objects:
                side = "left" if event["object"].endswith("_left") else "right"
                break
        counts[side] += 1
    n = len(seeds)
    return {
        "task": task_id, "instruction": task.instruction,
        "n": n, "seeds": list(seeds), "temperature": temperature,
        "counts": counts,
        "ci": {"left": binomial_ci(counts["left"], n),
               "right": binomial_ci(counts["right"], n)},
    }


# ---------------------------------------------------------------------------
# action error on held-out demonstrations


@dataclass(frozen=True)
class MseResult:
    mse: float
    n: int
    errors: tuple[float, ...]


def mse_rows(episodes, vocab) -> list:
    rows = []
    for ep in episodes:
        rows.extend(s for s in make_training_samples(ep, vocab)
                    if s.pattern in (P_AFTER, P_ACT))
    return rows


def action_mse(params: Params, episodes, seed: int = 7,
               sampler=None) -> MseResult:
    """First-step squared error of sampled chunks against held-out demos.

    The sampler seed is fixed per row, so the same checkpoint always scores
    the same number.
    """
    rows = mse_rows(episodes, params.vocab)
    if sampler is None:
        def sampler(prefix, proprio, s):
            return sample_actions(params.model, prefix, proprio, s)
    errors = []
    for i, row in enumerate(rows):
        got = denormalize_actions(np.asarray(sampler(row.prefix, row.proprio,
                                                     _call_seed(seed, i))))
        want = denormalize_actions(np.asarray(row.chunk))
        errors.append(float(np.mean((got[0] - want[0]) ** 2)))
    mse = float(np.mean(errors)) if errors else 0.0
    return MseResult(mse=mse, n=len(errors), errors=tuple(errors))


def mse_ratio_ci(baseline: MseResult, reference: MseResult, seed: int = 0,
                 resamples: int = 1000, conf: float = 0.95) -> dict:
    """Bootstrap CI for baseline.mse / reference.mse over paired rows."""
    if baseline.n != reference.n or baseline.n == 0:
        raise ValueError("results must pair row-for-row")
    a = np.asarray(baseline.errors)
    b = np.asarray(reference.errors)
    rng = np.random.default_rng(seed)
    ratios = []
    for _ in range(resamples):
        idx = rng.integers(0, len(a), size=len(a))
        denom = float(b[idx].mean())
        ratios.append(float(a[idx].mean()) / denom if denom else math.inf)
    lo, hi = np.quantile(ratios, [(1 - conf) / 2, 1 - (1 - conf) / 2])
    point = baseline.mse / reference.mse if reference.mse else math.inf
    return {"ratio": point, "lo": float(lo), "hi": float(hi),
            "n": baseline.n, "resamples": resamples}


# ---------------------------------------------------------------------------
# latency sweep


def dual_system_latency_sweep(two: Params, one: Params, task_id: str,
                              latencies, trials: int, seed_base: int = 1000, *,
                              hazard: float | None = None,
                              catalog: Catalog | None = None,
                              tick_cap: int | None = None) -> list[dict]:
    """Dual-system success as delivery latency grows, fixed seeds per point."""
    catalog = catalog or default_catalog()
    seeds = [seed_base + i for i in range(trials)]
    out = []
    for latency in sorted({int(v) for v in latencies}):
        rc = RunConfig(tick_cap=(tick_cap if tick_cap is not None
                                 else EVAL_TICK_CAPS.get(task_id,
                                                         DEFAULT_EVAL_CAP)))
        wins = 0
        for seed in seeds:
            trace = dual_system_episode(
                two, one, task_id, seed, latency,
                ScriptedHuman.from_task(task_id, catalog), rc,
                catalog=catalog, hazard=hazard)
            wins += bool(trace.end["done"])
        out.append({"latency": latency, "n": trials, "successes": wins,
                    "rate": wins / trials if trials else 0.0, "seeds": seeds})
    return out


# ---------------------------------------------------------------------------
# rendering and persistence


def _fmt_rate(cell: dict) -> str:
    return f"{cell['successes']:3d}/{cell['n']:<3d} = {cell['rate']:6.1%}"


def render_report(report: Report) -> str:
    lines = ["== success =="]
    for (method, task), cell in sorted(report.success.items()):
        lines.append(f"  {method:16s} {task:18s} {_fmt_rate(cell)}  "
                     f"mean_ticks={cell['mean_ticks']:.1f}")
    if report.grounding:
        lines.append("== grounding by reference type ==")
        for (method, ref_type), cell in sorted(report.grounding.items()):
            lines.append(f"  {method:16s} {ref_type:10s} {_fmt_rate(cell)}")
    if report.decisions:
        lines.append("== reasoning-onset decisions ==")
        for method, cell in sorted(report.decisions.items()):
            lines.append(
                f"  {method:16s} recall={cell['recall']:.3f} "
                f"(n={cell['n_moments']}) precision={cell['precision']:.3f} "
                f"(n={cell['n_bor']}) error-recall={cell['recall_error']:.3f} "
                f"(n={cell['n_error']})")
    if report.fields:
        lines.append("== reasoning progress-field accuracy ==")
        for method, cell in sorted(report.fields.items()):
            lines.append(f"  {method:16s} {cell['matches']}/{cell['n']} "
                         f"= {cell['accuracy']:.3f}")
    if report.compliance:
        lines.append("== pick compliance (executed vs reasoned) ==")
        for method, cell in sorted(report.compliance.items()):
            lines.append(f"  {method:16s} {cell['matches']}/{cell['n']} "
                         f"= {cell['rate']:.3f}")
    if report.cost_shares:
        lines.append("== cost ==")
        for (method, task), cell in sorted(report.cost_shares.items()):
            lines.append(f"  {method:16s} {task:18s} "
                         f"total={cell['mean_total_cost']:10.1f} "
                         f"reasoning_share={cell['mean_reasoning_share']:.3f}")
    if report.action_mse:
        lines.append("== action mse ==")
        for method, cell in sorted(report.action_mse.items()):
            lines.append(f"  {method:16s} mse={cell['mse']:.6f} n={cell['n']}")
    if report.skipped:
        lines.append("== skipped methods ==")
        for name, why in report.skipped:
            lines.append(f"  {name:16s} {why}")
    return "\n".join(lines) + "\n"


def _pairs_to_rows(d: dict, key_names: tuple[str, str]) -> list[dict]:
    rows = []
    for key, cell in sorted(d.items()):
        row = {key_names[0]: key[0], key_names[1]: key[1]}
        row.update(cell)
        rows.append(row)
    return rows


def _named_to_rows(d: dict, key_name: str) -> list[dict]:
    rows = []
    for key, cell in sorted(d.items()):
        row = {key_name: key}
        row.update(cell)
        rows.append(row)
    return rows


def report_to_json(report: Report) -> str:
    payload = {
        "success": _pairs_to_rows(report.success, ("method", "task")),
        "grounding": _pairs_to_rows(report.grounding, ("method", "reference_type")),
        "decisions": _named_to_rows(report.decisions, "method"),
        "fields": _named_to_rows(report.fields, "method"),
        "compliance": _named_to_rows(report.compliance, "method"),
        "cost_shares": _pairs_to_rows(report.cost_shares, ("method", "task")),
        "action_mse": _named_to_rows(report.action_mse, "method"),
        "skipped": [list(s) for s in report.skipped],
    }
    return json.dumps(payload, indent=2, sort_keys=True)


def _rows_to_pairs(rows: list[dict], key_names: tuple[str, str]) -> dict:
    out = {}
    for row in rows:
        row = dict(row)
        key = (row.pop(key_names[0]), row.pop(key_names[1]))
        out[key] = row
    return out


def _rows_to_named(rows: list[dict], key_name: str) -> dict:
    out = {}
    for row in rows:
        row = dict(row)
        out[row.pop(key_name)] = row
    return out


def report_from_json(text: str) -> Report:
    payload = json.loads(text)
    return Report(
        success=_rows_to_pairs(payload["success"], ("method", "task")),
        grounding=_rows_to_pairs(payload["grounding"], ("method", "reference_type")),
        decisions=_rows_to_named(payload["decisions"], "method"),
        fields=_rows_to_named(payload["fields"], "method"),
        compliance=_rows_to_named(payload["compliance"], "method"),
        cost_shares=_rows_to_pairs(payload["cost_shares"], ("method", "task")),
        action_mse=_rows_to_named(payload["action_mse"], "method"),
        skipped=tuple(tuple(s) for s in payload["skipped"]),
    )


def _csv_text(rows: list[dict]) -> str:
    if not rows:
        return ""
    field_names: list[str] = []
    for row in rows:
        for k in row:
            if k not in field_names:
                field_names.append(k)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=field_names)
    writer.writeheader()
    for row in rows:
        writer.writerow({k: json.dumps(v) if isinstance(v, (list, tuple))
                         else v for k, v in row.items()})
    return buf.getvalue()


def write_report(report: Report, out_dir) -> list[str]:
    """Emit report.txt, report.json and one CSV per populated section."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name: str, text: str) -> None:
        (out / name).write_text(text)
        written.append(name)

    put("report.txt", render_report(report))
    put("report.json", report_to_json(report))
    sections = {
        "success.csv": _pairs_to_rows(report.success, ("method", "task")),
        "grounding.csv": _pairs_to_rows(report.grounding,
                                        ("method", "reference_type")),
        "decisions.csv": _named_to_rows(report.decisions, "method"),
        "fields.csv": _named_to_rows(report.fields, "method"),
        "compliance.csv": _named_to_rows(report.compliance, "method"),
        "costs.csv": _pairs_to_rows(report.cost_shares, ("method", "task")),
        "action_mse.csv": _named_to_rows(report.action_mse, "method"),
    }
    for name, rows in sections.items():
        if rows:
            put(name, _csv_text(rows))
    return written


def compare_reports(a: Report, b: Report) -> str:
    """Side-by-side success rates with deltas, cells missing on one side
    shown as blanks."""
    keys = sorted(set(a.success) | set(b.success))
    lines = [f"{'method':16s} {'task':18s} {'a':>8s} {'b':>8s} {'delta':>8s}"]
    for key in keys:
        ca = a.success.get(key)
        cb = b.success.get(key)
        ra = f"{ca['rate']:.1%}" if ca else "-"
        rb = f"{cb['rate']:.1%}" if cb else "-"
        delta = (f"{cb['rate'] - ca['rate']:+.1%}" if ca and cb else "-")
        lines.append(f"{key[0]:16s} {key[1]:18s} {ra:>8s} {rb:>8s} {delta:>8s}")
    return "\n".join(lines) + "\n"
