"""Training-sample assembly from demonstration episodes.

Each reasoning interval yields three records: one that writes the
updated reasoning from a stale prefix, one that acts from the fresh
reasoning, and one that acts from the stale prefix without any
decision supervision. Acting intervals yield chunked action records
at the decide cadence, starting one cadence in (the interval's first
decision moment already belongs to the after-update record), with a
deterministically diffused share of reason-now records at interval
starts to balance the two decision labels.

Records whose conditioning, action target, and proprioception exactly
repeat an earlier record of the same episode are dropped: long idle
stretches otherwise flood the set with bit-identical rows.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
import torch

from .episodes import Episode, acting_intervals, reasoning_intervals
from .reasoning import parse
from .textcodec import (BOA_ID, BOR_ID, EOS_ID, PAD_ID, Prefix, Vocab,
                        assemble_prefix, encode)

P_REASON = "R-supervise"
P_AFTER = "A-after-update"
P_STALE = "A-stale-R"
P_ACT = "A-acting"
P_BOR = "BOR-only"
P_FLAT = "A-flat"
P_CMD = "A-command"
PATTERNS = (P_REASON, P_AFTER, P_STALE, P_ACT, P_BOR, P_FLAT, P_CMD)

ACTION_SCALE = np.array([0.05, 0.05, 0.2])


class AssemblerError(RuntimeError):
    pass


@dataclass(frozen=True)
class SampleConfig:
    horizon: int = 8
    decide_every: int = 4
    bor_to_boa: float = 3.0        # decision labels target 1 BOR : 3 BOA
    q: Optional[float] = None      # None = auto-tune; explicit value forces


@dataclass(eq=False)
class TrainingSample:
    pattern: str
    task_id: str
    seed: int
    tick: int
    prefix: Prefix
    suffix: tuple[int, ...]
    targets: tuple[tuple[int, int], ...]   # (logits index, supervised id)
    decision_target: Optional[int]         # BOR_ID, BOA_ID, or None
    chunk: Optional[np.ndarray]            # (H, 3) normalized actions
    proprio: Optional[np.ndarray]          # (3, 3) lagged gripper states

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise AssemblerError(f"unknown pattern {self.pattern!r}")


@dataclass(eq=False)
class VLSample:
    """Single-image text supervision; no action, no proprio."""
    image: np.ndarray
    instruction: str
    reasoning_text: str
    kind: str = "grounding"


def normalize_actions(actions: np.ndarray) -> np.ndarray:
    out = np.asarray(actions, dtype=np.float64) / ACTION_SCALE
    if np.abs(out).max(initial=0.0) > 1.0 + 1e-9:
        raise AssemblerError("action outside the clamp bounds")
    return out


def denormalize_actions(normalized: np.ndarray) -> np.ndarray:
    return np.asarray(normalized, dtype=np.float64) * ACTION_SCALE


def proprio_history(proprio: np.ndarray, tick: int,
                    lags: Sequence[int] = (0, 1, 5)) -> np.ndarray:
    """Stack the gripper state at the given lags; ticks before the
    episode start repeat the initial state."""
    rows = [proprio[max(tick - lag, 0)] for lag in lags]
    return np.stack(rows).astype(np.float64)


def _chunk(actions: np.ndarray, tick: int, horizon: int) -> np.ndarray:
    out = np.zeros((horizon, actions.shape[1]), dtype=np.float64)
    end = min(tick + horizon, len(actions))
    if tick < end:
        out[:end - tick] = actions[tick:end]
    return out


def _suffix_targets(decision_slot: int, suffix: tuple[int, ...]):
    # logits at index p predict the token at position p + 1
    return tuple((decision_slot - 1 + j, tok) for j, tok in enumerate(suffix))


def _log_texts(episode: Episode, count: int) -> tuple[str, ...]:
    return tuple(entry["text"] for entry in episode.log[:count])


def _record_key(sample: TrainingSample) -> bytes:
    """Content digest over everything the losses can see."""
    h = hashlib.sha1()
    h.update(np.asarray(sample.prefix.ids, dtype=np.int64).tobytes())
    h.update(np.ascontiguousarray(sample.prefix.patches).tobytes())
    if sample.chunk is not None:
        h.update(np.ascontiguousarray(sample.chunk).tobytes())
    if sample.proprio is not None:
        h.update(np.ascontiguousarray(sample.proprio).tobytes())
    return h.digest()


def _log_after(episode: Episode, interval) -> int:
    # a robot question posted at the window start lands right after
    # the entries the reasoning prefix saw
    n = interval.log_seen
    if (len(episode.log) > n and episode.log[n]["tick"] == interval.start
            and episode.log[n]["source"] == "robot"):
        return n + 1
    return n


def make_training_samples(episode: Episode, vocab: Vocab,
                          config: SampleConfig = SampleConfig()
                          ) -> list[TrainingSample]:
    samples, _ = _assemble(episode, vocab, config, _Balance())
    return samples


def assemble_dataset(episodes: Iterable[Episode], vocab: Vocab,
                     config: SampleConfig = SampleConfig()
                     ) -> list[TrainingSample]:
    """Assemble many episodes with the decision-label balance diffused
    across the whole set rather than per episode."""
    episodes = list(episodes)
    balance = _Balance()
    deferred: list[tuple[Episode, list]] = []
    out: list[TrainingSample] = []
    for ep in episodes:
        samples, candidates = _assemble(ep, vocab, config, balance,
                                        defer_bor=True)
        out.extend(samples)
        deferred.append((ep, candidates))
    q = _tune_q(balance, sum(len(c) for _, c in deferred), config)
    for ep, candidates in deferred:
        out.extend(_emit_bor(ep, vocab, candidates, balance, q))
    return out


def _tune_q(balance: "_Balance", n_candidates: int,
            config: SampleConfig) -> float:
    if config.q is not None:
        return config.q
    if n_candidates == 0:
        return 0.0
    want = max(balance.boa / config.bor_to_boa - balance.bor, 0.0)
    return min(want / n_candidates, 1.0)


@dataclass
class _Balance:
    bor: int = 0
    boa: int = 0
    acc: float = 0.0


def _assemble(episode: Episode, vocab: Vocab, config: SampleConfig,
              balance: _Balance, defer_bor: bool = False):
    rints = reasoning_intervals(episode)
    aints = acting_intervals(episode)
    if len(aints) > len(rints):
        raise AssemblerError("acting interval without a governing reasoning")
    frames = episode.frames
    horizon = config.horizon
    samples: list[TrainingSample] = []
    candidates: list[tuple[int, int]] = []   # (tick, reasoning index)

    def emit(pattern, tick, cur, ref, log_n, reasoning, suffix, supervised,
             decision, chunk, prop_tick):
        prefix = assemble_prefix(vocab, cur, ref, episode.instruction or "",
                                 _log_texts(episode, log_n), reasoning)
        targets = _suffix_targets(prefix.decision_slot, suffix) if supervised \
            else ()
        samples.append(TrainingSample(
            pattern=pattern, task_id=episode.task_id, seed=episode.seed,
            tick=tick, prefix=prefix, suffix=suffix, targets=targets,
            decision_target=decision,
            chunk=None if prop_tick is None else chunk,
            proprio=None if prop_tick is None else
            proprio_history(episode.proprio, prop_tick)))

    for i, r in enumerate(rints):
        if not r.text:
            raise AssemblerError(f"reasoning interval {i} has no content")
        t_i, e_i = r.start, r.end
        stale = rints[i - 1].text if i > 0 else None
        ref_prev = frames[rints[i - 1].start] if i > 0 else frames[t_i]
        after = _log_after(episode, r)
        suffix_r = (BOR_ID, *encode(vocab, r.text), EOS_ID)
        chunk_b = normalize_actions(_chunk(episode.actions, e_i, horizon))

        emit(P_REASON, t_i, frames[t_i], ref_prev, r.log_seen, stale,
             suffix_r, True, BOR_ID, None, None)
        balance.bor += 1
        emit(P_AFTER, e_i, frames[e_i], frames[e_i], after, r.text,
             (BOA_ID,), True, BOA_ID, chunk_b, e_i)
        balance.boa += 1
        emit(P_STALE, t_i, frames[t_i], ref_prev, r.log_seen, stale,
             (BOA_ID,), False, None, chunk_b, t_i)

    seen: set[bytes] = set()
    for j, act in enumerate(aints):
        r = rints[j]
        after = _log_after(episode, r)
        # one reason-now candidate per interval, at the first decision
        # moment a missed update actually reaches; later moments no
        # longer show the trigger and are unreachable once it fires.
        # j = 0 covers a policy that skipped the episode-start reasoning.
        candidates.append((act.start, j))
        start = act.start + config.decide_every
        for t in range(start, act.end, config.decide_every):
            chunk = normalize_actions(_chunk(episode.actions, t, horizon))
            emit(P_ACT, t, frames[t], frames[r.start], after, r.text,
                 (BOA_ID,), True, BOA_ID, chunk, t)
            key = _record_key(samples[-1])
            if key in seen:
                samples.pop()
                continue
            seen.add(key)
            balance.boa += 1

    if defer_bor:
        return samples, candidates
    q = _tune_q(balance, len(candidates), config)
    samples.extend(_emit_bor(episode, vocab, candidates, balance, q))
    return samples, candidates


def _emit_bor(episode: Episode, vocab: Vocab, candidates, balance: _Balance,
              q: float) -> list[TrainingSample]:
    if not candidates or q <= 0.0:
        return []
    rints = reasoning_intervals(episode)
    out: list[TrainingSample] = []
    for t, j in candidates:
        balance.acc += q
        if balance.acc < 1.0 - 1e-9:
            continue
        balance.acc -= 1.0
        governing = rints[j]
        stale = rints[j - 1].text if j >= 1 else None
        ref_tick = rints[j - 1].start if j >= 1 else governing.start
        after = _log_after(episode, governing)
        prefix = assemble_prefix(vocab, episode.frames[t],
                                 episode.frames[ref_tick],
                                 episode.instruction or "",
                                 _log_texts(episode, after), stale)
        out.append(TrainingSample(
            pattern=P_BOR, task_id=episode.task_id, seed=episode.seed,
            tick=t, prefix=prefix, suffix=(),
            targets=((prefix.decision_slot - 1, BOR_ID),),
            decision_target=BOR_ID, chunk=None, proprio=None))
        balance.bor += 1
    return out


def flat_samples(episode: Episode, vocab: Vocab,
                 config: SampleConfig = SampleConfig()) -> list[TrainingSample]:
    """Reasoning-free conditioning for the plain baseline: instruction and
    dialogue only, the reference raster mirroring the current one, action
    chunks at the decide cadence across every acting interval."""
    frames = episode.frames
    out: list[TrainingSample] = []
    seen: set[bytes] = set()
    for interval in acting_intervals(episode):
        for t in range(interval.start, interval.end, config.decide_every):
            n_log = sum(1 for e in episode.log if e["tick"] <= t)
            prefix = assemble_prefix(vocab, frames[t], frames[t],
                                     episode.instruction or "",
                                     _log_texts(episode, n_log), None)
            sample = TrainingSample(
                pattern=P_FLAT, task_id=episode.task_id, seed=episode.seed,
                tick=t, prefix=prefix, suffix=(BOA_ID,),
                targets=_suffix_targets(prefix.decision_slot, (BOA_ID,)),
                decision_target=BOA_ID,
                chunk=normalize_actions(_chunk(episode.actions, t,
                                               config.horizon)),
                proprio=proprio_history(episode.proprio, t))
            key = _record_key(sample)
            if key in seen:
                continue
            seen.add(key)
            out.append(sample)
    return out


def command_samples(episode: Episode, vocab: Vocab,
                    config: SampleConfig = SampleConfig()
                    ) -> list[TrainingSample]:
    """Directive-conditioned rows: the instruction slot carries the
    governing reasoning's next step, standing in for a dispatcher that
    feeds one atomic command at a time. No dialogue, no reasoning text."""
    rints = reasoning_intervals(episode)
    frames = episode.frames
    out: list[TrainingSample] = []
    seen: set[bytes] = set()
    for j, interval in enumerate(acting_intervals(episode)):
        directive = parse(rints[j].text).next_step
        for t in range(interval.start, interval.end, config.decide_every):
            prefix = assemble_prefix(vocab, frames[t], frames[t], directive,
                                     (), None)
            sample = TrainingSample(
                pattern=P_CMD, task_id=episode.task_id, seed=episode.seed,
                tick=t, prefix=prefix, suffix=(BOA_ID,),
                targets=_suffix_targets(prefix.decision_slot, (BOA_ID,)),
                decision_target=BOA_ID,
                chunk=normalize_actions(_chunk(episode.actions, t,
                                               config.horizon)),
                proprio=proprio_history(episode.proprio, t))
            key = _record_key(sample)
            if key in seen:
                continue
            seen.add(key)
            out.append(sample)
    return out


def vl_training_sample(sample: VLSample, vocab: Vocab) -> TrainingSample:
    """Single-image text supervision rendered as a reasoning record:
    the reference slot repeats the one image, the prefix carries no
    dialogue and no prior reasoning."""
    prefix = assemble_prefix(vocab, sample.image, sample.image,
                             sample.instruction, (), None)
    suffix = (BOR_ID, *encode(vocab, sample.reasoning_text), EOS_ID)
    return TrainingSample(
        pattern=P_REASON, task_id=f"vl_{sample.kind}", seed=-1, tick=0,
        prefix=prefix, suffix=suffix,
        targets=_suffix_targets(prefix.decision_slot, suffix),
        decision_target=BOR_ID, chunk=None, proprio=None)


def decision_balance(samples: Sequence[TrainingSample]) -> tuple[int, int]:
    bor = sum(1 for s in samples if s.decision_target == BOR_ID)
    boa = sum(1 for s in samples if s.decision_target == BOA_ID)
    return bor, boa


@dataclass(eq=False)
class Batch:
    tokens: torch.Tensor          # (B, L) long, PAD-filled
    patches: torch.Tensor         # (B, 72, PATCH_DIM)
    lengths: torch.Tensor         # (B,) long
    logit_targets: torch.Tensor   # (B, L) long; logits at i predict i+1
    has_action: torch.Tensor      # (B,) bool
    chunks: torch.Tensor          # (B, H, 3)
    proprio: torch.Tensor         # (B, 3, 3)

    @property
    def size(self) -> int:
        return self.tokens.shape[0]


def collate(samples: Sequence[TrainingSample], dtype=None) -> Batch:
    dtype = dtype or torch.float32
    b = len(samples)
    horizon = next((s.chunk.shape[0] for s in samples if s.chunk is not None), 8)
    lmax = max(len(s.prefix.ids) + len(s.suffix) for s in samples)
    tokens = torch.full((b, lmax), PAD_ID, dtype=torch.long)
    patches = torch.zeros(b, 72, samples[0].prefix.patches.shape[1], dtype=dtype)
    lengths = torch.zeros(b, dtype=torch.long)
    targets = torch.full((b, lmax), -1, dtype=torch.long)
    has_action = torch.zeros(b, dtype=torch.bool)
    chunks = torch.zeros(b, horizon, 3, dtype=dtype)
    proprio = torch.zeros(b, 3, 3, dtype=dtype)
    for i, s in enumerate(samples):
        ids = list(s.prefix.ids) + list(s.suffix)
        tokens[i, :len(ids)] = torch.tensor(ids, dtype=torch.long)
        lengths[i] = len(ids)
        patches[i] = torch.as_tensor(s.prefix.patches, dtype=dtype)
        for pos, tok in s.targets:
            if pos >= lmax:
                raise AssemblerError("target beyond padded length")
            targets[i, pos] = tok
        if s.chunk is not None:
            has_action[i] = True
            chunks[i] = torch.as_tensor(s.chunk, dtype=dtype)
            proprio[i] = torch.as_tensor(s.proprio, dtype=dtype)
    return Batch(tokens=tokens, patches=patches, lengths=lengths,
                 logit_targets=targets, has_action=has_action, chunks=chunks,
                 proprio=proprio)
