"""Episode records and the on-disk dataset format.

An episode is the full trace of one demonstration: frames, actions,
proprioception, the interval structure (alternating reasoning and acting
spans), world events and the instruction-log entries that arrived along the
way.  Datasets are a manifest plus one JSON line per episode; every record
carries a checksum over its canonical serialization, and rasters live in
content-addressed sidecar blobs (or inline base64) so identical frames are
stored once.
"""
from __future__ import annotations

import base64
import hashlib
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FRAME_SHAPE = (48, 48, 3)
FRAME_BYTES = 48 * 48 * 3
FORMAT_VERSION = 1

INTERVAL_KINDS = ("reasoning", "acting")
TRIGGERS = ("start", "completion", "slip", "human")


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class Interval:
    """One span of ticks.  end is exclusive; spans tile [0, T) exactly.

    text holds the serialized reasoning for reasoning spans and the
    governing directive (the reasoning's next step) for acting spans.
    log_seen counts instruction-log entries visible at the span's start,
    including any robot question the governing reasoning just posted.
    trigger names what opened a reasoning span; acting spans carry None.
    """

    kind: str
    start: int
    end: int
    text: str
    log_seen: int
    trigger: str | None = None

    def __post_init__(self):
        if self.kind not in INTERVAL_KINDS:
            raise ValueError(f"bad interval kind {self.kind!r}")
        if self.kind == "reasoning" and self.trigger not in TRIGGERS:
            raise ValueError(f"bad trigger {self.trigger!r}")
        if not 0 <= self.start < self.end:
            raise ValueError(f"bad span [{self.start}, {self.end})")


@dataclass
class Episode:
    task_id: str
    seed: int
    hazard: float
    choice: str | None
    instruction: str
    intervals: tuple[Interval, ...]
    actions: np.ndarray              # (T, 3) float64
    proprio: np.ndarray              # (T+1, 3) float64
    frames: list[np.ndarray]         # T+1 rasters, uint8 (48, 48, 3)
    events: tuple[dict, ...]
    log: tuple[dict, ...]            # {tick, order, source, text}
    success: bool
    progress: int
    provenance: dict = field(default_factory=dict)

    @property
    def length(self) -> int:
        return int(self.actions.shape[0])

    def check(self) -> None:
        T = self.length
        if self.proprio.shape != (T + 1, 3):
            raise ValueError(f"proprio shape {self.proprio.shape} for T={T}")
        if len(self.frames) != T + 1:
            raise ValueError(f"{len(self.frames)} frames for T={T}")
        cursor = 0
        for iv in self.intervals:
            if iv.start != cursor:
                raise ValueError(f"interval gap at tick {cursor}")
            cursor = iv.end
        if cursor != T:
            raise ValueError(f"intervals cover [0, {cursor}), episode has T={T}")
        for fr in self.frames:
            if fr.dtype != np.uint8 or fr.shape != FRAME_SHAPE:
                raise ValueError("frames must be uint8 (48, 48, 3)")


def reasoning_intervals(episode: Episode) -> list[Interval]:
    return [iv for iv in episode.intervals if iv.kind == "reasoning"]


def acting_intervals(episode: Episode) -> list[Interval]:
    return [iv for iv in episode.intervals if iv.kind == "acting"]


def episodes_equal(a: Episode, b: Episode) -> bool:
    """Bit-exact comparison, used by the round-trip tests."""
    if (a.task_id, a.seed, a.hazard, a.choice, a.instruction) != \
       (b.task_id, b.seed, b.hazard, b.choice, b.instruction):
        return False
    if a.intervals != b.intervals or a.events != b.events or a.log != b.log:
        return False
    if (a.success, a.progress, a.provenance) != (b.success, b.progress, b.provenance):
        return False
    if a.actions.shape != b.actions.shape or not np.array_equal(a.actions, b.actions):
        return False
    if not np.array_equal(a.proprio, b.proprio):
        return False
    if len(a.frames) != len(b.frames):
        return False
    return all(np.array_equal(x, y) for x, y in zip(a.frames, b.frames))


# ---------------------------------------------------------------------------
# Serialization


def _frame_id(raw: bytes) -> str:
    return hashlib.sha1(raw).hexdigest()


def _canonical(payload: dict) -> bytes:
    return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()


def _payload(episode: Episode, mode: str, blobs: dict[str, bytes]) -> dict:
    frames = []
    for fr in episode.frames:
        raw = fr.tobytes()
        if mode == "blobs":
            fid = _frame_id(raw)
            blobs[fid] = raw
            frames.append(fid)
        else:
            frames.append(base64.b64encode(raw).decode("ascii"))
    return {
        "task_id": episode.task_id,
        "seed": episode.seed,
        "hazard": episode.hazard,
        "choice": episode.choice,
        "instruction": episode.instruction,
        "intervals": [
            {"kind": iv.kind, "start": iv.start, "end": iv.end, "text": iv.text,
             "log_seen": iv.log_seen, "trigger": iv.trigger}
            for iv in episode.intervals
        ],
        "actions": episode.actions.tolist(),
        "proprio": episode.proprio.tolist(),
        "frames": frames,
        "events": list(episode.events),
        "log": list(episode.log),
        "success": episode.success,
        "progress": episode.progress,
        "provenance": episode.provenance,
    }


def write_dataset(episodes: list[Episode], path: str | Path, mode: str = "blobs") -> Path:
    if mode not in ("blobs", "inline"):
        raise ValueError(f"unknown storage mode {mode!r}")
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    blobs: dict[str, bytes] = {}
    lines = []
    for ep in episodes:
        ep.check()
        payload = _payload(ep, mode, blobs)
        crc = zlib.crc32(_canonical(payload))
        lines.append(json.dumps({"crc": crc, "payload": payload},
                                sort_keys=True, separators=(",", ":")))
    (root / "episodes.jsonl").write_text("\n".join(lines) + ("\n" if lines else ""))
    manifest = {"format_version": FORMAT_VERSION, "mode": mode, "count": len(episodes)}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    if mode == "blobs":
        blob_dir = root / "blobs"
        blob_dir.mkdir(exist_ok=True)
        for fid, raw in blobs.items():
            target = blob_dir / f"{fid}.bin"
            if not target.exists():
                target.write_bytes(raw)
    return root


def _decode_frame(raw: bytes, where: str) -> np.ndarray:
    if len(raw) != FRAME_BYTES:
        raise DatasetError(f"{where}: raster is {len(raw)} bytes, want {FRAME_BYTES}")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(FRAME_SHAPE)
    arr.flags.writeable = False
    return arr


def load_dataset(path: str | Path) -> list[Episode]:
    """Read a dataset back, verifying every record checksum and blob digest."""
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError:
        raise DatasetError(f"{root}: no manifest.json")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DatasetError(f"unsupported format_version {manifest.get('format_version')!r}")
    mode = manifest["mode"]
    cache: dict[str, np.ndarray] = {}

    def frame_from(token: str, where: str) -> np.ndarray:
        if token in cache:
            return cache[token]
        if mode == "blobs":
            blob_path = root / "blobs" / f"{token}.bin"
            if not blob_path.exists():
                raise DatasetError(f"{where}: missing blob {token}")
            raw = blob_path.read_bytes()
            if _frame_id(raw) != token:
                raise DatasetError(f"{where}: blob {token} content digest mismatch")
        else:
            raw = base64.b64decode(token.encode("ascii"))
        arr = _decode_frame(raw, where)
        cache[token] = arr
        return arr

    episodes = []
    text = (root / "episodes.jsonl").read_text()
    records = [ln for ln in text.split("\n") if ln]
    if len(records) != manifest["count"]:
        raise DatasetError(f"manifest says {manifest['count']} episodes, file has {len(records)}")
    for i, line in enumerate(records):
        where = f"record {i}"
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{where}: bad JSON: {exc}") from exc
        payload = rec["payload"]
        if zlib.crc32(_canonical(payload)) != rec["crc"]:
            raise DatasetError(f"{where}: checksum mismatch")
        episodes.append(Episode(
            task_id=payload["task_id"],
            seed=payload["seed"],
            hazard=payload["hazard"],
            choice=payload["choice"],
            instruction=payload["instruction"],
            intervals=tuple(Interval(**iv) for iv in payload["intervals"]),
            actions=np.asarray(payload["actions"], dtype=np.float64).reshape(-1, 3),
            proprio=np.asarray(payload["proprio"], dtype=np.float64).reshape(-1, 3),
            frames=[frame_from(tok, where) for tok in payload["frames"]],
            events=tuple(payload["events"]),
            log=tuple(payload["log"]),
            success=payload["success"],
            progress=payload["progress"],
            provenance=payload["provenance"],
        ))
    return episodes
