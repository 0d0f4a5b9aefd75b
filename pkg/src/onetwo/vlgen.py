"""Synthetic vision-language corpus.

Three stages, all procedural: sample a tabletop layout with a textual
description, rasterize it through the world renderer with optional fisheye
and gripper-sprite augmentations, then attach instruction-reasoning pairs.
Grounding layouts carry 17 pairs (2 name / 5 spatial / 5 attribute /
5 semantic); plan layouts carry one high-level goal whose step list the
scripted expert can execute on the very same placements.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import reasoning, refs
from .catalog import Catalog, TaskSpec, default_catalog
from .episodes import DatasetError, _canonical, _decode_frame, _frame_id
from .expert import ANNOTATION_COUNTS, annotation_pairs, demonstrate
from .samples import VLSample
from .world import LayoutError, render, reset

VL_FORMAT_VERSION = 1
LAYOUT_ATTEMPTS = 1000
RECEIVERS = ("cooker", "strainer", "glass")

# description texture only; these words are never tokenized
_SURFACES = ("a pale kitchen table", "a dark counter top", "a tidy work bench",
             "a small side table", "a bright prep station")
_SETTINGS = ("under warm morning light", "beside a narrow window",
             "in a quiet corner", "under a cool ceiling lamp",
             "next to the sink")


class VlgenError(RuntimeError):
    pass


@dataclass(frozen=True)
class VLConfig:
    grounding: int = 600
    plans: int = 1000
    fisheye_p: float = 0.5
    gripper_p: float = 0.5
    fisheye_k: float = 0.4
    replay_sample: int = 50

    def __post_init__(self):
        if self.grounding < 0 or self.plans < 0:
            raise VlgenError("corpus counts must be non-negative")
        for p in (self.fisheye_p, self.gripper_p):
            if not 0.0 <= p <= 1.0:
                raise VlgenError("augmentation probabilities must be in [0, 1]")


@dataclass(frozen=True)
class Layout:
    seed: int
    task: TaskSpec               # reset(task, seed) realizes these placements
    description: str
    object_ids: tuple[str, ...]
    positions: dict
    target: str


@dataclass(frozen=True, eq=False)
class VLRecord:
    image: np.ndarray            # (48, 48, 3) uint8, augmentations applied
    category: str                # "grounding" | "long_horizon"
    instruction: str
    reasoning: str
    reference_type: Optional[str]
    fisheye: bool
    gripper: bool
    layout_seed: int
    target: Optional[str]


def _roster_rng(seed: int, attempt: int, salt: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, attempt, salt]))


def _describe(names: Sequence[str], rng: np.random.Generator) -> str:
    surface = _SURFACES[int(rng.integers(len(_SURFACES)))]
    setting = _SETTINGS[int(rng.integers(len(_SETTINGS)))]
    listed = " , ".join(names[:-1]) + f" and {names[-1]}"
    return f"{surface} with {listed} , {setting} ."


def sample_layout(seed: int, catalog: Catalog | None = None) -> Layout:
    """Rejection-sample a 3-7 object layout that passes the open-world
    annotation audit for at least one placed item."""
    catalog = catalog or default_catalog()
    pool = sorted(catalog.split_ids("vl"))
    for attempt in range(LAYOUT_ATTEMPTS):
        rng = _roster_rng(seed, attempt)
        n_items = int(rng.integers(2, 7))
        receiver = RECEIVERS[int(rng.integers(len(RECEIVERS)))]
        items = tuple(pool[int(i)] for i in
                      rng.choice(len(pool), size=n_items, replace=False))
        n_pours = int(rng.integers(2, min(4, n_items) + 1))
        style = refs.DISH_STYLES[int(rng.integers(len(refs.DISH_STYLES)))]
        noun = refs.DISH_NOUNS[int(rng.integers(len(refs.DISH_NOUNS)))]
        task = TaskSpec(
            id=f"vl_{seed}_{attempt}", kind="long_horizon",
            instruction=f"make the {style} {noun}",
            objects=(receiver,) + items, layout="random",
            goal=tuple({"kind": "pour", "object": oid, "dest": receiver}
                       for oid in items[:n_pours]))
        try:
            state = reset(task, seed, catalog=catalog)
        except LayoutError:
            continue
        entries = {oid: catalog.object(oid) for oid in state.objects}
        positions = {oid: tuple(obj.position) for oid, obj in state.objects.items()}
        target = None
        audit_rng = _roster_rng(seed, attempt, salt=1)
        for cand in (items[int(i)] for i in rng.permutation(n_items)):
            try:
                annotation_pairs(entries, positions, cand, "open_world", audit_rng)
            except LookupError:
                continue
            target = cand
            break
        if target is None:
            continue
        names = [catalog.object(oid).name for oid in state.objects]
        return Layout(seed=seed, task=task,
                      description=_describe(names, rng),
                      object_ids=tuple(state.objects), positions=positions,
                      target=target)
    raise VlgenError(f"no feasible layout for seed {seed} "
                     f"after {LAYOUT_ATTEMPTS} attempts")


# ---------------------------------------------------------------------------
# Image synthesis

def fisheye(image: np.ndarray, k: float) -> np.ndarray:
    """Radial warp r <- r(1 + k r^2) with bilinear resampling.

    Coordinates are normalized to the image center, so the center pixel is
    a fixed point and k = 0 reproduces the input exactly.
    """
    h, w = image.shape[:2]
    c = (w - 1) / 2.0
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    u = (xs - c) / c
    v = (ys - c) / c
    scale = 1.0 + k * (u * u + v * v)
    sx = np.clip(c + u * scale * c, 0.0, w - 1.0)
    sy = np.clip(c + v * scale * c, 0.0, h - 1.0)
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (sx - x0)[..., None]
    fy = (sy - y0)[..., None]
    img = image.astype(np.float64)
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return (top * (1 - fy) + bot * fy).astype(np.float32)


def _gripper_sprite() -> np.ndarray:
    # two downward jaws joined by a bar, same silhouette family as the
    # world gripper but drawn as a free-standing sprite
    mask = np.zeros((9, 12), dtype=bool)
    mask[0:2, :] = True
    mask[2:9, 0:2] = True
    mask[2:9, 10:12] = True
    return mask


def composite_gripper(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Paste the sprite at a random spot, brightness-matched to the scene."""
    out = image.copy()
    mask = _gripper_sprite()
    mh, mw = mask.shape
    y = int(rng.integers(image.shape[0] // 2, image.shape[0] - mh))
    x = int(rng.integers(0, image.shape[1] - mw))
    level = np.float32(np.clip(image.mean(), 0.15, 0.95))
    bar = np.zeros_like(mask)
    bar[0:2] = mask[0:2]
    patch = out[y:y + mh, x:x + mw]
    patch[mask] = level
    patch[bar] = np.float32(min(float(level) * 1.2, 1.0))  # brighter bar
    return out


def _augment(image: np.ndarray, seed: int, config: VLConfig):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 23]))
    fish = bool(rng.random() < config.fisheye_p)
    grip = bool(rng.random() < config.gripper_p)
    if fish:
        image = fisheye(image, config.fisheye_k)
    if grip:
        image = composite_gripper(image, rng)
    return image, fish, grip


def synthesize_image(layout: Layout, seed: int, config: VLConfig = VLConfig(),
                     catalog: Catalog | None = None) -> np.ndarray:
    """Render the layout's world state and apply the drawn augmentations."""
    catalog = catalog or default_catalog()
    state = reset(layout.task, layout.seed, catalog=catalog)
    image, _, _ = _augment(render(state, catalog), seed, config)
    return image


# ---------------------------------------------------------------------------
# Annotation

def _plan_for(layout: Layout, catalog: Catalog) -> list[str]:
    return [f"pour the {catalog.object(g['object']).name}"
            for g in layout.task.goal]


def annotate(layout: Layout, category: str, seed: int,
             config: VLConfig = VLConfig(),
             catalog: Catalog | None = None) -> list[VLRecord]:
    catalog = catalog or default_catalog()
    state = reset(layout.task, layout.seed, catalog=catalog)
    image_f, fish, grip = _augment(render(state, catalog), seed, config)
    image = np.round(np.clip(image_f, 0.0, 1.0) * 255.0).astype(np.uint8)

    if category == "grounding":
        text_rng = np.random.default_rng(np.random.SeedSequence([seed, 29]))
        entries = {oid: catalog.object(oid) for oid in layout.object_ids}
        pairs = annotation_pairs(entries, layout.positions, layout.target,
                                 "open_world", text_rng)
        types = [rt for rt, count in ANNOTATION_COUNTS["open_world"]
                 for _ in range(count)]
        return [VLRecord(image=image, category=category, instruction=instr,
                         reasoning=reason, reference_type=rt, fisheye=fish,
                         gripper=grip, layout_seed=layout.seed,
                         target=layout.target)
                for (instr, reason), rt in zip(pairs, types)]

    if category == "long_horizon":
        plan = _plan_for(layout, catalog)
        scene = [(catalog.object(oid).name, refs.cell_of(layout.positions[oid]))
                 for oid in layout.object_ids]
        content = reasoning.make_full(scene, plan, 0, plan[0])
        return [VLRecord(image=image, category=category,
                         instruction=layout.task.instruction,
                         reasoning=reasoning.serialize(content),
                         reference_type=None, fisheye=fish, gripper=grip,
                         layout_seed=layout.seed, target=None)]

    raise VlgenError(f"unknown category {category!r}")


def replay_plan(layout: Layout, catalog: Catalog | None = None) -> bool:
    """Run the scripted expert on the layout's task; True on success."""
    episode = demonstrate(layout.task, layout.seed,
                          catalog=catalog or default_catalog())
    return episode.success


def to_vl_samples(records: Sequence[VLRecord]) -> list[VLSample]:
    return [VLSample(image=r.image, instruction=r.instruction,
                     reasoning_text=r.reasoning, kind=r.category)
            for r in records]


# ---------------------------------------------------------------------------
# Corpus build and storage

def _record_payload(rec: VLRecord, blobs: dict) -> dict:
    raw = rec.image.tobytes()
    fid = _frame_id(raw)
    blobs[fid] = raw
    return {
        "image": fid,
        "category": rec.category,
        "instruction": rec.instruction,
        "reasoning": rec.reasoning,
        "reference_type": rec.reference_type,
        "fisheye": rec.fisheye,
        "gripper": rec.gripper,
        "layout_seed": rec.layout_seed,
        "target": rec.target,
    }


def _manifest_hash(manifest: dict) -> str:
    body = {k: v for k, v in manifest.items() if k != "hash"}
    return hashlib.sha1(_canonical(body)).hexdigest()


def build_corpus(config: VLConfig = VLConfig(), seed: int = 0,
                 out: str | Path | None = None,
                 catalog: Catalog | None = None):
    """Generate the full corpus; returns (records, manifest) and optionally
    writes them in the shared record-file container."""
    catalog = catalog or default_catalog()
    records: list[VLRecord] = []
    grounding_seeds = [seed + i for i in range(config.grounding)]
    plan_seeds = [seed + 500_000 + i for i in range(config.plans)]

    plan_layouts = []
    for ls in grounding_seeds:
        records.extend(annotate(sample_layout(ls, catalog), "grounding", ls,
                                config, catalog))
    for ls in plan_seeds:
        layout = sample_layout(ls, catalog)
        plan_layouts.append(layout)
        records.extend(annotate(layout, "long_horizon", ls, config, catalog))

    rng = np.random.default_rng(np.random.SeedSequence([seed, 31]))
    failures = []
    n_replay = min(config.replay_sample, len(plan_layouts))
    if n_replay:
        picks = rng.choice(len(plan_layouts), size=n_replay, replace=False)
        for i in sorted(int(p) for p in picks):
            if not replay_plan(plan_layouts[i], catalog):
                failures.append(plan_layouts[i].seed)

    n_ground = sum(1 for r in records if r.category == "grounding")
    manifest = {
        "format_version": VL_FORMAT_VERSION,
        "seed": seed,
        "config": dataclasses.asdict(config),
        "counts": {
            "grounding_layouts": config.grounding,
            "plan_layouts": config.plans,
            "grounding_records": n_ground,
            "plan_records": len(records) - n_ground,
            "records": len(records),
        },
        "augmentation_rates": {
            "fisheye": sum(r.fisheye for r in records) / max(len(records), 1),
            "gripper": sum(r.gripper for r in records) / max(len(records), 1),
        },
        "replay": {"sampled": n_replay, "failures": failures},
    }
    manifest["hash"] = _manifest_hash(manifest)
    if out is not None:
        write_corpus(records, manifest, out)
    return records, manifest


def write_corpus(records: Sequence[VLRecord], manifest: dict,
                 path: str | Path) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    blobs: dict[str, bytes] = {}
    lines = []
    for rec in records:
        payload = _record_payload(rec, blobs)
        crc = zlib.crc32(_canonical(payload))
        lines.append(json.dumps({"crc": crc, "payload": payload},
                                sort_keys=True, separators=(",", ":")))
    (root / "vl.jsonl").write_text("\n".join(lines) + ("\n" if lines else ""))
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    blob_dir = root / "blobs"
    blob_dir.mkdir(exist_ok=True)
    for fid, raw in blobs.items():
        target = blob_dir / f"{fid}.bin"
        if not target.exists():
            target.write_bytes(raw)
    return root


def load_corpus(path: str | Path):
    """Read a corpus back, verifying record checksums and blob digests."""
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError:
        raise DatasetError(f"{root}: no manifest.json")
    if manifest.get("format_version") != VL_FORMAT_VERSION:
        raise DatasetError(
            f"unsupported format_version {manifest.get('format_version')!r}")
    if manifest.get("hash") != _manifest_hash(manifest):
        raise DatasetError("manifest hash mismatch")
    text = (root / "vl.jsonl").read_text()
    lines = [ln for ln in text.split("\n") if ln]
    if len(lines) != manifest["counts"]["records"]:
        raise DatasetError(f"manifest says {manifest['counts']['records']} "
                           f"records, file has {len(lines)}")
    cache: dict[str, np.ndarray] = {}
    records = []
    for i, line in enumerate(lines):
        where = f"record {i}"
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{where}: bad json ({exc})")
        payload = rec["payload"]
        if zlib.crc32(_canonical(payload)) != rec["crc"]:
            raise DatasetError(f"{where}: checksum mismatch")
        fid = payload["image"]
        if fid not in cache:
            blob_path = root / "blobs" / f"{fid}.bin"
            if not blob_path.exists():
                raise DatasetError(f"{where}: missing blob {fid}")
            raw = blob_path.read_bytes()
            if _frame_id(raw) != fid:
                raise DatasetError(f"{where}: blob {fid} digest mismatch")
            cache[fid] = _decode_frame(raw, where)
        records.append(VLRecord(
            image=cache[fid], category=payload["category"],
            instruction=payload["instruction"], reasoning=payload["reasoning"],
            reference_type=payload["reference_type"],
            fisheye=payload["fisheye"], gripper=payload["gripper"],
            layout_seed=payload["layout_seed"], target=payload["target"]))
    return records, manifest
