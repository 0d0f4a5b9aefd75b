"""Synthetic vision-language corpus: layouts, image augments, annotation audit,
storage round trip."""
import json
import math
from collections import Counter

import numpy as np
import pytest

from onetwo import reasoning
from onetwo.catalog import default_catalog
from onetwo.episodes import DatasetError
from onetwo.expert import demonstrate
from onetwo.vlgen import (VLConfig, VlgenError, annotate, build_corpus,
                          composite_gripper, fisheye, load_corpus,
                          sample_layout, synthesize_image, to_vl_samples,
                          write_corpus)

CAT = default_catalog()

# geometric audit constants, frozen with the reference grammar
GAP, BAND = 0.05, 0.28


def _spatial_holds(rel, pos, anchor):
    dx, dy = pos[0] - anchor[0], pos[1] - anchor[1]
    if rel == "left of":
        return dx <= -GAP and abs(dy) <= BAND
    if rel == "right of":
        return dx >= GAP and abs(dy) <= BAND
    if rel == "behind":
        return dy <= -GAP and abs(dx) <= BAND
    if rel == "in front of":
        return dy >= GAP and abs(dx) <= BAND
    raise AssertionError(rel)


def _audit_satisfiers(instr, ref_type, entries, positions):
    """Decode a referring instruction back into a predicate and list every
    placed object that satisfies it.  Written against the instruction TEXT,
    independent of the generator's own uniqueness machinery."""
    if ref_type == "name":
        for head in ("pick up the ", "give me the "):
            if instr.startswith(head):
                name = instr[len(head):]
                return [oid for oid, e in entries.items() if e.name == name]
        raise AssertionError(f"unrecognized name phrase: {instr}")
    if ref_type == "attribute":
        assert instr.startswith("pick up the ") and instr.endswith(" object")
        words = instr[len("pick up the "):-len(" object")].split()
        out = []
        for oid, e in entries.items():
            slots = iter((e.size, e.color, e.shape))
            if all(w in slots for w in words):
                out.append(oid)
        return out
    if ref_type == "semantic":
        tag = instr.split(" for ", 1)[1]
        return [oid for oid, e in entries.items() if tag in e.tags]
    if ref_type == "spatial":
        body = instr[len("pick up the object "):]
        for rel in ("left of", "right of", "behind", "in front of",
                    "closest to"):
            head = rel + " the "
            if not body.startswith(head):
                continue
            aname = body[len(head):]
            anchors = [oid for oid, e in entries.items() if e.name == aname]
            assert len(anchors) == 1, f"anchor name not unique: {aname}"
            a = anchors[0]
            if rel == "closest to":
                others = [oid for oid in entries if oid != a]
                return [min(others, key=lambda oid: math.dist(
                    positions[oid], positions[a]))]
            return [oid for oid in entries
                    if oid != a and _spatial_holds(rel, positions[oid],
                                                   positions[a])]
        raise AssertionError(f"unrecognized spatial phrase: {instr}")
    raise AssertionError(ref_type)


def _entries(layout):
    return {oid: CAT.object(oid) for oid in layout.object_ids}


def test_layout_seed_determinism():
    a = sample_layout(11)
    b = sample_layout(11)
    assert a.description == b.description
    assert a.object_ids == b.object_ids
    assert a.positions == b.positions
    assert a.target == b.target


def test_layout_size_and_separation():
    for seed in range(6):
        layout = sample_layout(seed)
        assert 3 <= len(layout.object_ids) <= 7
        pts = [np.asarray(layout.positions[oid]) for oid in layout.object_ids]
        for i in range(len(pts)):
            for j in range(i + 1, len(pts)):
                assert float(np.linalg.norm(pts[i] - pts[j])) >= 0.12
        assert layout.target in layout.object_ids


def test_description_lists_exactly_the_placed_objects():
    layout = sample_layout(4)
    names = [CAT.object(oid).name for oid in layout.object_ids]
    listed = " , ".join(names[:-1]) + f" and {names[-1]}"
    assert listed in layout.description
    assert layout.description.endswith(" .")


def test_grounding_annotation_split_and_texture():
    layout = sample_layout(2)
    records = annotate(layout, "grounding", 2)
    assert len(records) == 17
    assert Counter(r.reference_type for r in records) == {
        "name": 2, "attribute": 5, "semantic": 5, "spatial": 5}
    instructions = [r.instruction for r in records]
    assert len(set(instructions)) == 17
    target_name = CAT.object(layout.target).name
    for rec in records:
        content = reasoning.parse(rec.reasoning)
        assert content.next_step == f"pick up the {target_name}"
        assert target_name in rec.reasoning
        assert rec.category == "grounding"
        assert rec.image.dtype == np.uint8 and rec.image.shape == (48, 48, 3)


def test_every_grounding_record_passes_the_single_satisfier_audit():
    for seed in (0, 3, 7, 12):
        layout = sample_layout(seed)
        entries = _entries(layout)
        for rec in annotate(layout, "grounding", seed):
            sat = _audit_satisfiers(rec.instruction, rec.reference_type,
                                    entries, layout.positions)
            assert sat == [rec.target], (
                f"seed {seed}: {rec.instruction!r} -> {sat}")


def test_plan_record_parses_and_replays():
    for seed in (1, 5, 9):
        layout = sample_layout(seed)
        records = annotate(layout, "long_horizon", seed)
        assert len(records) == 1
        rec = records[0]
        assert rec.instruction == layout.task.instruction
        content = reasoning.parse(rec.reasoning)
        want = tuple(f"pour the {CAT.object(g['object']).name}"
                     for g in layout.task.goal)
        assert content.plan == want
        assert content.next_step == want[0]
        assert content.history == ()
        episode = demonstrate(layout.task, layout.seed)
        assert episode.success


def test_fisheye_zero_k_is_identity():
    layout = sample_layout(0)
    img = synthesize_image(layout, 0, VLConfig(fisheye_p=0.0, gripper_p=0.0))
    assert np.array_equal(fisheye(img, 0.0), img)


def test_fisheye_center_is_a_fixed_point():
    rng = np.random.default_rng(3)
    img = rng.random((49, 49, 3)).astype(np.float32)
    warped = fisheye(img, 0.4)
    assert np.array_equal(warped[24, 24], img[24, 24])
    assert not np.array_equal(warped, img)


def test_gripper_composite_touches_only_sprite_pixels():
    rng = np.random.default_rng(5)
    img = rng.random((48, 48, 3)).astype(np.float32)
    out = composite_gripper(img, np.random.default_rng(6))
    changed = np.argwhere((out != img).any(axis=2))
    assert len(changed)
    y0, x0 = changed.min(axis=0)
    y1, x1 = changed.max(axis=0)
    assert y1 - y0 + 1 <= 9 and x1 - x0 + 1 <= 12
    # jaw pixels carry the scene's mean brightness, clipped
    level = np.float32(np.clip(img.mean(), 0.15, 0.95))
    bar = np.float32(min(float(level) * 1.2, 1.0))
    vals = {float(v) for v in np.unique(out[(out != img).any(axis=2)])}
    assert vals <= {float(level), float(bar)}


def test_augmentations_never_touch_text():
    layout = sample_layout(6)
    plain = annotate(layout, "grounding", 6,
                     VLConfig(fisheye_p=0.0, gripper_p=0.0))
    warped = annotate(layout, "grounding", 6,
                      VLConfig(fisheye_p=1.0, gripper_p=1.0))
    for a, b in zip(plain, warped):
        assert a.instruction == b.instruction
        assert a.reasoning == b.reasoning
        assert a.reference_type == b.reference_type
        assert (a.fisheye, a.gripper) == (False, False)
        assert (b.fisheye, b.gripper) == (True, True)
    assert not np.array_equal(plain[0].image, warped[0].image)


def test_small_corpus_counts_and_manifest_stability(tmp_path):
    cfg = VLConfig(grounding=2, plans=3, replay_sample=3)
    records, manifest = build_corpus(cfg, seed=0)
    assert len(records) == 2 * 17 + 3
    counts = manifest["counts"]
    assert counts["records"] == len(records)
    assert counts["grounding_records"] == 34
    assert counts["plan_records"] == 3
    assert manifest["replay"] == {"sampled": 3, "failures": []}
    for rate in manifest["augmentation_rates"].values():
        assert 0.0 <= rate <= 1.0
    _, again = build_corpus(cfg, seed=0)
    assert again["hash"] == manifest["hash"]


def test_default_corpus_arithmetic():
    cfg = VLConfig()
    assert (cfg.grounding, cfg.plans) == (600, 1000)
    assert cfg.grounding * 17 + cfg.plans == 11_200
    assert cfg.grounding / cfg.plans == 6_000 / 10_000


def test_corpus_round_trip_and_corruption(tmp_path):
    cfg = VLConfig(grounding=1, plans=1, replay_sample=1)
    records, manifest = build_corpus(cfg, seed=2, out=tmp_path)
    loaded, manifest2 = load_corpus(tmp_path)
    assert manifest2["hash"] == manifest["hash"]
    assert len(loaded) == len(records)
    for a, b in zip(records, loaded):
        assert np.array_equal(a.image, b.image)
        assert (a.instruction, a.reasoning, a.reference_type) == \
               (b.instruction, b.reasoning, b.reference_type)
        assert (a.fisheye, a.gripper, a.layout_seed, a.target) == \
               (b.fisheye, b.gripper, b.layout_seed, b.target)

    jsonl = tmp_path / "vl.jsonl"
    text = jsonl.read_text()
    jsonl.write_text(text.replace("pick", "kick", 1))
    with pytest.raises(DatasetError, match="checksum"):
        load_corpus(tmp_path)
    jsonl.write_text(text)

    blob = next((tmp_path / "blobs").iterdir())
    raw = blob.read_bytes()
    blob.write_bytes(raw[:-1] + bytes([raw[-1] ^ 1]))
    with pytest.raises(DatasetError, match="digest"):
        load_corpus(tmp_path)
    blob.write_bytes(raw)

    mpath = tmp_path / "manifest.json"
    mani = json.loads(mpath.read_text())
    mani["seed"] = 99
    mpath.write_text(json.dumps(mani, indent=1))
    with pytest.raises(DatasetError, match="manifest hash"):
        load_corpus(tmp_path)
    mani["seed"] = 2
    mani["format_version"] = 99
    mpath.write_text(json.dumps(mani, indent=1))
    with pytest.raises(DatasetError, match="format_version"):
        load_corpus(tmp_path)


def test_to_vl_samples_field_mapping():
    layout = sample_layout(8)
    records = annotate(layout, "long_horizon", 8)
    samples = to_vl_samples(records)
    assert len(samples) == 1
    assert samples[0].instruction == records[0].instruction
    assert samples[0].reasoning_text == records[0].reasoning
    assert samples[0].kind == "long_horizon"
    assert np.array_equal(samples[0].image, records[0].image)


def test_config_validation():
    with pytest.raises(VlgenError):
        VLConfig(grounding=-1)
    with pytest.raises(VlgenError):
        VLConfig(fisheye_p=1.5)
    with pytest.raises(VlgenError):
        VLConfig(gripper_p=-0.1)
