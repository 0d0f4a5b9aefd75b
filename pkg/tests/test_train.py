"""Optimizer loop: descent, seeding, co-training mix, divergence, checkpoints."""
import math

import numpy as np
import pytest
import torch

from onetwo.expert import demonstrate
from onetwo.model import ModelConfig, build_model, forward
from onetwo.samples import (TrainingSample, VLSample, assemble_dataset,
                            collate, vl_training_sample)
from onetwo.textcodec import (BOA_ID, BOR_ID, EOS_ID, SPECIALS, Vocab,
                              assemble_prefix, build_vocab, encode)
from onetwo.train import (CheckpointError, DivergenceError, TrainConfig,
                          TrainError, batch_loss, decision_accuracy,
                          load_checkpoint, lr_at, metrics_csv,
                          save_checkpoint, train)

MICRO_WORDS = ("a", "b", "c", "d", "e", "f", "g", "h", "w")


@pytest.fixture(scope="module")
def micro_vocab():
    return Vocab(tokens=SPECIALS + MICRO_WORDS)


@pytest.fixture(scope="module")
def micro_cfg(micro_vocab):
    return ModelConfig(vocab_size=micro_vocab.size, width=16, depth=1,
                       heads=2, expert_depth=1, expert_heads=2, max_seq=128,
                       dtype="float64")


def _rand_img(rng):
    return (rng.integers(0, 256, (48, 48, 3)) / 255).astype(np.float32)


def _micro_samples(micro_vocab, seed=0):
    """Two text rows and two action rows over the toy vocabulary."""
    rng = np.random.default_rng(seed)
    out = []
    for text in ("c d e", "g h"):
        p = assemble_prefix(micro_vocab, _rand_img(rng), _rand_img(rng),
                            "a b", (), None)
        suffix = (BOR_ID, *encode(micro_vocab, text), EOS_ID)
        out.append(TrainingSample(
            pattern="R-supervise", task_id="t", seed=seed, tick=0, prefix=p,
            suffix=suffix,
            targets=tuple((p.decision_slot - 1 + j, tok)
                          for j, tok in enumerate(suffix)),
            decision_target=BOR_ID, chunk=None, proprio=None))
    for k in range(2):
        p = assemble_prefix(micro_vocab, _rand_img(rng), _rand_img(rng),
                            "f g", (), "c d")
        out.append(TrainingSample(
            pattern="A-acting", task_id="t", seed=seed, tick=4 * (k + 1),
            prefix=p, suffix=(BOA_ID,),
            targets=((p.decision_slot - 1, BOA_ID),), decision_target=BOA_ID,
            chunk=rng.uniform(-1, 1, (8, 3)), proprio=rng.normal(size=(3, 3))))
    return out


def _micro_vl(micro_vocab, n=3):
    rng = np.random.default_rng(99)
    return [vl_training_sample(VLSample(image=_rand_img(rng),
                                        instruction="a b",
                                        reasoning_text="c d"), micro_vocab)
            for _ in range(n)]


def test_short_run_descends_on_small_episode_set():
    vocab = build_vocab()
    eps = [demonstrate("pick_single", s) for s in range(5)]
    samples = assemble_dataset(eps, vocab)
    cfg = ModelConfig(vocab_size=vocab.size, width=32, depth=1, heads=2,
                      expert_depth=1, expert_heads=2)
    model = build_model(cfg, seed=0)
    res = train(model, vocab, samples,
                config=TrainConfig(steps=200, seed=0))
    first = res.metrics[0][1] + res.metrics[0][2]
    last = res.metrics[-1][1] + res.metrics[-1][2]
    assert last < first
    assert len(res.metrics) == 200


def test_same_seed_reproduces_metrics_bit_exactly(micro_vocab, micro_cfg):
    samples = _micro_samples(micro_vocab)
    runs = []
    for _ in range(2):
        model = build_model(micro_cfg, seed=5)
        res = train(model, micro_vocab, samples,
                    config=TrainConfig(steps=25, batch_size=4, seed=7))
        runs.append((res.metrics, model.state_dict()))
    assert runs[0][0] == runs[1][0]
    for key in runs[0][1]:
        assert torch.equal(runs[0][1][key], runs[1][1][key])

    other = build_model(micro_cfg, seed=5)
    res3 = train(other, micro_vocab, samples,
                 config=TrainConfig(steps=25, batch_size=4, seed=8))
    assert res3.metrics != runs[0][0]


def test_vl_ratio_is_inert_without_vl_rows(micro_vocab, micro_cfg):
    samples = _micro_samples(micro_vocab)
    states = []
    for ratio in (1.0, 0.25):
        model = build_model(micro_cfg, seed=5)
        res = train(model, micro_vocab, samples, vl=(),
                    config=TrainConfig(steps=20, batch_size=4, seed=3,
                                       vl_ratio=ratio))
        states.append((metrics_csv(res.metrics), model.state_dict()))
    assert states[0][0] == states[1][0]
    for key in states[0][1]:
        assert torch.equal(states[0][1][key], states[1][1][key])


def test_vl_rows_enter_batches_only_at_positive_ratio(micro_vocab, micro_cfg):
    samples = _micro_samples(micro_vocab)
    vl = _micro_vl(micro_vocab)
    outs = {}
    for ratio in (0.0, 1.0):
        model = build_model(micro_cfg, seed=5)
        res = train(model, micro_vocab, samples, vl=vl,
                    config=TrainConfig(steps=20, batch_size=4, seed=3,
                                       vl_ratio=ratio))
        outs[ratio] = res.metrics
    robot_only = build_model(micro_cfg, seed=5)
    base = train(robot_only, micro_vocab, samples,
                 config=TrainConfig(steps=20, batch_size=4, seed=3))
    assert outs[0.0] == base.metrics
    assert outs[1.0] != base.metrics


def test_divergence_aborts_and_restores_last_checkpoint(micro_vocab, micro_cfg,
                                                        tmp_path):
    samples = _micro_samples(micro_vocab)
    model = build_model(micro_cfg, seed=2)
    cfg = TrainConfig(steps=50, batch_size=4, seed=0, optimizer="sgd",
                      lr=1e5, checkpoint_every=1)
    with pytest.raises(DivergenceError) as err:
        train(model, micro_vocab, samples, config=cfg, out_dir=tmp_path)
    assert err.value.step >= 1
    assert len(err.value.metrics) >= 1
    # the in-memory model must match the checkpoint file left on disk
    loaded, _, meta = load_checkpoint(tmp_path / "checkpoint.pt")
    live = model.state_dict()
    for key, val in loaded.state_dict().items():
        assert torch.equal(val, live[key])
    assert (tmp_path / "metrics.csv").exists()


def test_zero_flow_loss_when_no_action_rows(micro_vocab, micro_cfg):
    model = build_model(micro_cfg, seed=4)
    text_only = [s for s in _micro_samples(micro_vocab) if s.chunk is None]
    batch = collate(text_only, dtype=torch.float64)
    tau = torch.full((batch.size,), 0.5, dtype=torch.float64)
    eps = torch.randn(batch.size, 8, 3, dtype=torch.float64)
    total, tl, fl, _ = batch_loss(model, batch, tau, eps)
    assert float(fl.detach()) == 0.0
    assert float(total.detach()) == float(tl.detach())


def test_lr_schedule_cosine_endpoints():
    cfg = TrainConfig(steps=100, lr=2e-3)
    assert lr_at(0, cfg) == 2e-3
    assert lr_at(100, cfg) == 0.0
    assert math.isclose(lr_at(50, cfg), 1e-3, rel_tol=1e-12)


def test_metrics_csv_shape(micro_vocab, micro_cfg):
    model = build_model(micro_cfg, seed=1)
    res = train(model, micro_vocab, _micro_samples(micro_vocab),
                config=TrainConfig(steps=6, batch_size=4, seed=1))
    text = metrics_csv(res.metrics)
    lines = text.strip().split("\n")
    assert lines[0] == "step,text_loss,flow_loss,decision_acc"
    assert len(lines) == 7
    for row, line in zip(res.metrics, lines[1:]):
        step, tl, fl, acc = line.split(",")
        assert int(step) == row[0]
        # repr round trip keeps the floats bit-exact
        assert float(tl) == row[1] and float(fl) == row[2]
        assert float(acc) == row[3] or (math.isnan(float(acc))
                                        and math.isnan(row[3]))


def test_checkpoint_round_trip_preserves_outputs(micro_vocab, micro_cfg,
                                                 tmp_path):
    samples = _micro_samples(micro_vocab)
    model = build_model(micro_cfg, seed=6)
    train(model, micro_vocab, samples,
          config=TrainConfig(steps=5, batch_size=4, seed=6), out_dir=tmp_path)
    loaded, vocab2, meta = load_checkpoint(tmp_path / "checkpoint.pt")
    assert meta["step"] == 5
    assert vocab2.hash == micro_vocab.hash
    live = model.state_dict()
    for key, val in loaded.state_dict().items():
        assert torch.equal(val, live[key])
    probe = samples[0]
    _, logits_a, _ = forward(model, probe.prefix)
    _, logits_b, _ = forward(loaded, probe.prefix)
    assert torch.equal(logits_a, logits_b)


def test_checkpoint_rejects_tampering(micro_vocab, micro_cfg, tmp_path):
    model = build_model(micro_cfg, seed=0)
    path = tmp_path / "ckpt.pt"
    save_checkpoint(path, model, micro_vocab, 3)

    payload = torch.load(path, map_location="cpu", weights_only=True)
    payload["version"] = 0
    torch.save(payload, path)
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)

    save_checkpoint(path, model, micro_vocab, 3)
    payload = torch.load(path, map_location="cpu", weights_only=True)
    payload["config_hash"] = "0" * 40
    torch.save(payload, path)
    with pytest.raises(CheckpointError, match="config hash"):
        load_checkpoint(path)

    save_checkpoint(path, model, micro_vocab, 3)
    payload = torch.load(path, map_location="cpu", weights_only=True)
    payload["vocab_hash"] = "0" * 40
    torch.save(payload, path)
    with pytest.raises(CheckpointError, match="vocabulary hash"):
        load_checkpoint(path)

    path.write_bytes(b"garbage")
    with pytest.raises(CheckpointError, match="unreadable"):
        load_checkpoint(path)


def test_config_validation():
    with pytest.raises(TrainError):
        TrainConfig(steps=0)
    with pytest.raises(TrainError):
        TrainConfig(batch_size=0)
    with pytest.raises(TrainError):
        TrainConfig(optimizer="adagrad")
    with pytest.raises(TrainError):
        TrainConfig(vl_ratio=-0.5)


def test_empty_robot_set_rejected(micro_vocab, micro_cfg):
    model = build_model(micro_cfg, seed=0)
    with pytest.raises(TrainError, match="empty"):
        train(model, micro_vocab, [])


def test_decision_accuracy_needs_decision_rows(micro_vocab, micro_cfg):
    model = build_model(micro_cfg, seed=0)
    rng = np.random.default_rng(0)
    p = assemble_prefix(micro_vocab, _rand_img(rng), _rand_img(rng),
                        "a b", (), "c d")
    stale = TrainingSample(
        pattern="A-stale-R", task_id="t", seed=0, tick=0, prefix=p,
        suffix=(BOA_ID,), targets=(), decision_target=None,
        chunk=rng.uniform(-1, 1, (8, 3)), proprio=rng.normal(size=(3, 3)))
    with pytest.raises(TrainError, match="decision"):
        decision_accuracy(model, [stale])
    # and a scored set returns a rate in [0, 1]
    acc = decision_accuracy(model, _micro_samples(micro_vocab))
    assert 0.0 <= acc <= 1.0
