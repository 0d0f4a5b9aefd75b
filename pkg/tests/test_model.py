"""Network contracts: shapes, causality, losses, sampler, gradients."""
import math

import numpy as np
import pytest
import torch

from onetwo.model import (EULER_STEPS, ModelConfig, NumericsError, Policy,
                          build_model, flow_loss, forward, sample_actions,
                          text_loss)
from onetwo.samples import Batch, collate
from onetwo.textcodec import (BOA_ID, BOR_ID, EOS_ID, SEP_ID, SPECIALS, Vocab,
                              assemble_prefix, build_vocab, encode)

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


def _micro_prefix(micro_vocab, rng, instruction="a b", log=(), reasoning=None):
    return assemble_prefix(micro_vocab, _rand_img(rng), _rand_img(rng),
                           instruction, log, reasoning)


def test_default_model_under_param_cap():
    vocab = build_vocab()
    model = build_model(ModelConfig(vocab_size=vocab.size), seed=0)
    assert model.param_count() < 5_000_000


def test_oversized_model_rejected():
    with pytest.raises(ValueError, match="parameter count"):
        Policy(ModelConfig(vocab_size=1024, width=512, depth=12, heads=8))


def test_build_deterministic(micro_cfg):
    a = build_model(micro_cfg, seed=3)
    b = build_model(micro_cfg, seed=3)
    for (na, pa), (nb, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert na == nb and torch.equal(pa, pb)


def test_forward_shapes_and_determinism(micro_vocab, micro_cfg):
    rng = np.random.default_rng(0)
    model = build_model(micro_cfg, seed=0)
    p = _micro_prefix(micro_vocab, rng)
    d1, t1, v1 = forward(model, p)
    d2, t2, v2 = forward(model, p)
    assert d1.shape == (micro_vocab.size,)
    assert t1.shape == (len(p.ids), micro_vocab.size)
    assert v1 is None and v2 is None
    assert torch.equal(d1, d2) and torch.equal(t1, t2)
    prop = rng.normal(size=(3, 3))
    x = rng.normal(size=(8, 3))
    _, _, v = forward(model, p, prop, 0.5, x, suffix_ids=(BOA_ID,))
    assert v.shape == (8, 3)


def test_fresh_velocity_head_emits_zero_field(micro_vocab, micro_cfg):
    rng = np.random.default_rng(1)
    model = build_model(micro_cfg, seed=1)
    p = _micro_prefix(micro_vocab, rng)
    _, _, v = forward(model, p, rng.normal(size=(3, 3)), 0.3,
                      rng.normal(size=(8, 3)), suffix_ids=(BOA_ID,))
    assert torch.equal(v, torch.zeros(8, 3, dtype=torch.float64))


def test_causality_by_perturbation(micro_vocab, micro_cfg):
    rng = np.random.default_rng(2)
    model = build_model(micro_cfg, seed=2)
    p = _micro_prefix(micro_vocab, rng, reasoning="c d")
    base = (BOR_ID, micro_vocab.id("e"), micro_vocab.id("f"), EOS_ID)
    bent = (BOR_ID, micro_vocab.id("e"), micro_vocab.id("h"), EOS_ID)
    _, t_base, _ = forward(model, p, suffix_ids=base)
    _, t_bent, _ = forward(model, p, suffix_ids=bent)
    flip = len(p.ids) + 2
    assert torch.equal(t_base[:flip], t_bent[:flip])
    assert not torch.equal(t_base[flip:], t_bent[flip:])


def test_padding_rows_do_not_leak(micro_vocab, micro_cfg):
    rng = np.random.default_rng(3)
    model = build_model(micro_cfg, seed=3)
    short = _micro_prefix(micro_vocab, rng, instruction="a")
    long = _micro_prefix(micro_vocab, rng, instruction="a b c d e f g h")
    def run(prefixes):
        lmax = max(len(p.ids) for p in prefixes)
        tokens = torch.full((len(prefixes), lmax), 3, dtype=torch.long)
        patches = torch.zeros(len(prefixes), 72, 192, dtype=torch.float64)
        lengths = torch.tensor([len(p.ids) for p in prefixes])
        for i, p in enumerate(prefixes):
            tokens[i, :len(p.ids)] = torch.tensor(p.ids)
            patches[i] = torch.as_tensor(p.patches, dtype=torch.float64)
        return model(tokens, patches, lengths)
    alone = run([short])
    padded = run([short, long])
    n = len(short.ids)
    assert torch.allclose(alone.text_logits[0, :n], padded.text_logits[0, :n],
                          atol=1e-12, rtol=0)


def test_text_loss_analytic_cases():
    logits = torch.zeros(1, 4, 1024, dtype=torch.float64)
    targets = torch.full((1, 4), -1, dtype=torch.long)
    targets[0, 1] = 7
    loss = text_loss(logits, targets)
    assert math.isclose(loss.item(), math.log(1024), rel_tol=1e-12)

    hot = torch.full((1, 2, 16), -1e4, dtype=torch.float64)
    hot[0, 0, 5] = 1e4
    t2 = torch.tensor([[5, -1]])
    assert text_loss(hot, t2).item() < 1e-12

    assert text_loss(logits, torch.full((1, 4), -1)).item() == 0.0


def test_flow_loss_zero_velocity_is_mean_square(micro_vocab, micro_cfg):
    rng = np.random.default_rng(4)
    model = build_model(micro_cfg, seed=4)
    p = _micro_prefix(micro_vocab, rng)
    a = rng.normal(size=(8, 3))
    eps = rng.normal(size=(8, 3))
    loss = flow_loss(model, p, rng.normal(size=(3, 3)), a, eps, 0.4)
    assert math.isclose(loss.item(), ((a - eps) ** 2).mean(), rel_tol=1e-12)


def test_flow_loss_optimal_field_is_zero(micro_vocab, micro_cfg, monkeypatch):
    rng = np.random.default_rng(5)
    model = build_model(micro_cfg, seed=5)
    p = _micro_prefix(micro_vocab, rng)
    a = rng.normal(size=(8, 3))
    eps = rng.normal(size=(8, 3))
    target = torch.as_tensor(a - eps, dtype=torch.float64).unsqueeze(0)
    monkeypatch.setattr(model.expert, "forward",
                        lambda memory, pad, prop, tau, x: target)
    for tau in (0.001, 0.25, 0.999):
        assert flow_loss(model, p, np.zeros((3, 3)), a, eps, tau).item() == 0.0


def test_flow_loss_rejects_tau_outside_range(micro_vocab, micro_cfg):
    rng = np.random.default_rng(6)
    model = build_model(micro_cfg, seed=6)
    p = _micro_prefix(micro_vocab, rng)
    args = (np.zeros((3, 3)), np.zeros((8, 3)), np.zeros((8, 3)))
    for bad in (0.0, 0.0005, 1.0, 1.5, -0.1):
        with pytest.raises(ValueError):
            flow_loss(model, p, *args, bad)


def test_sampler_zero_field_returns_clamped_noise(micro_vocab, micro_cfg):
    rng = np.random.default_rng(7)
    model = build_model(micro_cfg, seed=7)
    p = _micro_prefix(micro_vocab, rng)
    out = sample_actions(model, p, np.zeros((3, 3)), seed=99)
    gen = torch.Generator().manual_seed(99)
    eps = torch.randn(8, 3, generator=gen, dtype=torch.float64)
    assert np.array_equal(out, eps.clamp(-1, 1).numpy())


def test_sampler_constant_field_adds_drift(micro_vocab, micro_cfg):
    rng = np.random.default_rng(8)
    model = build_model(micro_cfg, seed=8)
    with torch.no_grad():
        model.expert.velocity_head.bias.copy_(
            torch.tensor([0.5, -0.25, 0.125], dtype=torch.float64))
    p = _micro_prefix(micro_vocab, rng)
    out = sample_actions(model, p, np.zeros((3, 3)), seed=42)
    gen = torch.Generator().manual_seed(42)
    eps = torch.randn(8, 3, generator=gen, dtype=torch.float64)
    want = (eps + torch.tensor([0.5, -0.25, 0.125], dtype=torch.float64))
    assert np.allclose(out, want.clamp(-1, 1).numpy(), atol=1e-12)


def test_non_finite_activations_name_the_layer(micro_vocab, micro_cfg):
    rng = np.random.default_rng(9)
    p = _micro_prefix(micro_vocab, rng)

    model = build_model(micro_cfg, seed=9)
    with torch.no_grad():
        model.blocks[0].mlp.down.weight.fill_(float("inf"))
    with pytest.raises(NumericsError, match="trunk block 0"):
        forward(model, p)

    model = build_model(micro_cfg, seed=9)
    with torch.no_grad():
        model.lm_head.weight[0, 0] = float("nan")
    with pytest.raises(NumericsError, match="text head"):
        forward(model, p)

    model = build_model(micro_cfg, seed=9)
    with torch.no_grad():
        model.expert.velocity_head.weight.fill_(float("nan"))
    with pytest.raises(NumericsError, match="action expert"):
        forward(model, p, np.zeros((3, 3)), 0.5, np.zeros((8, 3)),
                suffix_ids=(BOA_ID,))


def _composite_loss(model, batch, tau, eps):
    out = model(batch.tokens, batch.patches, batch.lengths,
                proprio=batch.proprio, tau=tau, x_tau=None
                if eps is None else tau.view(-1, 1, 1) * batch.chunks
                + (1 - tau.view(-1, 1, 1)) * eps)
    tl = text_loss(out.text_logits, batch.logit_targets)
    rows = batch.has_action
    target_v = batch.chunks - eps
    fl = ((out.velocity[rows] - target_v[rows]) ** 2).mean()
    return tl + fl


def _micro_batch(micro_vocab, rng):
    from onetwo.samples import TrainingSample
    p1 = _micro_prefix(micro_vocab, rng, instruction="a b", reasoning=None)
    text = "c d e"
    suffix = (BOR_ID, *encode(micro_vocab, text), EOS_ID)
    s1 = TrainingSample(
        pattern="R-supervise", task_id="t", seed=0, tick=0, prefix=p1,
        suffix=suffix,
        targets=tuple((p1.decision_slot - 1 + j, tok)
                      for j, tok in enumerate(suffix)),
        decision_target=BOR_ID, chunk=None, proprio=None)
    p2 = _micro_prefix(micro_vocab, rng, instruction="f g", reasoning="c d")
    s2 = TrainingSample(
        pattern="A-acting", task_id="t", seed=0, tick=4, prefix=p2,
        suffix=(BOA_ID,), targets=((p2.decision_slot - 1, BOA_ID),),
        decision_target=BOA_ID,
        chunk=rng.uniform(-1, 1, (8, 3)), proprio=rng.normal(size=(3, 3)))
    return collate([s1, s2], dtype=torch.float64)


def test_gradients_match_finite_differences(micro_vocab, micro_cfg):
    rng = np.random.default_rng(10)
    model = build_model(micro_cfg, seed=10)
    batch = _micro_batch(micro_vocab, rng)
    gen = torch.Generator().manual_seed(11)
    tau = torch.empty(2, dtype=torch.float64).uniform_(0.001, 0.999,
                                                       generator=gen)
    eps = torch.randn(2, 8, 3, generator=gen, dtype=torch.float64)

    loss = _composite_loss(model, batch, tau, eps)
    loss.backward()
    analytic = {n: p.grad.detach().clone() if p.grad is not None
                else torch.zeros_like(p) for n, p in model.named_parameters()}

    worst = 0.0
    with torch.no_grad():
        for name, param in model.named_parameters():
            flat = param.view(-1)
            g_ana = analytic[name].view(-1)
            for idx in range(flat.numel()):
                orig = flat[idx].item()
                h = 1e-5 * max(1.0, abs(orig))
                flat[idx] = orig + h
                up = _composite_loss(model, batch, tau, eps).item()
                flat[idx] = orig - h
                down = _composite_loss(model, batch, tau, eps).item()
                flat[idx] = orig
                g_fd = (up - down) / (2 * h)
                a = g_ana[idx].item()
                if abs(a) < 1e-12 and abs(g_fd) < 1e-7:
                    continue
                rel = abs(a - g_fd) / max(abs(a), abs(g_fd), 1e-8)
                worst = max(worst, rel)
                assert rel <= 1e-3, f"{name}[{idx}]: {a} vs {g_fd} rel {rel}"
    assert worst <= 1e-3


def test_stale_pattern_decision_logits_get_zero_grad(micro_vocab, micro_cfg):
    from onetwo.samples import TrainingSample
    rng = np.random.default_rng(12)
    model = build_model(micro_cfg, seed=12)
    with torch.no_grad():   # nonzero velocity head so flow grads flow
        model.expert.velocity_head.weight.normal_(0, 0.1)
    p = _micro_prefix(micro_vocab, rng, instruction="a b", reasoning="c d")
    stale = TrainingSample(
        pattern="A-stale-R", task_id="t", seed=0, tick=0, prefix=p,
        suffix=(BOA_ID,), targets=(), decision_target=None,
        chunk=rng.uniform(-1, 1, (8, 3)), proprio=rng.normal(size=(3, 3)))
    p2 = _micro_prefix(micro_vocab, rng, instruction="a b", reasoning="c d")
    acting = TrainingSample(
        pattern="A-acting", task_id="t", seed=0, tick=4, prefix=p2,
        suffix=(BOA_ID,), targets=((p2.decision_slot - 1, BOA_ID),),
        decision_target=BOA_ID,
        chunk=rng.uniform(-1, 1, (8, 3)), proprio=rng.normal(size=(3, 3)))
    batch = collate([stale, acting], dtype=torch.float64)
    tau = torch.tensor([0.5, 0.5], dtype=torch.float64)
    eps = torch.randn(2, 8, 3, dtype=torch.float64)
    x_tau = tau.view(-1, 1, 1) * batch.chunks + (1 - tau.view(-1, 1, 1)) * eps
    out = model(batch.tokens, batch.patches, batch.lengths,
                proprio=batch.proprio, tau=tau, x_tau=x_tau)
    out.text_logits.retain_grad()
    tl = text_loss(out.text_logits, batch.logit_targets)
    fl = ((out.velocity - (batch.chunks - eps)) ** 2).mean()
    (tl + fl).backward()
    stale_slot = out.text_logits.grad[0, p.decision_slot - 1]
    assert torch.equal(stale_slot, torch.zeros_like(stale_slot))
    assert out.text_logits.grad[0].abs().sum().item() == 0.0
    assert out.text_logits.grad[1, p2.decision_slot - 1].abs().sum() > 0
    assert any(p_.grad is not None and p_.grad.abs().sum() > 0
               for p_ in model.expert.parameters())


def test_text_grads_zero_at_masked_positions(micro_vocab, micro_cfg):
    rng = np.random.default_rng(13)
    model = build_model(micro_cfg, seed=13)
    batch = _micro_batch(micro_vocab, rng)
    out = model(batch.tokens, batch.patches, batch.lengths)
    out.text_logits.retain_grad()
    text_loss(out.text_logits, batch.logit_targets).backward()
    mask = (batch.logit_targets >= 0)
    unsupervised = out.text_logits.grad[~mask]
    assert torch.equal(unsupervised, torch.zeros_like(unsupervised))
    assert out.text_logits.grad[mask].abs().sum() > 0


def test_vl_only_batch_leaves_expert_untouched(micro_vocab, micro_cfg):
    rng = np.random.default_rng(14)
    model = build_model(micro_cfg, seed=14)
    batch = _micro_batch(micro_vocab, rng)
    out = model(batch.tokens, batch.patches, batch.lengths)   # no action inputs
    text_loss(out.text_logits, batch.logit_targets).backward()
    for p_ in model.expert.parameters():
        assert p_.grad is None or p_.grad.abs().sum().item() == 0.0
    assert model.lm_head.weight.grad.abs().sum() > 0
