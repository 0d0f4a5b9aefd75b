"""Unified policy network.

One causal transformer trunk reads the assembled token stream (patch
slots first, then text) and its text head writes tokens; whatever it
puts in the slot after the final separator doubles as the mode switch.
A small cross-attention expert reads the trunk's hidden states plus
proprioception and a flow time and emits a velocity field over an
8-step action chunk, trained by rectified flow matching.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .textcodec import BOA_ID, IMG_ID, PAD_ID, PATCH_DIM, Prefix

PARAM_CAP = 5_000_000
TAU_MIN, TAU_MAX = 0.001, 0.999
EULER_STEPS = 10
EMB_STD = 0.02
_TIME_FREQS = 8


class NumericsError(RuntimeError):
    """Non-finite activations, named by the layer that produced them."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    width: int = 128
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    expert_depth: int = 2
    expert_heads: int = 4
    horizon: int = 8
    action_dim: int = 3
    proprio_lags: tuple[int, ...] = (0, 1, 5)
    max_seq: int = 640
    dtype: str = "float32"

    def __post_init__(self):
        if self.width % self.heads or self.width % self.expert_heads:
            raise ValueError("width must divide evenly into heads")
        if len(self.proprio_lags) != 3:
            raise ValueError("exactly 3 proprio lag slots")

    @property
    def hash(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha1(payload.encode()).hexdigest()

    @property
    def torch_dtype(self) -> torch.dtype:
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]


def _attention(q, k, v, mask):
    # mask: True = blocked; shapes (B, h, Lq, Lk)
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    scores = scores.masked_fill(mask, float("-inf"))
    return torch.softmax(scores, dim=-1) @ v


def _split_heads(x, heads):
    b, l, w = x.shape
    return x.view(b, l, heads, w // heads).transpose(1, 2)


def _merge_heads(x):
    b, h, l, d = x.shape
    return x.transpose(1, 2).reshape(b, l, h * d)


class SelfAttention(nn.Module):
    def __init__(self, width, heads):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x, mask):
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        out = _attention(_split_heads(q, self.heads), _split_heads(k, self.heads),
                         _split_heads(v, self.heads), mask)
        return self.proj(_merge_heads(out))


class CrossAttention(nn.Module):
    def __init__(self, width, heads):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(width, width)
        self.kv = nn.Linear(width, 2 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x, memory, mask):
        q = _split_heads(self.q(x), self.heads)
        k, v = self.kv(memory).chunk(2, dim=-1)
        out = _attention(q, _split_heads(k, self.heads),
                         _split_heads(v, self.heads), mask)
        return self.proj(_merge_heads(out))


class Mlp(nn.Module):
    def __init__(self, width, ratio):
        super().__init__()
        self.up = nn.Linear(width, ratio * width)
        self.down = nn.Linear(ratio * width, width)

    def forward(self, x):
        return self.down(torch.nn.functional.gelu(self.up(x)))


class TrunkBlock(nn.Module):
    def __init__(self, width, heads, ratio):
        super().__init__()
        self.ln1 = nn.LayerNorm(width)
        self.attn = SelfAttention(width, heads)
        self.ln2 = nn.LayerNorm(width)
        self.mlp = Mlp(width, ratio)

    def forward(self, x, mask):
        x = x + self.attn(self.ln1(x), mask)
        return x + self.mlp(self.ln2(x))


class ExpertBlock(nn.Module):
    def __init__(self, width, heads, ratio):
        super().__init__()
        self.ln1 = nn.LayerNorm(width)
        self.self_attn = SelfAttention(width, heads)
        self.ln2 = nn.LayerNorm(width)
        self.cross = CrossAttention(width, heads)
        self.ln3 = nn.LayerNorm(width)
        self.mlp = Mlp(width, ratio)

    def forward(self, x, memory, mem_mask):
        b, lq = x.shape[0], x.shape[1]
        open_mask = torch.zeros(b, 1, lq, lq, dtype=torch.bool, device=x.device)
        x = x + self.self_attn(self.ln1(x), open_mask)
        x = x + self.cross(self.ln2(x), memory, mem_mask)
        return x + self.mlp(self.ln3(x))


def _time_features(tau, dtype, device):
    freqs = torch.pow(2.0, torch.arange(_TIME_FREQS, dtype=dtype, device=device))
    angle = 2 * math.pi * freqs * tau
    return torch.cat([torch.sin(angle), torch.cos(angle)], dim=-1)


class ActionExpert(nn.Module):
    """Cross-attention decoder: 8 action-slot queries plus 1 time slot
    over trunk hidden states; velocity head starts at zero so a fresh
    model emits the zero field."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.queries = nn.Parameter(torch.randn(cfg.horizon + 1, cfg.width) * 0.02)
        self.action_in = nn.Linear(cfg.action_dim, cfg.width)
        self.proprio_in = nn.Linear(3 * len(cfg.proprio_lags), cfg.width)
        self.time_in = nn.Linear(2 * _TIME_FREQS, cfg.width)
        self.blocks = nn.ModuleList(
            ExpertBlock(cfg.width, cfg.expert_heads, cfg.mlp_ratio)
            for _ in range(cfg.expert_depth))
        self.ln_f = nn.LayerNorm(cfg.width)
        self.velocity_head = nn.Linear(cfg.width, cfg.action_dim)
        nn.init.zeros_(self.velocity_head.weight)
        nn.init.zeros_(self.velocity_head.bias)

    def forward(self, memory, mem_pad, proprio, tau, x_tau):
        b = memory.shape[0]
        h = self.cfg.horizon
        q = self.queries.unsqueeze(0).expand(b, -1, -1).clone()
        q = q + self.proprio_in(proprio.reshape(b, -1)).unsqueeze(1)
        q = torch.cat([q[:, :h] + self.action_in(x_tau),
                       q[:, h:] + self.time_in(
                           _time_features(tau.view(b, 1), memory.dtype,
                                          memory.device)).unsqueeze(1)], dim=1)
        mem_mask = mem_pad[:, None, None, :]
        for block in self.blocks:
            q = block(q, memory, mem_mask)
        out = self.ln_f(q[:, :h])
        return self.velocity_head(out)


@dataclass
class ForwardOut:
    text_logits: torch.Tensor            # (B, L, vocab)
    hidden: torch.Tensor                 # (B, L, width)
    velocity: Optional[torch.Tensor]     # (B, H, d) when action inputs given


class Policy(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.width)
        self.pos_emb = nn.Embedding(cfg.max_seq, cfg.width)
        nn.init.normal_(self.tok_emb.weight, std=EMB_STD)
        nn.init.normal_(self.pos_emb.weight, std=EMB_STD)
        self.patch_proj = nn.Linear(PATCH_DIM, cfg.width)
        # unit-interval pixels project to tiny activations; normalizing the
        # patch tokens keeps image content salient against the text stream,
        # and the rescale keeps it comparable to the positional signal the
        # way word content is
        self.patch_ln = nn.LayerNorm(cfg.width)
        self.patch_scale = EMB_STD
        self.blocks = nn.ModuleList(
            TrunkBlock(cfg.width, cfg.heads, cfg.mlp_ratio)
            for _ in range(cfg.depth))
        self.ln_f = nn.LayerNorm(cfg.width)
        self.lm_head = nn.Linear(cfg.width, cfg.vocab_size, bias=False)
        self.expert = ActionExpert(cfg)
        self.to(cfg.torch_dtype)
        n = self.param_count()
        if n >= PARAM_CAP:
            raise ValueError(f"parameter count {n} exceeds cap {PARAM_CAP}")

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, tokens, patches, lengths, proprio=None, tau=None,
                x_tau=None) -> ForwardOut:
        """tokens (B, L) with the 72 leading patch slots; patches
        (B, 72, PATCH_DIM); lengths (B,) valid lengths. Positions at or
        beyond a row's length are padding: masked from attention and
        meaningless in the outputs."""
        b, l = tokens.shape
        if l > self.cfg.max_seq:
            raise ValueError(f"sequence length {l} exceeds {self.cfg.max_seq}")
        if l < 72:
            raise ValueError("stream shorter than the two patch regions")
        dt = self.cfg.torch_dtype
        dev = tokens.device
        emb = self.tok_emb(tokens)
        pix = self.patch_scale * self.patch_ln(self.patch_proj(patches.to(dt)))
        emb = torch.cat([pix, emb[:, 72:]], dim=1)
        pos = self.pos_emb(torch.arange(l, device=dev))
        x = emb + pos
        causal = torch.triu(torch.ones(l, l, dtype=torch.bool, device=dev), 1)
        pad = torch.arange(l, device=dev)[None, :] >= lengths[:, None]
        mask = causal[None, None] | pad[:, None, None, :]
        for i, block in enumerate(self.blocks):
            x = block(x, mask)
            if not torch.isfinite(x).all():
                raise NumericsError(f"trunk block {i} produced non-finite values")
        hidden = self.ln_f(x)
        logits = self.lm_head(hidden)
        if not torch.isfinite(logits).all():
            raise NumericsError("text head produced non-finite values")
        velocity = None
        if x_tau is not None:
            if proprio is None or tau is None:
                raise ValueError("action inputs need proprio and tau together")
            velocity = self.expert(hidden, pad, proprio.to(dt), tau.to(dt),
                                   x_tau.to(dt))
            if not torch.isfinite(velocity).all():
                raise NumericsError("action expert produced non-finite values")
        return ForwardOut(text_logits=logits, hidden=hidden, velocity=velocity)


def build_model(cfg: ModelConfig, seed: int = 0) -> Policy:
    torch.manual_seed(seed)
    return Policy(cfg)


def _single_inputs(model: Policy, prefix: Prefix, suffix_ids: Sequence[int]):
    dt = model.cfg.torch_dtype
    ids = list(prefix.ids) + list(suffix_ids)
    tokens = torch.tensor([ids], dtype=torch.long)
    patches = torch.tensor(prefix.patches, dtype=dt).unsqueeze(0)
    lengths = torch.tensor([len(ids)])
    return tokens, patches, lengths


def forward(model: Policy, prefix: Prefix, proprio=None, tau=None, x_tau=None,
            suffix_ids: Sequence[int] = ()):
    """Single-sample wrapper: returns (decision_logits over the vocab,
    text_logits per position, velocity or None)."""
    tokens, patches, lengths = _single_inputs(model, prefix, suffix_ids)
    kwargs = {}
    if x_tau is not None:
        dt = model.cfg.torch_dtype
        kwargs = dict(
            proprio=torch.as_tensor(np.asarray(proprio), dtype=dt).unsqueeze(0),
            tau=torch.tensor([tau], dtype=dt),
            x_tau=torch.as_tensor(np.asarray(x_tau), dtype=dt).unsqueeze(0))
    out = model(tokens, patches, lengths, **kwargs)
    decision_logits = out.text_logits[0, prefix.decision_slot - 1]
    velocity = None if out.velocity is None else out.velocity[0]
    return decision_logits, out.text_logits[0], velocity


def text_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over positions with target >= 0; zero targets
    supervised nowhere."""
    mask = targets >= 0
    if not mask.any():
        return logits.new_zeros(())
    logp = torch.log_softmax(logits, dim=-1)
    picked = logp.gather(-1, targets.clamp(min=0).unsqueeze(-1)).squeeze(-1)
    return -(picked * mask).sum() / mask.sum()


def flow_loss(model: Policy, prefix: Prefix, proprio, a_target, noise,
              tau: float) -> torch.Tensor:
    if not TAU_MIN <= tau <= TAU_MAX:
        raise ValueError(f"tau {tau} outside [{TAU_MIN}, {TAU_MAX}]")
    dt = model.cfg.torch_dtype
    a = torch.as_tensor(np.asarray(a_target), dtype=dt)
    eps = torch.as_tensor(np.asarray(noise), dtype=dt)
    x_tau = tau * a + (1 - tau) * eps
    _, _, velocity = forward(model, prefix, proprio, tau, x_tau,
                             suffix_ids=(BOA_ID,))
    return ((velocity - (a - eps)) ** 2).mean()


def sample_actions(model: Policy, prefix: Prefix, proprio, seed: int,
                   suffix_ids: Sequence[int] = (BOA_ID,)) -> np.ndarray:
    """Euler-integrate the velocity field from noise at tau 0 to tau 1
    in 10 uniform steps; clamp to the normalized action box. The token
    stream never sees tau or the partial sample, so the trunk runs once
    and only the expert is queried per step."""
    cfg = model.cfg
    dt = cfg.torch_dtype
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(cfg.horizon, cfg.action_dim, generator=gen, dtype=dt)
    tokens, patches, lengths = _single_inputs(model, prefix, suffix_ids)
    prop = torch.as_tensor(np.asarray(proprio), dtype=dt).unsqueeze(0)
    with torch.no_grad():
        out = model(tokens, patches, lengths)
        pad = torch.arange(tokens.shape[1])[None, :] >= lengths[:, None]
        for k in range(EULER_STEPS):
            tau_k = torch.tensor([k / EULER_STEPS], dtype=dt)
            v = model.expert(out.hidden, pad, prop, tau_k, x.unsqueeze(0))[0]
            if not torch.isfinite(v).all():
                raise NumericsError("sampler produced non-finite velocity")
            x = x + v / EULER_STEPS
    return x.clamp(-1.0, 1.0).numpy()
