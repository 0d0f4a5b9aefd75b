"""Optimizer loop: mixed-batch co-training, checkpoints, and a metrics log."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import torch

from .model import (ModelConfig, NumericsError, Policy, TAU_MAX, TAU_MIN,
                    build_model, text_loss)
from .samples import Batch, TrainingSample, collate
from .textcodec import BOA_ID, BOR_ID, Vocab

CKPT_VERSION = 1
DIVERGENCE_CAP = 1e3


class TrainError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


class DivergenceError(RuntimeError):
    """Loss blew past the cap or went non-finite; the model has been rolled
    back to the last snapshot before this was raised."""

    def __init__(self, step: int, loss: float, metrics):
        super().__init__(f"diverged at step {step} (loss={loss})")
        self.step = step
        self.loss = loss
        self.metrics = tuple(metrics)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch_size: int = 8
    lr: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    flow_weight: float = 1.0
    vl_ratio: float = 1.0       # VL rows per robot row when VL data is present
    seed: int = 0
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.steps <= 0 or self.batch_size <= 0:
            raise TrainError("steps and batch_size must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise TrainError(f"unknown optimizer '{self.optimizer}'")
        if self.vl_ratio < 0:
            raise TrainError("vl_ratio must be >= 0")


@dataclass(frozen=True)
class TrainResult:
    metrics: tuple               # rows of (step, text_loss, flow_loss, decision_acc)
    checkpoint_path: Optional[Path]


def lr_at(step: int, config: TrainConfig) -> float:
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * step / config.steps))


def batch_loss(model: Policy, batch: Batch, tau: torch.Tensor,
               eps: torch.Tensor, flow_weight: float = 1.0):
    """Composite objective: token cross-entropy plus the velocity-matching
    term on rows that carry an action chunk."""
    rows = batch.has_action
    x_tau = None
    if bool(rows.any()):
        x_tau = tau.view(-1, 1, 1) * batch.chunks + (1 - tau.view(-1, 1, 1)) * eps
    out = model(batch.tokens, batch.patches, batch.lengths,
                proprio=batch.proprio, tau=tau, x_tau=x_tau)
    tl = text_loss(out.text_logits, batch.logit_targets)
    if x_tau is None:
        fl = tl.new_zeros(())
    else:
        target_v = batch.chunks - eps
        fl = ((out.velocity[rows] - target_v[rows]) ** 2).mean()
    return tl + flow_weight * fl, tl, fl, out


def _restricted_accuracy(logits: torch.Tensor,
                         samples: Sequence[TrainingSample]) -> float:
    correct = total = 0
    for i, s in enumerate(samples):
        if s.decision_target is None:
            continue
        pair = logits[i, s.prefix.decision_slot - 1]
        pred = BOA_ID if pair[BOA_ID] >= pair[BOR_ID] else BOR_ID
        correct += int(pred == s.decision_target)
        total += 1
    return correct / total if total else float("nan")


def decision_accuracy(model: Policy, samples: Sequence[TrainingSample],
                      batch_size: int = 16) -> float:
    """Restricted [BOR]/[BOA] argmax accuracy over samples that supervise
    the decision slot."""
    scored = [s for s in samples if s.decision_target is not None]
    if not scored:
        raise TrainError("no decision-supervised samples to score")
    correct = 0
    model.eval()
    with torch.no_grad():
        for lo in range(0, len(scored), batch_size):
            part = scored[lo:lo + batch_size]
            batch = collate(part, dtype=model.cfg.torch_dtype)
            out = model(batch.tokens, batch.patches, batch.lengths)
            for j, s in enumerate(part):
                pair = out.text_logits[j, s.prefix.decision_slot - 1]
                pred = BOA_ID if pair[BOA_ID] >= pair[BOR_ID] else BOR_ID
                correct += int(pred == s.decision_target)
    return correct / len(scored)


def metrics_csv(rows) -> str:
    lines = ["step,text_loss,flow_loss,decision_acc"]
    for step, tl, fl, acc in rows:
        lines.append(f"{step},{tl!r},{fl!r},{acc!r}")
    return "\n".join(lines) + "\n"


def _snapshot(model: Policy) -> dict:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def train(model: Policy, vocab: Vocab, robot: Sequence[TrainingSample],
          vl: Sequence[TrainingSample] = (), config: TrainConfig = TrainConfig(),
          out_dir=None) -> TrainResult:
    if not robot:
        raise TrainError("robot sample set is empty")
    dt = model.cfg.torch_dtype
    gen = torch.Generator().manual_seed(config.seed)
    if config.optimizer == "adam":
        opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    else:
        opt = torch.optim.SGD(model.parameters(), lr=config.lr,
                              momentum=config.momentum)

    # VL rows per batch; zero when no VL data so the draw stream is identical
    # to a robot-only run regardless of the configured ratio.
    n_vl = 0
    if vl:
        n_vl = min(round(config.batch_size * config.vl_ratio
                         / (1 + config.vl_ratio)), config.batch_size - 1)

    ckpt_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt_path = out_dir / "checkpoint.pt"

    def checkpoint(step):
        nonlocal snapshot
        snapshot = _snapshot(model)
        if ckpt_path is not None:
            save_checkpoint(ckpt_path, model, vocab, step)

    snapshot = None
    checkpoint(0)
    metrics = []

    def abort(step, loss_value):
        model.load_state_dict(snapshot)
        if out_dir is not None:
            (out_dir / "metrics.csv").write_text(metrics_csv(metrics))
        raise DivergenceError(step, loss_value, metrics)

    model.train()
    for step in range(config.steps):
        idx = torch.randint(len(robot), (config.batch_size - n_vl,),
                            generator=gen)
        chosen = [robot[i] for i in idx.tolist()]
        if n_vl:
            vidx = torch.randint(len(vl), (n_vl,), generator=gen)
            chosen += [vl[i] for i in vidx.tolist()]
        batch = collate(chosen, dtype=dt)
        tau = TAU_MIN + (TAU_MAX - TAU_MIN) * torch.rand(
            batch.size, generator=gen, dtype=dt)
        eps = torch.randn(batch.size, model.cfg.horizon, model.cfg.action_dim,
                          generator=gen, dtype=dt)

        try:
            total, tl, fl, out = batch_loss(model, batch, tau, eps,
                                            config.flow_weight)
        except NumericsError:
            abort(step, float("nan"))
        loss_value = float(total.detach())
        if not math.isfinite(loss_value) or loss_value > DIVERGENCE_CAP:
            abort(step, loss_value)

        acc = _restricted_accuracy(out.text_logits.detach(), chosen)
        metrics.append((step, float(tl.detach()), float(fl.detach()), acc))

        for group in opt.param_groups:
            group["lr"] = lr_at(step, config)
        opt.zero_grad()
        total.backward()
        opt.step()

        if (step + 1) % config.checkpoint_every == 0:
            checkpoint(step + 1)

    checkpoint(config.steps)
    if out_dir is not None:
        (out_dir / "metrics.csv").write_text(metrics_csv(metrics))
    return TrainResult(metrics=tuple(metrics), checkpoint_path=ckpt_path)


def save_checkpoint(path, model: Policy, vocab: Vocab, step: int) -> None:
    payload = {
        "version": CKPT_VERSION,
        "step": step,
        "model_config": dataclasses.asdict(model.cfg),
        "config_hash": model.cfg.hash,
        "vocab_hash": vocab.hash,
        "vocab_json": vocab.to_json(),
        "state": model.state_dict(),
    }
    torch.save(payload, path)


def load_checkpoint(path):
    """Rebuild (model, vocab, meta) from a checkpoint file, verifying the
    format version and both content hashes."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("version") != CKPT_VERSION:
        raise CheckpointError(
            f"checkpoint version {payload.get('version')!r}, expected {CKPT_VERSION}")
    cfg = ModelConfig(**payload["model_config"])
    if cfg.hash != payload["config_hash"]:
        raise CheckpointError("model config hash mismatch")
    vocab = Vocab.from_json(payload["vocab_json"])
    if vocab.hash != payload["vocab_hash"]:
        raise CheckpointError("vocabulary hash mismatch")
    model = build_model(cfg, seed=0)
    model.load_state_dict(payload["state"])
    model.eval()
    meta = {"step": payload["step"], "config_hash": payload["config_hash"],
            "vocab_hash": payload["vocab_hash"]}
    return model, vocab, meta
