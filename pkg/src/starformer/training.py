"""Supervised action-prediction training: losses, LR schedule, optimiser and loop."""

from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from starformer.model import WindowBatch, collate, save_checkpoint
from starformer.trajectory import ActionSpace, Trajectory, sample_window

log = logging.getLogger(__name__)

TOKENS_PER_STEP = 3
MIN_LR_MULT = 0.1


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 6e-4
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    warmup_tokens: int = 512 * 20
    final_tokens: int | None = None  # defaults to the tokens of the whole run
    batch_size: int = 64
    max_steps: int = 1000
    epochs: int | None = None  # overrides max_steps when set
    seed: int = 0
    log_every: int = 1
    checkpoint_every: int = 0
    eval_every: int = 0
    target_loss: float | None = None  # stop once the full-dataset eval loss drops below

    def __post_init__(self) -> None:
        self.betas = tuple(self.betas)
        for name in ("lr", "grad_clip", "warmup_tokens", "batch_size", "max_steps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.final_tokens is not None and self.final_tokens < self.warmup_tokens:
            raise ValueError("final_tokens must be >= warmup_tokens")

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["betas"] = list(self.betas)
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**dict(data))


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def action_loss(
    predictions: torch.Tensor, targets: torch.Tensor, valid_mask: torch.Tensor, space: ActionSpace
) -> torch.Tensor:
    """Mean cross-entropy (discrete) or squared error (continuous) over valid positions."""
    if not valid_mask.any():
        raise ValueError("loss needs at least one valid position")
    if space.discrete:
        if predictions.shape[:-1] != targets.shape:
            raise ValueError(f"prediction shape {tuple(predictions.shape)} vs targets {tuple(targets.shape)}")
        per_pos = F.cross_entropy(predictions[valid_mask], targets[valid_mask], reduction="mean")
        return per_pos
    if predictions.shape != targets.shape:
        raise ValueError(f"prediction shape {tuple(predictions.shape)} vs targets {tuple(targets.shape)}")
    return ((predictions[valid_mask] - targets[valid_mask]) ** 2).mean()


def lr_schedule(tokens: float, warmup_tokens: float, final_tokens: float) -> float:
    """Linear warmup to 1, then cosine decay clamped below at 0.1."""
    if tokens < 0:
        raise ValueError("tokens must be >= 0")
    if tokens < warmup_tokens:
        return tokens / max(1.0, warmup_tokens)
    progress = (tokens - warmup_tokens) / max(1.0, final_tokens - warmup_tokens)
    return max(MIN_LR_MULT, 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0))))


def decay_partition(model: nn.Module) -> tuple[list[str], list[str]]:
    """Names of parameters with and without weight decay.

    Only weight matrices of linear and conv layers decay; biases, norms,
    embedding tables and free-standing positional parameters do not.
    """
    decay, no_decay = [], []
    for mod_name, module in model.named_modules():
        for p_name, _ in module.named_parameters(recurse=False):
            full = f"{mod_name}.{p_name}" if mod_name else p_name
            if p_name == "weight" and isinstance(module, (nn.Linear, nn.Conv2d)):
                decay.append(full)
            else:
                no_decay.append(full)
    return decay, no_decay


def make_optimizer(model: nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    params = dict(model.named_parameters())
    decay, no_decay = decay_partition(model)
    groups = [
        {"params": [params[n] for n in decay], "weight_decay": cfg.weight_decay},
        {"params": [params[n] for n in no_decay], "weight_decay": 0.0},
    ]
    return torch.optim.AdamW(groups, lr=cfg.lr, betas=cfg.betas)


def window_index(trajectories: Sequence[Trajectory]) -> np.ndarray:
    """Every (trajectory, end step) pair, one training window each."""
    return np.array([(i, t) for i, traj in enumerate(trajectories) for t in range(len(traj))], dtype=np.int64)


def make_batch(trajectories: Sequence[Trajectory], pairs: np.ndarray, seq_len: int, mode) -> WindowBatch:
    return collate([sample_window(trajectories[i], int(t), seq_len, mode) for i, t in pairs])


@dataclass
class TrainResult:
    metrics: list[dict[str, float]] = field(default_factory=list)
    steps: int = 0
    tokens: int = 0
    final_eval_loss: float | None = None
    checkpoint: Path | None = None


def dataset_loss(model: nn.Module, trajectories: Sequence[Trajectory], batch_size: int = 64) -> float:
    """Eval-mode loss averaged over every window of the dataset (weighted by valid positions)."""
    cfg = model.cfg
    pairs = window_index(trajectories)
    total, count = 0.0, 0
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for start in range(0, len(pairs), batch_size):
            batch = make_batch(trajectories, pairs[start : start + batch_size], cfg.seq_len, cfg.reward_mode)
            dtype = next(model.parameters()).dtype
            batch = batch.to(dtype)
            n = int(batch.valid_mask.sum())
            total += float(action_loss(model(batch), batch.actions, batch.valid_mask, cfg.action_space)) * n
            count += n
    model.train(was_training)
    return total / count


def train(
    model: nn.Module,
    trajectories: Sequence[Trajectory],
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    checkpoint_extra: Mapping[str, Any] | None = None,
) -> TrainResult:
    """Train ``model`` on windows drawn from ``trajectories``.

    Writes ``metrics.jsonl`` and checkpoints into ``out_dir`` when given;
    ``checkpoint_extra`` is stored in every checkpoint next to step/tokens.
    """
    extra = dict(checkpoint_extra or {})
    mcfg = model.cfg
    if not trajectories:
        raise ValueError("empty dataset")
    if trajectories[0].action_space != mcfg.action_space:
        raise ValueError(f"dataset action space {trajectories[0].action_space} != model {mcfg.action_space}")
    if trajectories[0].frame_stack != mcfg.frame_stack:
        raise ValueError("dataset frame stack does not match the model")

    seed_everything(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    pairs = window_index(trajectories)
    max_steps = cfg.max_steps
    if cfg.epochs is not None:
        max_steps = cfg.epochs * math.ceil(len(pairs) / cfg.batch_size)
    final_tokens = cfg.final_tokens or max(
        cfg.warmup_tokens, TOKENS_PER_STEP * mcfg.seq_len * cfg.batch_size * max_steps
    )
    dtype = next(model.parameters()).dtype
    opt = make_optimizer(model, cfg)
    params = [p for p in model.parameters()]

    out = Path(out_dir) if out_dir is not None else None
    metrics_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_file = open(out / "metrics.jsonl", "w")

    result = TrainResult()
    order = rng.permutation(len(pairs))
    cursor = 0
    tokens = 0
    model.train()
    try:
        for step in range(1, max_steps + 1):
            if cursor + cfg.batch_size > len(order):
                order = rng.permutation(len(pairs))
                cursor = 0
            idx = order[cursor : cursor + cfg.batch_size]
            cursor += cfg.batch_size
            batch = make_batch(trajectories, pairs[idx], mcfg.seq_len, mcfg.reward_mode).to(dtype)

            preds = model(batch)
            loss = action_loss(preds, batch.actions, batch.valid_mask, mcfg.action_space)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss {float(loss.detach())} at step {step} (tokens={tokens}, "
                    f"lr={opt.param_groups[0]['lr']:.3g}); check the learning rate and inputs"
                )
            opt.zero_grad(set_to_none=True)
            loss.backward()
            raw_norm = float(torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip))
            grad_norm = float(torch.linalg.vector_norm(
                torch.stack([torch.linalg.vector_norm(p.grad) for p in params if p.grad is not None])
            ))
            tokens += TOKENS_PER_STEP * int(batch.valid_mask.sum())
            mult = lr_schedule(tokens, cfg.warmup_tokens, final_tokens)
            for group in opt.param_groups:
                group["lr"] = cfg.lr * mult
            opt.step()

            record = {
                "step": step,
                "loss": float(loss.detach()),
                "lr": cfg.lr * mult,
                "grad_norm": grad_norm,
                "grad_norm_raw": raw_norm,
                "tokens": tokens,
            }
            if cfg.eval_every and step % cfg.eval_every == 0:
                record["eval_loss"] = dataset_loss(model, trajectories)
                result.final_eval_loss = record["eval_loss"]
            result.metrics.append(record)
            if metrics_file is not None and step % cfg.log_every == 0:
                metrics_file.write(json.dumps(record) + "\n")
                metrics_file.flush()
            if step % 100 == 0:
                log.info("step %d loss %.4f lr %.2e", step, record["loss"], record["lr"])
            if out is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_checkpoint(model, out / f"checkpoint_{step:06d}.npz", {**extra, "step": step, "tokens": tokens})
            result.steps, result.tokens = step, tokens
            if cfg.target_loss is not None and record.get("eval_loss", math.inf) < cfg.target_loss:
                break
    finally:
        if metrics_file is not None:
            metrics_file.close()
    model.eval()
    if out is not None:
        result.checkpoint = out / "checkpoint.npz"
        save_checkpoint(model, result.checkpoint, {**extra, "step": result.steps, "tokens": result.tokens})
    return result


def read_metrics(path: str | Path) -> list[dict[str, float]]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
