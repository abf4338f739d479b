"""StARformer network, its ablation variants and the flat DT-style baseline."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from starformer.embeddings import (
    ActionEmbedding,
    ConvEncoder,
    PatchEmbedding,
    PooledPatchEncoder,
    RewardEmbedding,
    TemporalEmbedding,
    trunc_normal_,
)
from starformer.trajectory import IMAGE_SIZE, ActionKind, ActionSpace, RewardMode, TrajectoryWindow

CHECKPOINT_VERSION = 1


class StepEmbed(str, enum.Enum):
    PATCH = "patch"
    CONV = "conv"


class SeqState(str, enum.Enum):
    CONV = "conv"
    PATCH = "patch"
    NONE = "none"


class Connectivity(str, enum.Enum):
    INTERLEAVE = "interleave"
    FUSION_SUM = "fusion_sum"
    STACK = "stack"
    DT_FLAT = "dt_flat"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    step_embed_mode: StepEmbed = StepEmbed.PATCH
    seq_state_mode: SeqState = SeqState.CONV
    connectivity: Connectivity = Connectivity.INTERLEAVE
    reward_mode: RewardMode = RewardMode.STEPWISE
    n_layers: int = 6
    d_step: int = 64
    d_seq: int = 192
    heads_step: int = 4
    heads_seq: int = 8
    seq_len: int = 10
    action_kind: ActionKind = ActionKind.DISCRETE
    action_dim: int = 3
    dropout: float = 0.1
    attn_dropout: float = 0.0
    patch_size: int = 7
    frame_stack: int = 4
    image_size: int = IMAGE_SIZE
    max_timestep: int = 256

    def __post_init__(self) -> None:
        for name, enum_type in (
            ("step_embed_mode", StepEmbed),
            ("seq_state_mode", SeqState),
            ("connectivity", Connectivity),
            ("reward_mode", RewardMode),
            ("action_kind", ActionKind),
        ):
            try:
                object.__setattr__(self, name, enum_type(getattr(self, name)))
            except ValueError as exc:
                raise ConfigError(f"{name}: {exc}") from None
        self.validate()

    def validate(self) -> None:
        if self.seq_state_mode is SeqState.NONE and self.connectivity is not Connectivity.INTERLEAVE:
            raise ConfigError("seq_state_mode=none is only defined for the interleave connectivity")
        if self.connectivity is Connectivity.DT_FLAT and self.seq_state_mode is SeqState.NONE:
            raise ConfigError("dt_flat needs a state embedding (conv or patch)")
        if self.d_step % self.heads_step or self.d_seq % self.heads_seq:
            raise ConfigError("embedding dims must be divisible by their head counts")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image size {self.image_size} not divisible by patch {self.patch_size}")
        for name in ("n_layers", "d_step", "d_seq", "seq_len", "action_dim", "frame_stack", "max_timestep"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not (0.0 <= self.dropout < 1.0 and 0.0 <= self.attn_dropout < 1.0):
            raise ConfigError("dropout rates must lie in [0, 1)")

    @property
    def action_space(self) -> ActionSpace:
        return ActionSpace(self.action_kind, self.action_dim)

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def has_reward(self) -> bool:
        return self.reward_mode is not RewardMode.NONE

    @property
    def group_size(self) -> int:
        state_tokens = self.num_patches if self.step_embed_mode is StepEmbed.PATCH else 1
        return 1 + int(self.has_reward) + state_tokens

    @property
    def variant(self) -> str:
        if self.connectivity is Connectivity.DT_FLAT:
            return "dt" if self.seq_state_mode is SeqState.CONV else "dt-vit"
        seq_code = {SeqState.CONV: "C", SeqState.PATCH: "P", SeqState.NONE: "__"}[self.seq_state_mode]
        label = f"{self.step_embed_mode.name[0]}+{seq_code}"
        if self.connectivity is Connectivity.FUSION_SUM:
            return f"fusion:{label}"
        if self.connectivity is Connectivity.STACK:
            return f"stack:{label}"
        return label

    def to_dict(self) -> dict[str, Any]:
        return {k: (v.value if isinstance(v, enum.Enum) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**dict(data))


_STATE_CODES = {"P": "patch", "C": "conv", "_": "none", "__": "none", "": "none", "none": "none"}

VARIANTS = ("P+C", "P+P", "P+__", "C+C", "C+P", "C+__", "fusion", "stack", "dt", "dt-vit")


def variant_config(name: str, base: ModelConfig | None = None, **overrides: Any) -> ModelConfig:
    """Resolve a variant label such as ``P+C``, ``C+__``, ``fusion``, ``stack`` or ``dt``.

    ``fusion`` and ``stack`` accept an optional embedding suffix
    (``fusion:C+C``); the default is ``P+C``.
    """
    base = base or ModelConfig()
    key = name.strip()
    connectivity = Connectivity.INTERLEAVE
    if key.lower() in ("dt", "dt_flat"):
        return replace(base, connectivity=Connectivity.DT_FLAT, seq_state_mode=SeqState.CONV, **overrides)
    if key.lower() in ("dt-vit", "dt_vit"):
        return replace(base, connectivity=Connectivity.DT_FLAT, seq_state_mode=SeqState.PATCH, **overrides)
    if ":" in key or key.lower() in ("fusion", "stack", "fusion_sum"):
        head, _, key = key.partition(":")
        connectivity = Connectivity.STACK if head.lower() == "stack" else Connectivity.FUSION_SUM
        key = key or "P+C"
    step, plus, seq = key.partition("+")
    if not plus or step.upper() not in ("P", "C") or seq.upper() not in ("P", "C", "_", "__", "", "NONE"):
        raise ConfigError(f"unknown variant {name!r}; expected one of {VARIANTS}")
    step_mode = StepEmbed.PATCH if step.upper() == "P" else StepEmbed.CONV
    seq_mode = SeqState(_STATE_CODES[seq.upper() if seq.upper() in ("P", "C") else seq.lower()])
    return replace(
        base, step_embed_mode=step_mode, seq_state_mode=seq_mode, connectivity=connectivity, **overrides
    )


# --------------------------------------------------------------------------
# attention building blocks


def causal_mask(n: int, device: torch.device | None = None) -> torch.Tensor:
    return torch.ones(n, n, dtype=torch.bool, device=device).tril()


def build_causal_mask(seq_len: int) -> torch.Tensor:
    """Mask over the interleaved ``g_1, h_1, ..., g_T, h_T`` sequence; True = may attend."""
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    return causal_mask(2 * seq_len)


def sequence_mask(key_valid: torch.Tensor) -> torch.Tensor:
    """Causal mask restricted to valid keys; ``key_valid`` is ``(B, N)``.

    Every query may still attend to itself so padded rows stay well defined.
    Returns ``(B, 1, N, N)``.
    """
    n = key_valid.shape[-1]
    base = causal_mask(n, key_valid.device)
    allowed = base & key_valid[:, None, :]
    allowed = allowed | torch.eye(n, dtype=torch.bool, device=key_valid.device)
    return allowed.unsqueeze(1)


def attention_weights(q: torch.Tensor, k: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """``softmax(q k^T / sqrt(head_dim))`` with disallowed keys (mask False) zeroed."""
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if mask is not None:
        scores = scores.masked_fill(~mask, float("-inf"))
    return scores.softmax(dim=-1)


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float, attn_dropout: float = 0.0) -> None:
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.attn_dropout = attn_dropout
        self.resid_drop = nn.Dropout(dropout)
        self.last_weights: torch.Tensor | None = None
        self.record = False

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        *lead, n, dim = x.shape
        hd = dim // self.heads
        # (B', heads, n, hd); the fused kernel needs 4-D inputs
        qkv = self.qkv(x).reshape(-1, n, 3, self.heads, hd).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        p = self.attn_dropout if self.training else 0.0
        if self.record:
            weights = attention_weights(q, k, mask)
            self.last_weights = weights.detach()
            out = F.dropout(weights, p, self.training) @ v
        else:
            out = F.scaled_dot_product_attention(q, k, v, attn_mask=mask, dropout_p=p)
        out = out.transpose(1, 2).reshape(*lead, n, dim)
        return self.resid_drop(self.proj(out))


class Block(nn.Module):
    """Pre-norm transformer layer: attention then a 4x GELU feed-forward."""

    def __init__(self, dim: int, heads: int, dropout: float, attn_dropout: float = 0.0) -> None:
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, dropout, attn_dropout)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, 4 * dim),
            nn.GELU(),
            nn.Linear(4 * dim, dim),
            nn.Dropout(dropout),
        )

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        x = x + self.attn(self.ln1(x), mask)
        return x + self.mlp(self.ln2(x))


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, (nn.Linear, nn.Embedding)):
        trunc_normal_(module.weight)
        if isinstance(module, nn.Linear) and module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


def interleave(g: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
    """``(B, T, D)`` x2 -> ``(B, 2T, D)`` ordered g_1, h_1, g_2, h_2, ..."""
    b, t, d = g.shape
    return torch.stack([g, h], dim=2).reshape(b, 2 * t, d)


# --------------------------------------------------------------------------
# batching


@dataclass
class WindowBatch:
    states: torch.Tensor  # (B, T, H, W, C)
    actions: torch.Tensor
    rewards: torch.Tensor
    prev_actions: torch.Tensor
    prev_rewards: torch.Tensor
    valid_mask: torch.Tensor  # (B, T) bool
    timesteps: torch.Tensor  # (B, T) int64

    @property
    def start_mask(self) -> torch.Tensor:
        return self.valid_mask & (self.timesteps == 0)

    def to(self, dtype: torch.dtype) -> WindowBatch:
        def cast(t: torch.Tensor) -> torch.Tensor:
            return t.to(dtype) if t.is_floating_point() else t

        return WindowBatch(*(cast(getattr(self, f.name)) for f in fields(self)))


def collate(windows: Sequence[TrajectoryWindow]) -> WindowBatch:
    def stack(name: str) -> torch.Tensor:
        return torch.from_numpy(np.stack([getattr(w, name) for w in windows]))

    return WindowBatch(
        states=stack("states"),
        actions=stack("actions"),
        rewards=stack("rewards"),
        prev_actions=stack("prev_actions"),
        prev_rewards=stack("prev_rewards"),
        valid_mask=stack("valid_mask"),
        timesteps=stack("timesteps"),
    )


def _as_batch(x: WindowBatch | TrajectoryWindow | Sequence[TrajectoryWindow]) -> WindowBatch:
    if isinstance(x, WindowBatch):
        return x
    if isinstance(x, TrajectoryWindow):
        return collate([x])
    return collate(list(x))


# --------------------------------------------------------------------------
# models


class _Base(nn.Module):
    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.cfg = cfg

    def _check(self, batch: WindowBatch) -> None:
        cfg = self.cfg
        b, t = batch.valid_mask.shape
        if t != cfg.seq_len:
            raise ConfigError(f"window length {t} != configured seq_len {cfg.seq_len}")
        expected = (b, t, cfg.image_size, cfg.image_size, cfg.frame_stack)
        if tuple(batch.states.shape) != expected:
            raise ConfigError(f"states shape {tuple(batch.states.shape)} != {expected}")
        if cfg.action_space.discrete != (batch.prev_actions.dim() == 2):
            raise ConfigError("window action representation does not match the configured action space")
        if not cfg.action_space.discrete and batch.prev_actions.shape[-1] != cfg.action_dim:
            raise ConfigError("continuous action dim mismatch")

    def _head(self, h: torch.Tensor) -> torch.Tensor:
        out = self.head(self.ln_f(h))
        return out if self.cfg.action_space.discrete else torch.tanh(out)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


class StARformer(_Base):
    """Step Transformer over per-timestep groups feeding a causal Sequence Transformer.

    Supports the interleaved layer-wise connection as well as the summation
    (``fusion_sum``) and stacked (``stack``) alternatives.
    """

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__(cfg)
        d, big_d, L = cfg.d_step, cfg.d_seq, cfg.n_layers
        space = cfg.action_space
        if cfg.step_embed_mode is StepEmbed.PATCH:
            self.step_state = PatchEmbedding(cfg.image_size, cfg.patch_size, cfg.frame_stack, d)
        else:
            self.step_state = ConvEncoder(cfg.frame_stack, d, cfg.image_size)
        self.step_action = ActionEmbedding(space, d)
        self.step_reward = RewardEmbedding(d) if cfg.has_reward else None
        self.token_type = nn.Parameter(torch.zeros(1 + int(cfg.has_reward), d))
        self.step_blocks = nn.ModuleList(Block(d, cfg.heads_step, cfg.dropout, cfg.attn_dropout) for _ in range(L))
        n_agg = 1 if cfg.connectivity is Connectivity.STACK else L
        self.aggregate = nn.ModuleList(nn.Linear(cfg.group_size * d, big_d) for _ in range(n_agg))
        self.temporal = TemporalEmbedding(cfg.max_timestep, big_d)
        if cfg.seq_state_mode is SeqState.CONV:
            self.seq_state = ConvEncoder(cfg.frame_stack, big_d, cfg.image_size)
        elif cfg.seq_state_mode is SeqState.PATCH:
            self.seq_state = PooledPatchEncoder(cfg.image_size, cfg.patch_size, cfg.frame_stack, d, big_d)
        else:
            self.seq_state = None
        self.seq_blocks = nn.ModuleList(Block(big_d, cfg.heads_seq, cfg.dropout, cfg.attn_dropout) for _ in range(L))
        self.drop = nn.Dropout(cfg.dropout)
        self.ln_f = nn.LayerNorm(big_d)
        self.head = nn.Linear(big_d, cfg.action_dim)
        self.apply(_init_weights)
        trunc_normal_(self.token_type)

    # -- pieces exposed for testing

    def step_groups(self, batch: WindowBatch) -> torch.Tensor:
        """Initial group tokens ``(B, T, G, d)`` ordered [a_{t-1}, r_{t-1}, s^1..s^n]."""
        tokens = [self.step_action(batch.prev_actions, batch.start_mask) + self.token_type[0]]
        if self.step_reward is not None:
            tokens.append(self.step_reward(batch.prev_rewards) + self.token_type[1])
        state = self.step_state(batch.states)
        if state.dim() == 3:  # conv: one token per group
            state = state.unsqueeze(2)
        z = torch.cat([t.unsqueeze(2) for t in tokens] + [state], dim=2)
        return self.drop(z)

    def step_layer_forward(self, z: torch.Tensor, layer: int) -> torch.Tensor:
        """Apply Step layer ``layer`` to each group independently; ``z`` is ``(..., G, d)``."""
        return self.step_blocks[layer](z)

    def aggregate_star(self, z: torch.Tensor, timesteps: torch.Tensor, layer: int = 0) -> torch.Tensor:
        """Concatenate each group's tokens, map to ``D`` and add the temporal embedding."""
        flat = z.reshape(*z.shape[:-2], z.shape[-2] * z.shape[-1])
        return self.aggregate[layer](flat) + self.temporal(timesteps)

    def pure_state(self, batch: WindowBatch) -> torch.Tensor | None:
        if self.seq_state is None:
            return None
        return self.drop(self.seq_state(batch.states) + self.temporal(batch.timesteps))

    def sequence_layer_forward(
        self, g: torch.Tensor, h: torch.Tensor | None, valid: torch.Tensor, layer: int
    ) -> torch.Tensor:
        """One Sequence layer; returns the next pure-state stream ``(B, T, D)``."""
        block = self.seq_blocks[layer]
        if h is None:
            return block(g, sequence_mask(valid))
        y = interleave(g, h)
        out = block(y, sequence_mask(valid.repeat_interleave(2, dim=1)))
        return out[:, 1::2]

    # -- full pass

    def forward(self, batch: WindowBatch | TrajectoryWindow | Sequence[TrajectoryWindow]) -> torch.Tensor:
        batch = _as_batch(batch)
        self._check(batch)
        cfg = self.cfg
        valid = batch.valid_mask
        z = self.step_groups(batch)
        h = self.pure_state(batch)
        if cfg.connectivity is Connectivity.STACK:
            for layer in range(cfg.n_layers):
                z = self.step_layer_forward(z, layer)
            g = self.aggregate_star(z, batch.timesteps)
            y = interleave(g, h)
            mask = sequence_mask(valid.repeat_interleave(2, dim=1))
            for block in self.seq_blocks:
                y = block(y, mask)
            h = y[:, 1::2]
        else:
            for layer in range(cfg.n_layers):
                z = self.step_layer_forward(z, layer)
                g = self.aggregate_star(z, batch.timesteps, layer)
                if cfg.connectivity is Connectivity.FUSION_SUM:
                    h = self.seq_blocks[layer](g + h, sequence_mask(valid))
                else:
                    h = self.sequence_layer_forward(g, h, valid, layer)
        return self._head(h)


class FlatDecisionTransformer(_Base):
    """DT-style baseline: one causal transformer over ``(r, s, a)`` tokens per step.

    With ``seq_state_mode=patch`` states are embedded from pooled patch
    tokens instead of the conv encoder (the DT-with-ViT comparison).
    """

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__(cfg)
        big_d = cfg.d_seq
        if cfg.seq_state_mode is SeqState.PATCH:
            self.state_embed = PooledPatchEncoder(cfg.image_size, cfg.patch_size, cfg.frame_stack, cfg.d_step, big_d)
        else:
            self.state_embed = ConvEncoder(cfg.frame_stack, big_d, cfg.image_size)
        self.action_embed = ActionEmbedding(cfg.action_space, big_d, with_start=False)
        self.reward_embed = RewardEmbedding(big_d) if cfg.has_reward else None
        self.temporal = TemporalEmbedding(cfg.max_timestep, big_d)
        self.blocks = nn.ModuleList(Block(big_d, cfg.heads_seq, cfg.dropout, cfg.attn_dropout) for _ in range(cfg.n_layers))
        self.drop = nn.Dropout(cfg.dropout)
        self.ln_f = nn.LayerNorm(big_d)
        self.head = nn.Linear(big_d, cfg.action_dim)
        self.apply(_init_weights)

    @property
    def tokens_per_step(self) -> int:
        return 3 if self.cfg.has_reward else 2

    def forward(self, batch: WindowBatch | TrajectoryWindow | Sequence[TrajectoryWindow]) -> torch.Tensor:
        batch = _as_batch(batch)
        self._check(batch)
        b, t = batch.valid_mask.shape
        temporal = self.temporal(batch.timesteps)
        tokens = []
        if self.reward_embed is not None:
            tokens.append(self.reward_embed(batch.prev_rewards))
        tokens.append(self.state_embed(batch.states))
        tokens.append(self.action_embed(batch.actions))
        k = len(tokens)
        x = torch.stack([tok + temporal for tok in tokens], dim=2).reshape(b, k * t, -1)
        x = self.drop(x)
        mask = sequence_mask(batch.valid_mask.repeat_interleave(k, dim=1))
        for block in self.blocks:
            x = block(x, mask)
        state_out = x.reshape(b, t, k, -1)[:, :, k - 2]
        return self._head(state_out)


def build_variant(cfg: ModelConfig) -> _Base:
    cfg.validate()
    if cfg.connectivity is Connectivity.DT_FLAT:
        return FlatDecisionTransformer(cfg)
    return StARformer(cfg)


def predict(model: nn.Module, batch: WindowBatch | TrajectoryWindow | Sequence[TrajectoryWindow]) -> torch.Tensor:
    """Eval-mode forward without gradient tracking."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            return model(batch)
    finally:
        model.train(was_training)


# --------------------------------------------------------------------------
# attention maps


def extract_attention(
    model: nn.Module, window: TrajectoryWindow | WindowBatch, layer: int, head: int
) -> np.ndarray:
    """Action-token attention over patch tokens in a Step layer.

    Returns ``(T, grid, grid)`` maps; each is the action query's softmax row
    restricted to patch keys and renormalised to sum to one.
    """
    if not isinstance(model, StARformer) or model.cfg.step_embed_mode is not StepEmbed.PATCH:
        raise ConfigError("attention maps need a model with patch tokens in the Step Transformer")
    cfg = model.cfg
    if not 0 <= layer < cfg.n_layers or not 0 <= head < cfg.heads_step:
        raise IndexError(f"layer {layer} / head {head} out of range")
    batch = _as_batch(window)
    if batch.valid_mask.shape[0] != 1:
        raise ValueError("extract_attention works on a single window")
    attn = model.step_blocks[layer].attn
    attn.record = True
    try:
        predict(model, batch)
        weights = attn.last_weights
    finally:
        attn.record = False
        attn.last_weights = None
    first_patch = 1 + int(cfg.has_reward)
    row = weights[..., head, 0, first_patch:].double()  # (B*T, n)
    row = row / row.sum(dim=-1, keepdim=True)
    grid = cfg.image_size // cfg.patch_size
    return row.reshape(cfg.seq_len, grid, grid).numpy()


# --------------------------------------------------------------------------
# checkpoints


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: _Base, path: str | Path, extra: Mapping[str, Any] | None = None) -> None:
    """Write a versioned ``name -> array`` archive with the model config embedded."""
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = {"version": CHECKPOINT_VERSION, "config": model.cfg.to_dict(), "extra": dict(extra or {})}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_checkpoint(
    path: str | Path, expected: ModelConfig | None = None
) -> tuple[_Base, dict[str, Any]]:
    with np.load(path, allow_pickle=False) as data:
        if "__meta__" not in data:
            raise CheckpointError("missing checkpoint metadata")
        meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"checkpoint version {meta.get('version')} != {CHECKPOINT_VERSION}")
        cfg = ModelConfig.from_dict(meta["config"])
        if expected is not None and expected != cfg:
            raise CheckpointError(f"checkpoint config {cfg} does not match expected {expected}")
        model = build_variant(cfg)
        state = {k[len("param/"):]: torch.from_numpy(data[k].copy()) for k in data.files if k.startswith("param/")}
    own = model.state_dict()
    if set(state) != set(own):
        raise CheckpointError("checkpoint parameter names do not match the configured model")
    for k, v in state.items():
        if tuple(v.shape) != tuple(own[k].shape) or v.dtype != own[k].dtype:
            raise CheckpointError(f"parameter {k}: shape/dtype mismatch")
    model.load_state_dict(state)
    return model, meta.get("extra", {})
