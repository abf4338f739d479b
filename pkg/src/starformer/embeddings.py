"""Token producers: patch tokenizer, conv state encoder, action/reward and positional embeddings."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from starformer.trajectory import ActionSpace

INIT_STD = 0.02


def trunc_normal_(t: torch.Tensor) -> torch.Tensor:
    return nn.init.trunc_normal_(t, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD)


def extract_patches(state, patch_size: int):
    """Split ``(..., H, W, C)`` images into raster-ordered flattened patches.

    Returns ``(..., n, p*p*C)`` with ``n = (H/p) * (W/p)``. Each patch is
    flattened row-major over (row, col, channel). Works for numpy arrays and
    torch tensors.
    """
    *lead, h, w, c = state.shape
    p = patch_size
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} is not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = state.reshape(*lead, gh, p, gw, p, c)
    k = len(lead)
    perm = tuple(range(k)) + (k, k + 2, k + 1, k + 3, k + 4)
    x = x.transpose(perm) if isinstance(x, np.ndarray) else x.permute(perm)
    return x.reshape(*lead, gh * gw, p * p * c)


def conv_output_size(n: int, kernel: int, stride: int) -> int:
    return (n - kernel) // stride + 1


class PatchEmbedding(nn.Module):
    """Linear projection of flattened patches plus learnable spatial positions."""

    def __init__(self, image_size: int, patch_size: int, channels: int, dim: int) -> None:
        super().__init__()
        if image_size % patch_size:
            raise ValueError(f"image size {image_size} not divisible by patch size {patch_size}")
        self.patch_size = patch_size
        self.grid = image_size // patch_size
        self.num_patches = self.grid * self.grid
        self.proj = nn.Linear(patch_size * patch_size * channels, dim)
        self.pos = nn.Parameter(torch.zeros(self.num_patches, dim))
        trunc_normal_(self.pos)

    def forward(self, states: torch.Tensor) -> torch.Tensor:
        """``(..., H, W, C)`` -> ``(..., n, dim)``."""
        patches = extract_patches(states, self.patch_size)
        if patches.shape[-1] != self.proj.in_features:
            raise ValueError(f"patch dim {patches.shape[-1]} != {self.proj.in_features}")
        return self.proj(patches) + self.pos


class ConvEncoder(nn.Module):
    """Three-layer convolutional trunk (32x8/4, 64x4/2, 64x3/1) followed by an affine map."""

    def __init__(self, channels: int, out_dim: int, image_size: int = 84) -> None:
        super().__init__()
        self.image_size = image_size
        self.trunk = nn.Sequential(
            nn.Conv2d(channels, 32, 8, stride=4),
            nn.ReLU(),
            nn.Conv2d(32, 64, 4, stride=2),
            nn.ReLU(),
            nn.Conv2d(64, 64, 3, stride=1),
            nn.ReLU(),
            nn.Flatten(),
        )
        side = image_size
        for k, s in ((8, 4), (4, 2), (3, 1)):
            side = conv_output_size(side, k, s)
        if side < 1:
            raise ValueError(f"image size {image_size} too small for the conv trunk")
        self.feature_dim = 64 * side * side
        self.fc = nn.Linear(self.feature_dim, out_dim)

    def features(self, states: torch.Tensor) -> torch.Tensor:
        """Flattened post-ReLU feature maps for ``(..., H, W, C)`` inputs."""
        *lead, h, w, c = states.shape
        if (h, w) != (self.image_size, self.image_size):
            raise ValueError(f"expected {self.image_size}x{self.image_size} input, got {h}x{w}")
        x = states.reshape(-1, h, w, c).permute(0, 3, 1, 2)
        return self.trunk(x).reshape(*lead, self.feature_dim)

    def forward(self, states: torch.Tensor) -> torch.Tensor:
        return self.fc(self.features(states))


class PooledPatchEncoder(nn.Module):
    """Global state summary from patch tokens: mean over tokens, then affine."""

    def __init__(self, image_size: int, patch_size: int, channels: int, patch_dim: int, out_dim: int) -> None:
        super().__init__()
        self.patches = PatchEmbedding(image_size, patch_size, channels, patch_dim)
        self.fc = nn.Linear(patch_dim, out_dim)

    def forward(self, states: torch.Tensor) -> torch.Tensor:
        return self.fc(self.patches(states).mean(dim=-2))


class ActionEmbedding(nn.Module):
    """Discrete: table of ``A + 1`` rows (last row is the episode-start sentinel).
    Continuous: affine map, with a learned vector substituted at episode start.
    ``with_start=False`` drops the sentinel for streams that only embed taken actions.
    """

    def __init__(self, space: ActionSpace, dim: int, with_start: bool = True) -> None:
        super().__init__()
        self.space = space
        self.start = None
        if space.discrete:
            self.table = nn.Embedding(space.dim + int(with_start), dim)
        else:
            self.fc = nn.Linear(space.dim, dim)
            if with_start:
                self.start = nn.Parameter(torch.zeros(dim))
                trunc_normal_(self.start)

    def forward(self, actions: torch.Tensor, start_mask: torch.Tensor | None = None) -> torch.Tensor:
        if self.space.discrete:
            top = self.table.num_embeddings - 1
            if actions.numel() and (actions.min() < 0 or actions.max() > top):
                raise IndexError(f"action index outside [0, {top}]")
            return self.table(actions)
        out = self.fc(actions)
        if start_mask is not None and self.start is not None:
            out = torch.where(start_mask.unsqueeze(-1), self.start.to(out.dtype), out)
        return out


class RewardEmbedding(nn.Module):
    def __init__(self, dim: int) -> None:
        super().__init__()
        self.fc = nn.Linear(1, dim)

    def forward(self, rewards: torch.Tensor) -> torch.Tensor:
        return self.fc(rewards.unsqueeze(-1))


class TemporalEmbedding(nn.Module):
    """Learnable per-timestep vectors, shared by StAR and pure-state tokens."""

    def __init__(self, max_timestep: int, dim: int) -> None:
        super().__init__()
        self.table = nn.Parameter(torch.zeros(max_timestep, dim))
        trunc_normal_(self.table)

    def forward(self, timesteps: torch.Tensor) -> torch.Tensor:
        if timesteps.numel() and timesteps.max() >= self.table.shape[0]:
            raise IndexError(f"timestep {int(timesteps.max())} exceeds table size {self.table.shape[0]}")
        return self.table[timesteps]
