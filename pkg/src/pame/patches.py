"""Patch grids, mask sampling and visible-patch embedding."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

PATCH_SIZE = 16


@dataclass
class PatchGrid:
    patch_size: int
    grid: tuple[int, int]
    patches: np.ndarray  # (rows*cols, p, p, C), row-major

    @property
    def count(self) -> int:
        return self.grid[0] * self.grid[1]

    def flat(self) -> np.ndarray:
        """Patches flattened in (row, column, channel) order."""
        return self.patches.reshape(self.count, -1)


def patchify(img: np.ndarray, patch_size: int = PATCH_SIZE) -> PatchGrid:
    img = np.asarray(img)
    if img.ndim != 3:
        raise ValueError(f"expected H x W x C image, got shape {img.shape}")
    h, w, c = img.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"image {h}x{w} is not divisible into {patch_size}x{patch_size} patches")
    rows, cols = h // patch_size, w // patch_size
    p = img.reshape(rows, patch_size, cols, patch_size, c).transpose(0, 2, 1, 3, 4)
    return PatchGrid(patch_size, (rows, cols), p.reshape(rows * cols, patch_size, patch_size, c).copy())


def unpatchify(grid: PatchGrid) -> np.ndarray:
    rows, cols = grid.grid
    p = grid.patch_size
    if grid.patches.shape[0] != rows * cols:
        raise ValueError(f"grid expects {rows * cols} patches, has {grid.patches.shape[0]}")
    c = grid.patches.shape[-1]
    img = grid.patches.reshape(rows, cols, p, p, c).transpose(0, 2, 1, 3, 4)
    return img.reshape(rows * p, cols * p, c).copy()


def patchify_batch(imgs: torch.Tensor, patch_size: int = PATCH_SIZE) -> torch.Tensor:
    """(B, H, W, C) -> (B, N, p*p*C), same ordering as :func:`patchify`."""
    b, h, w, c = imgs.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"image {h}x{w} is not divisible into {patch_size}x{patch_size} patches")
    rows, cols = h // patch_size, w // patch_size
    x = imgs.reshape(b, rows, patch_size, cols, patch_size, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, rows * cols, patch_size * patch_size * c)


def unpatchify_batch(x: torch.Tensor, grid: tuple[int, int], patch_size: int = PATCH_SIZE) -> torch.Tensor:
    b, n, d = x.shape
    rows, cols = grid
    c = d // (patch_size * patch_size)
    x = x.reshape(b, rows, cols, patch_size, patch_size, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, rows * patch_size, cols * patch_size, c)


# ---------------------------------------------------------------------------
# masking


@dataclass(frozen=True)
class MaskPlan:
    total: int
    visible_idx: tuple[int, ...]
    masked_idx: tuple[int, ...]
    ratio: float
    seed: int | None

    def to_json(self) -> str:
        return json.dumps({"seed": self.seed, "ratio": self.ratio, "total": self.total,
                           "masked_idx": list(self.masked_idx)})

    @classmethod
    def from_json(cls, text: str) -> "MaskPlan":
        d = json.loads(text)
        masked = tuple(d["masked_idx"])
        hidden = set(masked)
        visible = tuple(i for i in range(d["total"]) if i not in hidden)
        return cls(d["total"], visible, masked, d["ratio"], d["seed"])


def sample_mask(total: int, ratio: float = 0.5, seed: int | None = None,
                rng: np.random.Generator | None = None) -> MaskPlan:
    """Mask floor(ratio * total) patches chosen uniformly without replacement."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1), got {ratio}")
    if rng is None:
        rng = np.random.default_rng(seed)
    n_masked = int(np.floor(ratio * total))
    perm = rng.permutation(total)
    masked = np.sort(perm[:n_masked])
    visible = np.sort(perm[n_masked:])
    return MaskPlan(total, tuple(int(i) for i in visible), tuple(int(i) for i in masked), ratio, seed)


# ---------------------------------------------------------------------------
# positional embedding


def _sincos_1d(dim: int, pos: np.ndarray) -> np.ndarray:
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    out = np.einsum("m,d->md", pos.reshape(-1).astype(np.float64), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_pos_embed_2d(dim: int, grid: tuple[int, int]) -> np.ndarray:
    """Fixed 2D sine-cosine table, one row per patch position in row-major order."""
    if dim % 4:
        raise ValueError(f"embedding width must be divisible by 4, got {dim}")
    rows, cols = grid
    gy, gx = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    return np.concatenate([_sincos_1d(dim // 2, gy), _sincos_1d(dim // 2, gx)], axis=1)


@dataclass
class PatchEmbedding:
    vectors: torch.Tensor  # (num_visible, D)
    positions: tuple[int, ...]

    @property
    def dim(self) -> int:
        return self.vectors.shape[-1]


class PatchEmbed(nn.Module):
    """Linear projection of flattened patches plus a fixed sine-cosine positional table."""

    def __init__(self, dim: int, grid: tuple[int, int] = (14, 14), patch_size: int = PATCH_SIZE, in_chans: int = 3):
        super().__init__()
        self.grid = tuple(grid)
        self.patch_size = patch_size
        self.in_dim = patch_size * patch_size * in_chans
        self.proj = nn.Linear(self.in_dim, dim)
        # fixed table kept in float64 outside the state dict; cast at use so .double() stays exact
        self._pe = torch.from_numpy(sincos_pos_embed_2d(dim, self.grid))
        nn.init.trunc_normal_(self.proj.weight, std=0.02)
        nn.init.zeros_(self.proj.bias)

    @property
    def num_patches(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def pos_embed(self) -> torch.Tensor:
        return self._pe

    def forward(self, patches: torch.Tensor, idx: torch.Tensor | None = None) -> torch.Tensor:
        """patches: (B, N, p*p*C) for all positions; idx: (B, K) positions to keep, or None for all."""
        if patches.shape[-1] != self.in_dim:
            raise ValueError(f"patch vectors have {patches.shape[-1]} values, expected {self.in_dim}")
        pe = self._pe.to(device=patches.device, dtype=patches.dtype)
        if idx is None:
            return self.proj(patches) + pe
        kept = torch.gather(patches, 1, idx.unsqueeze(-1).expand(-1, -1, patches.shape[-1]))
        return self.proj(kept) + pe[idx]


def embed_visible(grid: PatchGrid, plan: MaskPlan, embed: PatchEmbed) -> PatchEmbedding:
    if plan.total != grid.count:
        raise ValueError(f"plan covers {plan.total} patches, grid has {grid.count}")
    param = embed.proj.weight
    patches = torch.as_tensor(grid.flat(), dtype=param.dtype).unsqueeze(0)
    idx = torch.tensor(plan.visible_idx, dtype=torch.long).unsqueeze(0)
    vectors = embed(patches, idx)[0]
    return PatchEmbedding(vectors, plan.visible_idx)
