"""Transformer blocks, encoders, mask-token decoders, patch projection and cross-attention."""

from __future__ import annotations

import dataclasses
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .patches import MaskPlan, PatchEmbedding, sincos_pos_embed_2d

CHECKPOINT_FORMAT = 1


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 12
    width: int = 768
    heads: int = 12
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.depth < 0 or self.width < 1 or self.heads < 1:
            raise ValueError(f"invalid encoder config {self}")
        if self.width % self.heads:
            raise ValueError(f"encoder width {self.width} not divisible by {self.heads} heads")


@dataclass(frozen=True)
class DecoderConfig:
    depth: int = 4
    width: int = 512
    heads: int = 8
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.depth < 0 or self.width < 1 or self.heads < 1:
            raise ValueError(f"invalid decoder config {self}")
        if self.width % self.heads:
            raise ValueError(f"decoder width {self.width} not divisible by {self.heads} heads")


@dataclass
class TokenSequence:
    tokens: torch.Tensor  # (T, D)
    positions: tuple[int, ...]


def init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(d // self.heads)
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, t, d))


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm block: x + MSA(LN(x)), then + MLP(LN(.))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        if not torch.isfinite(x).all():
            bad = (~torch.isfinite(x)).sum().item()
            raise FloatingPointError(f"transformer block produced {bad} non-finite activations "
                                     f"(input max |x| = {x.detach().abs().nan_to_num().max().item():.3g})")
        return x


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.blocks = nn.ModuleList([Block(cfg.width, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)])
        self.apply(init_weights)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.cfg.width:
            raise ValueError(f"token width {x.shape[-1]} does not match encoder width {self.cfg.width}")
        for blk in self.blocks:
            x = blk(x)
        return x


class Decoder(nn.Module):
    """Projects visible latents to decoder width, fills masked slots with a shared mask token,
    adds positional embedding for every patch, and runs the decoder blocks."""

    def __init__(self, in_width: int, cfg: DecoderConfig, grid: tuple[int, int] = (14, 14)):
        super().__init__()
        self.cfg = cfg
        self.grid = tuple(grid)
        self.embed = nn.Linear(in_width, cfg.width)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, cfg.width))
        self.pos_embed = torch.from_numpy(sincos_pos_embed_2d(cfg.width, self.grid))  # fixed, float64
        self.blocks = nn.ModuleList([Block(cfg.width, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)])
        self.apply(init_weights)
        nn.init.normal_(self.mask_token, std=0.02)

    @property
    def num_patches(self) -> int:
        return self.grid[0] * self.grid[1]

    def forward(self, latent: torch.Tensor, visible_idx: torch.Tensor) -> torch.Tensor:
        """latent: (B, K, in_width) in the order of visible_idx (B, K). Returns (B, N, width)."""
        b, k, _ = latent.shape
        if visible_idx.shape != (b, k):
            raise ValueError(f"visible index shape {tuple(visible_idx.shape)} does not match latent {(b, k)}")
        x = self.embed(latent)
        full = self.mask_token.to(x.dtype).expand(b, self.num_patches, -1)
        full = full.scatter(1, visible_idx.unsqueeze(-1).expand(-1, -1, x.shape[-1]), x)
        full = full + self.pos_embed.to(device=x.device, dtype=x.dtype)
        for blk in self.blocks:
            full = blk(full)
        return full


class PatchProjection(nn.Module):
    """One affine layer from decoder tokens to patch pixels, flattened (row, column, channel)."""

    def __init__(self, width: int, patch_size: int = 16, in_chans: int = 3):
        super().__init__()
        self.patch_size = patch_size
        self.in_chans = in_chans
        self.linear = nn.Linear(width, patch_size * patch_size * in_chans)
        init_weights(self.linear)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.linear(x)

    def as_patches(self, x: torch.Tensor) -> torch.Tensor:
        out = self.linear(x)
        return out.reshape(*out.shape[:-1], self.patch_size, self.patch_size, self.in_chans)


class CrossAttention(nn.Module):
    """Multi-head scaled dot-product cross-attention with an output projection to ``out_dim``."""

    def __init__(self, dim: int, heads: int = 8, out_dim: int = 1024):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dimension {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, out_dim)
        self.apply(init_weights)

    def forward(self, query: torch.Tensor, keys: torch.Tensor, values: torch.Tensor,
                return_weights: bool = False):
        """query (B, Q, d); keys, values (B, K, d). Returns (B, Q, out_dim) [and (B, H, Q, K) weights]."""
        b, nq, d = query.shape
        nk = keys.shape[1]
        if keys.shape[-1] != d or values.shape[-1] != d or values.shape[1] != nk:
            raise ValueError(f"shape mismatch: query {tuple(query.shape)}, keys {tuple(keys.shape)}, "
                             f"values {tuple(values.shape)}")
        if nk < 1:
            raise ValueError("cross-attention needs at least one key")
        hd = d // self.heads
        q = self.q(query).reshape(b, nq, self.heads, hd).transpose(1, 2)
        k = self.k(keys).reshape(b, nk, self.heads, hd).transpose(1, 2)
        v = self.v(values).reshape(b, nk, self.heads, hd).transpose(1, 2)
        w = ((q @ k.transpose(-2, -1)) / math.sqrt(hd)).softmax(dim=-1)
        out = self.out((w @ v).transpose(1, 2).reshape(b, nq, d))
        return (out, w) if return_weights else out


# ---------------------------------------------------------------------------
# single-sample functional surface


def transformer_block(x: TokenSequence, block: Block) -> TokenSequence:
    return TokenSequence(block(x.tokens.unsqueeze(0))[0], x.positions)


def encode(x: PatchEmbedding, encoder: Encoder) -> TokenSequence:
    return TokenSequence(encoder(x.vectors.unsqueeze(0))[0], x.positions)


def decode(latent: TokenSequence, plan: MaskPlan, decoder: Decoder) -> TokenSequence:
    if tuple(latent.positions) != tuple(plan.visible_idx):
        raise ValueError("latent positions do not match the plan's visible indices")
    if plan.total != decoder.num_patches:
        raise ValueError(f"plan covers {plan.total} patches, decoder expects {decoder.num_patches}")
    idx = torch.tensor(latent.positions, dtype=torch.long).unsqueeze(0)
    out = decoder(latent.tokens.unsqueeze(0), idx)[0]
    return TokenSequence(out, tuple(range(plan.total)))


def project_patches(decoded: TokenSequence, head: PatchProjection) -> torch.Tensor:
    if decoded.tokens.shape[-1] != head.linear.in_features:
        raise ValueError(f"token width {decoded.tokens.shape[-1]} != projection input {head.linear.in_features}")
    return head.as_patches(decoded.tokens)


def mca(query: torch.Tensor, keys: torch.Tensor, values: torch.Tensor, attn: CrossAttention,
        return_weights: bool = False):
    """Unbatched cross-attention: query (Q, d), keys/values (K, d)."""
    res = attn(query.unsqueeze(0), keys.unsqueeze(0), values.unsqueeze(0), return_weights=return_weights)
    if return_weights:
        return res[0][0], res[1][0]
    return res[0]


# ---------------------------------------------------------------------------
# checkpoints


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, model: nn.Module, configs: dict, extra: dict | None = None) -> None:
    """Atomically write parameters, a config echo and a format version."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT,
        "configs": {k: dataclasses.asdict(v) if dataclasses.is_dataclass(v) else v for k, v in configs.items()},
        "state_dict": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
    }
    if extra:
        payload.update(extra)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(payload, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def read_checkpoint(path: str | Path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format_version") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unsupported checkpoint format")
    return payload


def load_state_checked(model: nn.Module, state: dict, prefix: str = "", strict: bool = True) -> list[str]:
    """Copy tensors whose names start with ``prefix`` into ``model`` after verifying shapes."""
    own = model.state_dict()
    picked = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
    for k, v in picked.items():
        if k in own and own[k].shape != v.shape:
            raise CheckpointError(f"shape mismatch for {prefix}{k}: checkpoint {tuple(v.shape)} "
                                  f"vs model {tuple(own[k].shape)}")
    missing = sorted(set(own) - set(picked))
    unexpected = sorted(set(picked) - set(own))
    if strict and (missing or unexpected):
        raise CheckpointError(f"checkpoint/model mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
    model.load_state_dict({k: v for k, v in picked.items() if k in own}, strict=False)
    return missing


def load_mim_weights(encoder: Encoder, state: dict) -> int:
    """Load transformer blocks from an externally produced ViT/MAE state dict.

    Keys follow the common ``blocks.{i}.norm1.weight`` / ``blocks.{i}.attn.qkv.weight`` layout,
    optionally wrapped under ``model``. Returns the number of tensors loaded.
    """
    if "model" in state and isinstance(state["model"], dict):
        state = state["model"]
    own = encoder.state_dict()
    picked = {k: v for k, v in state.items() if k in own}
    if not picked:
        raise CheckpointError("no encoder block weights found in the supplied state dict")
    for k, v in picked.items():
        if own[k].shape != v.shape:
            raise CheckpointError(f"shape mismatch for {k}: {tuple(v.shape)} vs {tuple(own[k].shape)}")
    encoder.load_state_dict(picked, strict=False)
    return len(picked)


def conv_patch_weight_to_linear(weight: torch.Tensor) -> torch.Tensor:
    """Convert a (D, C, p, p) patch convolution kernel to a (D, p*p*C) linear weight in
    (row, column, channel) flatten order."""
    d = weight.shape[0]
    return weight.permute(0, 2, 3, 1).reshape(d, -1)
