"""Dual-branch masked-autoencoder pre-training on paired distorted/reference renders."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import geometry as geo
from .backbone import (DecoderConfig, Decoder, Encoder, EncoderConfig, PatchProjection, read_checkpoint,
                       load_state_checked, save_checkpoint)
from .patches import PATCH_SIZE, MaskPlan, PatchEmbed, PatchGrid, patchify_batch, sample_mask, unpatchify, \
    unpatchify_batch

log = logging.getLogger(__name__)

LOSS_LOG_FIELDS = ("step", "epoch", "loss", "loss_x", "loss_y", "lr")


@dataclass
class PretrainConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    alpha: float = 0.7
    mask_ratio: float = 0.5
    lr: float = 3e-4
    weight_decay: float = 1e-4
    batch_size: int = 16
    epochs: int = 200
    max_steps: int | None = None
    views: int = 12
    resolution: int = 512
    crop: int = 224
    random_crop: bool = False
    splat_radius: int = 2
    lr_schedule: str = "constant"
    grad_clip: float | None = 1.0
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if isinstance(self.decoder, dict):
            self.decoder = DecoderConfig(**self.decoder)
        checks = {
            "alpha": 0.0 <= self.alpha <= 1.0,
            "mask_ratio": 0.0 <= self.mask_ratio < 1.0,
            "lr": self.lr >= 0.0,
            "weight_decay": self.weight_decay >= 0.0,
            "batch_size": self.batch_size >= 1,
            "epochs": self.epochs >= 0,
            "max_steps": self.max_steps is None or self.max_steps >= 0,
            "views": self.views >= 1,
            "resolution": self.resolution >= 1,
            "crop": 1 <= self.crop <= self.resolution and self.crop % PATCH_SIZE == 0,
            "lr_schedule": self.lr_schedule in ("constant", "cosine"),
            "grad_clip": self.grad_clip is None or self.grad_clip > 0,
        }
        bad = [k for k, ok in checks.items() if not ok]
        if bad:
            raise ValueError("invalid pretrain config field(s): " + ", ".join(f"{k}={getattr(self, k)!r}" for k in bad))

    @property
    def grid(self) -> tuple[int, int]:
        return (self.crop // PATCH_SIZE, self.crop // PATCH_SIZE)


# ---------------------------------------------------------------------------
# reassembly and loss


@dataclass
class ReconOutput:
    assembled_distorted: torch.Tensor
    assembled_reference: torch.Tensor
    loss_x: torch.Tensor
    loss_y: torch.Tensor
    loss: torch.Tensor


def assemble(pred, grid: PatchGrid, plan: MaskPlan) -> np.ndarray:
    """Masked positions take predictions; visible positions keep the original patches."""
    pred = np.asarray(pred)
    if plan.total != grid.count or pred.shape[0] != grid.count:
        raise ValueError(f"plan ({plan.total}), grid ({grid.count}) and predictions ({pred.shape[0]}) disagree")
    patches = grid.patches.copy()
    masked = list(plan.masked_idx)
    patches[masked] = pred.reshape(patches.shape)[masked]
    return unpatchify(PatchGrid(grid.patch_size, grid.grid, patches))


def assemble_batch(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """pred, target: (B, N, P) flattened patches; mask: (B, N) bool, True where masked."""
    return torch.where(mask.unsqueeze(-1), pred, target)


def recon_loss(assembled_x, image_x, assembled_y, image_y, alpha: float = 0.7) -> ReconOutput:
    """alpha * mean((Î_X - I_X)^2) + (1 - alpha) * mean((Î_Y - I_Y)^2)."""
    assembled_x, image_x, assembled_y, image_y = (torch.as_tensor(t) for t in (assembled_x, image_x, assembled_y, image_y))
    if not (assembled_x.shape == image_x.shape == assembled_y.shape == image_y.shape):
        raise ValueError(f"image shapes differ: {tuple(assembled_x.shape)}, {tuple(image_x.shape)}, "
                         f"{tuple(assembled_y.shape)}, {tuple(image_y.shape)}")
    loss_x = ((assembled_x - image_x) ** 2).mean()
    loss_y = ((assembled_y - image_y) ** 2).mean()
    return ReconOutput(assembled_x, assembled_y, loss_x, loss_y, alpha * loss_x + (1.0 - alpha) * loss_y)


# ---------------------------------------------------------------------------
# model


class PameModel(nn.Module):
    """Shared patch embedding feeding a distortion-aware and a content-aware autoencoder."""

    def __init__(self, enc_cfg: EncoderConfig, dec_cfg: DecoderConfig, grid: tuple[int, int] = (14, 14)):
        super().__init__()
        self.enc_cfg, self.dec_cfg, self.grid = enc_cfg, dec_cfg, tuple(grid)
        self.embed = PatchEmbed(enc_cfg.width, self.grid)
        self.enc_distortion = Encoder(enc_cfg)
        self.enc_content = Encoder(enc_cfg)
        self.dec_distortion = Decoder(enc_cfg.width, dec_cfg, self.grid)
        self.dec_content = Decoder(enc_cfg.width, dec_cfg, self.grid)
        self.proj_distortion = PatchProjection(dec_cfg.width)
        self.proj_content = PatchProjection(dec_cfg.width)

    def forward(self, distorted: torch.Tensor, reference: torch.Tensor, visible_idx: torch.Tensor,
                alpha: float = 0.7) -> ReconOutput:
        """distorted, reference: (B, H, W, 3) in [0, 1]; visible_idx: (B, K) sorted positions."""
        px = patchify_batch(distorted)
        py = patchify_batch(reference)
        b, n, _ = px.shape
        mask = torch.ones(b, n, dtype=torch.bool, device=px.device)
        mask.scatter_(1, visible_idx, False)

        tokens = self.embed(px, visible_idx)
        pred_x = self.proj_distortion(self.dec_distortion(self.enc_distortion(tokens), visible_idx))
        pred_y = self.proj_content(self.dec_content(self.enc_content(tokens), visible_idx))

        img_x = unpatchify_batch(assemble_batch(pred_x, px, mask), self.grid)
        img_y = unpatchify_batch(assemble_batch(pred_y, py, mask), self.grid)
        return recon_loss(img_x, distorted, img_y, reference, alpha)

    def predict_masked(self, distorted: torch.Tensor, visible_idx: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Flattened patch predictions of both branches, (B, N, P) each."""
        tokens = self.embed(patchify_batch(distorted), visible_idx)
        pred_x = self.proj_distortion(self.dec_distortion(self.enc_distortion(tokens), visible_idx))
        pred_y = self.proj_content(self.dec_content(self.enc_content(tokens), visible_idx))
        return pred_x, pred_y


# ---------------------------------------------------------------------------
# data


@dataclass
class PretrainPair:
    sample_id: str
    distorted: geo.PointCloud
    reference: geo.PointCloud


class PairedViews:
    """Renders every pair once under the reference's normalization and keeps uint8 views."""

    def __init__(self, pairs: list[PretrainPair], cfg: PretrainConfig, cache_dir: str | Path | None = None):
        if not pairs:
            raise ValueError("pre-training dataset is empty")
        self.cfg = cfg
        self.ids = [p.sample_id for p in pairs]
        cams = geo.rig_evenly_distributed(cfg.views)
        size = None if cfg.random_crop else cfg.crop
        xs, ys = [], []
        for p in pairs:
            cached = None if cache_dir is None else Path(cache_dir) / (f"{p.sample_id}_v{cfg.views}_r{cfg.resolution}_"
                                                                 f"c{size}_s{cfg.splat_radius}.npz")
            if cached is not None and cached.exists():
                with np.load(cached) as z:
                    x, y = z["x"], z["y"]
            else:
                _, t = geo.normalize_to_unit_sphere(p.reference)
                y = geo.render_crops(p.reference, cams, cfg.resolution, size, transform=t, splat_radius=cfg.splat_radius)
                x = geo.render_crops(p.distorted, cams, cfg.resolution, size, transform=t, splat_radius=cfg.splat_radius)
                if cached is not None:
                    cached.parent.mkdir(parents=True, exist_ok=True)
                    np.savez_compressed(cached, x=x, y=y)
            xs.append(x)
            ys.append(y)
        self.x = np.stack(xs)  # (S, V, H, W, 3) uint8
        self.y = np.stack(ys)

    def __len__(self):
        return len(self.ids)

    def subset(self, idx) -> "PairedViews":
        """Views of the selected pairs, without re-rendering."""
        idx = list(idx)
        out = object.__new__(PairedViews)
        out.cfg, out.ids = self.cfg, [self.ids[i] for i in idx]
        out.x, out.y = self.x[idx], self.y[idx]
        return out

    def pair(self, i: int, view: int, rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
        x, y = self.x[i, view], self.y[i, view]
        if self.cfg.random_crop:
            w = geo.crop_window(self.cfg.resolution, self.cfg.crop, "random", int(rng.integers(2**31)))
            sl = (slice(w.top, w.top + w.size), slice(w.left, w.left + w.size))
            x, y = x[sl], y[sl]
        return x, y


@dataclass
class PretrainBatch:
    distorted_views: torch.Tensor  # (B, H, W, 3)
    reference_views: torch.Tensor
    plans: list[MaskPlan]
    ids: list[str]

    def visible_index(self) -> torch.Tensor:
        return torch.tensor([p.visible_idx for p in self.plans], dtype=torch.long)


def make_batch(data: PairedViews, items: list[int], views: list[int], rng: np.random.Generator,
               cfg: PretrainConfig) -> PretrainBatch:
    xs, ys, plans = [], [], []
    n = cfg.grid[0] * cfg.grid[1]
    for i, v in zip(items, views):
        x, y = data.pair(i, v, rng)
        xs.append(x)
        ys.append(y)
        plans.append(sample_mask(n, cfg.mask_ratio, rng=rng))
    to_t = lambda a: torch.from_numpy(np.stack(a).astype(np.float32) / 255.0)
    return PretrainBatch(to_t(xs), to_t(ys), plans, [f"{data.ids[i]}@v{v}" for i, v in zip(items, views)])


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class StepResult:
    loss: float
    loss_x: float
    loss_y: float
    grad_norm: float
    clipped: bool


def make_optimizer(model: nn.Module, lr: float, weight_decay: float) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=lr, weight_decay=weight_decay)


def pretrain_step(batch: PretrainBatch, model: PameModel, optimizer: torch.optim.Optimizer,
                  alpha: float = 0.7, grad_clip: float | None = 1.0) -> StepResult:
    model.train()
    out = model(batch.distorted_views, batch.reference_views, batch.visible_index(), alpha)
    if not torch.isfinite(out.loss):
        raise FloatingPointError(f"non-finite pre-training loss {out.loss.item()} (loss_x={out.loss_x.item()}, "
                                 f"loss_y={out.loss_y.item()}) on batch {batch.ids}")
    optimizer.zero_grad(set_to_none=True)
    out.loss.backward()
    norm = torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip if grad_clip else float("inf"))
    clipped = grad_clip is not None and float(norm) > grad_clip
    if clipped:
        log.debug("gradient norm %.4g clipped to %.3g", float(norm), grad_clip)
    optimizer.step()
    return StepResult(out.loss.item(), out.loss_x.item(), out.loss_y.item(), float(norm), clipped)


def _lr_at(cfg: PretrainConfig, step: int, total: int) -> float:
    if cfg.lr_schedule == "cosine" and total > 0:
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * min(step, total) / total))
    return cfg.lr


@dataclass
class PretrainResult:
    model: PameModel
    log: list[dict]
    checkpoint: Path | None


def build_model(cfg: PretrainConfig) -> PameModel:
    torch.manual_seed(cfg.seed)
    return PameModel(cfg.encoder, cfg.decoder, cfg.grid)


def pretrain(cfg: PretrainConfig, data: PairedViews, out_dir: str | Path | None = None,
             resume: str | Path | None = None) -> PretrainResult:
    """Run the masked-autoencoding loop; one random view per cloud per epoch."""
    model = build_model(cfg)
    optimizer = make_optimizer(model, cfg.lr, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(len(data) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)

    step, start_epoch, rows = 0, 0, []
    if resume is not None:
        ck = read_checkpoint(resume)
        load_state_checked(model, ck["state_dict"])
        optimizer.load_state_dict(ck["optimizer"])
        rng.bit_generator.state = ck["rng_state"]
        step, start_epoch, rows = ck["step"], ck["epoch"], list(ck.get("log", []))

    out_dir = None if out_dir is None else Path(out_dir)
    ckpt_path = None
    epoch = start_epoch
    while step < total:
        order = rng.permutation(len(data))
        views = rng.integers(0, cfg.views, size=len(data))
        for s in range(0, len(data), cfg.batch_size):
            if step >= total:
                break
            lr = _lr_at(cfg, step, total)
            for g in optimizer.param_groups:
                g["lr"] = lr
            items = order[s:s + cfg.batch_size].tolist()
            batch = make_batch(data, items, views[items].tolist(), rng, cfg)
            res = pretrain_step(batch, model, optimizer, cfg.alpha, cfg.grad_clip)
            step += 1
            rows.append({"step": step, "epoch": epoch, "loss": res.loss, "loss_x": res.loss_x,
                         "loss_y": res.loss_y, "lr": lr})
            log.info("step %d epoch %d loss %.5f (x %.5f, y %.5f)%s", step, epoch, res.loss, res.loss_x,
                     res.loss_y, " [clipped]" if res.clipped else "")
        epoch += 1

    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_loss_log(out_dir / "loss.csv", rows)
        ckpt_path = out_dir / "checkpoints" / "pretrain.pt"
        save_checkpoint(ckpt_path, model, {"pretrain": asdict(cfg)},
                        extra={"kind": "pretrain", "optimizer": optimizer.state_dict(),
                               "rng_state": rng.bit_generator.state, "step": step, "epoch": epoch, "log": rows})
    return PretrainResult(model, rows, ckpt_path)


def write_loss_log(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOSS_LOG_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in LOSS_LOG_FIELDS})


@torch.no_grad()
def masked_patch_mse(model: PameModel, images: torch.Tensor, plans: list[MaskPlan]) -> tuple[float, float]:
    """MSE of the distortion branch on masked patches, and of predicting each image's mean visible colour."""
    model.eval()
    idx = torch.tensor([p.visible_idx for p in plans], dtype=torch.long)
    pred, _ = model.predict_masked(images, idx)
    target = patchify_batch(images)
    b, n, d = target.shape
    mask = torch.ones(b, n, dtype=torch.bool)
    mask.scatter_(1, idx, False)
    vis = target.reshape(b, n, -1, 3)
    mean_color = torch.stack([vis[i][~mask[i]].reshape(-1, 3).mean(0) for i in range(b)])
    baseline = mean_color[:, None, None, :].expand(b, n, d // 3, 3).reshape(b, n, d)
    err_model = ((pred - target) ** 2)[mask].mean().item()
    err_base = ((baseline - target) ** 2)[mask].mean().item()
    return err_model, err_base
