"""Six-view fine-tuning: encode with both branches, fuse by cross-attention, regress quality."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import geometry as geo
from .backbone import (CrossAttention, Encoder, EncoderConfig, init_weights, load_state_checked,
                       read_checkpoint, save_checkpoint, CheckpointError)
from .eval import srocc
from .patches import PATCH_SIZE, PatchEmbed, patchify_batch

log = logging.getLogger(__name__)

NUM_VIEWS = 6
BRANCH_CHOICES = ("both", "content", "distortion", "none")
FUSION_CHOICES = ("mca", "maxpool-concat")
LOSS_CHOICES = ("mse+rank", "mse")


@dataclass
class FinetuneConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    lr: float = 3e-3
    weight_decay: float = 1e-4
    batch_size: int = 16
    epochs: int = 150
    max_steps: int | None = None
    beta: float = 0.5
    heads: int = 8
    fused_dim: int = 1024
    hidden: int = 128
    resolution: int = 512
    crop: int = 224
    splat_radius: int = 2
    grad_clip: float | None = 1.0
    lr_schedule: str = "constant"
    branches: str = "both"
    fusion: str = "mca"
    loss: str = "mse+rank"
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        checks = {
            "lr": self.lr >= 0.0,
            "weight_decay": self.weight_decay >= 0.0,
            "batch_size": self.batch_size >= 1,
            "epochs": self.epochs >= 0,
            "max_steps": self.max_steps is None or self.max_steps >= 0,
            "beta": 0.0 <= self.beta <= 1.0,
            "heads": self.heads >= 1 and self.encoder.width % self.heads == 0,
            "fused_dim": self.fused_dim >= 1,
            "hidden": self.hidden >= 1,
            "crop": 1 <= self.crop <= self.resolution and self.crop % PATCH_SIZE == 0,
            "grad_clip": self.grad_clip is None or self.grad_clip > 0,
            "lr_schedule": self.lr_schedule in ("constant", "cosine"),
            "branches": self.branches in BRANCH_CHOICES,
            "fusion": self.fusion in FUSION_CHOICES,
            "loss": self.loss in LOSS_CHOICES,
        }
        bad = [k for k, ok in checks.items() if not ok]
        if bad:
            raise ValueError("invalid finetune config field(s): " + ", ".join(f"{k}={getattr(self, k)!r}" for k in bad))

    @property
    def grid(self) -> tuple[int, int]:
        return (self.crop // PATCH_SIZE, self.crop // PATCH_SIZE)

    @property
    def effective_beta(self) -> float:
        return 1.0 if self.loss == "mse" else self.beta


# ---------------------------------------------------------------------------
# losses


def loss_mse(pred, target) -> torch.Tensor:
    pred, target = torch.as_tensor(pred), torch.as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"length mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if pred.numel() == 0:
        raise ValueError("empty batch")
    return ((pred - target) ** 2).mean()


def loss_rank(pred, target) -> torch.Tensor:
    """(1/B^2) sum_ij max(0, |q_i - q_j| - e(q_i, q_j) (p_i - p_j)), e = +1 if q_i >= q_j else -1."""
    pred, target = torch.as_tensor(pred), torch.as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"length mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    b = pred.numel()
    if b == 0:
        raise ValueError("empty batch")
    dq = target[:, None] - target[None, :]
    dp = pred[:, None] - pred[None, :]
    sign = torch.where(dq >= 0, 1.0, -1.0).to(pred.dtype)
    return torch.clamp(dq.abs() - sign * dp, min=0).sum() / (b * b)


def loss_fine(pred, target, beta: float = 0.5) -> torch.Tensor:
    return beta * loss_mse(pred, target) + (1.0 - beta) * loss_rank(pred, target)


# ---------------------------------------------------------------------------
# model


@dataclass
class ViewFeatures:
    content: torch.Tensor  # (6, d) or (B, 6, d)
    distortion: torch.Tensor

    @property
    def d(self) -> int:
        return self.content.shape[-1]


class QualityHead(nn.Module):
    """Fusion (cross-attention or max-pool + concat) followed by a two-layer regressor."""

    def __init__(self, dim: int, heads: int = 8, fused_dim: int = 1024, hidden: int = 128, fusion: str = "mca"):
        super().__init__()
        if fusion not in FUSION_CHOICES:
            raise ValueError(f"unknown fusion {fusion!r}")
        self.fusion = fusion
        self.dim = dim
        if fusion == "mca":
            self.mca = CrossAttention(dim, heads, fused_dim)
            in_dim = fused_dim
        else:
            in_dim = 2 * dim
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, 1)
        init_weights(self.fc1)
        init_weights(self.fc2)

    def fuse(self, content: torch.Tensor, distortion: torch.Tensor) -> torch.Tensor:
        """content, distortion: (B, V, d) -> (B, fused width)."""
        if content.shape != distortion.shape or content.shape[-1] != self.dim:
            raise ValueError(f"feature shapes {tuple(content.shape)} / {tuple(distortion.shape)} "
                             f"incompatible with width {self.dim}")
        query = content.max(dim=1, keepdim=True).values
        if self.fusion == "mca":
            return self.mca(query, distortion, distortion)[:, 0]
        return torch.cat([query[:, 0], distortion.max(dim=1).values], dim=-1)

    def regress(self, fused: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(fused))).squeeze(-1)

    def forward(self, content, distortion):
        return self.regress(self.fuse(content, distortion))


class QualityModel(nn.Module):
    def __init__(self, enc_cfg: EncoderConfig, grid: tuple[int, int] = (14, 14), heads: int = 8,
                 fused_dim: int = 1024, hidden: int = 128, fusion: str = "mca"):
        super().__init__()
        self.enc_cfg, self.grid = enc_cfg, tuple(grid)
        self.embed = PatchEmbed(enc_cfg.width, self.grid)
        self.enc_distortion = Encoder(enc_cfg)
        self.enc_content = Encoder(enc_cfg)
        self.head = QualityHead(enc_cfg.width, heads, fused_dim, hidden, fusion)

    def features(self, views: torch.Tensor) -> ViewFeatures:
        """views: (B, V, H, W, 3) in [0, 1]; every patch is kept, tokens are mean-pooled per view."""
        b, v = views.shape[:2]
        tokens = self.embed(patchify_batch(views.reshape(b * v, *views.shape[2:])))
        content = self.enc_content(tokens).mean(dim=1).reshape(b, v, -1)
        distortion = self.enc_distortion(tokens).mean(dim=1).reshape(b, v, -1)
        return ViewFeatures(content, distortion)

    def forward(self, views: torch.Tensor) -> torch.Tensor:
        vf = self.features(views)
        return self.head(vf.content, vf.distortion)

    def load_pretrained(self, state: dict, branches: str = "both") -> None:
        """Copy the shared embedding and the selected encoders from a pre-training state dict."""
        if branches == "none":
            return
        load_state_checked(self.embed, state, "embed.")
        if branches in ("both", "distortion"):
            load_state_checked(self.enc_distortion, state, "enc_distortion.")
        if branches in ("both", "content"):
            load_state_checked(self.enc_content, state, "enc_content.")


def render_six(pc: geo.PointCloud, resolution: int = 512, crop: int = 224, splat_radius: int = 2) -> np.ndarray:
    """Six perpendicular views of a self-normalized cloud, center-cropped, uint8 (6, S, S, 3)."""
    return geo.render_crops(pc, geo.rig_perpendicular(), resolution, crop, splat_radius=splat_radius)


def to_float(views: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.asarray(views).astype(np.float32) / 255.0)


@torch.no_grad()
def encode_views(cloud: geo.PointCloud, model: QualityModel, resolution: int = 512, crop: int = 224) -> ViewFeatures:
    model.eval()
    vf = model.features(to_float(render_six(cloud, resolution, crop))[None])
    return ViewFeatures(vf.content[0], vf.distortion[0])


def fuse(vf: ViewFeatures, head: QualityHead) -> torch.Tensor:
    return head.fuse(vf.content[None], vf.distortion[None])[0]


def regress(fused: torch.Tensor, head: QualityHead) -> torch.Tensor:
    return head.regress(fused[None])[0]


# ---------------------------------------------------------------------------
# training


@dataclass
class LabeledViews:
    ids: list[str]
    views: np.ndarray  # (S, 6, H, W, 3) uint8
    mos: np.ndarray

    def __len__(self):
        return len(self.ids)

    def subset(self, idx) -> "LabeledViews":
        idx = list(idx)
        return LabeledViews([self.ids[i] for i in idx], self.views[idx], self.mos[idx])


def render_labeled(samples: list[tuple[str, geo.PointCloud, float | None]], cfg: FinetuneConfig) -> LabeledViews:
    ids, views, mos = [], [], []
    for sid, pc, q in samples:
        ids.append(sid)
        views.append(render_six(pc, cfg.resolution, cfg.crop, cfg.splat_radius))
        mos.append(np.nan if q is None else q)
    return LabeledViews(ids, np.stack(views), np.asarray(mos, dtype=np.float64))


@dataclass
class MosScaler:
    low: float
    high: float

    @classmethod
    def fit(cls, mos: np.ndarray) -> "MosScaler":
        lo, hi = float(np.min(mos)), float(np.max(mos))
        return cls(lo, hi if hi > lo else lo + 1.0)

    def forward(self, q):
        return (np.asarray(q, dtype=np.float64) - self.low) / (self.high - self.low)

    def inverse(self, s):
        return np.asarray(s, dtype=np.float64) * (self.high - self.low) + self.low


def build_model(cfg: FinetuneConfig) -> QualityModel:
    torch.manual_seed(cfg.seed)
    return QualityModel(cfg.encoder, cfg.grid, cfg.heads, cfg.fused_dim, cfg.hidden, cfg.fusion)


@torch.no_grad()
def predict_views(model: QualityModel, views: np.ndarray, scaler: MosScaler, batch_size: int = 16) -> np.ndarray:
    model.eval()
    out = []
    for s in range(0, len(views), batch_size):
        out.append(model(to_float(views[s:s + batch_size])).double().numpy())
    return scaler.inverse(np.concatenate(out)) if out else np.zeros(0)


@dataclass
class FinetuneResult:
    model: QualityModel
    scaler: MosScaler
    history: list[dict]
    selected_epoch: int | None = None
    test_predictions: np.ndarray | None = None
    checkpoint: Path | None = None


def finetune(cfg: FinetuneConfig, train: LabeledViews, init_state: dict | None = None,
             test: LabeledViews | None = None, val: LabeledViews | None = None,
             out_dir: str | Path | None = None) -> FinetuneResult:
    """Optimise the combined MSE + rank loss end to end.

    When ``test`` is given, test predictions are recorded at the selected epoch: the best
    validation SROCC if ``val`` is given, otherwise the lowest training loss.
    """
    if len(train) == 0:
        raise ValueError("fine-tuning set is empty")
    if np.isnan(train.mos).any():
        raise ValueError("fine-tuning requires MOS labels for every sample")
    model = build_model(cfg)
    if init_state is not None:
        model.load_pretrained(init_state, cfg.branches)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    scaler = MosScaler.fit(train.mos)
    targets = torch.from_numpy(scaler.forward(train.mos)).float()
    rng = np.random.default_rng(cfg.seed)
    beta = cfg.effective_beta

    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)

    history: list[dict] = []
    best_loss, selected, test_pred = math.inf, None, None
    step, epoch = 0, 0
    while step < total:
        model.train()
        order = rng.permutation(len(train))
        losses, seen, seen_pred = [], [], []
        for s in range(0, len(train), cfg.batch_size):
            if step >= total:
                break
            if cfg.lr_schedule == "cosine" and total > 0:
                for g in optimizer.param_groups:
                    g["lr"] = cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / total))
            idx = order[s:s + cfg.batch_size]
            pred = model(to_float(train.views[idx]))
            loss = loss_fine(pred, targets[idx], beta)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite fine-tuning loss at step {step} on {[train.ids[i] for i in idx]}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            optimizer.step()
            losses.append(loss.item())
            seen.extend(idx.tolist())
            seen_pred.extend(scaler.inverse(pred.detach().double().numpy()).tolist())
            step += 1
        row = {"epoch": epoch, "step": step, "train_loss": float(np.mean(losses))}
        # predictions made during the pass, i.e. before each batch's update
        row["train_srocc"] = _safe_srocc(seen_pred, train.mos[seen]) if len(seen) >= 3 else None
        if val is not None:
            row["val_srocc"] = _safe_srocc(predict_views(model, val.views, scaler), val.mos)
            score = -row["val_srocc"] if row["val_srocc"] is not None else math.inf
        else:
            score = row["train_loss"]
        if test is not None and score < best_loss:
            best_loss, selected = score, epoch
            test_pred = predict_views(model, test.views, scaler)
        history.append(row)
        log.info("epoch %d loss %.5f train SROCC %s", epoch, row["train_loss"], row["train_srocc"])
        epoch += 1

    if test is not None and test_pred is None:
        test_pred = predict_views(model, test.views, scaler)

    ckpt = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        ckpt = out_dir / "checkpoints" / "finetune.pt"
        save_checkpoint(ckpt, model, {"finetune": asdict(cfg)},
                        extra={"kind": "finetune", "scaler": asdict(scaler), "history": history})
        write_history(out_dir / "train_log.csv", history)
    return FinetuneResult(model, scaler, history, selected, test_pred, ckpt)


def _safe_srocc(pred, mos) -> float | None:
    try:
        return srocc(pred, mos)
    except ValueError:
        return None


def write_history(path: Path, history: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "step", "train_loss", "train_srocc", "val_srocc"],
                           restval="")
        w.writeheader()
        w.writerows(history)


def load_quality_model(path: str | Path) -> tuple[QualityModel, MosScaler, FinetuneConfig]:
    ck = read_checkpoint(path)
    if ck.get("kind") != "finetune":
        raise CheckpointError(f"{path} is not a fine-tuned quality checkpoint")
    cfg = FinetuneConfig(**ck["configs"]["finetune"])
    model = QualityModel(cfg.encoder, cfg.grid, cfg.heads, cfg.fused_dim, cfg.hidden, cfg.fusion)
    load_state_checked(model, ck["state_dict"])
    return model, MosScaler(**ck["scaler"]), cfg


def predict_cloud(model: QualityModel, scaler: MosScaler, cloud: geo.PointCloud, cfg: FinetuneConfig) -> float:
    views = render_six(cloud, cfg.resolution, cfg.crop, cfg.splat_radius)[None]
    return float(predict_views(model, views, scaler)[0])


def write_predictions(path: str | Path, ids, pred, mos) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "predicted_score", "mos"])
        for i, p, q in zip(ids, pred, mos):
            w.writerow([i, repr(float(p)), "" if q is None or np.isnan(q) else repr(float(q))])


def read_predictions(path: str | Path) -> tuple[list[str], np.ndarray, np.ndarray]:
    ids, pred, mos = [], [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            ids.append(row["sample_id"])
            pred.append(float(row["predicted_score"]))
            mos.append(float(row["mos"]) if row.get("mos") not in (None, "") else np.nan)
    return ids, np.asarray(pred), np.asarray(mos)
