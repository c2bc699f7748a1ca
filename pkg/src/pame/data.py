"""Manifests, content-disjoint splits and a synthetic cloud/distortion generator."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import PointCloud, read_ply, write_ply

SYNTH_KINDS = ("sphere", "cube", "gaussian-blob", "checker-torus")
DISTORTIONS = ("geom-noise", "color-noise", "downsample")
LEVELS = range(1, 8)


@dataclass
class ManifestEntry:
    sample_id: str
    distorted_path: str
    reference_id: str
    reference_path: str | None = None
    mos: float | None = None
    distortion_type: str = ""
    level: int = 0


@dataclass
class Manifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    root: Path | None = None

    def __post_init__(self):
        ids = [e.sample_id for e in self.entries]
        if len(ids) != len(set(ids)):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate sample ids in manifest: {dup[:5]}")

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def reference_ids(self) -> list[str]:
        return sorted({e.reference_id for e in self.entries})

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() or self.root is None else self.root / p

    def subset(self, reference_ids) -> "Manifest":
        keep = set(reference_ids)
        return Manifest([e for e in self.entries if e.reference_id in keep], self.root)

    def labeled(self) -> bool:
        return all(e.mos is not None for e in self.entries)

    def dumps(self) -> str:
        return "".join(json.dumps(asdict(e), sort_keys=True) + "\n" for e in self.entries)

    @classmethod
    def loads(cls, text: str, root: Path | None = None) -> "Manifest":
        entries = [ManifestEntry(**json.loads(line)) for line in text.splitlines() if line.strip()]
        return cls(entries, root)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Manifest":
        path = Path(path)
        return cls.loads(path.read_text(encoding="utf-8"), root=path.parent)


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class Fold:
    train: tuple[str, ...]
    test: tuple[str, ...]
    val: tuple[str, ...] = ()


@dataclass(frozen=True)
class SplitPlan:
    folds: tuple[Fold, ...]
    seed: int

    @property
    def fold_count(self) -> int:
        return len(self.folds)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "folds": [asdict(f) for f in self.folds]}


def _refs(source) -> list[str]:
    if isinstance(source, Manifest):
        return source.reference_ids
    return sorted(set(source))


def split_kfold(source, folds: int = 5, ratio: tuple[int, int] = (7, 2), seed: int = 0) -> SplitPlan:
    """Per fold, hold out a content-disjoint set of references at the train:test ratio.

    References are shuffled once and test sets are taken as consecutive windows of that
    order, so coverage across folds is as even as the counts allow.
    """
    refs = _refs(source)
    n = len(refs)
    n_test = int(round(n * ratio[1] / (ratio[0] + ratio[1])))
    if folds < 1 or n_test < 1 or n_test >= n:
        raise ValueError(f"ratio {ratio[0]}:{ratio[1]} is infeasible for {n} references")
    order = [refs[i] for i in np.random.default_rng(seed).permutation(n)]
    out = []
    for f in range(folds):
        test = {order[(f * n_test + j) % n] for j in range(n_test)}
        out.append(Fold(train=tuple(r for r in refs if r not in test), test=tuple(sorted(test))))
    return SplitPlan(tuple(out), seed)


def split_holdout(source, ratio: tuple[int, int, int] = (8, 1, 1), seed: int = 0) -> SplitPlan:
    refs = _refs(source)
    n = len(refs)
    total = sum(ratio)
    n_val = int(round(n * ratio[1] / total))
    n_test = int(round(n * ratio[2] / total))
    if n_val < 1 or n_test < 1 or n - n_val - n_test < 1:
        raise ValueError(f"ratio {ratio} is infeasible for {n} references")
    order = [refs[i] for i in np.random.default_rng(seed).permutation(n)]
    test, val, train = order[:n_test], order[n_test:n_test + n_val], order[n_test + n_val:]
    return SplitPlan((Fold(tuple(sorted(train)), tuple(sorted(test)), tuple(sorted(val))),), seed)


# ---------------------------------------------------------------------------
# synthetic data


def _texture(p: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Smooth colour field with a random phase, in [0, 1]."""
    freq = rng.uniform(1.5, 4.0, size=3)
    phase = rng.uniform(0, 2 * np.pi, size=3)
    c = 0.5 + 0.4 * np.sin(p * freq + phase)
    return np.clip(c[:, [0, 1, 2]] * 0.6 + c[:, [1, 2, 0]] * 0.4, 0.0, 1.0)


def synth_cloud(kind: str, n_points: int = 4000, seed: int = 0) -> PointCloud:
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    rng = np.random.default_rng(seed)
    if kind == "sphere":
        v = rng.normal(size=(n_points, 3))
        pts = v / np.linalg.norm(v, axis=1, keepdims=True)
        cols = _texture(pts, rng)
    elif kind == "cube":
        pts = rng.uniform(-1, 1, size=(n_points, 3))
        axis = rng.integers(0, 3, size=n_points)
        pts[np.arange(n_points), axis] = rng.choice([-1.0, 1.0], size=n_points)
        cols = _texture(pts, rng)
    elif kind == "gaussian-blob":
        pts = rng.normal(scale=0.4, size=(n_points, 3)) * rng.uniform(0.6, 1.4, size=3)
        cols = _texture(pts * 2.0, rng)
    elif kind == "checker-torus":
        big, small = 0.7, 0.3
        u, w = rng.uniform(0, 2 * np.pi, size=(2, n_points))
        pts = np.stack([(big + small * np.cos(w)) * np.cos(u), (big + small * np.cos(w)) * np.sin(u),
                        small * np.sin(w)], axis=1)
        checks = rng.integers(4, 9)
        on = ((np.floor(u / (2 * np.pi) * 2 * checks) + np.floor(w / (2 * np.pi) * checks)) % 2).astype(bool)
        a, b = rng.uniform(0.1, 0.9, size=(2, 3))
        cols = np.where(on[:, None], a, b)
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}; choose from {SYNTH_KINDS}")
    return PointCloud(pts, cols)


def distortion_strength(dtype: str, level: int) -> float:
    """Level-scaled magnitude: noise sigma for the noise types, dropped fraction for downsampling."""
    if dtype not in DISTORTIONS:
        raise ValueError(f"unknown distortion {dtype!r}; choose from {DISTORTIONS}")
    if level not in LEVELS:
        raise ValueError(f"level must be in 1..7, got {level}")
    return {"geom-noise": 0.006, "color-noise": 0.04, "downsample": 0.12}[dtype] * level


def pseudo_mos(level: int) -> float:
    """Synthetic label, linear and strictly decreasing in level (5.0 at level 1, 1.4 at level 7).

    Only for desk-scale training checks; it is not a human opinion score.
    """
    return 5.0 - 0.6 * (level - 1)


def synth_distort(pc: PointCloud, dtype: str, level: int, seed: int = 0) -> tuple[PointCloud, float]:
    strength = distortion_strength(dtype, level)
    rng = np.random.default_rng(seed)
    if dtype == "geom-noise":
        radius = float(np.linalg.norm(pc.coords - pc.coords.mean(0), axis=1).max())
        out = PointCloud(pc.coords + rng.normal(scale=strength * radius, size=pc.coords.shape), pc.colors)
    elif dtype == "color-noise":
        out = PointCloud(pc.coords, np.clip(pc.colors + rng.normal(scale=strength, size=pc.colors.shape), 0, 1))
    else:
        keep = max(1, int(round(pc.n * (1.0 - strength))))
        idx = np.sort(rng.choice(pc.n, size=keep, replace=False))
        out = PointCloud(pc.coords[idx], pc.colors[idx])
    return out, pseudo_mos(level)


def make_dataset(out_dir: str | Path, kinds=SYNTH_KINDS, contents_per_kind: int = 2,
                 distortions=DISTORTIONS, levels=LEVELS, n_points: int = 4000, seed: int = 0) -> Manifest:
    """Write reference and distorted PLY files plus ``manifest.jsonl`` under ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "reference").mkdir(parents=True, exist_ok=True)
    (out_dir / "distorted").mkdir(parents=True, exist_ok=True)
    entries = []
    for ki, kind in enumerate(kinds):
        for c in range(contents_per_kind):
            ref_id = f"{kind}-{c}"
            ref = synth_cloud(kind, n_points, seed=seed * 1000 + ki * 100 + c)
            ref_path = f"reference/{ref_id}.ply"
            write_ply(out_dir / ref_path, ref)
            for di, dtype in enumerate(distortions):
                for level in levels:
                    sid = f"{ref_id}_{dtype}_{level}"
                    dist, mos = synth_distort(ref, dtype, level, seed=seed * 7919 + ki * 997 + c * 97 + di * 11 + level)
                    path = f"distorted/{sid}.ply"
                    write_ply(out_dir / path, dist)
                    entries.append(ManifestEntry(sid, path, ref_id, ref_path, mos, dtype, level))
    manifest = Manifest(entries, out_dir)
    manifest.save(out_dir / "manifest.jsonl")
    return manifest


def load_cloud(manifest: Manifest, path: str) -> PointCloud:
    return read_ply(manifest.resolve(path))
