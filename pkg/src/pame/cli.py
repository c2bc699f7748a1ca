"""Command-line entry point: makedata, render, pretrain, finetune, predict, evaluate."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from . import config as config_mod
from . import data as data_mod
from . import geometry as geo
from .backbone import CheckpointError, read_checkpoint
from .eval import evaluate
from .finetune import (BRANCH_CHOICES, FUSION_CHOICES, LOSS_CHOICES, finetune, load_quality_model, predict_cloud,
                       read_predictions, render_labeled, write_predictions)
from .pretrain import PairedViews, PretrainPair, pretrain

log = logging.getLogger("pame")


class UsageError(Exception):
    """Invalid configuration or arguments; exit status 2."""


def _hash_files(paths) -> str:
    h = hashlib.sha256()
    for p in sorted({str(p) for p in paths}):
        h.update(p.encode())
        h.update(Path(p).read_bytes())
    return h.hexdigest()


def _manifest_files(manifest: data_mod.Manifest) -> list[Path]:
    files = []
    for e in manifest:
        files.append(manifest.resolve(e.distorted_path))
        if e.reference_path:
            files.append(manifest.resolve(e.reference_path))
    return files


def _write_run_manifest(out: Path, command: str, argv: list[str], cfg=None, inputs=()) -> None:
    out.mkdir(parents=True, exist_ok=True)
    if cfg is not None:
        (out / "config.echo").write_text(cfg.dump())
    record = {
        "command": command,
        "argv": argv,
        "seed": None if cfg is None else cfg.seed,
        "config": None if cfg is None else cfg.to_dict(),
        "versions": {"pame": __version__, "python": platform.python_version(), "torch": torch.__version__,
                     "numpy": np.__version__},
        "inputs_sha256": _hash_files(inputs) if inputs else None,
    }
    (out / "run.json").write_text(json.dumps(record, indent=2))


def _load_config(args) -> config_mod.RunConfig:
    try:
        cfg = config_mod.load(getattr(args, "config", None))
        if getattr(args, "seed", None) is not None:
            cfg = config_mod.from_dict({**cfg.to_dict(), "seed": args.seed})
        overrides = {k: getattr(args, k, None) for k in ("branches", "fusion", "loss")}
        overrides = {k: v for k, v in overrides.items() if v is not None}
        if overrides:
            d = cfg.to_dict()
            d["finetune"].update(overrides)
            cfg = config_mod.from_dict(d)
    except config_mod.ConfigError as exc:
        raise UsageError(str(exc)) from exc
    return cfg


def _seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


# ---------------------------------------------------------------------------
# commands


def cmd_makedata(args) -> int:
    unknown = [k for k in args.kinds if k not in data_mod.SYNTH_KINDS]
    if unknown:
        raise UsageError(f"unknown kind(s) {unknown}; choose from {data_mod.SYNTH_KINDS}")
    out = Path(args.out)
    manifest = data_mod.make_dataset(out, args.kinds, args.contents, args.distortions, range(1, args.levels + 1),
                                     args.points, args.seed)
    _write_run_manifest(out, "makedata", args.argv, inputs=[])
    print(f"wrote {len(manifest)} samples over {len(manifest.reference_ids)} references to {out / 'manifest.jsonl'}")
    return 0


def cmd_render(args) -> int:
    pc = geo.read_ply(args.input)
    cams = geo.rig_evenly_distributed(12) if args.rig == 12 else geo.rig_perpendicular()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.input).stem
    for view in geo.render_rig(pc, cams, args.resolution, source_id=stem):
        if args.crop:
            seed = None if args.seed is None else args.seed + view.camera_index
            view = geo.crop(view, args.crop, args.crop_policy, seed)
        geo.save_view(view, out / f"{stem}_view{view.camera_index:02d}.png")
    _write_run_manifest(out, "render", args.argv, inputs=[args.input])
    print(f"rendered {len(cams)} views to {out}")
    return 0


def _pretrain_pairs(manifest: data_mod.Manifest) -> list[PretrainPair]:
    # MOS labels are deliberately not read here
    pairs, refs = [], {}
    for e in manifest:
        if not e.reference_path:
            continue
        if e.reference_path not in refs:
            refs[e.reference_path] = data_mod.load_cloud(manifest, e.reference_path)
        pairs.append(PretrainPair(e.sample_id, data_mod.load_cloud(manifest, e.distorted_path), refs[e.reference_path]))
    return pairs


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    manifest = data_mod.Manifest.load(args.data)
    out = Path(args.out)
    _write_run_manifest(out, "pretrain", args.argv, cfg, [args.data, *_manifest_files(manifest)])
    _seed_everything(cfg.seed)
    pairs = _pretrain_pairs(manifest)
    if not pairs:
        raise ValueError("manifest has no (distorted, reference) pairs to pre-train on")
    views = PairedViews(pairs, cfg.pretrain, cache_dir=out / "cache")
    res = pretrain(cfg.pretrain, views, out, resume=args.resume)
    last = res.log[-1]["loss"] if res.log else float("nan")
    print(f"pre-trained {len(res.log)} steps, final loss {last:.6f}; checkpoint {res.checkpoint}")
    return 0


def _fold_plan(cfg: config_mod.RunConfig, manifest: data_mod.Manifest):
    s = cfg.split
    if s.protocol == "kfold":
        return data_mod.split_kfold(manifest, s.folds, tuple(s.ratio), cfg.seed)
    if s.protocol == "holdout":
        return data_mod.split_holdout(manifest, tuple(s.ratio), cfg.seed)
    refs = tuple(manifest.reference_ids)
    return data_mod.SplitPlan((data_mod.Fold(refs, refs),), cfg.seed)


def cmd_finetune(args) -> int:
    cfg = _load_config(args)
    manifest = data_mod.Manifest.load(args.data)
    if not manifest.labeled():
        raise ValueError("fine-tuning manifest has entries without MOS labels")
    out = Path(args.out)
    inputs = [args.data, *_manifest_files(manifest)] + ([] if args.init == "none" else [args.init])
    _write_run_manifest(out, "finetune", args.argv, cfg, inputs)
    _seed_everything(cfg.seed)

    init_state = None
    if args.init != "none":
        ck = read_checkpoint(args.init)
        enc = ck.get("configs", {}).get("pretrain", {}).get("encoder")
        if ck.get("kind") != "pretrain" or enc != cfg.to_dict()["finetune"]["encoder"]:
            raise CheckpointError(f"{args.init}: not a pre-training checkpoint for encoder {cfg.finetune.encoder}")
        init_state = ck["state_dict"]

    samples = [(e.sample_id, data_mod.load_cloud(manifest, e.distorted_path), e.mos) for e in manifest]
    all_views = render_labeled(samples, cfg.finetune)
    ref_of = [e.reference_id for e in manifest]
    plan = _fold_plan(cfg, manifest)
    (out / "split.json").write_text(json.dumps(plan.to_dict(), indent=2))

    fold_reports, pred_rows = [], []
    for k, fold in enumerate(plan.folds):
        pick = lambda refs: [i for i, r in enumerate(ref_of) if r in set(refs)]
        train = all_views.subset(pick(fold.train))
        test = all_views.subset(pick(fold.test))
        val = all_views.subset(pick(fold.val)) if fold.val else None
        fold_dir = out if len(plan.folds) == 1 else out / f"fold{k}"
        res = finetune(cfg.finetune, train, init_state, test=test, val=val, out_dir=fold_dir)
        report = evaluate(res.test_predictions, test.mos).to_dict()
        report.update(fold=k, selected_epoch=res.selected_epoch)
        fold_reports.append(report)
        pred_rows += [(sid, p, q, k) for sid, p, q in zip(test.ids, res.test_predictions, test.mos)]
        log.info("fold %d: SROCC %.4f PLCC %.4f RMSE %.4f", k, report["srocc"], report["plcc"], report["rmse"])

    metrics = {
        "protocol": cfg.split.protocol,
        "folds": fold_reports,
        "mean": {m: float(np.mean([r[m] for r in fold_reports])) for m in ("srocc", "plcc", "rmse")},
    }
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True))
    with open(out / "predictions.csv", "w") as fh:
        fh.write("sample_id,predicted_score,mos,fold\n")
        for sid, p, q, k in pred_rows:
            fh.write(f"{sid},{float(p)!r},{float(q)!r},{k}\n")
    m = metrics["mean"]
    print(f"{cfg.split.protocol} over {len(fold_reports)} fold(s): SROCC {m['srocc']:.4f} "
          f"PLCC {m['plcc']:.4f} RMSE {m['rmse']:.4f}")
    return 0


def cmd_predict(args) -> int:
    model, scaler, cfg = load_quality_model(args.ckpt)
    score = predict_cloud(model, scaler, geo.read_ply(args.input), cfg)
    print(f"{score:.6f}")
    return 0


def cmd_evaluate(args) -> int:
    ids, pred, mos = read_predictions(args.pred)
    if np.isnan(mos).any():
        raise ValueError(f"{args.pred}: every row needs a mos value")
    report = evaluate(pred, mos).to_dict()
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    print(text)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pame", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("makedata", help="generate synthetic clouds, distortions and a manifest")
    s.add_argument("--kinds", nargs="+", default=list(data_mod.SYNTH_KINDS))
    s.add_argument("--distortions", nargs="+", default=list(data_mod.DISTORTIONS), choices=data_mod.DISTORTIONS)
    s.add_argument("--contents", type=int, default=2, help="contents per kind")
    s.add_argument("--levels", type=int, default=7, choices=range(1, 8))
    s.add_argument("--points", type=int, default=4000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_makedata)

    s = sub.add_parser("render", help="render a PLY file from a camera rig")
    s.add_argument("--input", required=True)
    s.add_argument("--rig", type=int, choices=(12, 6), default=12)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--resolution", type=int, default=geo.DEFAULT_RESOLUTION)
    s.add_argument("--crop", type=int, default=None)
    s.add_argument("--crop-policy", choices=("center", "random"), default="center")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("pretrain", help="dual-branch masked-autoencoder pre-training")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--resume")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", help="supervised fine-tuning and split evaluation")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--init", required=True, help="pre-training checkpoint, or 'none'")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--branches", choices=BRANCH_CHOICES)
    s.add_argument("--fusion", choices=FUSION_CHOICES)
    s.add_argument("--loss", choices=LOSS_CHOICES)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("predict", help="score one PLY file")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--input", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("evaluate", help="SROCC/PLCC/RMSE for a predictions CSV")
    s.add_argument("--pred", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)
    return p


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    args = parser.parse_args(argv)  # exits with status 2 on bad usage
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"pame {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        log.debug("failure", exc_info=True)
        print(f"pame {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
