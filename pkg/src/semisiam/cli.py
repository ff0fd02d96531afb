"""Single-binary multi-verb command line interface.

Config precedence is defaults < --config file < --set overrides; every run
directory receives a copy of the resolved config so results are
reconstructible from (config, seed) alone. Exit codes: 0 success, 1 invariant
violation, 2 usage or missing config.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import datagen, pipeline
from .config import RunConfig
from .errors import SemisiamError
from .model import build_model, load_checkpoint
from .pseudolabel import purity_exact

OUT_ROOT_ENV = "SEMISIAM_OUT_ROOT"
VERBS = ("gen-data", "split", "upsample", "pretrain", "probe", "eval",
         "ablate", "purity", "report")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semisiam",
        description="Semi-supervised contrastive learning on long-tailed tile datasets",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p: argparse.ArgumentParser, needs_config: bool = True):
        p.add_argument("--config", help="path to a JSON run configuration")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config key (repeatable)")
        p.add_argument("--seed", type=int, default=None, help="override the seed")
        p.add_argument("--dry-run", action="store_true",
                       help="validate config and print the plan without side effects")
        p.set_defaults(needs_config=needs_config)

    common(sub.add_parser("gen-data", help="generate, tile, split and save the dataset"))
    common(sub.add_parser("split", help="re-split an existing dataset root"))

    p = sub.add_parser("upsample", help="replicate minority entries in the train manifest")
    common(p)
    p.add_argument("--factor", type=int, default=None)
    p.add_argument("--balance", action="store_true")

    common(sub.add_parser("pretrain", help="run contrastive pretraining"))

    p = sub.add_parser("probe", help="fit a linear probe on a frozen checkpoint")
    common(p)
    p.add_argument("--ckpt", default=None, help="checkpoint path (default: final.pt)")

    p = sub.add_parser("eval", help="evaluate a probe on a labeled split")
    common(p)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--probe", dest="probe_path", default=None)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))

    common(sub.add_parser("ablate", help="run the four-arm comparison"))

    p = sub.add_parser("purity", help="print the exact positive-count law of one draw")
    common(p, needs_config=False)
    p.add_argument("--pool", type=int, required=True)
    p.add_argument("--positives", type=int, required=True)
    p.add_argument("--draw", type=int, required=True)

    p = sub.add_parser("report", help="summarize a finished run directory")
    common(p, needs_config=False)
    p.add_argument("--run", dest="run_dir", required=True)
    return parser


@contextlib.contextmanager
def run_lock(directory: Path):
    """One process per run directory, enforced by an exclusive lock file."""
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise SemisiamError(
            f"run directory {directory} is locked by another invocation "
            f"(stale? remove {lock})"
        ) from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def load_config(args) -> RunConfig:
    if args.config is None:
        cfg = RunConfig()
    else:
        if not Path(args.config).exists():
            raise FileNotFoundError(f"config file not found: {args.config}")
        cfg = RunConfig.from_json(args.config)
    if args.overrides:
        cfg = cfg.apply_overrides(args.overrides)
    if args.seed is not None:
        if args.verb in ("gen-data", "split"):
            cfg = replace(cfg, data=replace(cfg.data, seed=args.seed))
        else:
            cfg = replace(cfg, seed=args.seed)
    return cfg


def resolve_out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


def _print_plan(verb: str, cfg: RunConfig, extra: dict | None = None) -> None:
    plan = {"verb": verb, "config": cfg.to_dict()}
    if extra:
        plan.update(extra)
    print(json.dumps(plan, indent=2, sort_keys=True))


def _restore_truth_labels(root: Path) -> datagen.TileDataset:
    """Rebuild a fully labeled, unsplit dataset from the generator truth table."""
    ds = datagen.TileDataset.load(root)
    truth = pipeline.load_truth(root)
    seen: set[str] = set()
    records = []
    for r in ds.records:
        if r.tile_id in seen:
            continue  # drop upsampling duplicates
        seen.add(r.tile_id)
        records.append(replace(r, label=truth[r.tile_id], split=None))
    return datagen.TileDataset(records, root=ds.root, pixels=ds._pixels)


def cmd_gen_data(args, cfg: RunConfig) -> int:
    if args.dry_run:
        _print_plan("gen-data", cfg, {"writes": cfg.data.root})
        return 0
    with run_lock(Path(cfg.data.root)):
        splits = pipeline.generate_dataset(cfg)
    combined = splits.combined()
    print(f"dataset written to {cfg.data.root}: {len(combined)} tiles, "
          f"{combined.counts()}")
    return 0


def cmd_split(args, cfg: RunConfig) -> int:
    if args.dry_run:
        _print_plan("split", cfg, {"rewrites": cfg.data.root})
        return 0
    root = Path(cfg.data.root)
    with run_lock(root):
        full = _restore_truth_labels(root)
        splits = datagen.split_dataset(
            full, fractions=cfg.data.fractions, seed=cfg.data.seed,
            labeled_block_fraction=cfg.data.labeled_block_fraction,
            enrich_positive_fraction=cfg.data.enrich_positive_fraction,
        )
        combined = splits.combined()
        datagen.write_manifest(root / datagen.MANIFEST_NAME, combined.records)
    print(f"re-split {cfg.data.root}: {combined.counts()}")
    return 0


def cmd_upsample(args, cfg: RunConfig) -> int:
    if args.factor is None and not args.balance:
        print("error: pass --factor N or --balance", file=sys.stderr)
        return 2
    if args.dry_run:
        _print_plan("upsample", cfg, {"factor": args.factor, "balance": args.balance})
        return 0
    root = Path(cfg.data.root)
    with run_lock(root):
        ds = datagen.TileDataset.load(root)
        train = ds.subset("train")
        up = datagen.upsample_minority(train, factor=args.factor, balance=args.balance)
        others = [r for r in ds.records if r.split != "train"]
        datagen.write_manifest(root / datagen.MANIFEST_NAME, up.records + others)
    print(f"train split now {len(up)} entries ({up.counts()})")
    return 0


def cmd_pretrain(args, cfg: RunConfig) -> int:
    out = resolve_out_dir(cfg)
    if args.dry_run:
        _print_plan("pretrain", cfg, {"out_dir": str(out)})
        return 0
    with run_lock(out):
        cfg.to_json(out / "config.json")
        result = pipeline.pretrain(cfg, out_dir=out)
    print(f"pretrained {cfg.epochs} epochs ({cfg.loss_mode}); "
          f"checkpoint: {result.checkpoint_path}")
    return 0


def _load_model_for(cfg: RunConfig, ckpt_path: Path):
    ckpt = load_checkpoint(ckpt_path, expected_config_hash=cfg.config_hash())
    model = build_model(cfg.model)
    model.load_state_dict(ckpt.model_state)
    model.eval()
    return model


def cmd_probe(args, cfg: RunConfig) -> int:
    out = resolve_out_dir(cfg)
    ckpt_path = Path(args.ckpt) if args.ckpt else out / "checkpoints" / "final.pt"
    if args.dry_run:
        _print_plan("probe", cfg, {"checkpoint": str(ckpt_path)})
        return 0
    with run_lock(out):
        model = _load_model_for(cfg, ckpt_path)
        data = pipeline.ensure_dataset(cfg)
        probe = pipeline.linear_probe(model, data.train, data.val, cfg, seed=cfg.seed)
        torch.save({"weight": probe.weight, "bias": probe.bias, "tap": probe.tap,
                    "best_epoch": probe.best_epoch,
                    "config_hash": cfg.config_hash()}, out / "probe.pt")
        with open(out / "probe_metrics.csv", "w", newline="") as fh:
            fh.write(pipeline.METRICS_HEADER + "\n")
            for rep in probe.val_reports:
                fh.write(rep.csv_row(cfg.loss_mode) + "\n")
    best = probe.best_val
    print(f"probe best epoch {probe.best_epoch}: val ba={best.balanced_accuracy:.4f} "
          f"macro_f1={best.macro_f1:.4f}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    out = resolve_out_dir(cfg)
    ckpt_path = Path(args.ckpt) if args.ckpt else out / "checkpoints" / "final.pt"
    probe_path = Path(args.probe_path) if args.probe_path else out / "probe.pt"
    if args.dry_run:
        _print_plan("eval", cfg, {"checkpoint": str(ckpt_path), "probe": str(probe_path),
                                  "split": args.split})
        return 0
    with run_lock(out):
        model = _load_model_for(cfg, ckpt_path)
        blob = torch.load(probe_path, map_location="cpu", weights_only=True)
        probe = pipeline.ProbeResult(weight=blob["weight"], bias=blob["bias"],
                                     tap=blob["tap"], best_epoch=int(blob["best_epoch"]),
                                     best_val=None, val_reports=[])  # type: ignore[arg-type]
        data = pipeline.ensure_dataset(cfg)
        ds = getattr(data, args.split)
        report = pipeline.evaluate(model, probe, ds, cfg, split=args.split,
                                   epoch=probe.best_epoch)
        with open(out / f"eval_{args.split}.csv", "w", newline="") as fh:
            fh.write(pipeline.METRICS_HEADER + "\n")
            fh.write(report.csv_row(cfg.loss_mode) + "\n")
    print(report.csv_row(cfg.loss_mode))
    return 0


def cmd_ablate(args, cfg: RunConfig) -> int:
    out = resolve_out_dir(cfg)
    if args.dry_run:
        _print_plan("ablate", cfg, {"out_dir": str(out), "arms": list(pipeline.ABLATION_ARMS),
                                    "seeds": list(cfg.ablation_seeds)})
        return 0
    with run_lock(out):
        result = pipeline.run_ablation(cfg, out_dir=out)
    for i, arm in enumerate(result.ordering, 1):
        print(f"{i}. {arm}: mean test balanced accuracy "
              f"{result.mean_balanced_accuracy[arm]:.4f}")
    print(f"metrics: {result.metrics_path}")
    return 0


def cmd_purity(args, _cfg=None) -> int:
    est = purity_exact(args.pool, args.positives, args.draw)
    print("n,probability,cumulative")
    for n, (p, c) in enumerate(zip(est.probabilities, est.cumulative)):
        print(f"{n},{p!r},{c!r}")
    return 0


def cmd_report(args, _cfg=None) -> int:
    run_dir = Path(args.run_dir)
    metrics = run_dir / "metrics.csv"
    if not metrics.exists():
        raise SemisiamError(f"no metrics.csv under {run_dir}; run ablate or eval first")
    text = render_report(run_dir)
    (run_dir / "report.md").write_text(text)
    print(text, end="")
    return 0


def render_report(run_dir: Path) -> str:
    """Markdown summary table of test metrics per arm."""
    cfg_path = run_dir / "config.json"
    backbone, n_unlabeled, n_labeled = "-", "-", "-"
    if cfg_path.exists():
        cfg = RunConfig.from_json(cfg_path)
        backbone = cfg.model.architecture
        manifest = Path(cfg.data.root) / datagen.MANIFEST_NAME
        if manifest.exists():
            records = datagen.read_manifest(manifest)
            n_unlabeled = str(sum(1 for r in records if r.split == "unlabeled"))
            n_labeled = str(sum(1 for r in records if r.split in ("train", "val", "test")))

    rows: dict[str, list[tuple[float, float]]] = {}
    with open(run_dir / "metrics.csv", newline="") as fh:
        header = fh.readline().strip()
        if header != pipeline.METRICS_HEADER:
            raise SemisiamError(f"unexpected metrics.csv header: {header}")
        for line in fh:
            arm, split, _epoch, _tp, _fp, _tn, _fn, f1, ba = line.strip().split(",")
            if split == "test":
                rows.setdefault(arm, []).append((float(f1), float(ba)))
    if not rows:
        raise SemisiamError("metrics.csv contains no test rows")

    lines = [
        "# Run report",
        "",
        "| Backbone | Loss mode | Unlabeled images | Labeled images | Macro F1 | Balanced accuracy |",
        "|---|---|---|---|---|---|",
    ]
    means = {arm: (float(np.mean([f for f, _ in v])), float(np.mean([b for _, b in v])))
             for arm, v in rows.items()}
    for arm in sorted(means, key=lambda a: means[a][1], reverse=True):
        f1, ba = means[arm]
        lines.append(f"| {backbone} | {arm} | {n_unlabeled} | {n_labeled} "
                     f"| {f1:.4f} | {ba:.4f} |")
    return "\n".join(lines) + "\n"


COMMANDS = {
    "gen-data": cmd_gen_data,
    "split": cmd_split,
    "upsample": cmd_upsample,
    "pretrain": cmd_pretrain,
    "probe": cmd_probe,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "purity": cmd_purity,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.needs_config:
            cfg = load_config(args)
            return COMMANDS[args.verb](args, cfg)
        return COMMANDS[args.verb](args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SemisiamError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
