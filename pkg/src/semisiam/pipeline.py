"""Experiment orchestration: pretraining, linear probing, evaluation, ablation.

Datasets are preloaded into memory (runs here are desk-scale by design) and
every stochastic choice is driven by explicit seeds, so a rerun with the same
config reproduces logs byte for byte.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import datagen
from .augment import augment_once, two_views
from .config import RunConfig
from .datagen import SplitDatasets, TileDataset, dataset_phase, load_batch
from .errors import DatasetError
from .losses import (LOG_HEADER, LossReport, UncertaintyWeights, build_supcon_batch,
                     simsiam_loss, supcon_loss, total_loss)
from .model import (Checkpoint, SiameseModel, ViewEmbeddings, build_model,
                    load_checkpoint, save_checkpoint)
from .pseudolabel import FeatureBatch, PseudoConfig, synthesize_pseudo_negatives

logger = logging.getLogger(__name__)

METRICS_HEADER = "arm,split,epoch,tp,fp,tn,fn,macro_f1,balanced_accuracy"
ABLATION_ARMS = ("supervised", "loss1", "loss2", "loss1+2")


@dataclass
class MetricsReport:
    """Confusion counts and the two summary metrics for one split pass."""

    tp: int
    fp: int
    tn: int
    fn: int
    macro_f1: float
    balanced_accuracy: float
    split: str
    epoch: int

    @classmethod
    def from_confusion(cls, tp: int, fp: int, tn: int, fn: int,
                       split: str = "-", epoch: int = 0) -> "MetricsReport":
        rec_pos = tp / (tp + fn) if (tp + fn) else 0.0
        rec_neg = tn / (tn + fp) if (tn + fp) else 0.0
        f1_pos = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0
        f1_neg = 2 * tn / (2 * tn + fn + fp) if (2 * tn + fn + fp) else 0.0
        return cls(tp=tp, fp=fp, tn=tn, fn=fn,
                   macro_f1=(f1_pos + f1_neg) / 2.0,
                   balanced_accuracy=(rec_pos + rec_neg) / 2.0,
                   split=split, epoch=epoch)

    @classmethod
    def from_predictions(cls, y_true: np.ndarray, y_pred: np.ndarray,
                         split: str = "-", epoch: int = 0) -> "MetricsReport":
        y_true = np.asarray(y_true, dtype=int)
        y_pred = np.asarray(y_pred, dtype=int)
        tp = int(np.sum((y_true == 1) & (y_pred == 1)))
        fp = int(np.sum((y_true == 0) & (y_pred == 1)))
        tn = int(np.sum((y_true == 0) & (y_pred == 0)))
        fn = int(np.sum((y_true == 1) & (y_pred == 0)))
        return cls.from_confusion(tp, fp, tn, fn, split=split, epoch=epoch)

    def csv_row(self, arm: str) -> str:
        return ",".join([arm, self.split, str(self.epoch), str(self.tp), str(self.fp),
                         str(self.tn), str(self.fn), repr(self.macro_f1),
                         repr(self.balanced_accuracy)])


@dataclass
class PretrainResult:
    model: SiameseModel
    weights: UncertaintyWeights
    checkpoint_path: Path
    log_path: Path
    log_rows: list[str]
    epochs_run: int


@dataclass
class ProbeResult:
    """A frozen-feature affine classifier and its selection history."""

    weight: torch.Tensor
    bias: torch.Tensor
    tap: str
    best_epoch: int
    best_val: MetricsReport
    val_reports: list[MetricsReport] = field(default_factory=list)

    def logits(self, features: torch.Tensor) -> torch.Tensor:
        return features @ self.weight.T + self.bias


def ensure_dataset(cfg: RunConfig) -> SplitDatasets:
    """Load the dataset under ``cfg.data.root``, generating it if absent."""
    root = Path(cfg.data.root)
    if (root / datagen.MANIFEST_NAME).exists():
        combined = TileDataset.load(root)
        return SplitDatasets(
            train=combined.subset("train"),
            val=combined.subset("val"),
            test=combined.subset("test"),
            unlabeled=combined.subset("unlabeled"),
        )
    return generate_dataset(cfg)


def generate_dataset(cfg: RunConfig) -> SplitDatasets:
    """Generate, tile, split and persist the synthetic dataset."""
    d = cfg.data
    region = datagen.generate_synthetic_region(d.synth, seed=d.seed)
    full = datagen.tile_region(region.raster, region.mask, d.synth.tile_size)
    splits = datagen.split_dataset(
        full,
        fractions=d.fractions,
        seed=d.seed,
        labeled_block_fraction=d.labeled_block_fraction,
        enrich_positive_fraction=d.enrich_positive_fraction,
    )
    root = Path(d.root)
    splits.combined().save(root)
    datagen.save_region_meta(root, d.synth, d.seed, region)
    # Generator ground truth for every tile, including withheld ones; this is
    # oracle data for purity measurements, never a training input.
    with open(root / "truth.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tile_id", "label"])
        for r in full.records:
            writer.writerow([r.tile_id, r.label])
    logger.info("generated dataset at %s: %s", root, splits.combined().counts())
    return splits


def load_truth(root: str | Path) -> dict[str, str]:
    """Read the generator's ground-truth label per tile_id."""
    out = {}
    with open(Path(root) / "truth.csv", newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for tile_id, label in reader:
            out[tile_id] = label
    return out


def apply_upsampling(train: TileDataset, cfg: RunConfig) -> TileDataset:
    mode = cfg.data.upsample_mode
    if mode == "none":
        return train
    if mode == "factor":
        return datagen.upsample_minority(train, factor=cfg.data.upsample_factor)
    return datagen.upsample_minority(train, balance=True)


def _to_nchw(batch: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(batch.transpose(0, 3, 1, 2)))


def _two_view_tensors(images: np.ndarray, cfg: RunConfig,
                      rng: np.random.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    n, side = images.shape[0], images.shape[1]
    v1 = np.empty((n, side, side, 3), dtype=np.float32)
    v2 = np.empty((n, side, side, 3), dtype=np.float32)
    for i in range(n):
        v1[i], v2[i] = two_views(images[i], cfg.augment, rng)
    return _to_nchw(v1), _to_nchw(v2)


def _one_view_tensor(images: np.ndarray, cfg: RunConfig,
                     rng: np.random.Generator) -> torch.Tensor:
    out = np.empty_like(images)
    for i in range(images.shape[0]):
        out[i] = augment_once(images[i], cfg.augment, rng)
    return _to_nchw(out)


def _set_lr(optimizer, cfg: RunConfig, epoch: int, total: int | None = None) -> None:
    """Cosine decay over the epoch budget (or constant), set at epoch start.

    Groups flagged ``fixed_lr`` (the predictor head) keep the base rate unless
    ``optim.decay_predictor_lr`` says otherwise.
    """
    total = cfg.epochs if total is None else total
    if cfg.optim.schedule == "cosine":
        lr = cfg.optim.lr * 0.5 * (1.0 + math.cos(math.pi * (epoch - 1) / total))
    else:
        lr = cfg.optim.lr
    for group in optimizer.param_groups:
        if group.get("fixed_lr") and not cfg.optim.decay_predictor_lr:
            group["lr"] = float(cfg.optim.lr)
        else:
            group["lr"] = float(lr)


class _Cycler:
    """Endless shuffled index stream over a fixed-size pool."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.queue: list[int] = []

    def take(self, count: int) -> np.ndarray:
        out = []
        while len(out) < count:
            if not self.queue:
                self.queue = list(self.rng.permutation(self.n))
            out.append(self.queue.pop(0))
        return np.asarray(out, dtype=int)


def pretrain(cfg: RunConfig, data: SplitDatasets | None = None,
             seed: int | None = None, out_dir: str | Path | None = None,
             resume: bool = False) -> PretrainResult:
    """Run contrastive pretraining under the configured loss mode.

    One epoch is one pass over the unlabeled pool (#tiles // batch steps);
    the labeled-positive stream cycles independently. Writes a rolling
    checkpoint every epoch, a final checkpoint, and the per-step loss log.
    """
    if cfg.loss_mode == "supervised":
        raise DatasetError("supervised baseline is trained by run_ablation, not pretrain")
    seed = cfg.seed if seed is None else seed
    out = Path(cfg.out_dir if out_dir is None else out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.to_json(out / "config.json")
    if data is None:
        data = ensure_dataset(cfg)

    use_cosine = cfg.loss_mode in ("loss1", "loss1+2")
    use_supcon = cfg.loss_mode in ("loss2", "loss1+2")

    n_un = len(data.unlabeled)
    if n_un < cfg.batch_unlabeled:
        raise DatasetError(f"unlabeled pool ({n_un}) smaller than batch {cfg.batch_unlabeled}")
    steps_per_epoch = n_un // cfg.batch_unlabeled

    train_up = apply_upsampling(data.train, cfg)
    pos_indices = [i for i, r in enumerate(train_up.records) if r.label == datagen.LABEL_POS]
    if use_supcon and len(pos_indices) < cfg.batch_labeled:
        raise DatasetError(
            f"only {len(pos_indices)} labeled positives for a labeled batch of "
            f"{cfg.batch_labeled}; upsample the train split (see upsample_minority)"
        )

    with dataset_phase("pretrain"):
        un_imgs = load_batch(data.unlabeled, range(n_un), cfg.data.resize)
        pos_imgs = (load_batch(train_up, pos_indices, cfg.data.resize)
                    if use_supcon else None)

    torch.manual_seed(seed)
    model = build_model(cfg.model)
    weights = UncertaintyWeights()
    decayed = list(model.backbone.parameters()) + list(model.projector.parameters())
    if cfg.loss_mode == "loss1+2":
        decayed += list(weights.parameters())
    optimizer = torch.optim.SGD(
        [{"params": decayed},
         {"params": list(model.predictor.parameters()), "fixed_lr": True}],
        lr=cfg.optim.lr, momentum=cfg.optim.momentum,
        weight_decay=cfg.optim.weight_decay)

    start_epoch = 0
    ckpt_dir = out / "checkpoints"
    if resume:
        ckpt = load_checkpoint(ckpt_dir / "last.pt", expected_config_hash=cfg.config_hash())
        model.load_state_dict(ckpt.model_state)
        optimizer.load_state_dict(ckpt.optimizer_state)
        weights.load_state_dict(ckpt.weights_state)
        start_epoch = ckpt.epoch

    rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
    lab_cycler = _Cycler(len(pos_indices), np.random.default_rng(
        np.random.SeedSequence([seed, 202]))) if use_supcon else None
    pseudo_cfg = PseudoConfig(subgroup_size=cfg.subgroup_size, anchor_seed=seed)

    log_rows: list[str] = []
    global_step = start_epoch * steps_per_epoch
    model.train()
    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        _set_lr(optimizer, cfg, epoch)
        perm = rng.permutation(n_un)
        for step in range(steps_per_epoch):
            global_step += 1
            un_idx = perm[step * cfg.batch_unlabeled:(step + 1) * cfg.batch_unlabeled]
            l1 = l2 = None

            if use_cosine and not use_supcon:
                v1, v2 = _two_view_tensors(un_imgs[un_idx], cfg, rng)
                l1 = simsiam_loss(model.forward_views(v1, v2))
            else:
                if use_cosine:
                    v1, v2 = _two_view_tensors(un_imgs[un_idx], cfg, rng)
                else:
                    v1, v2 = _one_view_tensor(un_imgs[un_idx], cfg, rng), None
                lab_idx = lab_cycler.take(cfg.batch_labeled)
                lab_batch = pos_imgs[lab_idx]
                if cfg.include_labeled_in_cosine and use_cosine:
                    lv1, lv2 = _two_view_tensors(lab_batch, cfg, rng)
                    x1, x2 = torch.cat([v1, lv1]), torch.cat([v2, lv2])
                else:
                    lv1 = _one_view_tensor(lab_batch, cfg, rng)
                    x1, x2 = torch.cat([v1, lv1]), v2
                # Mixed forward: unlabeled and positive tiles share one pass,
                # then the feature array is decoupled into the two groups.
                h1 = model.backbone(x1)
                z1 = model.projector(h1)
                if use_cosine:
                    n_cos = x2.shape[0]
                    z2 = model.project(x2)
                    e = ViewEmbeddings(z1=z1[:n_cos], z2=z2,
                                       p1=model.predictor(z1[:n_cos]),
                                       p2=model.predictor(z2))
                    l1 = simsiam_loss(e)
                tap1 = z1 if cfg.feature_tap == "projector" else h1
                n_b = v1.shape[0]
                f_un = FeatureBatch(tap1[:n_b], source_indices=un_idx)
                f_pos = FeatureBatch(tap1[n_b:], source_indices=lab_idx)
                pseudo = synthesize_pseudo_negatives(f_un, f_pos, pseudo_cfg, rng)
                l2 = supcon_loss(build_supcon_batch(f_pos, pseudo, cfg.temperature),
                                 reduction=cfg.supcon_reduction)

            if cfg.loss_mode == "loss1+2":
                loss = total_loss(l1 + cfg.fusion_cosine_shift, l2, weights)
            else:
                loss = l1 if cfg.loss_mode == "loss1" else l2
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

            v1s, v2s = weights.snapshot()
            report = LossReport(
                loss_cosine=None if l1 is None else float(l1.detach()),
                loss_super=None if l2 is None else float(l2.detach()),
                loss_total=float(loss.detach()),
                v1=v1s, v2=v2s,
            )
            log_rows.append(report.csv_row(global_step))

        snapshot = {"loss_total": float(loss.detach())}
        save_checkpoint(ckpt_dir / "last.pt", Checkpoint(
            model_state=model.state_dict(),
            optimizer_state=optimizer.state_dict(),
            weights_state=weights.state_dict(),
            epoch=epoch,
            config_hash=cfg.config_hash(),
            metrics=snapshot,
        ))

    final_path = ckpt_dir / "final.pt"
    save_checkpoint(final_path, Checkpoint(
        model_state=model.state_dict(),
        optimizer_state=optimizer.state_dict(),
        weights_state=weights.state_dict(),
        epoch=cfg.epochs,
        config_hash=cfg.config_hash(),
        metrics={"loss_total": float(loss.detach())},
    ))
    log_path = out / "train_log.csv"
    with open(log_path, "w", newline="") as fh:
        fh.write(LOG_HEADER + "\n")
        for row in log_rows:
            fh.write(row + "\n")
    return PretrainResult(model=model, weights=weights, checkpoint_path=final_path,
                          log_path=log_path, log_rows=log_rows, epochs_run=cfg.epochs)


def extract_features(model: SiameseModel, ds: TileDataset, cfg: RunConfig,
                     phase: str, batch: int = 256,
                     tap: str | None = None) -> tuple[torch.Tensor, np.ndarray]:
    """Frozen eval-mode features plus integer labels (1=pos, 0=neg, -1=none)."""
    tap = cfg.feature_tap if tap is None else tap
    was_training = model.training
    model.eval()
    feats = []
    with dataset_phase(phase), torch.no_grad():
        for lo in range(0, len(ds), batch):
            idx = range(lo, min(lo + batch, len(ds)))
            images = _to_nchw(load_batch(ds, idx, cfg.data.resize))
            feats.append(model.encode_features(images, tap=tap).vectors)
    if was_training:
        model.train()
    labels = np.array([1 if r.label == datagen.LABEL_POS
                       else (0 if r.label == datagen.LABEL_NEG else -1)
                       for r in ds.records], dtype=int)
    return torch.cat(feats), labels


def linear_probe(model: SiameseModel, train_ds: TileDataset, val_ds: TileDataset,
                 cfg: RunConfig, seed: int = 0) -> ProbeResult:
    """Fit a single affine layer on frozen features of the upsampled train split.

    Selection: the epoch maximizing validation balanced accuracy, ties broken
    by higher macro F1, then by the earlier epoch.
    """
    for ds, name in ((train_ds, "train"), (val_ds, "val")):
        if any(r.label is None for r in ds.records):
            raise DatasetError(f"{name} split carries unlabeled tiles; probe needs labels")

    train_up = apply_upsampling(train_ds, cfg)
    x_train, y_train = extract_features(model, train_up, cfg, phase="probe",
                                        tap=cfg.probe_tap)
    x_val, y_val = extract_features(model, val_ds, cfg, phase="probe",
                                    tap=cfg.probe_tap)
    y_train_t = torch.from_numpy(y_train)

    torch.manual_seed(seed + 7919)
    head = nn.Linear(x_train.shape[1], 2)
    optimizer = torch.optim.SGD(head.parameters(), lr=cfg.probe_lr, momentum=0.9)
    ce = nn.CrossEntropyLoss()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 303]))

    best: tuple | None = None
    best_state = None
    val_reports: list[MetricsReport] = []
    for epoch in range(1, cfg.probe_epochs + 1):
        order = rng.permutation(len(train_up))
        for lo in range(0, len(order), cfg.probe_batch):
            idx = order[lo:lo + cfg.probe_batch]
            optimizer.zero_grad()
            loss = ce(head(x_train[idx]), y_train_t[idx])
            loss.backward()
            optimizer.step()
        with torch.no_grad():
            preds = head(x_val).argmax(dim=1).numpy()
        report = MetricsReport.from_predictions(y_val, preds, split="val", epoch=epoch)
        val_reports.append(report)
        key = (report.balanced_accuracy, report.macro_f1, -epoch)
        if best is None or key > best:
            best = key
            best_state = copy.deepcopy(head.state_dict())

    head.load_state_dict(best_state)
    best_epoch = -best[2]
    return ProbeResult(
        weight=head.weight.detach().clone(),
        bias=head.bias.detach().clone(),
        tap=cfg.probe_tap,
        best_epoch=best_epoch,
        best_val=val_reports[best_epoch - 1],
        val_reports=val_reports,
    )


def evaluate(model: SiameseModel, probe: ProbeResult, ds: TileDataset,
             cfg: RunConfig, split: str = "test", epoch: int = 0) -> MetricsReport:
    """Deterministic single evaluation pass over a labeled split."""
    if any(r.label is None for r in ds.records):
        raise DatasetError(f"{split} split carries unlabeled tiles; cannot evaluate")
    features, labels = extract_features(model, ds, cfg, phase="evaluate", tap=probe.tap)
    with torch.no_grad():
        preds = probe.logits(features).argmax(dim=1).numpy()
    return MetricsReport.from_predictions(labels, preds, split=split, epoch=epoch)


def train_supervised_baseline(cfg: RunConfig, data: SplitDatasets,
                              seed: int = 0) -> tuple[SiameseModel, ProbeResult]:
    """Cross-entropy training of the encoder plus a 2-way head, labeled data only."""
    torch.manual_seed(seed)
    model = build_model(cfg.model)
    head = nn.Linear(model.backbone.out_dim, 2)
    params = list(model.backbone.parameters()) + list(head.parameters())
    optimizer = torch.optim.SGD(params, lr=cfg.optim.lr, momentum=cfg.optim.momentum,
                                weight_decay=cfg.optim.weight_decay)
    ce = nn.CrossEntropyLoss()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 404]))

    train_up = apply_upsampling(data.train, cfg)
    labels_all = np.array([1 if r.label == datagen.LABEL_POS else 0
                           for r in train_up.records], dtype=int)
    with dataset_phase("pretrain"):
        imgs = load_batch(train_up, range(len(train_up)), cfg.data.resize)

    best: tuple | None = None
    best_states = None
    val_reports: list[MetricsReport] = []
    for epoch in range(1, cfg.baseline_epochs + 1):
        _set_lr(optimizer, cfg, epoch, total=cfg.baseline_epochs)
        model.train()
        order = rng.permutation(len(train_up))
        for lo in range(0, len(order), cfg.probe_batch):
            idx = order[lo:lo + cfg.probe_batch]
            x = _one_view_tensor(imgs[idx], cfg, rng)
            y = torch.from_numpy(labels_all[idx])
            optimizer.zero_grad()
            loss = ce(head(model.backbone(x)), y)
            loss.backward()
            optimizer.step()

        probe = ProbeResult(weight=head.weight.detach().clone(),
                            bias=head.bias.detach().clone(),
                            tap="encoder", best_epoch=epoch,
                            best_val=None, val_reports=[])  # type: ignore[arg-type]
        report = evaluate(model, probe, data.val, cfg, split="val", epoch=epoch)
        val_reports.append(report)
        key = (report.balanced_accuracy, report.macro_f1, -epoch)
        if best is None or key > best:
            best = key
            best_states = (copy.deepcopy(model.state_dict()), copy.deepcopy(head.state_dict()))

    model.load_state_dict(best_states[0])
    head.load_state_dict(best_states[1])
    best_epoch = -best[2]
    result = ProbeResult(weight=head.weight.detach().clone(),
                         bias=head.bias.detach().clone(),
                         tap="encoder", best_epoch=best_epoch,
                         best_val=val_reports[best_epoch - 1], val_reports=val_reports)
    return model, result


@dataclass
class AblationResult:
    test_reports: dict[str, list[MetricsReport]]
    mean_balanced_accuracy: dict[str, float]
    ordering: list[str]
    metrics_path: Path
    ranking_path: Path


def run_ablation(cfg: RunConfig, arms: tuple[str, ...] = ABLATION_ARMS,
                 seeds: tuple[int, ...] | None = None,
                 out_dir: str | Path | None = None) -> AblationResult:
    """Run every arm on identical data and seeds; write the comparison tables."""
    seeds = cfg.ablation_seeds if seeds is None else seeds
    out = Path(cfg.out_dir if out_dir is None else out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.to_json(out / "config.json")
    data = ensure_dataset(cfg)

    rows: list[str] = []
    test_reports: dict[str, list[MetricsReport]] = {arm: [] for arm in arms}
    for arm in arms:
        for seed in seeds:
            arm_dir = out / f"arm-{arm.replace('+', '_')}" / f"seed-{seed}"
            if arm == "supervised":
                arm_cfg = replace(cfg, loss_mode="supervised")
                model, probe = train_supervised_baseline(arm_cfg, data, seed=seed)
            else:
                arm_cfg = replace(cfg, loss_mode=arm)
                result = pretrain(arm_cfg, data=data, seed=seed, out_dir=arm_dir)
                model = result.model
                probe = linear_probe(model, data.train, data.val, arm_cfg, seed=seed)
            for rep in probe.val_reports:
                rows.append(rep.csv_row(arm))
            test = evaluate(model, probe, data.test, arm_cfg,
                            split="test", epoch=probe.best_epoch)
            rows.append(test.csv_row(arm))
            test_reports[arm].append(test)
            logger.info("arm %s seed %d: test ba=%.4f f1=%.4f", arm, seed,
                        test.balanced_accuracy, test.macro_f1)

    mean_ba = {arm: float(np.mean([r.balanced_accuracy for r in reps]))
               for arm, reps in test_reports.items()}
    ordering = sorted(arms, key=lambda a: mean_ba[a], reverse=True)

    metrics_path = out / "metrics.csv"
    with open(metrics_path, "w", newline="") as fh:
        fh.write(METRICS_HEADER + "\n")
        for row in rows:
            fh.write(row + "\n")
    ranking_path = out / "ranking.csv"
    with open(ranking_path, "w", newline="") as fh:
        fh.write("rank,arm,mean_balanced_accuracy,mean_macro_f1\n")
        for i, arm in enumerate(ordering, 1):
            mean_f1 = float(np.mean([r.macro_f1 for r in test_reports[arm]]))
            fh.write(f"{i},{arm},{repr(mean_ba[arm])},{repr(mean_f1)}\n")

    return AblationResult(test_reports=test_reports, mean_balanced_accuracy=mean_ba,
                          ordering=ordering, metrics_path=metrics_path,
                          ranking_path=ranking_path)
