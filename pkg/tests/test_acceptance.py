"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line. Criterion 6 runs the full desk-scale ablation and dominates
the suite's runtime (budgeted at 45 CPU-minutes).
"""

import itertools
import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch

from semisiam import pipeline
from semisiam.cli import main
from semisiam.config import DataConfig, OptimConfig, RunConfig, desk_config
from semisiam.datagen import SynthConfig, TileDataset, dataset_phase, load_batch
from semisiam.losses import (SupConBatch, UncertaintyWeights, simsiam_loss,
                             supcon_loss, total_loss)
from semisiam.model import EncoderConfig, ViewEmbeddings
from semisiam.pipeline import MetricsReport
from semisiam.pseudolabel import (FeatureBatch, PseudoConfig, purity_exact,
                                  synthesize_pseudo_negatives)

from helpers import central_diff, rel_err, unit_rows
from test_losses import supcon_oracle
from test_pseudolabel import enumeration_pmf


def report(n: int, ok: bool, detail: str):
    print(f"[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


class TestCriterion1Purity:
    def test_hypergeometric_purity(self):
        t0 = time.monotonic()
        est = purity_exact(505, 5, 16)
        ok_paper = abs(est.p_at_most(1) - 0.991) <= 0.001

        mismatches = 0
        for n in range(1, 13):
            for k in range(0, n + 1):
                for m in range(1, n + 1):
                    if purity_exact(n, k, m).probabilities != enumeration_pmf(n, k, m):
                        mismatches += 1
        elapsed = time.monotonic() - t0
        report(1, ok_paper and mismatches == 0 and elapsed < 1.0,
               f"p(n<=1)={est.p_at_most(1):.6f} (target 0.991 +/- 0.001), "
               f"{mismatches} oracle mismatches for N<=12, {elapsed:.2f}s")


class TestCriterion2SupConOracle:
    def test_matches_double_loop_on_200_batches(self):
        t0 = time.monotonic()
        rng = np.random.default_rng(11)
        worst = 0.0
        for i in range(200):
            m = int(rng.integers(2, 11))
            d = int(rng.integers(2, 9))
            tau = float(rng.choice([0.05, 0.1, 0.5]))
            labels = torch.from_numpy(rng.integers(0, 2, m))
            if len(torch.unique(labels)) == 1 and m < 2:
                continue
            z = unit_rows(torch.from_numpy(rng.standard_normal((m, d))))
            batch = SupConBatch(z, labels, temperature=tau)
            want = supcon_oracle(z, labels, tau)
            if all((labels == l).sum() < 2 for l in torch.unique(labels)):
                continue  # no valid anchors: error path, checked elsewhere
            got = float(supcon_loss(batch))
            denom = max(abs(want), 1e-12)
            worst = max(worst, abs(got - want) / denom)
        elapsed = time.monotonic() - t0
        report(2, worst <= 1e-6 and elapsed < 10.0,
               f"max relative error {worst:.2e} over 200 batches, {elapsed:.2f}s")


class TestCriterion3Gradients:
    def test_gradients_match_finite_differences(self):
        t0 = time.monotonic()
        rng = np.random.default_rng(23)
        worst = 0.0
        stop_grad_leak = 0.0
        for i in range(50):
            # two-view loss: p arguments carry gradients, z are stop-gradient
            b = int(rng.integers(2, 5))
            d = int(rng.integers(3, 7))
            ts = {n: torch.from_numpy(rng.standard_normal((b, d))).requires_grad_()
                  for n in ("z1", "z2", "p1", "p2")}

            def f_sim():
                return simsiam_loss(ViewEmbeddings(**ts))

            f_sim().backward()
            for n in ("p1", "p2"):
                worst = max(worst, rel_err(ts[n].grad, central_diff(f_sim, ts[n])))
            for n in ("z1", "z2"):
                if ts[n].grad is not None:
                    stop_grad_leak = max(stop_grad_leak, float(ts[n].grad.abs().max()))

            # supervised contrastive through row normalization
            m = int(rng.integers(3, 7))
            raw = torch.from_numpy(rng.standard_normal((m, d))).requires_grad_()
            labels = torch.from_numpy(rng.integers(0, 2, m))
            if all((labels == v).sum() < 2 for v in torch.unique(labels)):
                labels[1] = labels[0]
            tau = float(rng.choice([0.05, 0.1, 0.5]))

            def f_sup():
                return supcon_loss(SupConBatch(unit_rows(raw), labels, temperature=tau))

            f_sup().backward()
            worst = max(worst, rel_err(raw.grad, central_diff(f_sup, raw)))

            # fusion including the log-variance weights
            w = UncertaintyWeights(float(rng.normal()), float(rng.normal()),
                                   dtype=torch.float64)
            l1 = torch.tensor(float(rng.uniform(0, 3)), dtype=torch.float64,
                              requires_grad=True)
            l2 = torch.tensor(float(rng.uniform(0, 3)), dtype=torch.float64,
                              requires_grad=True)

            def f_tot():
                return total_loss(l1, l2, w)

            f_tot().backward()
            for t in (l1, l2, w.v1, w.v2):
                worst = max(worst, rel_err(t.grad, central_diff(f_tot, t)))

        elapsed = time.monotonic() - t0
        report(3, worst < 1e-4 and stop_grad_leak == 0.0 and elapsed < 30.0,
               f"max relative error {worst:.2e}, stop-gradient leak {stop_grad_leak}, "
               f"{elapsed:.1f}s over 50 instances")


class TestCriterion4ClosedForms:
    def test_closed_form_values(self):
        sup_ok = True
        for m in (3, 5, 8):
            z = unit_rows(torch.ones(m, 7, dtype=torch.float64))
            got = float(supcon_loss(SupConBatch(z, torch.zeros(m, dtype=torch.long))))
            sup_ok &= abs(got - m * math.log(m - 1)) <= 1e-9

        a = unit_rows(torch.randn(6, 9, dtype=torch.float64,
                                  generator=torch.Generator().manual_seed(0)))
        b = unit_rows(torch.randn(6, 9, dtype=torch.float64,
                                  generator=torch.Generator().manual_seed(1)))
        aligned = float(simsiam_loss(ViewEmbeddings(z1=a, z2=b, p1=b, p2=a)))

        w = UncertaintyWeights()
        fused = float(total_loss(torch.tensor(0.625), torch.tensor(1.75), w).detach())
        report(4, sup_ok and abs(aligned + 1.0) <= 1e-7 and abs(fused - 2.375) <= 1e-7,
               f"supcon closed forms ok={sup_ok}, aligned views={aligned:.9f}, "
               f"v=0 fusion={fused}")


@pytest.fixture(scope="session")
def purity_dataset(tmp_path_factory):
    """1:100 imbalanced tile dataset plus a briefly trained encoder."""
    tmp = tmp_path_factory.mktemp("purity")
    cfg = RunConfig(
        data=DataConfig(
            root=str(tmp / "data"),
            synth=SynthConfig(canvas_size=2048, tile_size=32,
                              target_positive_ratio=0.01,
                              structure_size_range=(10, 24), noise_octaves=4),
            fractions=(0.6, 0.2, 0.2),
            labeled_block_fraction=0.05,
            enrich_positive_fraction=0.08,
            resize=32,
        ),
        model=EncoderConfig(feature_dim=128, input_side=32),
        optim=OptimConfig(lr=0.05),
        batch_unlabeled=128,
        batch_labeled=16,
        subgroup_size=16,
        epochs=5,
        loss_mode="loss1",
        out_dir=str(tmp / "run"),
    )
    data = pipeline.ensure_dataset(cfg)
    result = pipeline.pretrain(cfg, data=data, seed=0)
    return cfg, data, result.model


class TestCriterion5PseudoNegativePurity:
    def test_selected_items_are_overwhelmingly_true_negatives(self, purity_dataset):
        t0 = time.monotonic()
        cfg, data, model = purity_dataset
        truth = pipeline.load_truth(cfg.data.root)
        n_unlabeled = len(data.unlabeled)
        unlabeled_pos = sum(1 for r in data.unlabeled.records
                            if truth[r.tile_id] == "pos")

        train_up = pipeline.apply_upsampling(data.train, cfg)
        pos_idx = [i for i, r in enumerate(train_up.records) if r.label == "pos"]
        model.eval()
        rng = np.random.default_rng(99)
        pseudo_cfg = PseudoConfig(subgroup_size=cfg.subgroup_size)

        with dataset_phase("purity-check"):
            pos_imgs = load_batch(train_up, pos_idx, cfg.data.resize)
            un_imgs = load_batch(data.unlabeled, range(n_unlabeled), cfg.data.resize)

        def encode(arr):
            x = torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))
            with torch.no_grad():
                return model.encode_features(x)

        picked = true_neg = 0
        for _ in range(1000):
            batch_idx = rng.choice(n_unlabeled, size=cfg.batch_unlabeled, replace=False)
            lab_idx = rng.choice(len(pos_idx), size=cfg.batch_labeled, replace=False)
            f_un = encode(un_imgs[batch_idx])
            f_un.source_indices = batch_idx
            f_pos = encode(pos_imgs[lab_idx])
            out = synthesize_pseudo_negatives(f_un, f_pos, pseudo_cfg, rng)
            for src in out.source_indices:
                tile = data.unlabeled.records[int(src)].tile_id
                true_neg += truth[tile] == "neg"
                picked += 1

        frac = true_neg / picked
        elapsed = time.monotonic() - t0
        report(5, frac >= 0.95 and elapsed < 300.0,
               f"{true_neg}/{picked} selections truly negative ({frac:.4f}; "
               f"pool holds {unlabeled_pos}/{n_unlabeled} hidden positives), "
               f"{elapsed:.0f}s")


@pytest.fixture(scope="session")
def desk_ablation(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("desk")
    cfg = desk_config(out_dir=str(tmp / "run"), data_root=str(tmp / "data"))
    t0 = time.monotonic()
    result = pipeline.run_ablation(cfg)
    elapsed = time.monotonic() - t0
    return cfg, result, elapsed


class TestCriterion6AblationOrdering:
    def test_dataset_matches_desk_contract(self, desk_ablation):
        cfg, _, _ = desk_ablation
        data = pipeline.ensure_dataset(cfg)
        n_unlabeled = len(data.unlabeled)
        n_labeled = len(data.train) + len(data.val) + len(data.test)
        truth = pipeline.load_truth(cfg.data.root)
        n_pos = sum(1 for v in truth.values() if v == "pos")
        ratio = n_pos / (len(truth) - n_pos)
        assert 4500 <= n_unlabeled <= 5500
        assert 250 <= n_labeled <= 400
        assert 1 / 65 <= ratio <= 1 / 40
        assert cfg.model.feature_dim == 128
        assert cfg.epochs == 30
        assert len(cfg.ablation_seeds) == 3

    def test_rank_structure(self, desk_ablation):
        cfg, result, elapsed = desk_ablation
        ba = result.mean_balanced_accuracy
        ordering_ok = (ba["loss1+2"] >= ba["loss1"] >= ba["supervised"]
                       and ba["loss2"] <= 0.60)
        report(6, ordering_ok and elapsed <= 45 * 60,
               f"mean test balanced accuracy loss1+2={ba['loss1+2']:.3f} >= "
               f"loss1={ba['loss1']:.3f} >= supervised={ba['supervised']:.3f}, "
               f"loss2={ba['loss2']:.3f} <= 0.60; wall time {elapsed/60:.1f} min")

    def test_pretraining_reduces_two_view_loss(self, desk_ablation):
        """Smoke oracle: final loss_cosine < initial on every seed of loss1."""
        cfg, _, _ = desk_ablation
        out = Path(cfg.out_dir)
        for seed in cfg.ablation_seeds:
            log = out / "arm-loss1" / f"seed-{seed}" / "train_log.csv"
            rows = log.read_text().strip().splitlines()[1:]
            first = float(rows[0].split(",")[1])
            last = float(rows[-1].split(",")[1])
            assert last < first, f"seed {seed}: {last} !< {first}"


class TestCriterion7MetricIdentities:
    def test_reproduces_hand_computations(self):
        rng = np.random.default_rng(5)
        worst = 0.0
        for _ in range(20):
            tp, fp, tn, fn = (int(v) for v in rng.integers(1, 700, 4))
            rep = MetricsReport.from_confusion(tp, fp, tn, fn)
            ba = 0.5 * (tp / (tp + fn) + tn / (tn + fp))
            f1p = 2 * tp / (2 * tp + fp + fn)
            f1n = 2 * tn / (2 * tn + fn + fp)
            worst = max(worst, abs(rep.balanced_accuracy - ba),
                        abs(rep.macro_f1 - (f1p + f1n) / 2))
        all_neg = MetricsReport.from_confusion(tp=0, fp=0, tn=619, fn=71)
        report(7, worst <= 1e-12 and all_neg.balanced_accuracy == 0.5,
               f"max deviation {worst:.2e}; all-negative balanced accuracy "
               f"= {all_neg.balanced_accuracy} exactly")


class TestCriterion8Determinism:
    def make_config(self, tmp_path) -> str:
        cfg = RunConfig(
            data=DataConfig(
                root=str(tmp_path / "data"),
                synth=SynthConfig(canvas_size=512, tile_size=32,
                                  target_positive_ratio=0.05,
                                  structure_size_range=(10, 24), noise_octaves=3),
                fractions=(0.5, 0.25, 0.25),
                labeled_block_fraction=0.3,
                enrich_positive_fraction=0.3,
            ),
            model=EncoderConfig(feature_dim=32, input_side=32),
            optim=OptimConfig(lr=0.02),
            batch_unlabeled=32,
            batch_labeled=16,
            subgroup_size=8,
            epochs=1,
            probe_epochs=2,
            out_dir=str(tmp_path / "run"),
        )
        path = tmp_path / "config.json"
        cfg.to_json(path)
        return str(path)

    def test_cli_reruns_are_byte_identical(self, tmp_path, capsys):
        from test_cli import tree_hash

        cfg_path = self.make_config(tmp_path)
        assert main(["gen-data", "--config", cfg_path]) == 0
        data_hash = tree_hash(tmp_path / "data")
        assert main(["gen-data", "--config", cfg_path]) == 0
        same_data = tree_hash(tmp_path / "data") == data_hash

        assert main(["pretrain", "--config", cfg_path]) == 0
        log = (tmp_path / "run" / "train_log.csv").read_bytes()
        ckpt = (tmp_path / "run" / "checkpoints" / "final.pt").read_bytes()
        assert main(["pretrain", "--config", cfg_path]) == 0
        same_log = (tmp_path / "run" / "train_log.csv").read_bytes() == log
        same_ckpt = (tmp_path / "run" / "checkpoints" / "final.pt").read_bytes() == ckpt

        main(["purity", "--pool", "505", "--positives", "5", "--draw", "16"])
        out1 = capsys.readouterr().out
        main(["purity", "--pool", "505", "--positives", "5", "--draw", "16"])
        out2 = capsys.readouterr().out

        report(8, same_data and same_log and same_ckpt and out1 == out2,
               f"dataset hash-identical={same_data}, log byte-identical={same_log}, "
               f"checkpoint byte-identical={same_ckpt}, purity stdout identical={out1 == out2}")
