"""Acceptance suite: one test per release criterion, at pinned tolerances.

Run with `pytest tests/test_acceptance.py -v -s` to see one pass/fail line
per criterion.
"""

import json
import math
import time
from decimal import Decimal, getcontext

import numpy as np
import pytest
from click.testing import CliRunner

from mvrec.alignment import TAU_GRID, score_matrix, similarity_matrix, view_similarity_scores
from mvrec.backbone import bpr_loss
from mvrec.cli import main
from mvrec.evaluation import early_stopper, ndcg_at_k, rank_items, recall_at_k
from mvrec.fusion import fuse_sa, init_mlp_params, mlp_backward, mlp_forward
from mvrec.pipeline import synth_benchmark
from mvrec.store import synth_store
from mvrec.synth import SynthSpec, generate_benchmark


def report(name: str, ok: bool = True):
    print(f"[ACCEPTANCE] {name}: {'PASS' if ok else 'FAIL'}")
    assert ok


def decimal_profile(views, image, tau):
    """Arbitrary-precision softmax-of-cosines oracle (stdlib decimal)."""
    getcontext().prec = 40
    img = [Decimal(float(x)) for x in image]
    inorm = sum(x * x for x in img).sqrt()
    logits = []
    for row in views:
        vec = [Decimal(float(x)) for x in row]
        norm = sum(x * x for x in vec).sqrt()
        dot = sum(a * b for a, b in zip(vec, img))
        logits.append((dot / (norm * inorm)) / Decimal(float(tau)))
    peak = max(logits)
    exps = [(l - peak).exp() for l in logits]
    total = sum(exps)
    return np.array([float(e / total) for e in exps])


def test_similarity_oracle_equivalence():
    name = "eq2-oracle-equivalence (1000 instances, 1e-9 / 1e-12, <5s)"
    rng = np.random.default_rng(2024)
    started = time.perf_counter()
    try:
        for trial in range(1000):
            c = int(rng.integers(1, 9))
            d = int(rng.integers(2, 65))
            tau = float(rng.choice([0.05, 0.1, 0.7]))
            views = rng.standard_normal((c, d))
            image = rng.standard_normal(d)
            profile = view_similarity_scores(views, image, tau=tau)
            expected = decimal_profile(views, image, tau)
            assert np.max(np.abs(profile.scores - expected)) < 1e-9, f"trial {trial}"
            assert abs(float(profile.scores.sum()) - 1.0) <= 1e-12
        elapsed = time.perf_counter() - started
        assert elapsed < 5.0, f"oracle sweep took {elapsed:.2f}s"
    except AssertionError:
        report(name, False)
        raise
    report(name)


def test_scale_and_argmax_invariance():
    name = "scale/argmax-invariance (c in {0.1,3.7,100}, full tau grid)"
    rng = np.random.default_rng(77)
    try:
        for _ in range(50):
            c = int(rng.integers(2, 7))
            d = int(rng.integers(2, 33))
            views = rng.standard_normal((c, d))
            image = rng.standard_normal(d)
            base = view_similarity_scores(views, image, tau=0.1)
            for scale in (0.1, 3.7, 100.0):
                j = int(rng.integers(0, c))
                scaled_views = views.copy()
                scaled_views[j] *= scale
                for probe in (
                    view_similarity_scores(scaled_views, image, tau=0.1),
                    view_similarity_scores(views, image * scale, tau=0.1),
                    view_similarity_scores(views * scale, image * scale, tau=0.1),
                ):
                    assert np.max(np.abs(probe.scores - base.scores)) <= 1e-12
            argmaxes = {
                int(np.argmax(view_similarity_scores(views, image, tau=tau).scores))
                for tau in TAU_GRID
            }
            assert len(argmaxes) == 1
    except AssertionError:
        report(name, False)
        raise
    report(name)


def test_fusion_correctness():
    name = "fusion-correctness (SA 1e-12, hull, FD gradients <1e-4, <30s)"
    rng = np.random.default_rng(31337)
    started = time.perf_counter()

    def rel_err(a, b):
        return abs(a - b) / max(abs(a), abs(b), 1e-8)

    try:
        # SA equals an explicit per-view weighted sum, and stays in the hull
        for _ in range(200):
            c = int(rng.integers(1, 7))
            d = int(rng.integers(1, 9))
            views = rng.standard_normal((c, d))
            w = rng.random(c) + 1e-12
            w /= w.sum()
            profile = type("P", (), {"scores": w})()
            fused = fuse_sa(views, profile)
            explicit = np.zeros(d)
            for j in range(c):
                explicit = explicit + w[j] * views[j]
            assert np.max(np.abs(fused - explicit)) <= 1e-12
            assert np.all(fused <= views.max(axis=0) + 1e-12)
            assert np.all(fused >= views.min(axis=0) - 1e-12)

        # MLP fusion gradients against central finite differences
        step = 1e-5
        for _ in range(100):
            c = int(rng.integers(1, 4))
            d = int(rng.integers(1, 6))
            n = int(rng.integers(1, 4))
            flat = rng.standard_normal((n, c * d))
            params = init_mlp_params(c, d, seed=int(rng.integers(0, 10_000)))
            probe = rng.standard_normal((n, d))
            _, cache = mlp_forward(flat, params)
            grad_in, grad_w, grad_b = mlp_backward(cache, probe, params)

            def loss():
                out, _ = mlp_forward(flat, params)
                return float((out * probe).sum())

            for analytic, arr in ((grad_w, params.weight), (grad_b, params.bias),
                                  (grad_in, flat)):
                flat_arr = arr.reshape(-1)
                picks = rng.choice(flat_arr.size, size=min(3, flat_arr.size), replace=False)
                for idx in picks:
                    orig = flat_arr[idx]
                    flat_arr[idx] = orig + step
                    fp = loss()
                    flat_arr[idx] = orig - step
                    fm = loss()
                    flat_arr[idx] = orig
                    numeric = (fp - fm) / (2 * step)
                    assert rel_err(numeric, analytic.reshape(-1)[idx]) < 1e-4

        # BPR gradients against central finite differences
        for _ in range(100):
            pos, neg = (float(x) for x in rng.standard_normal(2) * 3)
            analytic_pos = -1.0 / (1.0 + math.exp(pos - neg))
            fd_pos = (bpr_loss(pos + step, neg) - bpr_loss(pos - step, neg)) / (2 * step)
            fd_neg = (bpr_loss(pos, neg + step) - bpr_loss(pos, neg - step)) / (2 * step)
            assert rel_err(fd_pos, analytic_pos) < 1e-4
            assert rel_err(fd_neg, -analytic_pos) < 1e-4

        elapsed = time.perf_counter() - started
        assert elapsed < 30.0, f"fusion checks took {elapsed:.2f}s"
    except AssertionError:
        report(name, False)
        raise
    report(name)


def test_metric_oracle_equivalence():
    name = "metric-oracle-equivalence (200 users x 50 items, 1e-12)"

    def oracle(ranking, targets, k):
        targets = set(targets)
        top = list(ranking)[:k]
        hits = [pos for pos, item in enumerate(top, start=1) if item in targets]
        recall = sum(1 for _ in hits) / len(targets)
        dcg = sum(1.0 / math.log2(pos + 1) for pos in hits)
        idcg = sum(1.0 / math.log2(p + 1) for p in range(1, min(k, len(targets)) + 1))
        return recall, dcg / idcg

    rng = np.random.default_rng(555)
    try:
        for _ in range(200):
            n = 50
            scores = rng.standard_normal(n)
            masked = set(int(x) for x in rng.choice(n, size=int(rng.integers(0, 10)), replace=False))
            candidates = [i for i in range(n) if i not in masked]
            targets = set(int(x) for x in rng.choice(candidates, size=int(rng.integers(1, 6)), replace=False))
            ranking = rank_items(scores, masked)
            assert not masked.intersection(int(i) for i in ranking)
            for k in (10, 20, 50):
                expect_r, expect_n = oracle(ranking, targets, k)
                assert abs(recall_at_k(ranking, targets, k) - expect_r) <= 1e-12
                assert abs(ndcg_at_k(ranking, targets, k) - expect_n) <= 1e-12
                assert not masked.intersection(int(i) for i in ranking[:k])
        # single hit at rank 2
        got = ndcg_at_k([9, 4, 1], {4}, 10)
        assert abs(got - 0.630930) <= 1e-6
        assert got == pytest.approx(1.0 / math.log2(3), abs=1e-12)
    except AssertionError:
        report(name, False)
        raise
    report(name)


def test_protocol_constants(tmp_path):
    name = "protocol-constants (patience 10; tau 0.1, lambda 1e-4, d 512 in echo)"
    try:
        # halts exactly after 10 non-improving epochs, not 9
        history = [0.5] + [0.4] * 9
        stop, best = early_stopper(history, patience=10)
        assert not stop
        history.append(0.4)
        stop, best = early_stopper(history, patience=10)
        assert stop and best == 0

        spec = SynthSpec(n_users=40, n_items=24, per_user=10, n_views=3, dim=8, seed=21)
        _, paths = generate_benchmark(tmp_path / "data", spec)
        runner = CliRunner()
        result = runner.invoke(main, [
            "train", "--manifest", paths["manifest"].as_posix(),
            "--store", paths["store"].as_posix(),
            "--epochs", "25", "--batch-size", "256",
            "--out", str(tmp_path / "defaults_run"),
        ])
        assert result.exit_code == 0, result.output
        echo = json.loads((tmp_path / "defaults_run" / "config.json").read_text())
        assert echo["tau"] == 0.1
        assert echo["rec"]["weight_decay"] == 1e-4
        assert echo["rec"]["d"] == 512
        assert echo["rec"]["patience"] == 10
    except AssertionError:
        report(name, False)
        raise
    report(name)


def test_dataset_stats_exact(tmp_path):
    name = "dataset-stats (Baby counts -> density 0.117%)"
    try:
        # synthesize a manifest with exactly the published Baby counts
        n_users, n_items, n_inter = 19445, 7050, 160792
        extra = n_inter - n_users * 8  # first `extra` users get 9 interactions
        manifest = tmp_path / "baby_splits.jsonl"
        with manifest.open("w", encoding="utf-8") as fh:
            for u in range(n_users):
                take = 9 if u < extra else 8
                for j in range(take):
                    rec = {"user_id": f"u{u:05d}",
                           "item_id": f"i{(u + j) % n_items:04d}",
                           "split": "train"}
                    fh.write(json.dumps(rec) + "\n")
        runner = CliRunner()
        result = runner.invoke(main, ["stats", "--manifest", str(manifest)])
        assert result.exit_code == 0, result.output
        assert "0.117%" in result.output
        assert f"{n_inter}" in result.output
    except AssertionError:
        report(name, False)
        raise
    report(name)


def test_synthetic_benchmark(tmp_path):
    name = "synth-benchmark (sa >= 2x popularity, ablation hurts, sa >= sum, <5min)"
    started = time.perf_counter()
    try:
        result = synth_benchmark(tmp_path / "bench", seed=0)
        elapsed = time.perf_counter() - started
        r = result["recall20"]
        assert r["sa"] >= 2.0 * r["popularity"], r
        assert r["sa_ablated"] < r["sa"], r
        assert r["sa"] >= r["sum"], r
        assert all(result["checks"].values())
        assert elapsed < 300.0, f"benchmark took {elapsed:.1f}s"
    except AssertionError:
        report(name, False)
        raise
    report(name)


def test_rerun_determinism(tmp_path):
    name = "determinism (rerun same seed -> byte-identical reports/checkpoints)"
    try:
        spec = SynthSpec(n_users=40, n_items=24, per_user=10, n_views=3, dim=8, seed=9)
        _, paths = generate_benchmark(tmp_path / "data", spec)
        runner = CliRunner()
        args = ["train", "--manifest", paths["manifest"].as_posix(),
                "--store", paths["store"].as_posix(),
                "--dim", "8", "--k", "4", "--epochs", "6", "--batch-size", "128",
                "--seed", "3", "--deterministic",
                "--out", str(tmp_path / "run")]
        assert runner.invoke(main, args).exit_code == 0
        names = ("checkpoint.ckpt", "report_val.jsonl", "report_test.jsonl",
                 "train_log.jsonl", "profiles.jsonl", "config.json")
        first = {n: (tmp_path / "run" / n).read_bytes() for n in names}
        assert runner.invoke(main, args).exit_code == 0
        for n in names:
            assert (tmp_path / "run" / n).read_bytes() == first[n], n
    except AssertionError:
        report(name, False)
        raise
    report(name)
