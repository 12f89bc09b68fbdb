"""Acceptance suite: every criterion at its stated tolerance.

Each test prints one PASS line on success (run with -s to see them
inline); a failed assertion marks the criterion failed. The end-to-end
tests share one generated dataset and are the slow part of the suite.
"""

import itertools
import json
import time

import numpy as np
import pytest

from causeseg.clusterbook import (
    AffinityStats,
    affinity,
    modularity,
    modularity_core,
    modularity_gradient,
)
from causeseg.crf import CrfParams, crf_refine, mean_field
from causeseg.cli import _infer_maps, run_pipeline
from causeseg.feature_io import (
    LabelMap,
    SynthSpec,
    DatasetManifest,
    generate_synthetic_dataset,
    read_feature_file,
)
from causeseg.inference_eval import evaluate, hungarian_match, softmax_xent
from causeseg.kmeans import spherical_kmeans
from causeseg.rng import RngStream
from causeseg.seg_head import TeacherHead, head_backward, head_forward, init_head, save_head
from causeseg.ssl_trainer import ConceptBank, bank_update, infonce, sample_anchors

from oracles import (
    crf_exact_marginals,
    finite_difference,
    hungarian_brute,
    modularity_delta,
    modularity_naive,
    rel_error,
)


def _report(name):
    print(f"\nACCEPTANCE {name}: PASS")


# ---------------------------------------------------------------------------
# Gradient suite: < 1e-3 relative error (1e-4 for the contrastive loss)
# against central finite differences over 100 random seeds, < 30 s total.


class TestGradientSuite:
    def test_gradients_match_finite_differences(self):
        start = time.monotonic()
        budget_used = {"head": 0, "infonce": 0, "modularity": 0, "probe": 0}

        for seed in range(100):
            rng = np.random.default_rng(seed)

            # Segmentation head, all parameter tensors plus the input.
            head = init_head(4, 3, RngStream(seed, "acc-head"))
            t = rng.normal(size=(5, 4)).astype(np.float32)
            g = rng.normal(size=(5, 3)).astype(np.float32)
            _, cache = head_forward(t, head, mode="train")
            grads = head_backward(cache, g)
            for name in ("w1", "b1", "w2", "b2", "wp", "bp"):
                theta0 = head.params()[name].astype(np.float64)

                def loss(theta, name=name):
                    probe = head.copy()
                    setattr(probe, name, theta.astype(np.float32))
                    _, c2 = head_forward(t, probe, mode="train")
                    return float(np.sum(c2.projected * g))

                fd = finite_difference(loss, theta0, step=1e-4)
                assert rel_error(grads.params()[name], fd) < 1e-3, (seed, name)
            budget_used["head"] += 1

            # Contrastive log-likelihood w.r.t. the anchor.
            anchor = rng.normal(size=6)
            pos = rng.normal(size=(int(rng.integers(1, 4)), 6))
            neg = rng.normal(size=(int(rng.integers(1, 5)), 6))
            _, grad = infonce(anchor, pos, neg, 0.1)
            fd = finite_difference(lambda a: infonce(a, pos, neg, 0.1)[0],
                                   anchor, step=1e-5)
            assert rel_error(grad, fd) < 1e-4, seed
            budget_used["infonce"] += 1

            # Modularity ascent gradient w.r.t. the prototypes, differenced
            # against a float64 test-side objective (the library entry point
            # stores float32, whose quantization would drown these small
            # gradients at step 1e-4). The clamp's kink makes finite
            # differences invalid exactly at cos = 0, so draws sitting on
            # the boundary are resampled.
            def normalize(a):
                return a / np.linalg.norm(a, axis=1, keepdims=True)

            while True:
                t_feat = (rng.normal(size=(10, 6)) + 0.8).astype(np.float32)
                m0 = (rng.normal(size=(4, 6)) + 0.8).astype(np.float64)
                z = normalize(t_feat.astype(np.float64)) @ normalize(m0).T
                if np.abs(z).min() > 2e-3:
                    break
            stats = affinity(t_feat)
            b_mat = stats.a - np.outer(stats.d, stats.d) / (2 * stats.e)
            t_hat = normalize(t_feat.astype(np.float64))

            def objective(m):
                c_mat = np.maximum(t_hat @ normalize(m).T, 0.0)
                return float(np.sum(np.tanh(c_mat @ c_mat.T / 0.1) * b_mat)
                             / (2 * stats.e))

            grad = modularity_gradient(t_feat, m0.astype(np.float32), 0.1)
            fd = finite_difference(objective, m0, step=1e-4)
            assert rel_error(grad, fd) < 1e-3, seed
            budget_used["modularity"] += 1

            # Linear-probe softmax cross-entropy.
            x = rng.normal(size=(8, 5))
            y = rng.integers(0, 3, size=8)
            w0 = rng.normal(size=(5, 3))
            b0 = rng.normal(size=3)
            _, gw, gb = softmax_xent(w0, b0, x, y)
            fd_w = finite_difference(lambda w: softmax_xent(w, b0, x, y)[0], w0, 1e-5)
            fd_b = finite_difference(lambda b: softmax_xent(w0, b, x, y)[0], b0, 1e-5)
            assert rel_error(gw, fd_w) < 1e-3, seed
            assert rel_error(gb, fd_b) < 1e-3, seed
            budget_used["probe"] += 1

        elapsed = time.monotonic() - start
        assert all(v == 100 for v in budget_used.values())
        assert elapsed < 30.0, f"gradient suite took {elapsed:.1f}s"
        _report(f"gradient suite (100 seeds, {elapsed:.1f}s)")


class TestModularityOracles:
    def test_constant_assignment_exactly_zero(self):
        rng = np.random.default_rng(0)
        for trial in range(5):
            t = (rng.normal(size=(12, 6)) + 0.8).astype(np.float32)
            stats = affinity(t)
            h = modularity_core(stats, np.full((12, 4), 0.41), tau_mod=0.1)
            assert abs(h) < 1e-9, trial
        _report("modularity constant-assignment H = 0 (1e-9)")

    def test_two_clique_delta_form(self):
        a = np.array([[0, 1, 0, 0], [1, 0, 0, 0],
                      [0, 0, 0, 1], [0, 0, 1, 0]], dtype=np.float64)
        stats = AffinityStats(a=a, d=a.sum(axis=1), e=0.5 * a.sum() / 1.0)
        one_hot = np.array([[1, 0], [1, 0], [0, 1], [0, 1]], dtype=np.float64)
        h = modularity_core(stats, one_hot, tau_mod=0.1, sharpening="delta")
        assert abs(h - 0.5) < 1e-6
        assert abs(modularity_delta(a, [0, 0, 1, 1]) - 0.5) < 1e-12
        _report("modularity two-clique delta form = 0.5 (1e-6)")

    def test_trace_form_vs_naive_double_sum_50_instances(self):
        rng = np.random.default_rng(1)
        for trial in range(50):
            n = int(rng.integers(6, 14))
            k = int(rng.integers(2, 6))
            t = (rng.normal(size=(n, 5)) + 0.8).astype(np.float32)
            stats = affinity(t)
            assign = rng.uniform(0, 1, size=(n, k))
            h = modularity_core(stats, assign, tau_mod=0.1)
            ref = modularity_naive(stats.a, stats.d, stats.e, assign, 0.1)
            assert abs(h - ref) < 1e-6, trial
        _report("modularity trace form vs naive double sum, 50 instances (1e-6)")


class TestHungarianAcceptance:
    def test_200_random_6x6_vs_brute_force(self):
        start = time.monotonic()
        rng = np.random.default_rng(2)
        for trial in range(200):
            counts = rng.integers(0, 10000, size=(6, 6))
            perm = hungarian_match(counts)
            value = counts[np.arange(6), perm].sum()
            assert value == hungarian_brute(counts), trial
        elapsed = time.monotonic() - start
        assert elapsed < 5.0, f"hungarian suite took {elapsed:.1f}s"
        _report(f"hungarian vs brute force, 200 instances ({elapsed:.1f}s)")


class TestSphericalKmeansAcceptance:
    def test_lloyd_objective_non_increasing(self):
        rng = np.random.default_rng(3)
        for trial in range(20):
            x = rng.normal(size=(80, 6)).astype(np.float32)
            _, _, trace = spherical_kmeans(x, int(rng.integers(2, 8)), 30,
                                           RngStream(trial, "acc-km"))
            assert (np.diff(trace) <= 1e-10).all(), trial
        _report("spherical k-means objective non-increasing, 20 runs")

    def test_three_blob_recovery(self):
        rng = np.random.default_rng(4)
        centers = np.eye(3) * 4.0
        xs, truth = [], []
        for i in range(3):
            xs.append(centers[i] + 0.15 * rng.normal(size=(50, 3)))
            truth.append(np.full(50, i))
        x = np.vstack(xs).astype(np.float32)
        truth = np.concatenate(truth).astype(np.uint16)
        _, labels, _ = spherical_kmeans(x, 3, 50, RngStream(0, "acc-blobs"))
        report = evaluate(
            [LabelMap(1, 150, labels.astype(np.uint16)[None, :])],
            [LabelMap(1, 150, truth[None, :])], 3)
        assert report.miou == pytest.approx(1.0)
        _report("spherical k-means 3-blob recovery mIoU = 1.0")


class TestCrfAcceptance:
    def _instance(self, seed):
        rng = np.random.default_rng(seed)
        rgb = rng.integers(0, 256, size=(3, 4, 3)).astype(np.uint8)
        unary = rng.uniform(0.0, 2.0, size=(12, 2))
        params = CrfParams(
            appearance_weight=float(rng.uniform(0.2, 0.8)),
            spatial_std=float(rng.uniform(1.5, 4.0)),
            color_std=float(rng.uniform(30.0, 90.0)),
            smoothness_weight=float(rng.uniform(0.1, 0.5)),
            smoothness_std=float(rng.uniform(1.0, 2.5)),
            steps=10,
        )
        return rgb, unary, params

    def test_marginals_normalized_after_every_step(self):
        rgb, unary, params = self._instance(7)
        history = mean_field(unary, rgb, 3, 4, params, return_history=True)
        assert len(history) == 11
        for q in history:
            assert q.min() >= 0.0
            assert np.abs(q.sum(axis=1) - 1.0).max() <= 1e-6
        _report("CRF marginals normalized after each of 10 steps (1e-6)")

    def test_argmax_agreement_with_exact_enumeration(self):
        agree = total = 0
        for seed in range(20):
            rgb, unary, params = self._instance(seed)
            ys, xs = np.divmod(np.arange(12), 4)
            colors = rgb.reshape(-1, 3).astype(np.float64)
            kernel = np.zeros((12, 12))
            for i in range(12):
                for j in range(12):
                    if i == j:
                        continue
                    pd = (ys[i] - ys[j]) ** 2 + (xs[i] - xs[j]) ** 2
                    cd = np.sum((colors[i] - colors[j]) ** 2)
                    kernel[i, j] = (
                        params.appearance_weight
                        * np.exp(-pd / (2 * params.spatial_std ** 2)
                                 - cd / (2 * params.color_std ** 2))
                        + params.smoothness_weight
                        * np.exp(-pd / (2 * params.smoothness_std ** 2)))
            exact = crf_exact_marginals(unary, kernel, 2)
            q = mean_field(unary, rgb, 3, 4, params)
            agree += int((np.argmax(q, 1) == np.argmax(exact, 1)).sum())
            total += 12
        assert agree / total >= 0.90
        _report(f"CRF argmax vs exact enumeration: {agree}/{total} agree (>= 90%)")

    def test_identity_when_pairwise_weights_zero(self):
        rng = np.random.default_rng(9)
        rgb = rng.integers(0, 256, size=(6, 5, 3)).astype(np.uint8)
        labels = LabelMap(6, 5, rng.integers(0, 3, size=(6, 5)).astype(np.uint16))
        params = CrfParams(appearance_weight=0.0, smoothness_weight=0.0)
        out = crf_refine(rgb, labels, 3, params)
        np.testing.assert_array_equal(out.values, labels.values)
        _report("CRF identity at zero pairwise weights")


class TestConceptBankAcceptance:
    def test_occupancy_bound_1000_rounds(self):
        bank = ConceptBank(k=6, dim=4, capacity=100)
        data = np.random.default_rng(10)
        for step in range(1000):
            n = int(data.integers(1, 400))
            feats = data.normal(size=(n, 4)).astype(np.float32)
            ids = data.integers(0, 6, size=n)
            bank_update(bank, feats, ids, RngStream(step, "acc-bank"))
            assert bank.occupancy.max() <= 100, step
        _report("concept bank occupancy <= 100 over 1000 rounds")

    def test_stop_gradient_bit_identity(self, tiny_dataset):
        from causeseg.clusterbook import fit_clusterbook, vector_quantize
        from causeseg.ssl_trainer import TrainConfig, train

        _, manifest = tiny_dataset
        book = fit_clusterbook(manifest, k=12, rng=RngStream(0, "acc-book"))
        head = init_head(32, 16, RngStream(0, "acc-h"))
        teacher = TeacherHead(init_head(32, 16, RngStream(1, "acc-t")), 0.99)
        teacher_before = {k: v.copy() for k, v in teacher.params.params().items()}

        rec = read_feature_file(manifest.record_paths("train")[0])
        ids = vector_quantize(rec.features, book).indices
        bank = ConceptBank(book.k, 16, 100)
        _, tcache = head_forward(rec.features, teacher.params, mode="train")
        bank_update(bank, tcache.projected.astype(np.float32), ids, RngStream(2, "b"))
        bank_before = [s.copy() for s in bank.slots]

        one = DatasetManifest(
            name=manifest.name, classes=manifest.classes,
            feature_dim=manifest.feature_dim, patch_grid=manifest.patch_grid,
            records=manifest.records[:1], base_dir=manifest.base_dir)
        train(one, book, head, teacher, TrainConfig(epochs=1, seed=3))
        for name, arr in teacher.params.params().items():
            assert arr.tobytes() == teacher_before[name].tobytes(), name
        for before, after in zip(bank_before, bank.slots):
            assert before.tobytes() == after.tobytes()
        _report("teacher and bank rows bit-identical across a training step")


class TestAnchorAcceptance:
    def test_6_25_percent_and_window_membership_1000_seeds(self):
        h = w = 16
        for seed in range(1000):
            anchors = sample_anchors(h, w, 4, 4, RngStream(seed, "acc-anchor"))
            assert anchors.size == h * w // 16
            idx = 0
            for r0 in range(0, h - 3, 4):
                for c0 in range(0, w - 3, 4):
                    rr, cc = divmod(int(anchors[idx]), w)
                    assert r0 <= rr < r0 + 4 and c0 <= cc < c0 + 4, seed
                    idx += 1
        _report("anchors: exactly hw/16, inside their windows, 1000 seeds")


# ---------------------------------------------------------------------------
# End-to-end synthetic pipeline (the expensive block).


@pytest.fixture(scope="module")
def e2e_dataset(tmp_path_factory):
    base = tmp_path_factory.mktemp("e2e")
    spec = SynthSpec(n_classes=5, subconcepts_per_class=3, c=64, grid=(16, 16),
                     n_images=250, noise_sigma=0.05, seed=0)
    manifest = generate_synthetic_dataset(spec, base / "data", val_fraction=0.2)
    assert len(manifest.record_paths("train")) == 200
    assert len(manifest.record_paths("val")) == 50
    return base, manifest


@pytest.fixture(scope="module")
def e2e_trained(e2e_dataset):
    base, manifest = e2e_dataset
    start = time.monotonic()
    metrics = run_pipeline(
        {"seed": 0, "manifest": str(base / "data" / "manifest.json"),
         "book": {"k": 64}, "train": {"epochs": 6}},
        base / "trained")
    return metrics, time.monotonic() - start


class TestEndToEnd:
    def test_trained_pipeline_quality_and_wall_clock(self, e2e_trained):
        metrics, elapsed = e2e_trained
        assert metrics["mIoU"] >= 0.90, metrics
        assert metrics["pAcc"] >= 0.95, metrics
        assert elapsed < 300.0, f"pipeline took {elapsed:.0f}s"
        _report(f"pipeline mIoU {metrics['mIoU']:.3f} >= 0.90, "
                f"pAcc {metrics['pAcc']:.3f} >= 0.95, {elapsed:.0f}s < 300s")

    def test_untrained_head_scores_low(self, e2e_dataset):
        base, manifest = e2e_dataset
        head = init_head(64, 90, RngStream(0, "head-init"))
        path = base / "untrained.causehead"
        save_head(head, TeacherHead(head.copy(), 0.99), path)
        ids, maps = _infer_maps(manifest, path, 5, 50, CrfParams(), seed=0)
        gts = [read_feature_file(p).labels for p in manifest.record_paths("val")]
        report = evaluate(maps, gts, 5)
        assert report.miou <= 0.60, report.miou
        _report(f"untrained head mIoU {report.miou:.3f} <= 0.60")

    def test_modularity_book_vs_kmeanspp_book(self, e2e_dataset, e2e_trained):
        base, manifest = e2e_dataset
        metrics_mod, _ = e2e_trained
        metrics_km = run_pipeline(
            {"seed": 0, "manifest": str(base / "data" / "manifest.json"),
             "book": {"k": 64, "method": "kmeanspp"}, "train": {"epochs": 6}},
            base / "trained-km")
        assert metrics_mod["mIoU"] >= metrics_km["mIoU"] - 0.02, (
            metrics_mod["mIoU"], metrics_km["mIoU"])
        _report(f"book comparison: modularity {metrics_mod['mIoU']:.3f} >= "
                f"kmeans++ {metrics_km['mIoU']:.3f} - 0.02")


class TestDeterminism:
    def test_identical_seeds_byte_identical_metrics(self, tmp_path):
        config = {
            "seed": 17,
            "synth": {"n_classes": 3, "subconcepts_per_class": 2, "c": 32,
                      "grid": [8, 8], "n_images": 24, "noise_sigma": 0.05,
                      "val_fraction": 0.25},
            "book": {"k": 12},
            "train": {"epochs": 2, "out_dim": 16},
        }
        run_pipeline(config, tmp_path / "a")
        run_pipeline(config, tmp_path / "b")
        m1 = (tmp_path / "a" / "metrics.json").read_bytes()
        m2 = (tmp_path / "b" / "metrics.json").read_bytes()
        assert m1 == m2
        doc = json.loads(m1)
        assert set(doc) == {"mIoU", "pAcc", "per_class_iou",
                            "matched_permutation", "n_pixels"}
        _report("determinism: byte-identical metrics JSON for equal seeds")
