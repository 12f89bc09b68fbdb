import numpy as np
import pytest

from causeseg.clusterbook import (
    AffinityStats,
    Clusterbook,
    affinity,
    distance_matrix,
    fit_clusterbook,
    fit_clusterbook_kmeanspp,
    load_clusterbook,
    modularity,
    modularity_core,
    modularity_gradient,
    save_clusterbook,
    vector_quantize,
)
from causeseg.errors import (
    BadMagicError,
    DegenerateGraphError,
    TruncatedPayloadError,
    ValidationError,
)
from causeseg.feature_io import (
    SynthSpec,
    generate_synthetic_dataset,
    generating_prototypes,
    read_feature_file,
)
from causeseg.rng import RngStream
from causeseg.tensor_math import cosine_matrix

from oracles import cosine_brute, finite_difference, modularity_delta, modularity_naive, rel_error


def random_features(n, c, seed=0):
    rng = np.random.default_rng(seed)
    # Positive-mean features keep the affinity graph well connected.
    return (rng.normal(size=(n, c)) + 0.8).astype(np.float32)


class TestAffinity:
    def test_two_identical_unit_features(self):
        t = np.array([[1.0, 0.0], [1.0, 0.0]], dtype=np.float32)
        stats = affinity(t)
        np.testing.assert_allclose(stats.a, [[0.0, 1.0], [1.0, 0.0]], atol=1e-6)
        np.testing.assert_allclose(stats.d, [1.0, 1.0], atol=1e-6)
        assert stats.e == pytest.approx(1.0, abs=1e-6)

    def test_orthogonal_features_degenerate(self):
        t = np.eye(3, dtype=np.float32)
        with pytest.raises(DegenerateGraphError):
            affinity(t)

    def test_matches_pairwise_brute_force(self):
        t = random_features(10, 8, seed=1)
        stats = affinity(t)
        ref = cosine_brute(t, t, clamp=True)
        np.fill_diagonal(ref, 0.0)
        np.testing.assert_allclose(stats.a, ref, atol=1e-6)
        np.testing.assert_allclose(stats.d, ref.sum(axis=1), atol=1e-5)

    def test_validate_passes_on_construction(self):
        stats = affinity(random_features(6, 4, seed=2))
        stats.validate()


class TestModularity:
    def test_constant_assignment_is_zero(self):
        t = random_features(12, 6, seed=3)
        stats = affinity(t)
        const = np.full((12, 5), 0.37)
        h = modularity_core(stats, const, tau_mod=0.1)
        assert abs(h) < 1e-9

    def test_two_disconnected_cliques_delta_half(self):
        a = np.array([
            [0, 1, 0, 0],
            [1, 0, 0, 0],
            [0, 0, 0, 1],
            [0, 0, 1, 0],
        ], dtype=np.float64)
        d = a.sum(axis=1)
        stats = AffinityStats(a=a, d=d, e=0.5 * d.sum())
        one_hot = np.array([[1, 0], [1, 0], [0, 1], [0, 1]], dtype=np.float64)
        h = modularity_core(stats, one_hot, tau_mod=0.1, sharpening="delta")
        assert h == pytest.approx(0.5, abs=1e-6)
        # Independent delta-sum oracle agrees.
        assert modularity_delta(a, [0, 0, 1, 1]) == pytest.approx(0.5, abs=1e-12)

    def test_trace_form_matches_naive_double_loop(self):
        rng = np.random.default_rng(4)
        for trial in range(5):
            t = random_features(12, 5, seed=10 + trial)
            stats = affinity(t)
            assign = rng.uniform(0.0, 1.0, size=(12, 4))
            h = modularity_core(stats, assign, tau_mod=0.1)
            ref = modularity_naive(stats.a, stats.d, stats.e, assign, 0.1)
            assert h == pytest.approx(ref, abs=1e-6)

    def test_modularity_of_features_and_prototypes(self):
        t = random_features(10, 6, seed=5)
        m = random_features(4, 6, seed=6)
        stats = affinity(t)
        assign = cosine_matrix(t, m, clamp_nonneg=True)
        assert modularity(t, m, 0.1) == pytest.approx(
            modularity_core(stats, assign, 0.1), abs=1e-9
        )


class TestModularityGradient:
    def test_finite_difference(self):
        t = random_features(10, 6, seed=7)
        m0 = random_features(4, 6, seed=8).astype(np.float64)

        def objective(m):
            return modularity(t, m.astype(np.float32), 0.1)

        grad = modularity_gradient(t, m0.astype(np.float32), 0.1)
        fd = finite_difference(objective, m0, step=1e-4)
        assert rel_error(grad, fd) < 1e-3

    def test_fully_clamped_prototype_has_zero_gradient(self):
        t = np.array([[1.0, 0.0, 0.0], [0.9, 0.1, 0.0], [0.8, 0.0, 0.1]],
                     dtype=np.float32)
        m = np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]], dtype=np.float32)
        grad = modularity_gradient(t, m, 0.1)
        np.testing.assert_array_equal(grad[1], np.zeros(3, np.float32))

    def test_plain_ascent_increases_objective(self):
        t = random_features(16, 8, seed=9)
        m = random_features(5, 8, seed=10)
        h_prev = modularity(t, m, 0.1)
        increases = 0
        for _ in range(20):
            m = m + 1e-3 * modularity_gradient(t, m, 0.1)
            h = modularity(t, m, 0.1)
            increases += h > h_prev
            h_prev = h
        assert increases >= 18


@pytest.fixture(scope="module")
def book_dataset(tmp_path_factory):
    spec = SynthSpec(n_classes=4, subconcepts_per_class=1, c=32, grid=(8, 8),
                     n_images=12, noise_sigma=0.02, seed=21)
    out = tmp_path_factory.mktemp("bookdata")
    manifest = generate_synthetic_dataset(spec, out, val_fraction=0.25)
    return spec, manifest


class TestFitClusterbook:
    def test_vq_purity_against_generating_prototypes(self, book_dataset):
        spec, manifest = book_dataset
        book = fit_clusterbook(manifest, k=8, rng=RngStream(3, "fit"))
        protos = generating_prototypes(spec)
        agree = total = 0
        for path in manifest.record_paths("train"):
            rec = read_feature_file(path)
            vq = vector_quantize(rec.features, book)
            true_proto = np.argmax(rec.features.astype(np.float64) @ protos.T, axis=1)
            # Each concept should serve exactly one generating prototype.
            for concept in np.unique(vq.indices):
                members = true_proto[vq.indices == concept]
                agree += int(np.bincount(members).max())
                total += members.size
        assert agree / total >= 0.95

    def test_all_identical_features_quantize_identically(self, tmp_path):
        spec = SynthSpec(n_classes=1, subconcepts_per_class=1, c=16,
                         grid=(4, 4), n_images=3, noise_sigma=0.0, seed=4)
        manifest = generate_synthetic_dataset(spec, tmp_path, val_fraction=0.0)
        book = fit_clusterbook(manifest, k=4, rng=RngStream(0, "fit"))
        for path in manifest.record_paths():
            rec = read_feature_file(path)
            vq = vector_quantize(rec.features, book)
            assert np.unique(vq.indices).size == 1

    def test_default_k_is_2048(self):
        import inspect

        sig = inspect.signature(fit_clusterbook)
        assert sig.parameters["k"].default == 2048
        assert sig.parameters["tau_mod"].default == pytest.approx(0.1)
        assert sig.parameters["lr"].default == pytest.approx(0.001)

    def test_adamw_knob(self, book_dataset):
        _, manifest = book_dataset
        book = fit_clusterbook(manifest, k=8, rng=RngStream(3, "fit"),
                               optimizer="adamw")
        assert book.builder == "modularity"
        with pytest.raises(ValidationError):
            fit_clusterbook(manifest, k=8, optimizer="sgd")


class TestKmeansppBook:
    def test_exact_recovery_zero_noise(self, tmp_path):
        spec = SynthSpec(n_classes=3, subconcepts_per_class=1, c=16,
                         grid=(6, 6), n_images=6, noise_sigma=0.0, seed=6)
        manifest = generate_synthetic_dataset(spec, tmp_path, val_fraction=0.0)
        book = fit_clusterbook_kmeanspp(manifest, k=3, rng=RngStream(1, "km"))
        protos = generating_prototypes(spec)
        sims = book.m.astype(np.float64) @ protos.T
        # Every centroid sits exactly on one prototype: zero inertia.
        assert np.allclose(sims.max(axis=1), 1.0, atol=1e-5)

    def test_pool_too_small(self, tmp_path):
        spec = SynthSpec(n_classes=2, subconcepts_per_class=1, c=8,
                         grid=(2, 2), n_images=1, seed=6)
        manifest = generate_synthetic_dataset(spec, tmp_path, val_fraction=0.0)
        with pytest.raises(ValidationError):
            fit_clusterbook_kmeanspp(manifest, k=16)


class TestVectorQuantize:
    def test_exact_prototype_row(self, book_dataset):
        _, manifest = book_dataset
        book = fit_clusterbook(manifest, k=6, rng=RngStream(5, "fit"))
        got = vector_quantize(book.m[3:4], book)
        assert got.indices[0] == 3
        np.testing.assert_array_equal(got.q[0], book.m[3])

    def test_idempotent(self, book_dataset):
        _, manifest = book_dataset
        book = fit_clusterbook(manifest, k=6, rng=RngStream(5, "fit"))
        rec = read_feature_file(manifest.record_paths("train")[0])
        first = vector_quantize(rec.features, book)
        second = vector_quantize(first.q, book)
        np.testing.assert_array_equal(first.indices, second.indices)

    def test_matches_brute_force_argmax(self):
        rng = np.random.default_rng(8)
        t = rng.normal(size=(50, 12)).astype(np.float32)
        m = rng.normal(size=(7, 12)).astype(np.float32)
        book = Clusterbook(m=m, distances=distance_matrix(m), k=7,
                           tau_mod=0.1, builder="modularity", seed=0)
        got = vector_quantize(t, book).indices
        ref = np.argmax(cosine_brute(t, m), axis=1)
        np.testing.assert_array_equal(got, ref)

    def test_scale_invariance(self):
        rng = np.random.default_rng(9)
        t = rng.normal(size=(20, 6)).astype(np.float32)
        m = rng.normal(size=(5, 6)).astype(np.float32)
        book = Clusterbook(m=m, distances=distance_matrix(m), k=5,
                           tau_mod=0.1, builder="modularity", seed=0)
        base = vector_quantize(t, book).indices
        scaled = vector_quantize(t * 7.5, book).indices
        np.testing.assert_array_equal(base, scaled)


class TestDistanceMatrix:
    def test_unit_diagonal_symmetric(self):
        rng = np.random.default_rng(10)
        m = rng.normal(size=(9, 5)).astype(np.float32)
        d = distance_matrix(m)
        np.testing.assert_allclose(np.diag(d), 1.0, atol=1e-6)
        np.testing.assert_array_equal(d, d.T)

    def test_spot_entries(self):
        rng = np.random.default_rng(11)
        m = rng.normal(size=(4, 7)).astype(np.float32)
        d = distance_matrix(m)
        for i in range(4):
            for j in range(4):
                if i == j:
                    continue
                ref = float(m[i] @ m[j] / (np.linalg.norm(m[i]) * np.linalg.norm(m[j])))
                assert d[i, j] == pytest.approx(ref, abs=1e-6)

    def test_prototype_rescale_invariance(self):
        rng = np.random.default_rng(12)
        m = rng.normal(size=(5, 6)).astype(np.float32)
        scales = rng.uniform(0.5, 4.0, size=(5, 1)).astype(np.float32)
        np.testing.assert_allclose(distance_matrix(m), distance_matrix(m * scales),
                                   atol=1e-6)


class TestBookIO:
    def test_round_trip(self, tmp_path, book_dataset):
        _, manifest = book_dataset
        book = fit_clusterbook(manifest, k=8, rng=RngStream(3, "fit"))
        path = tmp_path / "book.causebook"
        save_clusterbook(book, path)
        back = load_clusterbook(path)
        np.testing.assert_array_equal(back.m, book.m)
        np.testing.assert_allclose(back.distances, book.distances, atol=1e-6)
        assert back.builder == "modularity"
        assert back.tau_mod == pytest.approx(book.tau_mod)
        assert back.seed == book.seed

    def test_bad_magic_and_truncation(self, tmp_path, book_dataset):
        _, manifest = book_dataset
        book = fit_clusterbook(manifest, k=4, rng=RngStream(3, "fit"))
        path = tmp_path / "book.causebook"
        save_clusterbook(book, path)
        data = path.read_bytes()
        (tmp_path / "bad").write_bytes(b"XXXX" + data[4:])
        with pytest.raises(BadMagicError):
            load_clusterbook(tmp_path / "bad")
        (tmp_path / "short").write_bytes(data[:-9])
        with pytest.raises(TruncatedPayloadError):
            load_clusterbook(tmp_path / "short")
