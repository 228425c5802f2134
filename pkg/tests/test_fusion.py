import numpy as np
import pytest

from mvrec.alignment import SimilarityProfile, profile_all
from mvrec.errors import ParameterError
from mvrec.fusion import (
    FUSION_METHODS,
    MlpFusionParams,
    fuse_all,
    fuse_concat,
    fuse_mlp,
    fuse_sa,
    fuse_sum,
    init_mlp_params,
    mlp_backward,
    mlp_forward,
    prepare_modality_inputs,
    write_fused_store,
)
from mvrec.store import GroupSignal, read_store, synth_store


def profile_of(scores, tau=0.1):
    scores = np.asarray(scores, dtype=np.float64)
    return SimilarityProfile(item_index=0, raw_sims=scores.copy(), scores=scores, tau=tau)


def mlp_oracle(views, params):
    """Naive triple-loop affine + leaky rectifier, no vectorization."""
    c, d = views.shape
    flat = [float(views[i, j]) for i in range(c) for j in range(d)]
    out = []
    for o in range(d):
        acc = float(params.bias[o])
        for k in range(c * d):
            acc += flat[k] * float(params.weight[k, o])
        out.append(acc if acc > 0 else params.alpha * acc)
    return np.array(out)


def test_fuse_sum_cases():
    np.testing.assert_array_equal(fuse_sum(np.array([[1.0, 2.0]])), [1.0, 2.0])
    np.testing.assert_array_equal(fuse_sum(np.array([[1.0, 2.0], [3.0, 4.0]])), [4.0, 6.0])
    views = np.random.default_rng(0).standard_normal((4, 6))
    np.testing.assert_allclose(fuse_sum(views), fuse_sum(views[::-1]), atol=1e-12)


def test_fuse_concat_cases():
    np.testing.assert_array_equal(fuse_concat(np.array([[1.0], [2.0]])), [1.0, 2.0])
    single = np.array([[3.0, 4.0]])
    np.testing.assert_array_equal(fuse_concat(single), [3.0, 4.0])
    views = np.array([[1.0, 0.0], [0.0, 1.0]])
    swapped = views[::-1]
    assert not np.array_equal(fuse_concat(views), fuse_concat(swapped))


def test_fuse_mlp_zero_params():
    views = np.array([[1.0, 2.0], [3.0, 4.0]])
    params = MlpFusionParams(weight=np.zeros((4, 2)), bias=np.zeros(2))
    np.testing.assert_array_equal(fuse_mlp(views, params), [0.0, 0.0])


def test_fuse_mlp_leaky_slope():
    params = MlpFusionParams(weight=np.array([[1.0]]), bias=np.zeros(1), alpha=0.01)
    out = fuse_mlp(np.array([[-2.0]]), params)
    assert out[0] == pytest.approx(-0.02, abs=1e-15)


def test_fuse_mlp_matches_triple_loop_oracle():
    rng = np.random.default_rng(5)
    for _ in range(10):
        c, d = int(rng.integers(1, 5)), int(rng.integers(1, 7))
        views = rng.standard_normal((c, d))
        params = init_mlp_params(c, d, seed=int(rng.integers(0, 1000)))
        np.testing.assert_allclose(fuse_mlp(views, params), mlp_oracle(views, params), atol=1e-10)


def test_fuse_mlp_shape_mismatch():
    params = MlpFusionParams(weight=np.zeros((4, 2)), bias=np.zeros(2))
    with pytest.raises(ParameterError):
        fuse_mlp(np.ones((3, 2)), params)


def test_fuse_sa_one_hot_and_convexity():
    views = np.array([[1.0, 1.0], [5.0, -2.0], [0.0, 0.5]])
    np.testing.assert_array_equal(fuse_sa(views, profile_of([0.0, 1.0, 0.0])), views[1])
    same = np.array([[2.0, 3.0], [2.0, 3.0]])
    np.testing.assert_allclose(fuse_sa(same, profile_of([0.5, 0.5])), [2.0, 3.0], atol=1e-15)
    basis = np.array([[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_allclose(fuse_sa(basis, profile_of([0.3, 0.7])), [0.3, 0.7], atol=1e-15)


def test_fuse_sa_length_mismatch():
    with pytest.raises(ParameterError):
        fuse_sa(np.ones((3, 2)), profile_of([0.5, 0.5]))


def test_sa_convex_hull_property():
    rng = np.random.default_rng(11)
    for _ in range(50):
        c, d = int(rng.integers(1, 6)), int(rng.integers(1, 8))
        views = rng.standard_normal((c, d))
        w = rng.random(c) + 1e-9
        w = w / w.sum()
        fused = fuse_sa(views, profile_of(w))
        assert np.all(fused <= views.max(axis=0) + 1e-12)
        assert np.all(fused >= views.min(axis=0) - 1e-12)


def test_sa_equals_explicit_weighted_sum():
    rng = np.random.default_rng(3)
    views = rng.standard_normal((4, 5))
    w = rng.random(4)
    w = w / w.sum()
    explicit = np.zeros(5)
    for j in range(4):
        explicit = explicit + w[j] * views[j]
    np.testing.assert_allclose(fuse_sa(views, profile_of(w)), explicit, atol=1e-12)


def test_sum_equals_scaled_sa_under_uniform_profile():
    rng = np.random.default_rng(8)
    views = rng.standard_normal((5, 7))
    uniform = profile_of(np.full(5, 0.2))
    np.testing.assert_allclose(fuse_sum(views), 5.0 * fuse_sa(views, uniform), atol=1e-12)


def fd_grad(f, x, step=1e-5):
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        fp = f()
        flat[k] = orig - step
        fm = f()
        flat[k] = orig
        gflat[k] = (fp - fm) / (2 * step)
    return grad


def test_mlp_gradients_match_finite_differences():
    rng = np.random.default_rng(17)
    for _ in range(10):
        c, d, n = int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(1, 4))
        flat = rng.standard_normal((n, c * d))
        params = init_mlp_params(c, d, seed=int(rng.integers(0, 10_000)))
        target = rng.standard_normal((n, d))

        def loss():
            out, _ = mlp_forward(flat, params)
            return float((out * target).sum())

        out, cache = mlp_forward(flat, params)
        grad_in, grad_w, grad_b = mlp_backward(cache, target, params)
        for analytic, arr in ((grad_w, params.weight), (grad_b, params.bias), (grad_in, flat)):
            numeric = fd_grad(loss, arr)
            denom = np.maximum(np.abs(numeric), np.maximum(np.abs(analytic), 1e-8))
            assert np.max(np.abs(numeric - analytic) / denom) < 1e-4


def test_fuse_all_dims_and_image_passthrough():
    store = synth_store(6, 5, 16, seed=2)
    profiles = profile_all(store, tau=0.1)
    params = init_mlp_params(5, 16, seed=0)
    for method in FUSION_METHODS:
        reps = fuse_all(store, profiles, method, params=params)
        assert len(reps) == 6
        width = 5 * 16 if method == "concat" else 16
        for r in reps:
            assert r.text.shape == (width,)
            assert r.image.tobytes() == store.image[r.item_index].tobytes()


def test_fuse_all_missing_requirements():
    store = synth_store(3, 2, 4, seed=0)
    with pytest.raises(ParameterError):
        fuse_all(store, None, "mlp")
    with pytest.raises(ParameterError):
        fuse_all(store, None, "sa")
    with pytest.raises(ParameterError):
        fuse_all(store, None, "nope")


def test_sa_tracks_image_better_than_sum():
    # planted store: view 0 equals the image direction, others are noise
    store = synth_store(40, 4, 24, seed=6,
                        structure=GroupSignal(n_groups=2, signal_weight=1.0,
                                              noise_weight=0.0, informative_view=0))
    profiles = profile_all(store, tau=0.1)
    sa = fuse_all(store, profiles, "sa")
    su = fuse_all(store, profiles, "sum")
    image = store.image.astype(np.float64)

    def mean_cos(reps):
        cs = []
        for r in reps:
            v = r.text
            cs.append(v @ image[r.item_index] / (np.linalg.norm(v) * np.linalg.norm(image[r.item_index])))
        return float(np.mean(cs))

    assert mean_cos(sa) > mean_cos(su)


def test_prepare_modality_inputs_shapes():
    store = synth_store(7, 3, 8, seed=4)
    profiles = profile_all(store, tau=0.1)
    for method in FUSION_METHODS:
        inputs = prepare_modality_inputs(store, profiles, method, mlp_seed=1)
        if method == "mlp":
            assert inputs.text_input.shape == (7, 24)
            assert inputs.mlp is not None
            assert inputs.text_dim == 8
        elif method == "concat":
            assert inputs.text_input.shape == (7, 24)
            assert inputs.text_dim == 24
        else:
            assert inputs.text_input.shape == (7, 8)
        assert inputs.image.shape == (7, 8)


def test_concat_width_at_encoder_scale():
    # five views at the 768-wide encoder dimension concatenate to 3840
    store = synth_store(2, 5, 768, seed=0)
    profiles = profile_all(store, tau=0.1)
    reps = fuse_all(store, profiles, "concat")
    assert reps[0].text.shape == (3840,)
    inputs = prepare_modality_inputs(store, profiles, "concat")
    assert inputs.text_dim == 3840


def test_append_profile_flag():
    store = synth_store(5, 3, 8, seed=1)
    profiles = profile_all(store, tau=0.1)
    plain = prepare_modality_inputs(store, profiles, "sa")
    widened = prepare_modality_inputs(store, profiles, "sa", append_profile=True)
    assert widened.text_input.shape == (5, 8 + 3)
    np.testing.assert_array_equal(widened.text_input[:, :8], plain.text_input)
    np.testing.assert_allclose(widened.text_input[:, 8:].sum(axis=1), 1.0, atol=1e-12)
    # graph construction stays on the fused text, not the widened features
    np.testing.assert_array_equal(widened.graph_vectors, plain.graph_vectors)
    with pytest.raises(ParameterError):
        prepare_modality_inputs(store, profiles, "mlp", append_profile=True)


def test_fused_store_dump_roundtrip(tmp_path):
    store = synth_store(4, 3, 6, seed=9)
    profiles = profile_all(store, tau=0.1)
    for method in ("sa", "concat"):
        reps = fuse_all(store, profiles, method)
        path = tmp_path / f"fused_{method}.bin"
        write_fused_store(reps, store.item_ids, path)
        loaded = read_store(path)
        assert loaded.n_views == 1
        assert loaded.extra_manifest["fusion_method"] == method
        width = 18 if method == "concat" else 6
        assert loaded.dim == width
        np.testing.assert_allclose(
            loaded.text[:, 0, :], np.stack([r.text for r in reps]).astype(np.float32), atol=0)
