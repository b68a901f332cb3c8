import math
from dataclasses import replace

import numpy as np
import pytest

from noisetune import tensor as T
from noisetune.augment import ViewBatch, ViewRecord, generate_views
from noisetune.encoder import EncoderConfig, derive_class_embeddings, init_model
from noisetune.engine import (
    AdaptationConfig,
    adapt,
    consistency_loss,
    entropy_loss,
    infer,
    init_noise,
    perturb_views,
    run_episode,
    select_top_k,
    zero_noise,
    zero_shot_infer,
)
from noisetune.exceptions import AdaptationError, ConfigError, DimensionError, ParameterError
from noisetune.rng import stream
from noisetune.tensor import Tensor

EPS = 1.0 / 255.0
# mpmath, 50 digits: 1 / (1 + exp(0.8 / 0.007))
TEMPERED_MINORITY = 2.3245822930325624775e-50


class _FixedRng:
    """Stand-in generator returning a preset standard-normal draw."""

    def __init__(self, values):
        self.values = np.asarray(values, dtype=float)

    def standard_normal(self, shape):
        return self.values.reshape(shape)


@pytest.fixture
def fixed_draw(monkeypatch):
    import noisetune.engine as engine
    monkeypatch.setattr(engine, "as_generator", lambda seed: seed)
    return _FixedRng


@pytest.fixture(scope="module")
def small():
    cfg = EncoderConfig(image_size=8, patch_size=4, embed_dim=8, n_blocks=1)
    model = init_model(cfg, seed=0)
    rng = np.random.default_rng(0)
    classes = derive_class_embeddings(model, rng.uniform(0, 1, (3, 3, 8, 8)))
    image = rng.uniform(0, 1, (3, 8, 8))
    return model, classes, image


class TestConfig:
    def test_top_k(self):
        assert AdaptationConfig(n_views=64).top_k == 6
        assert AdaptationConfig(n_views=32).top_k == 3
        assert AdaptationConfig(n_views=4).top_k == 1

    @pytest.mark.parametrize("kw", [dict(epsilon=0), dict(n_views=1), dict(top_k_fraction=0),
                                    dict(tau=0), dict(noise_init="uniform"), dict(crop_scale=(0.9, 0.5))])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            AdaptationConfig(**kw)

    def test_defaults(self):
        cfg = AdaptationConfig()
        assert (cfg.epsilon, cfg.lr, cfg.tau, cfg.n_views, cfg.steps) == (EPS, 1e-3, 7e-3, 64, 1)


class TestInitNoise:
    @pytest.mark.parametrize("raw,expected", [(0.5, 0.00392157), (-2.1, -0.00392157), (0.001, 0.001)])
    def test_clamp(self, fixed_draw, raw, expected):
        xi = init_noise((1,), EPS, fixed_draw([raw])).xi.data[0]
        assert xi == pytest.approx(expected, abs=5e-9)

    def test_matches_clipped_draw(self):
        raw = stream(7).standard_normal((3, 4, 4))
        assert np.array_equal(init_noise((3, 4, 4), EPS, stream(7)).xi.data, np.clip(raw, -EPS, EPS))

    def test_within_budget(self):
        noise = init_noise((3, 8, 8), EPS, stream(1))
        assert noise.linf <= EPS and noise.xi.requires_grad

    def test_deterministic(self):
        a, b = init_noise((3, 4, 4), EPS, stream(2)), init_noise((3, 4, 4), EPS, stream(2))
        assert np.array_equal(a.xi.data, b.xi.data)


class TestPerturbViews:
    def test_zero_noise_identity(self, small):
        views = generate_views(small[2], 4, stream(0))
        out = perturb_views(views, zero_noise((3, 8, 8), EPS))
        assert np.array_equal(out.data, views.views)

    def test_clamps_at_one(self):
        out = perturb_views(np.full((1, 1, 1, 1), 0.999), Tensor(np.full((1, 1, 1), 0.003)))
        assert out.data.item() == 1.0

    def test_gradient_counts_in_range_pixels(self):
        views = np.array([[[[0.0, 0.5, 1.0, 0.999]]], [[[0.2, 0.9995, 0.0, 0.5]]]])
        xi = Tensor(np.array([[[-0.001, 0.001, 0.001, 0.002]]]), requires_grad=True)
        T.backward(T.sum(perturb_views(views, xi)))
        shifted = views + xi.data
        expected = ((shifted >= 0) & (shifted <= 1)).sum(axis=0)
        np.testing.assert_array_equal(xi.grad, expected)
        np.testing.assert_array_equal(xi.grad, [[[1, 1, 1, 1]]])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            perturb_views(np.zeros((2, 3, 4, 4)), Tensor(np.zeros((3, 4, 5))))


class TestSelectTopK:
    def test_lowest_entropy_rows(self):
        # row entropies increase 0 < 2 < 1
        logits = np.array([[10.0, 0.0, 0.0], [0.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
        assert list(select_top_k(logits, 2)) == [0, 2]

    def test_all(self):
        assert list(select_top_k(np.random.default_rng(0).standard_normal((5, 3)), 5)) == [0, 1, 2, 3, 4]

    def test_brute_force_sort(self):
        logits = np.random.default_rng(1).standard_normal((64, 8))
        p = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
        ent = [-sum(v * math.log(v) for v in row) for row in p]
        expected = sorted(sorted(range(64), key=lambda i: (ent[i], i))[:6])
        assert list(select_top_k(logits, 6)) == expected

    def test_ties_favour_lower_index(self):
        assert list(select_top_k(np.zeros((4, 3)), 2)) == [0, 1]

    @pytest.mark.parametrize("k", [0, 6])
    def test_out_of_range(self, k):
        with pytest.raises(ParameterError):
            select_top_k(np.zeros((5, 2)), k)


class TestEntropyLoss:
    def test_identical_one_hot_rows(self):
        logits = np.array([[800.0, 0.0], [800.0, 0.0]])
        assert entropy_loss(Tensor(logits), [0, 1]).item() == pytest.approx(0.0, abs=1e-300)

    def test_average_before_entropy(self):
        logits = np.array([[800.0, 0.0], [0.0, 800.0]])
        assert entropy_loss(Tensor(logits), [0, 1]).item() == pytest.approx(math.log(2), abs=1e-15)

    def test_matches_reimplementation(self):
        logits = np.random.default_rng(2).standard_normal((6, 4))
        idx = [1, 3, 4]
        p = np.exp(logits[idx]) / np.exp(logits[idx]).sum(1, keepdims=True)
        avg = p.mean(0)
        assert abs(entropy_loss(Tensor(logits), idx).item() + (avg * np.log(avg)).sum()) <= 1e-12

    def test_empty(self):
        with pytest.raises(ParameterError):
            entropy_loss(Tensor(np.zeros((3, 2))), [])


class TestConsistencyLoss:
    def test_identical(self):
        assert consistency_loss(Tensor(np.ones((3, 4))), [0, 1, 2]).item() == 0.0

    def test_ordered_pair_convention(self):
        assert consistency_loss(Tensor([[0.0, 0.0], [3.0, 4.0]]), [0, 1]).item() == 10.0

    def test_three_points(self):
        emb = Tensor([[0.0, 0.0], [3.0, 4.0], [0.0, 8.0]])
        assert consistency_loss(emb, [0, 1, 2]).item() == 36.0

    def test_singleton(self):
        assert consistency_loss(Tensor(np.eye(3)), [1]).item() == 0.0


class TestAdapt:
    def test_zero_steps_returns_init(self, small):
        model, classes, image = small
        cfg = AdaptationConfig(n_views=4, steps=0)
        views = generate_views(image, 4, stream(0))
        noise, trace = adapt(model, classes, views, cfg, seed=stream(1))
        assert np.array_equal(noise.xi.data, init_noise((3, 8, 8), EPS, stream(1)).xi.data)
        assert len(trace) == 0

    @pytest.mark.parametrize("steps", [1, 3, 5])
    def test_budget_after_every_step(self, small, steps):
        model, classes, image = small
        cfg = AdaptationConfig(n_views=4, steps=steps, lr=5e-3)
        noise, trace = adapt(model, classes, generate_views(image, 4, stream(0)), cfg, seed=stream(2))
        assert len(trace) == steps
        assert all(s.noise_linf <= EPS for s in trace.steps) and noise.linf <= EPS

    def test_sign_step_arithmetic(self, small):
        model, classes, image = small
        cfg = AdaptationConfig(n_views=4, steps=1, noise_init="zero")
        noise, _ = adapt(model, classes, generate_views(image, 4, stream(0)), cfg)
        values = set(np.unique(noise.xi.data).tolist())
        assert values <= {0.0, 1e-3, -1e-3}
        assert values != {0.0}

    def test_non_finite_loss_raises(self, small):
        model, classes, image = small
        cfg = AdaptationConfig(n_views=4, steps=2, alpha=float("inf"))
        with pytest.raises(AdaptationError) as info:
            adapt(model, classes, generate_views(image, 4, stream(0)), cfg, seed=stream(3))
        assert info.value.step == 0 and len(info.value.trace) == 0

    def test_model_untouched(self, small):
        model, classes, image = small
        before = model.state_bytes()
        adapt(model, classes, generate_views(image, 4, stream(0)), AdaptationConfig(n_views=4, steps=2))
        assert model.state_bytes() == before


class TestInfer:
    def test_tempered_two_class(self):
        from noisetune.engine import _probabilities
        logits = np.array([[0.9, 0.1]] * 3)
        p = _probabilities(logits / 7e-3).mean(axis=0)
        assert p[0] == pytest.approx(1.0, abs=1e-15)
        assert p[1] == pytest.approx(TEMPERED_MINORITY, rel=1e-9)
        assert int(np.argmax(p)) == 0

    def test_huge_tau_gives_uniform(self, small):
        model, classes, image = small
        cfg = AdaptationConfig(n_views=4, tau=1e9)
        views = generate_views(image, 4, stream(0))
        rec = infer(model, classes, views, zero_noise((3, 8, 8), EPS), cfg)
        np.testing.assert_allclose(rec.probabilities, 1 / 3, atol=1e-9)

    def test_k_one_is_best_view(self, small):
        from noisetune.engine import _probabilities, row_entropies, _view_logits
        model, classes, image = small
        cfg = AdaptationConfig(n_views=8, top_k_fraction=0.125, use_temperature=False)
        views = generate_views(image, 8, stream(4))
        noise = zero_noise((3, 8, 8), EPS)
        logits = _view_logits(model, classes, views, noise)
        best = int(np.argmin(row_entropies(logits)))
        rec = infer(model, classes, views, noise, cfg)
        np.testing.assert_array_equal(rec.probabilities, _probabilities(logits[best:best + 1])[0])

    def test_zero_shot_equivalence(self, small):
        model, classes, image = small
        single = ViewBatch(image[None].copy(), [ViewRecord("original")])
        cfg = AdaptationConfig(n_views=2, top_k_fraction=0.5, steps=0, use_temperature=False)
        rec = infer(model, classes, single, zero_noise((3, 8, 8), EPS), cfg)
        zs = zero_shot_infer(model, classes, image)
        np.testing.assert_array_equal(rec.probabilities, zs.probabilities)

    def test_zero_shot_template_is_own_class(self, small):
        model, classes, _ = small
        rng = np.random.default_rng(0)
        templates = rng.uniform(0, 1, (3, 3, 8, 8))
        for i, t in enumerate(templates):
            assert zero_shot_infer(model, classes, t).predicted_label == i

    def test_zero_shot_invariant_to_zero_noise(self, small):
        model, classes, image = small
        perturbed = perturb_views(image[None], zero_noise((3, 8, 8), EPS)).data[0]
        assert np.array_equal(zero_shot_infer(model, classes, perturbed).probabilities,
                              zero_shot_infer(model, classes, image).probabilities)

    def test_reuse_last_k(self, small):
        model, classes, image = small
        cfg = AdaptationConfig(n_views=8, reuse_last_k=True)
        views = generate_views(image, 8, stream(5))
        noise, trace = adapt(model, classes, views, cfg, seed=stream(6))
        rec = infer(model, classes, views, noise, cfg, trace)
        assert rec.diagnostics["top_k"] == trace.last_top_k


class TestRunEpisode:
    def test_diagnostics(self, small):
        model, classes, image = small
        cfg = AdaptationConfig(n_views=4, steps=2)
        rec = run_episode(model, classes, image, cfg, stream(0), stream(1), true_label=2, sample_id=7)
        d = rec.diagnostics
        assert rec.sample_id == 7 and rec.true_label == 2
        assert len(d["trace"]) == 2 and len(d["provenance"]) == 4
        assert d["noise_linf"] <= EPS
        assert np.isfinite(d["entropy_before"]) and np.isfinite(d["entropy_after"])

    def test_deterministic(self, small):
        model, classes, image = small
        cfg = AdaptationConfig(n_views=4)
        a = run_episode(model, classes, image, cfg, stream(0), stream(1))
        b = run_episode(model, classes, image, cfg, stream(0), stream(1))
        assert np.array_equal(a.probabilities, b.probabilities)

    def test_consistency_flag_changes_objective(self, small):
        model, classes, image = small
        base = AdaptationConfig(n_views=20, steps=1)
        a = run_episode(model, classes, image, base, stream(0), stream(1))
        b = run_episode(model, classes, image, replace(base, use_consistency_loss=False), stream(0), stream(1))
        assert a.diagnostics["trace"][0]["consistency"] > 0
        assert b.diagnostics["trace"][0]["consistency"] == 0.0
