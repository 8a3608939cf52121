import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from svwa import numerics as nx
from svwa.adaptation import (
    AdaptConfig,
    canonical_points,
    make_branches,
    run_stream,
    svwa_adapt,
    tent_adapt,
    variation_views,
    weight_average,
)
from svwa.errors import StructureError
from svwa.geometry import PointCloud
from svwa.model import PointNetLiteConfig, assert_frozen_equal, forward_logits, init_model
from svwa.numerics import TRAIN

CFG = PointNetLiteConfig(3, (8, 16), (6,), fps_points=8)


def model(seed=0):
    state = init_model(CFG, seed)
    rng = np.random.default_rng(seed + 50)
    for n in state.norm_names():
        state.params[n] = state.params[n] + 0.2 * rng.normal(size=state.params[n].shape)
    return state


def clouds(n=6, points=20, seed=0):
    rng = np.random.default_rng(seed)
    return [PointCloud(rng.normal(size=(points, 3)) * [1, 0.5, 0.3], i % 3) for i in range(n)]


def points(b=6, seed=0):
    return np.random.default_rng(seed).normal(size=(b, CFG.fps_points, 3))


def entropy(state, x, params=None):
    logits, _ = forward_logits(state, x, TRAIN, params)
    return nx.softmax_entropy(logits)[0]


class TestWeightAverage:
    def test_idempotent_bitwise(self):
        p = model().get_norm_params()
        avg = weight_average([nx.copy_params(p) for _ in range(6)])
        assert all(avg[n].tobytes() == p[n].tobytes() for n in p)

    def test_scalar_mean(self):
        assert weight_average([{"a": np.array([1.0])}, {"a": np.array([3.0])}])["a"].tolist() == [2.0]

    def test_permutation_invariant_bitwise(self):
        rng = np.random.default_rng(1)
        sets = [{"a": rng.normal(size=20), "b": rng.normal(size=(2, 3))} for _ in range(7)]
        ref = weight_average(sets)
        for perm in ([6, 5, 4, 3, 2, 1, 0], [3, 0, 6, 1, 5, 2, 4]):
            out = weight_average([sets[i] for i in perm])
            assert all(out[n].tobytes() == ref[n].tobytes() for n in ref)

    def test_symmetric_pair(self):
        rng = np.random.default_rng(2)
        theta, c = rng.normal(size=50), rng.normal(size=50)
        avg = weight_average([{"t": theta + c}, {"t": theta - c}])["t"]
        np.testing.assert_allclose(avg, theta, atol=1e-15, rtol=0)

    def test_matches_fsum_oracle(self):
        import math

        rng = np.random.default_rng(3)
        sets = [{"t": rng.normal(size=30) * 10.0 ** rng.integers(-3, 3)} for _ in range(6)]
        avg = weight_average(sets)["t"]
        oracle = [math.fsum(s["t"][i] for s in sets) / 6 for i in range(30)]
        # a handful of roundings, each within half an ulp of the largest addend
        scale = max(np.abs(s["t"]).max() for s in sets)
        np.testing.assert_allclose(avg, oracle, rtol=0, atol=8 * np.finfo(float).eps * scale)

    def test_misaligned(self):
        with pytest.raises(StructureError):
            weight_average([{"a": np.zeros(2)}, {"a": np.zeros(3)}])
        with pytest.raises(ValueError):
            weight_average([])


class TestTent:
    def test_does_not_modify_model(self):
        state = model()
        before = {n: v.copy() for n, v in state.params.items()}
        tent_adapt(state, points(), AdaptConfig().optimizer(state.get_norm_params()))
        assert all(state.params[n].tobytes() == before[n].tobytes() for n in before)

    def test_entropy_report(self):
        state = model()
        x = points()
        params, step = tent_adapt(state, x, AdaptConfig().optimizer(state.get_norm_params()), 3)
        assert step.entropy_before == pytest.approx(entropy(state, x))
        assert step.entropy_after == pytest.approx(entropy(state, x, params))
        assert len(step.entropies) == 3
        assert all(0 <= e <= np.log(3) for e in step.entropies)

    def test_iterations_compose(self):
        state = model(1)
        x = points(seed=1)
        opt_a = AdaptConfig().optimizer(state.get_norm_params())
        opt_b = opt_a.copy()
        a, _ = tent_adapt(state, x, opt_a, iterations=3)
        b = state.get_norm_params()
        for _ in range(3):
            b, _ = tent_adapt(state, x, opt_b, 1, b)
        assert all(a[n].tobytes() == b[n].tobytes() for n in a)

    def test_zero_gradient_fixed_point(self):
        # a zero classifier gives uniform logits and no gradient anywhere
        state = model()
        state.params["classifier.weight"][:] = 0.0
        start = state.get_norm_params()
        params, step = tent_adapt(state, points(), AdaptConfig().optimizer(start))
        assert step.entropy_before == pytest.approx(np.log(3), abs=1e-12)
        assert all(params[n].tobytes() == start[n].tobytes() for n in start)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_small_step_descends(self, seed):
        state = model(seed % 17)
        x = points(b=int(2 + seed % 7), seed=seed)
        opt = nx.AdamWState.for_params(state.get_norm_params(), lr=1e-6)
        _, step = tent_adapt(state, x, opt)
        assert step.entropy_after <= step.entropy_before + 1e-12


class TestSvwa:
    def test_degenerate_equals_tent(self):
        state = model(2)
        batch = clouds(seed=2)
        cfg = AdaptConfig(nv=6, prediction_seed=4)
        view = canonical_points(batch, CFG.fps_points, 9, 0)
        branches = make_branches(state, cfg)
        _, branches, _ = svwa_adapt(state.copy(), batch, cfg, branches, views=[view] * 6)
        tent, _ = tent_adapt(state, view, cfg.optimizer(state.get_norm_params()))
        avg = weight_average([b.norm_params for b in branches])
        for n in tent:
            np.testing.assert_allclose(avg[n], tent[n], atol=1e-12, rtol=0)

    @pytest.mark.parametrize("mode", ["parallel", "sequential"])
    def test_single_branch_is_tent(self, mode):
        state = model(3)
        batch = clouds(seed=3)
        cfg = AdaptConfig(nv=1, mode=mode, base_seed=5)
        (view,) = variation_views(batch, cfg, CFG.fps_points, 0)
        adapted = state.copy()
        svwa_adapt(adapted, batch, cfg, make_branches(state, cfg))
        tent, _ = tent_adapt(state, view, cfg.optimizer(state.get_norm_params()))
        assert all(adapted.params[n].tobytes() == tent[n].tobytes() for n in tent)

    def test_parallel_branches_start_from_model(self):
        state = model(4)
        batch = clouds(seed=4)
        cfg = AdaptConfig(nv=3, base_seed=1)
        views = variation_views(batch, cfg, CFG.fps_points, 0)
        adapted = state.copy()
        _, branches, _ = svwa_adapt(adapted, batch, cfg, make_branches(state, cfg))
        for b, v in zip(branches, views):
            ref, _ = tent_adapt(state, v, cfg.optimizer(state.get_norm_params()))
            assert all(b.norm_params[n].tobytes() == ref[n].tobytes() for n in ref)
        expect = weight_average([b.norm_params for b in branches])
        assert all(adapted.params[n].tobytes() == expect[n].tobytes() for n in expect)

    def test_sequential_chains(self):
        state = model(5)
        batch = clouds(seed=5)
        cfg = AdaptConfig(nv=3, mode="sequential", base_seed=2, iterations=2)
        views = variation_views(batch, cfg, CFG.fps_points, 0)
        _, branches, _ = svwa_adapt(state.copy(), batch, cfg, make_branches(state, cfg))
        opt = cfg.optimizer(state.get_norm_params())
        params = state.get_norm_params()
        for b, v in zip(branches, views):
            params, _ = tent_adapt(state, v, opt, 2, nx.copy_params(params))
            assert all(b.norm_params[n].tobytes() == params[n].tobytes() for n in params)
        assert branches[0].optimizer is branches[2].optimizer
        assert opt.step == branches[0].optimizer.step == 6

    def test_parallel_optimizers_persist_per_branch(self):
        state = model(6)
        cfg = AdaptConfig(nv=2)
        branches = make_branches(state, cfg)
        assert branches[0].optimizer is not branches[1].optimizer
        for i in range(2):
            _, branches, _ = svwa_adapt(state, clouds(seed=i), cfg, branches, batch_index=i)
        assert [b.optimizer.step for b in branches] == [2, 2]

    def test_predictions_use_average_on_canonical_sampling(self):
        state = model(7)
        batch = clouds(seed=7)
        cfg = AdaptConfig(nv=4, base_seed=3, prediction_seed=11)
        preds, branches, record = svwa_adapt(state, batch, cfg, make_branches(state, cfg), batch_index=2)
        logits, _ = forward_logits(state, canonical_points(batch, CFG.fps_points, 11, 2), TRAIN)
        assert preds.tolist() == logits.argmax(1).tolist()
        assert record.accuracy == np.mean(preds == [c.label for c in batch])
        assert len(record.branch_entropies) == 4

    def test_variations_differ(self):
        views = variation_views(clouds(), AdaptConfig(nv=4), CFG.fps_points, 0)
        assert len({v.tobytes() for v in views}) == 4

    @pytest.mark.parametrize("source", ["jitter", "rotation", "flip", "scale", "jitter+sampling"])
    def test_augmentation_views(self, source):
        views = variation_views(clouds(), AdaptConfig(nv=3, variation_source=source), CFG.fps_points, 0)
        assert [v.shape for v in views] == [(6, 8, 3)] * 3

    def test_branch_count_checked(self):
        state = model()
        with pytest.raises(ValueError):
            svwa_adapt(state, clouds(), AdaptConfig(nv=3), make_branches(state, AdaptConfig(nv=2)))


class TestStream:
    def stream(self):
        return [clouds(6, seed=s) for s in range(3)] + [clouds(1, seed=9)]

    @pytest.mark.parametrize("method", ["source-only", "tent", "svwa"])
    @pytest.mark.parametrize("mode", ["parallel", "sequential"])
    def test_frozen_weights_untouched(self, method, mode):
        ref = model(8)
        state = ref.copy()
        report = run_stream(state, self.stream(), AdaptConfig(nv=3, mode=mode), method)
        assert_frozen_equal(state, ref)
        assert len(report.records) == 3  # the single-cloud batch is skipped
        assert report.num_samples == 18

    def test_source_only_bitwise_unchanged(self):
        ref = model(8)
        state = ref.copy()
        run_stream(state, self.stream(), AdaptConfig(), "source-only")
        assert all(state.params[n].tobytes() == ref.params[n].tobytes() for n in ref.params)
        assert all(state.running[k].mean.tobytes() == ref.running[k].mean.tobytes() for k in ref.running)

    @pytest.mark.parametrize("mode", ["parallel", "sequential"])
    def test_deterministic(self, mode):
        cfg = AdaptConfig(nv=3, mode=mode, base_seed=4, prediction_seed=5)
        a = run_stream(model(1), self.stream(), cfg, "svwa")
        b = run_stream(model(1), self.stream(), cfg, "svwa")
        assert [r.predictions.tolist() for r in a.records] == [r.predictions.tolist() for r in b.records]
        assert [r.entropy_after for r in a.records] == [r.entropy_after for r in b.records]

    def test_continual_vs_reset(self):
        cfg = AdaptConfig(nv=2, lr=0.05)
        carried = model(2)
        run_stream(carried, self.stream(), cfg, "svwa")
        reset = model(2)
        run_stream(reset, self.stream(), AdaptConfig(nv=2, lr=0.05, reset_to_pretrained=True), "svwa")
        assert any(carried.params[n].tobytes() != reset.params[n].tobytes() for n in carried.norm_names())

    def test_overhead_fraction(self):
        state = model()
        report = run_stream(state, self.stream(), AdaptConfig(nv=6), "svwa")
        assert report.overhead_fraction == 6 * state.adaptable_fraction()
        assert run_stream(state, [], AdaptConfig(), "tent").records == []

    def test_entropy_bounds(self):
        report = run_stream(model(3), self.stream(), AdaptConfig(nv=2), "svwa")
        for r in report.records:
            assert 0 <= r.entropy_before <= np.log(3) and 0 <= r.entropy_after <= np.log(3)

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            run_stream(model(), [], AdaptConfig(), "bn-adapt")


@pytest.mark.parametrize("kwargs", [dict(nv=0), dict(iterations=0), dict(lr=0.0), dict(mode="mixed"),
                                    dict(variation_source="cutout")])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        AdaptConfig(**kwargs)
