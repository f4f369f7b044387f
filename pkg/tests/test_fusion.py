import numpy as np
import pytest

from hieract.errors import DataError, Divergence, ShapeMismatch
from hieract.fusion import (
    default_level_weights,
    fuse_baseline,
    fusion_backward,
    fusion_forward,
    fusion_train,
    init_params,
    load_checkpoint,
    predict,
    save_checkpoint,
)

from conftest import random_levels
from oracles import fusion_forward_scalar


def finite_difference_error(params, levels, target, step=1e-5):
    """Largest relative error between analytic and central-difference gradients."""
    _, grads = fusion_backward(params, levels, target)
    analytic = grads.flat()
    base = params.flat()
    worst = 0.0
    for k in range(base.size):
        hi, lo = base.copy(), base.copy()
        hi[k] += step
        lo[k] -= step
        num = (fusion_backward(params.with_flat(hi), levels, target)[0]
               - fusion_backward(params.with_flat(lo), levels, target)[0]) / (2 * step)
        denom = max(abs(num), abs(analytic[k]), 1e-6)
        worst = max(worst, abs(num - analytic[k]) / denom)
    return worst


class TestForward:
    def test_matches_scalar_loop(self, s3dis, rng):
        params = init_params(s3dis.level_sizes, hidden_dim=16, seed=3)
        params.enc_b = [0.1 * rng.normal(size=16) for _ in range(3)]
        levels = random_levels(rng, s3dis, 5)
        out = fusion_forward(params, levels)
        for i in range(5):
            alpha, probs = fusion_forward_scalar(params, [lv[i] for lv in levels])
            assert np.max(np.abs(out.per_level_weights[i] - alpha)) < 1e-12
            assert np.max(np.abs(out.fine_distribution[i] - probs)) < 1e-12

    def test_zero_attention_is_uniform(self, s3dis, rng):
        params = init_params(s3dis.level_sizes, hidden_dim=8)
        params.att_w[:] = 0.0
        out = fusion_forward(params, [lv[0] for lv in random_levels(rng, s3dis, 1)])
        np.testing.assert_allclose(out.per_level_weights, [[1 / 3] * 3], atol=1e-15)

    def test_single_level(self, rng):
        params = init_params([4], hidden_dim=8)
        out = fusion_forward(params, [rng.dirichlet(np.ones(4), size=3)])
        np.testing.assert_array_equal(out.per_level_weights, np.ones((3, 1)))

    def test_shape_errors(self, s3dis):
        params = init_params(s3dis.level_sizes, hidden_dim=4)
        with pytest.raises(ShapeMismatch):
            fusion_forward(params, [np.ones(3) / 3, np.ones(6) / 6])
        with pytest.raises(ShapeMismatch):
            fusion_forward(params, [np.ones(3) / 3, np.ones(5) / 5, np.ones(13) / 13])

    def test_leaf_permutation(self, s3dis, rng):
        params = init_params(s3dis.level_sizes, hidden_dim=8, seed=1)
        levels = random_levels(rng, s3dis, 4)
        perm = rng.permutation(13)
        swapped = params.copy()
        swapped.cls_W = swapped.cls_W[perm]
        swapped.cls_b = swapped.cls_b[perm]
        a = fusion_forward(params, levels).fine_distribution
        b = fusion_forward(swapped, levels).fine_distribution
        np.testing.assert_allclose(b, a[:, perm], atol=1e-15)

    def test_extreme_inputs_stay_valid(self, s3dis, rng):
        params = init_params(s3dis.level_sizes, hidden_dim=8, seed=2)
        params = params.with_flat(params.flat() * 50)
        out = fusion_forward(params, random_levels(rng, s3dis, 50, sharp=0.05))
        assert np.all(np.isfinite(out.fine_distribution))
        np.testing.assert_allclose(out.fine_distribution.sum(axis=1), 1.0, atol=1e-6)
        np.testing.assert_allclose(out.per_level_weights.sum(axis=1), 1.0, atol=1e-9)


class TestBackward:
    @pytest.mark.parametrize("hidden", [4, 16])
    def test_gradient_check(self, s3dis, hidden):
        rng = np.random.default_rng(hidden)
        params = init_params(s3dis.level_sizes, hidden_dim=hidden, seed=hidden)
        params.enc_b = [0.1 * rng.normal(size=hidden) for _ in range(3)]
        params.mlp_b = 0.1 * rng.normal(size=hidden)
        levels = random_levels(rng, s3dis, 3)
        assert finite_difference_error(params, levels, [0, 5, 12]) < 1e-4

    def test_dead_relu_zero_encoder_grad(self, small_tree):
        params = init_params(small_tree.level_sizes, hidden_dim=4)
        zeros = [np.zeros((1, 2)), np.zeros((1, 3))]
        _, grads = fusion_backward(params, zeros, [1])
        for g in grads.enc_W:
            assert np.all(g == 0.0)

    def test_uniform_output_loss(self, s3dis, rng):
        params = init_params(s3dis.level_sizes, hidden_dim=4)
        params.cls_W[:] = 0.0
        loss, _ = fusion_backward(params, random_levels(rng, s3dis, 2), [1, 2])
        assert loss == pytest.approx(np.log(13), abs=1e-12)

    def test_bad_target(self, s3dis, rng):
        params = init_params(s3dis.level_sizes, hidden_dim=4)
        with pytest.raises(DataError):
            fusion_backward(params, random_levels(rng, s3dis, 1), [13])
        with pytest.raises(ShapeMismatch):
            fusion_backward(params, random_levels(rng, s3dis, 2), [1])


def separable_task(rng, h, n):
    """The fine distribution alone determines the label."""
    y = rng.integers(0, h.level_sizes[-1], size=n)
    levels = random_levels(rng, h, n)
    fine = 0.2 * levels[-1]
    fine[np.arange(n), y] += 0.8
    levels[-1] = fine
    return levels, y


class TestTrain:
    def test_separable_task(self, s3dis, rng):
        levels, y = separable_task(rng, s3dis, 400)
        res = fusion_train((levels, y), epochs=200, lr=0.1, seed=0, hidden_dim=16)
        assert (predict(res.params, levels) == y).mean() >= 0.95
        assert res.losses[-1] < res.losses[0]

    def test_zero_lr(self, s3dis, rng):
        levels, y = separable_task(rng, s3dis, 50)
        init = init_params(s3dis.level_sizes, 8, seed=4)
        res = fusion_train((levels, y), epochs=3, lr=0.0, hidden_dim=8, params=init)
        np.testing.assert_array_equal(res.params.flat(), init.flat())
        # batches are visited in a different order each epoch, so only the last ulp may move
        assert res.losses == pytest.approx([res.losses[0]] * 3, rel=1e-12)

    def test_deterministic(self, s3dis, rng):
        levels, y = separable_task(rng, s3dis, 60)
        a = fusion_train((levels, y), epochs=5, seed=9, hidden_dim=8)
        b = fusion_train((levels, y), epochs=5, seed=9, hidden_dim=8)
        assert a.losses == b.losses

    def test_divergence(self, s3dis, rng):
        levels, y = separable_task(rng, s3dis, 60)
        with pytest.raises(Divergence) as info:
            fusion_train((levels, y), epochs=50, lr=1e6, hidden_dim=8)
        assert info.value.epoch >= 0

    def test_empty(self, s3dis):
        with pytest.raises(DataError):
            fusion_train(([np.zeros((0, s)) for s in s3dis.level_sizes], np.zeros(0)), epochs=1)


class TestBaselines:
    def test_two_level_hand_sum(self, small_tree):
        # A's 0.5 is copied to A1 and A2, B's 0.5 to B1
        fine = np.array([0.2, 0.3, 0.5])
        coarse = np.array([0.5, 0.5])
        out = fuse_baseline(small_tree, [coarse, fine])
        expected = (np.array([0.5, 0.5, 0.5]) + fine) / 2.5
        np.testing.assert_allclose(out, expected, atol=1e-15)

    def test_identical_distribution_single_level(self):
        from hieract.hierarchy import LabelNode, build_hierarchy

        h = build_hierarchy([LabelNode(0, "a", 0), LabelNode(1, "b", 0)])
        p = np.array([0.3, 0.7])
        np.testing.assert_allclose(fuse_baseline(h, [p]), p, atol=1e-15)

    def test_selector_weights(self, s3dis, rng):
        levels = [lv[0] for lv in random_levels(rng, s3dis, 1)]
        out = fuse_baseline(s3dis, levels, "weighted-add", [1.0, 0.0, 0.0])
        expanded = levels[0][s3dis.fine_to_level(0)]
        np.testing.assert_allclose(out, expanded / expanded.sum(), atol=1e-15)

    def test_hand_three_levels(self):
        from conftest import tree_from_children

        h = tree_from_children({"r": ["a", "b"], "a": ["a1", "a2"], "b": ["b1"]}, ["r"])
        levels = [np.array([1.0]), np.array([0.6, 0.4]), np.array([0.1, 0.2, 0.7])]
        # expanded: [1,1,1] + [.6,.6,.4] + [.1,.2,.7] = [1.7, 1.8, 2.1]; total 5.6
        np.testing.assert_allclose(fuse_baseline(h, levels), [1.7 / 5.6, 1.8 / 5.6, 2.1 / 5.6], atol=1e-15)

    def test_default_weights(self):
        np.testing.assert_allclose(default_level_weights(3), [1 / 6, 2 / 6, 3 / 6])

    def test_errors(self, s3dis):
        with pytest.raises(ShapeMismatch):
            fuse_baseline(s3dis, [np.ones(3) / 3])
        with pytest.raises(ValueError):
            fuse_baseline(s3dis, [np.ones(s) / s for s in s3dis.level_sizes], "max")


class TestCheckpoint:
    def test_round_trip(self, s3dis, tmp_path):
        params = init_params(s3dis.level_sizes, hidden_dim=8, seed=5)
        path = tmp_path / "f.ckpt"
        save_checkpoint(params, path, s3dis.digest())
        back = load_checkpoint(path, s3dis.digest())
        np.testing.assert_array_equal(back.flat(), params.flat())
        assert back.level_sizes == params.level_sizes

    def test_layout(self, small_tree, tmp_path):
        params = init_params(small_tree.level_sizes, hidden_dim=2)
        path = tmp_path / "f.ckpt"
        save_checkpoint(params, path, "abc")
        raw = path.read_bytes()
        head, body = raw.split(b"\n", 1)
        assert b'"hierarchy": "abc"' in head
        assert np.array_equal(np.frombuffer(body, "<f8"), params.flat())

    def test_wrong_hierarchy(self, s3dis, tmp_path):
        path = tmp_path / "f.ckpt"
        save_checkpoint(init_params(s3dis.level_sizes, 4), path, s3dis.digest())
        with pytest.raises(DataError):
            load_checkpoint(path, "other")

    def test_truncated(self, s3dis, tmp_path):
        path = tmp_path / "f.ckpt"
        save_checkpoint(init_params(s3dis.level_sizes, 4), path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(DataError):
            load_checkpoint(path)
