import numpy as np
import pytest

from figr.autodiff import Graph, Tensor, backward
from figr.losses import LossConfig, critic_loss, generator_loss, gradient_penalty
from figr.models import Discriminator, Generator, LayoutMismatch, ModelConfig, params_delta
from figr.reptile import (
    AdamState,
    InnerConfig,
    MetaState,
    adam_step,
    figr_generate,
    init_meta_state,
    inner_loop,
    meta_step,
    sgd_step,
)
from figr.rng import make_streams

CFG64 = ModelConfig(image_size=8, latent_dim=6, base_width=4, n_blocks=1, precision="double")
CFG32 = ModelConfig(image_size=8, latent_dim=6, base_width=4, n_blocks=1, precision="single")
LOSS = LossConfig()


def tiny_models(cfg):
    return Discriminator(cfg), Generator(cfg)


def task_images(cfg, n, seed=0):
    rng = np.random.default_rng(seed)
    return np.tanh(rng.standard_normal((n, 1, cfg.image_size, cfg.image_size))).astype(cfg.dtype)


class TestSgdStep:
    def test_zero_gradient_unchanged(self):
        disc, _ = tiny_models(CFG64)
        w = disc.init_params(np.random.default_rng(0))
        out = sgd_step(w, np.zeros(w.total_len), 0.1)
        np.testing.assert_array_equal(out.vector, w.vector)

    def test_arithmetic(self):
        _, gen = tiny_models(CFG64)
        base = gen.init_params(np.random.default_rng(0))
        w = base.with_vector(np.ones(base.total_len))
        g = np.zeros(base.total_len)
        g[0], g[1] = 1.0, -1.0
        out = sgd_step(w, g, 0.5)
        assert out.vector[0] == 0.5 and out.vector[1] == 1.5
        np.testing.assert_array_equal(out.vector[2:], 1.0)

    def test_two_steps_equal_one_double_step(self):
        _, gen = tiny_models(CFG64)
        w = gen.init_params(np.random.default_rng(1))
        g = np.random.default_rng(2).standard_normal(w.total_len)
        twice = sgd_step(sgd_step(w, g, 0.01), g, 0.01)
        once = sgd_step(w, g, 0.02)
        np.testing.assert_allclose(twice.vector, once.vector, rtol=1e-12)

    def test_layout_guard(self):
        _, gen = tiny_models(CFG64)
        w = gen.init_params(np.random.default_rng(0))
        with pytest.raises(LayoutMismatch):
            sgd_step(w, np.zeros(w.total_len + 1), 0.1)


class TestAdamStep:
    def setup_method(self):
        _, gen = tiny_models(CFG64)
        self.params = gen.init_params(np.random.default_rng(3))
        self.n = self.params.total_len

    def test_zero_gradient_fixed_point(self):
        out, moments = adam_step(AdamState.zeros(self.n), self.params,
                                 np.zeros(self.n), 1e-3, 0.5, 0.999, 1e-8)
        np.testing.assert_array_equal(out.vector, self.params.vector)
        assert moments.t == 1

    def test_first_step_magnitude_is_lr(self):
        g = np.random.default_rng(4).standard_normal(self.n)
        lr = 1e-3
        out, _ = adam_step(AdamState.zeros(self.n), self.params, g, lr, 0.5, 0.999, 1e-8)
        step = self.params.vector.astype(np.float64) - out.vector.astype(np.float64)
        # bias correction cancels at t=1: update = lr * g / (|g| + eps) = lr * sign(g)
        np.testing.assert_allclose(step, lr * np.sign(g), rtol=1e-4)

    def test_hundred_steps_constant_gradient(self):
        # scalar simulation: cumulative displacement approaches 100 * lr * sign(g)
        from figr.models import ParameterSet, Segment
        g = np.array([0.02, -3.0, 1e-6])
        params = ParameterSet(np.zeros(3, dtype=np.float64), (Segment("p", 0, (3,)),))
        moments = AdamState.zeros(3)
        lr = 1e-3
        for _ in range(100):
            params, moments = adam_step(moments, params, g, lr, 0.5, 0.999, 1e-8)
        np.testing.assert_allclose(-params.vector, 100 * lr * np.sign(g), rtol=0.01)

    def test_moment_layout_guard(self):
        with pytest.raises(LayoutMismatch):
            adam_step(AdamState.zeros(self.n), self.params,
                      np.zeros(self.n - 1), 1e-3, 0.5, 0.999, 1e-8)


class TestInnerLoop:
    def test_zero_lr_is_identity(self):
        disc, gen = tiny_models(CFG64)
        rng = np.random.default_rng(5)
        phi_d, phi_g = disc.init_params(rng), gen.init_params(rng)
        cfg = InnerConfig(k=3, n=2, inner_lr=0.0)
        w_d, w_g, _ = inner_loop(phi_d, phi_g, disc, gen, task_images(CFG64, 2),
                                 cfg, LOSS, np.random.default_rng(6), np.random.default_rng(7))
        np.testing.assert_array_equal(w_d.vector, phi_d.vector)
        np.testing.assert_array_equal(w_g.vector, phi_g.vector)

    def test_phi_not_mutated(self):
        disc, gen = tiny_models(CFG64)
        rng = np.random.default_rng(8)
        phi_d, phi_g = disc.init_params(rng), gen.init_params(rng)
        before_d, before_g = phi_d.vector.copy(), phi_g.vector.copy()
        inner_loop(phi_d, phi_g, disc, gen, task_images(CFG64, 2),
                   InnerConfig(k=2, n=2, inner_lr=1e-3), LOSS,
                   np.random.default_rng(9), np.random.default_rng(10))
        np.testing.assert_array_equal(phi_d.vector, before_d)
        np.testing.assert_array_equal(phi_g.vector, before_g)

    def test_deterministic_for_seed(self):
        disc, gen = tiny_models(CFG32)
        rng = np.random.default_rng(11)
        phi_d, phi_g = disc.init_params(rng), gen.init_params(rng)
        x = task_images(CFG32, 2, seed=1)
        cfg = InnerConfig(k=2, n=2, inner_lr=1e-4)
        run = lambda: inner_loop(phi_d, phi_g, disc, gen, x, cfg, LOSS,
                                 np.random.default_rng(12), np.random.default_rng(13))
        a_d, a_g, _ = run()
        b_d, b_g, _ = run()
        np.testing.assert_array_equal(a_d.vector, b_d.vector)
        np.testing.assert_array_equal(a_g.vector, b_g.vector)

    def test_delta_equals_lr_times_recorded_gradients_double(self):
        disc, gen = tiny_models(CFG64)
        rng = np.random.default_rng(14)
        phi_d, phi_g = disc.init_params(rng), gen.init_params(rng)
        cfg = InnerConfig(k=4, n=2, inner_lr=1e-3)
        trace = []
        w_d, w_g, _ = inner_loop(phi_d, phi_g, disc, gen, task_images(CFG64, 2, 2),
                                 cfg, LOSS, np.random.default_rng(15),
                                 np.random.default_rng(16), grad_trace=trace)
        assert len(trace) == 4
        sum_d = cfg.inner_lr * np.sum([gd for gd, _ in trace], axis=0)
        sum_g = cfg.inner_lr * np.sum([gg for _, gg in trace], axis=0)
        delta_d = params_delta(phi_d, w_d).astype(np.float64)
        delta_g = params_delta(phi_g, w_g).astype(np.float64)
        assert np.linalg.norm(delta_d - sum_d) / np.linalg.norm(sum_d) < 1e-6
        assert np.linalg.norm(delta_g - sum_g) / np.linalg.norm(sum_g) < 1e-6

    def test_delta_identity_single_precision_rounding_bound(self):
        # in float32 the identity holds to one rounding of the stored weights:
        # |delta_i - lr*sum_i| <= eps32 * max(|phi_i|, |lr*sum_i|)
        disc, gen = tiny_models(CFG32)
        rng = np.random.default_rng(14)
        phi_d, phi_g = disc.init_params(rng), gen.init_params(rng)
        cfg = InnerConfig(k=4, n=2, inner_lr=1e-3)
        trace = []
        w_d, w_g, _ = inner_loop(phi_d, phi_g, disc, gen, task_images(CFG32, 2, 2),
                                 cfg, LOSS, np.random.default_rng(15),
                                 np.random.default_rng(16), grad_trace=trace)
        eps32 = np.finfo(np.float32).eps
        for phi, w, idx in ((phi_d, w_d, 0), (phi_g, w_g, 1)):
            s = cfg.inner_lr * np.sum([t[idx] for t in trace], axis=0)
            delta = params_delta(phi, w).astype(np.float64)
            bound = eps32 * np.maximum(np.abs(phi.vector.astype(np.float64)),
                                       np.abs(s)) + 1e-12
            assert np.all(np.abs(delta - s) <= bound)


class TestMetaStep:
    def make_dataset(self, cfg, n_classes=3, per_class=5):
        from figr.data import TaskClass, TaskDataset
        rng = np.random.default_rng(20)
        classes = tuple(
            TaskClass(name=f"c{i}", images=np.tanh(
                rng.standard_normal((per_class, 1, cfg.image_size, cfg.image_size))
            ).astype(np.float32))
            for i in range(n_classes))
        return TaskDataset(classes=classes, image_size=cfg.image_size,
                           train_ids=tuple(range(n_classes)), val_ids=())

    def test_zero_inner_lr_leaves_phi(self):
        disc, gen = tiny_models(CFG32)
        state = init_meta_state(disc, gen, np.random.default_rng(21))
        ds = self.make_dataset(CFG32)
        new, rec = meta_step(state, disc, gen, ds,
                             InnerConfig(k=2, n=2, inner_lr=0.0), LOSS, make_streams(0))
        np.testing.assert_array_equal(new.phi_d.vector, state.phi_d.vector)
        np.testing.assert_array_equal(new.phi_g.vector, state.phi_g.vector)
        assert new.step == state.step + 1
        assert rec.delta_d_norm == 0.0

    def test_k1_pseudo_gradient_is_lr_times_loss_gradient(self):
        # joint-training equivalence: with one inner step the outer pseudo-
        # gradient is exactly inner_lr times the loss gradient at phi
        disc, gen = tiny_models(CFG64)
        rng = np.random.default_rng(22)
        phi_d, phi_g = disc.init_params(rng), gen.init_params(rng)
        cfg = InnerConfig(k=1, n=2, inner_lr=1e-3)
        x = task_images(CFG64, 2, seed=3)

        lat_seed, eps_seed = 23, 24
        w_d, w_g, _ = inner_loop(phi_d, phi_g, disc, gen, x, cfg, LOSS,
                                 np.random.default_rng(lat_seed),
                                 np.random.default_rng(eps_seed))
        pseudo_d = params_delta(phi_d, w_d).astype(np.float64)
        pseudo_g = params_delta(phi_g, w_g).astype(np.float64)

        # replay by hand with identical rng streams
        from figr.models import sample_latent
        lat = np.random.default_rng(lat_seed)
        eps_rng = np.random.default_rng(eps_seed)
        with Graph("double"):
            xt = Tensor(x.astype(np.float64))
            z = sample_latent(2, gen.cfg, lat)
            fake = gen.forward(phi_g.bind(trainable=False), z)
            bound_d = phi_d.bind()
            loss_d = critic_loss(disc.forward(bound_d, xt), disc.forward(bound_d, fake)) \
                + gradient_penalty(lambda v: disc.forward(bound_d, v), xt, fake,
                                   LOSS.gp_lambda, rng=eps_rng)
            gd = bound_d.flatten_grads(backward(loss_d))
        w_d_manual = phi_d.with_vector(phi_d.vector - cfg.inner_lr * gd)
        with Graph("double"):
            z2 = sample_latent(2, gen.cfg, lat)
            bound_g = phi_g.bind()
            loss_g = generator_loss(
                disc.forward(w_d_manual.bind(trainable=False), gen.forward(bound_g, z2)))
            gg = bound_g.flatten_grads(backward(loss_g))

        # equal up to one float64 rounding of phi - (phi - lr*g)
        np.testing.assert_allclose(pseudo_d, cfg.inner_lr * gd, rtol=1e-9, atol=1e-15)
        np.testing.assert_allclose(pseudo_g, cfg.inner_lr * gg, rtol=1e-9, atol=1e-15)

    def test_ten_steps_bit_identical_across_runs(self):
        disc, gen = tiny_models(CFG32)
        ds = self.make_dataset(CFG32)
        cfg = InnerConfig(k=2, n=2, inner_lr=1e-4)

        def run():
            state = init_meta_state(disc, gen, np.random.default_rng(30))
            streams = make_streams(31)
            for _ in range(10):
                state, _ = meta_step(state, disc, gen, ds, cfg, LOSS, streams)
            return state

        a, b = run(), run()
        np.testing.assert_array_equal(a.phi_d.vector, b.phi_d.vector)
        np.testing.assert_array_equal(a.phi_g.vector, b.phi_g.vector)
        np.testing.assert_array_equal(a.adam_d.m, b.adam_d.m)
        assert a.step == b.step == 10

    def test_empty_dataset(self):
        from figr.data import TaskDataset
        from figr.reptile import EmptyDataset
        disc, gen = tiny_models(CFG32)
        state = init_meta_state(disc, gen, np.random.default_rng(0))
        ds = TaskDataset(classes=(), image_size=8, train_ids=(), val_ids=())
        with pytest.raises(EmptyDataset):
            meta_step(state, disc, gen, ds, InnerConfig(k=1, n=1), LOSS, make_streams(0))


class TestGenerate:
    def test_count_validated(self):
        disc, gen = tiny_models(CFG32)
        rng = np.random.default_rng(40)
        with pytest.raises(ValueError):
            figr_generate(disc.init_params(rng), gen.init_params(rng), disc, gen,
                          task_images(CFG32, 2), InnerConfig(k=1, n=2), LOSS,
                          np.random.default_rng(0), np.random.default_rng(1), count=0)

    def test_deterministic_and_nondegenerate(self):
        disc, gen = tiny_models(CFG32)
        rng = np.random.default_rng(41)
        phi_d, phi_g = disc.init_params(rng), gen.init_params(rng)
        x = task_images(CFG32, 2, seed=4)
        cfg = InnerConfig(k=2, n=2, inner_lr=1e-4)

        def run(seed):
            return figr_generate(phi_d, phi_g, disc, gen, x, cfg, LOSS,
                                 np.random.default_rng(seed),
                                 np.random.default_rng(seed + 1), count=3)

        a, b, c = run(50), run(50), run(60)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)
        assert a.shape == (3, 1, 8, 8)
        assert np.all(a > -1) and np.all(a < 1)

    def test_phi_untouched(self):
        disc, gen = tiny_models(CFG32)
        rng = np.random.default_rng(42)
        phi_d, phi_g = disc.init_params(rng), gen.init_params(rng)
        snap_d, snap_g = phi_d.vector.copy(), phi_g.vector.copy()
        figr_generate(phi_d, phi_g, disc, gen, task_images(CFG32, 2, 5),
                      InnerConfig(k=3, n=2, inner_lr=1e-3), LOSS,
                      np.random.default_rng(0), np.random.default_rng(1), count=2)
        np.testing.assert_array_equal(phi_d.vector, snap_d)
        np.testing.assert_array_equal(phi_g.vector, snap_g)
