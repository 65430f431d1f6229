import math

import numpy as np
import pytest

from kgt.optim import AdamW, AdamWConfig, clip_global_norm
from kgt.tensor import Tensor


def reference_adamw(theta, grads, cfg: AdamWConfig, epochs):
    """Textbook AdamW, one parameter, one grad per step."""
    theta = float(theta)
    m = v = 0.0
    t = 0
    for epoch, g in zip(epochs, grads):
        t += 1
        lr_t = cfg.lr * cfg.lr_decay**epoch
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        mhat = m / (1 - cfg.beta1**t)
        vhat = v / (1 - cfg.beta2**t)
        theta -= lr_t * (mhat / (math.sqrt(vhat) + cfg.eps) + cfg.weight_decay * theta)
    return theta


class TestConfig:
    def test_defaults(self):
        cfg = AdamWConfig()
        assert cfg.lr == 1e-4
        assert (cfg.beta1, cfg.beta2) == (0.9, 0.999)
        assert cfg.eps == 1e-8
        assert cfg.weight_decay == 0.01
        assert cfg.lr_decay == 0.997

    def test_schedule(self):
        cfg = AdamWConfig(lr=0.5, lr_decay=0.9)
        assert cfg.lr_at(0) == 0.5
        assert np.isclose(cfg.lr_at(3), 0.5 * 0.9**3)

    def test_validation(self):
        with pytest.raises(ValueError):
            AdamWConfig(lr=0.0)
        with pytest.raises(ValueError):
            AdamWConfig(beta1=1.0)
        with pytest.raises(ValueError):
            AdamWConfig(eps=0.0)
        with pytest.raises(ValueError):
            AdamWConfig(weight_decay=-0.1)
        with pytest.raises(ValueError):
            AdamWConfig(lr_decay=0.0)


class TestAdamW:
    def test_matches_scalar_reference(self):
        cfg = AdamWConfig(lr=0.01, weight_decay=0.05, lr_decay=0.9)
        rng = np.random.default_rng(0)
        grads = rng.normal(size=6)
        epochs = [0, 0, 1, 1, 2, 2]
        p = Tensor(np.array([0.7], dtype=np.float64))
        opt = AdamW({"p": p}, cfg)
        for epoch, g in zip(epochs, grads):
            p.grad = np.array([g])
            opt.step(epoch)
        want = reference_adamw(0.7, grads, cfg, epochs)
        assert np.allclose(p.data, want, atol=1e-12)

    def test_first_step_moves_by_lr(self):
        # bias correction makes the very first unit-gradient step ~ lr
        cfg = AdamWConfig(lr=1e-3, weight_decay=0.0)
        p = Tensor(np.zeros(4, dtype=np.float64))
        opt = AdamW({"p": p}, cfg)
        p.grad = np.ones(4)
        opt.step(0)
        assert np.allclose(p.data, -1e-3, atol=1e-9)

    def test_decay_is_decoupled(self):
        # with zero gradient the moments stay zero and only decay acts
        cfg = AdamWConfig(lr=0.1, weight_decay=0.5)
        p = Tensor(np.array([2.0], dtype=np.float64))
        opt = AdamW({"p": p}, cfg)
        p.grad = np.zeros(1)
        opt.step(0)
        assert np.allclose(p.data, 2.0 - 0.1 * 0.5 * 2.0)

    def test_none_grads_skipped(self):
        cfg = AdamWConfig()
        p = Tensor(np.ones(3))
        q = Tensor(np.ones(3))
        opt = AdamW({"p": p, "q": q}, cfg)
        p.grad = np.ones(3)
        opt.step(0)
        assert np.array_equal(q.data, np.ones(3))
        assert not np.array_equal(p.data, np.ones(3))

    def test_step_returns_scheduled_lr(self):
        cfg = AdamWConfig(lr=0.2, lr_decay=0.5)
        p = Tensor(np.ones(1))
        opt = AdamW({"p": p}, cfg)
        p.grad = np.ones(1)
        assert opt.step(epoch=2) == pytest.approx(0.05)

    def test_bias_correction_uses_global_step(self):
        # two optimizers, same grads, different epoch labels: moments identical
        cfg = AdamWConfig(lr=0.01, lr_decay=1.0, weight_decay=0.0)
        a = Tensor(np.array([1.0], dtype=np.float64))
        b = Tensor(np.array([1.0], dtype=np.float64))
        oa = AdamW({"p": a}, cfg)
        ob = AdamW({"p": b}, cfg)
        for i in range(5):
            a.grad = np.array([0.3])
            b.grad = np.array([0.3])
            oa.step(epoch=0)
            ob.step(epoch=i)  # lr_decay=1.0 so schedule is flat anyway
        assert np.allclose(a.data, b.data)

    def test_zero_grad(self):
        p = Tensor(np.ones(2))
        opt = AdamW({"p": p}, AdamWConfig())
        p.grad = np.ones(2)
        opt.zero_grad()
        assert p.grad is None

    def test_float32_params_stay_float32(self):
        p = Tensor(np.ones(3, dtype=np.float32))
        opt = AdamW({"p": p}, AdamWConfig())
        p.grad = np.ones(3, dtype=np.float32)
        opt.step(0)
        assert p.data.dtype == np.float32


class TestClip:
    def test_under_threshold_untouched(self):
        p = Tensor(np.zeros(3))
        p.grad = np.array([0.3, 0.0, 0.4])
        norm = clip_global_norm({"p": p}, 1.0)
        assert norm == pytest.approx(0.5)
        assert np.allclose(p.grad, [0.3, 0.0, 0.4])

    def test_over_threshold_scaled_jointly(self):
        a = Tensor(np.zeros(2))
        b = Tensor(np.zeros(2))
        a.grad = np.array([3.0, 0.0])
        b.grad = np.array([0.0, 4.0])
        norm = clip_global_norm({"a": a, "b": b}, 1.0)
        assert norm == pytest.approx(5.0)
        joint = math.sqrt(float((a.grad**2).sum() + (b.grad**2).sum()))
        assert joint == pytest.approx(1.0)
        # direction preserved
        assert np.allclose(a.grad, [3.0 / 5.0, 0.0])
        assert np.allclose(b.grad, [0.0, 4.0 / 5.0])

    def test_none_grads_ignored(self):
        a = Tensor(np.zeros(2))
        b = Tensor(np.zeros(2))
        a.grad = np.array([6.0, 8.0])
        norm = clip_global_norm({"a": a, "b": b}, 5.0)
        assert norm == pytest.approx(10.0)
        assert b.grad is None

    def test_bad_max_norm(self):
        p = Tensor(np.zeros(1))
        with pytest.raises(ValueError):
            clip_global_norm({"p": p}, 0.0)
