from dataclasses import dataclass, replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmua import tensor as T
from cmua.attack import (
    AttackConfig, AttackError, Watermark, attack_models, attack_one_model, baseline_attack, batch_loss,
    image_fusion,
)


@dataclass
class Doubler:
    """G(x) = 2x on a one-pixel, one-channel image."""

    id: str = "doubler"
    image_shape: tuple = (1, 1, 1)

    def apply(self, x):
        return T.scale(T.as_tensor(x), 2.0)


@dataclass
class Exploding:
    id: str = "nan"
    image_shape: tuple = (1, 1, 1)

    def apply(self, x):
        return T.scale(T.as_tensor(x), float("inf"))


def test_image_fusion_examples():
    np.testing.assert_array_equal(image_fusion(np.array([[1, -1], [1, 1]], np.float32)), [1, 0])
    single = np.array([[[-1.0, 0.0, 1.0]]], np.float32)
    np.testing.assert_array_equal(image_fusion(single), single[0])
    four = np.array([1, 1, 1, -1], np.float32).reshape(4, 1)
    assert image_fusion(four)[0] == 0.5


def test_image_fusion_empty():
    with pytest.raises(ValueError):
        image_fusion(np.zeros((0, 3), np.float32))


@given(st.integers(1, 9), st.integers(0, 2 ** 31))
def test_image_fusion_bounded(n, seed):
    s = np.random.default_rng(seed).integers(-1, 2, (n, 5)).astype(np.float32)
    f = image_fusion(s)
    assert np.all(np.abs(f) <= 1)


def test_scalar_doubler_hand_example():
    cfg = AttackConfig(epsilon=0.05, step_size=0.01, n_iters=1, method="BIM")
    batch = np.full((1, 1, 1, 1), 0.5, np.float32)
    # from W0 = 0 the loss 4W^2 is flat: no movement
    w = attack_one_model(Doubler(), cfg, batch, Watermark.zeros((1, 1, 1), 0.05))
    assert w.perturbation.item() == 0.0
    # from W0 = 0.01 the gradient 8W is positive: one step of 0.01
    w = attack_one_model(Doubler(), cfg, batch, Watermark(np.full((1, 1, 1), 0.01), 0.05))
    assert w.perturbation.item() == pytest.approx(0.02)


def test_zero_step_is_identity(family, images):
    w0 = Watermark.random((32, 32, 3), 0.05, np.random.default_rng(0))
    cfg = AttackConfig(step_size=0.0, method="BIM")
    out = attack_one_model(family[0], cfg, images[:2], w0)
    np.testing.assert_array_equal(out.perturbation, w0.perturbation)


def test_zero_iterations_is_identity(family, images):
    w0 = Watermark.random((32, 32, 3), 0.05, np.random.default_rng(0))
    out = attack_one_model(family[0], AttackConfig(n_iters=0, method="BIM"), images[:2], w0)
    np.testing.assert_array_equal(out.perturbation, w0.perturbation)


def test_zero_epsilon_gives_zero_watermark(family, images):
    out = attack_one_model(family[2], AttackConfig(epsilon=0.0), images[:2], rng=np.random.default_rng(0))
    assert not np.any(out.perturbation)


def test_attack_increases_loss(family, images):
    m = family[2]
    w0 = Watermark(np.random.default_rng(1).uniform(-0.005, 0.005, (32, 32, 3)), 0.05)
    cfg = AttackConfig(method="BIM", n_iters=10)
    w = attack_one_model(m, cfg, images[:4], w0)
    assert batch_loss([m], images[:4], w.perturbation) > batch_loss([m], images[:4], w0.perturbation)


def test_attack_deterministic(family, images):
    cfg = AttackConfig(method="DI2", n_iters=3)
    a = attack_one_model(family[1], cfg, images[:2], rng=np.random.default_rng(3))
    b = attack_one_model(family[1], cfg, images[:2], rng=np.random.default_rng(3))
    assert a.perturbation.tobytes() == b.perturbation.tobytes()


def _trajectory(method, family, images, **kw):
    cfg = replace(AttackConfig(method=method, n_iters=4, random_start=False), **kw)
    w0 = Watermark(np.random.default_rng(2).uniform(-0.005, 0.005, (32, 32, 3)), 0.05)
    return attack_one_model(family[3], cfg, images[:3], w0, rng=np.random.default_rng(9)).perturbation


def test_mim_without_momentum_is_bim(family, images):
    np.testing.assert_array_equal(_trajectory("MIM", family, images, momentum_decay=0.0),
                                  _trajectory("BIM", family, images))


def test_di2_without_transforms_is_bim(family, images):
    np.testing.assert_array_equal(_trajectory("DI2", family, images, di_prob=0.0),
                                  _trajectory("BIM", family, images))


def test_pgd_without_random_start_is_bim(family, images):
    np.testing.assert_array_equal(_trajectory("PGD", family, images), _trajectory("BIM", family, images))


def test_mim_with_momentum_differs(family, images):
    assert not np.array_equal(_trajectory("MIM", family, images), _trajectory("BIM", family, images))


def test_unknown_method():
    with pytest.raises(ValueError, match="unknown"):
        baseline_attack("FGSM", [Doubler()], AttackConfig(), [np.zeros((1, 1, 1, 1), np.float32)])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_gradient_reports_iteration():
    cfg = AttackConfig(method="BIM", n_iters=2)
    w0 = Watermark(np.full((1, 1, 1), 0.01), 0.05)
    with pytest.raises(AttackError, match="iteration 0"):
        attack_one_model(Exploding(), cfg, np.full((1, 1, 1, 1), 0.5, np.float32), w0)


def test_shape_mismatch(family):
    with pytest.raises(T.ShapeError):
        attack_one_model(family[0], AttackConfig(), np.zeros((1, 16, 16, 3), np.float32))


def test_watermark_rejects_out_of_ball():
    with pytest.raises(ValueError):
        Watermark(np.full((2, 2, 3), 0.06), 0.05)


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(["BIM", "PGD", "MIM", "DI2"]), st.floats(0.0, 0.1), st.floats(0.0, 0.2),
       st.integers(0, 2 ** 31))
def test_ball_invariant_random_configs(method, eps, step, seed):
    rng = np.random.default_rng(seed)
    batch = rng.random((2, 1, 1, 1)).astype(np.float32)
    w0 = Watermark(rng.uniform(-eps, eps, (1, 1, 1)), eps)
    cfg = AttackConfig(epsilon=eps, step_size=step, n_iters=3, method=method)
    w = attack_models([Doubler()], cfg, batch, w0, rng=rng)
    assert np.max(np.abs(w.perturbation)) <= np.float32(eps)


def test_baseline_records_provenance(family, images):
    cfg = AttackConfig(n_iters=1)
    w = baseline_attack("MIM", list(family)[:2], cfg, [images[:4]], seed=5)
    assert w.provenance["method"] == "MIM" and w.provenance["seed"] == 5
    assert np.any(w.perturbation)
