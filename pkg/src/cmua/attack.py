"""Sign-gradient universal attacks against image-translation models.

A single perturbation ``W`` is shared by every image of a batch. Each
iteration computes, per image, the gradient of
``MSE(G(I), G(clip(I + W)))`` with respect to the protected input, takes
its sign, averages the signs over the batch (image-level fusion) and steps
``W`` by ``step_size`` times that average before projecting back onto the
L-infinity ball. The loss is maximized.
"""

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .seeding import rng as labeled_rng

log = logging.getLogger(__name__)

METHODS = ("BIM", "PGD", "MIM", "DI2")


@dataclass
class AttackConfig:
    epsilon: float = 0.05
    step_size: float = 2.0 / 255
    n_iters: int = 10
    method: str = "PGD"
    momentum_decay: float = 1.0
    di_prob: float = 0.5
    di_resize: tuple = (0.9, 1.0)
    random_start: bool = True

    def validate(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown attack method {self.method!r}; choose from {METHODS}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.step_size < 0:
            raise ValueError("step_size must be >= 0")
        if self.n_iters < 0:
            raise ValueError("n_iters must be >= 0")
        if not 0.0 <= self.di_prob <= 1.0:
            raise ValueError("di_prob must lie in [0, 1]")
        lo, hi = self.di_resize
        if not 0 < lo <= hi <= 1:
            raise ValueError("di_resize must satisfy 0 < lo <= hi <= 1")
        return self

    def to_dict(self):
        d = asdict(self)
        d["di_resize"] = list(self.di_resize)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "di_resize" in d:
            d["di_resize"] = tuple(d["di_resize"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown attack config keys: {sorted(unknown)}")
        return cls(**d).validate()


class AttackError(RuntimeError):
    pass


@dataclass
class Watermark:
    perturbation: np.ndarray
    epsilon: float
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.perturbation = np.asarray(self.perturbation, dtype=np.float32)
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.perturbation.size and np.max(np.abs(self.perturbation)) > np.float32(self.epsilon):
            raise ValueError(
                f"perturbation exceeds its bound: {np.max(np.abs(self.perturbation))} > {self.epsilon}"
            )

    @property
    def shape(self):
        return self.perturbation.shape

    @classmethod
    def zeros(cls, shape, epsilon):
        return cls(np.zeros(shape, dtype=np.float32), epsilon)

    @classmethod
    def random(cls, shape, epsilon, rng):
        """Uniform noise filling the whole ball; the reference point for universality."""
        return cls(T.project_linf(rng.uniform(-epsilon, epsilon, shape).astype(np.float32), epsilon), epsilon)

    def apply(self, images):
        return np.clip(np.asarray(images, dtype=np.float32) + self.perturbation, 0, 1).astype(np.float32)


def image_fusion(signed_grads):
    """Element-wise mean of per-image signed gradients."""
    grads = np.asarray(signed_grads)
    if grads.ndim == 0 or len(grads) == 0:
        raise ValueError("image_fusion needs at least one gradient")
    # sums of values in {-1, 0, 1} are exact, so the reduction order cannot matter
    return (grads.sum(axis=0, dtype=np.float64) / len(grads)).astype(np.float32)


def _di_index(rng, n, shape, prob, resize):
    """Flat gather indices for random resize-and-pad, one draw per image."""
    h, w, c = shape
    index = np.arange(n * h * w * c, dtype=np.int64).reshape(n, h, w, c)
    for j in range(n):
        if rng.random() >= prob:
            continue
        side_lo = max(1, int(round(resize[0] * min(h, w))))
        side_hi = int(round(resize[1] * min(h, w)))
        rh = rw = int(rng.integers(side_lo, side_hi + 1))
        top = int(rng.integers(0, h - rh + 1))
        left = int(rng.integers(0, w - rw + 1))
        out = np.full((h, w, c), -1, dtype=np.int64)
        sy = (np.arange(rh) * h) // rh
        sx = (np.arange(rw) * w) // rw
        src = index[j][sy][:, sx]
        out[top:top + rh, left:left + rw] = src
        index[j] = out
    return index


def _forward_targets(models, batch):
    return [m.apply(T.Tensor(batch)).data for m in models]


def batch_loss(models, batch, perturbation, targets=None):
    """Summed per-image MSE between clean and protected outputs, summed over models."""
    models = models if isinstance(models, (list, tuple)) else [models]
    batch = np.asarray(batch, dtype=np.float32)
    targets = targets if targets is not None else _forward_targets(models, batch)
    protected = np.clip(batch + perturbation, 0, 1).astype(np.float32)
    total = 0.0
    for m, tgt in zip(models, targets):
        out = m.apply(T.Tensor(protected)).data
        d = out.astype(np.float64) - tgt
        total += float(np.mean(d * d, axis=(1, 2, 3)).sum())
    return total


def _iterate(models, cfg, batch, w, rng, targets, trace):
    """Run ``cfg.n_iters`` fused sign steps of the summed loss of ``models``."""
    n = len(batch)
    eps = cfg.epsilon
    momentum = np.zeros_like(batch, dtype=np.float64) if cfg.method == "MIM" else None
    for it in range(cfg.n_iters):
        v = T.Tensor(batch + w, requires_grad=True)
        z = T.clamp(v, 0.0, 1.0)
        if cfg.method == "DI2":
            index = _di_index(rng, n, batch.shape[1:], cfg.di_prob, cfg.di_resize)
            z = T.remap(z, index)
            clean = T.remap(T.Tensor(batch), index)
            tgts = [m.apply(clean).data for m in models]
        else:
            tgts = targets
        loss = None
        for m, tgt in zip(models, tgts):
            term = T.mse(m.apply(z), tgt)
            loss = term if loss is None else T.add(loss, term)
        (g,) = T.grad(loss, [v])
        if not np.all(np.isfinite(g)):
            raise AttackError(f"non-finite gradient at iteration {it}")
        if trace is not None:
            # mse averages over the batch; report the per-image sum
            trace.append(float(loss.data) * n)
        if momentum is not None:
            l1 = np.abs(g).sum(axis=(1, 2, 3), dtype=np.float64, keepdims=True)
            momentum = cfg.momentum_decay * momentum + np.divide(g, l1, out=np.zeros_like(momentum), where=l1 > 0)
            signs = T.sign(momentum.astype(np.float32))
        else:
            signs = T.sign(g)
        fused = image_fusion(signs)
        w = T.project_linf(w + np.float32(cfg.step_size) * fused, eps)
        assert np.max(np.abs(w)) <= np.float32(eps)
    return w


def _prepare(models, cfg, batch, w_init):
    cfg.validate()
    batch = np.ascontiguousarray(np.asarray(batch, dtype=np.float32))
    if batch.ndim != 4 or len(batch) == 0:
        raise T.ShapeError(f"batch must be a non-empty (N, H, W, C) array, got shape {batch.shape}")
    shape = batch.shape[1:]
    for m in models:
        if tuple(m.image_shape) != shape:
            raise T.ShapeError(f"model {m.id} expects {m.image_shape}, batch has {shape}")
    if w_init is None:
        w_init = Watermark.zeros(shape, cfg.epsilon)
    if w_init.shape != shape:
        raise T.ShapeError(f"watermark shape {w_init.shape} does not match images {shape}")
    w = T.project_linf(w_init.perturbation.astype(np.float32), cfg.epsilon)
    return batch, w


def attack_one_model(model, cfg, batch, w_init=None, rng=None, targets=None, trace=None):
    """Update a shared watermark against one model for ``cfg.n_iters`` iterations.

    ``targets`` may hold cached clean outputs ``G(batch)``; ``trace``, if a
    list, receives the summed batch loss before each step.
    """
    return attack_models([model], cfg, batch, w_init, rng, None if targets is None else [targets], trace)


def attack_models(models, cfg, batch, w_init=None, rng=None, targets=None, trace=None):
    """Like :func:`attack_one_model` but ascends the loss summed over ``models``."""
    batch, w = _prepare(models, cfg, batch, w_init)
    rng = rng if rng is not None else np.random.default_rng(0)
    if cfg.method == "PGD" and cfg.random_start:
        start = rng.uniform(-cfg.epsilon / 10, cfg.epsilon / 10, w.shape).astype(np.float32)
        w = T.project_linf(w + start, cfg.epsilon)
    targets = targets if targets is not None else _forward_targets(models, batch)
    w = _iterate(models, cfg, batch, w, rng, targets, trace)
    return Watermark(w, cfg.epsilon)


def baseline_attack(method, models, cfg, batches, seed=0, trace=None):
    """Universal-setting baseline: one watermark trained over all ``batches``.

    Multi-model baselines ascend the summed loss with image-level fusion
    only; each batch gets ``cfg.n_iters * len(models)`` iterations, the same
    gradient budget a cross-model run spends on it.

    Every method starts from the same small random watermark (uniform in
    ``[-eps/10, eps/10]``, drawn once from the ``"attack-init"`` stream),
    the initial watermark of a cross-model run. A zero start would be a dead
    end: at ``W = 0`` the loss sits at its exact minimum and every gradient
    sign is 0. For PGD this shared start *is* its random start, so in this
    universal driver PGD and BIM follow the same trajectory.
    """
    if method not in METHODS:
        raise ValueError(f"unknown baseline method {method!r}; choose from {METHODS}")
    models = list(models) if isinstance(models, (list, tuple)) else [models]
    cfg = replace(cfg, method=method).validate()
    batches = [np.asarray(b, dtype=np.float32) for b in batches]
    if not batches:
        raise ValueError("baseline_attack needs at least one batch")
    shape = batches[0].shape[1:]
    init_rng = labeled_rng(seed, "attack-init")
    start = init_rng.uniform(-cfg.epsilon / 10, cfg.epsilon / 10, shape).astype(np.float32)
    w = Watermark(T.project_linf(start, cfg.epsilon), cfg.epsilon)
    step_rng = labeled_rng(seed, "attack-steps")
    per_batch = replace(cfg, n_iters=cfg.n_iters * len(models), random_start=False)
    for batch in batches:
        w = attack_models(models, per_batch, batch, w, rng=step_rng, trace=trace)
    w.provenance = {"method": method, "models": [m.id for m in models], "config": cfg.to_dict(), "seed": seed}
    return w
