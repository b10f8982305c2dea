"""Cross-model universal attack over batches and models.

For every batch, models are visited in registry order. Each visit runs the
single-model attack starting from the current fused watermark; the result
is blended into the fused watermark with decay ``alpha`` (model-level
fusion). The first visit assigns the result directly.

:func:`two_phase_run` wraps this in a step-size search with small batches
followed by one final run with large batches.
"""

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .attack import AttackConfig, AttackError, Watermark, attack_one_model
from .metrics import CleanReference, evaluate
from .seeding import rng as labeled_rng
from .tpe import SearchSpace, TPEConfig, optimize

log = logging.getLogger(__name__)

# step sizes in the search space are expressed in units of 1/255 of the pixel range
STEP_UNIT = 1.0 / 255


@dataclass
class FusionState:
    alpha: float
    watermark: Watermark = None
    t: int = 0


def model_fusion(state, p_avg):
    """Blend one model's perturbation into the running watermark.

    ``W <- alpha * W + (1 - alpha) * P`` followed by projection; on the
    first visit ``W <- P``.
    """
    if not 0.0 <= state.alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {state.alpha}")
    if state.watermark is None or state.t == 0:
        w = p_avg.perturbation.copy()
    else:
        if state.watermark.shape != p_avg.shape:
            raise T.ShapeError(f"model_fusion: shapes differ, {state.watermark.shape} vs {p_avg.shape}")
        a = np.float32(state.alpha)
        prev, new = state.watermark.perturbation, p_avg.perturbation
        # where both operands agree the blend is returned exactly (no rounding drift)
        w = np.where(prev == new, prev, a * prev + (np.float32(1) - a) * new)
    w = T.project_linf(w.astype(np.float32), p_avg.epsilon)
    return FusionState(alpha=state.alpha, watermark=Watermark(w, p_avg.epsilon), t=state.t + 1)


@dataclass
class PipelineConfig:
    step_sizes: tuple = None
    batch_size: int = 8
    alpha: float = 0.9
    attack: AttackConfig = field(default_factory=AttackConfig)
    seed: int = 0
    random_init: bool = True

    def validate(self, m=None):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if m is not None and self.step_sizes is not None and len(self.step_sizes) != m:
            raise ValueError(f"need {m} step sizes, got {len(self.step_sizes)}")
        self.attack.validate()
        return self

    def steps_for(self, m):
        if self.step_sizes is None:
            return [self.attack.step_size] * m
        return [float(a) for a in self.step_sizes]

    def to_dict(self):
        d = asdict(self)
        d["attack"] = self.attack.to_dict()
        d["step_sizes"] = None if self.step_sizes is None else [float(a) for a in self.step_sizes]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown pipeline config keys: {sorted(unknown)}")
        if "attack" in d:
            d["attack"] = AttackConfig.from_dict(d["attack"])
        if d.get("step_sizes") is not None:
            d["step_sizes"] = tuple(float(a) for a in d["step_sizes"])
        return cls(**d).validate()


def make_batches(images, batch_size):
    images = np.asarray(images, dtype=np.float32)
    if len(images) % batch_size:
        raise ValueError(f"{len(images)} images do not split into batches of {batch_size}")
    return [images[i:i + batch_size] for i in range(0, len(images), batch_size)]


class TargetCache:
    """Clean outputs per (model index, batch index), shared across runs on the same batches."""

    def __init__(self):
        self._store = {}

    def get(self, i, k, model, batch):
        key = (i, k)
        if key not in self._store:
            self._store[key] = model.apply(T.Tensor(batch)).data
        return self._store[key]


def initial_watermark(shape, cfg):
    eps = cfg.attack.epsilon
    if not cfg.random_init:
        return Watermark.zeros(shape, eps)
    rng = labeled_rng(cfg.seed, "attack-init")
    start = rng.uniform(-eps / 10, eps / 10, shape).astype(np.float32)
    return Watermark(T.project_linf(start, eps), eps)


def run_cmua(family, batches, cfg, cache=None, visit_log=None):
    """Cross-model universal attack; returns the watermark after ``o * m`` visits."""
    models = list(family)
    m = len(models)
    cfg.validate(m)
    batches = [np.asarray(b, dtype=np.float32) for b in batches]
    if not batches:
        raise ValueError("run_cmua needs at least one batch")
    for k, b in enumerate(batches):
        if len(b) != cfg.batch_size:
            raise ValueError(f"batch {k} has {len(b)} images, expected {cfg.batch_size}")
    steps = cfg.steps_for(m)
    shape = batches[0].shape[1:]
    w0 = initial_watermark(shape, cfg)
    state = FusionState(alpha=cfg.alpha)
    step_rng = labeled_rng(cfg.seed, "attack-steps")
    cache = cache if cache is not None else TargetCache()
    visits = []
    for k, batch in enumerate(batches):
        for i, model in enumerate(models):
            acfg = replace(cfg.attack, step_size=steps[i], random_start=False)
            current = state.watermark if state.watermark is not None else w0
            trace = []
            try:
                p_avg = attack_one_model(
                    model, acfg, batch, current, rng=step_rng,
                    targets=cache.get(i, k, model, batch), trace=trace,
                )
            except AttackError as exc:
                raise AttackError(f"batch {k + 1}, model {i + 1} ({model.id}): {exc}") from exc
            state = model_fusion(state, p_avg)
            visits.append({"batch": k, "model": model.id, "step_size": steps[i], "loss": trace})
    assert state.t == len(batches) * m
    wm = state.watermark
    wm.provenance = {
        "seed": cfg.seed,
        "pipeline": cfg.to_dict(),
        "models": family.ids if hasattr(family, "ids") else [mm.id for mm in models],
        "model_checksums": {mm.id: mm.checksum() for mm in models} if all(hasattr(mm, "checksum") for mm in models) else {},
        "visits": len(visits),
    }
    if visit_log is not None:
        visit_log.extend(visits)
    return wm


@dataclass
class SearchConfig:
    budget: int = 60
    batch_size: int = 8
    space_low: float = 0.0
    space_high: float = 10.0
    step_unit: float = STEP_UNIT
    # search on only the first train_count training images (None: all of them)
    train_count: int = None
    tpe: TPEConfig = field(default_factory=TPEConfig)

    def to_dict(self):
        d = asdict(self)
        d["tpe"] = asdict(self.tpe)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown search config keys: {sorted(unknown)}")
        if "tpe" in d:
            d["tpe"] = TPEConfig(**d["tpe"])
        return cls(**d)


class SearchFailed(RuntimeError):
    pass


def search_step_sizes(family, train_images, score_images, search, pipeline, seed=0, history=None, log_path=None):
    """TPE over per-model step sizes, scored by mean SR_mask on held-out images.

    Batches and the random initial watermark are the same for every trial.
    """
    m = len(family)
    space = SearchSpace.box(m, search.space_low, search.space_high)
    batches = make_batches(train_images, search.batch_size)
    cache = TargetCache()
    refs = [CleanReference(model, score_images) for model in family]
    base = replace(pipeline, batch_size=search.batch_size, seed=seed)

    def objective(x):
        cfg = replace(base, step_sizes=tuple(float(v) * search.step_unit for v in x))
        wm = run_cmua(family, batches, cfg, cache=cache)
        return evaluate(family, score_images, wm.perturbation, refs=refs).mean_sr()

    best_x, best_y, hist = optimize(
        objective, space, search.budget, seed=seed, config=search.tpe, history=history, log_path=log_path,
    )
    if not math.isfinite(best_y):
        failed = [o.index for o in hist.observations if not math.isfinite(o.y)]
        raise SearchFailed(f"no trial produced a finite score; failed trials: {failed}")
    return best_x, best_y, hist


@dataclass
class TwoPhaseResult:
    watermark: Watermark
    step_sizes: tuple
    search_score: float
    history: object


def two_phase_run(family, train_images, score_images, search, final, seed=0, log_path=None, visit_log=None):
    """Search step sizes with small batches, then rerun the attack with large batches.

    With ``search.train_count`` set, the search sees only that many leading
    training images, and the final run trains on all of them.
    """
    if search.budget < 1:
        raise ValueError("search budget must be >= 1")
    search_images = train_images if search.train_count is None else train_images[:search.train_count]
    t0 = time.perf_counter()
    best_x, best_y, hist = search_step_sizes(
        family, search_images, score_images, search, final, seed=seed, log_path=log_path,
    )
    log.info("step-size search finished in %.1fs, best score %.4f", time.perf_counter() - t0, best_y)
    steps = tuple(float(v) * search.step_unit for v in best_x)
    cfg = replace(final, step_sizes=steps, seed=seed)
    wm = run_cmua(family, make_batches(train_images, cfg.batch_size), cfg, visit_log=visit_log)
    wm.provenance["search"] = {
        "best_x": [float(v) for v in best_x], "best_score": best_y, "budget": search.budget,
        "search_batch_size": search.batch_size, "step_unit": search.step_unit,
        "search_train_count": len(search_images),
    }
    return TwoPhaseResult(watermark=wm, step_sizes=steps, search_score=best_y, history=hist)
