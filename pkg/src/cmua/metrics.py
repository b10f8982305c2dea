"""Masked distortion metrics and a Fréchet feature distance.

Per-pixel distances are L2 norms across channels. The modification mask
marks pixels a generator changed by more than a threshold; distortion is
then averaged over those pixels only, so local edits are not diluted by
the unchanged rest of the image.

FRD is a Fréchet distance over features from a fixed, seeded random conv
extractor. It is a proxy and is never reported as FID.
"""

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import backend
from .seeding import derive_seed

log = logging.getLogger(__name__)

MASK_THRESHOLD = 0.5
SUCCESS_THRESHOLD = 0.05


def _check_shapes(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shapes differ, {a.shape} vs {b.shape}")


def pixel_distance(a, b):
    """Channel-wise L2 norm of ``a - b`` at each pixel, shape ``(..., H, W)``."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return np.sqrt(np.sum(d * d, axis=-1))


def modification_mask(original, edited, thresh=MASK_THRESHOLD):
    """Binary mask of pixels whose channel-norm change strictly exceeds ``thresh``."""
    original, edited = np.asarray(original), np.asarray(edited)
    _check_shapes(original, edited, "modification_mask")
    return (pixel_distance(edited, original) > thresh).astype(np.uint8)


def masked_l2(original_out, distorted_out, mask, return_flag=False):
    """Mean per-pixel distance over masked pixels.

    An empty mask falls back to the mean over all pixels; with
    ``return_flag`` the function also says whether that happened.
    """
    original_out, distorted_out = np.asarray(original_out), np.asarray(distorted_out)
    _check_shapes(original_out, distorted_out, "masked_l2")
    mask = np.asarray(mask)
    dist = pixel_distance(original_out, distorted_out)
    if mask.shape != dist.shape:
        raise ValueError(f"masked_l2: mask shape {mask.shape} does not match images {dist.shape}")
    n = int(mask.sum())
    empty = n == 0
    value = float(dist.mean()) if empty else float((dist * mask).sum() / n)
    return (value, empty) if return_flag else value


def sr_mask(l2_values, threshold=SUCCESS_THRESHOLD):
    """Fraction of images whose masked distortion strictly exceeds ``threshold``."""
    values = np.asarray(list(l2_values), dtype=np.float64)
    if values.size == 0:
        raise ValueError("sr_mask needs at least one image")
    return float(np.mean(values > threshold))


# ------------------------------------------------------------------ Fréchet


class FeatureExtractor:
    """Frozen random conv features: two conv+relu layers and global average pooling."""

    def __init__(self, seed=0, dim=64, channels=3, hidden=16):
        self.seed = seed
        self.dim = dim
        rng = np.random.default_rng(derive_seed(seed, "frd-extractor"))
        self.w1 = (rng.standard_normal((3, 3, channels, hidden)) / math.sqrt(9 * channels)).astype(np.float32)
        self.b1 = (0.1 * rng.standard_normal(hidden)).astype(np.float32)
        self.w2 = (rng.standard_normal((3, 3, hidden, dim)) / math.sqrt(9 * hidden)).astype(np.float32)
        self.b2 = (0.1 * rng.standard_normal(dim)).astype(np.float32)

    def __call__(self, images):
        x = np.ascontiguousarray(np.asarray(images, dtype=np.float32))
        if x.ndim == 3:
            x = x[None]
        h = np.maximum(backend.conv2d_forward(x, self.w1, self.b1), 0)
        h = np.maximum(backend.conv2d_forward(np.ascontiguousarray(h), self.w2, self.b2), 0)
        return h.mean(axis=(1, 2), dtype=np.float64)


def _sqrtm_psd(m):
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def _trace_sqrt_product(s1, s2):
    # Tr((s1 s2)^{1/2}) = Tr((r s2 r)^{1/2}) with r = s1^{1/2}; the inner matrix is symmetric PSD
    r = _sqrtm_psd(s1)
    vals = np.linalg.eigvalsh(r @ s2 @ r)
    return float(np.sum(np.sqrt(np.clip(vals, 0.0, None))))


def frechet_distance(feats_a, feats_b):
    """Fréchet distance between Gaussians fitted to two feature sets (rows are samples)."""
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"feature sets must be 2-D with equal width, got {a.shape} and {b.shape}")
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each set needs at least 2 samples")
    if len(a) <= a.shape[1] or len(b) <= b.shape[1]:
        warnings.warn(
            f"feature dimension {a.shape[1]} is not below the sample counts ({len(a)}, {len(b)}); "
            "covariances are rank-deficient", RuntimeWarning, stacklevel=2,
        )
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a, cov_b = np.cov(a, rowvar=False), np.cov(b, rowvar=False)
    cov_a, cov_b = np.atleast_2d(cov_a), np.atleast_2d(cov_b)
    diff = mu_a - mu_b
    # average both orderings so the result is symmetric bit for bit
    tr_sqrt = 0.5 * (_trace_sqrt_product(cov_a, cov_b) + _trace_sqrt_product(cov_b, cov_a))
    value = float(diff @ diff) + float(np.trace(cov_a + cov_b)) - 2.0 * tr_sqrt
    return max(value, 0.0)


def frechet_feature_distance(images_a, images_b, extractor):
    return frechet_distance(extractor(images_a), extractor(images_b))


# ------------------------------------------------------------------ reports


@dataclass
class ModelMetrics:
    model: str
    l2_mask: float
    sr_mask: float
    frd: float
    per_image: list = field(default_factory=list)
    empty_masks: int = 0
    # reserved for externally computed liveness scores
    acs: float = None
    tfhc: float = None

    def to_dict(self, per_image=True):
        d = {
            "model": self.model,
            "l2_mask": self.l2_mask,
            "sr_mask": self.sr_mask,
            "frd": self.frd,
            "log10_frd": math.log10(self.frd) if self.frd > 0 else None,
            "empty_masks": self.empty_masks,
            "acs": self.acs,
            "tfhc": self.tfhc,
        }
        if per_image:
            d["per_image"] = self.per_image
        return d


@dataclass
class MetricsReport:
    models: list
    config: dict = field(default_factory=dict)

    def by_model(self):
        return {m.model: m for m in self.models}

    def sr_values(self):
        return [m.sr_mask for m in self.models]

    def mean_sr(self):
        return float(np.mean(self.sr_values()))

    def min_sr(self):
        return float(np.min(self.sr_values()))

    def to_dict(self, per_image=True):
        return {
            "metrics": [m.to_dict(per_image) for m in self.models],
            "summary": {"mean_sr_mask": self.mean_sr(), "min_sr_mask": self.min_sr(),
                        "mean_l2_mask": float(np.mean([m.l2_mask for m in self.models]))},
            "config": self.config,
        }

    def table(self):
        lines = [f"{'model':<18} {'L2_mask':>8} {'SR_mask':>8} {'FRD':>10}"]
        for m in self.models:
            lines.append(f"{m.model:<18} {m.l2_mask:>8.4f} {m.sr_mask:>8.4f} {m.frd:>10.4f}")
        return "\n".join(lines)


def model_outputs(model, images, batch=64):
    """Forward ``images`` through ``model`` in chunks, without building gradients."""
    from .generators import generate

    out = [generate(model, images[i:i + batch]) for i in range(0, len(images), batch)]
    return np.concatenate(out) if out else np.zeros_like(images)


class CleanReference:
    """Clean outputs and modification masks for one model on a fixed image set."""

    def __init__(self, model, images, thresh=MASK_THRESHOLD):
        self.model = model
        self.images = np.asarray(images, dtype=np.float32)
        self.outputs = model_outputs(model, self.images)
        self.masks = modification_mask(self.images, self.outputs, thresh)


def evaluate_model(ref, perturbation, extractor=None, threshold=SUCCESS_THRESHOLD):
    protected = np.clip(ref.images + np.asarray(perturbation, dtype=np.float32), 0, 1).astype(np.float32)
    distorted = model_outputs(ref.model, protected)
    records, values, empty = [], [], 0
    for i in range(len(protected)):
        v, flag = masked_l2(ref.outputs[i], distorted[i], ref.masks[i], return_flag=True)
        values.append(v)
        empty += flag
        records.append({"index": i, "l2_mask": v, "success": v > threshold, "empty_mask": flag})
    frd = float("nan")
    if extractor is not None and len(protected) >= 2:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            frd = frechet_feature_distance(ref.outputs, distorted, extractor)
    return ModelMetrics(
        model=ref.model.id, l2_mask=float(np.mean(values)), sr_mask=sr_mask(values, threshold),
        frd=frd, per_image=records, empty_masks=empty,
    )


def evaluate(family, images, perturbation, extractor=None, refs=None, config=None):
    """Evaluate a perturbation on every model of ``family``.

    ``refs`` lets callers reuse clean outputs across many evaluations.
    """
    refs = refs if refs is not None else [CleanReference(m, images) for m in family]
    models = [evaluate_model(r, perturbation, extractor) for r in refs]
    return MetricsReport(models=models, config=dict(config or {}))
