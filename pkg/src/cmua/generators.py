"""Toy image-translation models and a synthetic face-like image source.

Every model maps an image ``x`` in [0, 1] to

    out = x * (1 - M) + T(x) * M

where ``M`` is a fixed spatial blend mask scaled by the edit strength and
``T`` is a differentiable "target" image. Analytic editors compute ``T``
from one seeded bank of oriented zero-mean filters; conv editors from a
small random conv stack whose first layer is such a bank. Because ``out`` is a convex combination of two images in [0, 1] it
stays in [0, 1].

The attribute vector is ``[strength, r, g, b]``: the blend strength and the
attribute color that ``T`` is pulled toward. An all-zero attribute is the
identity edit.
"""

import copy
import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .seeding import derive_seed

ATTRIBUTE_DIM = 4
IMAGE_SHAPE = (32, 32, 3)
_COLOR_EPS = 1e-4

ANALYTIC = "analytic-patch-editor"
CONV = "conv-editor"


@dataclass
class ModelSpec:
    id: str
    kind: str
    color: tuple = (0.5, 0.5, 0.5)
    strength: float = 1.0
    gain: float = 1.0
    kernel: int = 3
    # analytic editors: (top, left, bottom, right), half-open; None is the whole frame
    edit_region: tuple = None
    feather: float = 0.0
    # conv editors
    first_kernel: int = 7
    hidden: int = 8
    layers: int = 3
    output: str = "sigmoid"

    def validate(self):
        if self.kind not in (ANALYTIC, CONV):
            raise ValueError(f"model {self.id!r}: unknown kind {self.kind!r}")
        if len(self.color) != 3:
            raise ValueError(f"model {self.id!r}: color must have 3 components")
        if not 0.0 <= self.strength <= 1.0:
            raise ValueError(f"model {self.id!r}: strength must lie in [0, 1]")
        if self.kernel < 1 or self.kernel % 2 == 0 or self.first_kernel < 1 or self.first_kernel % 2 == 0:
            raise ValueError(f"model {self.id!r}: kernel size must be odd")
        if self.feather < 0:
            raise ValueError(f"model {self.id!r}: feather must be >= 0")
        if self.kind == CONV:
            if self.layers < 2 or self.hidden < 1:
                raise ValueError(f"model {self.id!r}: conv editor needs >= 2 layers")
            if self.output not in ("tanh", "sigmoid"):
                raise ValueError(f"model {self.id!r}: output must be 'tanh' or 'sigmoid'")
        elif self.edit_region is not None:
            top, left, bottom, right = self.edit_region
            if not (0 <= top < bottom and 0 <= left < right):
                raise ValueError(f"model {self.id!r}: empty edit region {self.edit_region}")


# Output gains were found once by bisection (see calibrate_gain) and pinned.
DEFAULT_MODELS = (
    ModelSpec(id="recolor-global", kind=ANALYTIC, color=(0.95, 0.8, 0.3), strength=0.85,
              gain=5.027, kernel=7, edit_region=(0, 0, 32, 32), feather=3.0),
    ModelSpec(id="patch-glasses", kind=ANALYTIC, color=(0.05, 0.05, 0.08), strength=1.0,
              gain=6.106, kernel=7, edit_region=(10, 6, 18, 27), feather=1.5),
    ModelSpec(id="conv-tanh3", kind=CONV, color=(0.9, 0.1, 0.8), strength=0.9,
              gain=3.779, kernel=3, hidden=8, layers=3, output="tanh"),
    ModelSpec(id="conv-sigmoid5", kind=CONV, color=(0.1, 0.85, 0.9), strength=0.9,
              gain=10.435, kernel=3, hidden=8, layers=5, output="sigmoid"),
)


@dataclass
class FamilySpec:
    models: tuple = DEFAULT_MODELS
    image_shape: tuple = IMAGE_SHAPE

    @classmethod
    def default(cls, m=len(DEFAULT_MODELS)):
        if m < 1:
            raise ValueError("a family needs at least one model")
        models = []
        for i in range(m):
            base = copy.deepcopy(DEFAULT_MODELS[i % len(DEFAULT_MODELS)])
            if i >= len(DEFAULT_MODELS):
                base.id = f"{base.id}-{i // len(DEFAULT_MODELS) + 1}"
            models.append(base)
        return cls(models=tuple(models))

    def to_dict(self):
        return {"image_shape": list(self.image_shape), "models": [asdict(s) for s in self.models]}

    @classmethod
    def from_dict(cls, d):
        if "m" in d and "models" not in d:
            spec = cls.default(int(d["m"]))
        else:
            models = []
            for md in d.get("models", [asdict(s) for s in DEFAULT_MODELS]):
                md = dict(md)
                unknown = set(md) - set(ModelSpec.__dataclass_fields__)
                if unknown:
                    raise ValueError(f"unknown model spec keys: {sorted(unknown)}")
                for key in ("color", "edit_region"):
                    if md.get(key) is not None:
                        md[key] = tuple(md[key])
                models.append(ModelSpec(**md))
            spec = cls(models=tuple(models))
        if "image_shape" in d:
            spec.image_shape = tuple(int(v) for v in d["image_shape"])
        return spec


def _logit(p):
    p = np.clip(np.asarray(p, dtype=np.float64), _COLOR_EPS, 1 - _COLOR_EPS)
    return np.log(p / (1 - p))


def _normalize_filter(w):
    w = w - w.mean(axis=(0, 1, 2), keepdims=True)
    return w / np.sqrt((w ** 2).sum(axis=(0, 1, 2), keepdims=True))


def _oriented_bank(rng, k, cin, cout):
    """Seeded oriented band-pass filters sharing one preferred orientation and period.

    Each output channel is a windowed grating with a jittered orientation
    and phase, mixing the input channels with random weights. The shared
    preference gives every model its own narrow band of input sensitivity.
    """
    theta0 = rng.uniform(0, np.pi)
    period0 = rng.uniform(3.0, 6.0)
    c = (k - 1) / 2
    yy, xx = np.mgrid[0:k, 0:k] - c
    window = np.exp(-(yy ** 2 + xx ** 2) / (2 * (0.45 * k) ** 2))
    w = np.empty((k, k, cin, cout))
    for o in range(cout):
        theta = theta0 + rng.normal(0, 0.15)
        freq = 2 * np.pi / (period0 * np.exp(rng.normal(0, 0.1)))
        phase = rng.uniform(0, 2 * np.pi)
        grating = np.cos(freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase) * window
        mix = rng.standard_normal(cin)
        w[:, :, :, o] = grating[:, :, None] * mix[None, None, :]
    return _normalize_filter(w)


def region_mask(shape, region, feather):
    """Spatial blend mask with compact support inside ``region``.

    Values ramp linearly from 0 at the region border to 1 at ``feather``
    pixels inside it; ``feather == 0`` gives a hard 0/1 indicator.
    """
    h, w = shape[:2]
    if region is None:
        return np.ones((h, w, 1), dtype=np.float32)
    top, left, bottom, right = region

    def ramp(n, lo, hi):
        idx = np.arange(n, dtype=np.float64)
        # distance (in pixels, 1 at the edge pixel) to the nearest border, <= 0 outside
        d = np.minimum(idx - lo + 1, hi - idx)
        if feather <= 0:
            return (d > 0).astype(np.float64)
        return np.clip(d / feather, 0.0, 1.0)

    m = ramp(h, top, bottom)[:, None] * ramp(w, left, right)[None, :]
    return m[:, :, None].astype(np.float32)


@dataclass
class GeneratorModel:
    id: str
    kind: str
    spec: ModelSpec
    weights: dict
    image_shape: tuple
    attribute_dim: int = ATTRIBUTE_DIM
    edit_region: tuple = None
    default_attribute: np.ndarray = field(default=None)

    def blend_mask(self, strength):
        base = region_mask(self.image_shape, self.edit_region, self.spec.feather)
        return (base * np.float32(strength)).astype(np.float32)

    def target(self, x, attribute):
        """The image the edit pulls toward, as a tensor."""
        logit = _logit(attribute[1:4]).astype(np.float32)
        gain = np.float32(self.spec.gain)
        if self.kind == ANALYTIC:
            z = T.conv2d(x, self.weights["filter"])
            return T.sigmoid(T.add(T.scale(z, gain), logit))
        h = x
        n = self.spec.layers
        for i in range(n):
            h = T.conv2d(h, self.weights[f"w{i}"], self.weights[f"b{i}"])
            if i < n - 1:
                h = T.relu(h)
        if self.spec.output == "tanh":
            z = T.add(T.scale(h, gain), 0.5 * logit)
            return T.add(T.scale(T.tanh(z), 0.5), np.float32(0.5))
        return T.sigmoid(T.add(T.scale(h, gain), logit))

    def apply(self, x, attribute=None):
        """Differentiable forward pass on a tensor of shape (H, W, C) or (N, H, W, C)."""
        x = T.as_tensor(x)
        attribute = self.default_attribute if attribute is None else np.asarray(attribute, dtype=np.float64)
        if attribute.shape != (self.attribute_dim,):
            raise ValueError(f"{self.id}: attribute must have length {self.attribute_dim}, got {attribute.shape}")
        if tuple(x.shape[-3:]) != tuple(self.image_shape):
            raise T.ShapeError(f"{self.id}: expected images of shape {self.image_shape}, got {x.shape}")
        strength = float(attribute[0])
        if strength == 0.0:
            # identity edit; keep the graph so gradients still flow
            return T.scale(x, 1.0)
        m = self.blend_mask(strength)
        tgt = self.target(x, attribute)
        return T.add(T.mul(x, 1 - m), T.mul(tgt, m))

    def checksum(self):
        h = hashlib.sha256(self.id.encode())
        for key in sorted(self.weights):
            h.update(key.encode())
            h.update(np.ascontiguousarray(self.weights[key]).tobytes())
        return h.hexdigest()


def build_model(spec, seed, image_shape=IMAGE_SHAPE):
    spec.validate()
    rng = np.random.default_rng(derive_seed(seed, "weights", spec.id))
    channels = image_shape[2]
    weights = {}
    k = spec.kernel
    if spec.kind == ANALYTIC:
        weights["filter"] = _oriented_bank(rng, k, channels, channels).astype(np.float32)
    else:
        widths = [channels] + [spec.hidden] * (spec.layers - 1) + [channels]
        for i in range(spec.layers):
            cin, cout = widths[i], widths[i + 1]
            if i == 0:
                # zero-mean first layer: responds to structure, not to flat brightness
                w = _oriented_bank(rng, spec.first_kernel, cin, cout)
            else:
                # He-scaled, with each output filter's norm fixed so sensitivity does not vary by seed
                w = rng.standard_normal((k, k, cin, cout))
                w *= np.sqrt(2.0) / np.sqrt((w ** 2).sum(axis=(0, 1, 2), keepdims=True))
            weights[f"w{i}"] = w.astype(np.float32)
            weights[f"b{i}"] = (0.1 * rng.standard_normal(cout)).astype(np.float32)
    attribute = np.array([spec.strength, *spec.color], dtype=np.float64)
    return GeneratorModel(
        id=spec.id, kind=spec.kind, spec=spec, weights=weights, image_shape=tuple(image_shape),
        edit_region=spec.edit_region if spec.kind == ANALYTIC else None, default_attribute=attribute,
    )


@dataclass
class ModelFamily:
    models: list
    image_shape: tuple
    spec: FamilySpec
    seed: int

    def __len__(self):
        return len(self.models)

    def __iter__(self):
        return iter(self.models)

    def __getitem__(self, i):
        return self.models[i]

    @property
    def ids(self):
        return [m.id for m in self.models]

    def checksums(self):
        return {m.id: m.checksum() for m in self.models}

    def export_weights(self, path):
        """Write all weights to an ``.npz`` sidecar for audit."""
        arrays = {f"{i:02d}:{m.id}:{k}": v for i, m in enumerate(self.models) for k, v in m.weights.items()}
        np.savez(path, **arrays)


def make_family(spec=None, seed=0):
    if spec is None:
        spec = FamilySpec.default()
    elif isinstance(spec, dict):
        spec = FamilySpec.from_dict(spec)
    if len(spec.models) < 1:
        raise ValueError("a family needs at least one model")
    ids = [s.id for s in spec.models]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate model ids in family spec: {ids}")
    models = [build_model(s, seed, spec.image_shape) for s in spec.models]
    return ModelFamily(models=models, image_shape=tuple(spec.image_shape), spec=spec, seed=seed)


def generate(model, image, attribute=None):
    """Translate an image (or batch). Arrays in give arrays out; tensors give tensors."""
    if isinstance(image, T.Tensor):
        return model.apply(image, attribute)
    x = np.asarray(image, dtype=np.float32)
    return model.apply(T.Tensor(x), attribute).data


# ----------------------------------------------------------------- synthetic data

SKIN_TONES = np.array([[0.96, 0.82, 0.72], [0.86, 0.66, 0.52], [0.64, 0.45, 0.32], [0.42, 0.28, 0.2]])
HAIR_COLORS = np.array([[0.08, 0.06, 0.05], [0.35, 0.22, 0.12], [0.85, 0.72, 0.42], [0.62, 0.6, 0.58]])


@dataclass
class SyntheticDataset:
    seed: int = 0
    count: int = 4096
    image_shape: tuple = IMAGE_SHAPE
    face_center_jitter: float = 2.0
    face_axes: tuple = ((10.0, 12.5), (7.5, 9.5))
    eye_offset: tuple = ((2.0, 3.5), (3.5, 5.0))
    mouth_offset: tuple = (4.5, 6.5)
    noise: float = 0.02

    def to_dict(self):
        d = asdict(self)
        d["kind"] = "synthetic"
        return d


def _coverage(sdf):
    # anti-aliased inside test from a signed distance (negative inside)
    return 1.0 / (1.0 + np.exp(np.clip(sdf * 2.5, -50, 50)))


def _ellipse_sdf(yy, xx, cy, cx, ay, ax):
    r = np.sqrt(((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2)
    return (r - 1.0) * min(ay, ax)


def synth_image(ds, index):
    if not 0 <= index < ds.count:
        raise IndexError(f"image index {index} outside dataset of {ds.count}")
    rng = np.random.default_rng(derive_seed(ds.seed, "dataset", index))
    h, w, c = ds.image_shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    sy, sx = h / 32.0, w / 32.0

    bg_top, bg_bottom = rng.uniform(0.15, 0.9, 3), rng.uniform(0.1, 0.8, 3)
    t = (yy / h)[..., None]
    img = bg_top * (1 - t) + bg_bottom * t

    cy = h * 0.55 + rng.uniform(-1, 1) * ds.face_center_jitter * sy
    cx = w * 0.5 + rng.uniform(-1, 1) * ds.face_center_jitter * sx
    ay = rng.uniform(*ds.face_axes[0]) * sy
    ax = rng.uniform(*ds.face_axes[1]) * sx

    hair = HAIR_COLORS[rng.integers(len(HAIR_COLORS))] + rng.normal(0, 0.04, 3)
    hair_cov = _coverage(_ellipse_sdf(yy, xx, cy - 0.25 * ay, cx, ay * 1.05, ax * 1.2))
    img = img * (1 - hair_cov[..., None]) + hair * hair_cov[..., None]

    tone = rng.uniform(0, len(SKIN_TONES) - 1)
    lo = int(np.floor(tone))
    hi = min(lo + 1, len(SKIN_TONES) - 1)
    skin = SKIN_TONES[lo] * (1 - (tone - lo)) + SKIN_TONES[hi] * (tone - lo)
    face_cov = _coverage(_ellipse_sdf(yy, xx, cy + 0.12 * ay, cx, ay * 0.88, ax))
    shade = 1.0 - 0.12 * ((xx - cx) / (ax + 1e-9))[..., None] * rng.uniform(-1, 1)
    img = img * (1 - face_cov[..., None]) + (skin * shade) * face_cov[..., None]

    ey = cy - rng.uniform(*ds.eye_offset[0]) * sy
    ex = rng.uniform(*ds.eye_offset[1]) * sx
    eye_color = rng.uniform(0.02, 0.25, 3)
    for side in (-1, 1):
        cov = _coverage(_ellipse_sdf(yy, xx, ey, cx + side * ex, 1.0 * sy, 1.5 * sx))
        img = img * (1 - cov[..., None]) + eye_color * cov[..., None]

    my = cy + rng.uniform(*ds.mouth_offset) * sy
    lip = np.array([0.75, 0.25, 0.3]) * rng.uniform(0.7, 1.1)
    cov = _coverage(_ellipse_sdf(yy, xx, my, cx, 0.9 * sy, rng.uniform(2.5, 4.0) * sx))
    img = img * (1 - cov[..., None]) + lip * cov[..., None]

    img = img + rng.normal(0, ds.noise, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_images(ds, start, count):
    if start < 0 or count < 0 or start + count > ds.count:
        raise IndexError(f"requested images [{start}, {start + count}) outside dataset of {ds.count}")
    if count == 0:
        return np.zeros((0, *ds.image_shape), dtype=np.float32)
    return np.stack([synth_image(ds, i) for i in range(start, start + count)])
