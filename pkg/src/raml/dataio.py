"""Synthetic fine-grained data, resampling, augmentation and coupled teacher/student views.

Images are float32 arrays shaped C×H×W with values in [0, 1].
"""
from __future__ import annotations

import functools
import math
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import BoundsError, ConfigError, DimensionError, DomainError

IMAGE_MAGIC = b"RAMLIMG1"
MIN_SIDE = 4


# -- synthetic data -----------------------------------------------------------

@dataclass(frozen=True)
class SyntheticDatasetSpec:
    num_classes: int = 20
    images_per_class: int = 30
    base_resolution: int = 64
    channels: int = 3
    fine_signal_period: float = 4.0
    background_low: float = 0.15
    background_high: float = 0.6
    position_jitter: int = 6
    noise: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2 or self.images_per_class < 1:
            raise ConfigError("need >= 2 classes and >= 1 image per class")
        if not 0 < self.fine_signal_period <= 4:
            raise ConfigError(f"fine_signal_period must lie in (0, 4], got {self.fine_signal_period}")
        if not 0 <= self.background_low <= self.background_high <= 1:
            raise ConfigError("background range must satisfy 0 <= low <= high <= 1")
        if self.base_resolution < 16:
            raise ConfigError("base_resolution must be >= 16")

    def to_meta(self) -> dict[str, str]:
        return {f.name: repr(getattr(self, f.name)) if isinstance(getattr(self, f.name), float)
                else str(getattr(self, f.name)) for f in fields(self)}


@dataclass
class LabeledImages:
    images: np.ndarray
    labels: np.ndarray
    spec: SyntheticDatasetSpec | None = None

    def __len__(self):
        return len(self.labels)

    def split(self) -> tuple["LabeledImages", "LabeledImages"]:
        """First half of the classes for training, second half for testing."""
        classes = np.unique(self.labels)
        train_classes = classes[: len(classes) // 2]
        mask = np.isin(self.labels, train_classes)
        return (LabeledImages(self.images[mask], self.labels[mask], self.spec),
                LabeledImages(self.images[~mask], self.labels[~mask], self.spec))

    def unlabeled(self) -> "UnlabeledImages":
        return UnlabeledImages(self.images)


@dataclass
class UnlabeledImages:
    """Images with no access to class ids; the distillation path only ever sees this."""
    images: np.ndarray

    def __len__(self):
        return self.images.shape[0]


def _class_params(spec: SyntheticDatasetSpec):
    rng = np.random.default_rng([spec.seed, 0xC1A55])
    # evenly spaced orientations, randomly assigned so train and test classes interleave
    angles = np.pi * np.arange(spec.num_classes) / spec.num_classes
    angles = angles[rng.permutation(spec.num_classes)]
    phases = rng.uniform(0, 2 * np.pi, size=spec.num_classes)
    return angles, phases


def gen_synthetic_dataset(spec: SyntheticDatasetSpec) -> LabeledImages:
    """Oriented fine texture per class on a shared soft blob, with per-image nuisance."""
    m = spec.base_resolution
    angles, phases = _class_params(spec)
    yy, xx = np.mgrid[0:m, 0:m].astype(np.float64) + 0.5
    radius = 0.30 * m
    images = np.empty((spec.num_classes * spec.images_per_class, spec.channels, m, m), np.float32)
    labels = np.empty(spec.num_classes * spec.images_per_class, np.int64)
    k = 0
    for c in range(spec.num_classes):
        ca, sa = np.cos(angles[c]), np.sin(angles[c])
        for i in range(spec.images_per_class):
            rng = np.random.default_rng([spec.seed, c, i])
            cy, cx = m / 2 + rng.uniform(-spec.position_jitter, spec.position_jitter, size=2)
            bg = rng.uniform(spec.background_low, spec.background_high, size=(spec.channels, 1, 1))
            contrast = rng.uniform(0.25, 0.4)
            dy, dx = yy - cy, xx - cx
            mask = 1.0 / (1.0 + np.exp((np.hypot(dy, dx) - radius) / 1.5))
            wave = np.sin(2 * np.pi * (dx * ca + dy * sa) / spec.fine_signal_period + phases[c])
            tex = 0.5 + contrast * wave
            img = bg * (1 - mask) + tex[None] * mask[None]
            img = img + rng.normal(0, spec.noise, size=img.shape)
            images[k] = np.clip(img, 0, 1)
            labels[k] = c
            k += 1
    return LabeledImages(images, labels, spec)


# -- resampling ---------------------------------------------------------------

def round_even(x: float) -> int:
    return 2 * int(math.floor(x / 2 + 0.5))


@functools.lru_cache(maxsize=256)
def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row i averages source interval [i*n_in/n_out, (i+1)*n_in/n_out) with fractional overlap."""
    a = np.zeros((n_out, n_in), np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        lo, hi = i * scale, (i + 1) * scale
        for j in range(int(math.floor(lo)), min(n_in, int(math.ceil(hi)))):
            a[i, j] = min(hi, j + 1) - max(lo, j)
        a[i] /= a[i].sum()
    a.setflags(write=False)
    return a


@functools.lru_cache(maxsize=256)
def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Half-pixel-centre bilinear interpolation; same size yields the identity."""
    a = np.zeros((n_out, n_in), np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1)
        j0 = int(math.floor(src))
        j1 = min(j0 + 1, n_in - 1)
        t = src - j0
        a[i, j0] += 1 - t
        if t > 0:
            a[i, j1] += t
    a.setflags(write=False)
    return a


def _apply_separable(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    out = rows @ img.astype(np.float64) @ cols.T
    return out.astype(np.float32)


def resample_area(img: np.ndarray, height: int, width: int) -> np.ndarray:
    h, w = img.shape[-2:]
    if (h, w) == (height, width):
        return img.copy()
    return _apply_separable(img, _area_matrix(h, height), _area_matrix(w, width))


def downsample_r(img: np.ndarray, factor: float) -> np.ndarray:
    """Box-filter resampling to round-even(factor*H) × round-even(factor*W)."""
    if not 0 < factor <= 1:
        raise DomainError(f"downsample factor must lie in (0, 1], got {factor}")
    h, w = img.shape[-2:]
    if factor == 1:
        return img.copy()
    oh, ow = round_even(factor * h), round_even(factor * w)
    if oh < MIN_SIDE or ow < MIN_SIDE:
        raise DimensionError(f"downsampled size {oh}x{ow} below minimum {MIN_SIDE}x{MIN_SIDE}")
    return resample_area(img, oh, ow)


def scaled_resolution(base: int, factor: float) -> int:
    return base if factor == 1 else round_even(factor * base)


def eval_resample(img: np.ndarray, resolution: int) -> np.ndarray:
    """Aspect-preserving area resample (short side = resolution), then centre square crop."""
    h, w = img.shape[-2:]
    short = min(h, w)
    oh, ow = max(resolution, round(h * resolution / short)), max(resolution, round(w * resolution / short))
    out = resample_area(img, oh, ow)
    top, left = (oh - resolution) // 2, (ow - resolution) // 2
    return out[..., top:top + resolution, left:left + resolution]


# -- augmentation -------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    crop: bool = True
    flip: bool = True
    jitter_strength: float = 0.5
    mixup: bool = True
    mixup_alpha: float = 0.2
    crop_scale: tuple[float, float] = (0.5, 1.0)
    crop_ratio: tuple[float, float] = (0.75, 1.33)
    batch_size: int = 1


TEACHER_AUGMENT = AugmentConfig(jitter_strength=0.0, mixup=False)
DISTILL_AUGMENT = AugmentConfig()


@dataclass(frozen=True)
class AugmentationParams:
    crop: tuple[int, int, int, int]
    flip: bool
    jitter_scale: tuple[float, ...]
    jitter_shift: tuple[float, ...]
    mixup_lambda: float = 1.0
    partner_index: int = 0

    @classmethod
    def identity(cls, height: int, width: int, channels: int) -> "AugmentationParams":
        return cls(crop=(0, 0, height, width), flip=False,
                   jitter_scale=(1.0,) * channels, jitter_shift=(0.0,) * channels)


def sample_augmentation(rng: np.random.Generator, batch_position: int, config: AugmentConfig,
                        image_shape: tuple[int, int, int]) -> AugmentationParams:
    """Draw one augmentation; every field is always drawn so the stream layout is fixed."""
    c, h, w = image_shape
    area = rng.uniform(*config.crop_scale) * h * w
    ratio = math.exp(rng.uniform(math.log(config.crop_ratio[0]), math.log(config.crop_ratio[1]))) \
        if config.crop_ratio[0] != config.crop_ratio[1] else config.crop_ratio[0]
    ch = min(h, max(1, int(round(math.sqrt(area / ratio)))))
    cw = min(w, max(1, int(round(math.sqrt(area * ratio)))))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    flip = bool(rng.random() < 0.5)
    s = config.jitter_strength
    scale = rng.uniform(1 - 0.5 * s, 1 + 0.5 * s, size=c) if s > 0 else np.ones(c)
    shift = rng.uniform(-0.25 * s, 0.25 * s, size=c) if s > 0 else np.zeros(c)
    lam = float(rng.beta(config.mixup_alpha, config.mixup_alpha))
    if not config.crop:
        top, left, ch, cw = 0, 0, h, w
    return AugmentationParams(
        crop=(top, left, ch, cw),
        flip=flip if config.flip else False,
        jitter_scale=tuple(float(v) for v in scale),
        jitter_shift=tuple(float(v) for v in shift),
        mixup_lambda=lam if config.mixup else 1.0,
        partner_index=(batch_position + 1) % max(1, config.batch_size),
    )


def apply_augmentation(img: np.ndarray, params: AugmentationParams, out_resolution) -> np.ndarray:
    """crop -> bilinear resize -> optional horizontal flip -> per-channel affine jitter -> clamp."""
    c, h, w = img.shape
    top, left, ch, cw = params.crop
    if ch < 1 or cw < 1 or top < 0 or left < 0 or top + ch > h or left + cw > w:
        raise BoundsError(f"crop {params.crop} outside image of size {h}x{w}")
    oh, ow = (out_resolution, out_resolution) if isinstance(out_resolution, int) else out_resolution
    crop = img[:, top:top + ch, left:left + cw]
    if (ch, cw) == (oh, ow):
        out = crop.astype(np.float32, copy=True)
    else:
        out = _apply_separable(crop, _bilinear_matrix(ch, oh), _bilinear_matrix(cw, ow))
    if params.flip:
        out = out[:, :, ::-1]
    scale = np.asarray(params.jitter_scale, np.float32)[:, None, None]
    shift = np.asarray(params.jitter_shift, np.float32)[:, None, None]
    out = out * scale + shift
    return np.ascontiguousarray(np.clip(out, 0, 1), dtype=np.float32)


def mixup_images(a: np.ndarray, b: np.ndarray, lam: float) -> np.ndarray:
    if a.shape != b.shape:
        raise DimensionError(f"mixup: shapes {a.shape} and {b.shape} differ")
    if lam == 1:
        return a.copy()
    if lam == 0:
        return b.copy()
    lam32 = np.float32(lam)
    return np.clip(lam32 * a + (np.float32(1) - lam32) * b, 0, 1).astype(np.float32)


# -- coupled views ------------------------------------------------------------

@dataclass
class CoupledView:
    params: AugmentationParams
    teacher_view: np.ndarray
    student_view: np.ndarray
    student_params: AugmentationParams | None = None


@dataclass
class CoupledViewSet:
    source_index: int
    views: list[CoupledView] = field(default_factory=list)

    def __len__(self):
        return len(self.views)

    def teacher_stack(self) -> np.ndarray:
        return np.stack([v.teacher_view for v in self.views])

    def student_stack(self) -> np.ndarray:
        return np.stack([v.student_view for v in self.views])


def _augmented(img, partner, rng, position, config, out_res):
    params = sample_augmentation(rng, position, config, img.shape)
    view = apply_augmentation(img, params, out_res)
    if config.mixup and partner is not None:
        partner_params = sample_augmentation(rng, position, config, partner.shape)
        view = mixup_images(view, apply_augmentation(partner, partner_params, out_res), params.mixup_lambda)
    return params, view


def build_coupled_views(img: np.ndarray, count: int, rng: np.random.Generator, scale_factor: float,
                        partner: np.ndarray | None = None, *, config: AugmentConfig = DISTILL_AUGMENT,
                        out_resolution: int | None = None, coupled: bool = True,
                        source_index: int = 0, batch_position: int = 0) -> CoupledViewSet:
    """Augment first, then downsample: the student sees the teacher's exact pixels at low resolution.

    With ``coupled=False`` the student view comes from an independent augmentation draw.
    """
    if count < 1:
        raise ConfigError(f"augmentation count must be >= 1, got {count}")
    out_res = out_resolution or img.shape[-1]
    result = CoupledViewSet(source_index=source_index)
    for _ in range(count):
        params, teacher_view = _augmented(img, partner, rng, batch_position, config, out_res)
        student_params = None
        if coupled:
            student_src = teacher_view
        else:
            student_params, student_src = _augmented(img, partner, rng, batch_position, config, out_res)
        result.views.append(CoupledView(params, teacher_view, downsample_r(student_src, scale_factor),
                                        student_params))
    return result


def image_rng(seed: int, epoch: int, index: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index, stream])


def build_batch_views(images: np.ndarray, indices: Sequence[int], count: int, seed: int, epoch: int,
                      scale_factor: float, config: AugmentConfig = DISTILL_AUGMENT,
                      coupled: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Stack teacher/student views for one batch; partner of position i is position i+1 (mod B)."""
    b = len(indices)
    cfg = AugmentConfig(**{**config.__dict__, "batch_size": b})
    teacher, student = [], []
    for pos, idx in enumerate(indices):
        partner = images[indices[(pos + 1) % b]] if b > 1 else None
        views = build_coupled_views(images[idx], count, image_rng(seed, epoch, int(idx)), scale_factor,
                                    partner, config=cfg, coupled=coupled, source_index=int(idx),
                                    batch_position=pos)
        teacher.append(views.teacher_stack())
        student.append(views.student_stack())
    return np.concatenate(teacher), np.concatenate(student)


# -- on-disk format -----------------------------------------------------------

def write_image(path, img: np.ndarray) -> None:
    c, h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(IMAGE_MAGIC)
        fh.write(struct.pack("<3I", c, h, w))
        fh.write(np.ascontiguousarray(img, dtype="<f4").tobytes())


def read_image(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:8] != IMAGE_MAGIC:
        raise ConfigError("bad image magic", path=path)
    c, h, w = struct.unpack_from("<3I", blob, 8)
    return np.frombuffer(blob, dtype="<f4", count=c * h * w, offset=20).astype(np.float32).reshape(c, h, w)


def parse_kv_lines(text: str, path=None) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"expected key=value, got {raw!r}", line=lineno, path=path)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError("empty key", line=lineno, path=path)
        if key in out:
            raise ConfigError(f"duplicate key {key!r}", line=lineno, path=path)
        out[key] = value
    return out


def _parse_meta(path: Path) -> SyntheticDatasetSpec:
    text = path.read_text()
    meta = parse_kv_lines(text, path=path)
    lines = {k: n for n, l in enumerate(text.splitlines(), 1) if "=" in l for k in [l.split("=", 1)[0].strip()]}
    for f in fields(SyntheticDatasetSpec):
        if f.name not in meta:
            raise ConfigError(f"missing key {f.name!r}", path=path)
    for key in meta:
        if key not in {f.name for f in fields(SyntheticDatasetSpec)}:
            raise ConfigError(f"unknown key {key!r}", line=lines[key], path=path)
    kwargs = {}
    for f in fields(SyntheticDatasetSpec):
        try:
            kwargs[f.name] = float(meta[f.name]) if f.type in (float, "float") else int(meta[f.name])
        except ValueError:
            raise ConfigError(f"bad value {meta[f.name]!r} for {f.name}", line=lines[f.name], path=path) from None
    return SyntheticDatasetSpec(**kwargs)


def save_dataset(data: LabeledImages, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    spec = data.spec
    if spec is not None:
        (d / "meta").write_text("".join(f"{k}={v}\n" for k, v in spec.to_meta().items()))
    for i, img in enumerate(data.images):
        write_image(d / f"{i:06d}.img", img)
    (d / "labels").write_bytes(np.asarray(data.labels, dtype="<u4").tobytes())


def load_dataset(directory) -> LabeledImages:
    d = Path(directory)
    if not (d / "meta").is_file() or not (d / "labels").is_file():
        raise FileNotFoundError(f"no dataset at {d}")
    spec = _parse_meta(d / "meta")
    labels = np.frombuffer((d / "labels").read_bytes(), dtype="<u4").astype(np.int64)
    images = np.stack([read_image(d / f"{i:06d}.img") for i in range(len(labels))]) if len(labels) else \
        np.zeros((0, spec.channels, spec.base_resolution, spec.base_resolution), np.float32)
    return LabeledImages(images, labels, spec)
