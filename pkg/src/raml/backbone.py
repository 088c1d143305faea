"""Fully convolutional embedding network: conv blocks, GeM pooling, projection, l2 norm."""
from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Precision, Tensor
from .errors import ConfigError, DimensionError

TEACHER = "teacher"
STUDENT = "student"
ROLES = (TEACHER, STUDENT)

PARAM_MAGIC = b"RAMLPAR1"
PARAM_VERSION = 1
GEM_EPS = 1e-6


@dataclass(frozen=True)
class BackboneConfig:
    channels: tuple[int, ...] = (8, 16, 32, 64)
    kernel: int = 3
    stride: int = 2
    gem_p: float = 3.0
    embed_dim: int = 64
    input_channels: int = 3
    learnable_p: bool = False

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) < 1:
            raise ConfigError("backbone needs at least one conv block")
        if any(c < 1 for c in self.channels):
            raise ConfigError(f"channel counts must be positive: {self.channels}")
        if self.gem_p < 1:
            raise ConfigError(f"gem_p must be >= 1, got {self.gem_p}")
        if self.embed_dim < 1:
            raise ConfigError(f"embed_dim must be >= 1, got {self.embed_dim}")
        if self.input_channels < 1 or self.kernel < 1 or self.stride < 1:
            raise ConfigError("input_channels, kernel and stride must be positive")

    @property
    def pad(self) -> int:
        return self.kernel // 2

    def feature_sizes(self, height: int, width: int) -> list[tuple[int, int]]:
        """Spatial size after each conv block; raises when the input is too small."""
        if min(height, width) < self.min_resolution():
            raise DimensionError(
                f"input {height}x{width} below receptive minimum {self.min_resolution()} for this backbone")
        sizes = []
        h, w = height, width
        for _ in self.channels:
            h = (h + 2 * self.pad - self.kernel) // self.stride + 1
            w = (w + 2 * self.pad - self.kernel) // self.stride + 1
            sizes.append((h, w))
        return sizes

    def min_resolution(self) -> int:
        """Smallest input side whose first conv sees a full kernel without padding."""
        return self.kernel

    def to_dict(self) -> dict[str, str]:
        return {
            "channels": ",".join(str(c) for c in self.channels),
            "kernel": str(self.kernel),
            "stride": str(self.stride),
            "gem_p": repr(float(self.gem_p)),
            "embed_dim": str(self.embed_dim),
            "input_channels": str(self.input_channels),
            "learnable_p": str(int(self.learnable_p)),
        }

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "BackboneConfig":
        return cls(
            channels=tuple(int(c) for c in d["channels"].split(",")),
            kernel=int(d["kernel"]),
            stride=int(d["stride"]),
            gem_p=float(d["gem_p"]),
            embed_dim=int(d["embed_dim"]),
            input_channels=int(d["input_channels"]),
            learnable_p=bool(int(d["learnable_p"])),
        )


@dataclass
class ModelParams:
    config: BackboneConfig
    weights: dict[str, np.ndarray]
    role: str = TEACHER
    seed: int = 0
    version: int = 0

    def __post_init__(self):
        if self.role not in ROLES:
            raise ConfigError(f"unknown role tag {self.role!r}")

    def names(self) -> list[str]:
        return list(self.weights)

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.weights):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.weights[name]).tobytes())
        return h.hexdigest()

    def tensors(self, requires_grad=False, precision: Precision = Precision.RUN) -> dict[str, Tensor]:
        return {k: Tensor(v.astype(precision.dtype, copy=True) if precision is Precision.VERIFY else v,
                          requires_grad=requires_grad, precision=precision, name=k)
                for k, v in self.weights.items()}


@dataclass
class EmbeddingBatch:
    vectors: np.ndarray
    encoder: str
    resolution: int

    def __len__(self):
        return self.vectors.shape[0]


def _weight_shapes(config: BackboneConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    cin = config.input_channels
    for i, cout in enumerate(config.channels):
        shapes[f"conv{i}.weight"] = (cout, cin, config.kernel, config.kernel)
        shapes[f"conv{i}.bias"] = (cout,)
        cin = cout
    shapes["proj.weight"] = (cin, config.embed_dim)
    if config.learnable_p:
        shapes["gem.p"] = ()
    return shapes


def init_backbone(config: BackboneConfig, seed: int, role: str = TEACHER) -> ModelParams:
    """Fan-in scaled uniform init, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in _weight_shapes(config).items():
        if name == "gem.p":
            weights[name] = np.asarray(config.gem_p, dtype=np.float32)
            continue
        if name.endswith(".bias"):
            fan_in = weights[name.replace("bias", "weight")][0].size
        elif name == "proj.weight":
            fan_in = shape[0]
        else:
            fan_in = int(np.prod(shape[1:]))
        # He-uniform bound keeps relu activations from vanishing through depth
        bound = np.sqrt(6.0 / fan_in) if name != "proj.weight" else np.sqrt(3.0 / fan_in)
        if name.endswith(".bias"):
            bound = 1.0 / np.sqrt(fan_in)
        weights[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return ModelParams(config=config, weights=weights, role=role, seed=seed)


def clone_params(src: ModelParams, new_role: str) -> ModelParams:
    return ModelParams(config=src.config, weights={k: v.copy() for k, v in src.weights.items()},
                       role=new_role, seed=src.seed, version=src.version)


def gem_pool(features: Tensor, p) -> Tensor:
    """Per-channel generalized mean over H×W: (mean x^p)^(1/p); ``p`` float or scalar Tensor."""
    if features.ndim != 4:
        raise DimensionError(f"gem_pool expects N×C×H×W, got {features.shape}")
    if isinstance(p, Tensor):
        if float(p.data) < 1:
            raise ConfigError(f"GeM p must be >= 1, got {float(p.data)}")
        x = ad.clamp_min(features, GEM_EPS)
        m = ad.reduce_mean(ad.pow(x, p), axes=(2, 3))
        return ad.pow(m, ad.pow(p, -1.0))
    p = float(p)
    if p < 1:
        raise ConfigError(f"GeM p must be >= 1, got {p}")
    if p == 1:
        return ad.reduce_mean(features, axes=(2, 3))
    x = ad.clamp_min(features, GEM_EPS)
    return ad.pow(ad.reduce_mean(ad.pow(x, p), axes=(2, 3)), 1.0 / p)


def embed(weights: dict[str, Tensor], config: BackboneConfig, images: Tensor) -> Tensor:
    """Graph-level forward pass returning an N×d tensor of unit-norm rows."""
    if images.ndim != 4 or images.shape[1] != config.input_channels:
        raise DimensionError(f"expected N×{config.input_channels}×H×W images, got {images.shape}")
    config.feature_sizes(images.shape[2], images.shape[3])
    x = images
    for i in range(len(config.channels)):
        x = ad.relu(ad.conv2d(x, weights[f"conv{i}.weight"], stride=config.stride,
                              pad=config.pad, bias=weights[f"conv{i}.bias"]))
    p = weights["gem.p"] if config.learnable_p else config.gem_p
    pooled = gem_pool(x, p)
    return ad.l2_normalize(ad.matmul(pooled, weights["proj.weight"]))


def forward_embed(params: ModelParams, images, chunk: int = 256) -> EmbeddingBatch:
    """Embed a batch of images (numpy N×C×H×W) without recording a graph."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4:
        raise DimensionError(f"expected N×C×H×W images, got {images.shape}")
    weights = params.tensors()
    outs = []
    for start in range(0, images.shape[0], chunk):
        outs.append(embed(weights, params.config, Tensor(images[start:start + chunk])).data)
    vectors = np.concatenate(outs, axis=0) if outs else np.zeros((0, params.config.embed_dim), np.float32)
    return EmbeddingBatch(vectors=vectors, encoder=params.role, resolution=int(images.shape[2]))


def count_flops(config: BackboneConfig, resolution) -> int:
    """Analytic floating-point operation count for embedding one image."""
    if isinstance(resolution, int):
        height = width = resolution
    else:
        height, width = resolution
    total = 0
    cin = config.input_channels
    for cout, (ho, wo) in zip(config.channels, config.feature_sizes(height, width)):
        total += 2 * config.kernel ** 2 * cin * cout * ho * wo
        cin = cout
    ho, wo = config.feature_sizes(height, width)[-1]
    total += cin * ho * wo
    total += 2 * cin * config.embed_dim
    return total


# -- persistence --------------------------------------------------------------

def _kv_block(d: dict[str, str]) -> bytes:
    return "".join(f"{k}={v}\n" for k, v in d.items()).encode("utf-8")


def params_to_bytes(params: ModelParams) -> bytes:
    header = dict(params.config.to_dict())
    header.update(role=params.role, seed=str(params.seed), version=str(params.version))
    cfg = _kv_block(header)
    buf = io.BytesIO()
    buf.write(PARAM_MAGIC)
    buf.write(struct.pack("<B", PARAM_VERSION))
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    for name, arr in params.weights.items():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def params_from_bytes(blob: bytes) -> ModelParams:
    try:
        return _parse_params(blob)
    except (struct.error, ValueError, KeyError, UnicodeDecodeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"corrupt parameter file: {exc}") from None


def _parse_params(blob: bytes) -> ModelParams:
    if blob[:8] != PARAM_MAGIC:
        raise ConfigError("not a parameter file (bad magic)")
    (version,) = struct.unpack_from("<B", blob, 8)
    if version != PARAM_VERSION:
        raise ConfigError(f"unsupported parameter file version {version}")
    (clen,) = struct.unpack_from("<I", blob, 9)
    pos = 13
    header = dict(line.split("=", 1) for line in blob[pos:pos + clen].decode("utf-8").splitlines() if line)
    pos += clen
    weights = {}
    while pos < len(blob):
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).astype(np.float32).reshape(dims)
        pos += 4 * count
        weights[name] = arr
    return ModelParams(config=BackboneConfig.from_dict(header), weights=weights,
                       role=header["role"], seed=int(header["seed"]), version=int(header["version"]))


def save_params(params: ModelParams, path) -> None:
    Path(path).write_bytes(params_to_bytes(params))


def load_params(path) -> ModelParams:
    return params_from_bytes(Path(path).read_bytes())
