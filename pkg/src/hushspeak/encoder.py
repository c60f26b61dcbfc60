"""Surrogate speaker encoder g(.) with an additive angular margin head.

Three dilated temporal convolutions with rectification, mean+std statistics
pooling, a linear projection and l2 normalization. Parameters are plain float64
tensors kept on the float32 grid, so the float32 model file round-trips
bit-identically; the network is evaluated functionally so both parameter and
waveform gradients come from autograd.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from .audio_io import DEFAULT_PATCH_LENGTH, DatasetManifest, read_patch
from .dsp import DTYPE, FeatureConfig, FeatureMap, log_mel
from .errors import EncoderError, ModelFormatError, TrainingDivergedError

logger = logging.getLogger(__name__)

# (kernel, dilation) per temporal convolution
LAYERS: Tuple[Tuple[int, int], ...] = ((5, 1), (3, 2), (3, 3))
MIN_FRAMES = 9
STD_FLOOR = 1e-8

DEFAULT_MARGIN = 0.2
DEFAULT_SCALE = 30.0
DEFAULT_LEARNING_RATE = 0.05
DEFAULT_BATCH_SIZE = 32
DEFAULT_EPOCHS = 8

MODEL_MAGIC = b"HSPK"
MODEL_VERSION = 1
_HEADER = struct.Struct("<4s8I")


@dataclass(frozen=True)
class EncoderConfig:
    n_mels: int = 40
    channels: int = 64
    embedding_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        for name in ("n_mels", "channels", "embedding_dim"):
            if int(getattr(self, name)) < 1:
                raise EncoderError(f"{name} must be at least 1, got {getattr(self, name)}")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise EncoderError(f"seed must fit in 64 bits, got {self.seed}")

    def feature_config(self) -> FeatureConfig:
        return FeatureConfig(n_mels=self.n_mels)

    def to_dict(self) -> dict:
        return {
            "n_mels": self.n_mels,
            "channels": self.channels,
            "embedding_dim": self.embedding_dim,
            "seed": self.seed,
        }


# Generator/victim variants for transfer experiments.
NAMED_CONFIGS = {
    "cfgA": EncoderConfig(),
    "cfgB": EncoderConfig(channels=96),
    "cfgC": EncoderConfig(embedding_dim=128),
    "cfgD": EncoderConfig(n_mels=48),
}


def named_config(name: str, seed: int = 0) -> EncoderConfig:
    if name not in NAMED_CONFIGS:
        raise EncoderError(f"unknown encoder config {name!r} (choose from {', '.join(NAMED_CONFIGS)})")
    return replace(NAMED_CONFIGS[name], seed=seed)


@dataclass
class EncoderParams:
    config: EncoderConfig
    kernels: List[torch.Tensor]     # (C_out, C_in, kernel) per layer
    biases: List[torch.Tensor]      # (C_out,) per layer
    projection: torch.Tensor        # (E, 2C)
    aam_head: torch.Tensor          # (S, E), unit rows
    trained_epochs: int = 0

    @property
    def n_speakers(self) -> int:
        return int(self.aam_head.shape[0])

    def tensors(self) -> List[torch.Tensor]:
        """All parameter tensors in model-file order."""
        out: List[torch.Tensor] = []
        for k, b in zip(self.kernels, self.biases):
            out.extend((k, b))
        out.extend((self.projection, self.aam_head))
        return out

    @classmethod
    def from_tensors(cls, config: EncoderConfig, tensors: Sequence[torch.Tensor], trained_epochs: int = 0) -> "EncoderParams":
        n = len(LAYERS)
        return cls(
            config=config,
            kernels=list(tensors[0:2 * n:2]),
            biases=list(tensors[1:2 * n:2]),
            projection=tensors[2 * n],
            aam_head=tensors[2 * n + 1],
            trained_epochs=trained_epochs,
        )

    def same_as(self, other: "EncoderParams") -> bool:
        """Bit-identical parameters and metadata."""
        if self.config != other.config or self.trained_epochs != other.trained_epochs:
            return False
        mine, theirs = self.tensors(), other.tensors()
        return len(mine) == len(theirs) and all(
            a.shape == b.shape and torch.equal(a, b) for a, b in zip(mine, theirs)
        )


@dataclass(frozen=True)
class Embedding:
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if abs(float(np.linalg.norm(values)) - 1.0) > 1e-6:
            raise EncoderError("embedding is not l2-normalized")
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return int(self.values.size)


def _float32_grid(t: torch.Tensor) -> torch.Tensor:
    return t.to(torch.float32).to(DTYPE)


def _layer_shapes(config: EncoderConfig) -> List[Tuple[int, int, int]]:
    shapes = []
    in_ch = config.n_mels
    for kernel, _ in LAYERS:
        shapes.append((config.channels, in_ch, kernel))
        in_ch = config.channels
    return shapes


def init_params(config: EncoderConfig, n_speakers: int) -> EncoderParams:
    """Deterministic given ``config.seed``: uniform +-1/sqrt(fan_in) weights, zero biases."""
    if n_speakers < 1:
        raise EncoderError(f"need at least one speaker, got {n_speakers}")
    g = torch.Generator().manual_seed(int(config.seed))

    def uniform(shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return _float32_grid((torch.rand(shape, generator=g, dtype=torch.float32) * 2.0 - 1.0) * bound)

    kernels, biases = [], []
    for shape in _layer_shapes(config):
        kernels.append(uniform(shape, shape[1] * shape[2]))
        biases.append(torch.zeros(shape[0], dtype=DTYPE))
    projection = uniform((config.embedding_dim, 2 * config.channels), 2 * config.channels)
    head = torch.randn((n_speakers, config.embedding_dim), generator=g, dtype=torch.float32).to(DTYPE)
    return EncoderParams(
        config=config,
        kernels=kernels,
        biases=biases,
        projection=projection,
        aam_head=_float32_grid(F.normalize(head, dim=-1)),
    )


def embed(params: EncoderParams, features: torch.Tensor) -> torch.Tensor:
    """Tensor core of forward: ``(..., frames, mels) -> (..., E)``."""
    if features.shape[-1] != params.config.n_mels:
        raise EncoderError(f"features have {features.shape[-1]} bins, encoder expects {params.config.n_mels}")
    if features.shape[-2] < MIN_FRAMES:
        raise EncoderError(f"need at least {MIN_FRAMES} frames, got {features.shape[-2]}")

    batch_shape = features.shape[:-2]
    x = features.reshape((-1,) + tuple(features.shape[-2:])).transpose(1, 2)
    for (kernel, dilation), w, b in zip(LAYERS, params.kernels, params.biases):
        x = F.relu(F.conv1d(x, w, b, padding=(kernel - 1) * dilation // 2, dilation=dilation))

    mean = x.mean(dim=-1)
    std = torch.sqrt(x.var(dim=-1, unbiased=False).clamp_min(STD_FLOOR))
    e = torch.cat([mean, std], dim=-1) @ params.projection.T
    return F.normalize(e, dim=-1).reshape(tuple(batch_shape) + (params.config.embedding_dim,))


def forward(params: EncoderParams, features: Union[FeatureMap, torch.Tensor]):
    """Embedding of a feature map (``Embedding``) or of a feature tensor (tensor)."""
    if isinstance(features, FeatureMap):
        with torch.no_grad():
            return Embedding(embed(params, features.values).numpy())
    return embed(params, features)


def _check_margin(margin: float, scale: float) -> None:
    if not 0.0 <= margin < math.pi / 2:
        raise EncoderError(f"margin must lie in [0, pi/2), got {margin}")
    if scale <= 0:
        raise EncoderError(f"scale must be positive, got {scale}")


def aam_loss(
    params: EncoderParams,
    embedding: Union[Embedding, torch.Tensor],
    label: Union[int, Sequence[int], torch.Tensor],
    margin: float = DEFAULT_MARGIN,
    scale: float = DEFAULT_SCALE,
    reduction: str = "mean",
):
    """Additive angular margin softmax loss.

    Target logit ``scale * cos(theta_y + margin)``, other logits ``scale * cos(theta_c)``,
    loss ``-log softmax`` at the target. An ``Embedding`` with an int label gives a
    float; tensors give a tensor reduced per ``reduction`` ("mean", "sum", "none").
    """
    _check_margin(margin, scale)
    single = isinstance(embedding, Embedding)
    e = torch.from_numpy(embedding.values) if single else embedding
    e = e.reshape(-1, e.shape[-1])
    labels = torch.as_tensor(label, dtype=torch.long).reshape(-1)
    if labels.numel() != e.shape[0]:
        raise EncoderError(f"{labels.numel()} labels for {e.shape[0]} embeddings")
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= params.n_speakers):
        raise EncoderError(f"label out of range for {params.n_speakers} speakers")

    cos = e @ params.aam_head.T
    cos_y = cos.gather(1, labels[:, None])
    sin_y = torch.sqrt((1.0 - cos_y ** 2).clamp_min(1e-12))
    target = cos_y * math.cos(margin) - sin_y * math.sin(margin)
    logits = scale * cos.scatter(1, labels[:, None], target)
    losses = F.cross_entropy(logits, labels, reduction="none")

    if single:
        return float(losses.detach()[0])
    if reduction == "none":
        return losses
    return losses.sum() if reduction == "sum" else losses.mean()


def _sgd_step(
    params: EncoderParams,
    features: torch.Tensor,
    labels: torch.Tensor,
    learning_rate: float,
    margin: float,
    scale: float,
) -> Tuple[EncoderParams, float]:
    leaves = [t.detach().clone().requires_grad_(True) for t in params.tensors()]
    trial = EncoderParams.from_tensors(params.config, leaves, params.trained_epochs)
    loss = aam_loss(trial, embed(trial, features), labels, margin, scale)
    if not torch.isfinite(loss):
        raise TrainingDivergedError(f"training diverged: loss is {float(loss)}")
    grads = torch.autograd.grad(loss, leaves)
    if not all(torch.isfinite(g).all() for g in grads):
        raise TrainingDivergedError("training diverged: non-finite gradient")

    with torch.no_grad():
        updated = [_float32_grid(t - learning_rate * g) for t, g in zip(leaves, grads)]
        updated[-1] = _float32_grid(F.normalize(updated[-1], dim=-1))
    return EncoderParams.from_tensors(params.config, updated, params.trained_epochs), float(loss.detach())


def train_step(
    params: EncoderParams,
    batch: Sequence[Tuple[Union[FeatureMap, torch.Tensor], int]],
    learning_rate: float = DEFAULT_LEARNING_RATE,
    margin: float = DEFAULT_MARGIN,
    scale: float = DEFAULT_SCALE,
) -> Tuple[EncoderParams, float]:
    """One gradient-descent update on the mean AAM loss of ``batch``."""
    if not batch:
        raise EncoderError("empty training batch")
    feats = torch.stack([f.values if isinstance(f, FeatureMap) else f for f, _ in batch]).detach()
    labels = torch.tensor([int(label) for _, label in batch], dtype=torch.long)
    return _sgd_step(params, feats, labels, learning_rate, margin, scale)


def load_features(
    manifest: DatasetManifest,
    feature_config: FeatureConfig,
    patch_length: int = DEFAULT_PATCH_LENGTH,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Fixed-patch log-mel features for every manifest entry: ``(N, M, F)``, labels ``(N,)``."""
    patches = [
        read_patch(manifest.resolve(e), patch_length, rate=feature_config.rate).samples
        for e in manifest.entries
    ]
    with torch.no_grad():
        feats = log_mel(torch.from_numpy(np.stack(patches)).to(DTYPE), feature_config)
    return feats, torch.tensor(manifest.labels, dtype=torch.long)


EpochCallback = Callable[[int, EncoderParams, float], None]


@dataclass
class TrainingHistory:
    epoch_losses: List[float] = field(default_factory=list)


def train(
    manifest: DatasetManifest,
    config: EncoderConfig,
    epochs: int = DEFAULT_EPOCHS,
    learning_rate: float = DEFAULT_LEARNING_RATE,
    margin: float = DEFAULT_MARGIN,
    scale: float = DEFAULT_SCALE,
    patch_length: int = DEFAULT_PATCH_LENGTH,
    batch_size: int = DEFAULT_BATCH_SIZE,
    on_epoch: Optional[EpochCallback] = None,
    history: Optional[TrainingHistory] = None,
) -> EncoderParams:
    """Mini-batch gradient descent over shuffled fixed-patch features.

    The shuffle order derives from ``config.seed``; ``on_epoch(epoch, params, mean_loss)``
    runs after every epoch.
    """
    if len(manifest) == 0:
        raise EncoderError("cannot train on an empty manifest")
    if epochs < 0 or batch_size < 1:
        raise EncoderError(f"invalid schedule: epochs={epochs}, batch_size={batch_size}")
    _check_margin(margin, scale)

    params = init_params(config, max(manifest.labels) + 1)
    if epochs == 0:
        return params

    feats, labels = load_features(manifest, config.feature_config(), patch_length)
    n = int(labels.numel())
    rng = np.random.default_rng(int(config.seed))
    logger.info("training %s on %d clips, %d speakers, %d epochs", config, n, params.n_speakers, epochs)

    for epoch in range(1, epochs + 1):
        order = torch.from_numpy(rng.permutation(n))
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            params, loss = _sgd_step(params, feats[idx], labels[idx], learning_rate, margin, scale)
            total += loss * int(idx.numel())
        params = replace(params, trained_epochs=epoch)
        mean_loss = total / n
        logger.info("epoch %d/%d: mean AAM loss %.4f", epoch, epochs, mean_loss)
        if history is not None:
            history.epoch_losses.append(mean_loss)
        if on_epoch is not None:
            on_epoch(epoch, params, mean_loss)
    return params


# --- model file ---

def save_params(path: Union[str, Path], params: EncoderParams) -> Path:
    """Write the versioned little-endian ``HSPK`` model file."""
    path = Path(path)
    c = params.config
    header = _HEADER.pack(
        MODEL_MAGIC,
        MODEL_VERSION,
        c.n_mels,
        c.channels,
        c.embedding_dim,
        c.seed & 0xFFFFFFFF,
        c.seed >> 32,
        params.n_speakers,
        params.trained_epochs,
    )
    body = b"".join(t.detach().to(torch.float32).numpy().astype("<f4").tobytes() for t in params.tensors())
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(header + body)
    except OSError as e:
        raise ModelFormatError(f"cannot write model {path}: {e}") from e
    return path


def _tensor_shapes(config: EncoderConfig, n_speakers: int) -> List[Tuple[int, ...]]:
    shapes: List[Tuple[int, ...]] = []
    for shape in _layer_shapes(config):
        shapes.extend((shape, (shape[0],)))
    shapes.extend(((config.embedding_dim, 2 * config.channels), (n_speakers, config.embedding_dim)))
    return shapes


def load_params(path: Union[str, Path]) -> EncoderParams:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise ModelFormatError(f"cannot read model {path}: {e}") from e
    if len(data) < _HEADER.size:
        raise ModelFormatError(f"{path}: truncated model header")

    magic, version, n_mels, channels, emb, seed_lo, seed_hi, n_speakers, epochs = _HEADER.unpack_from(data)
    if magic != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: not a model file (magic {magic!r})")
    if version != MODEL_VERSION:
        raise ModelFormatError(f"{path}: unsupported model format version {version}")

    config = EncoderConfig(n_mels=n_mels, channels=channels, embedding_dim=emb, seed=seed_lo | (seed_hi << 32))
    shapes = _tensor_shapes(config, n_speakers)
    expected = _HEADER.size + 4 * sum(int(np.prod(s)) for s in shapes)
    if len(data) != expected:
        raise ModelFormatError(f"{path}: expected {expected} bytes, found {len(data)}")

    tensors, offset = [], _HEADER.size
    for shape in shapes:
        count = int(np.prod(shape))
        values = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
        tensors.append(torch.from_numpy(values.astype(np.float64).reshape(shape)))
        offset += 4 * count
    return EncoderParams.from_tensors(config, tensors, trained_epochs=epochs)
