"""The three classifier families with pluggable normalization, plus checkpoints.

* ``resnet_cnn`` - 1x1 sensor projection, then temporal conv blocks whose
  later pairs are wrapped in residual connections, time-average, linear head.
* ``stft_cnn`` - per-sensor STFT magnitudes fed to a shared small 2D ResNet,
  pooled per sensor, projected, then the head.
* ``cnn_transformer`` - the conv front-end followed by a pre-norm transformer
  encoder over time.

Every variant can standardize each input window per channel (instance norm)
before the backbone.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .autodiff import Tensor, TapRegistry, no_grad, nn, ops
from .autodiff.spectral import stft, stft_shape
from .data import N_CHANNELS, N_CLASSES, N_TIMES
from .errors import ConfigurationError, LoadError

ARCHS = ("resnet_cnn", "stft_cnn", "cnn_transformer")
INPUT_NORMS = ("none", "instance")
BLOCK_NORMS = ("none", "layer", "batch", "group")
NONLINEARITIES = ("relu",)


@dataclass
class ModelSpec:
    arch: str = "resnet_cnn"
    hidden_dim: int = 32
    input_norm: str = "none"
    block_norm: str = "none"
    transformer_layers: int = 4
    transformer_heads: int = 8
    stft_n_fft: int = 25
    stft_hop: int = 5
    n_classes: int = N_CLASSES
    nonlinearity: str = "relu"
    n_channels: int = N_CHANNELS
    n_times: int = N_TIMES
    n_blocks: int = 5
    kernel_size: int = 7
    groups: int = 8
    frontend_blocks: int = 2
    stft_width: int = 4
    ff_mult: int = 2

    def validate(self) -> "ModelSpec":
        if self.arch not in ARCHS:
            raise ConfigurationError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.input_norm not in INPUT_NORMS:
            raise ConfigurationError(f"input_norm must be one of {INPUT_NORMS}, got {self.input_norm!r}")
        if self.block_norm not in BLOCK_NORMS:
            raise ConfigurationError(f"block_norm must be one of {BLOCK_NORMS}, got {self.block_norm!r}")
        if self.nonlinearity not in NONLINEARITIES:
            raise ConfigurationError(f"nonlinearity must be one of {NONLINEARITIES}")
        for name in ("hidden_dim", "n_classes", "n_channels", "n_times", "n_blocks", "kernel_size", "groups"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.arch == "cnn_transformer":
            if self.transformer_heads < 1 or self.hidden_dim % self.transformer_heads:
                raise ConfigurationError(
                    f"hidden_dim {self.hidden_dim} must be divisible by transformer_heads {self.transformer_heads}"
                )
        if self.arch == "stft_cnn":
            stft_shape(self.n_times, self.stft_n_fft, self.stft_hop)
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d).validate()


class ConvBlock(nn.Module):
    """conv -> group norm -> ReLU [-> extra norm]."""

    def __init__(self, in_ch, out_ch, kernel, rng, groups=8, extra_norm="none", dims=1):
        super().__init__()
        conv_cls = nn.Conv1d if dims == 1 else nn.Conv2d
        self.conv = conv_cls(in_ch, out_ch, kernel, rng)
        self.norm = nn.GroupNorm(math.gcd(groups, out_ch), out_ch)
        self.extra = nn.make_norm(extra_norm, out_ch, groups, axis=1)

    def forward(self, x):
        y = self.norm(self.conv(x)).relu()
        return self.extra(y) if self.extra is not None else y


class Residual(nn.Module):
    def __init__(self, *blocks):
        super().__init__()
        self.body = nn.ModuleList(blocks)

    def forward(self, x):
        y = x
        for block in self.body:
            y = block(y)
        return x + y


def _temporal_stack(spec: ModelSpec, rng, n_blocks: int, residual: bool) -> nn.ModuleList:
    D, k = spec.hidden_dim, spec.kernel_size
    layers = nn.ModuleList([ConvBlock(spec.n_channels, D, 1, rng, spec.groups, spec.block_norm)])
    remaining = n_blocks - 1
    while remaining > 0:
        if residual and remaining >= 2:
            layers.append(Residual(*(ConvBlock(D, D, k, rng, spec.groups, spec.block_norm) for _ in range(2))))
            remaining -= 2
        else:
            layers.append(ConvBlock(D, D, k, rng, spec.groups, spec.block_norm))
            remaining -= 1
    return layers


class ResNetCNN(nn.Module):
    def __init__(self, spec: ModelSpec, rng):
        super().__init__()
        self.blocks = _temporal_stack(spec, rng, spec.n_blocks, residual=True)

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return ops.global_avg_pool(x)


class STFTCNN(nn.Module):
    def __init__(self, spec: ModelSpec, rng):
        super().__init__()
        self.spec = spec
        w = spec.stft_width
        self.stem = ConvBlock(1, w, 3, rng, spec.groups, spec.block_norm, dims=2)
        self.res = Residual(
            ConvBlock(w, w, 3, rng, spec.groups, spec.block_norm, dims=2),
            ConvBlock(w, w, 3, rng, spec.groups, spec.block_norm, dims=2),
        )
        self.proj = nn.Linear(spec.n_channels * w, spec.hidden_dim, rng, gain=math.sqrt(2.0))

    def forward(self, x):
        B, C, _ = x.shape
        tf = stft(x, self.spec.stft_n_fft, self.spec.stft_hop)  # [B, C, F, M]
        F, M = tf.shape[-2:]
        y = self.res(self.stem(tf.reshape(B * C, 1, F, M)))
        pooled = ops.global_avg_pool(y).reshape(B, C * self.spec.stft_width)
        return self.proj(pooled).relu()


class CNNTransformer(nn.Module):
    def __init__(self, spec: ModelSpec, rng):
        super().__init__()
        self.frontend = _temporal_stack(spec, rng, spec.frontend_blocks + 1, residual=False)
        self.encoder = nn.TransformerEncoder(
            spec.hidden_dim, spec.transformer_layers, spec.transformer_heads, rng, spec.ff_mult
        )
        self._pos = ops.positional_encoding(spec.n_times, spec.hidden_dim)

    def forward(self, x):
        for block in self.frontend:
            x = block(x)
        seq = x.transpose(0, 2, 1)  # [B, T, D]
        seq = seq + self._pos[: seq.shape[1]].astype(seq.dtype)
        return self.encoder(seq).mean(axis=1)


_BACKBONES = {"resnet_cnn": ResNetCNN, "stft_cnn": STFTCNN, "cnn_transformer": CNNTransformer}


class PhonemeClassifier(nn.Module):
    def __init__(self, spec: ModelSpec, seed: int = 0):
        super().__init__()
        spec.validate()
        self.spec = spec
        rng = np.random.default_rng(seed)
        self.input_norm = nn.InstanceNorm() if spec.input_norm == "instance" else None
        self.backbone = _BACKBONES[spec.arch](spec, rng)
        self.head = nn.Linear(spec.hidden_dim, spec.n_classes, rng)

    def forward(self, x):
        if self.input_norm is not None:
            x = self.input_norm(x)
        return self.head(self.backbone(x))

    def sublayer_names(self):
        # containers are never called, so they never produce a tap
        return [
            name for name, m in self.named_modules()
            if name and m.has_parameters() and not isinstance(m, nn.ModuleList)
        ]


def build(spec: ModelSpec, seed: int = 0) -> PhonemeClassifier:
    model = PhonemeClassifier(spec, seed)
    model.assign_names()
    return model


def forward(
    model: PhonemeClassifier, batch, mode: str = "eval", taps: Optional[TapRegistry] = None
) -> Tensor:
    """Run a batch ``[B, C, T]`` through the model.

    In eval mode without taps no graph is recorded. With taps, every named
    sublayer's output is captured and the graph is kept so callers can
    backpropagate from the logits.
    """
    if mode not in ("train", "eval"):
        raise ConfigurationError(f"mode must be 'train' or 'eval', got {mode!r}")
    model.train(mode == "train")
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=model.head.weight.dtype))
    if taps is not None:
        with taps.active():
            return model(x)
    if mode == "eval":
        with no_grad():
            return model(x)
    return model(x)


def predict(logits: Union[Tensor, np.ndarray]) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest class id."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(data, axis=1)


def predict_split(model: PhonemeClassifier, batches) -> np.ndarray:
    return np.concatenate([predict(forward(model, b, "eval")) for b in batches]) if batches else np.zeros(0, int)


# -- checkpoints ------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"MEGCKPT\0"
CHECKPOINT_VERSION = 1


def save(model: PhonemeClassifier, path: Union[str, Path]) -> None:
    """Versioned binary: header, JSON spec, named little-endian fp32 blobs, CRC32 trailer."""
    spec_bytes = json.dumps(model.spec.to_dict(), sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(spec_bytes)), spec_bytes]
    state = model.state_dict()
    parts.append(struct.pack("<I", len(state)))
    for name, value in state.items():
        encoded = name.encode("utf-8")
        arr = np.ascontiguousarray(value, dtype="<f4")
        parts.append(struct.pack("<HB", len(encoded), arr.ndim) + encoded)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load(path: Union[str, Path]) -> PhonemeClassifier:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < len(CHECKPOINT_MAGIC) + 12 or not blob.startswith(CHECKPOINT_MAGIC):
        raise LoadError(f"{path} is not a checkpoint file")
    version, spec_len = struct.unpack_from("<II", blob, len(CHECKPOINT_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise LoadError(f"checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise LoadError(f"checkpoint {path} is corrupted (checksum mismatch)")
    try:
        pos = len(CHECKPOINT_MAGIC) + 8
        spec = ModelSpec.from_dict(json.loads(body[pos : pos + spec_len].decode("utf-8")))
        pos += spec_len
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        state = {}
        for _ in range(count):
            name_len, ndim = struct.unpack_from("<HB", body, pos)
            pos += 3
            name = body[pos : pos + name_len].decode("utf-8")
            pos += name_len
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            state[name] = np.frombuffer(body, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * n
        if pos != len(body):
            raise LoadError(f"checkpoint {path} has {len(body) - pos} trailing bytes")
        model = build(spec)
        model.load_state_dict(state)
    except LoadError:
        raise
    except (struct.error, ValueError, KeyError, UnicodeDecodeError, ConfigurationError) as exc:
        raise LoadError(f"checkpoint {path} is malformed: {exc}") from exc
    return model
