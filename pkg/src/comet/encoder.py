"""Projection head + dilated residual convolution trunk + output map.

Shapes follow the [batch, time, channel] convention throughout.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import kernel
from .augment import apply_mask
from .errors import DatasetFormatError, DimensionError, ParameterError
from .kernel import Tensor
from .rng import stream

CHECKPOINT_MAGIC = b"CMET"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    proj_hidden: int = 128
    proj_out: int = 64
    blocks: int = 10
    conv_hidden: int = 64
    kernel: int = 3
    out_dim: int = 320

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if int(v) != v or v < 1:
                raise ParameterError(f"encoder.{f.name} must be a positive int, got {v!r}")
        if self.kernel != 3:
            raise ParameterError("only kernel size 3 is supported")
        if self.proj_out != self.conv_hidden:
            # the residual trunk adds its input unprojected
            raise ParameterError("proj_out must equal conv_hidden")

    def dilation(self, i: int) -> int:
        return 2**i

    def to_dict(self) -> dict:
        return asdict(self)


class EncoderParams:
    """Named parameter tensors, kept in declaration (checkpoint) order."""

    def __init__(self, config: EncoderConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    @staticmethod
    def layout(cfg: EncoderConfig) -> list[tuple[str, tuple[int, ...]]]:
        shapes = [
            ("proj.0.w", (cfg.input_dim, cfg.proj_hidden)),
            ("proj.0.b", (cfg.proj_hidden,)),
            ("proj.1.w", (cfg.proj_hidden, cfg.proj_out)),
            ("proj.1.b", (cfg.proj_out,)),
        ]
        h = cfg.conv_hidden
        for i in range(cfg.blocks):
            for j in (1, 2):
                shapes.append((f"block.{i}.conv{j}.w", (h, h, cfg.kernel)))
                shapes.append((f"block.{i}.conv{j}.b", (h,)))
        shapes.append(("head.w", (h, cfg.out_dim)))
        shapes.append(("head.b", (cfg.out_dim,)))
        return shapes

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def copy(self, dtype=None, requires_grad: bool | None = None) -> "EncoderParams":
        out = {}
        for k, t in self.tensors.items():
            data = t.data.astype(dtype) if dtype is not None else t.data.copy()
            rg = t.requires_grad if requires_grad is None else requires_grad
            out[k] = Tensor(data, requires_grad=rg, name=k)
        return EncoderParams(self.config, out)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def equals(self, other: "EncoderParams") -> bool:
        return self.names() == other.names() and all(
            np.array_equal(a.data, b.data) for a, b in zip(self, other)
        )


def init_params(config: EncoderConfig, seed: int, dtype=np.float64) -> EncoderParams:
    """Weights ~ U(-s, s) with s = sqrt(1/fan_in); biases zero."""
    rng = stream(seed, "encoder-init")
    tensors = {}
    for name, shape in EncoderParams.layout(config):
        if name.endswith(".b"):
            data = np.zeros(shape)
        else:
            fan_in = shape[0] if len(shape) == 2 else shape[1] * shape[2]
            s = np.sqrt(1.0 / fan_in)
            data = rng.uniform(-s, s, size=shape)
        tensors[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    return EncoderParams(config, tensors)


def zero_params(config: EncoderConfig, dtype=np.float64) -> EncoderParams:
    tensors = {
        name: Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, name=name)
        for name, shape in EncoderParams.layout(config)
    }
    return EncoderParams(config, tensors)


def project(x: Tensor, params: EncoderParams) -> Tensor:
    z = kernel.linear(x, params["proj.0.w"], params["proj.0.b"])
    return kernel.linear(kernel.gelu(z), params["proj.1.w"], params["proj.1.b"])


def conv_block(z: Tensor, params: EncoderParams, i: int) -> Tensor:
    d = params.config.dilation(i)
    h = kernel.gelu(z)
    h = kernel.conv1d_dilated(h, params[f"block.{i}.conv1.w"], params[f"block.{i}.conv1.b"], d)
    h = kernel.gelu(h)
    return kernel.conv1d_dilated(h, params[f"block.{i}.conv2.w"], params[f"block.{i}.conv2.b"], d)


def encode(x, params: EncoderParams, mask: np.ndarray | None = None) -> Tensor:
    """[B,T,F] -> [B,T,out_dim]; ``mask`` (if any) hides cells of the projection."""
    x = kernel.as_tensor(x, dtype=params.dtype)
    if x.ndim != 3 or x.shape[2] != params.config.input_dim:
        raise DimensionError(
            f"encoder expects [B,T,{params.config.input_dim}] input, got {x.shape}"
        )
    if x.data.dtype != params.dtype:
        x = Tensor(x.data.astype(params.dtype))
    z = project(x, params)
    if mask is not None:
        z = apply_mask(z, mask)
    for i in range(params.config.blocks):
        z = z + conv_block(z, params, i)
    return kernel.linear(z, params["head.w"], params["head.b"])


def sample_repr(H: Tensor) -> Tensor:
    """Per-sample representation: max over time, [B,T,K] -> [B,K]."""
    return kernel.max_pool_time(H)


# ---------------------------------------------------------------------------
# checkpoint file: magic, version, config ints, then float32 LE arrays

_CFG_KEYS = ("input_dim", "proj_hidden", "proj_out", "blocks", "conv_hidden", "kernel", "out_dim")
_HEADER = struct.Struct("<4sI" + "I" * len(_CFG_KEYS))


def save_checkpoint(params: EncoderParams, path) -> None:
    cfg = params.config
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, *(getattr(cfg, k) for k in _CFG_KEYS))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header)
        for t in params:
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path, dtype=np.float64) -> EncoderParams:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise DatasetFormatError(f"{path}: checkpoint shorter than its {_HEADER.size}-byte header")
    magic, version, *ints = _HEADER.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise DatasetFormatError(f"{path}: unsupported checkpoint version {version}")
    cfg = EncoderConfig(**dict(zip(_CFG_KEYS, ints)))
    layout = EncoderParams.layout(cfg)
    expected = _HEADER.size + 4 * sum(int(np.prod(s)) for _, s in layout)
    if len(blob) != expected:
        raise DatasetFormatError(f"{path}: expected {expected} bytes, found {len(blob)}")
    offset = _HEADER.size
    tensors = {}
    for name, shape in layout:
        n = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(shape)
        tensors[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
        offset += 4 * n
    return EncoderParams(cfg, tensors)
