"""Desk-scale convolutional backbone with named insertion sites, plus the
self-describing checkpoint format."""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from . import stats as S
from . import tensor as T
from .tensor import ShapeError, Tensor

Hook = Callable[[int, Tensor], Tensor]

BN_MODES = ("train", "batch", "running", "recal")


@dataclass
class BlockSpec:
    out_channels: int
    downsample: bool = True


@dataclass
class BackboneConfig:
    in_channels: int = 3
    blocks: list[BlockSpec] = field(
        default_factory=lambda: [BlockSpec(16), BlockSpec(32), BlockSpec(64)]
    )
    feature_dim: int = 64
    num_classes: int = 10
    bn_momentum: float = 0.1

    def __post_init__(self):
        self.blocks = [b if isinstance(b, BlockSpec) else BlockSpec(**b) for b in self.blocks]
        if not self.blocks:
            raise ValueError("blocks must be non-empty")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")

    @property
    def num_sites(self) -> int:
        return len(self.blocks)

    def site_channels(self, site_id: int) -> int:
        return self.blocks[site_id].out_channels

    def to_dict(self) -> dict:
        return asdict(self)


def check_sites(cfg: BackboneConfig, sites: Iterable[int]) -> tuple[int, ...]:
    sites = tuple(sorted(set(int(s) for s in sites)))
    for s in sites:
        if not 0 <= s < cfg.num_sites:
            raise ValueError(f"insertion site {s} out of range for {cfg.num_sites} blocks")
    return sites


class BatchNorm2d:
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = S.EPS):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=self.gamma.dtype)
        self.running_var = np.ones(channels, dtype=self.gamma.dtype)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        if mode not in BN_MODES:
            raise ValueError(f"bn mode must be one of {BN_MODES}, got {mode!r}")
        affine = S.AffineParams(self.gamma, self.beta)
        if mode == "running":
            stats = S.BatchStats(T.Tensor(self.running_mean), T.Tensor(self.running_var))
            return S.bn_transform(x, stats, affine, self.eps)
        stats = S.batch_channel_stats(x)
        if mode == "train":
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * stats.mu.data
            self.running_var = (1 - m) * self.running_var + m * stats.sigma2.data
        elif mode == "recal":
            self.running_mean = stats.mu.data.copy()
            self.running_var = stats.sigma2.data.copy()
        return S.bn_transform(x, stats, affine, self.eps)


class Backbone:
    """conv3×3 → BN → ReLU → 2×2 avg-pool per block, global average pool,
    optional projection to ``feature_dim``, then a shared class-weight head.

    The head's weight matrix serves both as the linear classifier
    (``logits = e·Wᵀ + b``) and as the ArcFace class centres.
    """

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator | None = None):
        self.cfg = cfg
        rng = rng if rng is not None else np.random.default_rng(0)
        self.convs: list[Tensor] = []
        self.bns: list[BatchNorm2d] = []
        c_in = cfg.in_channels
        for spec in cfg.blocks:
            fan_in = c_in * 9
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(spec.out_channels, c_in, 3, 3))
            self.convs.append(Tensor(w, requires_grad=True))
            self.bns.append(BatchNorm2d(spec.out_channels, cfg.bn_momentum))
            c_in = spec.out_channels
        self.proj: Tensor | None = None
        if cfg.feature_dim != c_in:
            self.proj = Tensor(rng.normal(0.0, np.sqrt(1.0 / c_in), size=(c_in, cfg.feature_dim)), requires_grad=True)
        d = cfg.feature_dim
        self.head_w = Tensor(rng.normal(0.0, np.sqrt(1.0 / d), size=(cfg.num_classes, d)), requires_grad=True)
        self.head_b = Tensor(np.zeros(cfg.num_classes), requires_grad=True)

    # -- parameter access ------------------------------------------------
    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, (w, bn) in enumerate(zip(self.convs, self.bns)):
            out[f"block{i}.conv.weight"] = w
            out[f"block{i}.bn.gamma"] = bn.gamma
            out[f"block{i}.bn.beta"] = bn.beta
        if self.proj is not None:
            out["proj.weight"] = self.proj
        out["head.weight"] = self.head_w
        out["head.bias"] = self.head_b
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, bn in enumerate(self.bns):
            out[f"block{i}.bn.running_mean"] = bn.running_mean
            out[f"block{i}.bn.running_var"] = bn.running_var
        return out

    def bn_layers(self) -> list[BatchNorm2d]:
        return list(self.bns)

    def get_bn_state(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(bn.running_mean.copy(), bn.running_var.copy()) for bn in self.bns]

    def set_bn_state(self, state) -> None:
        for bn, (m, v) in zip(self.bns, state):
            bn.running_mean = m.copy()
            bn.running_var = v.copy()

    def zero_grad(self) -> None:
        T.zero_grad(self.parameters())

    # -- forward ---------------------------------------------------------
    def features(
        self,
        images,
        active_sites: Iterable[int] = (),
        hook: Hook | None = None,
        bn_mode: str = "running",
    ) -> Tensor:
        if bn_mode not in BN_MODES:
            raise ValueError(f"bn_mode must be one of {BN_MODES}, got {bn_mode!r}")
        x = T.as_tensor(images)
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(
                f"backbone: expected N×{self.cfg.in_channels}×H×W images, got shape {x.shape}"
            )
        active = set(active_sites) if hook is not None else set()
        for i, (w, bn, spec) in enumerate(zip(self.convs, self.bns, self.cfg.blocks)):
            x = T.conv2d(x, w, stride=1, pad=1)
            x = bn(x, bn_mode)
            x = T.relu(x)
            if spec.downsample:
                x = T.avg_pool2d(x, 2)
            if i in active:
                x = hook(i, x)
        e = T.global_avg_pool(x)
        if self.proj is not None:
            e = T.matmul(e, self.proj)
        return e

    def logits(self, embedding: Tensor) -> Tensor:
        return T.matmul(embedding, T.transpose(self.head_w)) + self.head_b

    def forward(
        self,
        images,
        active_sites: Iterable[int] = (),
        hook: Hook | None = None,
        bn_mode: str = "running",
    ) -> tuple[Tensor, Tensor]:
        """Return ``(embedding, logits)``; without a hook this is the plain network."""
        e = self.features(images, active_sites, hook, bn_mode)
        return e, self.logits(e)

    def angles(self, embedding: Tensor) -> Tensor:
        return arcface_angles(embedding, self.head_w)

    def predict(self, images, bn_mode: str = "running") -> np.ndarray:
        with T.no_grad():
            _, logits = self.forward(images, bn_mode=bn_mode)
        return logits.data.argmax(axis=1)


def arcface_angles(embedding, class_weights) -> Tensor:
    """Cosine between every embedding row and every class-weight row."""
    e, w = T.as_tensor(embedding), T.as_tensor(class_weights)
    for name, t in (("embedding", e), ("class_weights", w)):
        if t.ndim != 2:
            raise ShapeError(f"arcface_angles: {name} must be rank 2, got {t.shape}")
        norms = np.sqrt((t.data * t.data).sum(axis=1))
        bad = np.flatnonzero(norms == 0)
        if bad.size:
            raise ValueError(f"arcface_angles: {name} row {int(bad[0])} has zero norm")
    return T.cosine_rows(e, w)


# --------------------------------------------------------------------------
# checkpoint file
# --------------------------------------------------------------------------

MAGIC = b"ABRA"
VERSION = 1
_DTYPE_CODES = {np.dtype("<f8"): 8, np.dtype("<f4"): 4}
_CODE_DTYPES = {8: np.dtype("<f8"), 4: np.dtype("<f4")}


class CheckpointError(ValueError):
    pass


def write_checkpoint(path, config: Mapping, tensors: Mapping[str, np.ndarray]) -> None:
    """Header {magic, version u32, config JSON}, then named tensors."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    cfg_bytes = json.dumps(config, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg_bytes)))
    buf.write(cfg_bytes)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            dt = np.dtype("<f8")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", _DTYPE_CODES[dt]))
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an ABRA checkpoint (bad magic)")
    off = 4

    def take(fmt):
        nonlocal off
        vals = struct.unpack_from(fmt, raw, off)
        off += struct.calcsize(fmt)
        return vals

    (version,) = take("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version} != supported version {VERSION}")
    (clen,) = take("<I")
    config = json.loads(raw[off:off + clen].decode("utf-8"))
    off += clen
    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = take("<I")
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        (code,) = take("<B")
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I") if ndim else ()
        dt = _CODE_DTYPES[code]
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype=dt, count=n, offset=off).reshape(shape).copy()
        off += n * dt.itemsize
        tensors[name] = arr
    return config, tensors


def model_state(model: Backbone) -> dict[str, np.ndarray]:
    state = {k: v.data for k, v in model.named_parameters().items()}
    state.update(model.named_buffers())
    return state


def load_model_state(model: Backbone, state: Mapping[str, np.ndarray]) -> None:
    params = model.named_parameters()
    for name, p in params.items():
        if name not in state:
            raise CheckpointError(f"checkpoint is missing parameter {name!r}")
        if state[name].shape != p.shape:
            raise CheckpointError(f"parameter {name!r}: shape {state[name].shape} != expected {p.shape}")
        p.data = np.ascontiguousarray(state[name], dtype=p.dtype)
    for i, bn in enumerate(model.bns):
        bn.running_mean = np.asarray(state[f"block{i}.bn.running_mean"], dtype=bn.gamma.dtype).copy()
        bn.running_var = np.asarray(state[f"block{i}.bn.running_var"], dtype=bn.gamma.dtype).copy()
