"""Plate-structured synthetic images with per-plate channel gain/offset shifts,
plate-consistent mini-batch sampling, and the PLT1 on-disk format."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy.ndimage import gaussian_filter

from .rng import substream

MAGIC = b"PLT1"
SPLITS = ("train", "val", "test")


@dataclass
class PlateSpec:
    num_plates: int = 8
    images_per_plate: int = 200
    num_classes: int = 10
    channels: int = 3
    image_size: int = 16
    shift_severity: float = 0.5
    noise_level: float = 0.3
    class_jitter: float = 0.6
    num_train: int = 6
    num_val: int = 0

    def validate(self) -> None:
        def need(cond, fld, msg):
            if not cond:
                raise ValueError(f"{fld}: {msg}")

        need(self.shift_severity >= 0, "shift_severity", f"must be >= 0, got {self.shift_severity}")
        need(self.noise_level >= 0, "noise_level", f"must be >= 0, got {self.noise_level}")
        need(self.class_jitter >= 0, "class_jitter", f"must be >= 0, got {self.class_jitter}")
        need(self.num_plates >= 2, "num_plates", f"must be >= 2, got {self.num_plates}")
        need(self.num_classes >= 2, "num_classes", f"must be >= 2, got {self.num_classes}")
        need(self.channels >= 1, "channels", f"must be >= 1, got {self.channels}")
        need(self.image_size >= 2, "image_size", f"must be >= 2, got {self.image_size}")
        need(
            self.images_per_plate >= self.num_classes and self.images_per_plate % self.num_classes == 0,
            "images_per_plate",
            f"must be a positive multiple of num_classes ({self.num_classes}), got {self.images_per_plate}",
        )
        need(self.num_train >= 1, "num_train", f"must be >= 1, got {self.num_train}")
        need(self.num_val >= 0, "num_val", f"must be >= 0, got {self.num_val}")
        need(
            self.num_train + self.num_val < self.num_plates,
            "num_train",
            f"train + val plates ({self.num_train + self.num_val}) must leave at least one test plate of {self.num_plates}",
        )

    def split_of(self, plate_index: int) -> str:
        if plate_index < self.num_train:
            return "train"
        if plate_index < self.num_train + self.num_val:
            return "val"
        return "test"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Plate:
    plate_id: int
    images: np.ndarray  # (n, C, H, W) float32
    labels: np.ndarray  # (n,) int64
    split: str = "train"
    gain: np.ndarray | None = None  # planted per-channel gain
    offset: np.ndarray | None = None  # planted per-channel offset

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class PlateDataset:
    spec: PlateSpec
    plates: list[Plate]
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [p.plate_id for p in self.plates]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate plate ids: {ids}")

    def split(self, name: str) -> list[Plate]:
        return [p for p in self.plates if p.split == name]

    def plate(self, plate_id: int) -> Plate:
        for p in self.plates:
            if p.plate_id == plate_id:
                return p
        raise KeyError(plate_id)

    def __len__(self) -> int:
        return sum(len(p) for p in self.plates)


def _smooth_field(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    """Zero-mean, unit-std (per channel) spatially smooth random field."""
    f = gaussian_filter(rng.standard_normal(shape), sigma=sigma, axes=(-2, -1), mode="wrap")
    f -= f.mean(axis=(-2, -1), keepdims=True)
    f /= f.std(axis=(-2, -1), keepdims=True) + 1e-12
    return f


def generate(spec: PlateSpec, seed: int) -> PlateDataset:
    """Sample = gain_b ⊙ (prototype_y + class jitter) + offset_b + pixel noise.

    Per plate b and channel c: gain ~ N(1, τ²), offset ~ N(0, τ²).
    Prototypes are zero-mean smooth patterns, so plate channel means track
    the planted offsets.
    """
    spec.validate()
    c, s, o = spec.channels, spec.image_size, spec.num_classes
    proto_rng = substream(seed, "data", "prototypes")
    prototypes = _smooth_field(proto_rng, (o, c, s, s), sigma=1.5)
    tau = spec.shift_severity
    plates = []
    per_class = spec.images_per_plate // o
    for b in range(spec.num_plates):
        rng = substream(seed, "data", "plate", b)
        gain = 1.0 + tau * rng.standard_normal(c)
        offset = tau * rng.standard_normal(c)
        labels = np.repeat(np.arange(o), per_class)
        labels = labels[rng.permutation(len(labels))]
        jitter = spec.class_jitter * _smooth_field(rng, (len(labels), c, s, s), sigma=1.5)
        clean = prototypes[labels] + jitter
        noise = spec.noise_level * rng.standard_normal(clean.shape)
        images = gain[None, :, None, None] * clean + offset[None, :, None, None] + noise
        plates.append(
            Plate(
                plate_id=b,
                images=images.astype(np.float32),
                labels=labels.astype(np.int64),
                split=spec.split_of(b),
                gain=gain,
                offset=offset,
            )
        )
    return PlateDataset(spec=spec, plates=plates, seed=seed)


# --------------------------------------------------------------------------
# sampling and preprocessing
# --------------------------------------------------------------------------

@dataclass
class Batch:
    plate_id: int
    indices: np.ndarray
    images: np.ndarray
    labels: np.ndarray


def plate_batches(plates: list[Plate], batch_size: int, rng: np.random.Generator) -> Iterator[Batch]:
    """One epoch of plate-consistent mini-batches.

    Every batch is drawn from a single plate, uniformly without replacement
    inside the plate.  The order in which (plate, batch) pairs are visited is
    shuffled each epoch.  A trailing remainder smaller than ``batch_size`` is
    emitted as its own batch when it holds at least two samples and is
    otherwise folded into the preceding batch, so an epoch covers every
    sample exactly once.
    """
    if not plates:
        raise ValueError("no plates to sample from")
    smallest = min(len(p) for p in plates)
    if batch_size > smallest:
        raise ValueError(f"batch size {batch_size} exceeds smallest plate size {smallest}")
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    work = []
    for p in plates:
        perm = rng.permutation(len(p))
        chunks = [perm[i:i + batch_size] for i in range(0, len(perm), batch_size)]
        if len(chunks) > 1 and len(chunks[-1]) < 2:
            tail = chunks.pop()
            chunks[-1] = np.concatenate([chunks[-1], tail])
        work.extend((p, idx) for idx in chunks)
    for k in rng.permutation(len(work)):
        p, idx = work[k]
        yield Batch(p.plate_id, idx, p.images[idx], p.labels[idx])


class PlateSampler:
    """Reusable epoch iterator over plate-consistent batches."""

    def __init__(self, plates: list[Plate], batch_size: int, rng: np.random.Generator):
        smallest = min(len(p) for p in plates) if plates else 0
        if not plates or batch_size > smallest:
            raise ValueError(f"batch size {batch_size} exceeds smallest plate size {smallest}")
        self.plates = plates
        self.batch_size = batch_size
        self.rng = rng

    def epoch(self) -> Iterator[Batch]:
        return plate_batches(self.plates, self.batch_size, self.rng)

    def __iter__(self):
        return self.epoch()


def plate_sampler(ds: PlateDataset, batch_size: int, rng: np.random.Generator, split: str = "train") -> Iterator[Batch]:
    return plate_batches(ds.split(split), batch_size, rng)


def self_standardize(x: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Per image and channel: subtract the spatial mean, divide by the spatial std."""
    x = np.asarray(x)
    mu = x.mean(axis=(-2, -1), keepdims=True)
    sd = x.std(axis=(-2, -1), keepdims=True)
    return (x - mu) / np.maximum(sd, eps)


def augment(images: np.ndarray, rng: np.random.Generator, p: float = 0.5) -> np.ndarray:
    """Random horizontal/vertical flips and 90° rotation, each with probability ``p``."""
    out = images.copy()
    n = len(out)
    hflip = rng.random(n) < p
    vflip = rng.random(n) < p
    rot = rng.random(n) < p
    out[hflip] = out[hflip][..., ::-1]
    out[vflip] = out[vflip][..., ::-1, :]
    if out.shape[-1] == out.shape[-2]:
        out[rot] = np.rot90(out[rot], k=1, axes=(-2, -1))
    return out


# --------------------------------------------------------------------------
# PLT1 file + ground-truth sidecar
# --------------------------------------------------------------------------

def truth_path(path) -> Path:
    return Path(str(path) + ".truth.json")


def write_dataset(ds: PlateDataset, path) -> None:
    """Write the PLT1 binary plus a human-readable ground-truth sidecar."""
    spec = ds.spec
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<5I", len(ds.plates), spec.num_classes, spec.channels, spec.image_size, spec.image_size))
        for p in ds.plates:
            fh.write(struct.pack("<2I", p.plate_id, len(p)))
            fh.write(np.asarray(p.labels, dtype="<u2").tobytes())
            fh.write(np.ascontiguousarray(p.images, dtype="<f4").tobytes())
    sidecar = {
        "spec": spec.to_dict(),
        "seed": ds.seed,
        "plates": [
            {
                "plate_id": p.plate_id,
                "split": p.split,
                "count": len(p),
                "gain": None if p.gain is None else [float(v) for v in p.gain],
                "offset": None if p.offset is None else [float(v) for v in p.offset],
            }
            for p in ds.plates
        ],
    }
    truth_path(path).write_text(json.dumps(sidecar, indent=2) + "\n")


def read_dataset(path) -> PlateDataset:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a PLT1 dataset file")
    k, o, c, h, w = struct.unpack_from("<5I", raw, 4)
    off = 4 + 20
    sidecar_file = truth_path(path)
    sidecar = json.loads(sidecar_file.read_text()) if sidecar_file.exists() else None
    info = {e["plate_id"]: e for e in sidecar["plates"]} if sidecar else {}
    plates = []
    for i in range(k):
        pid, count = struct.unpack_from("<2I", raw, off)
        off += 8
        labels = np.frombuffer(raw, dtype="<u2", count=count, offset=off).astype(np.int64)
        off += 2 * count
        n = count * c * h * w
        images = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(count, c, h, w).astype(np.float32)
        off += 4 * n
        e = info.get(pid, {})
        plates.append(
            Plate(
                plate_id=pid,
                images=images,
                labels=labels,
                split=e.get("split", "train"),
                gain=None if e.get("gain") is None else np.asarray(e["gain"]),
                offset=None if e.get("offset") is None else np.asarray(e["offset"]),
            )
        )
    if sidecar:
        spec = PlateSpec(**sidecar["spec"])
        seed = sidecar.get("seed", 0)
    else:
        spec = PlateSpec(
            num_plates=k, images_per_plate=len(plates[0]), num_classes=o, channels=c, image_size=h,
            num_train=max(1, k - 1),
        )
        seed = 0
    return PlateDataset(spec=spec, plates=plates, seed=seed)
