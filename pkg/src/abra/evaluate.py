"""Inference (plain and test-time-adapted), batch-size sweeps, BN-statistics
shift diagnostics and embedding export."""
from __future__ import annotations

import contextlib
import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import stats as S
from . import tensor as T
from .data import Plate
from .train import EvalResult, TrainedModel

MODES = ("plain", "tta")


@dataclass
class Inference:
    predictions: np.ndarray
    embeddings: np.ndarray


@contextlib.contextmanager
def preserved_bn(model: TrainedModel):
    """Restore the backbone's running statistics on exit."""
    state = model.backbone.get_bn_state()
    try:
        yield
    finally:
        model.backbone.set_bn_state(state)


def _chunks(n: int, size: int | None) -> list[slice]:
    if size is None or size >= n:
        return [slice(0, n)]
    bounds = list(range(0, n, size)) + [n]
    out = [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]
    if len(out) > 1 and out[-1].stop - out[-1].start < 2:
        tail = out.pop()
        out[-1] = slice(out[-1].start, tail.stop)
    return out


def infer(model: TrainedModel, images: np.ndarray, mode: str = "plain", chunk: int | None = None) -> Inference:
    """Predict a plate.  ``plain`` uses the frozen running statistics;
    ``tta`` recalibrates BN on each chunk (default: the whole plate) before
    predicting it.  Uncertainty sites are never active here."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if len(images) == 0:
        raise ValueError("cannot infer on an empty plate")
    bb = model.backbone
    preds, embs = [], []
    with T.profile(model.config.profile), T.no_grad(), preserved_bn(model):
        x_all = model.preprocess(images)
        for sl in _chunks(len(x_all), chunk):
            x = x_all[sl]
            if mode == "tta":
                S.adabn_recalibrate(bb, x)
            e, logits = bb.forward(x, bn_mode="running")
            preds.append(logits.data.argmax(axis=1))
            embs.append(e.data)
    return Inference(np.concatenate(preds), np.concatenate(embs))


def evaluate(model: TrainedModel, plates: Sequence[Plate], mode: str = "plain", chunk: int | None = None) -> EvalResult:
    per_plate, counts = {}, {}
    for p in plates:
        res = infer(model, p.images, mode, chunk)
        per_plate[p.plate_id] = float((res.predictions == p.labels).mean())
        counts[p.plate_id] = len(p)
    return EvalResult(mode, per_plate, counts)


@dataclass
class SweepRow:
    size: int
    mode: str
    accuracies: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies))


def batch_size_sweep(
    model: TrainedModel,
    plates: Sequence[Plate],
    sizes: Sequence[int],
    repeats: int = 10,
    mode: str = "tta",
    rng: np.random.Generator | None = None,
) -> list[SweepRow]:
    """Accuracy over ``repeats`` random re-chunkings of each plate per chunk size.

    In ``tta`` mode every chunk is recalibrated independently, so small
    chunks see noisy statistics.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    smallest = min(len(p) for p in plates)
    rows = []
    for size in sizes:
        if size > smallest:
            raise ValueError(f"chunk size {size} exceeds plate size {smallest}")
        accs = []
        for _ in range(repeats):
            correct = total = 0
            for p in plates:
                perm = rng.permutation(len(p))
                res = infer(model, p.images[perm], mode, chunk=size)
                correct += int((res.predictions == p.labels[perm]).sum())
                total += len(p)
            accs.append(correct / total)
        rows.append(SweepRow(int(size), mode, accs))
    return rows


def sweep_table(rows: Sequence[SweepRow]) -> str:
    lines = ["size  mode   mean      std       repeats"]
    for r in rows:
        lines.append(f"{r.size:4d}  {r.mode:5s}  {r.mean:.6f}  {r.std:.6f}  {len(r.accuracies)}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# BN-statistics shift diagnostics
# --------------------------------------------------------------------------

def gaussian_kl(mu_p, var_p, mu_q, var_q, eps: float = S.EPS) -> np.ndarray:
    """Elementwise KL(N(mu_p, var_p) ‖ N(mu_q, var_q)), variances floored at ``eps``."""
    var_p = np.maximum(np.asarray(var_p, dtype=np.float64), eps)
    var_q = np.maximum(np.asarray(var_q, dtype=np.float64), eps)
    d = np.asarray(mu_p, dtype=np.float64) - np.asarray(mu_q, dtype=np.float64)
    return 0.5 * (np.log(var_q / var_p) + (var_p + d * d) / var_q - 1.0)


def median_bandwidth(x: np.ndarray, y: np.ndarray) -> float:
    z = np.concatenate([x, y])
    d = np.sqrt(((z[:, None, :] - z[None, :, :]) ** 2).sum(-1))
    iu = np.triu_indices(len(z), k=1)
    med = float(np.median(d[iu])) if iu[0].size else 0.0
    return med if med > 0 else 1.0


def mmd2_unbiased(x: np.ndarray, y: np.ndarray, bandwidth: float | None = None) -> float:
    """Unbiased squared MMD with a Gaussian kernel exp(-‖a−b‖²/(2h²)).

    Equal-size samples use the paired U-statistic, which also drops i = j
    from the cross term, so identical samples give exactly 0.  Unequal sizes
    use the two-sample form with the full cross mean.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    m, n = len(x), len(y)
    if m < 2 or n < 2:
        raise ValueError("unbiased MMD needs at least two points per sample")
    h = bandwidth if bandwidth is not None else median_bandwidth(x, y)

    def k(a, b):
        d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
        return np.exp(-d2 / (2 * h * h))

    kxx, kyy, kxy = k(x, x), k(y, y), k(x, y)
    sxx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    if m == n:
        sxy = (kxy.sum() - np.trace(kxy)) / (m * (m - 1))
    else:
        sxy = kxy.mean()
    return float(sxx + syy - 2 * sxy)


def _plate_stats(model: TrainedModel, images: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    with T.profile(model.config.profile), preserved_bn(model):
        layers = S.adabn_recalibrate(model.backbone, model.preprocess(images))
    return [(s.mu.data.astype(np.float64), s.sigma2.data.astype(np.float64)) for s in layers]


def bn_shift_diagnostics(
    model: TrainedModel,
    source_plates: Sequence[Plate] | None,
    target_plate: Plate | np.ndarray,
) -> list[dict]:
    """Per BN layer: mean-over-channels Gaussian KL(source ‖ target) and
    unbiased MMD² between the per-channel (μ, σ) point sets.

    Source statistics are recomputed on the pooled ``source_plates``; with
    ``None`` the model's running statistics are used.
    """
    if source_plates:
        src = _plate_stats(model, np.concatenate([p.images for p in source_plates]))
    else:
        src = [(m.astype(np.float64), v.astype(np.float64)) for m, v in model.backbone.get_bn_state()]
    tgt_images = target_plate.images if isinstance(target_plate, Plate) else target_plate
    tgt = _plate_stats(model, tgt_images)
    out = []
    for layer, ((ms, vs), (mt, vt)) in enumerate(zip(src, tgt)):
        kl = float(gaussian_kl(ms, vs, mt, vt).mean())
        ps = np.stack([ms, np.sqrt(np.maximum(vs, S.EPS))], axis=1)
        pt = np.stack([mt, np.sqrt(np.maximum(vt, S.EPS))], axis=1)
        out.append({"layer": layer, "kl": kl, "mmd": mmd2_unbiased(ps, pt)})
    return out


# --------------------------------------------------------------------------
# embedding export
# --------------------------------------------------------------------------

def export_embeddings(model: TrainedModel, plates: Sequence[Plate], path, mode: str = "plain") -> int:
    """Write one CSV row per sample: sample_id, plate_id, label, split, features."""
    path = Path(path)
    rows = 0
    dim = None
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for p in plates:
            res = infer(model, p.images, mode)
            if dim is None:
                dim = res.embeddings.shape[1]
                w.writerow(["sample_id", "plate_id", "label", "split"] + [f"f{i}" for i in range(dim)])
            for i, (label, emb) in enumerate(zip(p.labels, res.embeddings)):
                w.writerow([f"{p.plate_id}-{i}", p.plate_id, int(label), p.split] + [repr(float(v)) for v in emb])
                rows += 1
    return rows
