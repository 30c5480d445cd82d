"""Two-phase adversarial training and the ERM / AdaBN / AdvStyle baselines."""
from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import data as D
from . import losses as L
from . import nn
from . import stats as S
from . import tensor as T
from . import uncertainty as U
from .rng import substream
from .tensor import Tensor

log = logging.getLogger(__name__)

METHODS = ("erm", "adabn", "advstyle", "abra")


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class TrainConfig:
    method: str = "abra"
    epochs: int = 20
    batch_size: int = 50
    lr: float = 1e-3
    warmup_frac: float = 0.1
    warmup_start: float = 0.01
    weight_decay: float = 1e-5
    loss: L.LossConfig = field(default_factory=L.LossConfig)
    sites: tuple[int, ...] | None = None  # None: last block only
    ascent_steps: int = 1
    ascent_lr: float | None = None  # None: follow the descent schedule
    seed: int = 0
    profile: str = "float32"
    augment: bool = True
    standardize: bool = False
    blocks: tuple[int, ...] = (16, 32, 64)
    feature_dim: int | None = None  # None: width of the last block
    freeze_k: bool = False  # test hook: keep K at zero
    duplicate_batch: bool = False  # test hook: ERM on {X, X}
    max_bad_iters: int = 3

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = L.LossConfig(**self.loss)
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.ascent_steps < 1:
            raise ValueError(f"ascent_steps must be >= 1, got {self.ascent_steps}")
        if self.sites is not None:
            self.sites = tuple(int(s) for s in self.sites)
        self.blocks = tuple(int(b) for b in self.blocks)

    @classmethod
    def for_method(cls, method: str, **kw) -> "TrainConfig":
        """Method defaults: ABRA mixes CE and ArcFace (λ = 0.5); the baselines
        train with plain cross-entropy (λ = 1)."""
        loss = kw.pop("loss", None)
        if loss is None:
            lam = 0.5 if method == "abra" else 1.0
            loss = L.LossConfig(lam=lam, js_weight=1.0 if method == "abra" else 0.0)
        return cls(method=method, loss=loss, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["sites"] = None if self.sites is None else list(self.sites)
        d["blocks"] = list(self.blocks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["loss"] = L.LossConfig(**d["loss"])
        return cls(**d)


class Adam:
    """Adam with L2 weight decay folded into the gradient; parameters listed
    in ``no_decay`` are updated without decay."""

    def __init__(self, params, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8, no_decay=()):
        self.params = list(params)
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        skip = {id(p) for p in no_decay}
        self.decay = [id(p) not in skip for p in self.params]
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            if self.decay[i] and self.weight_decay:
                g = g + self.weight_decay * p.data
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            p.data = (p.data - lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)).astype(p.dtype)

    def zero_grad(self) -> None:
        T.zero_grad(self.params)


def lr_at(cfg: TrainConfig, iteration: int, iters_per_epoch: int) -> float:
    """Linear warmup from ``warmup_start·lr`` to ``lr`` over the first
    ``warmup_frac`` of training, then flat."""
    warm = math.ceil(cfg.warmup_frac * cfg.epochs * iters_per_epoch)
    if warm <= 0 or iteration >= warm:
        return cfg.lr
    frac = iteration / warm
    return cfg.lr * (cfg.warmup_start + (1 - cfg.warmup_start) * frac)


# --------------------------------------------------------------------------
# trained-model bundle
# --------------------------------------------------------------------------

@dataclass
class TrainedModel:
    backbone: nn.Backbone
    config: TrainConfig
    sites: list[U.UncertaintySite] = field(default_factory=list)
    style: dict[int, tuple[Tensor, Tensor]] = field(default_factory=dict)

    @property
    def method(self) -> str:
        return self.config.method

    @property
    def default_mode(self) -> str:
        return "tta" if self.method == "adabn" else "plain"

    def preprocess(self, images: np.ndarray) -> np.ndarray:
        x = D.self_standardize(images) if self.config.standardize else images
        return np.asarray(x, dtype=self.backbone.head_w.dtype)

    def tensors(self) -> dict[str, np.ndarray]:
        out = nn.model_state(self.backbone)
        for s in self.sites:
            out[f"abra.site{s.site_id}.k_mu"] = s.k_mu.data
            out[f"abra.site{s.site_id}.k_sigma"] = s.k_sigma.data
        for sid, (smu, ssig) in self.style.items():
            out[f"advstyle.site{sid}.sigma_mu"] = smu.data
            out[f"advstyle.site{sid}.sigma_sigma"] = ssig.data
        return out

    def header(self) -> dict:
        return {"method": self.method, "backbone": self.backbone.cfg.to_dict(), "train": self.config.to_dict()}

    def save(self, path) -> None:
        nn.write_checkpoint(path, self.header(), self.tensors())

    @classmethod
    def load(cls, path) -> "TrainedModel":
        header, tensors = nn.read_checkpoint(path)
        try:
            cfg = TrainConfig.from_dict(header["train"])
            bcfg = nn.BackboneConfig(**header["backbone"])
        except (KeyError, TypeError) as exc:
            raise nn.CheckpointError(f"{path}: malformed checkpoint header ({exc})") from None
        with T.profile(cfg.profile):
            backbone = nn.Backbone(bcfg)
            nn.load_model_state(backbone, tensors)
            sites, style = [], {}
            for sid in range(bcfg.num_sites):
                key = f"abra.site{sid}.k_mu"
                if key in tensors:
                    site = U.UncertaintySite.zeros(sid, bcfg.site_channels(sid))
                    site.k_mu.data = tensors[key].astype(site.k_mu.dtype)
                    site.k_sigma.data = tensors[f"abra.site{sid}.k_sigma"].astype(site.k_mu.dtype)
                    sites.append(site)
                key = f"advstyle.site{sid}.sigma_mu"
                if key in tensors:
                    style[sid] = (
                        Tensor(tensors[key], requires_grad=True),
                        Tensor(tensors[f"advstyle.site{sid}.sigma_sigma"], requires_grad=True),
                    )
        return cls(backbone, cfg, sites, style)


def build_model(cfg: TrainConfig, spec: D.PlateSpec) -> TrainedModel:
    feature_dim = cfg.feature_dim or cfg.blocks[-1]
    bcfg = nn.BackboneConfig(
        in_channels=spec.channels,
        blocks=[nn.BlockSpec(c) for c in cfg.blocks],
        feature_dim=feature_dim,
        num_classes=spec.num_classes,
    )
    if cfg.loss.num_classes != spec.num_classes:
        cfg.loss = dataclasses.replace(cfg.loss, num_classes=spec.num_classes)
    with T.profile(cfg.profile):
        backbone = nn.Backbone(bcfg, substream(cfg.seed, "init"))
        site_ids = nn.check_sites(bcfg, cfg.sites if cfg.sites is not None else (bcfg.num_sites - 1,))
        model = TrainedModel(backbone, cfg)
        if cfg.method == "abra":
            model.sites = [U.UncertaintySite.zeros(s, bcfg.site_channels(s)) for s in site_ids]
        elif cfg.method == "advstyle":
            rows = 2 * cfg.batch_size
            for s in site_ids:
                c = bcfg.site_channels(s)
                model.style[s] = (
                    Tensor(np.zeros((rows, c)), requires_grad=True),
                    Tensor(np.zeros((rows, c)), requires_grad=True),
                )
    return model


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------

@dataclass
class EvalResult:
    mode: str
    per_plate: dict[int, float]
    counts: dict[int, int]

    @property
    def total(self) -> float:
        n = sum(self.counts.values())
        return sum(self.per_plate[k] * self.counts[k] for k in self.per_plate) / n if n else float("nan")


@dataclass
class RunReport:
    method: str
    seed: int
    config: dict
    iterations: int = 0
    epoch_loss: list[float] = field(default_factory=list)
    epoch_adv: list[float] = field(default_factory=list)
    epoch_js: list[float] = field(default_factory=list)
    iter_loss: list[float] = field(default_factory=list)
    evals: dict[str, EvalResult] = field(default_factory=dict)
    events: list[str] = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def mode(self) -> str:
        return "tta" if self.method == "adabn" else "plain"

    @property
    def total_accuracy(self) -> float:
        return self.evals[self.mode].total

    @property
    def per_plate_accuracy(self) -> dict[int, float]:
        return self.evals[self.mode].per_plate

    def to_text(self) -> str:
        lines = [
            "[run]",
            f"method: {self.method}",
            f"seed: {self.seed}",
            f"iterations: {self.iterations}",
            f"wall_time_s: {self.wall_time:.3f}",
            f"primary_mode: {self.mode}",
            "",
            "[config]",
        ]
        lines += _flatten_kv(self.config)
        for mode, ev in self.evals.items():
            lines += ["", f"[accuracy.{mode}]", f"total: {ev.total:.6f}", "plate_id  count  accuracy"]
            lines += [f"{pid:8d}  {ev.counts[pid]:5d}  {acc:.6f}" for pid, acc in sorted(ev.per_plate.items())]
        lines += ["", "[epochs]", "epoch  loss  adv_loss  js"]
        for i, loss in enumerate(self.epoch_loss):
            adv = self.epoch_adv[i] if i < len(self.epoch_adv) else float("nan")
            js = self.epoch_js[i] if i < len(self.epoch_js) else float("nan")
            lines.append(f"{i + 1:5d}  {loss:.10g}  {adv:.10g}  {js:.10g}")
        if self.events:
            lines += ["", "[events]"] + self.events
        return "\n".join(lines) + "\n"

    def loss_csv(self) -> str:
        rows = ["epoch,loss,adv_loss,js"]
        for i, loss in enumerate(self.epoch_loss):
            adv = self.epoch_adv[i] if i < len(self.epoch_adv) else float("nan")
            js = self.epoch_js[i] if i < len(self.epoch_js) else float("nan")
            rows.append(f"{i + 1},{loss!r},{adv!r},{js!r}")
        return "\n".join(rows) + "\n"


def _flatten_kv(d: dict, prefix: str = "") -> list[str]:
    out = []
    for k, v in d.items():
        if isinstance(v, dict):
            out += _flatten_kv(v, f"{prefix}{k}.")
        else:
            out.append(f"{prefix}{k}: {v}")
    return out


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

PhaseCallback = Callable[[str, int, TrainedModel], None]


def _style_hook(model: TrainedModel, n: int):
    def hook(site_id, x):
        smu, ssig = model.style[site_id]
        return S.adain_renormalize(x, T.grl(T.slice_rows(smu, 0, n)), T.grl(T.slice_rows(ssig, 0, n)))

    return hook


def train(
    ds: D.PlateDataset,
    cfg: TrainConfig,
    callback: PhaseCallback | None = None,
    evaluate_after: bool = True,
) -> tuple[TrainedModel, RunReport]:
    """Train one model.  ``callback(phase, iteration, model)`` fires after
    "phase1" and "phase2" of every ABRA iteration and after every "step" of
    the baselines."""
    from .evaluate import evaluate

    if not ds.split("train"):
        raise ValueError("dataset has no train plates")
    t0 = time.perf_counter()
    model = build_model(cfg, ds.spec)
    bb = model.backbone
    theta = bb.parameters()
    style_params = [p for pair in model.style.values() for p in pair]
    opt = Adam(theta + style_params, weight_decay=cfg.weight_decay, no_decay=style_params)
    sampler = D.PlateSampler(ds.split("train"), cfg.batch_size, substream(cfg.seed, "sampler"))
    aug_rng = substream(cfg.seed, "augment")
    noise_rng = substream(cfg.seed, "noise")
    site_ids = [s.site_id for s in model.sites] or sorted(model.style)
    k_params = [p for s in model.sites for p in s.parameters()]
    adv_state = U.AdvOptState(alpha=cfg.ascent_lr if cfg.ascent_lr is not None else cfg.lr, steps=cfg.ascent_steps, seed=cfg.seed)
    report = RunReport(method=cfg.method, seed=cfg.seed, config=cfg.to_dict())

    iters_per_epoch = sum(1 for _ in D.plate_batches(ds.split("train"), cfg.batch_size, np.random.default_rng(0)))
    it = 0
    bad = 0
    with T.profile(cfg.profile):
        for epoch in range(cfg.epochs):
            ep_loss, ep_adv, ep_js = [], [], []
            for batch in sampler.epoch():
                x = batch.images
                if cfg.augment:
                    x = D.augment(x, aug_rng)
                x = model.preprocess(x)
                y = batch.labels
                lr = lr_at(cfg, it, iters_per_epoch)
                opt.zero_grad()

                if cfg.method == "abra":
                    for s in model.sites:
                        U.sample_noise(s, noise_rng)
                    if not cfg.freeze_k:
                        adv_state.alpha = cfg.ascent_lr if cfg.ascent_lr is not None else lr
                        trace = U.adversarial_ascent(model.sites, (x, y), bb, cfg.loss, adv_state)
                        if trace and np.isfinite(trace[0]):
                            ep_adv.append(trace[0])
                    if callback:
                        callback("phase1", it, model)
                    for s in model.sites:
                        U.sample_noise(s, noise_rng)
                    hook = U.make_hook(model.sites)
                    with T.frozen(k_params):
                        e, logits = bb.forward(x, bn_mode="train")
                        e_t, logits_t = bb.forward(x, site_ids, hook, bn_mode="batch")
                        sup, js = L.robust_terms((logits, bb.angles(e)), (logits_t, bb.angles(e_t)), y, cfg.loss)
                        loss = sup + js * cfg.loss.js_weight if cfg.loss.js_weight else sup
                    ep_js.append(float(js.data))
                elif cfg.method == "advstyle":
                    e, logits = bb.forward(x, bn_mode="train")
                    _, logits_t = bb.forward(x, site_ids, _style_hook(model, len(y)), bn_mode="batch")
                    loss = L.cross_entropy(T.concat([logits, logits_t]), np.concatenate([y, y]))
                else:
                    e, logits = bb.forward(x, bn_mode="train")
                    if cfg.duplicate_batch:
                        e2, yy = T.concat([e, e]), np.concatenate([y, y])
                        loss = L.supervised_loss(T.concat([logits, logits]), bb.angles(e2), yy, cfg.loss)
                    else:
                        loss = L.supervised_loss(logits, bb.angles(e), y, cfg.loss)

                value = float(loss.data)
                if not np.isfinite(value):
                    bad += 1
                    msg = f"iteration {it}: non-finite loss {value}, update skipped"
                    report.events.append(msg)
                    log.warning(msg)
                    if bad >= cfg.max_bad_iters:
                        diag = {
                            "iteration": it,
                            "recent_losses": report.iter_loss[-5:] + [value],
                            "k_norm": float(np.sqrt(sum(float((p.data ** 2).sum()) for p in k_params))),
                            "lr": lr,
                        }
                        raise TrainingAborted(f"{bad} consecutive non-finite losses; aborting", diag)
                else:
                    bad = 0
                    T.backward(loss)
                    opt.step(lr)
                opt.zero_grad()
                report.iter_loss.append(value)
                ep_loss.append(value)
                if callback:
                    callback("phase2" if cfg.method == "abra" else "step", it, model)
                it += 1
            report.epoch_loss.append(float(np.mean(ep_loss)))
            report.epoch_adv.append(float(np.mean(ep_adv)) if ep_adv else float("nan"))
            report.epoch_js.append(float(np.mean(ep_js)) if ep_js else float("nan"))
            log.info("epoch %d/%d loss %.4f", epoch + 1, cfg.epochs, report.epoch_loss[-1])
    report.iterations = it
    report.events += adv_state.events
    if evaluate_after:
        eval_plates = ds.split("test") + ds.split("val")
        if eval_plates:
            for mode in ("plain", "tta"):
                report.evals[mode] = evaluate(model, eval_plates, mode)
    report.wall_time = time.perf_counter() - t0
    return model, report
