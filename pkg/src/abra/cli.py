"""Command-line driver: ``abra gen | train | eval``.

Settings resolve as flag > config file > built-in default.  The config file
is INI text with optional ``[data]``, ``[train]``, ``[loss]`` and ``[eval]``
sections whose keys are the long flag names (dashes or underscores).

Exit codes: 0 success, 2 bad input (invalid spec, missing file, checkpoint
mismatch), 3 training aborted on divergence.
"""
from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import data as D
from . import nn
from .losses import LossConfig
from .rng import substream
from .train import METHODS, TrainConfig, TrainedModel, TrainingAborted, train

log = logging.getLogger("abra")

EXIT_OK, EXIT_INPUT, EXIT_ABORT = 0, 2, 3

_SPEC = D.PlateSpec()
_TRAIN = TrainConfig()
_LOSS = LossConfig()

# flag dest -> (section, default, type)
GEN_KEYS = {
    "plates": ("data", _SPEC.num_plates, int),
    "per_plate": ("data", _SPEC.images_per_plate, int),
    "classes": ("data", _SPEC.num_classes, int),
    "channels": ("data", _SPEC.channels, int),
    "size": ("data", _SPEC.image_size, int),
    "tau": ("data", _SPEC.shift_severity, float),
    "noise": ("data", _SPEC.noise_level, float),
    "jitter": ("data", _SPEC.class_jitter, float),
    "train_plates": ("data", _SPEC.num_train, int),
    "val_plates": ("data", _SPEC.num_val, int),
    "seed": ("data", 0, int),
}
TRAIN_KEYS = {
    "method": ("train", "abra", str),
    "epochs": ("train", _TRAIN.epochs, int),
    "batch_size": ("train", _TRAIN.batch_size, int),
    "lr": ("train", _TRAIN.lr, float),
    "warmup_frac": ("train", _TRAIN.warmup_frac, float),
    "weight_decay": ("train", _TRAIN.weight_decay, float),
    "sites": ("train", "last", str),
    "ascent_steps": ("train", _TRAIN.ascent_steps, int),
    "ascent_lr": ("train", "schedule", str),
    "seed": ("train", _TRAIN.seed, int),
    "profile": ("train", _TRAIN.profile, str),
    "augment": ("train", _TRAIN.augment, "bool"),
    "standardize": ("train", _TRAIN.standardize, "bool"),
    "blocks": ("train", ",".join(map(str, _TRAIN.blocks)), str),
    "lam": ("loss", "method", str),
    "margin": ("loss", _LOSS.margin, float),
    "scale": ("loss", _LOSS.scale, float),
    "js_weight": ("loss", "method", str),
}
# config keys that follow the flag name rather than the dest
FLAG_NAMES = {"lam": "lambda"}
EVAL_KEYS = {
    "mode": ("eval", "default", str),
    "sweep": ("eval", "", str),
    "repeats": ("eval", 10, int),
    "diagnostics": ("eval", "", str),
    "seed": ("eval", 0, int),
}


class CLIError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


def _parse_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise CLIError(f"not a boolean: {v!r}")


def _convert(name, value, kind):
    try:
        if kind == "bool":
            return _parse_bool(value)
        return kind(value)
    except (TypeError, ValueError):
        raise CLIError(f"{name}: cannot parse {value!r}") from None


def resolve(args: argparse.Namespace, keys: dict) -> dict:
    """Merge flags over the config file over defaults."""
    cp = configparser.ConfigParser()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise CLIError(f"config file not found: {path}")
        cp.read(path)
    out = {}
    for name, (section, default, kind) in keys.items():
        flag = getattr(args, name, None)
        if flag is not None:
            out[name] = _convert(name, flag, kind)
            continue
        if cp.has_section(section):
            flag_name = FLAG_NAMES.get(name, name)
            for key in (flag_name, flag_name.replace("_", "-"), name):
                if cp.has_option(section, key):
                    out[name] = _convert(name, cp.get(section, key), kind)
                    break
        out.setdefault(name, default)
    return out


def git_blob_sha1(path) -> str:
    """Content hash as ``git hash-object`` computes it."""
    raw = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(raw) + raw).hexdigest()


def _stamp() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _write_manifest(path: Path, command: str, config: dict, args, **extra) -> None:
    manifest = {
        "command": command,
        "config_path": str(args.config) if getattr(args, "config", None) else None,
        "config": config,
        "created": _stamp(),
        **extra,
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def limit_threads() -> None:
    """Cap BLAS and numba threads at ``ABRA_NUM_THREADS`` when set."""
    raw = os.environ.get("ABRA_NUM_THREADS")
    if not raw:
        return
    try:
        n = max(1, int(raw))
    except ValueError:
        raise CLIError(f"ABRA_NUM_THREADS must be an integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    threadpool_limits(n)
    try:
        import numba

        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    except ImportError:
        pass


# --------------------------------------------------------------------------
# gen
# --------------------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = resolve(args, GEN_KEYS)
    spec = D.PlateSpec(
        num_plates=cfg["plates"],
        images_per_plate=cfg["per_plate"],
        num_classes=cfg["classes"],
        channels=cfg["channels"],
        image_size=cfg["size"],
        shift_severity=cfg["tau"],
        noise_level=cfg["noise"],
        class_jitter=cfg["jitter"],
        num_train=cfg["train_plates"],
        num_val=cfg["val_plates"],
    )
    try:
        spec.validate()
    except ValueError as exc:
        raise CLIError(f"invalid spec: {exc}") from None
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    ds = D.generate(spec, cfg["seed"])
    D.write_dataset(ds, out)
    manifest = Path(str(out) + ".manifest.json")
    _write_manifest(
        manifest, "gen", {"spec": spec.to_dict(), "seed": cfg["seed"]}, args,
        dataset=str(out), dataset_sha1=git_blob_sha1(out), truth=str(D.truth_path(out)),
    )
    print(f"wrote {out} ({len(ds.plates)} plates, {len(ds)} images)")
    return EXIT_OK


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------

def _int_list(name: str, text: str) -> tuple[int, ...]:
    try:
        return tuple(int(s) for s in str(text).split(",") if s.strip())
    except ValueError:
        raise CLIError(f"{name}: expected comma-separated integers, got {text!r}") from None


def build_train_config(cfg: dict) -> TrainConfig:
    method = cfg["method"]
    if method not in METHODS:
        raise CLIError(f"method must be one of {', '.join(METHODS)}, got {method!r}")
    base = TrainConfig.for_method(method).loss
    lam = base.lam if cfg["lam"] == "method" else _convert("lam", cfg["lam"], float)
    js = base.js_weight if cfg["js_weight"] == "method" else _convert("js_weight", cfg["js_weight"], float)
    try:
        loss = LossConfig(lam=lam, margin=cfg["margin"], scale=cfg["scale"], js_weight=js)
        return TrainConfig(
            method=method,
            epochs=cfg["epochs"],
            batch_size=cfg["batch_size"],
            lr=cfg["lr"],
            warmup_frac=cfg["warmup_frac"],
            weight_decay=cfg["weight_decay"],
            loss=loss,
            sites=None if cfg["sites"] == "last" else _int_list("sites", cfg["sites"]),
            ascent_steps=cfg["ascent_steps"],
            ascent_lr=None if cfg["ascent_lr"] == "schedule" else _convert("ascent_lr", cfg["ascent_lr"], float),
            seed=cfg["seed"],
            profile=cfg["profile"],
            augment=cfg["augment"],
            standardize=cfg["standardize"],
            blocks=_int_list("blocks", cfg["blocks"]),
        )
    except ValueError as exc:
        raise CLIError(f"invalid training config: {exc}") from None


def _load_dataset(path) -> D.PlateDataset:
    path = Path(path)
    if not path.exists():
        raise CLIError(f"dataset not found: {path}")
    try:
        return D.read_dataset(path)
    except (ValueError, OSError) as exc:
        raise CLIError(f"cannot read dataset {path}: {exc}") from None


def _classes_of(ds: D.PlateDataset) -> int:
    return ds.spec.num_classes


def cmd_train(args) -> int:
    cfg = resolve(args, TRAIN_KEYS)
    tcfg = build_train_config(cfg)
    ds = _load_dataset(args.data)
    tcfg.loss.num_classes = _classes_of(ds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.json"
    try:
        model, report = train(ds, tcfg)
    except TrainingAborted as exc:
        (out / "abort.json").write_text(json.dumps({"error": str(exc), **exc.diagnostics}, indent=2, default=float) + "\n")
        print(f"training aborted: {exc}; diagnostics in {out / 'abort.json'}", file=sys.stderr)
        return EXIT_ABORT
    except ValueError as exc:
        raise CLIError(str(exc)) from None
    model.save(out / "model.ckpt")
    header = f"# manifest: {manifest}\n"
    (out / "report.txt").write_text(header + report.to_text())
    (out / "losses.csv").write_text(report.loss_csv())
    _write_manifest(
        manifest, "train", tcfg.to_dict(), args,
        dataset=str(args.data), dataset_sha1=git_blob_sha1(args.data), output_dir=str(out),
        artifacts=["model.ckpt", "report.txt", "losses.csv"],
    )
    if report.evals:
        print(f"{tcfg.method} seed {tcfg.seed}: {report.mode} accuracy {report.total_accuracy:.4f}")
    return EXIT_OK


# --------------------------------------------------------------------------
# eval
# --------------------------------------------------------------------------

DIAGNOSTICS = ("bnshift", "embeddings")


def cmd_eval(args) -> int:
    from .evaluate import MODES, batch_size_sweep, bn_shift_diagnostics, evaluate, export_embeddings, sweep_table

    cfg = resolve(args, EVAL_KEYS)
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise CLIError(f"checkpoint not found: {ckpt}")
    try:
        model = TrainedModel.load(ckpt)
    except nn.CheckpointError as exc:
        raise CLIError(str(exc)) from None
    ds = _load_dataset(args.data)
    mode = model.default_mode if cfg["mode"] == "default" else cfg["mode"]
    if mode not in MODES:
        raise CLIError(f"mode must be one of {', '.join(MODES)}, got {mode!r}")
    diags = [d.strip() for d in cfg["diagnostics"].split(",") if d.strip()]
    for d in diags:
        if d not in DIAGNOSTICS:
            raise CLIError(f"unknown diagnostic {d!r}; choose from {', '.join(DIAGNOSTICS)}")
    plates = ds.split("test") + ds.split("val")
    if not plates:
        raise CLIError("dataset has no test or val plates")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.json"

    res = evaluate(model, plates, mode)
    lines = [
        f"# manifest: {manifest}",
        "[eval]",
        f"checkpoint: {ckpt}",
        f"method: {model.method}",
        f"mode: {mode}",
        f"total: {res.total:.6f}",
        "plate_id  count  accuracy",
    ]
    lines += [f"{pid:8d}  {res.counts[pid]:5d}  {acc:.6f}" for pid, acc in sorted(res.per_plate.items())]
    if cfg["sweep"]:
        sizes = _int_list("sweep", cfg["sweep"])
        rng = substream(cfg["seed"], "sampler", "sweep")
        try:
            rows = batch_size_sweep(model, plates, sizes, cfg["repeats"], mode, rng)
        except ValueError as exc:
            raise CLIError(str(exc)) from None
        lines += ["", "[sweep]", sweep_table(rows).rstrip("\n")]
    if "bnshift" in diags:
        source = ds.split("train")
        lines += ["", "[bnshift]", "plate_id  layer  kl  mmd"]
        for p in plates:
            for row in bn_shift_diagnostics(model, source or None, p):
                lines.append(f"{p.plate_id:8d}  {row['layer']:5d}  {row['kl']:.10g}  {row['mmd']:.10g}")
    if "embeddings" in diags:
        n = export_embeddings(model, ds.plates, out / "embeddings.csv", mode)
        lines += ["", "[embeddings]", f"path: {out / 'embeddings.csv'}", f"rows: {n}"]
    text = "\n".join(lines) + "\n"
    (out / "eval.txt").write_text(text)
    _write_manifest(
        manifest, "eval", {**cfg, "mode": mode}, args,
        checkpoint=str(ckpt), dataset=str(args.data), dataset_sha1=git_blob_sha1(args.data), output_dir=str(out),
    )
    sys.stdout.write(text)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _add(p, keys: dict, flags: dict, helps: dict) -> None:
    for name, (_, default, kind) in keys.items():
        opt = flags.get(name, "--" + name.replace("_", "-"))
        opts = opt if isinstance(opt, tuple) else (opt,)
        t = None if kind == "bool" else kind
        p.add_argument(*opts, dest=name, type=t, default=None, help=f"{helps.get(name, name)} (default: {default})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="abra", description="Plate-shift benchmark: generate, train, evaluate.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic plate dataset")
    g.add_argument("-o", "--output", required=True, help="dataset file to write (PLT1)")
    g.add_argument("--config", help="INI config file; flags override it")
    _add(g, GEN_KEYS, {}, {
        "plates": "number of plates", "per_plate": "images per plate", "classes": "number of classes",
        "channels": "image channels", "size": "image side length", "tau": "shift severity",
        "noise": "pixel noise std", "jitter": "within-class jitter std",
        "train_plates": "leading plates used for training", "val_plates": "plates after those used for validation",
        "seed": "dataset seed",
    })

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--data", required=True, help="PLT1 dataset file")
    t.add_argument("--out", default="runs/train", help="output directory (default: runs/train)")
    t.add_argument("--config", help="INI config file; flags override it")
    _add(t, TRAIN_KEYS, {"lam": "--lambda"}, {
        "method": "one of " + ", ".join(METHODS), "epochs": "training epochs", "batch_size": "plate mini-batch size",
        "lr": "peak learning rate", "warmup_frac": "fraction of iterations with linear warmup",
        "weight_decay": "L2 decay on network weights", "sites": "comma-separated block indices or 'last'",
        "ascent_steps": "gradient-ascent steps per iteration",
        "ascent_lr": "ascent step size, or 'schedule' to follow the learning rate",
        "seed": "training seed", "profile": "float32 or float64", "augment": "random flips/rotations (true/false)",
        "standardize": "per-image self-standardization (true/false)", "blocks": "conv block widths",
        "lam": "CE weight; ArcFace gets 1 - lambda ('method' picks the method default)",
        "margin": "ArcFace angular margin", "scale": "ArcFace scale",
        "js_weight": "JS consistency weight ('method' picks the method default)",
    })

    e = sub.add_parser("eval", help="evaluate a checkpoint on test/val plates")
    e.add_argument("--checkpoint", required=True, help="model checkpoint")
    e.add_argument("--data", required=True, help="PLT1 dataset file")
    e.add_argument("--out", default="runs/eval", help="output directory (default: runs/eval)")
    e.add_argument("--config", help="INI config file; flags override it")
    _add(e, EVAL_KEYS, {}, {
        "mode": "plain, tta, or 'default' (tta for adabn, plain otherwise)",
        "sweep": "comma-separated chunk sizes for a batch-size sweep",
        "repeats": "resamplings per sweep size",
        "diagnostics": "comma-separated: " + ", ".join(DIAGNOSTICS),
        "seed": "seed for sweep resampling",
    })
    return parser


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        limit_threads()
        return COMMANDS[args.command](args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
