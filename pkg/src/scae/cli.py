"""Command-line driver: train, sparsify, eval, curve, cost.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import checkpoint
from .codec import evaluate_image
from .config import RunConfig, convert, load_config
from .data import PatchDataset, list_images, load_image, save_image
from .errors import ConfigError, DimensionError, ParseError, ScaeError
from .metrics import memory_report, relative_loss
from .model import Cae
from .optim import eta_for_sparsity, first_descent, project_model, second_descent
from .projections import sparsity

logger = logging.getLogger("scae")

INIT_PREFIX = "init."
MASK_SUFFIX = ".mask"
LOSS_COLUMNS = ("epoch", "entropy", "distortion", "total")
EVAL_COLUMNS = ("name", "bpp_coded", "bpp_est", "psnr", "mssim")
CURVE_COLUMNS = ("knob", "value", "S", "RM", "mem_pct", "bpp", "psnr", "mssim", "relative_loss")
KNOBS = ("eta", "bits", "sparsity")


class UsageError(ScaeError):
    """Bad paths, mismatched checkpoints and similar problems the caller can fix."""


# ---------------------------------------------------------------------------
# helpers


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return repr(x) if math.isfinite(x) else ("inf" if x > 0 else "-inf" if x < 0 else "nan")
    return str(x)


def write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for row in rows:
            wr.writerow([_fmt(v) for v in row])


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def prepare_out(cfg: RunConfig, command: str) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{command}.config").write_text(cfg.to_text())
    return out


def eval_threads() -> int:
    raw = os.environ.get("SCAE_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"SCAE_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"SCAE_THREADS must be a positive integer, got {raw!r}")
    return n


def load_dataset(cfg: RunConfig) -> PatchDataset:
    path = cfg.train_path()
    try:
        paths = list_images(path)
    except FileNotFoundError:
        raise UsageError(f"dataset directory not found: {path}") from None
    if not paths:
        raise UsageError(f"no images in dataset directory: {path}")
    return PatchDataset(paths, cfg.patch_size, policy=cfg.patch_policy,
                        patches_per_image=cfg.patches_per_image, seed=cfg.seed)


def load_model(cfg: RunConfig, path) -> tuple[Cae, dict, dict]:
    """Model, masks and initial weights from a checkpoint, checked against the config."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    tensors = checkpoint.load(path)
    model = Cae.init(cfg.cae_config(), cfg.seed)
    params = {k: v for k, v in tensors.items() if not k.startswith(INIT_PREFIX) and not k.endswith(MASK_SUFFIX)}
    init = {k[len(INIT_PREFIX):]: v for k, v in tensors.items() if k.startswith(INIT_PREFIX)}
    masks = {k[: -len(MASK_SUFFIX)]: v for k, v in tensors.items() if k.endswith(MASK_SUFFIX)}
    try:
        model.load_state_dict(params)
        extra = set(params) - set(model.parameters())
        if extra:
            raise KeyError(f"unexpected tensors {sorted(extra)}")
        shapes = {k: p.shape for k, p in model.parameters().items()}
        for k, m in masks.items():
            if k not in shapes or m.shape != shapes[k]:
                raise DimensionError(f"mask {k} does not match the model")
    except (KeyError, DimensionError) as exc:
        raise UsageError(f"checkpoint {path} does not match the configured model: {exc}") from exc
    return model, masks, init


def write_loss_log(path: Path, history, offset: int = 0) -> None:
    write_csv(path, LOSS_COLUMNS, ((offset + h.epoch, h.entropy, h.distortion, h.total) for h in history))


def write_manifest(path: Path, cfg: RunConfig, dataset: PatchDataset, extra: Optional[dict] = None) -> None:
    items = {
        "seed": cfg.seed, "epochs": cfg.epochs, "lr": cfg.lr, "beta1": cfg.beta1, "beta2": cfg.beta2,
        "eps": cfg.eps, "batch_size": cfg.batch_size, "eta": cfg.eta, "constraint": cfg.constraint,
        "scope": cfg.scope, "levels": 2 ** cfg.quant_bits, "lam": cfg.lam,
        "dataset": str(cfg.train_path()), "dataset_digest": dataset.digest(), "patches": len(dataset),
    }
    items.update(extra or {})
    lines = [f"{k} = {_fmt(v)}" for k, v in items.items()]
    path.write_text("\n".join(lines) + "\n# images\n" + dataset.manifest())


def scope_summary(model: Cae, masks: dict, scope: str) -> dict[str, float]:
    params = model.parameters()
    names = model.weight_names(scope)
    ws = [params[n].data for n in names]
    report = model.cost_report(masks)
    layer_names = model.layer_names(scope)
    return {
        "S": sparsity(ws),
        "RM": report.total(layer_names).rm_pct,
        "RM_all": report.total().rm_pct,
        "mem_pct": memory_report(ws)["reduction_pct"],
    }


def sparsify_model(model: Cae, init: dict, dataset: PatchDataset, cfg: RunConfig, eta: float,
                   target: Optional[float] = None):
    """Projection, then masked retraining.  Returns (eta used, masks, phase-2 history)."""
    if target is not None:
        eta, _ = eta_for_sparsity(model, target, cfg.constraint, cfg.scope, cfg.eta_mode)
    masks = project_model(model, eta, cfg.constraint, cfg.scope, cfg.eta_mode)
    dcfg = cfg.descent_config()
    if dcfg.restart == "init" and not init:
        raise UsageError("checkpoint has no initial weights; use restart = continue")
    history = second_descent(model, dataset, masks, dcfg, init)
    return eta, masks, history


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg: RunConfig) -> Path:
    """Dense first descent.  Writes train.scae (with the initial weights), loss and manifest."""
    out = prepare_out(cfg, "train")
    dataset = load_dataset(cfg)
    model = Cae.init(cfg.cae_config(), cfg.seed)
    init = model.state_dict()
    history = first_descent(model, dataset, cfg.descent_config())
    tensors = model.state_dict()
    tensors.update({INIT_PREFIX + k: v for k, v in init.items()})
    ckpt = out / "train.scae"
    checkpoint.save(ckpt, tensors)
    write_loss_log(out / "train_loss.csv", history)
    write_manifest(out / "train_manifest.txt", cfg, dataset)
    last = history[-1]
    print(f"trained {cfg.epochs} epochs: total {last.total:.6g} entropy {last.entropy:.4f} distortion {last.distortion:.6g}")
    print(f"checkpoint {ckpt}")
    return ckpt


def cmd_sparsify(cfg: RunConfig, ckpt_path=None, target: Optional[float] = None) -> dict[str, float]:
    """Projection and second descent from a train checkpoint."""
    out = prepare_out(cfg, "sparsify")
    ckpt_path = Path(ckpt_path) if ckpt_path else out / "train.scae"
    model, _, init = load_model(cfg, ckpt_path)
    dataset = load_dataset(cfg)
    eta, masks, history = sparsify_model(model, init, dataset, cfg, cfg.eta, target)
    summary = scope_summary(model, masks, cfg.scope)
    if abs(summary["mem_pct"] - 100.0 * summary["S"]) > 1.0:
        raise ScaeError(f"memory reduction {summary['mem_pct']:.3f}% disagrees with sparsity {summary['S']:.4f}")
    tensors = model.state_dict()
    tensors.update({k + MASK_SUFFIX: m for k, m in masks.items()})
    checkpoint.save(out / "sparse.scae", tensors)
    report = model.cost_report(masks)
    scopes = {"encoder": model.layer_names("encoder"), "decoder": model.layer_names("decoder")}
    (out / "cost.csv").write_text(report.to_csv(scopes))
    write_loss_log(out / "sparsify_loss.csv", history, offset=cfg.epochs)
    write_manifest(out / "sparsify_manifest.txt", cfg, dataset, {"eta_used": eta, "checkpoint": str(ckpt_path)})
    print(f"{cfg.constraint} eta={_fmt(eta)} scope={cfg.scope}: S={summary['S']:.4f} "
          f"RM={summary['RM']:.2f}% (whole model {summary['RM_all']:.2f}%) memory reduction={summary['mem_pct']:.2f}%")
    return {"eta": eta, **summary}


def _readable_images(paths):
    images = []
    for p in paths:
        try:
            images.append((p, load_image(p, channels=3)))
        except (ParseError, OSError, ValueError) as exc:
            logger.warning("skipping %s: %s", p, exc)
    return images


def evaluate_dir(model: Cae, image_dir, quant_bits: Optional[int] = None, recon_dir: Optional[Path] = None):
    """Per-image scores for every readable image in ``image_dir``, in name order."""
    image_dir = Path(image_dir)
    try:
        paths = list_images(image_dir)
    except FileNotFoundError:
        raise UsageError(f"image directory not found: {image_dir}") from None
    if not paths:
        raise UsageError(f"no images in {image_dir}")
    images = _readable_images(paths)

    def one(item):
        p, img = item
        try:
            score, recon, blob = evaluate_image(model, img, p.name, quant_bits)
        except DimensionError as exc:
            logger.warning("skipping %s: %s", p, exc)
            return None
        if recon_dir is not None:
            save_image(recon, recon_dir / f"{p.stem}.ppm")
            (recon_dir / f"{p.stem}.scz").write_bytes(blob.to_bytes())
        return score

    with ThreadPoolExecutor(max_workers=min(eval_threads(), max(1, len(images)))) as pool:
        scores = [s for s in pool.map(one, images) if s is not None]
    if not scores:
        raise ScaeError(f"no image in {image_dir} could be evaluated")
    return scores


def cmd_eval(cfg: RunConfig, ckpt_path=None, image_dir=None, quant_bits: Optional[int] = None,
             save_recon: bool = False) -> Path:
    out = prepare_out(cfg, "eval")
    ckpt_path = Path(ckpt_path) if ckpt_path else out / "sparse.scae"
    model, _, _ = load_model(cfg, ckpt_path)
    recon_dir = None
    if save_recon:
        recon_dir = out / "recon"
        recon_dir.mkdir(exist_ok=True)
    scores = evaluate_dir(model, image_dir or cfg.eval_path(), quant_bits, recon_dir)
    rows = [(s.name, s.bpp_coded, s.bpp_est, s.psnr, s.mssim) for s in scores]
    mean = [float(np.mean([r[i] for r in rows])) for i in range(1, 5)]
    rows.append(("mean", *mean))
    path = out / "eval.csv"
    write_csv(path, EVAL_COLUMNS, rows)
    print(f"{len(scores)} images: bpp {mean[0]:.4f} (estimate {mean[1]:.4f}) PSNR {mean[2]:.2f} dB MSSIM {mean[3]:.4f}")
    return path


def _curve_point(model, masks, cfg, images_dir, bits):
    scores = evaluate_dir(model, images_dir, bits)
    summary = scope_summary(model, masks, cfg.scope)
    mean_mse = float(np.mean([s.mse for s in scores]))
    return summary, mean_mse, scores


def cmd_curve(cfg: RunConfig, knob: str, values: Sequence[float], ckpt_path=None) -> Path:
    """Rate/quality table over a sweep of the radius, target sparsity or quantizer bits.

    The reference is the unconstrained (eta = inf) run from the same initial
    weights; every row reports its relative loss against it.
    """
    if knob not in KNOBS:
        raise UsageError(f"knob must be one of {KNOBS}")
    if len(values) < 2:
        raise UsageError("a curve needs at least two sweep points")
    out = prepare_out(cfg, "curve")
    dataset = load_dataset(cfg)
    if ckpt_path:
        trained, _, init = load_model(cfg, ckpt_path)
    else:
        trained = Cae.init(cfg.cae_config(), cfg.seed)
        init = trained.state_dict()
        first_descent(trained, dataset, cfg.descent_config())
    images = cfg.eval_path()

    reference = copy.deepcopy(trained)
    _, ref_masks, _ = sparsify_model(reference, init, dataset, cfg, math.inf)
    _, ref_mse, _ = _curve_point(reference, ref_masks, cfg, images, cfg.quant_bits)

    rows = []
    for v in values:
        if knob == "bits":
            model, masks, bits = reference, ref_masks, int(v)
        else:
            model = copy.deepcopy(trained)
            eta, target = (float(v), None) if knob == "eta" else (math.inf, float(v))
            _, masks, _ = sparsify_model(model, init, dataset, cfg, eta, target)
            bits = cfg.quant_bits
        summary, m, scores = _curve_point(model, masks, cfg, images, bits)
        rows.append((knob, v, summary["S"], summary["RM"], summary["mem_pct"],
                     float(np.mean([s.bpp_coded for s in scores])), float(np.mean([s.psnr for s in scores])),
                     float(np.mean([s.mssim for s in scores])), relative_loss(ref_mse, m)))
        logger.info("%s=%s: %s", knob, v, rows[-1])
    path = out / "curve.csv"
    write_csv(path, CURVE_COLUMNS, rows)
    for r in rows:
        print(f"{knob}={_fmt(r[1])}: S={r[2]:.4f} RM={r[3]:.2f}% bpp={r[5]:.4f} PSNR={r[6]:.2f} RL={r[8]:+.2f} dB")
    return path


def cmd_cost(cfg: RunConfig, ckpt_path=None) -> Path:
    out = prepare_out(cfg, "cost")
    ckpt_path = Path(ckpt_path) if ckpt_path else out / "sparse.scae"
    model, masks, _ = load_model(cfg, ckpt_path)
    report = model.cost_report(masks or None)
    scopes = {"encoder": model.layer_names("encoder"), "decoder": model.layer_names("decoder")}
    text = report.to_csv(scopes)
    path = out / "cost.csv"
    path.write_text(text)
    print(text, end="")
    return path


# ---------------------------------------------------------------------------
# argument handling


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value run configuration")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=str)
    common.add_argument("--constraint", choices=("l1", "l11", "l1inf"))
    common.add_argument("--scope", choices=("encoder", "decoder", "all"))
    common.add_argument("--eta", type=float)
    common.add_argument("--bits", type=int, help="quantizer bits")
    common.add_argument("--epochs", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="scae", description="Structured sparsity for convolutional autoencoders.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="dense training")
    sp = sub.add_parser("sparsify", parents=[common], help="projection and masked retraining")
    sp.add_argument("--checkpoint", type=Path)
    sp.add_argument("--sparsity", type=float, help="pick eta to reach this sparsity instead of using --eta")
    ev = sub.add_parser("eval", parents=[common], help="rate and quality on an image directory")
    ev.add_argument("--checkpoint", type=Path)
    ev.add_argument("--images", type=Path)
    ev.add_argument("--save-recon", action="store_true")
    cu = sub.add_parser("curve", parents=[common], help="rate/quality sweep")
    cu.add_argument("--checkpoint", type=Path, help="train checkpoint to start from")
    knob = cu.add_mutually_exclusive_group(required=True)
    knob.add_argument("--sweep-eta", type=_float_list)
    knob.add_argument("--sweep-bits", type=_float_list)
    knob.add_argument("--sweep-sparsity", type=_float_list)
    co = sub.add_parser("cost", parents=[common], help="MACCs and memory report of a checkpoint")
    co.add_argument("--checkpoint", type=Path)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    changes = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = (s.strip() for s in item.split("=", 1))
        try:
            changes[key] = convert(key, raw)
        except KeyError:
            raise ConfigError(f"unknown key {key!r}") from None
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None
    flags = {"seed": args.seed, "out": args.out, "constraint": args.constraint, "scope": args.scope,
             "eta": args.eta, "quant_bits": args.bits, "epochs": args.epochs}
    changes.update({k: v for k, v in flags.items() if v is not None})
    return cfg.replace(**changes)


def run(args: argparse.Namespace) -> None:
    cfg = resolve_config(args)
    if args.command == "train":
        cmd_train(cfg)
    elif args.command == "sparsify":
        cmd_sparsify(cfg, args.checkpoint, args.sparsity)
    elif args.command == "eval":
        cmd_eval(cfg, args.checkpoint, args.images, args.bits, args.save_recon)
    elif args.command == "curve":
        for knob in KNOBS:
            values = getattr(args, f"sweep_{knob}")
            if values is not None:
                cmd_curve(cfg, knob, values, args.checkpoint)
    elif args.command == "cost":
        cmd_cost(cfg, args.checkpoint)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ScaeError, ValueError, ArithmeticError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
