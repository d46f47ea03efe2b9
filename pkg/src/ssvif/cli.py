"""``ssvif`` command line: synth | train | fuse | eval | diagnose.

Exit codes: 0 success, 1 other failure, 2 config error, 3 data error,
4 divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import Config, parse_config
from .diagnostics import summarize
from .errors import ConfigError, ContractError, DataError, SSVIFError
from .imageio import ImagePair, load_label_pgm, load_pgm, load_ppm, replicate_ir, save_ppm
from .metrics import MetricReport, confusion_matrix, fusion_scores, matched_miou
from .models import FusionModel, SegModel
from .synthgen import SceneSpec, generate
from .tensor import Tensor, no_grad
from .checkpoint import load_checkpoint

log = logging.getLogger("ssvif")


# -- helpers ------------------------------------------------------------------------

def _load_config(args) -> Config:
    cfg = parse_config(args.config) if getattr(args, "config", None) else Config()
    overrides = {
        "seed": args.seed,
        "dataset_root": getattr(args, "dataset_root", None),
        "out_dir": getattr(args, "out_dir", None),
        "max_epochs": getattr(args, "max_epochs", None),
    }
    cfg = cfg.with_overrides(**overrides)
    for line in cfg.to_text().splitlines():
        log.info("config: %s", line)
    return cfg


def pad_to_multiple(img: np.ndarray, multiple: int = 4) -> tuple[np.ndarray, tuple[int, int]]:
    """Reflect-pad the bottom/right of a [C,H,W] image so H and W divide ``multiple``."""
    h, w = img.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph == 0 and pw == 0:
        return img, (h, w)
    mode = "reflect" if h > ph and w > pw else "edge"
    return np.pad(img, ((0, 0), (0, ph), (0, pw)), mode=mode), (h, w)


def load_fusion_model(checkpoint) -> FusionModel:
    """Fusion model only; the segmentation networks are never built here."""
    tensors, _ = load_checkpoint(checkpoint)
    model = FusionModel()
    try:
        model.registry.load_state(tensors)
    except KeyError as exc:
        raise DataError(f"{checkpoint}: {exc.args[0]}") from exc
    return model


def fuse_pair(model: FusionModel, vis: np.ndarray, ir: np.ndarray) -> np.ndarray:
    """Fuse one [3,H,W] visible / [3,H,W] infrared pair at full resolution."""
    vis_p, (h, w) = pad_to_multiple(vis)
    ir_p, _ = pad_to_multiple(ir)
    with no_grad():
        fused = model(Tensor(ir_p.astype(np.float32)), Tensor(vis_p.astype(np.float32))).fused
    return fused.data[:, :h, :w]


# -- commands -----------------------------------------------------------------------

def cmd_synth(args) -> int:
    seed = 7 if args.seed is None else args.seed
    try:
        spec = SceneSpec(width=args.size, height=args.size, n_classes=args.classes, seed=seed, noise_std=args.noise)
    except ContractError as exc:
        raise ConfigError(str(exc)) from exc
    ids = generate(spec, args.count, args.out, start=args.start)
    print(f"wrote {len(ids)} scenes to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .trainer import train

    cfg = _load_config(args)
    result = train(cfg, resume_from=args.resume)
    last = result.records[-1] if result.records else None
    if last is not None:
        print(f"finished at epoch {last.epoch} (stage {last.stage}); switch epoch {result.switch_epoch or '-'}; "
              f"best epoch {result.state.best_epoch}; outputs in {result.out_dir}")
    return 0


def cmd_fuse(args) -> int:
    model = load_fusion_model(args.checkpoint)
    vis = load_ppm(args.vis)
    ir = load_pgm(args.ir)
    ir = replicate_ir(ir)
    if vis.shape != ir.shape:
        raise DataError(f"visible {vis.shape[1:]} and infrared {ir.shape[1:]} sizes differ")
    fused = fuse_pair(model, vis, ir)
    save_ppm(np.clip(fused, 0.0, 1.0), args.out)
    return 0


def cmd_eval(args) -> int:
    fused_dir, vis_dir, ir_dir = Path(args.fused), Path(args.vis), Path(args.ir)
    ids = sorted(p.stem for p in fused_dir.glob("*.ppm"))
    if not ids:
        raise DataError(f"no fused .ppm images in {fused_dir}")
    report = MetricReport()
    seg = None
    if args.labels:
        if not args.seg_checkpoint:
            raise ConfigError("--labels needs --seg-checkpoint")
        tensors, meta = load_checkpoint(args.seg_checkpoint)
        n = args.classes or int(meta.get("n_classes", 0))
        if n < 2:
            raise ConfigError("cannot determine the class count; pass --classes")
        from .models import ParamRegistry

        registry = ParamRegistry()
        seg = SegModel(registry, n)
        registry.load_state(tensors)
        conf = np.zeros((n, n), dtype=np.int64)
        preds, gts = [], []
    for pid in ids:
        fused = load_ppm(fused_dir / f"{pid}.ppm")
        pair = ImagePair(vis=load_ppm(vis_dir / f"{pid}.ppm"), ir=replicate_ir(load_pgm(ir_dir / f"{pid}.pgm")), id=pid)
        if fused.shape != pair.vis.shape:
            raise DataError(f"{pid}: fused {fused.shape} vs source {pair.vis.shape}")
        report.add(pid, fusion_scores(fused, pair.ir, pair.vis))
        if seg is not None:
            label = load_label_pgm(Path(args.labels) / f"{pid}.pgm")
            padded, (h, w) = pad_to_multiple(fused)
            with no_grad():
                pred = seg(Tensor(padded)).probs.data.argmax(axis=0)[:h, :w]
            if args.matched:
                preds.append(pred)
                gts.append(label)
            else:
                conf += confusion_matrix(pred, label, n)
    if seg is not None:
        if args.matched:
            value, mapping = matched_miou(np.stack(preds), np.stack(gts), n)
            conf = confusion_matrix(mapping[np.stack(preds)], np.stack(gts), n)
        report.set_segmentation(conf)
    text = "\n".join(report.lines()) + "\n"
    sys.stdout.write(text)
    if args.out:
        try:
            Path(args.out).write_text(text)
        except OSError as exc:
            raise DataError(f"cannot write report {args.out}: {exc}") from exc
    return 0


def cmd_diagnose(args) -> int:
    from .trainer import Trainer, prepare_data

    cfg = _load_config(args)
    # a short run: one Stage-I epoch, then Stage II for the remaining epochs
    cfg = replace(cfg, stage1_cap=1, max_epochs=max(2, args.epochs), save_checkpoints=False)
    train_pairs, val_pairs = prepare_data(cfg)
    trainer = Trainer(cfg, train_pairs, val_pairs, out_dir=args.out_dir)
    result = trainer.fit()
    if not result.projection.records:
        raise ContractError("no projection samples were recorded; run more Stage-II epochs")
    if args.dump:
        result.projection.dump(args.dump)
    print("\n".join(summarize(result.projection).lines()))
    return 0


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssvif", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic paired dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--start", type=int, default=0, help="index of the first scene (use for held-out sets)")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.02, help="per-modality Gaussian noise std")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="two-stage training")
    p.add_argument("--config")
    p.add_argument("--dataset-root")
    p.add_argument("--out-dir")
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--resume", help="continue from a checkpoint")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fuse", help="fuse one image pair with a trained fusion model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vis", required=True)
    p.add_argument("--ir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="accepted for uniformity; fusion uses no randomness")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", help="fusion metrics and optional segmentation mIoU")
    p.add_argument("--fused", required=True)
    p.add_argument("--vis", required=True)
    p.add_argument("--ir", required=True)
    p.add_argument("--labels")
    p.add_argument("--seg-checkpoint")
    p.add_argument("--classes", type=int)
    p.add_argument("--matched", action="store_true", help="match predicted clusters to classes before scoring")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, help="accepted for uniformity; evaluation uses no randomness")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose", help="short run reporting gradient-projection statistics")
    p.add_argument("--config")
    p.add_argument("--dataset-root")
    p.add_argument("--out-dir")
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--dump", help="write per-step projection records here")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except SSVIFError as exc:
        print(f"ssvif: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
