"""Two-stage training loop.

Stage I trains the fusion model (backbone + decoder) on the fusion loss
alone. At the first epoch whose mean training fusion loss rises above the
previous epoch's (or at ``stage1_cap``), training moves to Stage II: all
four networks are optimised on ``L_fusion + w_csc * L_csc`` and ``w_csc``
is re-estimated at every epoch end by the configured scheduler.

Each epoch draws its shuffling and crops from ``default_rng([seed, epoch])``
so a run resumed from a checkpoint sees exactly the batches the
uninterrupted run would have seen.
"""

from __future__ import annotations

import contextlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import DEFAULT_N_CLASSES, Config
from .diagnostics import ProjectionReport, flatten, make_record, summarize
from .errors import ConfigError, ContractError, DataError, DivergenceError
from .gdwa import GdwaState, WeightScheduler
from .imageio import ImagePair, center_crop_pair, list_ids, load_dataset, random_crop_pair, split_dataset
from .losses import LossBreakdown, csc_loss, fusion_loss
from .models import GROUPS, SHARED_GROUPS, SSVIFNetworks
from .optim import Adam
from .synthgen import read_manifest
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "epoch", "stage", "l_int", "l_grad", "l_ssim", "l_color", "l_fusion",
    "l_csc", "w_csc", "l_total", "val_total", "alpha_cf_mean",
)
SEG_GROUPS = tuple(g for g in GROUPS if g not in SHARED_GROUPS)


# -- stage switch -------------------------------------------------------------------

def should_switch(history: Sequence[float], stage1_cap: int) -> bool:
    """True once the epoch-mean fusion losses so far call for Stage II."""
    j = len(history)
    if j >= 2 and history[-1] > history[-2]:
        return True
    return j >= stage1_cap


def stage_switch_epoch(losses: Sequence[float], stage1_cap: int) -> int | None:
    """1-based epoch after which Stage II starts, or None if it never does."""
    for j in range(1, len(losses) + 1):
        if should_switch(losses[:j], stage1_cap):
            return j
    return None


# -- state --------------------------------------------------------------------------

@dataclass
class TrainState:
    stage: int = 1
    epoch: int = 0
    fusion_loss_history: list[float] = field(default_factory=list)
    total_loss_val_history: list[float] = field(default_factory=list)
    patience_counter: int = 0
    best_val: float = math.inf
    best_epoch: int = 0
    switch_epoch: int = 0
    global_step: int = 0
    rng_seed: int = 0
    max_epochs: int = 60
    stage1_cap: int = 20

    def to_meta(self) -> dict[str, str]:
        meta = {}
        for key, value in asdict(self).items():
            if isinstance(value, list):
                value = ",".join(repr(float(v)) for v in value)
            elif isinstance(value, float):
                value = repr(value)
            meta[f"train.{key}"] = str(value)
        return meta

    @classmethod
    def from_meta(cls, meta: dict[str, str]) -> "TrainState":
        kwargs = {}
        for name, default in asdict(cls()).items():
            raw = meta.get(f"train.{name}")
            if raw is None:
                continue
            if isinstance(default, list):
                kwargs[name] = [float(v) for v in raw.split(",") if v]
            elif isinstance(default, float):
                kwargs[name] = float(raw)
            else:
                kwargs[name] = int(raw)
        return cls(**kwargs)


@dataclass
class EpochRecord:
    epoch: int
    stage: int
    l_int: float
    l_grad: float
    l_ssim: float
    l_color: float
    l_fusion: float
    l_csc: float
    w_csc: float
    l_total: float
    val_total: float
    alpha_cf_mean: float
    val_agreement: float = math.nan
    val_fusion: float = math.nan
    omega_next: float = math.nan
    seconds: float = 0.0

    def tsv(self) -> str:
        return "\t".join(_fmt(getattr(self, c)) for c in METRIC_COLUMNS)


def _fmt(value) -> str:
    if isinstance(value, int):
        return str(value)
    return format(float(value), ".9g")


@dataclass
class TrainResult:
    records: list[EpochRecord]
    state: TrainState
    projection: ProjectionReport
    stopped_early: bool
    out_dir: Path | None

    @property
    def switch_epoch(self) -> int:
        return self.state.switch_epoch


# -- data ---------------------------------------------------------------------------

def resolve_n_classes(config: Config) -> int:
    if config.n_classes:
        return config.n_classes
    manifest = read_manifest(config.dataset_root) if config.dataset_root else None
    if manifest and "n_classes" in manifest:
        return int(manifest["n_classes"])
    return DEFAULT_N_CLASSES


def prepare_data(config: Config) -> tuple[list[ImagePair], list[ImagePair]]:
    """Load the dataset root and split it 90/10 into train and validation."""
    if not config.dataset_root:
        raise ConfigError("dataset_root is not set")
    ids = list_ids(config.dataset_root)
    if not ids:
        raise ConfigError(f"dataset root {config.dataset_root} is empty")
    if len(ids) < 10:
        raise ConfigError(f"dataset root {config.dataset_root} has {len(ids)} pairs; at least 10 are needed")
    split = split_dataset(ids, config.seed)
    train = load_dataset(config.dataset_root, split.train)
    val = load_dataset(config.dataset_root, split.val)
    return train, val


def _check_crop(pairs: Sequence[ImagePair], crop: int) -> None:
    smallest = min(min(p.hw) for p in pairs)
    if crop > smallest:
        raise ConfigError(f"crop {crop} exceeds the smallest image side {smallest}")


def make_batch(pairs: Sequence[ImagePair]) -> tuple[Tensor, Tensor]:
    vis = Tensor(np.stack([p.vis for p in pairs]).astype(np.float32))
    ir = Tensor(np.stack([p.ir for p in pairs]).astype(np.float32))
    return vis, ir


def _grad_norm(params) -> float:
    return float(np.sqrt(sum(float(np.vdot(p.grad, p.grad)) for _, p in params)))


def _deterministic_context(enabled: bool):
    if not enabled:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=1)


# -- trainer ------------------------------------------------------------------------

class Trainer:
    def __init__(
        self,
        config: Config,
        train_pairs: Sequence[ImagePair],
        val_pairs: Sequence[ImagePair],
        n_classes: int | None = None,
        out_dir=None,
    ):
        if not train_pairs:
            raise ConfigError("training split is empty")
        if not val_pairs:
            raise ConfigError("validation split is empty")
        _check_crop(list(train_pairs) + list(val_pairs), config.crop)
        self.config = config
        self.train_pairs = list(train_pairs)
        self.val_pairs = list(val_pairs)
        self.n_classes = n_classes or resolve_n_classes(config)
        self.nets = SSVIFNetworks(self.n_classes, seed=config.seed)
        self.adam = Adam(self.nets.registry, lr=config.lr)
        self.scheduler = WeightScheduler(config.scheduler, config.gdwa_temperature, config.fixed_wcsc)
        self.state = TrainState(rng_seed=config.seed, max_epochs=config.max_epochs, stage1_cap=config.stage1_cap)
        self.projection = ProjectionReport()
        self.records: list[EpochRecord] = []
        self.out_dir = Path(out_dir) if out_dir is not None else (Path(config.out_dir) if config.out_dir else None)
        self.last_shared_grad_norm = math.nan
        self._epoch_alphas: list[float] = []

    # -- steps ------------------------------------------------------------------

    def _forward_fusion(self, vis: Tensor, ir: Tensor):
        out = self.nets.fusion(ir, vis)
        lf, parts = fusion_loss(out.fused, ir, vis, self.config.fusion_weights)
        if not math.isfinite(lf.item()):
            raise DivergenceError(f"fusion loss became {lf.item()} at step {self.state.global_step}")
        return out, lf, parts

    def train_step_stage1(self, vis: Tensor, ir: Tensor) -> LossBreakdown:
        """Fusion-only step; the segmentation groups are not touched."""
        reg = self.nets.registry
        reg.zero_grad()
        _, lf, parts = self._forward_fusion(vis, ir)
        lf.backward()
        self.last_shared_grad_norm = _grad_norm(reg.shared())
        self.adam.step(SHARED_GROUPS)
        self.state.global_step += 1
        bd = LossBreakdown(**{k: v.item() for k, v in parts.items()})
        bd.l_fusion = bd.l_total = lf.item()
        return bd

    def train_step_stage2(self, vis: Tensor, ir: Tensor, sample: bool = False) -> LossBreakdown:
        """Joint step on all groups with ``L_fusion + w_csc * L_csc``.

        On sampled steps the two losses are back-propagated separately so
        their gradients on the shared parameters can be measured; the
        combined gradient is then assembled from the two.
        """
        if not self.config.use_csc:
            return self.train_step_stage1(vis, ir)
        reg = self.nets.registry
        omega = self.scheduler.omega
        reg.zero_grad()
        out, lf, parts = self._forward_fusion(vis, ir)
        pA = self.nets.seg_head(out.features)
        pB = self.nets.seg_model(out.fused)
        lc, _, cparts = csc_loss(pA, pB, self.config.dice_eps, self.config.ce_normalization)
        lf_v, lc_v = lf.item(), lc.item()
        if not math.isfinite(lc_v):
            raise DivergenceError(f"CSC loss became {lc_v} at step {self.state.global_step}")

        norm_f = norm_c = None
        if sample:
            shared = reg.shared()
            lf.backward(retain_graph=True)
            g_fusion = [p.grad.copy() for _, p in shared]
            reg.zero_grad()
            lc.backward()
            vf = flatten(g_fusion)
            vc = flatten([p.grad for _, p in shared])
            norm_f, norm_c = float(np.linalg.norm(vf)), float(np.linalg.norm(vc))
            record = make_record(self.state.global_step, vc, vf)
            self.projection.add(record)
            if record is not None:
                self._epoch_alphas.append(record.alpha_cf)
            w = np.float32(omega)
            for _, p in reg.items():
                p.grad *= w
            for (_, p), g in zip(shared, g_fusion):
                p.grad += g
        else:
            (lf + lc * omega).backward()
        self.last_shared_grad_norm = _grad_norm(reg.shared())
        self.adam.step(GROUPS)
        self.scheduler.accumulate(norm_f, norm_c, lf_v, lc_v)
        self.state.global_step += 1

        bd = LossBreakdown(**{k: v.item() for k, v in parts.items()})
        bd.l_fusion = lf_v
        bd.l_csc = lc_v
        bd.l_hyb_A = cparts["l_hyb_A"].item()
        bd.l_hyb_B = cparts["l_hyb_B"].item()
        bd.l_ce = 0.5 * (cparts["l_ce_A"].item() + cparts["l_ce_B"].item())
        bd.l_dice = 0.5 * (cparts["l_dice_A"].item() + cparts["l_dice_B"].item())
        bd.w_csc = omega
        bd.l_total = lf_v + omega * lc_v
        return bd

    # -- validation ---------------------------------------------------------------

    def validate(self) -> tuple[float, float, float]:
        """``(val_total, val_fusion, agreement)`` on centre crops, without gradient.

        The agreement rate between the two branches' argmax maps is only
        measured in Stage II with the CSC loss active; otherwise it is NaN.
        """
        crops = [center_crop_pair(p, self.config.crop) for p in self.val_pairs]
        joint = self.state.stage == 2 and self.config.use_csc
        omega = self.scheduler.omega
        tot = fus = agree = 0.0
        pixels = 0
        bs = self.config.batch_size
        with no_grad():
            for start in range(0, len(crops), bs):
                chunk = crops[start:start + bs]
                vis, ir = make_batch(chunk)
                out = self.nets.fusion(ir, vis)
                lf, _ = fusion_loss(out.fused, ir, vis, self.config.fusion_weights)
                value = lf.item()
                fus += value * len(chunk)
                if joint:
                    pA = self.nets.seg_head(out.features)
                    pB = self.nets.seg_model(out.fused)
                    lc, _, _ = csc_loss(pA, pB, self.config.dice_eps, self.config.ce_normalization)
                    value += omega * lc.item()
                    same = pA.probs.data.argmax(axis=1) == pB.probs.data.argmax(axis=1)
                    agree += float(same.sum())
                    pixels += same.size
                tot += value * len(chunk)
        n = len(crops)
        return tot / n, fus / n, (agree / pixels if pixels else math.nan)

    # -- epochs -------------------------------------------------------------------

    def run_epoch(self) -> EpochRecord:
        t0 = time.perf_counter()
        cfg = self.config
        epoch = self.state.epoch + 1
        stage = self.state.stage
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(self.train_pairs))
        self._epoch_alphas = []
        sums: dict[str, float] = {}
        n_steps = 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            crops = [random_crop_pair(self.train_pairs[i], cfg.crop, rng) for i in order[start:start + cfg.batch_size]]
            vis, ir = make_batch(crops)
            if stage == 1:
                bd = self.train_step_stage1(vis, ir)
            else:
                bd = self.train_step_stage2(vis, ir, sample=b % cfg.gdwa_norm_sample_every == 0)
            for k, v in bd.as_dict().items():
                sums[k] = sums.get(k, 0.0) + v
            n_steps += 1
        means = {k: v / n_steps for k, v in sums.items()}

        val_total, val_fusion, agreement = self.validate()
        omega_used = self.scheduler.omega if stage == 2 and cfg.use_csc else 0.0
        record = EpochRecord(
            epoch=epoch,
            stage=stage,
            l_int=means["l_int"],
            l_grad=means["l_grad"],
            l_ssim=means["l_ssim"],
            l_color=means["l_color"],
            l_fusion=means["l_fusion"],
            l_csc=means["l_csc"],
            w_csc=omega_used,
            l_total=means["l_total"],
            val_total=val_total,
            alpha_cf_mean=float(np.mean(self._epoch_alphas)) if self._epoch_alphas else math.nan,
            val_agreement=agreement,
            val_fusion=val_fusion,
        )
        if stage == 2 and cfg.use_csc:
            record.omega_next = self.scheduler.end_epoch()
        self.state.epoch = epoch
        self.state.total_loss_val_history.append(val_total)
        if stage == 1:
            self.state.fusion_loss_history.append(record.l_fusion)
        record.seconds = time.perf_counter() - t0
        self.records.append(record)
        return record

    def _after_epoch(self, record: EpochRecord) -> bool:
        """Early stopping, checkpointing and the stage switch. Returns True to stop."""
        st = self.state
        improved = record.val_total < st.best_val
        if improved:
            st.best_val = record.val_total
            st.best_epoch = record.epoch
            st.patience_counter = 0
        else:
            st.patience_counter += 1
        if st.stage == 1 and should_switch(st.fusion_loss_history, st.stage1_cap):
            st.stage = 2
            st.switch_epoch = record.epoch
            # the validation loss changes definition, so the early-stopping baseline restarts
            st.best_val = math.inf
            st.patience_counter = 0
            log.info("switching to stage II after epoch %d", record.epoch)
        if self.out_dir is not None:
            self._write_record(record)
            if self.config.save_checkpoints:
                if improved:
                    self.save(self.out_dir / "best.ckpt")
                self.save(self.out_dir / "last.ckpt")
        return st.patience_counter >= self.config.patience

    def fit(self, max_epochs: int | None = None, until_switch: bool = False) -> TrainResult:
        """Train until ``max_epochs``, early stopping, or (with ``until_switch``) the stage switch."""
        limit = max_epochs if max_epochs is not None else self.config.max_epochs
        stopped = False
        if self.out_dir is not None:
            self._prepare_out_dir()
        with _deterministic_context(self.config.deterministic):
            while self.state.epoch < limit:
                record = self.run_epoch()
                log.info(
                    "epoch %d stage %d l_fusion %.5f l_csc %.5f w_csc %.4g val %.5f agree %.4f (%.1fs)",
                    record.epoch, record.stage, record.l_fusion, record.l_csc, record.w_csc,
                    record.val_total, record.val_agreement, record.seconds,
                )
                if self._after_epoch(record):
                    stopped = True
                    log.info("early stop after epoch %d (best epoch %d)", record.epoch, self.state.best_epoch)
                    break
                if until_switch and self.state.stage == 2:
                    break
        if self.out_dir is not None and self.projection.records:
            self._append_projection_summary()
        return TrainResult(self.records, self.state, self.projection, stopped, self.out_dir)

    # -- persistence ----------------------------------------------------------------

    def _prepare_out_dir(self) -> None:
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            metrics = self.out_dir / "metrics.tsv"
            if self.state.epoch == 0 or not metrics.exists():
                metrics.write_text("\t".join(METRIC_COLUMNS) + "\n")
                (self.out_dir / "history.jsonl").write_text("")
            (self.out_dir / "config.txt").write_text(self.config.to_text())
        except OSError as exc:
            raise DataError(f"cannot prepare output directory {self.out_dir}: {exc}") from exc

    def _write_record(self, record: EpochRecord) -> None:
        try:
            with open(self.out_dir / "metrics.tsv", "a") as fh:
                fh.write(record.tsv() + "\n")
            with open(self.out_dir / "history.jsonl", "a") as fh:
                fh.write(json.dumps(asdict(record)) + "\n")
        except OSError as exc:
            raise DataError(f"cannot write metrics to {self.out_dir}: {exc}") from exc

    def _append_projection_summary(self) -> None:
        lines = summarize(self.projection).lines()
        try:
            with open(self.out_dir / "metrics.tsv", "a") as fh:
                fh.write("".join(f"# {line}\n" for line in lines))
        except OSError as exc:
            raise DataError(f"cannot write metrics to {self.out_dir}: {exc}") from exc

    def checkpoint_payload(self) -> tuple[dict[str, np.ndarray], dict[str, str]]:
        tensors = dict(self.nets.registry.state())
        tensors.update(self.adam.state_tensors())
        meta = {"n_classes": str(self.n_classes), "scheduler": self.scheduler.kind}
        meta.update(self.state.to_meta())
        meta.update(self.scheduler.state.to_meta())
        meta.update(self.adam.state_meta())
        meta.update(self.config.as_meta())
        return tensors, meta

    def save(self, path) -> None:
        tensors, meta = self.checkpoint_payload()
        save_checkpoint(tensors, meta, path)

    @classmethod
    def from_payload(cls, tensors, meta, config: Config, train_pairs, val_pairs, out_dir=None) -> "Trainer":
        n_classes = int(meta.get("n_classes", resolve_n_classes(config)))
        trainer = cls(config, train_pairs, val_pairs, n_classes=n_classes, out_dir=out_dir)
        trainer.nets.registry.load_state(tensors)
        trainer.adam.load_state(tensors, meta)
        trainer.state = TrainState.from_meta(meta)
        trainer.state.max_epochs = config.max_epochs
        if meta.get("scheduler", config.scheduler) == config.scheduler:
            trainer.scheduler.state = GdwaState.from_meta(meta)
        # else: a different scheduler starts from its own initial weight
        return trainer

    @classmethod
    def resume(cls, path, config: Config, train_pairs, val_pairs, out_dir=None) -> "Trainer":
        tensors, meta = load_checkpoint(path)
        return cls.from_payload(tensors, meta, config, train_pairs, val_pairs, out_dir=out_dir)

    def fork(self, config: Config | None = None, out_dir=None) -> "Trainer":
        """Independent copy of this trainer's full state, optionally under another config.

        Used to branch ablations off a shared Stage I: the copy continues
        exactly as a run resumed from a checkpoint taken now would.
        """
        tensors, meta = self.checkpoint_payload()
        tensors = {k: v.copy() for k, v in tensors.items()}
        other = Trainer.from_payload(tensors, meta, config or self.config, self.train_pairs, self.val_pairs, out_dir=out_dir)
        other.records = list(self.records)
        return other

    # -- inference ------------------------------------------------------------------

    def segment(self, pairs: Sequence[ImagePair], branch: str = "head") -> np.ndarray:
        """Full-resolution argmax maps [N,H,W] from the feature-level head or the pixel-level model."""
        return segment_pairs(self.nets, pairs, branch, self.config.batch_size)


def segment_pairs(nets: SSVIFNetworks, pairs: Sequence[ImagePair], branch: str = "head", batch_size: int = 10) -> np.ndarray:
    if branch not in ("head", "model"):
        raise ContractError(f"branch must be 'head' or 'model', got {branch!r}")
    out = []
    with no_grad():
        for start in range(0, len(pairs), batch_size):
            vis, ir = make_batch(pairs[start:start + batch_size])
            fused = nets.fusion(ir, vis)
            pred = nets.seg_head(fused.features) if branch == "head" else nets.seg_model(fused.fused)
            out.append(pred.probs.data.argmax(axis=1))
    return np.concatenate(out)


def load_networks(path) -> tuple[SSVIFNetworks, dict[str, str]]:
    """Rebuild all four networks from a checkpoint."""
    tensors, meta = load_checkpoint(path)
    if "n_classes" not in meta:
        raise ContractError(f"{path}: checkpoint lacks n_classes")
    nets = SSVIFNetworks(int(meta["n_classes"]))
    nets.registry.load_state(tensors)
    return nets, meta


def train(config: Config, resume_from=None) -> TrainResult:
    train_pairs, val_pairs = prepare_data(config)
    if resume_from is not None:
        trainer = Trainer.resume(resume_from, config, train_pairs, val_pairs)
    else:
        trainer = Trainer(config, train_pairs, val_pairs)
    return trainer.fit()
