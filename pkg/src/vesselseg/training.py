"""Training orchestration: cosine warm-restart schedule, hard-example
mining, the epoch loop, early stopping, and checkpointed resume.

Every random stream is derived from (seed, epoch, purpose...) tuples, so a
run is bitwise reproducible for a fixed seed and resuming from an epoch
boundary continues exactly the uninterrupted trajectory.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, ScheduleConfig, config_hash, config_to_text
from .data import TrainSample, build_batch
from .engine import Tensor, backward, adamw_step, clip_grad_global_norm
from .engine.optim import AdamWState
from .evaluation import (
    ImageMetrics,
    confusion,
    dice_score,
    predict_image,
    roc_auc,
    sensitivity,
    specificity,
)
from .losses import deep_supervised_total
from .model import VesselNet


class TrainAbort(RuntimeError):
    """Raised when an epoch hits a non-finite loss."""


def lr_at(epoch: float, cfg: ScheduleConfig) -> float:
    """Cosine annealing with warm restarts.

    Cycle i spans first_cycle_epochs * cycle_mult**i epochs; within a cycle
    at offset t the rate is min + 0.5*(max-min)*(1 + cos(pi*t/T)).
    """
    if epoch < 0:
        raise ValueError(f"lr_at: epoch must be >= 0, got {epoch}")
    t = float(epoch)
    length = float(cfg.first_cycle_epochs)
    while t >= length:
        t -= length
        length *= cfg.cycle_mult
    return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + math.cos(math.pi * t / length))


# --- hard example mining ------------------------------------------------------

@dataclass
class DifficultyTable:
    scores: np.ndarray            # per-image 1 - Dice
    weights: np.ndarray           # 1 or hem_ratio
    hard_indices: list[int] = field(default_factory=list)

    def probabilities(self) -> np.ndarray:
        return self.weights / self.weights.sum()


def sample_dice(model: VesselNet, sample: TrainSample) -> float:
    """Dice of the thresholded fused prediction on the unaugmented image."""
    _, pred = predict_image(model, sample.four, use_tta=False)
    return dice_score(confusion(pred, sample.mask_r.astype(np.uint8)))


def hem_table_from_scores(scores: np.ndarray, epoch: int,
                          cfg: ScheduleConfig) -> DifficultyTable:
    """Sampling weights from difficulty scores.

    Uniform until the activation epoch; afterwards the max(1,
    floor(top_fraction*N)) highest-difficulty images carry weight
    hem_ratio.  Ties at the cutoff resolve to the smaller image index.
    """
    n = len(scores)
    if n == 0:
        raise ValueError("hem_table_from_scores: empty training set")
    weights = np.ones(n, dtype=np.float64)
    if epoch < cfg.hem_start_epoch:
        return DifficultyTable(scores=np.zeros(n), weights=weights)
    count = max(1, int(math.floor(cfg.hem_top_fraction * n)))
    # stable sort on descending score keeps earlier indices first among ties
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    hard = sorted(int(i) for i in order[:count])
    weights[hard] = cfg.hem_ratio
    return DifficultyTable(scores=np.asarray(scores, dtype=np.float64),
                           weights=weights, hard_indices=hard)


def hem_update(model: VesselNet, samples: list[TrainSample], epoch: int,
               cfg: ScheduleConfig) -> DifficultyTable:
    """Difficulty table for one epoch: 1 - Dice on the unaugmented images."""
    if not samples:
        raise ValueError("hem_update: empty training set")
    if epoch < cfg.hem_start_epoch:
        return hem_table_from_scores(np.zeros(len(samples)), epoch, cfg)
    scores = np.array([1.0 - sample_dice(model, s) for s in samples])
    return hem_table_from_scores(scores, epoch, cfg)


# --- early stopping -----------------------------------------------------------

@dataclass
class EarlyStopper:
    patience: int
    best: float = -math.inf
    best_epoch: int = -1
    since: int = 0

    def update(self, epoch: int, value: float) -> bool:
        """Returns True when this epoch strictly improved the best value."""
        if value > self.best:
            self.best = value
            self.best_epoch = epoch
            self.since = 0
            return True
        self.since += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.since >= self.patience


# --- evaluation over sample lists ----------------------------------------------

def evaluate_model(model: VesselNet, samples: list[TrainSample],
                   use_tta: bool = False) -> list[ImageMetrics]:
    out = []
    for s in samples:
        prob, pred = predict_image(model, s.four, use_tta=use_tta)
        g = s.mask_r.astype(np.uint8)
        c = confusion(pred, g)
        out.append(ImageMetrics(
            dataset=s.dataset,
            image_id=s.image_id,
            dice=dice_score(c),
            sensitivity=sensitivity(c),
            specificity=specificity(c),
            auc=roc_auc(prob, g) if 0 < g.sum() < g.size else float("nan"),
        ))
    return out


def mean_validation_dice(model: VesselNet, samples: list[TrainSample]) -> float:
    return float(np.mean([sample_dice(model, s) for s in samples]))


# --- the trainer ----------------------------------------------------------------

def _stream(*key: int) -> np.random.Generator:
    return np.random.default_rng(tuple(int(k) for k in key))


class Trainer:
    """One training run over explicit train/validation sample lists."""

    def __init__(self, cfg: RunConfig, train_samples: list[TrainSample],
                 val_samples: list[TrainSample], out_dir: str):
        cfg.validate()
        if not train_samples:
            raise ValueError("Trainer: empty training set")
        self.cfg = cfg
        self.train_samples = train_samples
        self.val_samples = val_samples
        self.out_dir = out_dir
        os.makedirs(out_dir, exist_ok=True)
        self.model = VesselNet(cfg.model, seed=cfg.seed, dtype=np.float32)
        self.opt = AdamWState(self.model.params, lr=cfg.schedule.lr,
                              weight_decay=cfg.schedule.weight_decay)
        self.stopper = EarlyStopper(patience=cfg.schedule.patience)
        self.global_step = 0
        self.history: list[dict] = []
        self._hem_table: DifficultyTable | None = None
        self._runlog = self._lrlog = self._fusionlog = None

    # -- logging ------------------------------------------------------------

    def _open_logs(self, append: bool) -> None:
        mode = "a" if append else "w"
        self._runlog = open(os.path.join(self.out_dir, "runlog.tsv"), mode, encoding="utf-8")
        self._lrlog = open(os.path.join(self.out_dir, "lr_curve.tsv"), mode, encoding="utf-8")
        self._fusionlog = open(os.path.join(self.out_dir, "fusion_trajectory.tsv"), mode,
                               encoding="utf-8")
        if not append:
            self._runlog.write(f"# config_hash={config_hash(self.cfg)} seed={self.cfg.seed} "
                               f"version={__version__}\n")
            self._runlog.write("type\tepoch\tstep\tlr\tloss\tdice\tbce\tcldice\tgradnorm"
                               "\tw1\tw2\tw3\tw4\tval_dice\thard\n")
            self._lrlog.write("step\tlr\n")
            self._fusionlog.write("epoch\tw1\tw2\tw3\tw4\n")

    def _close_logs(self) -> None:
        for fh in (self._runlog, self._lrlog, self._fusionlog):
            if fh:
                fh.close()
        self._runlog = None

    def _log_step(self, epoch: int, step: int, lr: float, terms, gradnorm: float,
                  weights: np.ndarray) -> None:
        w = "\t".join(f"{x:.9f}" for x in weights)
        self._runlog.write(
            f"step\t{epoch}\t{step}\t{lr:.12g}\t{terms.total.item():.9f}\t"
            f"{terms.dice.item():.9f}\t{terms.bce.item():.9f}\t{terms.cldice.item():.9f}\t"
            f"{gradnorm:.9f}\t{w}\t-\t-\n")
        self._lrlog.write(f"{self.global_step}\t{lr:.12g}\n")

    def _log_epoch(self, epoch: int, val: float, weights: np.ndarray,
                   hard: list[int]) -> None:
        w = "\t".join(f"{x:.9f}" for x in weights)
        hard_keys = ",".join(self.train_samples[i].key for i in hard) if hard else "-"
        self._runlog.write(f"epoch\t{epoch}\t-\t-\t-\t-\t-\t-\t-\t{w}\t{val:.9f}\t{hard_keys}\n")
        self._fusionlog.write(f"{epoch}\t{w}\n")
        self._runlog.flush()

    # -- checkpointing --------------------------------------------------------

    def _checkpoint_arrays(self) -> dict[str, np.ndarray]:
        arrays = dict(self.model.state_arrays())
        for name in self.model.params:
            arrays[f"adam.m.{name}"] = self.opt.m[name]
            arrays[f"adam.v.{name}"] = self.opt.v[name]
        return arrays

    def save(self, path: str, epoch_completed: int) -> None:
        meta = {
            "epoch_completed": epoch_completed,
            "global_step": self.global_step,
            "adam_t": self.opt.t,
            "seed": self.cfg.seed,
            "best_val_dice": float(self.stopper.best),
            "best_epoch": self.stopper.best_epoch,
            "since_improve": self.stopper.since,
        }
        save_checkpoint(path, config_to_text(self.cfg), meta, self._checkpoint_arrays())

    def restore(self, path: str) -> int:
        """Load a checkpoint; returns the next epoch index to run."""
        config_text, meta, arrays = load_checkpoint(path)
        if config_text != config_to_text(self.cfg):
            raise ValueError(f"{path}: checkpoint config does not match the run config")
        self.model.load_state_arrays(arrays)
        for name in self.model.params:
            self.opt.m[name] = arrays[f"adam.m.{name}"].copy()
            self.opt.v[name] = arrays[f"adam.v.{name}"].copy()
        self.opt.t = int(meta["adam_t"])
        self.global_step = int(meta["global_step"])
        best = float(meta["best_val_dice"])
        self.stopper.best = -math.inf if math.isinf(best) and best < 0 else best
        self.stopper.best_epoch = int(meta["best_epoch"])
        self.stopper.since = int(meta["since_improve"])
        return int(meta["epoch_completed"]) + 1

    # -- the loop ---------------------------------------------------------------

    def _train_epoch(self, epoch: int, table: DifficultyTable) -> dict:
        cfg = self.cfg
        n = len(self.train_samples)
        batch = cfg.schedule.batch_size
        steps = max(1, math.ceil(n / batch))
        sample_rng = _stream(cfg.seed, epoch, 0)
        dropout_rng = _stream(cfg.seed, epoch, 2)
        probs = table.probabilities()
        resolution = cfg.model.full_resolution
        losses = []
        for step in range(steps):
            indices = sample_rng.choice(n, size=min(batch, n), replace=True, p=probs)
            aug_rngs = [_stream(cfg.seed, epoch, 1, step, j) for j in range(len(indices))]
            mix_rng = _stream(cfg.seed, epoch, 3, step)
            x, g, w, soft = build_batch(self.train_samples, indices, resolution,
                                        cfg.augment, aug_rngs, mix_rng)
            outputs = self.model.forward(Tensor(x), training=True, rng=dropout_rng)
            terms = deep_supervised_total(outputs, g, w, cfg.loss, soft_target=soft)
            if not np.isfinite(terms.total.item()):
                batch_keys = [self.train_samples[int(i)].key for i in indices]
                raise TrainAbort(
                    f"non-finite loss at epoch {epoch} step {step}; batch images: {batch_keys}")
            backward(terms.total)
            grads, raw_norm = clip_grad_global_norm(self.model.grads(), cfg.schedule.clip_norm)
            applied_norm = min(raw_norm, cfg.schedule.clip_norm)
            lr = lr_at(epoch + step / steps, cfg.schedule)
            adamw_step(self.opt, self.model.params, grads, lr=lr)
            self.model.zero_grad()
            self.global_step += 1
            losses.append(terms.total.item())
            self._log_step(epoch, step, lr, terms, applied_norm, outputs.fusion_weights)
        return {"epoch": epoch, "mean_loss": float(np.mean(losses)),
                "fusion_weights": self.model.fusion_weights()}

    def run(self, resume: str | None = None,
            max_epochs: int | None = None) -> list[dict]:
        cfg = self.cfg
        end_epoch = cfg.schedule.max_epochs if max_epochs is None else max_epochs
        start_epoch = 0
        if resume is not None:
            start_epoch = self.restore(resume)
        self._open_logs(append=resume is not None)
        try:
            if resume is None:
                init_val = (mean_validation_dice(self.model, self.val_samples)
                            if self.val_samples else float("nan"))
                self.history.append({"epoch": -1, "val_dice": init_val})
                self._log_epoch(-1, init_val, self.model.fusion_weights(), [])
            for epoch in range(start_epoch, end_epoch):
                if self.stopper.should_stop:
                    break
                rescore = (epoch < cfg.schedule.hem_start_epoch or self._hem_table is None
                           or (epoch - cfg.schedule.hem_start_epoch) % cfg.schedule.hem_every == 0)
                if rescore:
                    self._hem_table = hem_update(self.model, self.train_samples, epoch,
                                                 cfg.schedule)
                table = self._hem_table
                stats = self._train_epoch(epoch, table)
                val = (mean_validation_dice(self.model, self.val_samples)
                       if self.val_samples else float("nan"))
                improved = self.stopper.update(epoch, val) if self.val_samples else False
                stats.update({"val_dice": val, "hard": table.hard_indices,
                              "best_epoch": self.stopper.best_epoch})
                self.history.append(stats)
                self._log_epoch(epoch, val, stats["fusion_weights"], table.hard_indices)
                self.save(os.path.join(self.out_dir, "last.ckpt"), epoch)
                if improved:
                    self.save(os.path.join(self.out_dir, "best.ckpt"), epoch)
        finally:
            self._close_logs()
        return self.history
