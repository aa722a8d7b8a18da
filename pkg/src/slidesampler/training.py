"""Learner-agnostic training protocol: fixed-length epochs, a plateau-driven
learning-rate ladder and early stopping.

The controller only sees one validation metric per epoch, so the whole
schedule can be replayed from a scripted metric sequence.
"""

import json
import logging
import math
from dataclasses import dataclass, field

from .errors import LearnerFailure, ValidationError
from .raster import extract_patch, metadata_patch
from .rng import stream
from .sampler import epoch_stream

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainingSchedule:
    lr_ladder: tuple = (1e-3, 1e-4, 1e-5)
    plateau_patience: int = 3
    stop_patience: int = 10
    max_epochs: int = 200

    def __post_init__(self):
        problems = []
        if not self.lr_ladder or any(b >= a for a, b in zip(self.lr_ladder, self.lr_ladder[1:])):
            problems.append("lr_ladder must be non-empty and strictly decreasing")
        if self.plateau_patience < 1 or self.stop_patience < 1:
            problems.append("patience values must be at least 1")
        if self.max_epochs < 1:
            problems.append("max_epochs must be at least 1")
        if problems:
            raise ValidationError(problems)

    @property
    def initial_lr(self):
        return self.lr_ladder[0]


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_metric: float
    event: str

    def to_dict(self):
        return {"epoch": self.epoch, "lr": self.lr, "train_loss": self.train_loss,
                "val_metric": self.val_metric, "event": self.event}


class PlateauController:
    """Tracks the best validation metric and decides lr drops and stopping.

    An epoch improves only if its metric is strictly below the best seen so
    far; the first epoch merely sets the baseline and counts as a
    non-improving epoch.  After ``plateau_patience`` non-improving epochs the
    lr steps down the ladder and the counter resets.  On the last rung,
    ``stop_patience`` non-improving epochs end training.
    """

    def __init__(self, schedule=None):
        self.schedule = schedule or TrainingSchedule()
        self.rung = 0
        self.best = None
        self.best_epoch = None
        self.wait = 0
        self.epoch = 0
        self.stopped = False
        self.stop_reason = None

    @property
    def lr(self):
        return self.schedule.lr_ladder[self.rung]

    @property
    def on_last_rung(self):
        return self.rung == len(self.schedule.lr_ladder) - 1

    def update(self, metric, train_loss=None):
        if self.stopped:
            raise RuntimeError("training already stopped")
        self.epoch += 1
        lr = self.lr
        if self.best is None:
            self.best, self.best_epoch = metric, self.epoch
            self.wait = 1
            event = "baseline"
        elif metric < self.best:
            self.best, self.best_epoch = metric, self.epoch
            self.wait = 0
            event = "improved"
        else:
            self.wait += 1
            event = "plateau"
        if not self.on_last_rung and self.wait >= self.schedule.plateau_patience:
            self.rung += 1
            self.wait = 0
            event = "lr_drop"
        elif self.on_last_rung and self.wait >= self.schedule.stop_patience:
            self.stopped, self.stop_reason = True, "converged"
            event = "stop"
        if not self.stopped and self.epoch >= self.schedule.max_epochs:
            self.stopped, self.stop_reason = True, "max_epochs"
            event = "max_epochs" if event in ("improved", "plateau", "baseline") else event
        return EpochRecord(self.epoch, lr, train_loss, metric, event)


def simulate(metrics, schedule=None):
    """Replay a metric sequence; stops early when the controller stops."""
    ctl = PlateauController(schedule)
    records = []
    for m in metrics:
        records.append(ctl.update(m))
        if ctl.stopped:
            break
    return records, ctl


@dataclass
class TrainingLog:
    records: list = field(default_factory=list)
    best_epoch: int = None
    best_metric: float = None
    stop_reason: str = None

    @property
    def lr_changes(self):
        return [r.epoch for r in self.records if r.event == "lr_drop"]

    def write_jsonl(self, fh):
        for r in self.records:
            fh.write(json.dumps(r.to_dict()) + "\n")


def default_patch_loader(manifest):
    slides = {s.slide_id: s for s in manifest.slides}

    def load(spec):
        slide = slides[spec.slide_id]
        if slide.raster_source is None:
            return metadata_patch(slide, spec)
        return extract_patch(slide, spec, manifest=manifest)

    return load


def run_training_protocol(learner, manifest, sampler_cfg, schedule=None, validate=None, load_patch=None,
                          log_fh=None):
    """Train ``learner`` epoch by epoch until the schedule stops it.

    ``validate(learner, epoch)`` returns the monitored metric; by default the
    learner's own ``validation_loss()`` is used.
    """
    if not hasattr(learner, "train_step"):
        raise ValidationError(["learner does not implement train_step"])
    schedule = schedule or TrainingSchedule()
    ctl = PlateauController(schedule)
    load_patch = load_patch or default_patch_loader(manifest)
    validate = validate or (lambda lrn, epoch: lrn.validation_loss())
    set_lr = getattr(learner, "set_learning_rate", None)
    if set_lr:
        set_lr(ctl.lr)
    out = TrainingLog()
    epoch = 0
    while not ctl.stopped:
        losses = []
        batch = None
        try:
            for batch in epoch_stream(manifest, sampler_cfg, epoch):
                patches = [load_patch(p) for p in batch.patches]
                losses.append(float(learner.train_step(batch, patches)))
            metric = float(validate(learner, epoch))
        except Exception as exc:
            raise LearnerFailure(str(exc), epoch=epoch + 1, batch=None if batch is None else batch.index) from exc
        lr_before = ctl.lr
        rec = ctl.update(metric, sum(losses) / len(losses) if losses else math.nan)
        out.records.append(rec)
        if log_fh is not None:
            log_fh.write(json.dumps(rec.to_dict()) + "\n")
            log_fh.flush()
        log.info("epoch %d lr=%g train_loss=%.4f val=%.4f %s", rec.epoch, rec.lr, rec.train_loss, metric, rec.event)
        if set_lr and ctl.lr != lr_before:
            set_lr(ctl.lr)
        epoch += 1
    out.best_epoch, out.best_metric, out.stop_reason = ctl.best_epoch, ctl.best, ctl.stop_reason
    return out


class SimulatedLearner:
    """A deterministic toy learner for exercising the protocol end to end.

    Validation loss decays with the number of patches seen, weighted by the
    learning rate, plus lr-proportional noise, so high rates plateau early
    and each ladder step unlocks further small gains.
    """

    def __init__(self, seed=0, floor=0.2, scale=0.8, tau=3000.0):
        self.seed = seed
        self.floor, self.scale, self.tau = floor, scale, tau
        self.lr = 1e-3
        self.progress = 0.0
        self.steps = 0
        self.evals = 0

    def set_learning_rate(self, lr):
        self.lr = lr

    def train_step(self, batch, patches):
        self.steps += 1
        self.progress += len(patches) * self.lr / 1e-3
        return self._loss(stream(self.seed, "train", self.steps)) + 0.05

    def _loss(self, rng):
        noise = 30.0 * self.lr * abs(float(rng.standard_normal()))
        return self.floor + self.scale * math.exp(-self.progress / self.tau) + noise

    def validation_loss(self):
        self.evals += 1
        return self._loss(stream(self.seed, "val", self.evals))

    def predict(self, patch):
        return []
