###############################################################################
#
# CADA desk-scale text-to-image person retrieval.
#
# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.
#
###############################################################################
"""
Training loop.

Per step: batch -> encoders -> similarity matrix -> hard negatives ->
NDF / ATP / ARA -> total -> AdamW with a cosine learning rate. The loss
breakdown is appended to ``training_log.csv``; checkpoints are written at
the configured cadence and at the end.
"""
from dataclasses import dataclass, field
import math
from pathlib import Path

import numpy as np
import pandas as pd
from logbook import Logger

from cada import numerics as nx
from cada.analyzer import AddAnalyzer
from cada.data import BatchFeed
from cada.errors import ConfigError, TrainingError
from cada.losses import LossSwitches, cada_step_losses

log = Logger("cada.trainer")

LOG_COLUMNS = ["step", "ndf", "atp", "ara", "total", "lr"]


@dataclass
class TrainConfig:
    """
    Training hyper-parameters.

    Desk defaults: N_z 16, lr 3e-4, 30 epochs. Full scale: N_z 96,
    lr 1e-5, 40 epochs, which needs pretrained encoders to be useful.
    """

    epochs: int = 30
    batch_size: int = 16
    lr: float = 3e-4
    weight_decay: float = 0.05
    warmup_steps: int = 0
    min_lr_ratio: float = 0.01
    seed: int = 0
    alpha: float = 0.8
    mask_mode: str = "attribute"
    augment: bool = True
    accum_steps: int = 1
    checkpoint_every: int = 0
    stop_step: int = 0
    prefetch: bool = False
    max_len: int = 24
    switches: LossSwitches = field(default_factory=LossSwitches)

    def __post_init__(self):
        for name in ("epochs", "batch_size", "accum_steps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name} must be positive, got {getattr(self, name)}")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError(f"invalid optimiser settings lr={self.lr} weight_decay={self.weight_decay}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"data.alpha must lie in [0, 1], got {self.alpha}")
        if self.batch_size < 2:
            raise ConfigError("train.batch_size must be at least 2 for in-batch negatives")

    @classmethod
    def from_params(cls, params):
        return cls(
            epochs=params["train.epochs"],
            batch_size=params["train.batch_size"],
            lr=params["train.lr"],
            weight_decay=params["train.weight_decay"],
            warmup_steps=params["train.warmup_steps"],
            min_lr_ratio=params["train.min_lr_ratio"],
            seed=params["seed"],
            alpha=params["data.alpha"],
            mask_mode=params["data.mask_mode"],
            augment=params["data.augment"],
            accum_steps=params["train.accum_steps"],
            checkpoint_every=params["train.checkpoint_every"],
            stop_step=params["train.stop_step"],
            prefetch=params["train.prefetch"],
            max_len=params["model.max_len"],
            switches=LossSwitches.from_params(params),
        )


@dataclass
class TrainResult:
    steps: int
    final_checkpoint: Path
    log: pd.DataFrame
    analysis: dict


class Trainer:
    """
    Owns the optimiser, schedule and batch feed for one model.

    :param model: Cada instance, trained in place.
    :param records: training DatasetRecords with images loaded.
    :param vocab, lexicon: text resources of the corpus.
    :param config: TrainConfig.
    :param run_dir: where the log and checkpoints go.
    :param config_hash, config_dict: stored in checkpoints for resume checks.
    """

    def __init__(self, model, records, vocab, lexicon, config, run_dir, config_hash="", config_dict=None):
        if not records:
            raise TrainingError("no training records")
        self.model = model
        self.records = records
        self.config = config
        self.run_dir = Path(run_dir)
        self.config_hash = config_hash
        self.config_dict = config_dict or {}
        self.step = 0

        self.steps_per_epoch = max(math.ceil(len(records) / (config.batch_size * config.accum_steps)), 1)
        self.total_steps = config.epochs * self.steps_per_epoch
        self.optimizer = nx.AdamW(model, lr=config.lr, weight_decay=config.weight_decay)
        self.schedule = nx.CosineSchedule(
            config.lr, self.total_steps, warmup=config.warmup_steps, min_ratio=config.min_lr_ratio
        )
        self.feed = BatchFeed(
            records,
            config.batch_size,
            config.seed,
            config.alpha,
            lexicon,
            vocab,
            max_len=config.max_len,
            mask_mode=config.mask_mode,
            augment=config.augment,
            prefetch=config.prefetch,
        )
        self.analyzers = {}
        AddAnalyzer(self).add_analyzers()

    @property
    def log_path(self):
        return self.run_dir / "training_log.csv"

    @property
    def checkpoint_dir(self):
        return self.run_dir / "checkpoints"

    def add_analyzer(self, name, cls):
        self.analyzers[name] = cls(self)

    # Persistence.
    def save(self, name=None):
        path = self.checkpoint_dir / (name or f"step_{self.step:06d}.ckpt")
        nx.save_checkpoint(
            path,
            self.model,
            self.optimizer,
            config_hash=self.config_hash,
            step=self.step,
            meta=dict(config=self.config_dict),
        )
        for analyzer in self.analyzers.values():
            analyzer.notify_checkpoint(self.step, path)
        return path

    def resume(self, path):
        """Restore weights, moments and the step counter; trim the log to match."""
        header = nx.load_checkpoint(
            path,
            self.model,
            self.optimizer,
            expected_hash=self.config_hash,
            expected_config=self.config_dict,
        )
        self.step = int(header["step"])
        if self.log_path.exists():
            frame = pd.read_csv(self.log_path)
            frame = frame[frame["step"] <= self.step]
            frame.to_csv(self.log_path, index=False, float_format="%.9g")
        log.info(f"resumed from {path} at step {self.step} of {self.total_steps}")
        return header

    def _append_log(self, row):
        frame = pd.DataFrame([row], columns=LOG_COLUMNS)
        frame.to_csv(
            self.log_path, mode="a", header=not self.log_path.exists(), index=False, float_format="%.9g"
        )

    def _dump_bad_batch(self, batch, breakdown):
        path = self.run_dir / "bad_batch.npz"
        np.savez(
            path,
            images=batch.images,
            cls_ids=batch.cls_ids,
            enc_ids=batch.enc_ids,
            masked_ids=batch.masked_ids,
            pad_mask=batch.pad_mask,
            identities=batch.identities,
            record_indices=batch.record_indices,
            losses=np.array([breakdown[k] for k in ("ndf", "atp", "ara", "total")]),
        )
        return path

    # Loop.
    def train_step(self, batches, lr):
        """One optimiser step over ``accum_steps`` micro-batches."""
        self.optimizer.zero_grad()
        scale = 1.0 / len(batches)
        totals = dict(ndf=0.0, atp=0.0, ara=0.0, total=0.0)
        for batch in batches:
            out = cada_step_losses(self.model, batch, self.config.switches)
            if not np.isfinite(out.breakdown["total"]):
                path = self._dump_bad_batch(batch, out.breakdown)
                raise TrainingError(
                    f"non-finite loss at step {self.step + 1}: {out.breakdown}; batch dumped to {path}"
                )
            if out.total.requires_grad:
                (out.total * scale).backward()
            for k in totals:
                totals[k] += out.breakdown[k] * scale
        self.optimizer.step(lr)
        return totals

    def run(self, stop_step=None):
        """
        Train from the current step up to ``stop_step`` (default: the configured
        stop step, or the end of the schedule) and write the final checkpoint.
        """
        stop = stop_step or self.config.stop_step or self.total_steps
        stop = min(stop, self.total_steps)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        if self.step == 0 and self.log_path.exists():
            self.log_path.unlink()
        accum = self.config.accum_steps
        for analyzer in self.analyzers.values():
            analyzer.start()

        log.info(
            f"training steps {self.step + 1}..{stop} of {self.total_steps} "
            f"({self.steps_per_epoch} per epoch, batch {self.config.batch_size} x {accum})"
        )
        micro = self.feed.iterate(self.step * accum, stop * accum)
        while self.step < stop:
            batches = [next(micro)[1] for _ in range(accum)]
            lr = self.schedule(self.step)
            totals = self.train_step(batches, lr)
            self.step += 1
            record = dict(step=self.step, lr=lr, **totals)
            self._append_log(record)
            for analyzer in self.analyzers.values():
                analyzer.next(record)
            log.debug(
                f"step {self.step}: total {totals['total']:.4f} ndf {totals['ndf']:.4f} "
                f"atp {totals['atp']:.4f} ara {totals['ara']:.4f} lr {lr:.2e}"
            )
            if self.step % self.steps_per_epoch == 0:
                log.info(f"epoch {self.step // self.steps_per_epoch} finished, loss {totals['total']:.4f}")
            if self.config.checkpoint_every and self.step % self.config.checkpoint_every == 0:
                self.save()
        micro.close()

        final = self.save("final.ckpt")
        for analyzer in self.analyzers.values():
            analyzer.stop()
        frame = pd.read_csv(self.log_path) if self.log_path.exists() else pd.DataFrame(columns=LOG_COLUMNS)
        return TrainResult(
            self.step,
            final,
            frame,
            {name: a.get_analysis() for name, a in self.analyzers.items()},
        )


def train(model, records, vocab, lexicon, config, run_dir, config_hash="", config_dict=None):
    trainer = Trainer(model, records, vocab, lexicon, config, run_dir, config_hash, config_dict)
    return trainer.run()


def resume(checkpoint, model, records, vocab, lexicon, config, run_dir, config_hash="", config_dict=None, stop_step=None):
    trainer = Trainer(model, records, vocab, lexicon, config, run_dir, config_hash, config_dict)
    trainer.resume(checkpoint)
    return trainer.run(stop_step)
