"""
Training loop: cross-entropy, AdamW with a warmup + cosine schedule,
per-epoch evaluation, metrics CSV and checkpoints.
"""

import logging
import math
import os
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd

from vitae.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from vitae.data import batches, sequential_batches, training_subset
from vitae.errors import ConfigurationError, DataError, DimensionError, DivergenceError, ExportError
from vitae.model import ViTAE
from vitae.optim import OptimizerState, adamw_step, cosine_lr
from vitae.tensor import Tensor, backward, no_grad


logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["epoch", "step", "lr", "train_loss", "val_loss", "val_top1"]
METRICS_FILE = "metrics.csv"
LR_REFERENCE_BATCH = 512


def cross_entropy(logits, labels, label_smoothing=0.0):
    """Mean over the batch of -log softmax(logits)[label], via log-sum-exp."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise DimensionError("cross_entropy expects N,K logits, got {}".format(logits.shape))
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError("{} labels for {} rows of logits".format(labels.shape, n))
    if n and (labels.min() < 0 or labels.max() >= k):
        raise DataError("labels must lie in [0, {}), got range [{}, {}]".format(k, labels.min(), labels.max()))
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    target = np.full((n, k), label_smoothing / k, dtype=z.dtype)
    target[np.arange(n), labels] += 1.0 - label_smoothing
    loss = -(target * log_probs).sum() / n

    def backward_fn(grad):
        return ((np.exp(log_probs) - target) * (grad / n),)
    return Tensor.from_op(loss, (logits,), backward_fn, "cross_entropy")


def evaluate(model, ds, batch_size=256):
    """(top-1, mean loss) over `ds` in eval mode."""
    correct = 0
    total_loss = 0.0
    with no_grad():
        for batch in sequential_batches(ds, batch_size):
            logits = model(batch.images.astype(model.dtype))
            total_loss += cross_entropy(logits, batch.labels).item() * len(batch)
            correct += int((logits.data.argmax(axis=1) == batch.labels).sum())
    if len(ds) == 0:
        return 0.0, 0.0
    return correct / len(ds), total_loss / len(ds)


@dataclass
class EpochMetrics:
    epoch: int
    step: int
    lr: float
    train_loss: float
    val_loss: float
    val_top1: float


def write_metrics(metrics, path):
    frame = pd.DataFrame([asdict(m) for m in metrics], columns=METRIC_COLUMNS)
    try:
        frame.to_csv(path, index=False)
    except OSError as ex:
        raise ExportError("cannot write metrics {}: {}".format(path, ex.strerror))


class Trainer(object):
    """
    Owns one model, its optimizer state and the shuffling RNG. fit()
    continues from self.epoch, so a resumed trainer picks up where the
    checkpoint stopped.
    """

    def __init__(self, model_cfg, train_cfg, train_set, val_set=None, output_dir=None, model=None):
        train_cfg.validate()
        if len(train_set) == 0:
            raise DataError("training set is empty")
        channels, height, width = train_set.image_shape
        if (height, width, channels) != tuple(model_cfg.input_size):
            raise ConfigurationError("dataset images are {}x{}x{}, model expects {}".format(
                height, width, channels, "x".join(map(str, model_cfg.input_size))))
        if train_set.num_classes > model_cfg.num_classes:
            raise ConfigurationError("dataset has {} classes, model head has {}".format(
                train_set.num_classes, model_cfg.num_classes))
        self.model_cfg = model_cfg
        self.cfg = train_cfg
        self.train_set = train_set
        if val_set is not None:
            val_set = val_set.with_normalization(train_set.mean, train_set.std)
        self.val_set = val_set
        self.output_dir = output_dir
        self.model = model if model is not None else ViTAE(model_cfg, dtype=train_cfg.dtype)
        self.state = OptimizerState(lr=train_cfg.base_lr, beta1=train_cfg.beta1, beta2=train_cfg.beta2,
                                    eps=train_cfg.adam_eps, weight_decay=train_cfg.weight_decay)
        self.rng = np.random.default_rng([train_cfg.seed, 1])
        self.epoch = 0
        self.step = 0
        self.metrics = []
        self.last_checkpoint = None
        subset = len(training_subset(len(train_set), train_cfg.seed, train_cfg.data_fraction))
        self.steps_per_epoch = math.ceil(subset / train_cfg.batch_size)
        self.total_steps = self.steps_per_epoch * train_cfg.epochs
        if train_cfg.warmup_epochs is None:
            self.warmup_steps = int(0.05 * self.total_steps)
        else:
            self.warmup_steps = train_cfg.warmup_epochs * self.steps_per_epoch
        scale = train_cfg.batch_size / LR_REFERENCE_BATCH if train_cfg.scale_lr else 1.0
        self.peak_lr = train_cfg.base_lr * scale
        self.min_lr = min(train_cfg.min_lr, self.peak_lr)
        logger.info("training on %d of %d samples, %d steps/epoch, peak lr %.3g",
                    subset, len(train_set), self.steps_per_epoch, self.peak_lr)

    def lr_at(self, step):
        """Rate for optimizer step `step`, counted from 1; step 0 is the schedule origin."""
        return cosine_lr(min(step, self.total_steps), self.total_steps, self.peak_lr, self.min_lr, self.warmup_steps)

    def _augment(self, images):
        if self.cfg.hflip:
            flip = self.rng.random(len(images)) < 0.5
            images[flip] = images[flip][..., ::-1]
        return images

    def train_step(self, images, labels):
        params = self.model.params
        params.zero_grad()
        x = Tensor(self._augment(images.astype(self.model.dtype)))
        loss = cross_entropy(self.model(x, training=True), labels, self.cfg.label_smoothing)
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError("loss became {} at epoch {} step {}; last good checkpoint: {}".format(
                value, self.epoch + 1, self.step, self.last_checkpoint or "none"))
        backward(loss)
        lr = self.lr_at(self.step + 1)
        adamw_step(params, self.state, lr)
        self.step += 1
        return value, lr

    def run_epoch(self):
        epoch_batches = batches(self.train_set, self.cfg.batch_size, self.cfg.seed, self.epoch, self.cfg.data_fraction)
        losses = []
        lr = self.lr_at(self.step + 1)
        for batch in epoch_batches:
            value, lr = self.train_step(batch.images, batch.labels)
            losses.append(value * len(batch))
            logger.debug("epoch %d step %d loss %.5f lr %.3g", self.epoch + 1, self.step, value, lr)
        self.epoch += 1
        train_loss = sum(losses) / sum(len(b) for b in epoch_batches)
        val_top1, val_loss = (math.nan, math.nan)
        if self.val_set is not None:
            val_top1, val_loss = evaluate(self.model, self.val_set, self.cfg.eval_batch_size)
        metrics = EpochMetrics(self.epoch, self.step, lr, train_loss, val_loss, val_top1)
        self.metrics.append(metrics)
        logger.info("epoch %d/%d: train loss %.4f, val loss %.4f, val top-1 %.4f, lr %.3g",
                    self.epoch, self.cfg.epochs, train_loss, val_loss, val_top1, lr)
        if self.output_dir is not None:
            write_metrics(self.metrics, os.path.join(self.output_dir, METRICS_FILE))
            self.last_checkpoint = self.save(os.path.join(self.output_dir, "ckpt_epoch{}.vtae".format(self.epoch)))
        return metrics

    def fit(self):
        if self.output_dir is not None:
            os.makedirs(self.output_dir, exist_ok=True)
        while self.epoch < self.cfg.epochs:
            self.run_epoch()
        return self.metrics

    def checkpoint(self):
        return Checkpoint(model_config=self.model_cfg, params=self.model.params, epoch=self.epoch,
                          optimizer=self.state, rng_state=self.rng.bit_generator.state,
                          train_config=self.cfg,
                          normalization={"mean": self.train_set.mean.tolist(), "std": self.train_set.std.tolist()})

    def save(self, path):
        return save_checkpoint(path, self.checkpoint())

    @classmethod
    def resume(cls, path, train_set, val_set=None, output_dir=None, train_cfg=None):
        """Rebuild a trainer from a checkpoint: params, buffers, moments, RNG and epoch."""
        ckpt = load_checkpoint(path)
        train_cfg = train_cfg or ckpt.train_config
        if train_cfg is None:
            raise ConfigurationError("{} carries no train config; pass one to resume".format(path))
        trainer = cls(ckpt.model_config, train_cfg, train_set, val_set, output_dir,
                      model=ViTAE(ckpt.model_config, ckpt.params))
        if ckpt.optimizer is not None:
            trainer.state = ckpt.optimizer
        if ckpt.rng_state is not None:
            trainer.rng.bit_generator.state = ckpt.rng_state
        trainer.epoch = ckpt.epoch
        trainer.step = ckpt.epoch * trainer.steps_per_epoch
        trainer.last_checkpoint = str(path)
        if output_dir is not None:
            previous = os.path.join(output_dir, METRICS_FILE)
            if os.path.exists(previous):
                frame = pd.read_csv(previous)
                trainer.metrics = [EpochMetrics(**row) for row in frame.to_dict("records") if row["epoch"] <= ckpt.epoch]
        logger.info("resumed from %s at epoch %d", path, ckpt.epoch)
        return trainer


def train(model_cfg, train_cfg, train_set, val_set=None, output_dir=None):
    """Run a full training and return the per-epoch metrics."""
    return Trainer(model_cfg, train_cfg, train_set, val_set, output_dir).fit()
