"""SGD training loop, loss, schedule, evaluation and resumable checkpoints."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, restore_model, save_checkpoint
from .config import RunConfig, TrainConfig
from .data import LabeledDataset, batches, load_dataset, prepare
from .errors import FormatError, NumericError
from .layers import Module

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "lr", "train_loss", "train_acc", "test_loss", "test_acc", "wall_seconds")



def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy_ls(logits: np.ndarray, labels: np.ndarray, smoothing: float = 0.0):
    """Mean label-smoothed cross-entropy and its gradient w.r.t. ``logits``.

    The target puts ``1 - eps`` on the true class plus ``eps / m`` on every
    class.
    """
    B, m = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (B,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= m:
        raise ValueError(f"labels must be {B} ints in [0, {m})")
    logp = log_softmax(logits)
    target = np.full((B, m), smoothing / m, dtype=logits.dtype)
    target[np.arange(B), labels] += 1.0 - smoothing
    loss = -(target * logp).sum() / B
    grad = (np.exp(logp) - target) / B
    return float(loss), grad.astype(logits.dtype, copy=False)


def per_sample_loss(logits: np.ndarray, labels: np.ndarray, smoothing: float = 0.0) -> np.ndarray:
    B, m = logits.shape
    logp = log_softmax(logits.astype(np.float64))
    return -(1.0 - smoothing) * logp[np.arange(B), labels] - smoothing / m * logp.sum(axis=1)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    return cfg.lr * cfg.lr_gamma ** sum(1 for m in cfg.lr_milestones if m <= epoch)


def decays(name: str) -> bool:
    """Weight decay applies to everything except each block's residual gain."""
    return not (name == "scale" or name.endswith(".scale"))


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: dict[str, np.ndarray],
             lr: float, momentum: float, weight_decay: float) -> None:
    """In-place momentum SGD: ``v = mu v + (g + wd p)``, ``p -= lr v``.

    Names for which :func:`decays` is false skip weight decay.  Running
    statistics are buffers, never parameters, so they are untouched.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        d = g + weight_decay * p if weight_decay and decays(name) else g
        v = state.get(name)
        if v is None:
            v = state[name] = np.zeros_like(p)
        v *= momentum
        v += d
        p -= lr * v


@dataclass
class RunHistory:
    rows: list[tuple] = field(default_factory=list)

    def append(self, epoch, lr, train_loss, train_acc, test_loss, test_acc, wall_seconds):
        row = (int(epoch), float(lr), float(train_loss), float(train_acc), float(test_loss), float(test_acc),
               float(wall_seconds))
        if self.rows and row[0] <= self.rows[-1][0]:
            raise ValueError("history epochs must increase")
        if not all(np.isfinite(row[1:])):
            raise NumericError(f"non-finite history entry {row}")
        self.rows.append(row)

    def column(self, name: str) -> list:
        i = HISTORY_COLUMNS.index(name)
        return [r[i] for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for r in self.rows:
            w.writerow([r[0]] + [repr(v) for v in r[1:]])
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    def as_array(self) -> np.ndarray:
        return np.array(self.rows, dtype=np.float64).reshape(-1, len(HISTORY_COLUMNS))

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "RunHistory":
        h = cls()
        for r in np.asarray(arr, dtype=np.float64).reshape(-1, len(HISTORY_COLUMNS)):
            h.append(*r)
        return h


def score_logits(logits: np.ndarray, labels: np.ndarray, smoothing: float = 0.0) -> tuple[float, float]:
    """``(mean loss, top-1)`` of a logits matrix."""
    losses = per_sample_loss(logits, labels, smoothing)
    return float(losses.mean()), float(np.mean(np.argmax(logits, axis=1) == labels))


def evaluate(model: Module, ds: LabeledDataset, batch_size: int = 1000, smoothing: float = 0.0) -> tuple[float, float]:
    """Eval-mode loss and top-1 over ``ds`` in index order.

    Per-sample values are gathered before a single reduction, so the
    result does not depend on how the set is split into batches.
    """
    was_training = model.training
    model.eval()
    losses, hits = [], []
    try:
        for x, y in batches(ds, batch_size, shuffle=False):
            logits = model.forward(x)
            losses.append(per_sample_loss(logits, y, smoothing))
            hits.append(np.argmax(logits, axis=1) == y)
    finally:
        model.train(was_training)
    return float(np.concatenate(losses).mean()), float(np.concatenate(hits).mean())


def train_epoch(model: Module, ds: LabeledDataset, cfg: TrainConfig, epoch: int, opt_state: dict,
                lr: float) -> tuple[float, float]:
    model.train()
    params = dict(model.named_parameters())
    total, loss_sum, correct = 0, 0.0, 0
    for b, (x, y) in enumerate(batches(ds, cfg.batch_size, shuffle=True, seed=cfg.seed, epoch=epoch)):
        logits = model.forward(x)
        loss, g = cross_entropy_ls(logits, y, cfg.label_smoothing)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite loss {loss} at epoch {epoch}, batch {b}")
        model.zero_grad()
        model.backward(g)
        sgd_step(params, dict(model.named_grads()), opt_state, lr, cfg.momentum, cfg.weight_decay)
        loss_sum += loss * len(y)
        correct += int(np.sum(np.argmax(logits, axis=1) == y))
        total += len(y)
    return loss_sum / max(total, 1), correct / max(total, 1)


def checkpoint_path(out_dir, epoch: int | None) -> Path:
    return Path(out_dir) / ("ckpt_final" if epoch is None else f"ckpt_epoch_{epoch:04d}")


def save_run_state(model, opt_state, history: RunHistory, next_epoch: int, path, config_text: str) -> Checkpoint:
    return save_checkpoint(model, opt_state, path, config_text,
                           extra={"next_epoch": np.array(next_epoch, dtype=np.int64),
                                  "history": history.as_array()})


def load_run_state(model, path) -> tuple[dict, RunHistory, int]:
    """Restore model weights/stats; return ``(opt_state, history, next_epoch)``."""
    ckpt = load_checkpoint(path)
    restore_model(model, ckpt)
    meta = ckpt.group("meta.")
    if "next_epoch" not in meta or "history" not in meta:
        raise FormatError(f"{path}: not a training checkpoint (missing epoch/history)")
    opt = {k: v.copy() for k, v in ckpt.group("opt.").items()}
    return opt, RunHistory.from_array(meta["history"]), int(meta["next_epoch"])


def train(model: Module, train_ds: LabeledDataset, test_ds: LabeledDataset, cfg: TrainConfig,
          config_text: str = "", resume=None, write_files: bool = True) -> RunHistory:
    """Run ``cfg.epochs`` epochs, evaluating after each.

    Writes ``history.csv`` after every epoch, ``ckpt_epoch_NNNN`` every
    ``checkpoint_every`` epochs and ``ckpt_final`` at the end.  ``resume``
    names a checkpoint written by this function; training continues from
    the epoch after it and reproduces the uninterrupted run exactly.
    """
    cfg.validate()
    out = Path(cfg.out_dir)
    if write_files:
        out.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        opt_state, history, start = load_run_state(model, resume)
    else:
        opt_state, history, start = {}, RunHistory(), 0
    for epoch in range(start, cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, cfg)
        tr_loss, tr_acc = train_epoch(model, train_ds, cfg, epoch, opt_state, lr)
        te_loss, te_acc = evaluate(model, test_ds, cfg.eval_batch_size)
        wall = time.perf_counter() - t0
        history.append(epoch, lr, tr_loss, tr_acc, te_loss, te_acc, wall if cfg.wall_clock else 0.0)
        log.info("epoch %d lr %.4g train_loss %.4f train_acc %.4f test_loss %.4f test_acc %.4f (%.1fs)",
                 epoch, lr, tr_loss, tr_acc, te_loss, te_acc, wall)
        if write_files:
            history.write(out / "history.csv")
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_run_state(model, opt_state, history, epoch + 1, checkpoint_path(out, epoch), config_text)
    if write_files:
        history.write(out / "history.csv")
        save_run_state(model, opt_state, history, cfg.epochs, checkpoint_path(out, None), config_text)
    return history


def run_config_datasets(run: RunConfig):
    """Load and prepare the train/test sets named by ``run.data``."""
    d = run.data
    tr = load_dataset(d.dataset, d.data_dir, "train")
    te = load_dataset(d.dataset, d.data_dir, "test")
    if d.train_limit:
        tr = tr.subset(slice(0, d.train_limit))
    if d.test_limit:
        te = te.subset(slice(0, d.test_limit))
    kw = dict(target_size=d.target_size, mean=d.mean or None, std=d.std or None)
    return prepare(tr, augment=d.augment, **kw), prepare(te, **kw)
