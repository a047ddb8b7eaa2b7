"""Training loop: Nesterov momentum SGD, stepped learning rate decay,
divergence detection and restartable binary checkpoints.

The optimizer update for every parameter p with gradient g is

    g' = g + weight_decay * p
    v  = momentum * v - lr * g'
    p  = p + momentum * v - lr * g'

i.e. classic Nesterov momentum in its direct (lookahead-free) form.
The learning rate starts at ``lr0`` and halves every time the completed
fraction of training crosses one of the schedule boundaries, so the
final sixteenth of a long run trains at lr0/256.

Checkpoints capture parameters, optimizer velocities and the shuffling
RNG state, which makes an interrupted run bit-identical to an
uninterrupted one when resumed at an epoch boundary.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .arch import NetConfig, Network
from .autodiff import backward
from .errors import ConfigError, DataError, TrainingDiverged

# fractions of total training at which the learning rate halves again
LR_BOUNDARIES = (0.2, 0.4, 0.6, 0.75, 0.8, 0.85, 0.9, 0.95)


def lr_at(lr0: float, epoch: int, total_epochs: int,
          boundaries=LR_BOUNDARIES) -> float:
    """Stepped decay: lr0 * 2^-(number of boundaries already reached).

    A boundary b counts as reached when b <= epoch / total_epochs; the
    comparison is done on the fraction so boundary epochs land exactly.
    """
    if total_epochs < 1:
        raise ConfigError(f"total_epochs must be >= 1, got {total_epochs}")
    frac = epoch / total_epochs
    halvings = sum(1 for b in boundaries if b <= frac)
    return lr0 * 2.0 ** -halvings


class Optimizer:
    """Nesterov momentum SGD over a named parameter set.

    Accepts a ParamStore or any mapping of name -> leaf Node.  Velocity
    buffers live here, keyed by name, in the parameter's dtype.
    """

    def __init__(self, params, lr0: float = 2e-4, momentum: float = 0.99,
                 weight_decay: float = 1e-3):
        self.params = dict(params.items())
        self.lr0 = float(lr0)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocities = {name: np.zeros(p.shape, dtype=p.dtype)
                           for name, p in self.params.items()}

    def step(self, lr: Optional[float] = None) -> None:
        """Apply one update from the accumulated gradients."""
        lr = self.lr0 if lr is None else float(lr)
        mu, wd = self.momentum, self.weight_decay
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = 0.0
            elif not np.all(np.isfinite(g)):
                raise TrainingDiverged(f"non-finite gradient in {name!r}")
            buf = p.value.data
            adjusted = g + wd * buf
            v = self.velocities[name]
            v *= mu
            v -= lr * adjusted
            buf += mu * v - lr * adjusted

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 4
    lr0: float = 2e-4
    momentum: float = 0.99
    weight_decay: float = 1e-3
    loss_reduction: str = "mean"
    use_lr_schedule: bool = True
    seed: int = 0
    val_every: int = 1        # epochs between holdout evaluations; 0 disables
    checkpoint_every: int = 0  # epochs between checkpoints; 0 disables

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.loss_reduction not in ("sum", "mean"):
            raise ConfigError(f"loss_reduction must be 'sum' or 'mean', "
                              f"got {self.loss_reduction!r}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        for name in ("lr0", "weight_decay"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        return self

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown training config keys: {sorted(extra)}")
        return cls(**d).validate()


def predict_slices(net: Network, images: np.ndarray,
                   batch_size: int = 8) -> np.ndarray:
    """Softmax probabilities (S, H, W, K) for a stack of slices."""
    out = []
    for lo in range(0, images.shape[0], batch_size):
        out.append(net.predict_probs(images[lo:lo + batch_size]))
    return np.concatenate(out, axis=0)


def _foreground_dice(pred: np.ndarray, labels: np.ndarray, classes: int) -> list:
    scores = []
    for k in range(1, classes):
        a = pred == k
        b = labels == k
        denom = int(a.sum()) + int(b.sum())
        scores.append(1.0 if denom == 0 else
                      2.0 * int(np.logical_and(a, b).sum()) / denom)
    return scores


class Trainer:
    """Mini-batch SGD over a stack of 2D training slices.

    ``images`` is (S, H, W, M) float32, ``labels`` (S, H, W) integer class
    ids.  An optional validation pair is scored with per-class foreground
    Dice after each epoch.
    """

    def __init__(self, net: Network, images: np.ndarray, labels: np.ndarray,
                 config: TrainConfig, val: Optional[tuple] = None,
                 log_path=None, checkpoint_path=None):
        config.validate()
        images = np.asarray(images, dtype=np.float32)
        labels = np.asarray(labels)
        if images.ndim != 4 or labels.shape != images.shape[:3]:
            raise DataError(f"bad training set: images {images.shape}, "
                            f"labels {labels.shape}")
        if images.shape[0] < 1:
            raise DataError("training set is empty")
        self.net = net
        self.images = images
        self.labels = labels
        self.val = val
        self.config = config
        self.optimizer = Optimizer(net.store, config.lr0, config.momentum,
                                   config.weight_decay)
        self.rng = np.random.Generator(np.random.PCG64(config.seed))
        self.epoch = 0
        self.step_count = 0
        self.history: list[dict] = []
        self.log_path = log_path
        self.checkpoint_path = checkpoint_path

    def current_lr(self) -> float:
        if not self.config.use_lr_schedule:
            return self.config.lr0
        return lr_at(self.config.lr0, self.epoch, self.config.epochs)

    def train_one_epoch(self) -> dict:
        cfg = self.config
        order = self.rng.permutation(self.images.shape[0])
        lr = self.current_lr()
        total_loss = 0.0
        seen = 0
        for lo in range(0, order.size, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            logits = self.net.forward(self.images[idx])
            loss = ops.softmax_cross_entropy(logits, self.labels[idx],
                                             cfg.loss_reduction)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"loss became {value} at epoch {self.epoch}, step {self.step_count}")
            self.optimizer.zero_grad()
            backward(loss)
            self.optimizer.step(lr)
            self.step_count += 1
            total_loss += value * idx.size
            seen += idx.size
        self.epoch += 1
        row = {"epoch": self.epoch, "lr": lr, "loss": total_loss / seen,
               "steps": self.step_count}
        if self.val is not None and cfg.val_every and self.epoch % cfg.val_every == 0:
            probs = predict_slices(self.net, self.val[0], cfg.batch_size)
            pred = probs.argmax(axis=-1)
            dice = _foreground_dice(pred, self.val[1], self.net.config.classes)
            row["val_dice"] = dice
            row["val_dice_mean"] = float(np.mean(dice))
        self.history.append(row)
        return row

    def fit(self, epochs: Optional[int] = None) -> list:
        """Train until ``epochs`` (default: the configured total)."""
        target = self.config.epochs if epochs is None else epochs
        while self.epoch < target:
            row = self.train_one_epoch()
            if self.log_path is not None:
                self._write_log()
            if (self.checkpoint_path is not None and self.config.checkpoint_every
                    and self.epoch % self.config.checkpoint_every == 0):
                save_checkpoint(self.checkpoint_path, self.net, self)
        return self.history

    def _write_log(self) -> None:
        keys = ["epoch", "lr", "loss", "steps", "val_dice_mean"]
        with open(self.log_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            classes = self.net.config.classes
            writer.writerow(keys + [f"val_dice_{k}" for k in range(1, classes)])
            for row in self.history:
                line = [row.get(k, "") for k in keys]
                line += list(row.get("val_dice", []))
                writer.writerow(line)


# ---------------------------------------------------------------------------
# checkpoints
#
# layout: MAGIC, u32 format version, u64 header length, JSON header,
# then the raw little-endian buffers in manifest order.

CKPT_MAGIC = b"MIXCKPT\x00"
CKPT_VERSION = 1


def save_checkpoint(path, net: Network, trainer: Optional[Trainer] = None) -> None:
    manifest = []
    blobs = []

    def push(kind, name, arr):
        arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        manifest.append({"kind": kind, "name": name,
                         "shape": list(arr.shape), "dtype": arr.dtype.str})
        blobs.append(arr.tobytes())

    for name, node in net.store.items():
        push("param", name, node.value.data)
    header = {
        "net_config": net.config.to_dict(),
        "store_seed": net.store.seed,
        "epoch": 0,
        "step_count": 0,
        "buffers": manifest,
    }
    if trainer is not None:
        for name in net.store.names():
            push("velocity", name, trainer.optimizer.velocities[name])
        header["epoch"] = trainer.epoch
        header["step_count"] = trainer.step_count
        header["train_config"] = trainer.config.to_dict()
        header["rng_state"] = trainer.rng.bit_generator.state
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(blob)))
        fh.write(blob)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> tuple[dict, dict]:
    """Read a checkpoint file; returns (header, {(kind, name): array})."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise DataError(f"{path}: not a checkpoint file")
        version, hlen = struct.unpack("<IQ", fh.read(12))
        if version != CKPT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        try:
            header = json.loads(fh.read(hlen).decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise DataError(f"{path}: corrupt checkpoint header: {e}") from None
        arrays = {}
        for entry in header["buffers"]:
            dtype = np.dtype(entry["dtype"])
            n = int(np.prod(entry["shape"])) if entry["shape"] else 1
            raw = fh.read(n * dtype.itemsize)
            if len(raw) != n * dtype.itemsize:
                raise DataError(f"{path}: truncated checkpoint buffer "
                                f"{entry['name']!r}")
            arrays[(entry["kind"], entry["name"])] = \
                np.frombuffer(raw, dtype=dtype).reshape(entry["shape"]).copy()
    return header, arrays


def load_network(path) -> Network:
    """Rebuild just the network from a checkpoint."""
    header, arrays = load_checkpoint(path)
    net = Network(NetConfig.from_dict(header["net_config"]),
                  seed=header.get("store_seed", 0))
    net.store.load_arrays({name: arr for (kind, name), arr in arrays.items()
                           if kind == "param"})
    return net


def resume_trainer(path, images, labels, val=None, log_path=None,
                   checkpoint_path=None) -> Trainer:
    """Rebuild network + trainer state; continues exactly where the
    checkpoint left off."""
    header, arrays = load_checkpoint(path)
    if "train_config" not in header:
        raise DataError(f"{path}: checkpoint has no trainer state")
    net = load_network(path)
    config = TrainConfig.from_dict(header["train_config"])
    trainer = Trainer(net, images, labels, config, val=val, log_path=log_path,
                      checkpoint_path=checkpoint_path)
    for name in net.store.names():
        vel = arrays.get(("velocity", name))
        if vel is None:
            raise DataError(f"{path}: checkpoint is missing velocity for {name!r}")
        trainer.optimizer.velocities[name][...] = vel
    trainer.epoch = int(header["epoch"])
    trainer.step_count = int(header["step_count"])
    state = header["rng_state"]
    # JSON round-trips the PCG64 state dict with string keys intact
    trainer.rng.bit_generator.state = state
    return trainer
