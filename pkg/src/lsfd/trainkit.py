"""Optimization loop: Adam, plateau learning-rate schedule, checkpoints,
and curriculum initialization for larger view counts.

Everything is keyed by (config, seed): view sampling, augmentation and
the short-view index draws come from per-(epoch, video) counter-based
streams, so a full run reproduces bit-for-bit and any single batch can
be replayed in isolation.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import rng as rngmod
from . import tensor as T
from .model import EncoderConfig, ModelPair
from .objective import (LossConfig, LossFlags, MemoryBank, ViewBatchFeatures,
                        draw_short_view_indices, loss_instance,
                        loss_non_stationary, loss_stationary, total_loss)
from .synthvid import Corpus
from .tensor import Tensor
from .viewkit import AugConfig, sample_views

_CKPT_MAGIC = b"LSFDCKPT"
_CKPT_VERSION = 1


class TrainError(RuntimeError):
    """Raised on optimization or checkpoint failures."""


@dataclass(frozen=True)
class TrainConfig:
    n_views: int = 2
    clip_len: int = 8
    stride: int = 1
    batch_size: int = 16
    epochs: int = 40
    lr: float = 1e-3
    weight_decay: float = 1e-5
    momentum: float = 0.99
    tau: float = 0.1
    bank_capacity: int = 4096
    aggregator: str = "sum"
    loss_stationary: bool = True
    loss_non_stationary: bool = True
    loss_instance: bool = True
    seed: int = 0
    plateau_patience: int = 5
    plateau_factor: float = 10.0
    plateau_rel_tol: float = 1e-3
    crop_size: int = 24
    channels: tuple[int, ...] = (8, 16, 32)
    feature_dim: int = 32
    start_policy: str = "uniform"

    def __post_init__(self):
        for name in ("n_views", "clip_len", "stride", "batch_size", "epochs",
                     "bank_capacity", "plateau_patience", "crop_size"):
            if getattr(self, name) < 1:
                raise TrainError(f"{name} must be positive, got {getattr(self, name)}")
        if self.plateau_factor <= 1.0:
            raise TrainError(f"plateau_factor must exceed 1, got {self.plateau_factor}")

    @property
    def flags(self) -> LossFlags:
        return LossFlags(self.loss_stationary, self.loss_non_stationary,
                         self.loss_instance)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(channels=tuple(self.channels),
                             feature_dim=self.feature_dim)


class Adam:
    """Adam with bias correction; weight decay enters as an L2 term added
    to the gradient (classic coupled form)."""

    def __init__(self, lr: float, weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def step(self, params: dict[str, Tensor]) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        corr1 = 1.0 - b1 ** self.step_count
        corr2 = 1.0 - b2 ** self.step_count
        for name, p in params.items():
            if p.grad is None:
                raise TrainError(f"adam_step: missing gradient for {name}")
            g = p.grad + self.weight_decay * p.data
            if name not in self.moments:
                self.moments[name] = (np.zeros_like(p.data), np.zeros_like(p.data))
            m, v = self.moments[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)


def plateau_schedule(history, patience: int, factor: float,
                     rel_tol: float = 1e-3, base_lr: float = 1e-3) -> float:
    """Learning rate after replaying the validation history: each time the
    best value fails to improve by more than rel_tol (relative) for
    `patience` evaluations, the rate drops by `factor`."""
    if not history:
        raise TrainError("plateau_schedule: empty history")
    lr = base_lr
    best = history[0]
    streak = 0
    for value in history[1:]:
        if value < best * (1.0 - rel_tol):
            best = value
            streak = 0
        else:
            streak += 1
            if streak >= patience:
                lr /= factor
                streak = 0
    return lr


class Trainer:
    """Owns the momentum pair, optimizer, memory bank and epoch loop."""

    def __init__(self, corpus: Corpus, cfg: TrainConfig):
        self.corpus = corpus
        self.cfg = cfg
        self.pair = ModelPair(cfg.encoder_config(), cfg.n_views, cfg.aggregator,
                              cfg.momentum, rngmod.stream(cfg.seed, rngmod.INIT))
        self.optimizer = Adam(cfg.lr, cfg.weight_decay)
        self.bank = MemoryBank(cfg.bank_capacity, cfg.encoder_config().half_dim)
        self.loss_cfg = LossConfig(tau=cfg.tau)
        self.aug_cfg = AugConfig(out_size=cfg.crop_size)
        self.epoch = 0
        self.history: list[dict] = []

    # ------------------------------------------------------------------
    # batch preparation

    def _views_for(self, clip_id: int, stream_tag: int, stream_index: int):
        cfg = self.cfg
        rng = rngmod.stream(cfg.seed, stream_tag, stream_index)
        vs = sample_views(self.corpus.clips[clip_id], cfg.n_views, cfg.clip_len,
                          cfg.stride, cfg.start_policy, rng, self.aug_cfg)
        j = int(draw_short_view_indices(rng, 1, cfg.n_views, self.loss_cfg)[0])
        return vs, j

    def _prepare_batch(self, clip_ids, epoch: int, validation: bool = False):
        shorts, longs_a, longs_b, j_idx = [], [], [], []
        for cid in clip_ids:
            if validation:
                vs, j = self._views_for(cid, rngmod.VAL_VIEWS, cid)
            else:
                vs, j = self._views_for(cid, rngmod.VIEWS, (epoch << 32) | cid)
            for view in vs.short_views:
                shorts.append(view.transpose(1, 0, 2, 3))  # [3,L,h,w]
            longs_a.append(vs.long_view_a.transpose(1, 0, 2, 3))
            longs_b.append(vs.long_view_b.transpose(1, 0, 2, 3))
            j_idx.append(j)
        return (np.stack(shorts), np.stack(longs_a), np.stack(longs_b),
                np.array(j_idx, dtype=np.intp))

    def _compute_losses(self, batch, snapshot) -> tuple[dict[str, Tensor], ViewBatchFeatures]:
        shorts, longs_a, longs_b, j_idx = batch
        query = self.pair.query
        short_feats = query.encoder.encode(shorts)
        long_q = query.encoder.encode(longs_a)
        key_feats = self.pair.key.encoder.encode(longs_b)
        feats = ViewBatchFeatures(
            short=short_feats,
            long_query=long_q,
            key_stationary=key_feats.stationary.data,
            key_non_stationary=key_feats.non_stationary.data,
            key_full=key_feats.full.data,
            n_views=self.cfg.n_views,
        )
        parts = {
            "stationary": loss_stationary(feats, snapshot, query.head_stationary,
                                          self.loss_cfg, j_idx),
            "non_stationary": loss_non_stationary(feats, self.pair.aggregator,
                                                  snapshot, query.head_non_stationary,
                                                  self.loss_cfg),
            "instance": loss_instance(feats, snapshot, query.head_instance,
                                      self.loss_cfg),
        }
        return parts, feats

    # ------------------------------------------------------------------
    # epoch loop

    def train_epoch(self) -> dict:
        cfg = self.cfg
        order = rngmod.stream(cfg.seed, rngmod.SHUFFLE, self.epoch).permutation(
            np.array(self.corpus.train_ids))
        sums = {"stationary": 0.0, "non_stationary": 0.0, "instance": 0.0,
                "total": 0.0}
        n_steps = 0
        for lo in range(0, len(order), cfg.batch_size):
            clip_ids = [int(c) for c in order[lo:lo + cfg.batch_size]]
            batch = self._prepare_batch(clip_ids, self.epoch)
            snapshot = self.bank.snapshot()
            parts, feats = self._compute_losses(batch, snapshot)
            loss = total_loss(parts, cfg.flags)
            if loss._grad_fn is not None:
                T.backward(loss)
                trainable = {n: p for n, p in self.pair.trainable_parameters().items()
                             if p.grad is not None}
                if trainable:
                    self.optimizer.step(trainable)
                for p in self.pair.trainable_parameters().values():
                    p.zero_grad()
            self.pair.momentum_update()
            for b in range(len(clip_ids)):
                self.bank.push(feats.key_stationary[b], feats.key_non_stationary[b])
            for name in parts:
                sums[name] += parts[name].item()
            sums["total"] += loss.item()
            n_steps += 1

        val = self.validation_loss()
        stats = {
            "epoch": self.epoch,
            "lr": self.optimizer.lr,
            "loss_total": sums["total"] / n_steps,
            "loss_stationary": sums["stationary"] / n_steps,
            "loss_non_stationary": sums["non_stationary"] / n_steps,
            "loss_instance": sums["instance"] / n_steps,
            "val_loss": val,
            "bank_size": len(self.bank),
        }
        self.history.append(stats)
        self.epoch += 1
        self.optimizer.lr = plateau_schedule(
            [h["val_loss"] for h in self.history], cfg.plateau_patience,
            cfg.plateau_factor, cfg.plateau_rel_tol, cfg.lr)
        return stats

    def validation_loss(self) -> float:
        """Total loss on held-out videos, query encoder on both long views
        (key-free), against a frozen bank snapshot. Views are fixed per
        video across epochs."""
        cfg = self.cfg
        snapshot = self.bank.snapshot()
        trainable = self.pair.trainable_parameters()
        saved = {n: p.requires_grad for n, p in trainable.items()}
        for p in trainable.values():
            p.requires_grad = False
        try:
            total = 0.0
            n_steps = 0
            ids = list(self.corpus.test_ids)
            for lo in range(0, len(ids), cfg.batch_size):
                batch = self._prepare_batch(ids[lo:lo + cfg.batch_size], 0,
                                            validation=True)
                shorts, longs_a, longs_b, j_idx = batch
                query = self.pair.query
                short_feats = query.encoder.encode(shorts)
                long_q = query.encoder.encode(longs_a)
                key_free = query.encoder.encode(longs_b)
                feats = ViewBatchFeatures(
                    short=short_feats, long_query=long_q,
                    key_stationary=key_free.stationary.data,
                    key_non_stationary=key_free.non_stationary.data,
                    key_full=key_free.full.data, n_views=cfg.n_views)
                parts = {
                    "stationary": loss_stationary(feats, snapshot,
                                                  query.head_stationary,
                                                  self.loss_cfg, j_idx),
                    "non_stationary": loss_non_stationary(
                        feats, self.pair.aggregator, snapshot,
                        query.head_non_stationary, self.loss_cfg),
                    "instance": loss_instance(feats, snapshot,
                                              query.head_instance, self.loss_cfg),
                }
                total += total_loss(parts, cfg.flags).item()
                n_steps += 1
            return total / n_steps
        finally:
            for n, p in trainable.items():
                p.requires_grad = saved[n]

    def fit(self, log_path: Path | None = None,
            checkpoint_dir: Path | None = None) -> list[dict]:
        best_val = np.inf
        for _ in range(self.cfg.epochs):
            stats = self.train_epoch()
            if log_path is not None:
                with open(log_path, "a") as fh:
                    fh.write(json.dumps(stats, sort_keys=True) + "\n")
            if checkpoint_dir is not None:
                save_checkpoint(Path(checkpoint_dir) / "last.ckpt", self)
                if stats["val_loss"] < best_val:
                    best_val = stats["val_loss"]
                    save_checkpoint(Path(checkpoint_dir) / "best.ckpt", self)
        return self.history


# ---------------------------------------------------------------------------
# checkpointing

def _param_manifest(trainer: Trainer) -> list[tuple[str, list[int]]]:
    return [(name, list(p.data.shape))
            for name, p in trainer.pair.all_parameters().items()]


def save_checkpoint(path: Path, trainer: Trainer) -> None:
    params = trainer.pair.all_parameters()
    manifest = _param_manifest(trainer)
    opt_names = [n for n in trainer.pair.trainable_parameters()
                 if n in trainer.optimizer.moments]
    bank = trainer.bank.snapshot()
    header = {
        "config": asdict(trainer.cfg),
        "epoch": trainer.epoch,
        "lr": trainer.optimizer.lr,
        "weight_decay": trainer.optimizer.weight_decay,
        "adam_step": trainer.optimizer.step_count,
        "loss_history": trainer.history,
        "rng": {"seed": trainer.cfg.seed, "next_epoch": trainer.epoch},
        "manifest": manifest,
        "optimizer_params": opt_names,
        "bank_size": len(bank),
        "bank_half_dim": trainer.bank.half_dim,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", _CKPT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name, _ in manifest:
            fh.write(np.ascontiguousarray(params[name].data, dtype="<f8").tobytes())
        for name in opt_names:
            m, v = trainer.optimizer.moments[name]
            fh.write(np.ascontiguousarray(m, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(bank.stationary, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(bank.non_stationary, dtype="<f8").tobytes())


@dataclass
class Checkpoint:
    config: TrainConfig
    epoch: int
    lr: float
    weight_decay: float
    adam_step: int
    loss_history: list
    params: dict[str, np.ndarray]
    moments: dict[str, tuple[np.ndarray, np.ndarray]]
    bank_stationary: np.ndarray
    bank_non_stationary: np.ndarray


def load_checkpoint(path: Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != _CKPT_MAGIC:
        raise TrainError(f"{path}: bad checkpoint magic {raw[:8]!r}")
    (version,) = struct.unpack_from("<I", raw, 8)
    if version != _CKPT_VERSION:
        raise TrainError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<I", raw, 12)
    header = json.loads(raw[16:16 + hlen].decode())
    off = 16 + hlen
    params: dict[str, np.ndarray] = {}
    for name, shape in header["manifest"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off)
        params[name] = arr.reshape(shape).copy()
        off += 8 * count
    shapes = dict(header["manifest"])
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for name in header["optimizer_params"]:
        shape = shapes[name]
        count = int(np.prod(shape)) if shape else 1
        m = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += 8 * count
        v = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += 8 * count
        moments[name] = (m, v)
    bank_n = header["bank_size"]
    half = header["bank_half_dim"]
    bank_s = np.frombuffer(raw, dtype="<f8", count=bank_n * half,
                           offset=off).reshape(bank_n, half).copy()
    off += 8 * bank_n * half
    bank_d = np.frombuffer(raw, dtype="<f8", count=bank_n * half,
                           offset=off).reshape(bank_n, half).copy()
    off += 8 * bank_n * half
    if off != len(raw):
        raise TrainError(f"{path}: {len(raw) - off} trailing bytes")
    cfg_dict = dict(header["config"])
    cfg_dict["channels"] = tuple(cfg_dict["channels"])
    return Checkpoint(
        config=TrainConfig(**cfg_dict),
        epoch=header["epoch"],
        lr=header["lr"],
        weight_decay=header["weight_decay"],
        adam_step=header["adam_step"],
        loss_history=header["loss_history"],
        params=params,
        moments=moments,
        bank_stationary=bank_s,
        bank_non_stationary=bank_d,
    )


def restore_trainer(corpus: Corpus, ckpt: Checkpoint) -> Trainer:
    """Rebuild a trainer in the exact state the checkpoint was saved in."""
    trainer = Trainer(corpus, ckpt.config)
    target = trainer.pair.all_parameters()
    for name, arr in ckpt.params.items():
        if name not in target:
            raise TrainError(f"checkpoint parameter {name} unknown to this model")
        if target[name].data.shape != arr.shape:
            raise TrainError(
                f"checkpoint parameter {name} has shape {arr.shape}, "
                f"model expects {target[name].data.shape}")
        target[name].data[...] = arr
    trainer.optimizer.lr = ckpt.lr
    trainer.optimizer.weight_decay = ckpt.weight_decay
    trainer.optimizer.step_count = ckpt.adam_step
    trainer.optimizer.moments = {n: (m.copy(), v.copy())
                                 for n, (m, v) in ckpt.moments.items()}
    trainer.epoch = ckpt.epoch
    trainer.history = list(ckpt.loss_history)
    for s, d in zip(ckpt.bank_stationary, ckpt.bank_non_stationary):
        trainer.bank.push(s, d)
    return trainer


CURRICULUM_LR = 1e-4
CURRICULUM_WEIGHT_DECAY = 1e-6


def curriculum_init(corpus: Corpus, cfg: TrainConfig, checkpoint_path: Path) -> Trainer:
    """Start an N-view run from an (N-1)-view checkpoint: encoder and head
    parameters carry over bit-exactly (both branches); aggregator parameters
    carry over only when their shapes do not depend on the view count.
    Training resumes with the reduced curriculum rate and decay and a fresh
    optimizer."""
    ckpt = load_checkpoint(checkpoint_path)
    if ckpt.config.feature_dim != cfg.feature_dim or \
            tuple(ckpt.config.channels) != tuple(cfg.channels):
        raise TrainError(
            f"curriculum_init: checkpoint encoder (channels {ckpt.config.channels}, "
            f"D={ckpt.config.feature_dim}) does not match target "
            f"(channels {cfg.channels}, D={cfg.feature_dim})")
    cfg = replace(cfg, lr=CURRICULUM_LR, weight_decay=CURRICULUM_WEIGHT_DECAY)
    trainer = Trainer(corpus, cfg)
    target = trainer.pair.all_parameters()
    for name, arr in ckpt.params.items():
        if name.startswith("agg."):
            if name in target and target[name].data.shape == arr.shape:
                target[name].data[...] = arr
            continue
        if target[name].data.shape != tuple(arr.shape):
            raise TrainError(
                f"curriculum_init: {name} has shape {arr.shape}, "
                f"model expects {target[name].data.shape}")
        target[name].data[...] = arr
    return trainer
