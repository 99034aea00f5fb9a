"""Epoch-based triplet training with per-epoch hard-negative mining."""

import copy
import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .backbones import extract_descriptors, to_tensor
from .checkpoint import decode_checkpoint, encode_checkpoint
from .errors import TrainingError, ValidationError
from .fileio import atomic_write
from .losses import LAMBDA_SOS, MARGIN, LossConfig, loss_terms
from .mining import DESK_MINING, MiningConfig, mine_epoch

log = logging.getLogger(__name__)

VAL_EPOCH = 10**9  # fixed mining seed slot for the validation triplets


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    lr: float = 1e-6
    lr_p: float = 1e-4
    decay: float = 0.01
    margin: float = MARGIN
    lam: float = LAMBDA_SOS
    mining: MiningConfig = field(default_factory=MiningConfig)
    freeze_backbone: bool = True
    train_p: bool = True
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValidationError("epochs must be >= 0 and batch_size >= 1")
        if self.lr <= 0 or self.lr_p <= 0 or self.decay < 0:
            raise ValidationError("learning rates must be positive and decay non-negative")
        if self.lr_p < self.lr:
            raise ValidationError(f"lr_p ({self.lr_p}) must be >= lr ({self.lr})")
        if not 0 <= self.val_fraction < 1:
            raise ValidationError("val_fraction must lie in [0, 1)")

    @property
    def loss(self):
        return LossConfig(self.margin, self.lam)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


FULL_PROFILE = TrainConfig()
# Full-scale anchors/pool shrunk to the desk. The rates are raised: at 1e-6 a
# toy network barely moves in 20 epochs of 8 steps.
DESK_PROFILE = TrainConfig(epochs=20, lr=1e-3, lr_p=1e-2, mining=DESK_MINING)


@dataclass
class ImageSet:
    images: list
    labels: np.ndarray
    ids: list

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        self.ids = [str(i) for i in self.ids]
        if not len(self.images) == len(self.labels) == len(self.ids):
            raise ValidationError("images, labels and ids differ in length")

    def __len__(self):
        return len(self.ids)


@dataclass
class EpochStats:
    epoch: int
    loss: float
    fos: float
    sos: float
    val_loss: float
    p: float
    grad_norm: float
    lr: float
    n_triplets: int
    wall_time: float

    def to_json(self):
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)

    def to_jsonl(self):
        return "".join(e.to_json() + "\n" for e in self.epochs)

    @classmethod
    def from_jsonl(cls, text):
        return cls([EpochStats(**json.loads(line)) for line in text.splitlines() if line.strip()])


def split_classes(labels, fraction, seed):
    """Hold out ``ceil(fraction * n_classes)`` classes; returns ``(train_idx, val_idx)``."""
    classes = sorted(set(np.asarray(labels).tolist()))
    n_val = math.ceil(fraction * len(classes)) if fraction > 0 else 0
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7919]))
    held = set(rng.permutation(np.array(classes, dtype=object))[:n_val].tolist())
    mask = np.array([c in held for c in np.asarray(labels).tolist()], dtype=bool)
    return np.flatnonzero(~mask), np.flatnonzero(mask)


class Trainer:
    """Owns a model and its optimizer for the duration of training."""

    def __init__(self, model, data, cfg):
        self.model = model
        self.data = data
        self.cfg = cfg
        self.mining = dataclasses.replace(cfg.mining, seed=cfg.seed)
        self.train_idx, self.val_idx = split_classes(data.labels, cfg.val_fraction, cfg.seed)
        frozen = set(map(id, model.backbone_parameters())) if cfg.freeze_backbone else set()
        p_param = model.gem.p if model.gem is not None else None
        self.p_params, self.params = [], []
        for prm in model.parameters():
            if not prm.requires_grad or id(prm) in frozen:
                continue
            if prm is p_param:
                if cfg.train_p:
                    self.p_params.append(prm)
            else:
                self.params.append(prm)
        groups = [g for g in ({"params": self.params, "lr": cfg.lr, "base_lr": cfg.lr},
                              {"params": self.p_params, "lr": cfg.lr_p, "base_lr": cfg.lr_p})
                  if g["params"]]
        if not groups:
            raise ValidationError("no trainable parameters")
        self.optimizer = torch.optim.Adam(groups)
        self._trainable = {id(p) for g in groups for p in g["params"]}

    def _set_lr(self, epoch):
        for g in self.optimizer.param_groups:
            g["lr"] = g["base_lr"] * math.exp(-self.cfg.decay * epoch)

    def _descriptors(self):
        return extract_descriptors(self.data.images, self.model)

    def _batch_loss(self, groups):
        needed = sorted({i for grp in groups for t in grp for i in (t.anchor, t.positive, t.negative)})
        row = {idx: r for r, idx in enumerate(needed)}
        x = to_tensor(np.stack([self.data.images[i] for i in needed]), self.model.dtype)
        desc = self.model(x)
        flat = [t for grp in groups for t in grp]
        pick = lambda attr: desc[[row[getattr(t, attr)] for t in flat]]
        return loss_terms((pick("anchor"), pick("positive"), pick("negative")), self.cfg.loss), len(flat)

    def validation_loss(self, descriptors=None):
        if len(self.val_idx) == 0:
            return float("nan")
        if descriptors is None:
            descriptors = self._descriptors()
        val_mining = dataclasses.replace(self.mining, anchors_per_epoch=len(self.val_idx))
        groups = mine_epoch(descriptors, self.data.labels, self.data.ids, val_mining, VAL_EPOCH,
                            candidates=np.arange(len(self.data)), anchor_candidates=self.val_idx)
        was = self.model.training
        self.model.eval()
        try:
            with torch.no_grad():
                (total, _, _), _ = self._batch_loss(groups)
        finally:
            self.model.train(was)
        return float(total)

    def run_epoch(self, epoch):
        start = time.perf_counter()
        cfg = self.cfg
        self._set_lr(epoch)
        descs = self._descriptors()
        groups = mine_epoch(descs, self.data.labels, self.data.ids, self.mining, epoch,
                            candidates=self.train_idx)
        self.model.train()
        sums = np.zeros(3)
        grad_norms, n_trip, n_batches = [], 0, 0
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed * 100003 + epoch)
            for b in range(0, len(groups), cfg.batch_size):
                (total, fos, sos), n = self._batch_loss(groups[b:b + cfg.batch_size])
                if not torch.isfinite(total):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}, batch {b // cfg.batch_size}: "
                        f"total={total.item()}, fos={fos.item()}, sos={sos.item()}")
                self.optimizer.zero_grad(set_to_none=True)
                total.backward()
                grads = [p.grad for g in self.optimizer.param_groups for p in g["params"]
                         if p.grad is not None]
                grad_norms.append(float(torch.linalg.vector_norm(
                    torch.stack([torch.linalg.vector_norm(g) for g in grads]))) if grads else 0.0)
                self._guarded_step(epoch, b // cfg.batch_size)
                sums += [total.item(), fos.item(), sos.item()]
                n_trip += n
                n_batches += 1
        self.model.eval()
        val = self.validation_loss()
        p = float(self.model.gem.p.item()) if self.model.gem is not None else float("nan")
        means = sums / max(n_batches, 1)
        return EpochStats(epoch, means[0], means[1], means[2], val, p,
                          float(np.mean(grad_norms)) if grad_norms else 0.0,
                          self.optimizer.param_groups[0]["lr"], n_trip,
                          time.perf_counter() - start)

    def _guarded_step(self, epoch, batch):
        params = [p for g in self.optimizer.param_groups for p in g["params"]]
        backup = [p.detach().clone() for p in params]
        state_backup = copy.deepcopy(self.optimizer.state_dict())
        self.optimizer.step()
        if self.model.gem is not None:
            self.model.gem.project()
        if not all(torch.isfinite(p).all() for p in params):
            with torch.no_grad():
                for p, old in zip(params, backup):
                    p.copy_(old)
            self.optimizer.load_state_dict(state_backup)
            raise TrainingError(f"optimizer step produced non-finite parameters at epoch {epoch}, "
                                f"batch {batch}; parameters restored")

    # checkpoint state ------------------------------------------------------

    def optimizer_tensors(self):
        out = {}
        for idx, st in self.optimizer.state_dict()["state"].items():
            for key, value in st.items():
                out[f"optim/{idx}/{key}"] = torch.as_tensor(value).detach().cpu().numpy()
        return out

    def load_optimizer_tensors(self, tensors):
        state = {}
        for name, value in tensors.items():
            _, idx, key = name.split("/")
            state.setdefault(int(idx), {})[key] = torch.from_numpy(value).reshape(
                () if key == "step" else value.shape)
        sd = self.optimizer.state_dict()
        sd["state"] = state
        self.optimizer.load_state_dict(sd)


def train(model, data, cfg, checkpoint_dir=None, resume=True, on_epoch=None):
    """Train for ``cfg.epochs`` epochs; return ``(best model, TrainReport)``.

    The best model is the epoch with the lowest held-out triplet loss (the
    last epoch when there is no validation split). With ``checkpoint_dir``
    each epoch writes ``last.ckpt``, ``best.ckpt`` and ``report.jsonl``, and
    an interrupted run resumes from ``last.ckpt``.
    """
    report = TrainReport()
    if cfg.epochs == 0:
        return model, report
    flags = {id(p): p.requires_grad for p in model.parameters()}
    if cfg.freeze_backbone:
        for p in model.backbone_parameters():
            p.requires_grad_(False)
    try:
        trainer = Trainer(model, data, cfg)
        best_state, best_val, first = None, math.inf, 0
        if checkpoint_dir:
            os.makedirs(checkpoint_dir, exist_ok=True)
            last = os.path.join(checkpoint_dir, "last.ckpt")
            if resume and os.path.exists(last):
                first, best_val, report = _resume(trainer, checkpoint_dir)
                best_state = copy.deepcopy(_load_state(os.path.join(checkpoint_dir, "best.ckpt")))
        for epoch in range(first, cfg.epochs):
            stats = trainer.run_epoch(epoch)
            report.epochs.append(stats)
            log.info("epoch %d loss %.5f (fos %.5f sos %.5f) val %.5f p %.3f", epoch, stats.loss,
                     stats.fos, stats.sos, stats.val_loss, stats.p)
            score = stats.val_loss if not math.isnan(stats.val_loss) else -epoch
            improved = score < best_val
            if improved:
                best_val = score
                best_state = copy.deepcopy(model.state_dict())
            if checkpoint_dir:
                meta = {"epoch": epoch, "best_val": best_val}
                if improved:
                    atomic_write(os.path.join(checkpoint_dir, "best.ckpt"),
                                 encode_checkpoint(model, meta))
                atomic_write(os.path.join(checkpoint_dir, "report.jsonl"), report.to_jsonl(), "w")
                atomic_write(os.path.join(checkpoint_dir, "last.ckpt"),
                             encode_checkpoint(model, meta, trainer.optimizer_tensors()))
            if on_epoch is not None:
                on_epoch(stats)
    finally:
        for p in model.parameters():
            p.requires_grad_(flags[id(p)])
    if best_state is not None:
        model.load_state_dict(best_state)
    return model, report


def _load_state(path):
    with open(path, "rb") as fh:
        model, _, _ = decode_checkpoint(fh.read())
    return model.state_dict()


def _resume(trainer, checkpoint_dir):
    with open(os.path.join(checkpoint_dir, "last.ckpt"), "rb") as fh:
        saved, meta, extra = decode_checkpoint(fh.read())
    trainer.model.load_state_dict(saved.state_dict())
    trainer.load_optimizer_tensors({k: v for k, v in extra.items() if k.startswith("optim/")})
    with open(os.path.join(checkpoint_dir, "report.jsonl")) as fh:
        report = TrainReport.from_jsonl(fh.read())
    report.epochs = report.epochs[:meta["epoch"] + 1]
    log.info("resuming after epoch %d", meta["epoch"])
    return meta["epoch"] + 1, meta["best_val"], report

