"""Training loop: Adam, plateau learning-rate decay, best-on-validation checkpoints."""
from __future__ import annotations

import json
import logging
import math
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .anchors import assign_targets, generate_anchors
from .config import RunProfile, TrainConfig
from .data import DatasetManifest, hflip, resize
from .evaluation import evaluate
from .inference import Predictor
from .losses import targets_to_torch, total_loss
from .model import DaDNet, save_checkpoint

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    pass


def lr_schedule_step(history: Sequence[float], current_lr: float, config: TrainConfig) -> float:
    """Learning rate for the epoch after ``history``.

    Replays the plateau counter over the epoch-mean losses: an epoch counts as
    an improvement only if it beats the best loss so far by more than
    ``plateau_rel_tol`` (relative). After ``plateau_patience`` epochs without
    improvement the rate is multiplied by ``plateau_factor`` and the counter
    restarts.
    """
    if not history:
        raise ValueError("history must be non-empty")
    best, wait, decay = math.inf, 0, False
    for loss in history:
        decay = False
        improved = math.isinf(best) or loss < best - abs(best) * config.plateau_rel_tol
        if improved:
            best, wait = loss, 0
        else:
            wait += 1
            if wait >= config.plateau_patience:
                decay, wait = True, 0
    return current_lr * config.plateau_factor if decay else current_lr


@dataclass
class RunLog:
    records: list = field(default_factory=list)

    @property
    def best_epoch(self):
        best = [r["epoch"] for r in self.records if r["is_best"]]
        return best[-1] if best else None

    def append(self, record: dict, path: Path | None = None):
        self.records.append(record)
        if path is not None:
            with open(path, "a") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> "RunLog":
        lines = Path(path).read_text().splitlines()
        return cls([json.loads(ln) for ln in lines if ln.strip()])


class _TrainSet:
    """Resized images with lazily cached per-anchor targets."""

    def __init__(self, manifest: DatasetManifest, profile: RunProfile, images=None):
        self.profile = profile
        self.images, self.gts = [], []
        for i, sample in enumerate(manifest.samples):
            img = images[i] if images is not None else manifest.load_image(sample)
            img, gts, _ = resize(img, sample.instances, profile.resize)
            self.images.append(img)
            self.gts.append(gts)
        self._cache = {}

    def __len__(self):
        return len(self.images)

    def batch(self, indices, flips):
        imgs, gts = [], []
        for i, f in zip(indices, flips):
            img, g = self.images[i], self.gts[i]
            if f:
                img, g = hflip(img, g)
            imgs.append(img)
            gts.append(g)
        h = max(im.shape[0] for im in imgs)
        w = max(im.shape[1] for im in imgs)
        x = np.zeros((len(imgs), h, w, 3), dtype=np.float32)
        for j, im in enumerate(imgs):
            x[j, : im.shape[0], : im.shape[1]] = im / 255.0
        anchors = generate_anchors(self.profile.anchors, (h, w))
        mc = self.profile.model
        targets = []
        for i, f, g in zip(indices, flips, gts):
            key = (i, f, h, w)
            if key not in self._cache:
                self._cache[key] = assign_targets(anchors, g, self.profile.anchors,
                                                  mc.num_classes, mc.num_attributes)
            targets.append(self._cache[key])
        return torch.from_numpy(x.transpose(0, 3, 1, 2).copy()), targets_to_torch(targets)


def train(model: DaDNet, train_manifest: DatasetManifest, val_manifest: DatasetManifest,
          profile: RunProfile, out_dir=None, train_images=None, val_images=None,
          echo=None):
    """Train ``model`` in place; return ``(best_state_dict, RunLog)``.

    On return ``model`` holds the best-validation weights. With ``out_dir``,
    ``runlog.jsonl``, ``epoch_NNN.ckpt`` and ``best.ckpt`` are written there.
    ``echo`` receives one human-readable line per epoch.
    """
    cfg = profile.train
    if not train_manifest.samples:
        raise ValueError("training manifest is empty")
    if not val_manifest.samples:
        raise ValueError("validation manifest is empty")
    out_dir = Path(out_dir) if out_dir is not None else None
    runlog_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        runlog_path = out_dir / "runlog.jsonl"
        runlog_path.write_text("")
    meta = {"profile": profile.to_dict(), "class_names": list(train_manifest.class_names),
            "attribute_names": list(train_manifest.attribute_names)}

    torch.manual_seed(cfg.seed)
    dataset = _TrainSet(train_manifest, profile, train_images)
    if val_images is None:
        val_images = [val_manifest.load_image(s) for s in val_manifest.samples]
    predictor = Predictor(model, profile.anchors, profile.decode, profile.resize)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.base_lr, betas=(cfg.beta1, cfg.beta2),
                           weight_decay=0.0)
    runlog = RunLog()
    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    best_auc = -math.inf
    if out_dir is not None:
        save_checkpoint(out_dir / "best.ckpt", model, {**meta, "epoch": 0})

    lr = cfg.base_lr
    history = []
    dtype = next(model.parameters()).dtype
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(dataset))
        flips = rng.random(len(dataset)) < 0.5 if cfg.hflip else np.zeros(len(dataset), bool)
        model.train()
        sums = {"class_loss": 0.0, "box_loss": 0.0, "attr_loss": 0.0, "total": 0.0}
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x, targets = dataset.batch(idx, flips[idx])
            cls, box, attr = model(x.to(dtype)).flatten()
            targets = {k: (v.to(dtype) if v.is_floating_point() else v)
                       for k, v in targets.items()}
            losses = total_loss(cls, box, attr, targets, cfg.loss_weights, cfg.focal,
                                cfg.attr_on_negatives)
            if not torch.isfinite(losses.total):
                raise NonFiniteLossError(
                    f"epoch {epoch}: non-finite loss on batch of samples {idx.tolist()}")
            opt.zero_grad(set_to_none=False)
            losses.total.backward()
            if cfg.grad_clip_norm:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip_norm)
            opt.step()
            for k in sums:
                sums[k] += float(getattr(losses, k).detach())
            n_batches += 1
        means = {k: v / n_batches for k, v in sums.items()}
        history.append(means["total"])

        report = evaluate(predictor, val_manifest, profile.eval, images=val_images)
        auc = report.micro_auc
        is_best = auc is not None and auc > best_auc
        if is_best:
            best_auc = auc
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        record = {"epoch": epoch, "lr": lr, "train": means, "val_micro_auc": auc,
                  "val_recall": report.recall, "val_match_coverage": report.match_coverage,
                  "is_best": is_best, "seconds": round(time.perf_counter() - t0, 3)}
        if out_dir is not None:
            if cfg.keep_epoch_checkpoints:
                save_checkpoint(out_dir / f"epoch_{epoch:03d}.ckpt", model, {**meta, "epoch": epoch})
            if is_best:
                if cfg.keep_epoch_checkpoints:
                    shutil.copyfile(out_dir / f"epoch_{epoch:03d}.ckpt", out_dir / "best.ckpt")
                else:
                    save_checkpoint(out_dir / "best.ckpt", model, {**meta, "epoch": epoch})
        runlog.append(record, runlog_path)
        line = (f"epoch {epoch:3d}  lr {lr:.2e}  loss {means['total']:.4f} "
                f"(cls {means['class_loss']:.4f} box {means['box_loss']:.4f} "
                f"attr {means['attr_loss']:.4f})  val AUC "
                f"{'n/a' if auc is None else f'{auc:.4f}'}  recall {report.recall:.3f}"
                f"{'  *' if is_best else ''}")
        log.info(line)
        if echo is not None:
            echo(line)

        new_lr = lr_schedule_step(history, lr, cfg)
        if new_lr != lr:
            lr = new_lr
            for group in opt.param_groups:
                group["lr"] = lr

    model.load_state_dict(best_state)
    return best_state, runlog
