"""Toy detection trainer: center-cell targets, YOLO-style loss, AdamW, early stopping."""

from __future__ import annotations

import copy
import csv
import io
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Dataset
from .metrics import Box, GroundTruth, MetricsReport, evaluate
from .model import Model, decode
from .tensor import Tensor


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    patience: int = 50
    val_fraction: float = 0.1
    box_weight: float = 5.0
    augment: bool = True  # random dihedral flips/transposes
    seed: int = 42

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.patience < 1:
            raise ValueError(f"invalid training config {self}")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be >= 0")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must be in [0, 1), got {self.val_fraction}")


# -- targets and loss -------------------------------------------------------------


def build_targets(labels: list[list[GroundTruth]], grid: tuple[int, int], image_size: tuple[int, int],
                  num_classes: int) -> dict[str, np.ndarray]:
    """Assign each GT to the cell holding its centre; box targets live in (0, 1)."""
    n = len(labels)
    gh, gw = grid
    img_h, img_w = image_size
    obj = np.zeros((n, 1, gh, gw))
    box = np.zeros((n, 4, gh, gw))
    cls = np.zeros((n, num_classes, gh, gw))
    for b, gts in enumerate(labels):
        for g in gts:
            cx = (g.box.x1 + g.box.x2) / 2 * gw / img_w
            cy = (g.box.y1 + g.box.y2) / 2 * gh / img_h
            gx, gy = min(int(cx), gw - 1), min(int(cy), gh - 1)
            obj[b, 0, gy, gx] = 1.0
            box[b, :, gy, gx] = (cx - gx, cy - gy, (g.box.x2 - g.box.x1) / img_w, (g.box.y2 - g.box.y1) / img_h)
            cls[b, :, gy, gx] = 0.0
            cls[b, g.class_id, gy, gx] = 1.0
    return {"obj": obj, "box": box, "cls": cls}


def detection_loss(head: Tensor, targets: dict[str, np.ndarray], box_weight: float = 5.0) -> tuple[Tensor, dict]:
    """Objectness BCE + class cross-entropy + box L1 on sigmoid outputs, per image."""
    n = head.shape[0]
    nc = head.shape[1] - 5
    z_obj = T.narrow(head, 1, 0, 1)
    z_box = T.narrow(head, 1, 1, 4)
    z_cls = T.narrow(head, 1, 5, nc)
    pos = targets["obj"]
    pos4 = np.repeat(pos, 4, axis=1)
    # BCE with logits: softplus(z) - y z
    l_obj = T.sum_(T.softplus(z_obj) - T.mul(z_obj, Tensor(pos)))
    l_cls = -T.sum_(T.mul(T.log_softmax(z_cls, axis=1), Tensor(targets["cls"])))
    resid = T.sigmoid(z_box) - Tensor(targets["box"])
    l_box = T.sum_(T.mul(T.abs_(resid), Tensor(pos4)))
    total = T.mul(l_obj + l_cls + T.mul(l_box, box_weight), 1.0 / n)
    parts = {"obj": l_obj.item() / n, "cls": l_cls.item() / n, "box": l_box.item() / n}
    return total, parts


def batch_loss(model: Model, images: np.ndarray, labels, image_size, box_weight: float) -> tuple[Tensor, dict]:
    heads = model(Tensor(images))
    total = None
    parts: dict[str, float] = {}
    for h in heads:
        tg = build_targets(labels, h.shape[2:], image_size, h.shape[1] - 5)
        loss, p = detection_loss(h, tg, box_weight)
        total = loss if total is None else total + loss
        for k, v in p.items():
            parts[k] = parts.get(k, 0.0) + v
    return total, parts


# -- optimiser ----------------------------------------------------------------------


class AdamW:
    """Decoupled weight decay on tensors with ndim > 1; biases are not decayed."""

    def __init__(self, params: dict[str, Tensor], lr: float, weight_decay: float, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.wd, self.betas, self.eps = lr, weight_decay, betas, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, params: dict[str, Tensor]) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            if p.ndim > 1:
                update = update + self.wd * p.data
            p.data -= self.lr * update


# -- training loop ---------------------------------------------------------------------


@dataclass
class TrainResult:
    history: list[tuple[int, float, float]]
    best_epoch: int
    best_val_loss: float
    best_state: dict[str, np.ndarray]
    stopped_early: bool

    def loss_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss"])
        for e, tr, va in self.history:
            w.writerow([e, repr(tr), repr(va)])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.loss_csv())

    def smoothed(self, window: int = 5) -> np.ndarray:
        tr = np.array([h[1] for h in self.history])
        if tr.size == 0:
            return tr
        k = min(window, tr.size)
        return np.convolve(tr, np.ones(k) / k, mode="valid")


def split_train_val(ds: Dataset, val_fraction: float) -> tuple[Dataset, Dataset]:
    n_val = int(round(len(ds) * val_fraction))
    n_tr = len(ds) - n_val
    return ds.subset(range(n_tr)), ds.subset(range(n_tr, len(ds)))


def dihedral(images: np.ndarray, labels, codes: np.ndarray, size: tuple[int, int]):
    """Apply one of 8 flips/transposes per image: bit 0 h-flip, bit 1 v-flip, bit 2 transpose.

    Transposes are only drawn for square images; the scenes have no preferred orientation.
    """
    h, w = size
    images = images.copy()
    out = []
    for b, gts in enumerate(labels):
        code = int(codes[b])
        img = images[b].copy()
        boxes = [(g.box.x1, g.box.y1, g.box.x2, g.box.y2) for g in gts]
        if code & 1:
            img = img[..., ::-1]
            boxes = [(w - x2, y1, w - x1, y2) for x1, y1, x2, y2 in boxes]
        if code & 2:
            img = img[..., ::-1, :]
            boxes = [(x1, h - y2, x2, h - y1) for x1, y1, x2, y2 in boxes]
        if code & 4 and h == w:
            img = img.transpose(0, 2, 1)
            boxes = [(y1, x1, y2, x2) for x1, y1, x2, y2 in boxes]
        images[b] = img
        out.append([GroundTruth(Box(*bx), g.class_id) for bx, g in zip(boxes, gts)])
    return images, out


def _check_finite(value: float, epoch: int, where: str, parts: dict | None = None) -> None:
    if not np.isfinite(value):
        detail = f" (terms {parts})" if parts else ""
        raise TrainingDivergedError(f"loss became {value} at epoch {epoch}, {where}{detail}")


def evaluate_loss(model: Model, ds: Dataset, cfg: TrainConfig) -> float:
    if len(ds) == 0:
        return float("nan")
    total = 0.0
    with T.no_grad():
        for s in range(0, len(ds), cfg.batch_size):
            idx = range(s, min(s + cfg.batch_size, len(ds)))
            loss, _ = batch_loss(model, ds.images[list(idx)], [ds.labels[i] for i in idx], ds.image_size, cfg.box_weight)
            total += loss.item() * len(idx)
    return total / len(ds)


def train_toy(model: Model, train: Dataset, cfg: TrainConfig | None = None, val: Dataset | None = None,
              log=None) -> TrainResult:
    """Train in place; the model ends holding the best weights by validation loss.

    Without an explicit ``val`` set, the last ``val_fraction`` of ``train`` is held out.
    """
    cfg = cfg or TrainConfig()
    if val is None:
        train, val = split_train_val(train, cfg.val_fraction)
    if len(train) == 0:
        raise ValueError("empty training set")
    params = model.named_parameters()
    opt = AdamW(params, cfg.lr, cfg.weight_decay, cfg.betas, cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    history: list[tuple[int, float, float]] = []
    best_state = model.state_dict()
    best_val, best_epoch, since_best = float("inf"), 0, 0
    stopped = False
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train))
        codes = rng.integers(0, 8, len(train)) if cfg.augment else np.zeros(len(train), dtype=int)
        running = 0.0
        for s in range(0, len(train), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            imgs, labels = train.images[idx], [train.labels[i] for i in idx]
            if cfg.augment:
                imgs, labels = dihedral(imgs, labels, codes[idx], train.image_size)
            for p in params.values():
                p.zero_grad()
            try:
                loss, parts = batch_loss(model, imgs, labels, train.image_size, cfg.box_weight)
            except FloatingPointError as e:
                raise TrainingDivergedError(f"non-finite activations at epoch {epoch}, batch {s // cfg.batch_size}: {e}") from None
            _check_finite(loss.item(), epoch, f"batch {s // cfg.batch_size}", parts)
            loss.backward()
            opt.step(params)
            running += loss.item() * len(idx)
        train_loss = running / len(train)
        val_loss = evaluate_loss(model, val, cfg) if len(val) else train_loss
        _check_finite(val_loss, epoch, "validation")
        history.append((epoch, train_loss, val_loss))
        if log:
            log(f"epoch {epoch:3d}  train {train_loss:.4f}  val {val_loss:.4f}")
        if val_loss < best_val:
            best_val, best_epoch, since_best = val_loss, epoch, 0
            best_state = model.state_dict()
        else:
            since_best += 1
            if since_best >= cfg.patience:
                stopped = True
                break
    model.load_state_dict(best_state)
    return TrainResult(history, best_epoch, best_val, copy.deepcopy(best_state), stopped)


def predict(model: Model, images: np.ndarray, image_size, batch_size: int = 32, conf_thr: float = 0.01,
            nms_iou: float = 0.5):
    dets = []
    with T.no_grad():
        for s in range(0, len(images), batch_size):
            heads = model(Tensor(images[s:s + batch_size]))
            dets.extend(decode(heads, conf_thr, nms_iou, image_size=image_size))
    return dets


def evaluate_model(model: Model, ds: Dataset, conf_thr: float = 0.01) -> MetricsReport:
    dets = predict(model, ds.images, ds.image_size, conf_thr=conf_thr)
    return evaluate(dets, ds.labels)


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["betas"] = list(cfg.betas)
    return d
