"""Bifurcated multi-task segmentation network and its training loop.

One encoder (inception block + attention fusion per level) feeds two
independent U-net decoders: the infection head and the lung head read the
same bottleneck and the same skip tensors.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .attention import AttentionFusion
from .core import ops
from .core.nn import Conv2d, ConvBNAct, ConvTranspose2d, Module
from .core.optim import adam
from .core.rng import make_rng
from .core.tensor import Tensor, no_grad
from .data.slices import SliceSample
from .evaluation.metrics import confusion, metrics_from_counts, postprocess

log = logging.getLogger(__name__)


@dataclass
class SegNetConfig:
    image_size: int = 256
    widths: Tuple[int, ...] = (32, 64, 128, 256)
    bottleneck: int = 512
    ratio: int = 4
    filters: int = 4
    spatial_kernel: int = 7

    def __post_init__(self):
        self.widths = tuple(self.widths)
        if self.image_size % (2 ** len(self.widths)):
            raise ValueError(f"image_size {self.image_size} not divisible by 2**{len(self.widths)}")


class Inception(Module):
    """Four parallel branches (1x1 | 1x1-3x3 | 1x1-3x3-3x3 | pool-1x1) concatenated to ``width`` channels."""

    def __init__(self, cin: int, width: int, rng: np.random.Generator):
        if width < 4:
            raise ValueError(f"inception width must be >= 4, got {width}")
        b = width // 4
        self.width = width
        self.b1 = ConvBNAct(cin, width - 3 * b, 1, rng)
        self.b3_reduce = ConvBNAct(cin, b, 1, rng)
        self.b3 = ConvBNAct(b, b, 3, rng)
        self.b5_reduce = ConvBNAct(cin, b, 1, rng)
        self.b5_a = ConvBNAct(b, b, 3, rng)
        self.b5_b = ConvBNAct(b, b, 3, rng)
        self.pool_proj = ConvBNAct(cin, b, 1, rng)

    def forward(self, x) -> Tensor:
        return inception_forward(x, self)


def inception_forward(x, p: Inception) -> Tensor:
    return ops.concat_channels(
        p.b1(x),
        p.b3(p.b3_reduce(x)),
        p.b5_b(p.b5_a(p.b5_reduce(x))),
        p.pool_proj(ops.max_pool2d_same(x)),
    )


class EncoderLevel(Module):
    def __init__(self, cin: int, width: int, cfg: SegNetConfig, rng):
        self.inception = Inception(cin, width, rng)
        self.fusion = AttentionFusion(width, rng, cfg.ratio, cfg.filters, cfg.spatial_kernel)

    def forward(self, x):
        return self.fusion(self.inception(x))


class DecoderLevel(Module):
    def __init__(self, cin: int, width: int, rng):
        self.up = ConvTranspose2d(cin, width, 2, rng, stride=2)
        self.conv1 = ConvBNAct(2 * width, width, 3, rng)
        self.conv2 = ConvBNAct(width, width, 3, rng)

    def forward(self, x, skip):
        return self.conv2(self.conv1(ops.concat_channels(self.up(x), skip)))


class Decoder(Module):
    def __init__(self, cfg: SegNetConfig, rng):
        chans = [cfg.bottleneck] + list(cfg.widths[::-1])
        self.levels = [DecoderLevel(chans[i], chans[i + 1], rng) for i in range(len(cfg.widths))]
        self.head = Conv2d(cfg.widths[0], 1, 1, rng)

    def forward(self, bottom, skips):
        h = bottom
        for level, skip in zip(self.levels, reversed(skips)):
            h = level(h, skip)
        return ops.sigmoid(self.head(h))


class SegOutput(NamedTuple):
    infection_prob: Tensor
    lung_prob: Tensor


class SegNet(Module):
    def __init__(self, cfg: Optional[SegNetConfig] = None, rng: Optional[np.random.Generator] = None):
        self.cfg = cfg or SegNetConfig()
        rng = rng if rng is not None else make_rng(0, "segnet-init")
        cin = 1
        levels = []
        for w in self.cfg.widths:
            levels.append(EncoderLevel(cin, w, self.cfg, rng))
            cin = w
        self.encoder = levels
        self.bottom_a = ConvBNAct(cin, self.cfg.bottleneck, 3, rng)
        self.bottom_b = ConvBNAct(self.cfg.bottleneck, self.cfg.bottleneck, 3, rng)
        self.infection_decoder = Decoder(self.cfg, rng)
        self.lung_decoder = Decoder(self.cfg, rng)

    def encode(self, x) -> Tuple[Tensor, List[Tensor]]:
        skips = []
        h = x
        for level in self.encoder:
            h = level(h)
            skips.append(h)
            h = ops.max_pool2d(h, 2)
        return self.bottom_b(self.bottom_a(h)), skips

    def forward(self, x) -> SegOutput:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
        s = self.cfg.image_size
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (s, s):
            raise ValueError(f"segnet expects (N, 1, {s}, {s}) input, got {x.shape}")
        bottom, skips = self.encode(x)
        return SegOutput(self.infection_decoder(bottom, skips), self.lung_decoder(bottom, skips))

    def predict(self, images: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Inference-mode forward on an (N,1,H,W) array; returns (infection, lung) probabilities."""
        return infer(self, images)


def segnet_forward(x, model: SegNet) -> SegOutput:
    return model(x)


def infer(model: SegNet, images: np.ndarray, batch_size: int = 8) -> Tuple[np.ndarray, np.ndarray]:
    was_training = model.training
    model.eval()
    dtype = model.encoder[0].inception.b1.conv.weight.dtype
    inf, lung = [], []
    try:
        with no_grad():
            for i in range(0, len(images), batch_size):
                out = model(np.asarray(images[i : i + batch_size], dtype=dtype))
                inf.append(out.infection_prob.data)
                lung.append(out.lung_prob.data)
    finally:
        model.train(was_training)
    return np.concatenate(inf), np.concatenate(lung)


def seg_loss(out: SegOutput, infection_gt, lung_gt, lambda_lung: float = 0.5) -> Tensor:
    inf = ops.bce(out.infection_prob, infection_gt)
    lung = ops.bce(out.lung_prob, lung_gt)
    return ops.add(inf, ops.scale(lung, lambda_lung))


# --------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 8
    epochs: int = 100
    patience: Optional[int] = 10
    max_steps: Optional[int] = None
    lambda_lung: float = 0.5
    bin_thresh: float = 0.5
    area_thresh: int = 30
    seed: int = 0


@dataclass
class TrainResult:
    best_state: Dict[str, np.ndarray]
    last_state: Dict[str, np.ndarray]
    history: List[dict] = field(default_factory=list)
    steps: int = 0
    best_epoch: int = -1


def stack_batch(samples: Sequence[SliceSample], dtype=np.float32):
    images = np.stack([s.image for s in samples]).astype(dtype, copy=False)
    inf = np.stack([s.infection_mask for s in samples]).astype(dtype)
    lung = np.stack([s.lung_mask for s in samples]).astype(dtype)
    return images, inf, lung


def dice_on(model: SegNet, samples: Sequence[SliceSample], bin_thresh: float = 0.5,
            area_thresh: int = 30) -> Tuple[float, float]:
    """Global-count Dice of both heads; the infection head is post-processed."""
    images, inf_gt, lung_gt = stack_batch(samples)
    inf_p, lung_p = infer(model, images)
    c_inf = c_lung = None
    for i in range(len(samples)):
        pred = postprocess(inf_p[i], bin_thresh, area_thresh)
        c = confusion(pred, inf_gt[i] > 0.5)
        c_inf = c if c_inf is None else c_inf + c
        c = confusion(lung_p[i] >= bin_thresh, lung_gt[i] > 0.5)
        c_lung = c if c_lung is None else c_lung + c
    return metrics_from_counts(c_inf).dice, metrics_from_counts(c_lung).dice


def train_segnet(model: SegNet, train: Sequence[SliceSample], val: Sequence[SliceSample],
                 cfg: Optional[TrainConfig] = None) -> TrainResult:
    """Seeded epoch loop with Adam, per-epoch validation Dice and best-checkpoint tracking.

    Validation never touches gradients, batch-norm statistics or the shuffle
    stream, so the parameter trajectory is independent of ``val``.
    """
    cfg = cfg or TrainConfig()
    if not train:
        raise ValueError("train_segnet: empty training set")
    train_ids = {(s.volume_id, s.slice_index, int(s.origin)) for s in train}
    if any((s.volume_id, s.slice_index, int(s.origin)) in train_ids for s in val):
        raise ValueError("train_segnet: training and validation sets overlap")

    opt = adam(model.parameters(), lr=cfg.lr)
    shuffle = make_rng(cfg.seed, "segnet-shuffle")
    result = TrainResult(best_state=model.state_dict(), last_state={})
    best_dice, stale = -math.inf, 0
    model.train()
    for epoch in range(cfg.epochs):
        order = shuffle.permutation(len(train))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            if cfg.max_steps is not None and result.steps >= cfg.max_steps:
                break
            batch = [train[i] for i in order[start : start + cfg.batch_size]]
            images, inf, lung = stack_batch(batch)
            opt.zero_grad()
            loss = seg_loss(model(images), inf, lung, cfg.lambda_lung)
            loss.backward()
            opt.step()
            losses.append(loss.item())
            result.steps += 1
        if not losses:
            break
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)),
               "val_dice_infection": float("nan"), "val_dice_lung": float("nan")}
        if val:
            d_inf, d_lung = dice_on(model, val, cfg.bin_thresh, cfg.area_thresh)
            row["val_dice_infection"], row["val_dice_lung"] = d_inf, d_lung
            if d_inf > best_dice:
                best_dice, stale = d_inf, 0
                result.best_state, result.best_epoch = model.state_dict(), epoch
            else:
                stale += 1
        result.history.append(row)
        log.info("epoch %d loss %.5f val dice %.4f", epoch, row["train_loss"], row["val_dice_infection"])
        if val and cfg.patience is not None and stale >= cfg.patience:
            break
    result.last_state = model.state_dict()
    if not val:
        result.best_state, result.best_epoch = result.last_state, len(result.history) - 1
    return result


HISTORY_FIELDS = ("epoch", "train_loss", "val_dice_infection", "val_dice_lung")


def write_history(path, history: Sequence[dict]) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in HISTORY_FIELDS})
