"""Mask-conditioned texture GAN and the two slice-augmentation routes.

A generator learns to paint infected-region texture (image times mask) from a
binary infection mask.  New slices are made by mirroring a real slice and its
masks, asking the generator for texture under the mirrored mask, and pasting
that texture into the mirrored image only where the mask is set.  The classical
route keeps the mirrored pixels as they are.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence

import numpy as np

from .core import ops
from .core.nn import BatchNorm2d, Conv2d, ConvTranspose2d, Module
from .core.optim import Optimizer, adam
from .core.rng import make_rng
from .core.tensor import Tensor, no_grad
from .data.slices import Origin, SliceSample

log = logging.getLogger(__name__)

Generate = Callable[[np.ndarray], np.ndarray]


@dataclass
class DomainPair:
    mask_B: np.ndarray  # (1,H,W) uint8
    texture_A: np.ndarray  # (1,H,W) float32, zero outside the mask

    @property
    def empty(self) -> bool:
        return not self.mask_B.any()


def make_pair(s: SliceSample) -> DomainPair:
    mask = s.infection_mask
    texture = np.where(mask.astype(bool), s.image, np.float32(0)).astype(np.float32)
    return DomainPair(mask.copy(), texture)


# --------------------------------------------------------------------------
# networks


@dataclass
class GanConfig:
    image_size: int = 256
    depth: int = 6
    base_width: int = 16
    disc_width: int = 16
    disc_layers: int = 3

    def __post_init__(self):
        if self.image_size % (2**self.depth):
            raise ValueError(f"image_size {self.image_size} not divisible by 2**{self.depth}")

    def widths(self) -> List[int]:
        return [self.base_width * min(2**i, 8) for i in range(self.depth)]


class Down(Module):
    """4x4 stride-2 convolution, optional batch norm, leaky ReLU 0.2."""

    def __init__(self, cin, cout, rng, norm=True):
        self.conv = Conv2d(cin, cout, 4, rng, stride=2, padding=1, bias=not norm)
        self.bn = BatchNorm2d(cout) if norm else None

    def forward(self, x):
        y = self.conv(x)
        if self.bn is not None:
            y = self.bn(y)
        return ops.leaky_relu(y, 0.2)


class Up(Module):
    """4x4 stride-2 transposed convolution, batch norm, ReLU."""

    def __init__(self, cin, cout, rng):
        self.conv = ConvTranspose2d(cin, cout, 4, rng, stride=2, padding=1, bias=False)
        self.bn = BatchNorm2d(cout)

    def forward(self, x):
        return ops.relu(self.bn(self.conv(x)))


class Generator(Module):
    """U-net from a 1-channel mask to 1-channel texture in [0,1], zeroed off the mask."""

    def __init__(self, cfg: Optional[GanConfig] = None, rng: Optional[np.random.Generator] = None):
        self.cfg = cfg or GanConfig()
        rng = rng if rng is not None else make_rng(0, "gan-generator")
        w = self.cfg.widths()
        self.down = [Down(1, w[0], rng, norm=False)] + [Down(w[i - 1], w[i], rng) for i in range(1, len(w))]
        # decoder level i receives the deeper feature (plus its skip, except at the bottom)
        ups = []
        for i in range(len(w) - 1, 0, -1):
            cin = w[i] if i == len(w) - 1 else 2 * w[i]
            ups.append(Up(cin, w[i - 1], rng))
        self.up = ups
        self.out = ConvTranspose2d(2 * w[0] if len(w) > 1 else w[0], 1, 4, rng, stride=2, padding=1)

    def forward(self, mask) -> Tensor:
        mask = mask if isinstance(mask, Tensor) else Tensor(np.asarray(mask, dtype=self.out.weight.dtype))
        s = self.cfg.image_size
        if mask.ndim != 4 or mask.shape[1] != 1 or mask.shape[2:] != (s, s):
            raise ValueError(f"generator expects (N, 1, {s}, {s}) masks, got {mask.shape}")
        skips = []
        h = mask
        for layer in self.down:
            h = layer(h)
            skips.append(h)
        for layer, skip in zip(self.up, reversed(skips[:-1])):
            h = ops.concat_channels(layer(h), skip)
        texture = ops.sigmoid(self.out(h))
        return ops.mul(texture, mask)

    def generate(self, masks: np.ndarray, batch_size: int = 8) -> np.ndarray:
        """Inference-mode texture for an (N,1,H,W) mask array."""
        was_training = self.training
        self.eval()
        out = []
        try:
            with no_grad():
                for i in range(0, len(masks), batch_size):
                    out.append(self(np.asarray(masks[i : i + batch_size], dtype=self.out.weight.dtype)).data)
        finally:
            self.train(was_training)
        return np.concatenate(out).astype(np.float32, copy=False)


class Discriminator(Module):
    """Patch classifier over the (mask, texture) pair; returns an (N,1,h,w) logit grid."""

    def __init__(self, cfg: Optional[GanConfig] = None, rng: Optional[np.random.Generator] = None):
        self.cfg = cfg or GanConfig()
        rng = rng if rng is not None else make_rng(0, "gan-discriminator")
        w = self.cfg.disc_width
        layers = [Down(2, w, rng, norm=False)]
        cin = w
        for i in range(1, self.cfg.disc_layers):
            cout = w * min(2**i, 8)
            layers.append(Down(cin, cout, rng))
            cin = cout
        cout = w * min(2**self.cfg.disc_layers, 8)
        self.body = layers
        self.penultimate = Conv2d(cin, cout, 4, rng, stride=1, padding=1, bias=False)
        self.penultimate_bn = BatchNorm2d(cout)
        self.head = Conv2d(cout, 1, 4, rng, stride=1, padding=1)

    def forward(self, mask, texture) -> Tensor:
        h = ops.concat_channels(mask, texture)
        for layer in self.body:
            h = layer(h)
        h = ops.leaky_relu(self.penultimate_bn(self.penultimate(h)), 0.2)
        return self.head(h)

    def receptive_field(self) -> int:
        rf, jump = 1, 1
        strides = [2] * len(self.body) + [1, 1]
        for s in strides:
            rf += 3 * jump
            jump *= s
        return rf


# --------------------------------------------------------------------------
# objective


LAMBDA_L1 = 100.0


def discriminator_loss(D: Discriminator, mask, real, fake) -> Tensor:
    real_p = ops.sigmoid(D(mask, real))
    fake_p = ops.sigmoid(D(mask, fake))
    return ops.add(ops.bce(real_p, np.ones(real_p.shape)), ops.bce(fake_p, np.zeros(fake_p.shape)))


class GenLoss(NamedTuple):
    total: Tensor
    adversarial: Tensor
    l1: Tensor


def generator_loss(D: Discriminator, mask, real, fake, lambda_l1: float = LAMBDA_L1) -> GenLoss:
    fake_p = ops.sigmoid(D(mask, fake))
    adv = ops.bce(fake_p, np.ones(fake_p.shape))
    l1 = ops.l1(fake, real)
    return GenLoss(ops.add(adv, ops.scale(l1, lambda_l1)), adv, l1)


@dataclass
class StepRecord:
    d_loss: float
    g_adv: float
    g_l1: float


def gan_step(masks: np.ndarray, textures: np.ndarray, G: Generator, D: Discriminator,
             opt_g: Optimizer, opt_d: Optimizer, lambda_l1: float = LAMBDA_L1) -> StepRecord:
    """One discriminator update followed by one generator update on the same batch."""
    if len(masks) == 0:
        raise ValueError("gan_step: empty batch")
    dtype = G.out.weight.dtype
    mask = Tensor(np.asarray(masks, dtype=dtype))
    real = Tensor(np.asarray(textures, dtype=dtype))
    fake = G(mask)

    opt_d.zero_grad()
    d_loss = discriminator_loss(D, mask, real, fake.detach())
    d_loss.backward()
    opt_d.step()

    opt_g.zero_grad()
    g = generator_loss(D, mask, real, fake, lambda_l1)
    g.total.backward()
    opt_g.step()
    return StepRecord(d_loss.item(), g.adversarial.item(), g.l1.item())


# --------------------------------------------------------------------------
# training


@dataclass
class GanTrainConfig:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    lambda_l1: float = LAMBDA_L1
    batch_size: int = 4
    epochs: int = 100
    max_steps: Optional[int] = None
    seed: int = 0


@dataclass
class GanResult:
    generator: Generator
    discriminator: Discriminator
    steps: List[StepRecord] = field(default_factory=list)
    history: List[Dict[str, float]] = field(default_factory=list)


def train_cgan(pairs: Sequence[DomainPair], cfg: Optional[GanTrainConfig] = None,
               net: Optional[GanConfig] = None) -> GanResult:
    """Seeded alternating training; pairs with empty masks are left out."""
    cfg = cfg or GanTrainConfig()
    usable = [p for p in pairs if not p.empty]
    if not usable:
        raise ValueError("train_cgan: no pair has infection pixels")
    if net is None:
        net = GanConfig(image_size=usable[0].mask_B.shape[-1])
    G = Generator(net, make_rng(cfg.seed, "gan-generator"))
    D = Discriminator(net, make_rng(cfg.seed, "gan-discriminator"))
    opt_g = adam(G.parameters(), cfg.lr, cfg.beta1, cfg.beta2)
    opt_d = adam(D.parameters(), cfg.lr, cfg.beta1, cfg.beta2)
    masks = np.stack([p.mask_B for p in usable])
    textures = np.stack([p.texture_A for p in usable])
    shuffle = make_rng(cfg.seed, "gan-shuffle")
    result = GanResult(G, D)
    for epoch in range(cfg.epochs):
        order = shuffle.permutation(len(usable))
        records = []
        for start in range(0, len(order), cfg.batch_size):
            if cfg.max_steps is not None and len(result.steps) >= cfg.max_steps:
                break
            idx = order[start : start + cfg.batch_size]
            rec = gan_step(masks[idx], textures[idx], G, D, opt_g, opt_d, cfg.lambda_l1)
            records.append(rec)
            result.steps.append(rec)
        if not records:
            break
        row = {"epoch": epoch}
        for key in ("d_loss", "g_adv", "g_l1"):
            row[key] = float(np.mean([getattr(r, key) for r in records]))
        result.history.append(row)
        log.info("gan epoch %d d %.4f g_adv %.4f l1 %.4f", epoch, row["d_loss"], row["g_adv"], row["g_l1"])
    return result


# --------------------------------------------------------------------------
# synthesis


def _hflip(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a[..., ::-1])


def classical_mirror(s: SliceSample) -> SliceSample:
    return s.with_(image=_hflip(s.image), lung_mask=_hflip(s.lung_mask),
                   infection_mask=_hflip(s.infection_mask), origin=Origin.CLASSICAL)


def synthesize_sample(s: SliceSample, generate: Generate) -> SliceSample:
    """Mirror ``s``, generate texture under the mirrored mask and paste it there."""
    if not s.infected:
        raise ValueError(f"synthesize_sample: slice {s.key()} has no infection pixels")
    mask = _hflip(s.infection_mask)
    texture = np.asarray(generate(mask[None]), dtype=np.float32).reshape(mask.shape)
    image = _hflip(s.image)
    image = np.where(mask.astype(bool), texture, image).astype(np.float32)
    return s.with_(image=image, lung_mask=_hflip(s.lung_mask), infection_mask=mask, origin=Origin.GAN)


def augment_dataset(train: Sequence[SliceSample], generate: Optional[Generate], n_classic: int = 300,
                    n_gan: int = 300, seed: int = 0) -> List[SliceSample]:
    """Append mirrored and GAN-synthesized copies of distinct infected real slices.

    Each route draws its sources without replacement from the infected real
    slices; when fewer exist than requested the count is capped.
    """
    if n_gan > 0 and generate is None:
        raise ValueError("augment_dataset: n_gan > 0 requires a trained generator")
    out = list(train)
    infected = [s for s in train if s.infected and s.origin == Origin.REAL]
    for n, stream, make in ((n_classic, "augment-classical", classical_mirror),
                            (n_gan, "augment-gan", lambda s: synthesize_sample(s, generate))):
        if n <= 0:
            continue
        if n > len(infected):
            log.warning("%s: only %d infected slices, capping %d", stream, len(infected), n)
            n = len(infected)
        picks = np.sort(make_rng(seed, stream).choice(len(infected), size=n, replace=False))
        out.extend(make(infected[i]) for i in picks)
    return out
