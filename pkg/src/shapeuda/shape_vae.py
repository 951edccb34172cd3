"""Mask VAE: a learned shape prior over source-domain organ masks.

The encoder maps a (soft) mask to a diagonal Gaussian over the latent space,
the decoder maps a latent vector back to per-voxel class probabilities. Once
trained the VAE is frozen; its reconstruction Dice through the mean latent
serves both as a loss on student predictions and as a quality score.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .data.preprocess import AugmentSpec, augment
from .data.synth import Sample
from .params import SGD, ParamStore, load_params, save_params
from .segnet import dice_loss
from .volume import Volume

LOGVAR_RANGE = (-30.0, 20.0)
LAMBDA_KL = 2e-5
NORMS = ("none", "instance", "batch")


@dataclass(frozen=True)
class VaeConfig:
    latent_dim: int = 64
    depth: int = 3
    channels: tuple[int, ...] = (4, 8, 16, 32)
    input_size: int = 32
    lambda_kl: float = LAMBDA_KL
    # "none": plain conv + ReLU blocks; "instance": batch norm with per-sample
    # statistics in training and inference; "batch": running statistics at inference
    norm: str = "instance"
    init_logvar: float = -6.0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) != self.depth + 1:
            raise ValueError(f"channels needs depth+1={self.depth + 1} entries, got {self.channels}")
        if self.lambda_kl <= 0:
            raise ValueError("lambda_kl must be positive")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be positive")
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if self.input_size % 2 ** self.depth:
            raise ValueError(f"input size {self.input_size} not divisible by 2^{self.depth}")

    @property
    def bottleneck_shape(self) -> tuple[int, int, int, int]:
        s = self.input_size // 2 ** self.depth
        return (self.channels[-1], s, s, s)

    @classmethod
    def full_scale(cls) -> "VaeConfig":
        return cls(latent_dim=16384, depth=5, channels=(8, 16, 32, 64, 128, 256), input_size=128)


@dataclass
class LatentDistribution:
    mu: Tensor
    logvar: Tensor

    @property
    def variance(self) -> np.ndarray:
        return np.exp(self.logvar.data)


@dataclass
class ShapeVae:
    config: VaeConfig
    params: ParamStore
    training: bool = True
    history: list = field(default_factory=list)

    def train(self) -> "ShapeVae":
        self.training = True
        return self

    def eval(self) -> "ShapeVae":
        self.training = False
        return self

    def freeze(self) -> "ShapeVae":
        """Eval mode and no parameter gradients; inputs can still be differentiated."""
        self.params.set_trainable(False)
        return self.eval()

    def clone(self) -> "ShapeVae":
        return ShapeVae(self.config, self.params.copy(), self.training)

    def save(self, directory):
        save_params(self.params, directory)

    @classmethod
    def load(cls, directory, config: VaeConfig) -> "ShapeVae":
        loaded = load_params(directory)
        vae = build_vae(config, seed=0)
        vae.params.load_values(loaded)
        for name in loaded:
            vae.params[name].requires_grad = loaded.is_trainable(name)
        return vae


def build_vae(config: VaeConfig, seed: int = 0) -> ShapeVae:
    rng = np.random.default_rng(seed)
    store = ParamStore()
    ch = config.channels
    enc_in = [1] + list(ch[1:-1])
    norm = config.norm != "none"
    for i in range(config.depth):
        nn.add_down_block(store, f"enc{i}", enc_in[i], ch[i + 1], rng, norm=norm)
    flat = int(np.prod(config.bottleneck_shape))
    nn.add_linear(store, "fc_mu", flat, config.latent_dim, rng)
    nn.add_linear(store, "fc_logvar", flat, config.latent_dim, rng)
    # start from a near-deterministic posterior; with unit initial variance the
    # decoder learns to ignore z before the encoder becomes informative
    store["fc_logvar.bias"].data[:] = config.init_logvar
    nn.add_linear(store, "fc_dec", config.latent_dim, flat, rng)
    for i in reversed(range(config.depth)):
        nn.add_up_block(store, f"dec{i}", ch[i + 1], ch[i], rng, norm=norm)
    nn.add_conv(store, "head", ch[0], 2, 1, rng)
    return ShapeVae(config, store)


def _as_input(mask) -> Tensor:
    if isinstance(mask, Tensor):
        return ad.reshape(mask, (1,) + mask.shape[-3:]) if mask.ndim == 3 else mask
    arr = mask.data if isinstance(mask, Volume) else np.asarray(mask, dtype=np.float32)
    return Tensor(arr[None] if arr.ndim == 3 else arr)


def _norm_mode(vae: ShapeVae) -> tuple[bool, bool]:
    """(use per-sample statistics, update running statistics)."""
    return (vae.config.norm == "instance" or vae.training), vae.training


def encode(vae: ShapeVae, mask) -> LatentDistribution:
    x = _as_input(mask)
    p, (tr, upd) = vae.params, _norm_mode(vae)
    for i in range(vae.config.depth):
        x = nn.down_block(p, f"enc{i}", x, tr, upd)
    flat = ad.reshape(x, (-1,))
    mu = nn.linear(p, "fc_mu", flat)
    logvar = ad.clamp(nn.linear(p, "fc_logvar", flat), *LOGVAR_RANGE)
    return LatentDistribution(mu, logvar)


def reparam_sample(dist: LatentDistribution, rng: np.random.Generator, eps: np.ndarray | None = None) -> Tensor:
    """z = mu + exp(logvar / 2) * eps with eps ~ N(0, I)."""
    if eps is None:
        eps = rng.standard_normal(dist.mu.shape)
    logvar = ad.clamp(dist.logvar, *LOGVAR_RANGE)
    return dist.mu + ad.exp(0.5 * logvar) * Tensor(eps)


def decode(vae: ShapeVae, z) -> Tensor:
    """Foreground probability field (D, H, W) for latent vector ``z``."""
    p, (tr, upd) = vae.params, _norm_mode(vae)
    x = ad.relu(nn.linear(p, "fc_dec", ad.as_tensor(z)))
    x = ad.reshape(x, vae.config.bottleneck_shape)
    for i in reversed(range(vae.config.depth)):
        x = nn.up_block(p, f"dec{i}", x, tr, update_stats=upd)
    return ad.softmax_channel(nn.conv(p, "head", x))[1]


def kl_to_standard_normal(dist: LatentDistribution) -> Tensor:
    """0.5 * sum(mu^2 + exp(l) - l - 1) over latent dimensions."""
    l = dist.logvar
    return 0.5 * ad.sum(ad.square(dist.mu) + ad.exp(l) - l - 1.0)


def _target(mask) -> Tensor:
    t = _as_input(mask)
    return ad.reshape(t, t.shape[-3:])


def vae_loss(vae: ShapeVae, mask, lambda_kl: float | None = None,
             rng: np.random.Generator | None = None, parts: dict | None = None) -> Tensor:
    """Single-sample estimate of the Dice reconstruction term plus weighted KL."""
    lam = vae.config.lambda_kl if lambda_kl is None else lambda_kl
    rng = rng or np.random.default_rng(0)
    y = _target(mask)
    dist = encode(vae, y)
    recon = dice_loss(decode(vae, reparam_sample(dist, rng)), y)
    kl = kl_to_standard_normal(dist)
    if parts is not None:
        parts.update(recon=recon.item(), kl=kl.item())
    return recon + lam * kl


LR_DECAY = 0.1


def train_vae(vae: ShapeVae, masks, iters: int, lr: float = 1e-2, rng: np.random.Generator | None = None,
              augment_spec: AugmentSpec | None = None, clip_norm: float | None = None,
              momentum: float = 0.0, snapshots: dict | None = None, snapshot_at=(),
              lr_decay_at=()) -> ShapeVae:
    """Fit the VAE to ground-truth masks with geometric augmentation.

    The step size is multiplied by ``LR_DECAY`` once the iteration count
    reaches each entry of ``lr_decay_at``. Appends ``{"iter", "loss", "recon",
    "kl"}`` to ``vae.history`` each step; ``snapshots`` receives parameter
    copies after the counts in ``snapshot_at``.
    """
    rng = rng or np.random.default_rng(0)
    spec = augment_spec or AugmentSpec(intensity=False)
    vols = [m if isinstance(m, Volume) else Volume(np.asarray(m, dtype=np.float32)) for m in masks]
    opt = SGD(vae.params, lr, momentum, clip_norm)
    marks = set(int(m) for m in snapshot_at)
    vae.train()
    decays = sorted(int(d) for d in lr_decay_at)
    for it in range(iters):
        opt.lr = lr * LR_DECAY ** sum(it >= d for d in decays)
        m = vols[int(rng.integers(len(vols)))]
        m = augment(Sample(m, m), spec, rng).mask
        parts = {}
        loss = vae_loss(vae, m, rng=rng, parts=parts)
        vae.params.zero_grad()
        ad.backward(loss)
        opt.step()
        vae.history.append({"iter": it, "loss": loss.item(), **parts})
        if snapshots is not None and (it + 1) in marks:
            snapshots[it + 1] = vae.params.copy()
    return vae


def reconstruct(vae: ShapeVae, mask) -> Tensor:
    """Decode the mean latent of ``mask`` (no sampling)."""
    return decode(vae, encode(vae, mask).mu)


def recon_loss(vae: ShapeVae, mask) -> Tensor:
    """Dice loss between the input and its reconstruction through the mean latent.

    The VAE runs in eval mode. Gradients reach the input (if it records them)
    both directly and through the encoder/decoder; VAE parameters only get
    gradients if left trainable, so callers freeze it first.
    """
    was = vae.training
    vae.training = False
    try:
        y = _target(mask)
        return dice_loss(y, reconstruct(vae, y))
    finally:
        vae.training = was


def quality_score(vae: ShapeVae, prediction) -> float:
    """Reconstruction Dice of a prediction, in [0, 1]; higher means more plausible."""
    with ad.no_grad():
        return float(np.clip(-recon_loss(vae, prediction).item(), 0.0, 1.0))
