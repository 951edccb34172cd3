"""3D U-Net segmenter, soft Dice loss and supervised source training."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .data.preprocess import AugmentSpec, augment
from .params import ParamStore, load_params, save_params, sgd_step
from .volume import Volume

DICE_EPS = 1e-5


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 3
    channels: tuple[int, ...] = (4, 8, 16, 32)
    in_channels: int = 1
    out_channels: int = 2

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.depth < 1 or len(self.channels) != self.depth + 1:
            raise ValueError(f"channels needs depth+1={self.depth + 1} entries, got {self.channels}")
        if min(self.channels) < 1:
            raise ValueError("channel counts must be positive")

    @classmethod
    def full_scale(cls) -> "UNetConfig":
        """Full-size configuration: five down/up block pairs, 8..256 channels."""
        return cls(depth=5, channels=(8, 16, 32, 64, 128, 256))


@dataclass
class SegNet:
    config: UNetConfig
    params: ParamStore
    training: bool = True
    history: list = field(default_factory=list)

    def train(self) -> "SegNet":
        self.training = True
        return self

    def eval(self) -> "SegNet":
        self.training = False
        return self

    def clone(self) -> "SegNet":
        return SegNet(self.config, self.params.copy(), self.training)

    def forward(self, image) -> Tensor:
        return seg_forward(self, image)

    def save(self, directory):
        save_params(self.params, directory)

    @classmethod
    def load(cls, directory, config: UNetConfig) -> "SegNet":
        net = build_unet(config, seed=0)
        net.params.load_values(load_params(directory))
        return net


def build_unet(config: UNetConfig, seed: int = 0) -> SegNet:
    rng = np.random.default_rng(seed)
    store = ParamStore()
    ch = config.channels
    nn.add_conv(store, "stem.conv", config.in_channels, ch[0], 3, rng)
    nn.add_bn(store, "stem.bn", ch[0])
    for i in range(config.depth):
        nn.add_down_block(store, f"down{i}", ch[i], ch[i + 1], rng)
    for i in reversed(range(config.depth)):
        nn.add_up_block(store, f"up{i}", ch[i + 1], ch[i], rng, skip=ch[i])
    nn.add_conv(store, "head", ch[0], config.out_channels, 1, rng)
    return SegNet(config, store)


def _input_array(image) -> np.ndarray:
    if isinstance(image, Volume):
        return image.data
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float32)
    return arr[None] if arr.ndim == 3 else arr


def seg_forward(net: SegNet, image) -> Tensor:
    """Per-voxel class probabilities, shape (out_channels, D, H, W)."""
    x = image if isinstance(image, Tensor) else Tensor(_input_array(image))
    cfg, p, tr = net.config, net.params, net.training
    if x.shape[0] != cfg.in_channels:
        raise ValueError(f"expected {cfg.in_channels} input channels, got {x.shape[0]}")
    step = 2 ** cfg.depth
    if any(n % step for n in x.shape[1:]):
        raise ValueError(f"input dims {x.shape[1:]} must be divisible by {step}")
    x = nn.bn_relu(p, "stem.bn", nn.conv(p, "stem.conv", x), tr)
    skips = [x]
    for i in range(cfg.depth):
        x = nn.down_block(p, f"down{i}", x, tr)
        skips.append(x)
    for i in reversed(range(cfg.depth)):
        x = nn.up_block(p, f"up{i}", x, tr, skip=skips[i])
    return ad.softmax_channel(nn.conv(p, "head", x))


def dice_loss(pred, target, eps: float = DICE_EPS) -> Tensor:
    """Negative soft Dice, -(2 sum(p*y) + eps) / (sum(p) + sum(y) + eps).

    Either argument may be a Tensor (gradients flow to whichever records them)
    or a plain array.
    """
    pred, target = ad.as_tensor(pred), ad.as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"dice_loss: prediction shape {pred.shape} != target shape {target.shape}")
    inter = ad.sum(pred * target)
    denom = ad.sum(pred) + ad.sum(target) + eps
    return -(2.0 * inter + eps) / denom


def dice_score(a: np.ndarray, b: np.ndarray) -> float:
    """Hard Dice between two binary arrays; 1.0 when both are empty."""
    a, b = np.asarray(a) > 0.5, np.asarray(b) > 0.5
    s = a.sum() + b.sum()
    return 1.0 if s == 0 else float(2.0 * np.logical_and(a, b).sum() / s)


def _mask_array(v) -> np.ndarray:
    arr = v.data if isinstance(v, (Volume, Tensor)) else np.asarray(v, dtype=np.float32)
    return arr[0] if arr.ndim == 4 else arr


def train_source(net: SegNet, dataset, iters: int, lr: float = 1e-2,
                 augment_spec: AugmentSpec | None = None, rng: np.random.Generator | None = None,
                 snapshots: dict | None = None, snapshot_at=()) -> SegNet:
    """Supervised Dice training on labeled samples.

    Each iteration draws one sample, augments it, and takes one SGD step.
    A record ``{"iter", "loss", "case"}`` is appended to ``net.history`` per
    iteration. If ``snapshots`` is a dict, parameter copies are stored in it
    after the iteration counts listed in ``snapshot_at``.
    """
    rng = rng or np.random.default_rng(0)
    augment_spec = augment_spec or AugmentSpec()
    net.train()
    marks = set(int(m) for m in snapshot_at)
    for it in range(iters):
        s = dataset[int(rng.integers(len(dataset)))]
        s = augment(s, augment_spec, rng)
        probs = seg_forward(net, s.image)
        loss = dice_loss(probs[1], _mask_array(s.mask))
        net.params.zero_grad()
        ad.backward(loss)
        sgd_step(net.params, lr)
        net.history.append({"iter": it, "loss": loss.item(), "case": s.case_id})
        if snapshots is not None and (it + 1) in marks:
            snapshots[it + 1] = net.params.copy()
    return net


def predict_proba(net: SegNet, image) -> np.ndarray:
    """Foreground probability map in eval mode, without recording a graph."""
    was = net.training
    net.eval()
    try:
        with ad.no_grad():
            return seg_forward(net, image).data[1].copy()
    finally:
        net.training = was


def predict_mask(net: SegNet, image, threshold: float = 0.5) -> Volume:
    probs = predict_proba(net, image)
    spacing = image.spacing if isinstance(image, Volume) else (1.0, 1.0, 1.0)
    return Volume((probs > threshold).astype(np.float32)[None], spacing)
