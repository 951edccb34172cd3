"""Discriminator baseline: a learned mask-quality regressor used as an extra loss."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .adapt import AdaptConfig, TeacherBundle, adapt, pseudo_loss
from .params import ParamStore, sgd_step
from .segnet import SegNet, dice_score, predict_mask, seg_forward
from .volume import Volume


@dataclass
class DiscriminatorNet:
    channels: tuple[int, ...]
    input_size: int
    params: ParamStore
    training: bool = True
    history: list = field(default_factory=list)

    def freeze(self) -> "DiscriminatorNet":
        self.params.set_trainable(False)
        self.training = False
        return self


def build_discriminator(channels=(4, 8, 16), input_size: int = 32, seed: int = 0) -> DiscriminatorNet:
    rng = np.random.default_rng(seed)
    store = ParamStore()
    cin = 1
    for i, c in enumerate(channels):
        nn.add_down_block(store, f"enc{i}", cin, c, rng)
        cin = c
    side = input_size // 2 ** len(channels)
    nn.add_linear(store, "head", channels[-1] * side ** 3, 1, rng)
    return DiscriminatorNet(tuple(channels), input_size, store)


def discriminator_score(net: DiscriminatorNet, mask) -> ad.Tensor:
    """Predicted Dice of a (soft) mask, a scalar in (0, 1)."""
    if isinstance(mask, ad.Tensor):
        x = ad.reshape(mask, (1,) + mask.shape[-3:])
    else:
        arr = mask.data if isinstance(mask, Volume) else np.asarray(mask, np.float32)
        x = ad.Tensor(arr.reshape((1,) + arr.shape[-3:]))
    for i in range(len(net.channels)):
        x = nn.down_block(net.params, f"enc{i}", x, net.training)
    return ad.sigmoid(nn.linear(net.params, "head", ad.reshape(x, (-1,))))[0]


def gen_discriminator_corpus(samples, snapshots, config) -> list[tuple[np.ndarray, float]]:
    """Masks of mixed quality paired with their true Dice.

    ``snapshots`` are parameter stores of the source segmenter saved at
    several points of training; each predicts every sample. Ground-truth masks
    are added with Dice 1.
    """
    corpus = []
    for params in snapshots:
        net = SegNet(config, params.copy()).eval()
        for s in samples:
            gt = s.mask.data[0]
            pred = predict_mask(net, s.image).data[0]
            corpus.append((pred, dice_score(pred, gt)))
    corpus.extend((s.mask.data[0].copy(), 1.0) for s in samples)
    return corpus


def train_discriminator(corpus, iters: int, lr: float = 1e-2, rng=None,
                        net: DiscriminatorNet | None = None) -> DiscriminatorNet:
    """Squared-error regression of the true Dice."""
    rng = rng or np.random.default_rng(0)
    net = net or build_discriminator(input_size=corpus[0][0].shape[-1])
    net.training = True
    for it in range(iters):
        mask, target = corpus[int(rng.integers(len(corpus)))]
        loss = ad.square(discriminator_score(net, mask) - float(target))
        net.params.zero_grad()
        ad.backward(loss)
        sgd_step(net.params, lr)
        net.history.append({"iter": it, "loss": loss.item()})
    net.training = False
    return net


def baseline_discriminator_adapt(bundle: TeacherBundle, student: SegNet, disc: DiscriminatorNet, target_images,
                                 cfg: AdaptConfig, weight: float = 1.0, rng=None, log=None,
                                 teacher_preds=None) -> SegNet:
    """Pseudo-loss adaptation with the discriminator's predicted score as a reward."""
    disc.freeze()

    def loss_fn(net, image, teacher_pred):
        fg = seg_forward(net, image)[1]
        lp = pseudo_loss(teacher_pred, fg)
        score = discriminator_score(disc, fg)
        total = lp - weight * score
        return total, {"L_recon": -score.item(), "L_pseudo": lp.item(), "lambda_recon": weight,
                       "total": total.item()}

    return adapt(bundle, student, target_images, cfg, rng=rng, log=log, teacher_preds=teacher_preds,
                 loss_fn=loss_fn)
