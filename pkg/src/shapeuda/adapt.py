"""Teacher-student adaptation to an unlabeled target domain.

The frozen teacher is the source segmenter plus the shape VAE. The student
starts as an exact copy of the source segmenter and is fine-tuned on target
images by minimising

    lambda_recon * L_recon(student) + L_pseudo(teacher, student)

where L_recon is the VAE reconstruction Dice loss of the student's soft
prediction and L_pseudo is the Dice loss against the teacher's prediction.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import sgd_step
from .segnet import SegNet, dice_loss, predict_mask, predict_proba, seg_forward
from .shape_vae import ShapeVae, recon_loss
from .volume import Volume

RUNNING_STATS = ("running_mean", "running_var")
LOG_HEADER = ("iter", "L_recon", "L_pseudo", "λ_recon", "total")
# diagnostic key for each log column
_LOG_KEYS = ("iter", "L_recon", "L_pseudo", "lambda_recon", "total")


@dataclass
class TeacherBundle:
    source: SegNet
    vae: ShapeVae

    def __post_init__(self):
        self.source.eval()
        self.source.params.set_trainable(False)
        self.vae.freeze()

    def checksum(self) -> str:
        return self.source.params.checksum() + self.vae.params.checksum()

    def student(self) -> SegNet:
        """Fresh trainable copy of the source segmenter."""
        s = self.source.clone()
        s.params.set_trainable(True, lambda name: not name.endswith(RUNNING_STATS))
        return s.train()

    def teacher_proba(self, image) -> np.ndarray:
        return predict_proba(self.source, image)


@dataclass(frozen=True)
class AdaptConfig:
    lambda_hat: float = 1.0
    thresholds: tuple[float, ...] = (0.15, 0.225, 0.3)
    gammas: tuple[float, ...] = (0.6, 1.2, 2.0, 3.0)
    lr: float = 1e-2
    iters: int = 200
    dynamic: bool = False
    ttt: bool = False
    use_pseudo: bool = True
    use_recon: bool = True
    hard_teacher: bool = False
    threshold: float = 0.5

    def __post_init__(self):
        th = tuple(float(t) for t in self.thresholds)
        object.__setattr__(self, "thresholds", th)
        object.__setattr__(self, "gammas", tuple(float(g) for g in self.gammas))
        if any(b <= a for a, b in zip(th, th[1:])):
            raise ValueError(f"thresholds must be strictly increasing, got {th}")
        if len(self.gammas) != len(th) + 1:
            raise ValueError(f"need {len(th) + 1} gamma factors for {len(th)} thresholds, got {len(self.gammas)}")
        if self.lambda_hat < 0 or self.lr < 0 or self.iters < 0:
            raise ValueError("lambda_hat, lr and iters must be non-negative")

    def with_(self, **kw) -> "AdaptConfig":
        return replace(self, **kw)


def pseudo_loss(teacher_pred, student_pred) -> Tensor:
    """Dice loss between a fixed teacher prediction and the student prediction."""
    t = teacher_pred.data if isinstance(teacher_pred, (Volume, Tensor)) else np.asarray(teacher_pred, np.float32)
    if t.ndim == 4:
        t = t[0]
    return dice_loss(student_pred, Tensor(t))


def dynamic_lambda(shortfall: float, cfg: AdaptConfig) -> float:
    """Reconstruction weight for a given reconstruction Dice shortfall (1 - Dice).

    The thresholds split the shortfall axis into bins, each with its own
    factor; a value exactly on a threshold belongs to the upper bin.
    """
    b = int(np.searchsorted(cfg.thresholds, shortfall, side="right"))
    return cfg.gammas[b] * cfg.lambda_hat


def teacher_loss(bundle: TeacherBundle, student: SegNet, image, cfg: AdaptConfig,
                 teacher_pred: np.ndarray | None = None) -> tuple[Tensor, dict]:
    """Combined objective on one target image plus its components.

    Returns ``(loss, diag)`` with ``diag`` holding ``L_recon``, ``L_pseudo``,
    ``lambda_recon`` and ``total`` as floats.
    """
    if teacher_pred is None:
        teacher_pred = bundle.teacher_proba(image)
    if cfg.hard_teacher:
        teacher_pred = (teacher_pred > cfg.threshold).astype(np.float32)
    fg = seg_forward(student, image)[1]
    l_pseudo = pseudo_loss(teacher_pred, fg)

    if cfg.dynamic or cfg.lambda_hat > 0:
        l_recon = recon_loss(bundle.vae, fg)
    else:
        with ad.no_grad():
            l_recon = recon_loss(bundle.vae, fg.detach())
    lam = dynamic_lambda(1.0 + l_recon.item(), cfg) if cfg.dynamic else cfg.lambda_hat
    if not cfg.use_recon:
        lam = 0.0

    if cfg.use_pseudo and lam > 0:
        total = lam * l_recon + l_pseudo
    elif cfg.use_pseudo:
        total = l_pseudo
    else:
        total = lam * l_recon
    diag = {"L_recon": l_recon.item(), "L_pseudo": l_pseudo.item(), "lambda_recon": float(lam),
            "total": total.item()}
    return total, diag


def _assert_frozen(bundle: TeacherBundle, before: str):
    if bundle.checksum() != before:
        raise RuntimeError("teacher parameters changed during adaptation")


def adapt(bundle: TeacherBundle, student: SegNet, target_images, cfg: AdaptConfig,
          rng: np.random.Generator | None = None, log: list | None = None,
          teacher_preds: list | None = None, loss_fn=None) -> SegNet:
    """Fine-tune ``student`` on unlabeled target images for ``cfg.iters`` steps.

    ``loss_fn(student, image, teacher_pred) -> (loss, diag)`` replaces the
    teacher objective (used by the discriminator baseline).
    """
    # checksums cover names and values only, trainable flags may differ
    if student.params.checksum() != bundle.source.params.checksum():
        raise ValueError("student must start as an exact copy of the source segmenter")
    rng = rng or np.random.default_rng(0)
    before = bundle.checksum()
    if teacher_preds is None:
        teacher_preds = [bundle.teacher_proba(x) for x in target_images]
    student.train()
    for it in range(cfg.iters):
        i = int(rng.integers(len(target_images)))
        if loss_fn is None:
            loss, diag = teacher_loss(bundle, student, target_images[i], cfg, teacher_preds[i])
        else:
            loss, diag = loss_fn(student, target_images[i], teacher_preds[i])
        if not np.isfinite(diag["total"]):
            raise FloatingPointError(f"non-finite adaptation loss at iteration {it}")
        student.params.zero_grad()
        ad.backward(loss)
        sgd_step(student.params, cfg.lr)
        if log is not None:
            log.append({"iter": it, **diag})
    _assert_frozen(bundle, before)
    return student


def write_adapt_log(path, log):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_HEADER)
        for r in log:
            w.writerow([r["iter"]] + [repr(float(r[k])) for k in _LOG_KEYS[1:]])


def read_adapt_log(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    cols = list(zip(LOG_HEADER, _LOG_KEYS))[1:]
    return [{"iter": int(r["iter"]), **{k: float(r[h]) for h, k in cols}} for r in rows]


def test_time_predict(bundle: TeacherBundle, student: SegNet, image, cfg: AdaptConfig,
                      teacher_pred: np.ndarray | None = None) -> Volume:
    """One teacher-loss step on a throwaway copy of the student, then predict.

    The step uses per-sample batch-norm statistics, as adaptation does; the
    running statistics it would update are put back before predicting, so
    with ``lr=0`` the result equals plain prediction. The persistent student
    is never modified.
    """
    clone = student.clone().train()
    _ttt_step(bundle, clone, image, cfg, teacher_pred)
    for name in clone.params:
        if name.endswith(RUNNING_STATS):
            clone.params[name].data = student.params[name].data.copy()
    return predict_mask(clone.eval(), image, cfg.threshold)


test_time_predict.__test__ = False  # not a pytest test despite the name


def _ttt_step(bundle, clone, image, cfg, teacher_pred):
    loss, diag = teacher_loss(bundle, clone, image, cfg, teacher_pred)
    clone.params.zero_grad()
    ad.backward(loss)
    sgd_step(clone.params, cfg.lr)
    return loss, diag


def baseline_direct_test(bundle: TeacherBundle, images, threshold: float = 0.5) -> list[Volume]:
    """Source segmenter applied to target images without adaptation."""
    return [predict_mask(bundle.source, x, threshold) for x in images]


def baseline_pseudo_only(bundle: TeacherBundle, student: SegNet, target_images, cfg: AdaptConfig,
                         rng=None, log=None, teacher_preds=None) -> SegNet:
    return adapt(bundle, student, target_images, cfg.with_(use_recon=False, dynamic=False, lambda_hat=0.0),
                 rng=rng, log=log, teacher_preds=teacher_preds)


__all__ = [
    "AdaptConfig", "TeacherBundle", "adapt", "baseline_direct_test", "baseline_pseudo_only",
    "dynamic_lambda", "pseudo_loss", "read_adapt_log", "teacher_loss", "test_time_predict",
    "write_adapt_log",
]
