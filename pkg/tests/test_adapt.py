import numpy as np
import pytest

from shapeuda import autodiff as ad
from shapeuda.adapt import (LOG_HEADER, AdaptConfig, TeacherBundle, adapt, baseline_direct_test,
                            baseline_pseudo_only, dynamic_lambda, pseudo_loss, read_adapt_log, teacher_loss,
                            test_time_predict, write_adapt_log)
from shapeuda.baselines import (baseline_discriminator_adapt, build_discriminator, discriminator_score,
                                gen_discriminator_corpus, train_discriminator)
from shapeuda.data.benchmark import SOURCE, TARGET
from shapeuda.data.synth import generate_set
from shapeuda.params import finite_diff_check
from shapeuda.segnet import UNetConfig, build_unet, predict_mask, seg_forward
from shapeuda.shape_vae import VaeConfig, build_vae

EPS = 1e-5


# pseudo loss

def test_pseudo_loss_examples():
    t = np.zeros((4, 4, 4), np.float32)
    t[1:3] = 1
    assert pseudo_loss(t, ad.Tensor(t)).item() == pytest.approx(-1.0, abs=1e-6)
    assert abs(pseudo_loss(t, ad.Tensor(1 - t)).item()) < 1e-4


def test_pseudo_loss_hand_case():
    teacher = np.full((2, 2, 2), 0.5, np.float32)
    student = np.zeros((2, 2, 2), np.float32)
    student[:, :, 0] = 1
    expected = -(2 * 0.5 * 4 + EPS) / (4 + 4 + EPS)
    assert pseudo_loss(teacher, ad.Tensor(student)).item() == pytest.approx(expected, abs=1e-7)


def test_pseudo_loss_gradient_reaches_student_only():
    rng = np.random.default_rng(0)
    s = ad.Tensor(rng.uniform(0.1, 0.9, (3, 3, 3)), requires_grad=True)
    t = rng.uniform(size=(3, 3, 3)).astype(np.float32)
    assert finite_diff_check(lambda: pseudo_loss(t, s), [s], rng=rng) <= 1e-3


# dynamic lambda

CFG = AdaptConfig(lambda_hat=0.5)


@pytest.mark.parametrize("shortfall,gamma", [(0.10, 0.6), (0.25, 2.0), (0.35, 3.0), (0.0, 0.6), (1.0, 3.0)])
def test_dynamic_lambda_examples(shortfall, gamma):
    assert dynamic_lambda(shortfall, CFG) == pytest.approx(gamma * 0.5)


def test_dynamic_lambda_boundaries_fall_in_upper_bin():
    for i, th in enumerate(CFG.thresholds):
        assert dynamic_lambda(th - 1e-9, CFG) == CFG.gammas[i] * 0.5
        assert dynamic_lambda(th, CFG) == CFG.gammas[i + 1] * 0.5
        assert dynamic_lambda(th + 1e-9, CFG) == CFG.gammas[i + 1] * 0.5


def test_dynamic_lambda_monotone():
    grid = sorted({x for t in CFG.thresholds for x in (t - 1e-9, t, t + 1e-9)} | set(np.linspace(0, 1, 101)))
    vals = [dynamic_lambda(x, CFG) for x in grid]
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_adapt_config_validation():
    with pytest.raises(ValueError):
        AdaptConfig(thresholds=(0.2, 0.1, 0.3))
    with pytest.raises(ValueError):
        AdaptConfig(gammas=(1.0, 2.0))
    with pytest.raises(ValueError):
        AdaptConfig(lr=-1.0)


# teacher loss and adaptation on a tiny 16^3 setup

UCFG = UNetConfig(depth=2, channels=(2, 4, 4))
VCFG = VaeConfig(latent_dim=8, depth=2, channels=(2, 4, 4), input_size=16)


@pytest.fixture
def bundle():
    return TeacherBundle(build_unet(UCFG, seed=1), build_vae(VCFG, seed=2))


@pytest.fixture(scope="module")
def target():
    return generate_set([10, 11, 12], TARGET, 16, "t")


def _images(target):
    return [s.image for s in target]


def test_teacher_loss_lambda_zero_is_pseudo(bundle, target):
    img = target[0].image
    student = bundle.student()
    loss, diag = teacher_loss(bundle, student, img, AdaptConfig(lambda_hat=0.0))
    fg = seg_forward(student, img)[1]
    assert loss.item() == pseudo_loss(bundle.teacher_proba(img), fg).item()
    assert diag["lambda_recon"] == 0.0


@pytest.mark.parametrize("cfg", [AdaptConfig(lambda_hat=0.7), AdaptConfig(lambda_hat=0.3, dynamic=True)])
def test_teacher_loss_diagnostics_compose(bundle, target, cfg):
    loss, d = teacher_loss(bundle, bundle.student(), target[1].image, cfg)
    lam_t = ad.Tensor(np.float32(d["lambda_recon"]))
    # recompose in the engine's float32 arithmetic
    recomposed = (lam_t * ad.Tensor(np.float32(d["L_recon"])) + ad.Tensor(np.float32(d["L_pseudo"]))).item()
    assert d["total"] == loss.item() == recomposed
    if cfg.dynamic:
        assert d["lambda_recon"] == dynamic_lambda(1 + d["L_recon"], cfg)


def test_teacher_loss_perfect_agreement(bundle, target, monkeypatch):
    import shapeuda.adapt as A
    img = target[0].image
    y = target[0].mask.data[0]
    monkeypatch.setattr(A, "recon_loss", lambda vae, p: -ad.Tensor(np.float32(1.0)) + 0 * ad.sum(p))
    monkeypatch.setattr(A, "seg_forward", lambda net, x: ad.Tensor(np.stack([1 - y, y])))
    loss, _ = teacher_loss(bundle, bundle.student(), img, AdaptConfig(lambda_hat=0.4), teacher_pred=y)
    assert loss.item() == pytest.approx(-1.4, abs=1e-5)


def test_teacher_loss_gradient(bundle, target):
    # the VAE's instance norm makes the loss sharply curved around a near-uniform
    # soft prediction, so compare in float64 with a small step
    student = bundle.student()
    cfg = AdaptConfig(lambda_hat=1.0)
    tp = bundle.teacher_proba(target[0].image)
    with ad.precision(np.float64):
        for store in (student.params, bundle.vae.params):
            for name in store:
                store[name].data = store[name].data.astype(np.float64)
        for name in ("head.weight", "up0.conv1.weight", "stem.conv.weight"):
            err = finite_diff_check(lambda: teacher_loss(bundle, student, target[0].image, cfg, tp)[0],
                                    [student.params[name]], h=1e-7, rng=np.random.default_rng(0))
            assert err <= 1e-3, name


def test_adapt_keeps_teacher_frozen_and_logs(bundle, target, tmp_path):
    before = bundle.checksum()
    log = []
    student = adapt(bundle, bundle.student(), _images(target), AdaptConfig(iters=4, lr=0.05),
                    rng=np.random.default_rng(0), log=log)
    assert bundle.checksum() == before
    assert student.params.checksum() != bundle.source.params.checksum()
    assert [r["iter"] for r in log] == [0, 1, 2, 3]
    path = tmp_path / "log.csv"
    write_adapt_log(path, log)
    header = path.read_text(encoding="utf-8").splitlines()[0]
    assert header == "iter,L_recon,L_pseudo,λ_recon,total"
    assert tuple(header.split(",")) == LOG_HEADER
    back = read_adapt_log(path)
    assert back == [{k: r[k] for k in ("iter", "L_recon", "L_pseudo", "lambda_recon", "total")} for r in log]


def test_adapt_rejects_student_not_copied_from_source(bundle, target):
    other = build_unet(UCFG, seed=99)
    with pytest.raises(ValueError):
        adapt(bundle, other, _images(target), AdaptConfig(iters=1))


def test_adapt_detects_teacher_mutation(bundle, target):
    def sneaky(student, image, tp):
        bundle.source.params["head.bias"].data[0] += 1.0
        return pseudo_loss(tp, seg_forward(student, image)[1]), {"total": 0.0}

    with pytest.raises(RuntimeError):
        adapt(bundle, bundle.student(), _images(target), AdaptConfig(iters=1), loss_fn=sneaky)


def test_lambda_zero_bitwise_equals_pseudo_only(bundle, target):
    cfg = AdaptConfig(iters=3, lr=0.05, lambda_hat=0.0)
    a = adapt(bundle, bundle.student(), _images(target), cfg, rng=np.random.default_rng(5))
    b = baseline_pseudo_only(bundle, bundle.student(), _images(target), AdaptConfig(iters=3, lr=0.05),
                             rng=np.random.default_rng(5))
    assert a.params.checksum() == b.params.checksum()


def test_adapt_is_reproducible(bundle, target):
    cfg = AdaptConfig(iters=3, lr=0.05, dynamic=True)
    runs = [adapt(bundle, bundle.student(), _images(target), cfg, rng=np.random.default_rng(2)) for _ in range(2)]
    assert runs[0].params.checksum() == runs[1].params.checksum()


def test_recon_only_drops_pseudo_term(bundle, target):
    _, d = teacher_loss(bundle, bundle.student(), target[0].image, AdaptConfig(use_pseudo=False))
    assert d["total"] == pytest.approx(d["lambda_recon"] * d["L_recon"])


# test-time training

def test_ttt_lr_zero_equals_plain_prediction(bundle, target):
    student = bundle.student()
    for s in target:
        got = test_time_predict(bundle, student, s.image, AdaptConfig(lr=0.0))
        assert got == predict_mask(student, s.image)


def test_ttt_leaves_persistent_student_unchanged(bundle, target):
    student = bundle.student()
    before, teacher = student.params.checksum(), bundle.checksum()
    changed = False
    for i in range(10):
        img = target[i % len(target)].image
        got = test_time_predict(bundle, student, img, AdaptConfig(lr=0.5))
        changed |= got != predict_mask(student, img)
    assert student.params.checksum() == before
    assert bundle.checksum() == teacher
    assert student.training  # mode untouched too
    assert changed


def test_direct_test_uses_source(bundle, target):
    preds = baseline_direct_test(bundle, _images(target))
    assert preds[0] == predict_mask(bundle.source, target[0].image)


# discriminator baseline

@pytest.fixture(scope="module")
def disc_setup():
    src = generate_set([1, 2], SOURCE, 16, "s")
    net = build_unet(UCFG, seed=1)
    corpus = gen_discriminator_corpus(src, [net.params.copy()], UCFG)
    return src, corpus


def test_discriminator_corpus(disc_setup):
    src, corpus = disc_setup
    assert len(corpus) == 2 * len(src)
    assert all(0.0 <= d <= 1.0 for _, d in corpus)
    assert [d for _, d in corpus[-2:]] == [1.0, 1.0]


def test_discriminator_output_in_unit_interval(disc_setup):
    _, corpus = disc_setup
    disc = train_discriminator(corpus, 3, 0.05, np.random.default_rng(0), build_discriminator((2, 4), 16))
    rng = np.random.default_rng(1)
    for _ in range(5):
        v = discriminator_score(disc, rng.uniform(size=(16, 16, 16))).item()
        assert 0.0 <= v <= 1.0


def test_discriminator_adapt_keeps_teacher_frozen(bundle, target, disc_setup):
    _, corpus = disc_setup
    disc = train_discriminator(corpus, 2, 0.05, np.random.default_rng(0), build_discriminator((2, 4), 16)).freeze()
    before, dsum = bundle.checksum(), disc.params.checksum()
    baseline_discriminator_adapt(bundle, bundle.student(), disc, _images(target), AdaptConfig(iters=2, lr=0.05),
                                 rng=np.random.default_rng(0))
    assert bundle.checksum() == before and disc.params.checksum() == dsum
