# %% [markdown]
# # The shape VAE as a quality score
#
# Train the mask VAE on source-domain ground truth, then check how its
# reconstruction Dice ranks masks that were corrupted to known Dice levels.
# A shorter schedule than the experiments keeps this to a couple of minutes.

# %%
import numpy as np

from shapeuda.data.benchmark import make_benchmark
from shapeuda.experiments import ExperimentConfig
from shapeuda.quality import quality_suite
from shapeuda.segnet import dice_score
from shapeuda.shape_vae import build_vae, reconstruct, train_vae

cfg = ExperimentConfig().with_(vae_iters=400, vae_decays=(300,))
bm = make_benchmark(cfg.seed, cfg.size, (cfg.n_source_train, cfg.n_source_test),
                    (cfg.n_target_train, cfg.n_target_test))
train_masks = [s.mask for s in bm.source_train]
print("source train masks:", len(train_masks), "foreground fraction",
      np.round([m.data.mean() for m in train_masks[:5]], 3))

# %%
vae = build_vae(cfg.vae(), seed=cfg.seed)
train_vae(vae, train_masks, cfg.vae_iters, rng=np.random.default_rng([cfg.seed, 2]), **cfg.vae_training())
recon = [r["recon"] for r in vae.history]
for start in range(0, len(recon), 100):
    print(f"iters {start:4d}-{start + 99:4d}  mean train recon loss {np.mean(recon[start:start + 100]):.3f}")

# %% [markdown]
# Held-out masks go through the mean latent only, the same path the
# adaptation loss uses.

# %%
vae.eval()
held = [dice_score(reconstruct(vae, s.mask).data > 0.5, s.mask.data[0]) for s in bm.source_test]
print(f"held-out reconstruction Dice: mean {np.mean(held):.3f}, worst {np.min(held):.3f}")

# %% [markdown]
# Corrupt each held-out mask by erosion, dilation and speckle noise to Dice
# levels 1.0 down to 0.3 and compare the score with the true Dice.

# %%
suite = quality_suite(vae, [s.mask for s in bm.source_test[:8]], np.random.default_rng(0))
print(f"Spearman rank correlation: {suite.spearman:.3f}")
for kind in ("erosion", "dilation", "noise"):
    sel = [i for i, k in enumerate(suite.kinds) if k == kind]
    pairs = sorted(zip(suite.true[sel], suite.score[sel]), reverse=True)[:: len(sel) // 4]
    print(kind, "  ".join(f"{t:.2f}->{s:.2f}" for t, s in pairs))
