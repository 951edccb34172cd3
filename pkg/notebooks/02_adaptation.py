# %% [markdown]
# # Adapting the segmenter to the target domain
#
# Full desk-scale run: source segmenter and shape VAE trained from scratch,
# then the ablation table, the reconstruction-weight sweep and the loss-space
# scatter. Expect around half an hour on one CPU core; trained networks are
# cached under ``runs/cache`` so a second run starts at the adaptation stage.

# %%
from pathlib import Path

from shapeuda.experiments import (ExperimentConfig, Pipeline, format_table, run_ablation, run_lambda_sweep,
                                  run_loss_scatter, write_scatter)

out = Path("runs/notebook")
pipe = Pipeline(ExperimentConfig(), cache_dir="runs/cache", verbose=True)
bm = pipe.benchmark
print({k: len(v) for k, v in zip(("source_train", "source_test", "target_train", "target_test"), bm)})

# %% [markdown]
# Direct test is the source segmenter on target images. The remaining rows
# each fine-tune a copy of it on unlabeled target images.

# %%
print(format_table(run_ablation(pipe), "ablation"))

# %%
print(format_table(run_lambda_sweep(pipe), "reconstruction weight"))

# %% [markdown]
# Each target test case as a point (L_pseudo, L_recon), for the pseudo
# label, the ground truth and the adapted prediction.

# %%
res = run_loss_scatter(pipe)
summary = write_scatter(out, res)
print(summary)
print("phase seconds:", {k: round(v) for k, v in pipe.phases.items()})
