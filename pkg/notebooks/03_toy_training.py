# %% [markdown]
# # Training on synthetic scenes
#
# Shapes on a plain background, four classes, 64 x 64 pixels. The toy
# configuration shrinks the widths so a few hundred steps run in minutes on
# one core. Set STEPS higher for a better model.

# %%
from pathlib import Path

from unept.config import load_config
from unept.trainer import evaluate, load_data, predict, train

STEPS = 60
cfg = load_config(Path(__file__).resolve().parents[1] / "configs" / "toy.cfg") if "__file__" in globals() \
    else load_config("configs/toy.cfg")
cfg = cfg.replace(steps=STEPS, eval_every=20)
train_set, val_set = load_data(cfg)
print(len(train_set), "train /", len(val_set), "val scenes")

# %%
result = train(cfg, data=(train_set, val_set), log=print)

# %%
report = evaluate(result.model, val_set, cfg.num_classes)
for k, v in report.as_dict().items():
    print(f"{k:20s} {v:.4f}")

# %%
sample = val_set[0]
pred = predict(result.model, sample.image)
print("pixels changed by refinement:", int((pred.coarse != pred.refined).sum()))
print("accuracy raw / refined:", (pred.coarse == sample.labels).mean(), (pred.refined == sample.labels).mean())
