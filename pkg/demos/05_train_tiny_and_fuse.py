"""
Training a tiny model on synthetic textures, then deploying it
==============================================================

The point of keeping the heavy branch structure around during training
is that it costs nothing at deployment. This script trains the smallest
variant on a seeded synthetic texture-classification task, fuses it,
and checks that the deployed model makes the same predictions.

Runs on one CPU core in a minute or two.
"""

import numpy as np

from fmvit import (TrainConfig, build_model, calibrate_bn, count_params,
                   evaluate, fuse_model, generate_dataset, prediction_match,
                   train)
from fmvit.tensor import Tensor

ds = generate_dataset(seed=7, n_samples=192, n_classes=8, image_dims=(3, 32, 32))
print(f"dataset: {ds.images.shape[0]} samples, {ds.n_classes} classes, "
      f"{ds.images.shape[1:]} each, kind {ds.generator_kind!r}")

model = build_model("nano", classes=8, seed=1)
calibrate_bn(model, Tensor(ds.images[:32]))

config = TrainConfig(steps=250, batch_size=32, lr=0.002, optimizer="adamw-lite",
                     warmup_steps=40, weight_decay=0.01, seed=1, eval_every=50)
print(f"\ntraining {count_params(model).total_params:,} params "
      f"for {config.steps} steps of {config.optimizer} ...")

history = train(model, ds, config)
for rec in [history[0]] + [r for r in history if "eval_acc" in r]:
    tail = f"  full-set acc {rec['eval_acc']:.3f}" if "eval_acc" in rec else ""
    print(f"  step {rec['step']:>4}  lr {rec['lr']:.2e}  "
          f"loss {rec['loss']:.3f}  batch acc {rec['acc']:.3f}{tail}")

result = evaluate(model, ds)
print(f"\ntrain accuracy: {result.accuracy:.3f}  mean loss {result.mean_loss:.3f}")

fused = fuse_model(model)
match = prediction_match(model, fused, ds)
print(f"deployed model params: {count_params(fused).total_params:,}")
print(f"prediction agreement after fusion: {match:.4f}")
