"""
Saving and resuming training
============================

A checkpoint stores weights, momentum buffers and the iteration counter, so
a resumed run continues exactly where the original left off.
"""

import os
import tempfile

import numpy as np

from csrcnn.checkpoint import load_checkpoint, save_checkpoint
from csrcnn.data import ImageY, make_samples
from csrcnn.model import build_cascade
from csrcnn.training import TrainConfig, format_history, train

samples = make_samples(ImageY(np.random.default_rng(0).random((48, 48))), 24, 12)
cfg = TrainConfig(total_iters=20, batch_size=4, seed=3)

model = build_cascade(seed=1)
train(model, samples, cfg, iters=10)
path = os.path.join(tempfile.mkdtemp(), "model.csrc")
save_checkpoint(model, path)
print("saved at iteration", model.iteration, os.path.getsize(path), "bytes")

rest_a = train(model, samples, cfg)
rest_b = train(load_checkpoint(path), samples, cfg)
print(format_history(rest_a))
print("resumed histories identical:", format_history(rest_a) == format_history(rest_b))
