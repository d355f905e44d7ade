"""
Training a cascade on two crops
===============================

Three x2 stages learn to map 12x12 crops up to 96x96, with every
intermediate output scored against its own target.
"""

import numpy as np
import skimage.data as sd

from csrcnn.data import ImageY, bicubic_resample, make_samples, rgb_to_y, save_image_y
from csrcnn.evaluate import psnr
from csrcnn.model import build_cascade, cascade_forward
from csrcnn.training import TrainConfig, train

crops = [ImageY(sd.camera()[200:296, 200:296] / 255.0),
         ImageY(rgb_to_y(sd.astronaut()[100:196, 180:276] / 255.0))]
samples = [s for c in crops for s in make_samples(c, hr_patch=96, stride=96)]
print("input", samples[0].input.shape, "targets", [t.shape for t in samples[0].targets])

model = build_cascade(seed=0)
print(model.num_params(), "parameters in", model.stage_count, "stages")

# About two minutes on one CPU core; fewer iterations stay below bicubic
cfg = TrainConfig(total_iters=2500, lr_conv=5e-3, lr_deconv=5e-4, batch_size=2)
history = train(model, samples, cfg,
                callback=lambda r: r.iter % 250 or print(r.iter, f"{r.total_loss:.4f}", r.lr_conv))

# Each stage output against a bicubic enlargement of the same LR input
s = samples[0]
for k, (out, target) in enumerate(zip(cascade_forward(model, s.input[None]), s.targets)):
    bic = bicubic_resample(s.input[0].astype(np.float64), *target.shape[1:])
    print(f"stage {k}: cascade {psnr(np.clip(out[0, 0], 0, 1), target[0]):.2f} dB, "
          f"bicubic {psnr(bic, target[0]):.2f} dB")
save_image_y(np.clip(out[0, 0], 0, 1), "tiny_cascade_x8.png")
