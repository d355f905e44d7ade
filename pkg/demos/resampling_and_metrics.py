"""
Bicubic resampling and image metrics
====================================

The bicubic baseline and the PSNR/SSIM metrics that every comparison uses.
"""

import numpy as np
import skimage.data as sd

from csrcnn.data import ImageY, bicubic_resample, cubic_kernel, quantize
from csrcnn.evaluate import make_lr, psnr, ssim

# The Keys kernel with a = -0.5 interpolates: 1 at zero, 0 at other integers
print(cubic_kernel(np.array([0.0, 0.5, 1.0, 1.5, 2.0])))

# Downscale a test image and bring it back up
hr = ImageY(quantize(sd.camera() / 255.0))
for factor in (2, 3, 4, 8):
    lr = make_lr(hr.values, factor)
    up = quantize(bicubic_resample(lr, *hr.shape))
    print(f"x{factor}: LR {lr.shape}, PSNR {psnr(up, hr.values, factor):.2f} dB, "
          f"SSIM {ssim(up, hr.values, factor):.4f}")

# Identical images give an infinite PSNR and an SSIM of exactly one
print(psnr(hr, hr), ssim(hr, hr))
