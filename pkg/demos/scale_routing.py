"""
One model, several scale factors
================================

An LR image enters the cascade at the stage whose remaining upscale fits the
requested factor. Factor 3 is bicubic-enlarged to half the HR size and then
doubled by the last stage.
"""

import numpy as np

from csrcnn.evaluate import entry_stage, route_and_superresolve
from csrcnn.model import build_cascade

model = build_cascade(seed=0)
print("stage input sizes relative to HR:", [str(r) for r in model.scale_ratios])

hr_shape = (48, 64)
rng = np.random.default_rng(0)
for factor in (2, 3, 4, 8):
    lr = rng.random((round(48 / factor), round(64 / factor)))
    out = route_and_superresolve(model, lr, factor, hr_shape)
    print(f"x{factor}: LR {lr.shape} enters stage {entry_stage(model, factor)}, "
          f"output {out.shape}, steps {out.provenance}")
